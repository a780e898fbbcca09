//! Storage of the published architectures, computed from their shapes alone.
//!
//!     cargo run --release --example paper_tables -- imagenet

use hidden_fold::report::{paper_tables, Benchmark};

pub fn print_tables(bench: Benchmark) -> hidden_fold::error::Result<()> {
    for table in paper_tables(bench)? {
        println!("{}", table.to_text());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hidden_fold::error::Result<()> {
    print_tables(std::env::args().nth(1).as_deref().unwrap_or("cifar100").parse()?)
}
