//! How density trades parameters and bytes on the desk model, without
//! training anything. `hfn sweep --axis topk` adds accuracy to this table.

use hidden_fold::compress::size_report;
use hidden_fold::model::ArchConfig;

pub fn main() -> hidden_fold::error::Result<()> {
    println!("{:>5} {:>10} {:>10} {:>10}", "topk", "kept", "bytes", "vs dense");
    for k in (100..=900).step_by(100) {
        let mut arch = ArchConfig::desk(10);
        arch.k_permille = k;
        let s = size_report(&arch)?;
        println!(
            "{:>4}% {:>10} {:>10} {:>9.1}x",
            k / 10,
            s.reported_params,
            s.compressed_bytes,
            s.reduction_vs_dense
        );
    }
    Ok(())
}
