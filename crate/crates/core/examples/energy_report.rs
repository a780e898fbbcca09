//! DRAM load energy of ResNet50 against its supermasked variants, plus the
//! multiply count of one forward pass.

use hidden_fold::cost::{format_energy, mult_count, EnergyParams};
use hidden_fold::report::{zoo_table, Benchmark, Grouping};

pub fn main() -> hidden_fold::error::Result<()> {
    let p = EnergyParams::default();
    let table = zoo_table(Benchmark::Cifar100, Grouping::SameModel)?;
    let energy = table.energy(&p)?;
    print!("{}", energy.to_csv());

    // Folding shares weights but still runs every iteration.
    println!();
    for row in &table.rows {
        let arch = hidden_fold::report::zoo_members(Benchmark::Cifar100, Grouping::SameModel)?
            .into_iter()
            .find(|a| a.label() == row.size.label)
            .expect("row comes from the zoo");
        let macs = mult_count(&arch, 32)?;
        println!(
            "{:<28} {:>6.2} GMAC  {:>12} of fp32 multiplies",
            row.size.label,
            macs.total as f64 / 1e9,
            format_energy(macs.mult_energy(&p, false))
        );
    }
    Ok(())
}
