//! Trains the desk preset on synthetic data and saves the best checkpoint.
//!
//!     cargo run --release --example train_desk -- 30

use hidden_fold::cli::{run_training, RunConfig};

fn main() -> hidden_fold::error::Result<()> {
    let mut config = RunConfig::preset("desk-hfn")?;
    if let Some(e) = std::env::args().nth(1) {
        config.train.epochs = e.parse().expect("epochs must be a number");
        config.train.warmup_epochs = config.train.warmup_epochs.min(config.train.epochs - 1);
    }
    let out = std::env::temp_dir().join("hfn-desk");
    let summary = run_training(&config, &out)?;
    println!(
        "best val {:.3} at epoch {}, test {:.3}",
        summary.best_val_top1, summary.best_epoch, summary.test_top1
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
