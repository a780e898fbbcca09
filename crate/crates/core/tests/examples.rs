//! Runs the examples that finish in well under a second, so they cannot rot.

macro_rules! example {
    ($name:ident, $file:literal) => {
        #[path = $file]
        mod $name;

        #[test]
        fn $name() {
            $name::main().unwrap();
        }
    };
}

example!(energy_report, "../examples/energy_report.rs");
example!(supermask_topk, "../examples/supermask_topk.rs");
example!(fold_stage, "../examples/fold_stage.rs");
example!(compress_roundtrip, "../examples/compress_roundtrip.rs");
example!(seeded_weights, "../examples/seeded_weights.rs");
example!(sweep_topk, "../examples/sweep_topk.rs");

#[path = "../examples/paper_tables.rs"]
mod paper_tables;

#[test]
fn paper_tables() {
    for bench in [hidden_fold::report::Benchmark::Cifar100, hidden_fold::report::Benchmark::Imagenet] {
        paper_tables::print_tables(bench).unwrap();
    }
}
