//! Folding a stage: one block's weights reused across iterations, each
//! iteration with its own BatchNorm.

use hidden_fold::model::{count_params, ArchConfig, Method, Model};
use hidden_fold::ops::Mode;
use hidden_fold::tensor::Tensor;

pub fn main() -> hidden_fold::error::Result<()> {
    let hfn = ArchConfig::desk(10);
    let mut hnn = hfn.clone().with_folded(&[]);
    hnn.method = Method::Hnn;
    for arch in [&hnn, &hfn] {
        let pc = count_params(arch)?;
        println!(
            "{:<24} {:>3} masked layers  {:>8} weights  {:>7} kept  {:>5} UBN",
            arch.label(),
            pc.masked_layers,
            pc.dense,
            pc.surviving,
            pc.ubn
        );
    }

    let mut model = Model::<f32>::build(&hfn, 1)?;
    for st in &model.stages {
        println!(
            "stage {}: folded {}, {} block applications, {} masked layers stored",
            st.index + 1,
            st.is_folded(),
            st.iterations() + 1,
            st.layers().len()
        );
    }
    let x = Tensor::from_vec(&[4, 3, 8, 8], (0..768).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect())?;
    let logits = model.forward(&x, Mode::Train)?;
    println!("logits {:?}", logits.shape());
    Ok(())
}
