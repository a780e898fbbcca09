//! Writes a model file, reads it back, and checks the rebuilt model gives
//! the same logits.

use hidden_fold::compress::{compress, decompress, read_header, size_report};
use hidden_fold::model::{ArchConfig, Model};
use hidden_fold::ops::Mode;
use hidden_fold::tensor::Tensor;

pub fn main() -> hidden_fold::error::Result<()> {
    let arch = ArchConfig::desk(10);
    let mut model = Model::<f32>::build(&arch, 42)?;
    model.refresh_masks()?;
    let x = Tensor::from_vec(&[8, 3, 8, 8], (0..1536).map(|i| (i as f32 * 0.61).sin()).collect())?;
    // One train-mode pass so the running statistics are not the defaults.
    model.forward(&x, Mode::Train)?;
    let before = model.forward(&x, Mode::Eval)?;

    let bytes = compress(&model, None)?;
    println!("{}\n", read_header(&bytes)?);
    let mut back = decompress(&bytes)?.model;
    let after = back.forward(&x, Mode::Eval)?;
    println!("logits identical: {}", before == after);

    let s = size_report(&arch)?;
    println!(
        "file {} bytes: masks {} + UBN {} + running stats {} + framing",
        bytes.len(),
        s.mask_bytes,
        s.ubn_bytes,
        s.running_stat_bytes
    );
    println!("dense float32 storage would be {} bytes", s.dense_bytes);
    Ok(())
}
