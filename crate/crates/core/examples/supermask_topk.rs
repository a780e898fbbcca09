//! A supermask in isolation: top-k selection over scores, bit packing, and
//! the straight-through score gradient.

use hidden_fold::rng::RngStream;
use hidden_fold::supermask::{topk_mask, LayerKind, MaskedLayer, Supermask, Trainable};
use hidden_fold::tensor::Tensor;

pub fn main() -> hidden_fold::error::Result<()> {
    let mut rng = RngStream::new(7, 0);
    let scores = Tensor::from_vec(&[2, 6], (0..12).map(|_| rng.normal()).collect())?;
    let mask = topk_mask(&scores, 300)?;
    println!("scores {:?}", scores.data().iter().map(|s| format!("{:+.2}", s)).collect::<Vec<_>>());
    println!("mask   {:?}", mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
    let packed = mask.pack();
    println!("packed {:02x?} ({} bytes for {} weights)", packed, packed.len(), mask.len());
    assert_eq!(Supermask::unpack(mask.shape(), &packed)?, mask);

    // Frozen ±1 weights; only the scores learn.
    let weights = Tensor::from_vec(&[2, 6], (0..12).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect())?;
    let mut layer = MaskedLayer::new("fc", LayerKind::Linear, Trainable::Scores, 300, weights, scores)?;
    let x = Tensor::from_vec(&[1, 6], vec![1.0, 0.5, -0.5, 2.0, 0.0, 1.0])?;
    let y = layer.forward(&x)?;
    layer.backward(&x, &Tensor::from_vec(y.shape(), vec![1.0; 2])?)?;
    println!("output {:?}", y.data());
    println!("score gradient (every score, kept or not):");
    for row in layer.score_grad().chunks(6) {
        println!("  {:?}", row.iter().map(|g| format!("{:+.2}", g)).collect::<Vec<_>>());
    }
    Ok(())
}
