//! Frozen weights are a pure function of (seed, layer): rebuilding from the
//! seed reproduces them bit for bit, and a different seed does not.

use hidden_fold::model::{ArchConfig, Model};
use hidden_fold::rng::{streams, RngStream};

pub fn main() -> hidden_fold::error::Result<()> {
    let arch = ArchConfig::desk(10);
    let a = Model::<f32>::build(&arch, 9)?;
    let b = Model::<f32>::build(&arch, 9)?;
    let c = Model::<f32>::build(&arch, 10)?;
    println!("seed 9  {:#018x}", a.weights_checksum());
    println!("seed 9  {:#018x}", b.weights_checksum());
    println!("seed 10 {:#018x}", c.weights_checksum());

    // Each layer draws from its own counter-based stream, so layer 5 does
    // not depend on how many numbers layers 0..5 consumed.
    let mut s = RngStream::new(9, streams::weights(5));
    println!("layer 5 stream starts {:.6} {:.6}", s.normal(), s.normal());
    let first = &a.masked_layers()[5];
    println!("{} has {} frozen weights, e.g. {:+.5}", first.name, first.len(), first.weights().data()[0]);
    Ok(())
}
