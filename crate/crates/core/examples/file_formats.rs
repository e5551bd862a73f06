// SPDX-License-Identifier: Apache-2.0

//! Round-trips datasets, checkpoints and descriptor files through their
//! binary containers and shows that a corrupted byte is rejected.

use bingan::data::{synth_toy_pairs, synth_toy_retrieval, Dataset};
use bingan::nn::Task;
use bingan::quantize::Descriptors;
use bingan::train::{extract_codes, Checkpoint, TrainConfig, Trainer};
use bingan::Result;

fn main() -> Result<()> {
    let images = Dataset::Images(synth_toy_retrieval(0, 20, 4, 16)?);
    let pairs = Dataset::Pairs(synth_toy_pairs(0, 30, 16)?);
    for d in [&images, &pairs] {
        let bytes = d.to_bytes();
        assert_eq!(&Dataset::from_bytes(&bytes)?, d);
        println!("BGDS {:<6} {:>3} examples {:?}: {} bytes", d.kind(), d.n_examples(), d.shape(), bytes.len());
    }

    let cfg = TrainConfig { task: Task::Toy, code_bits: 8, batch_size: 16, z_dim: 16, max_steps: 3, ..Default::default() };
    let mut trainer = Trainer::new(cfg, images.shape())?;
    trainer.run(&images, None)?;
    let ck = trainer.checkpoint().to_bytes();
    let restored = Checkpoint::from_bytes(&ck)?;
    assert_eq!(restored.to_bytes(), ck);
    println!("BGCK step {}: {} bytes", restored.step, ck.len());

    let desc = extract_codes(trainer.discriminator(), &images)?;
    let bytes = desc.to_bytes();
    assert_eq!(Descriptors::from_bytes(&bytes)?.to_bytes(), bytes);
    println!("BGBD {} × {} bits: {} bytes", desc.codes.n_rows(), desc.codes.n_bits(), bytes.len());

    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x01;
    match Descriptors::from_bytes(&bad) {
        Err(e) => println!("flipped one bit: {e}"),
        Ok(_) => unreachable!("corruption went unnoticed"),
    }
    Ok(())
}
