// SPDX-License-Identifier: Apache-2.0

//! Trains briefly and writes a grid of generator samples as a PPM image.
//!
//! ```text
//! cargo run --release --example generate_samples -- samples.ppm
//! ```

use std::path::PathBuf;

use bingan::data::{denormalize, synth_toy_retrieval, write_netpbm, Dataset};
use bingan::nn::Task;
use bingan::train::{train, TrainConfig};
use bingan::Result;

const GRID: usize = 4;

fn main() -> Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("bingan_samples.ppm"));

    let data = Dataset::Images(synth_toy_retrieval(5, 100, 4, 16)?);
    let cfg = TrainConfig { task: Task::Toy, code_bits: 8, batch_size: 16, z_dim: 32, max_steps: 100, ..Default::default() };
    let trainer = train(&cfg, &data, None)?.trainer;

    let samples = trainer.sample(GRID * GRID)?;
    let [c, h, w] = data.shape();
    let (gh, gw) = (GRID * h, GRID * w);
    let mut planar = vec![0u8; c * gh * gw];
    for (n, img) in samples.data().chunks(c * h * w).enumerate() {
        let (gy, gx) = (n / GRID, n % GRID);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    planar[ch * gh * gw + (gy * h + y) * gw + gx * w + x] = denormalize(img[ch * h * w + y * w + x]);
                }
            }
        }
    }
    std::fs::write(&out, write_netpbm([c, gh, gw], &planar)?)?;
    println!("wrote {}×{} grid of {c}×{h}×{w} samples to {}", GRID, GRID, out.display());
    Ok(())
}
