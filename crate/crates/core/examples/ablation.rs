// SPDX-License-Identifier: Apache-2.0

//! Runs the four-way regularizer ablation (none, BRE, DMR, both) on patch
//! pairs with a shared seed and data order.

use bingan::data::{synth_toy_pairs, Dataset, Split};
use bingan::eval::run_ablation;
use bingan::nn::Task;
use bingan::train::TrainConfig;
use bingan::Result;

fn main() -> Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);

    let train_pairs = Dataset::Pairs(synth_toy_pairs(20, 300, 16)?);
    let mut eval_pairs = synth_toy_pairs(21, 200, 16)?;
    eval_pairs.split = Split::Test;

    let base = TrainConfig { task: Task::Matching, code_bits: 256, channel_div: 8, batch_size: 32, max_steps: steps, ..Default::default() };
    let table = run_ablation(&train_pairs, &eval_pairs, &base, 0.95, None)?;
    print!("{table}");
    let orders: Vec<&str> = table.rows.iter().map(|r| &r.data_order[..12]).collect();
    println!("data order digests: {orders:?}");
    Ok(())
}
