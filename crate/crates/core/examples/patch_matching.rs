// SPDX-License-Identifier: Apache-2.0

//! Trains on synthetic patch pairs with the matching topology and reports the
//! false positive rate at 95% recall.

use bingan::data::{synth_toy_pairs, Dataset, Split};
use bingan::eval::evaluate_matching;
use bingan::nn::Task;
use bingan::train::{train, TrainConfig};
use bingan::Result;

fn main() -> Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);

    let train_pairs = Dataset::Pairs(synth_toy_pairs(10, 500, 16)?);
    let mut eval_pairs = synth_toy_pairs(11, 300, 16)?;
    eval_pairs.split = Split::Test;

    let cfg = TrainConfig { task: Task::Matching, code_bits: 256, channel_div: 8, batch_size: 32, max_steps: steps, ..Default::default() };
    let outcome = train(&cfg, &train_pairs, None)?;

    let report = evaluate_matching(outcome.trainer.discriminator(), &eval_pairs, 0.95)?;
    println!("{report}");
    for p in report.roc.iter().step_by(report.roc.len().div_ceil(8).max(1)) {
        println!("  d ≤ {:>3}: TPR {:.3}  FPR {:.3}", p.threshold, p.tpr, p.fpr);
    }
    Ok(())
}
