// SPDX-License-Identifier: Apache-2.0

//! Trains a small regularized GAN on synthetic labelled images, extracts
//! 16-bit codes and reports mAP against a λ = 0 baseline.
//!
//! ```text
//! cargo run --release --example train_retrieval -- [steps]
//! ```

use std::time::Instant;

use bingan::data::{synth_toy_retrieval, Dataset, Split};
use bingan::eval::map_retrieval;
use bingan::nn::Task;
use bingan::train::{extract_codes, train, TrainConfig};
use bingan::Result;

fn main() -> Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);

    let db = Dataset::Images(synth_toy_retrieval(1, 250, 4, 16)?);
    let mut queries = synth_toy_retrieval(2, 50, 4, 16)?;
    queries.split = Split::Test;
    let queries = Dataset::Images(queries);

    for (name, lambda_dmr, lambda_bre) in [("regularized", 0.05, 0.01), ("λ = 0", 0.0, 0.0)] {
        let mut cfg = TrainConfig { task: Task::Retrieval, channel_div: 8, batch_size: 32, max_steps: steps, ..Default::default() };
        cfg.reg.lambda_dmr = lambda_dmr;
        cfg.reg.lambda_bre = lambda_bre;

        let t0 = Instant::now();
        let outcome = train(&cfg, &db, None)?;
        let last = outcome.log.last().map(|(_, l)| *l).unwrap_or_default();
        let disc = outcome.trainer.discriminator();
        let report = map_retrieval(&extract_codes(disc, &queries)?, &extract_codes(disc, &db)?, 100)?;
        println!(
            "{name:>12}: mAP@100 {:.4}  (L_D {:.3}, L_DMR {:.4}, {steps} steps in {:.1?})",
            report.map_at_k,
            last.l_d,
            last.l_dmr,
            t0.elapsed()
        );
    }
    Ok(())
}
