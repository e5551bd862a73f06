// SPDX-License-Identifier: Apache-2.0

//! Runs the built-in verification suites (gradients, oracles, reductions,
//! stop-gradient) and prints one line per check.

use bingan::selfcheck::run_all;
use bingan::Result;

fn main() -> Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut failed = 0;
    for (outcomes, took) in run_all(seed)? {
        for o in &outcomes {
            println!("{o}");
            failed += usize::from(!o.passed);
        }
        if let Some(o) = outcomes.first() {
            println!("-- {} finished in {took:.2?}", o.suite);
        }
    }
    println!("{failed} failed");
    Ok(())
}
