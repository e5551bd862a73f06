// SPDX-License-Identifier: Apache-2.0

//! Packs bipolar codes into words, ranks a database by Hamming distance and
//! scores the ranking with mAP@k.

use bingan::eval::map_retrieval;
use bingan::quantize::{hamming_from_dot, hamming_search, BitMatrix, Descriptors};
use bingan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: usize = 32;
const CLASSES: usize = 5;
const PER_CLASS: usize = 200;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // One prototype per class; members flip each bit with probability 0.15.
    let protos: Vec<Vec<i8>> =
        (0..CLASSES).map(|_| (0..BITS).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()).collect();
    let mut codes = Vec::with_capacity(CLASSES * PER_CLASS * BITS);
    let mut labels = Vec::with_capacity(CLASSES * PER_CLASS);
    for (c, p) in protos.iter().enumerate() {
        for _ in 0..PER_CLASS {
            codes.extend(p.iter().map(|&b| if rng.random_bool(0.15) { -b } else { b }));
            labels.push(c as i32);
        }
    }
    let db = Descriptors { codes: BitMatrix::from_bipolar(&codes, BITS)?, labels: Some(labels) };

    let first = &codes[..BITS];
    let dot: i64 = first.iter().zip(&protos[0]).map(|(&a, &b)| a as i64 * b as i64).sum();
    println!("row 0 vs prototype 0: dot {dot}, hamming {}", hamming_from_dot(dot, BITS as u32)?);

    let hits = hamming_search(db.codes.row(0), &db.codes, 5)?;
    println!("5 nearest to row 0 (index, distance): {hits:?}");

    let report = map_retrieval(&db, &db, 100)?;
    println!("{report}");
    Ok(())
}
