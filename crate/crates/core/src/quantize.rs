// SPDX-License-Identifier: Apache-2.0

//! Binarization, bit packing and Hamming arithmetic.
//!
//! Codes are bipolar (`±1`). A packed row stores bit `j` in word `j / 64` at
//! position `63 − j % 64` (most significant bit first); a set bit means `+1`.
//! Padding bits past `n_bits` are always zero.

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const DESCRIPTOR_MAGIC: &[u8; 4] = b"BGBD";
const DESCRIPTOR_VERSION: u32 = 1;

/// Hard sign with `sign(0) = +1`.
pub fn sign_vec(v: &[f64]) -> Result<Vec<i8>> {
    v.iter()
        .enumerate()
        .map(|(i, &a)| {
            if a.is_nan() {
                Err(Error::Data(format!("NaN at index {i} cannot be binarized")))
            } else {
                Ok(if a >= 0.0 { 1 } else { -1 })
            }
        })
        .collect()
}

/// Element-wise hard sign as a `±1.0` tensor of the same shape.
pub fn sign_tensor(t: &Tensor) -> Result<Tensor> {
    let signs = sign_vec(t.data())?;
    Tensor::new(t.shape().to_vec(), signs.into_iter().map(f64::from).collect())
}

/// `a / (|a| + gamma)`, a smooth stand-in for `sign(a)`.
pub fn softsign(a: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(a / (a.abs() + gamma))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(config_err!("softsign gamma must be positive and finite, got {gamma}"))
    }
}

/// Differentiable softsign applied element-wise on the tape.
pub fn softsign_var(tape: &mut Tape, x: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let a = tape.abs(x);
    let denom = tape.add_scalar(a, gamma);
    tape.div(x, denom)
}

/// Hamming distance between two `±1` codes of length `m` from their dot
/// product: `(m − dot) / 2`.
pub fn hamming_from_dot(dot: i64, m: u32) -> Result<u32> {
    let m = i64::from(m);
    if dot.abs() > m || (m - dot).rem_euclid(2) != 0 {
        return Err(contract_err!("dot {dot} is not a valid ±1 inner product of length {m}"));
    }
    Ok(((m - dot) / 2) as u32)
}

#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Row-major matrix of bit-packed `±1` codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    n_rows: usize,
    n_bits: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(n_rows: usize, n_bits: usize) -> Self {
        let words_per_row = n_bits.div_ceil(64);
        Self { n_rows, n_bits, words_per_row, words: vec![0; n_rows * words_per_row] }
    }

    /// Packs `n_rows × n_bits` bipolar entries given row by row.
    pub fn from_bipolar(codes: &[i8], n_bits: usize) -> Result<Self> {
        if n_bits == 0 || !codes.len().is_multiple_of(n_bits) {
            return Err(dim_err!("{} entries do not form rows of {n_bits} bits", codes.len()));
        }
        let mut m = Self::zeros(codes.len() / n_bits, n_bits);
        for (r, row) in codes.chunks_exact(n_bits).enumerate() {
            for (j, &b) in row.iter().enumerate() {
                match b {
                    1 => m.set(r, j),
                    -1 => {}
                    other => return Err(Error::Data(format!("entry {other} is not ±1"))),
                }
            }
        }
        Ok(m)
    }

    /// Signs of a real `N × K` matrix.
    pub fn from_real(t: &Tensor) -> Result<Self> {
        let (_, cols) = t.rows_cols();
        Self::from_bipolar(&sign_vec(t.data())?, cols)
    }

    fn set(&mut self, r: usize, j: usize) {
        self.words[r * self.words_per_row + j / 64] |= 1u64 << (63 - j % 64);
    }

    pub fn get(&self, r: usize, j: usize) -> i8 {
        if self.words[r * self.words_per_row + j / 64] >> (63 - j % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn unpack(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.n_rows * self.n_bits);
        for r in 0..self.n_rows {
            out.extend((0..self.n_bits).map(|j| self.get(r, j)));
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn hamming(&self, a: usize, b: usize) -> u32 {
        hamming_words(self.row(a), self.row(b))
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut words = Vec::with_capacity(rows.len() * self.words_per_row);
        for &r in rows {
            words.extend_from_slice(self.row(r));
        }
        Self { n_rows: rows.len(), words, ..*self }
    }

    fn padding_is_zero(&self) -> bool {
        let used = self.n_bits % 64;
        if used == 0 {
            return true;
        }
        let mask = u64::MAX >> used;
        (0..self.n_rows).all(|r| self.row(r)[self.words_per_row - 1] & mask == 0)
    }
}

/// The `k` database rows closest to `query` in Hamming distance.
///
/// Ties are broken by ascending database index. `k` is clipped to the
/// database size.
pub fn hamming_search(query: &[u64], db: &BitMatrix, k: usize) -> Result<Vec<(usize, u32)>> {
    hamming_search_excluding(query, db, k, None)
}

/// Like [`hamming_search`] but skips database row `exclude`.
pub fn hamming_search_excluding(
    query: &[u64],
    db: &BitMatrix,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<(usize, u32)>> {
    if query.len() != db.words_per_row {
        return Err(dim_err!("query has {} words, database rows have {}", query.len(), db.words_per_row));
    }
    // Counting sort on distance keeps index order inside each bucket.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); db.n_bits + 1];
    for r in 0..db.n_rows {
        if Some(r) != exclude {
            buckets[hamming_words(query, db.row(r)) as usize].push(r);
        }
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .flat_map(|(d, rows)| rows.into_iter().map(move |r| (r, d as u32)))
        .take(k)
        .collect())
}

/// Packed codes plus optional integer labels, as stored in `BGBD` files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Descriptors {
    pub codes: BitMatrix,
    pub labels: Option<Vec<i32>>,
}

impl Descriptors {
    /// Layout: magic `BGBD`, version u32, n_rows u64, n_bits u32, has_labels
    /// u8, labels i32 × n_rows (if present), packed rows as u64 words
    /// (`ceil(n_bits/64)` per row), CRC32. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION);
        e.u64(self.codes.n_rows as u64);
        e.u32(self.codes.n_bits as u32);
        e.u8(self.labels.is_some() as u8);
        if let Some(labels) = &self.labels {
            labels.iter().for_each(|&l| e.i32(l));
        }
        self.codes.words.iter().for_each(|&w| e.u64(w));
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION)?;
        let n_rows = d.u64()? as usize;
        let n_bits = d.u32()? as usize;
        if n_bits == 0 {
            return Err(d.error("n_bits must be positive"));
        }
        let has_labels = match d.u8()? {
            0 => false,
            1 => true,
            other => return Err(d.error(format!("label flag {other} is not 0 or 1"))),
        };
        let wpr = n_bits.div_ceil(64);
        let payload = n_rows
            .checked_mul(wpr * 8 + if has_labels { 4 } else { 0 })
            .ok_or_else(|| d.error("row count overflows"))?;
        if payload != bytes.len() - 4 - d.offset() {
            return Err(d.error(format!("payload size does not match {n_rows} rows of {n_bits} bits")));
        }
        let labels = if has_labels {
            Some((0..n_rows).map(|_| d.i32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let words = (0..n_rows * wpr).map(|_| d.u64()).collect::<Result<Vec<_>>>()?;
        let at = d.offset();
        d.finish()?;
        let codes = BitMatrix { n_rows, n_bits, words_per_row: wpr, words };
        if !codes.padding_is_zero() {
            return Err(Error::Format { offset: at as u64, msg: "nonzero padding bits".into() });
        }
        Ok(Self { codes, labels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_codes(rng: &mut ChaCha8Rng, n: usize, bits: usize) -> Vec<i8> {
        (0..n * bits).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect()
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign_vec(&[0.3, -0.7]).unwrap(), vec![1, -1]);
        assert_eq!(sign_vec(&[0.0]).unwrap(), vec![1]);
        assert!(matches!(sign_vec(&[1.0, f64::NAN]), Err(Error::Data(_))));
    }

    #[test]
    fn softsign_examples() {
        assert_eq!(softsign(0.0, 0.001).unwrap(), 0.0);
        assert!((softsign(0.001, 0.001).unwrap() - 0.5).abs() < 1e-15);
        assert!((softsign(-0.003, 0.001).unwrap() + 0.75).abs() < 1e-15);
        assert!(matches!(softsign(1.0, 0.0), Err(Error::Config(_))));
        assert!(softsign(1.0, -1.0).is_err());
    }

    #[test]
    fn softsign_gradient_matches_closed_form() {
        let gamma = 0.3;
        for a in [-2.0, -0.1, 0.0, 0.05, 1.7] {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::scalar(a));
            let y = softsign_var(&mut tape, x, gamma).unwrap();
            let g = tape.backward(y).unwrap();
            let expected = gamma / (f64::abs(a) + gamma).powi(2);
            assert!((g.get(x).unwrap().item() - expected).abs() < 1e-12, "a={a}");
        }
    }

    #[test]
    fn softsign_approaches_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-1.0..1.0);
            if a.abs() > 1e-6 {
                let s = softsign(a, 1e-9).unwrap();
                assert!((s - a.signum()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn hamming_from_dot_examples() {
        assert_eq!(hamming_from_dot(64, 64).unwrap(), 0);
        assert_eq!(hamming_from_dot(-64, 64).unwrap(), 64);
        assert!(hamming_from_dot(63, 64).is_err());
        assert!(hamming_from_dot(66, 64).is_err());
    }

    #[test]
    fn hamming_from_dot_matches_popcount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = random_codes(&mut rng, 1, 64);
            let b = random_codes(&mut rng, 1, 64);
            let dot: i64 = a.iter().zip(&b).map(|(&x, &y)| i64::from(x) * i64::from(y)).sum();
            let pa = BitMatrix::from_bipolar(&a, 64).unwrap();
            let pb = BitMatrix::from_bipolar(&b, 64).unwrap();
            let pop = (pa.row(0)[0] ^ pb.row(0)[0]).count_ones();
            assert_eq!(hamming_from_dot(dot, 64).unwrap(), pop);
        }
    }

    #[test]
    fn msb_first_packing() {
        let mut codes = vec![-1i8; 70];
        codes[0] = 1;
        codes[65] = 1;
        let m = BitMatrix::from_bipolar(&codes, 70).unwrap();
        assert_eq!(m.row(0), &[1u64 << 63, 1u64 << 62]);
        assert!(BitMatrix::from_bipolar(&[1, 0, -1], 3).is_err());
    }

    #[test]
    fn search_finds_self_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let db = BitMatrix::from_bipolar(&random_codes(&mut rng, 30, 40), 40).unwrap();
        let hits = hamming_search(db.row(17), &db, 5).unwrap();
        assert_eq!(hits[0], (17, 0));
        assert_eq!(hamming_search(db.row(0), &db, 100).unwrap().len(), 30);
    }

    #[test]
    fn search_against_complements() {
        let q = vec![1i8, -1, 1, 1, -1, -1, 1, -1, 1, 1];
        let comp: Vec<i8> = q.iter().map(|&b| -b).collect();
        let db = BitMatrix::from_bipolar(&comp.repeat(4), 10).unwrap();
        let qm = BitMatrix::from_bipolar(&q, 10).unwrap();
        let hits = hamming_search(qm.row(0), &db, 4).unwrap();
        assert!(hits.iter().all(|&(_, d)| d == 10));
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn search_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bits = 48;
        let raw = random_codes(&mut rng, 200, bits);
        let db = BitMatrix::from_bipolar(&raw, bits).unwrap();
        let q = random_codes(&mut rng, 1, bits);
        let qm = BitMatrix::from_bipolar(&q, bits).unwrap();
        let mut naive: Vec<(usize, u32)> = raw
            .chunks(bits)
            .enumerate()
            .map(|(i, row)| (i, row.iter().zip(&q).filter(|(a, b)| a != b).count() as u32))
            .collect();
        naive.sort_by_key(|&(i, d)| (d, i));
        naive.truncate(50);
        assert_eq!(hamming_search(qm.row(0), &db, 50).unwrap(), naive);
    }

    #[test]
    fn search_dimension_mismatch() {
        let db = BitMatrix::zeros(3, 128);
        assert!(hamming_search(&[0u64], &db, 1).is_err());
    }

    #[test]
    fn descriptor_file_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let codes = BitMatrix::from_bipolar(&random_codes(&mut rng, 5, 70), 70).unwrap();
        let d = Descriptors { codes, labels: Some(vec![0, 1, 2, 1, 0]) };
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"BGBD");
        assert_eq!(Descriptors::from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        bad[20] ^= 0x10;
        assert!(matches!(Descriptors::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(Descriptors::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in 1usize..200, rows in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = random_codes(&mut rng, rows, bits);
            let m = BitMatrix::from_bipolar(&codes, bits).unwrap();
            prop_assert!(m.padding_is_zero());
            prop_assert_eq!(m.unpack(), codes);
            let back = Descriptors::from_bytes(&Descriptors { codes: m.clone(), labels: None }.to_bytes()).unwrap();
            prop_assert_eq!(back.codes, m);
        }

        #[test]
        fn hamming_is_a_metric(bits in 1usize..150, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BitMatrix::from_bipolar(&random_codes(&mut rng, 3, bits), bits).unwrap();
            prop_assert_eq!(m.hamming(0, 0), 0);
            prop_assert_eq!(m.hamming(0, 1), m.hamming(1, 0));
            prop_assert!(m.hamming(0, 2) <= m.hamming(0, 1) + m.hamming(1, 2));
        }

        #[test]
        fn sign_is_scale_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..20), c in 0.001f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|a| a * c).collect();
            prop_assert_eq!(sign_vec(&v).unwrap(), sign_vec(&scaled).unwrap());
        }

        #[test]
        fn softsign_stays_inside_unit_interval(a in -1e6f64..1e6, gamma in 1e-6f64..10.0) {
            prop_assert!(softsign(a, gamma).unwrap().abs() < 1.0);
        }
    }
}
