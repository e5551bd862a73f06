// SPDX-License-Identifier: Apache-2.0

//! Evaluation protocols: retrieval mAP@k, matching FPR at a target TPR, the
//! regularizer ablation grid and held-out regularizer diagnostics.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, PatchPairSet};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::losses::{loss_dmr, loss_me, LossBreakdown};
use crate::nn::Network;
use crate::quantize::{hamming_search_excluding, sign_tensor, softsign_var, Descriptors};
use crate::tensor::{Tape, Tensor};
use crate::train::{extract_codes, Checkpoint, TrainConfig, Trainer};

/// AP over the top `k` of a ranking: `Σ_{i≤k} Prec(i)·rel(i) / min(R, k)`,
/// where `R` counts every relevant entry of `ranked` (not only the top
/// `k`). Zero when nothing is relevant.
pub fn average_precision(query_label: i32, ranked: &[i32], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(contract_err!("k must be positive"));
    }
    let r = ranked.iter().filter(|&&l| l == query_label).count();
    Ok(ap_prefix(query_label, &ranked[..k.min(ranked.len())], r, k))
}

/// AP from a top-`k` prefix when the relevant total `r` is known.
fn ap_prefix(query_label: i32, prefix: &[i32], r: usize, k: usize) -> f64 {
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in prefix.iter().enumerate() {
        if l == query_label {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r.min(k) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map_at_k: f64,
    pub k: usize,
    pub per_query_ap: Vec<f64>,
    pub n_bits: usize,
    /// Whether each query's own row was left out of the database.
    pub self_excluded: bool,
}

impl RetrievalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query,ap\n");
        for (i, ap) in self.per_query_ap.iter().enumerate() {
            let _ = writeln!(s, "{i},{ap}");
        }
        s
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mAP@{} = {:.6} over {} queries, {} bits{}",
            self.k,
            self.map_at_k,
            self.per_query_ap.len(),
            self.n_bits,
            if self.self_excluded { " (self excluded)" } else { "" }
        )
    }
}

/// Mean AP@k of every query against the database by Hamming ranking. When
/// the two sets are identical each query's own row is excluded.
pub fn map_retrieval(queries: &Descriptors, db: &Descriptors, k: usize) -> Result<RetrievalReport> {
    if k == 0 {
        return Err(contract_err!("k must be positive"));
    }
    if queries.codes.n_bits() != db.codes.n_bits() {
        return Err(dim_err!("queries have {} bits, database {}", queries.codes.n_bits(), db.codes.n_bits()));
    }
    let (Some(ql), Some(dl)) = (&queries.labels, &db.labels) else {
        return Err(Error::Data("retrieval evaluation needs labels on queries and database".into()));
    };
    let same = queries == db;
    let per_query_ap: Vec<f64> = (0..queries.codes.n_rows())
        .into_par_iter()
        .map(|q| {
            let exclude = same.then_some(q);
            let hits = hamming_search_excluding(queries.codes.row(q), &db.codes, k, exclude)?;
            let prefix: Vec<i32> = hits.iter().map(|&(i, _)| dl[i]).collect();
            let r = dl.iter().enumerate().filter(|&(i, &l)| l == ql[q] && Some(i) != exclude).count();
            Ok(ap_prefix(ql[q], &prefix, r, k))
        })
        .collect::<Result<_>>()?;
    let map_at_k = if per_query_ap.is_empty() { 0.0 } else { per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64 };
    Ok(RetrievalReport { map_at_k, k, per_query_ap, n_bits: db.codes.n_bits(), self_excluded: same })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: u32,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingReport {
    /// False-positive rate at `threshold`.
    pub fpr: f64,
    pub tpr_target: f64,
    /// Smallest Hamming distance accepting at least `tpr_target` of matches.
    pub threshold: u32,
    pub tpr: f64,
    /// One point per integer threshold from 0 to the largest distance seen.
    pub roc: Vec<RocPoint>,
}

impl MatchingReport {
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,tpr,fpr\n");
        for p in &self.roc {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.tpr, p.fpr);
        }
        s
    }
}

impl fmt::Display for MatchingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FPR@{:.0}%TPR = {:.6} (threshold {}, TPR {:.6})",
            self.tpr_target * 100.0,
            self.fpr,
            self.threshold,
            self.tpr
        )
    }
}

/// Sweeps integer thresholds `t` (accept a pair when its distance is
/// `≤ t`) and reports the false-positive rate at the smallest `t` whose
/// true-positive rate reaches `tpr_target`.
pub fn fpr_at_tpr(matched: &[u32], nonmatched: &[u32], tpr_target: f64) -> Result<MatchingReport> {
    if matched.is_empty() || nonmatched.is_empty() {
        return Err(contract_err!("both distance lists must be nonempty"));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(contract_err!("tpr_target must lie in (0, 1], got {tpr_target}"));
    }
    let max = *matched.iter().chain(nonmatched).max().expect("nonempty") as usize;
    let histogram = |d: &[u32]| {
        let mut h = vec![0usize; max + 1];
        d.iter().for_each(|&v| h[v as usize] += 1);
        h
    };
    let (hm, hn) = (histogram(matched), histogram(nonmatched));
    let (nm, nn) = (matched.len() as f64, nonmatched.len() as f64);
    let (mut cm, mut cn) = (0usize, 0usize);
    let mut roc = Vec::with_capacity(max + 1);
    let mut hit = None;
    for t in 0..=max {
        cm += hm[t];
        cn += hn[t];
        let p = RocPoint { threshold: t as u32, tpr: cm as f64 / nm, fpr: cn as f64 / nn };
        // Counts are compared exactly: cm / nm ≥ target ⇔ cm ≥ target · nm.
        if hit.is_none() && cm as f64 >= tpr_target * nm - 1e-9 {
            hit = Some(p);
        }
        roc.push(p);
    }
    let p = hit.expect("the largest threshold accepts every match");
    Ok(MatchingReport { fpr: p.fpr, tpr_target, threshold: p.threshold, tpr: p.tpr, roc })
}

/// Hamming distances between the codes of each pair, split by match flag.
pub fn pair_distances(disc: &Network, pairs: &PatchPairSet) -> Result<(Vec<u32>, Vec<u32>)> {
    let n = pairs.len();
    let d = extract_codes(disc, &Dataset::Pairs(pairs.clone()))?;
    let (mut matched, mut nonmatched) = (Vec::new(), Vec::new());
    for i in 0..n {
        let dist = d.codes.hamming(i, n + i);
        if pairs.matches()[i] {
            matched.push(dist);
        } else {
            nonmatched.push(dist);
        }
    }
    Ok((matched, nonmatched))
}

pub fn evaluate_matching(disc: &Network, pairs: &PatchPairSet, tpr_target: f64) -> Result<MatchingReport> {
    let (m, n) = pair_distances(disc, pairs)?;
    fpr_at_tpr(&m, &n, tpr_target)
}

/// The four regularizer settings, in table order:
/// none, BRE only, DMR only, both.
pub const ABLATION_GRID: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 0.01), (0.05, 0.0), (0.05, 0.01)];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub lambda_dmr: f64,
    pub lambda_bre: f64,
    pub report: MatchingReport,
    pub log: Vec<(u64, LossBreakdown)>,
    pub checkpoint: Checkpoint,
    /// SHA-256 over every batch's example indices, in order.
    pub data_order: String,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda_dmr,lambda_bre,fpr_at_tpr,threshold,tpr,steps\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.lambda_dmr,
                r.lambda_bre,
                r.report.fpr,
                r.report.threshold,
                r.report.tpr,
                r.log.len()
            );
        }
        s
    }

    pub fn row(&self, lambda_dmr: f64, lambda_bre: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.lambda_dmr == lambda_dmr && r.lambda_bre == lambda_bre)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>12} {:>9}", "λ_DMR", "λ_BRE", "FPR@TPR", "threshold")?;
        for r in &self.rows {
            writeln!(f, "{:>10} {:>10} {:>12.6} {:>9}", r.lambda_dmr, r.lambda_bre, r.report.fpr, r.report.threshold)?;
        }
        Ok(())
    }
}

fn data_order_digest(trainer: &Trainer, n: usize) -> String {
    let mut h = Sha256::new();
    for step in 0..trainer.total_steps(n) {
        for r in trainer.batch_rows(n, step) {
            h.update((r as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains one model per [`ABLATION_GRID`] setting from `base` (same seed,
/// same data order) and evaluates each on `eval` pairs. With `out`, each
/// run writes into `out/dmr<λ>_bre<λ>/`.
pub fn run_ablation(
    train_data: &Dataset,
    eval: &PatchPairSet,
    base: &TrainConfig,
    tpr_target: f64,
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for (lambda_dmr, lambda_bre) in ABLATION_GRID {
        let mut cfg = base.clone();
        cfg.reg.lambda_dmr = lambda_dmr;
        cfg.reg.lambda_bre = lambda_bre;
        let mut trainer = Trainer::new(cfg, train_data.shape())?;
        let data_order = data_order_digest(&trainer, train_data.n_examples());
        let dir = out.map(|o| o.join(format!("dmr{lambda_dmr}_bre{lambda_bre}")));
        let log = trainer.run(train_data, dir.as_deref())?;
        let report = evaluate_matching(trainer.discriminator(), eval, tpr_target)?;
        rows.push(AblationRow { lambda_dmr, lambda_bre, report, log, checkpoint: trainer.into_checkpoint(), data_order });
    }
    Ok(AblationTable { rows })
}

/// Regularizer quantities of a trained discriminator on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeDiagnostics {
    /// Mean over ordered pairs of `|b_h·b_h′/M − s_f·s_f′/K|`.
    pub distance_gap: f64,
    /// `(1/K) Σ_k (mean_n b_f[n, k])²` with hard signs.
    pub bit_imbalance: f64,
}

pub fn code_diagnostics(disc: &Network, batch: &Tensor, gamma: f64) -> Result<CodeDiagnostics> {
    let out = disc.forward_values(batch)?;
    let (Some(f), Some(h)) = (out.f, out.h) else {
        return Err(dim_err!("discriminator has no f/h taps"));
    };
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let s_f = softsign_var(&mut tape, fv, gamma)?;
    let b_h = tape.constant(sign_tensor(&h)?);
    let gap = loss_dmr(&mut tape, b_h, s_f)?;
    let b_f = tape.constant(sign_tensor(&f)?);
    let me = loss_me(&mut tape, b_f)?;
    Ok(CodeDiagnostics { distance_gap: tape.value(gap).item(), bit_imbalance: tape.value(me).item() })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::quantize::BitMatrix;

    /// AP by exhaustive enumeration of the formula with no shared helpers.
    fn brute_ap(q: i32, ranked: &[i32], k: usize) -> f64 {
        let r = ranked.iter().filter(|&&l| l == q).count();
        if r == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 1..=k.min(ranked.len()) {
            if ranked[i - 1] == q {
                let prec = ranked[..i].iter().filter(|&&l| l == q).count() as f64 / i as f64;
                total += prec;
            }
        }
        total / r.min(k) as f64
    }

    fn brute_map(q: &Descriptors, db: &Descriptors, k: usize) -> f64 {
        let same = q == db;
        let qb = q.codes.unpack();
        let dbb = db.codes.unpack();
        let bits = q.codes.n_bits();
        let mut total = 0.0;
        for i in 0..q.codes.n_rows() {
            let mut order: Vec<(usize, usize)> = (0..db.codes.n_rows())
                .filter(|&j| !(same && j == i))
                .map(|j| {
                    let d = (0..bits).filter(|&b| qb[i * bits + b] != dbb[j * bits + b]).count();
                    (d, j)
                })
                .collect();
            order.sort();
            let ranked: Vec<i32> = order.iter().map(|&(_, j)| db.labels.as_ref().unwrap()[j]).collect();
            total += brute_ap(q.labels.as_ref().unwrap()[i], &ranked, k);
        }
        total / q.codes.n_rows() as f64
    }

    /// FPR by trying every candidate threshold in order.
    fn brute_fpr(m: &[u32], n: &[u32], target: f64) -> (u32, f64) {
        let max = *m.iter().chain(n).max().unwrap();
        for t in 0..=max {
            let tp = m.iter().filter(|&&d| d <= t).count();
            if tp as f64 / m.len() as f64 >= target - 1e-12 {
                return (t, n.iter().filter(|&&d| d <= t).count() as f64 / n.len() as f64);
            }
        }
        unreachable!()
    }

    fn random_descriptors(rng: &mut ChaCha8Rng, n: usize, bits: usize, classes: i32) -> Descriptors {
        let codes: Vec<i8> = (0..n * bits).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        Descriptors {
            codes: BitMatrix::from_bipolar(&codes, bits).unwrap(),
            labels: Some((0..n).map(|_| rng.random_range(0..classes)).collect()),
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(1, &[1, 1, 1], 3).unwrap(), 1.0);
        assert_eq!(average_precision(1, &[0, 2, 3], 3).unwrap(), 0.0);
        let ap = average_precision(1, &[1, 0, 1], 3).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(ap, brute_ap(1, &[1, 0, 1], 3));
        assert!(average_precision(1, &[1], 0).is_err());
        // Relevant items beyond k still count toward R up to k.
        assert!((average_precision(1, &[1, 0, 1, 1], 2).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn map_self_exclusion_with_unique_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = random_descriptors(&mut rng, 10, 16, 1);
        d.labels = Some((0..10).collect());
        let r = map_retrieval(&d, &d, 5).unwrap();
        assert!(r.self_excluded);
        assert_eq!(r.map_at_k, 0.0);
    }

    #[test]
    fn map_perfect_separation() {
        let per_class: Vec<Vec<i8>> = vec![vec![1; 8], vec![-1; 8], [vec![1; 4], vec![-1; 4]].concat()];
        let mut codes = Vec::new();
        let mut labels = Vec::new();
        for (c, code) in per_class.iter().enumerate() {
            for _ in 0..5 {
                codes.extend(code);
                labels.push(c as i32);
            }
        }
        let d = Descriptors { codes: BitMatrix::from_bipolar(&codes, 8).unwrap(), labels: Some(labels) };
        let r = map_retrieval(&d, &d, 100).unwrap();
        assert_eq!(r.map_at_k, 1.0);
        assert_eq!(r.per_query_ap.len(), 15);
    }

    #[test]
    fn map_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 5, 30] {
            let q = random_descriptors(&mut rng, 30, 12, 3);
            let db = random_descriptors(&mut rng, 30, 12, 3);
            let r = map_retrieval(&q, &db, k).unwrap();
            assert!((r.map_at_k - brute_map(&q, &db, k)).abs() <= 1e-12);
            let mean = r.per_query_ap.iter().sum::<f64>() / 30.0;
            assert_eq!(r.map_at_k, mean);
            let s = map_retrieval(&q, &q, k).unwrap();
            assert!((s.map_at_k - brute_map(&q, &q, k)).abs() <= 1e-12);
        }
    }

    #[test]
    fn map_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_descriptors(&mut rng, 4, 8, 2);
        let b = random_descriptors(&mut rng, 4, 16, 2);
        assert!(matches!(map_retrieval(&a, &b, 3), Err(Error::Dimension(_))));
        let mut unlabeled = a.clone();
        unlabeled.labels = None;
        assert!(matches!(map_retrieval(&unlabeled, &a, 3), Err(Error::Data(_))));
        assert!(map_retrieval(&a, &a, 0).is_err());
    }

    #[test]
    fn fpr_examples() {
        let r = fpr_at_tpr(&[1, 2, 3, 4, 100], &[3, 5, 6, 7, 8], 0.95).unwrap();
        assert_eq!((r.threshold, r.fpr), (100, 1.0));
        let r = fpr_at_tpr(&[1, 2, 3, 4], &[3, 5, 6, 7, 8], 0.95).unwrap();
        assert_eq!(r.threshold, 4);
        assert!((r.fpr - 0.2).abs() < 1e-15);
        let r = fpr_at_tpr(&[0, 1, 2], &[5, 6, 7], 0.95).unwrap();
        assert_eq!(r.fpr, 0.0);
        assert!(fpr_at_tpr(&[], &[1], 0.95).is_err());
        assert!(fpr_at_tpr(&[1], &[], 0.95).is_err());
        assert!(fpr_at_tpr(&[1], &[1], 0.0).is_err());
    }

    #[test]
    fn fpr_identical_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d: Vec<u32> = (0..400).map(|_| rng.random_range(0..33)).collect();
        let r = fpr_at_tpr(&d, &d, 0.95).unwrap();
        assert_eq!(r.fpr, r.tpr);
        let shifted: Vec<u32> = d.iter().rev().copied().collect();
        let r = fpr_at_tpr(&d, &shifted, 0.95).unwrap();
        let below = r.roc[r.threshold as usize - 1];
        assert!(r.fpr >= below.fpr && r.tpr >= 0.95 && below.tpr < 0.95);
    }

    #[test]
    fn fpr_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m: Vec<u32> = (0..rng.random_range(1..25)).map(|_| rng.random_range(0..17)).collect();
            let n: Vec<u32> = (0..rng.random_range(1..25)).map(|_| rng.random_range(0..17)).collect();
            let r = fpr_at_tpr(&m, &n, 0.95).unwrap();
            let (t, fpr) = brute_fpr(&m, &n, 0.95);
            assert_eq!(r.threshold, t);
            assert!((r.fpr - fpr).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ap_and_fpr_bounds(
            labels in prop::collection::vec(0i32..3, 1..40),
            k in 1usize..50,
            m in prop::collection::vec(0u32..20, 1..30),
            n in prop::collection::vec(0u32..20, 1..30),
            lo in 0.05f64..0.5,
            hi in 0.5f64..1.0,
        ) {
            let ap = average_precision(0, &labels, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            let a = fpr_at_tpr(&m, &n, lo).unwrap();
            let b = fpr_at_tpr(&m, &n, hi).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.fpr) && (0.0..=1.0).contains(&b.fpr));
            prop_assert!(a.fpr <= b.fpr);
            prop_assert!(b.tpr >= hi - 1e-12);
        }
    }

    #[test]
    fn diagnostics_on_random_network() {
        use crate::nn::{build_discriminator, ArchConfig, Task};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let disc = build_discriminator(&ArchConfig::desk(Task::Matching, 0), &[1, 16, 16], &mut rng).unwrap();
        let x = Tensor::new(vec![8, 1, 16, 16], (0..8 * 256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let d = code_diagnostics(&disc, &x, 0.001).unwrap();
        assert!(d.distance_gap >= 0.0 && (0.0..=1.0).contains(&d.bit_imbalance));
    }

    #[test]
    fn ablation_grid_shape_and_data_order() {
        use crate::data::synth_toy_pairs;
        use crate::nn::Task;
        let train = Dataset::Pairs(synth_toy_pairs(1, 32, 16).unwrap());
        let eval = synth_toy_pairs(2, 20, 16).unwrap();
        let cfg = TrainConfig {
            task: Task::Matching,
            channel_div: 16,
            batch_size: 16,
            z_dim: 8,
            epochs: 1,
            max_steps: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let table = run_ablation(&train, &eval, &cfg, 0.95, Some(dir.path())).unwrap();
        let grid: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.lambda_dmr, r.lambda_bre)).collect();
        assert_eq!(grid, ABLATION_GRID.to_vec());
        assert!(table.rows.iter().all(|r| r.data_order == table.rows[0].data_order && r.log.len() == 2));
        assert_eq!(table.to_csv().lines().count(), 5);
        for (d, b) in ABLATION_GRID {
            let log = std::fs::read_to_string(dir.path().join(format!("dmr{d}_bre{b}/losses.csv"))).unwrap();
            assert_eq!(log.lines().count(), 3);
        }
        let none = table.row(0.0, 0.0).unwrap();
        assert!(none.log.iter().all(|(_, l)| l.l_total == l.l_d));
    }
}
