// SPDX-License-Identifier: Apache-2.0

//! The `bingan` command-line frontend.
//!
//! Every failure prints one line `error[<class>]: <message>` to stderr and
//! exits with the class's code (see [`Error::exit_code`]); a failing
//! `selfcheck` exits with [`EXIT_SELFCHECK`]. Artifact-producing commands
//! write a JSON run manifest next to their outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{
    denormalize, read_netpbm, synth_toy_pairs, synth_toy_retrieval, write_netpbm, Dataset, ImageSet, PatchPairSet, Split,
};
use crate::error::{config_err, Error, Result};
use crate::eval::{evaluate_matching, map_retrieval, run_ablation};
use crate::nn::Task;
use crate::quantize::Descriptors;
use crate::selfcheck;
use crate::train::{extract_codes, Checkpoint, TrainConfig, Trainer};

pub const EXIT_SELFCHECK: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "bingan", version, about = "Binary descriptors from a regularized GAN discriminator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack a directory of PGM/PPM rasters into a BGDS container.
    Import(ImportArgs),
    /// Generate a synthetic toy dataset.
    Synth(SynthArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Write the binary descriptors of a dataset.
    Extract(ExtractArgs),
    /// mAP@k of query descriptors against a database.
    EvalRetrieval(EvalRetrievalArgs),
    /// FPR at a target TPR on patch pairs.
    EvalMatching(EvalMatchingArgs),
    /// Train and evaluate the four regularizer settings.
    Ablate(AblateArgs),
    /// Write a grid of generator samples as PGM/PPM.
    Sample(SampleArgs),
    /// Run the gradient, oracle and identity suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ImportKind {
    Image,
    Pairs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthTask {
    Retrieval,
    Pairs,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long, value_enum)]
    pub kind: ImportKind,
    /// Directory holding the raster files named in the labels CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `file,label` rows for images; `file_a,file_b,match` rows for pairs.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Halve the resolution with a 2×2 box filter.
    #[arg(long)]
    pub downsample: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: SynthTask,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images per class (retrieval) or pairs (pairs).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub classes: u32,
    #[arg(long, default_value_t = 16)]
    pub hw: usize,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` config file; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    /// Per-query AP as CSV.
    #[arg(long)]
    pub per_query: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalMatchingArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub tpr: f64,
    /// ROC points as CSV.
    #[arg(long)]
    pub roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training pairs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation pairs; defaults to the training pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub tpr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// `.pgm` for one channel, `.ppm` for three.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Git-style content hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: BTreeMap::new(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), content_hash(bytes));
    }

    fn echo(&mut self, cfg: &TrainConfig) {
        for key in TrainConfig::KEYS {
            if let Some(v) = cfg.get(key) {
                self.config.insert(key.to_string(), v);
            }
        }
        self.seed = Some(cfg.seed);
    }

    fn write(mut self, path: &Path, started: Instant) -> Result<()> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self).map_err(|e| Error::Io(e.into()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    manifest.input(path, &bytes);
    Ok(bytes)
}

fn load_config(path: Option<&Path>, manifest: &mut RunManifest) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err!("cannot read {}: {e}", p.display()))?;
            manifest.input(p, text.as_bytes());
            TrainConfig::from_text(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

/// Caps the rayon pool at `BINGAN_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BINGAN_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| config_err!("BINGAN_THREADS must be a positive integer, got {v:?}"))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one parsed command; returns the process exit code on success.
pub fn run(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.command {
        Command::Import(a) => import(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Extract(a) => extract(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::EvalMatching(a) => eval_matching(a),
        Command::Ablate(a) => ablate(a),
        Command::Sample(a) => sample(a),
        Command::Selfcheck(a) => selfcheck_cmd(a),
    }
    .map(|code| code.unwrap_or(0))
}

/// Parses `args`, runs, and maps errors to the one-line report and exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return 2;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            e.exit_code()
        }
    }
}

fn import(a: ImportArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("import");
    let labels = read_input(&a.labels, &mut m)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).flexible(true).from_reader(&labels[..]);
    let mut shape: Option<[usize; 3]> = None;
    let mut raster = |name: &str, m: &mut RunManifest| -> Result<Vec<u8>> {
        let path = a.input.join(name.trim());
        let bytes = read_input(&path, m)?;
        let (s, px) = read_netpbm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::Data(format!("{} is {s:?}, earlier rasters are {prev:?}", path.display())))
            }
            _ => {}
        }
        Ok(px)
    };
    let bad_row = |i: usize, what: &str| Error::Data(format!("labels row {}: {what}", i + 1));
    let mut data = match a.kind {
        ImportKind::Image => {
            let (mut pixels, mut ids) = (Vec::new(), Vec::new());
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| bad_row(i, &e.to_string()))?;
                if rec.len() != 2 {
                    return Err(bad_row(i, "expected file,label"));
                }
                pixels.extend(raster(&rec[0], &mut m)?);
                ids.push(rec[1].trim().parse::<u32>().map_err(|_| bad_row(i, "label is not a non-negative integer"))?);
            }
            let s = shape.ok_or_else(|| Error::Data("labels file lists no images".into()))?;
            let n_classes = ids.iter().max().map_or(0, |&c| c + 1);
            Dataset::Images(ImageSet::new(a.split, s, n_classes, pixels, ids)?)
        }
        ImportKind::Pairs => {
            let (mut pa, mut pb, mut flags) = (Vec::new(), Vec::new(), Vec::new());
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| bad_row(i, &e.to_string()))?;
                if rec.len() != 3 {
                    return Err(bad_row(i, "expected file_a,file_b,match"));
                }
                pa.extend(raster(&rec[0], &mut m)?);
                pb.extend(raster(&rec[1], &mut m)?);
                flags.push(match rec[2].trim() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad_row(i, "match must be 0/1")),
                });
            }
            let s = shape.ok_or_else(|| Error::Data("labels file lists no pairs".into()))?;
            Dataset::Pairs(PatchPairSet::new(a.split, s, pa, pb, flags)?)
        }
    };
    if a.downsample {
        data = match data {
            Dataset::Images(s) => Dataset::Images(s.downsample()?),
            Dataset::Pairs(s) => Dataset::Pairs(s.downsample()?),
        };
    }
    data.write(&a.out)?;
    println!("wrote {} {} examples of shape {:?} to {}", data.n_examples(), data.kind(), data.shape(), a.out.display());
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out), started)?;
    Ok(None)
}

fn synth(a: SynthArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("synth");
    m.seed = Some(a.seed);
    let data = match a.task {
        SynthTask::Retrieval => {
            let mut s = synth_toy_retrieval(a.seed, a.n.unwrap_or(500), a.classes, a.hw)?;
            s.split = a.split;
            Dataset::Images(s)
        }
        SynthTask::Pairs => {
            let mut s = synth_toy_pairs(a.seed, a.n.unwrap_or(2000), a.hw)?;
            s.split = a.split;
            Dataset::Pairs(s)
        }
    };
    for (k, v) in [("task", format!("{:?}", a.task).to_lowercase()), ("hw", a.hw.to_string()), ("classes", a.classes.to_string())] {
        m.config.insert(k.into(), v);
    }
    data.write(&a.out)?;
    println!("wrote {} {} examples of shape {:?} to {}", data.n_examples(), data.kind(), data.shape(), a.out.display());
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out), started)?;
    Ok(None)
}

fn train_cmd(a: TrainArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("train");
    let data = Dataset::from_bytes(&read_input(&a.data, &mut m)?)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            if a.config.is_some() || a.task.is_some() || a.bits.is_some() || a.seed.is_some() {
                return Err(config_err!("--resume takes its configuration from the checkpoint"));
            }
            let mut ck = Checkpoint::from_bytes(&read_input(p, &mut m)?)?;
            if let Some(e) = a.epochs {
                ck.config.epochs = e;
            }
            if let Some(s) = a.max_steps {
                ck.config.max_steps = s;
            }
            ck.config.validate()?;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let mut cfg = load_config(a.config.as_deref(), &mut m)?;
            if let Some(t) = a.task {
                cfg.task = t;
            }
            if let Some(b) = a.bits {
                cfg.code_bits = b;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = a.max_steps {
                cfg.max_steps = s;
            }
            cfg.validate()?;
            Trainer::new(cfg, data.shape())?
        }
    };
    m.echo(trainer.config());
    let log = trainer.run(&data, Some(&a.out))?;
    if let Some((step, last)) = log.last() {
        println!(
            "trained to step {}: l_d {:.4} l_dmr {:.4} l_me {:.4} l_mac {:.4} l_total {:.4} l_g {:.4}",
            step + 1,
            last.l_d,
            last.l_dmr,
            last.l_me,
            last.l_mac,
            last.l_total,
            last.l_g
        );
    }
    let mut outputs: Vec<String> = fs::read_dir(&a.out)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "bgck" || x == "csv"))
        .map(|p| p.display().to_string())
        .collect();
    outputs.sort();
    m.outputs = outputs;
    m.write(&a.out.join("manifest.json"), started)?;
    println!("checkpoint: {}", a.out.join("final.bgck").display());
    Ok(None)
}

fn extract(a: ExtractArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("extract");
    let ck = Checkpoint::from_bytes(&read_input(&a.ckpt, &mut m)?)?;
    let data = Dataset::from_bytes(&read_input(&a.data, &mut m)?)?;
    m.echo(&ck.config);
    let d = extract_codes(&ck.disc, &data)?;
    d.write(&a.out)?;
    println!("wrote {} descriptors of {} bits to {}", d.codes.n_rows(), d.codes.n_bits(), a.out.display());
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out), started)?;
    Ok(None)
}

fn eval_retrieval(a: EvalRetrievalArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("eval-retrieval");
    let q = Descriptors::from_bytes(&read_input(&a.queries, &mut m)?)?;
    let db = Descriptors::from_bytes(&read_input(&a.db, &mut m)?)?;
    let r = map_retrieval(&q, &db, a.k)?;
    println!("{r}");
    if let Some(p) = &a.per_query {
        fs::write(p, r.to_csv())?;
        m.config.insert("k".into(), a.k.to_string());
        m.outputs.push(p.display().to_string());
        m.write(&sidecar(p), started)?;
    }
    Ok(None)
}

fn eval_matching(a: EvalMatchingArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("eval-matching");
    let ck = Checkpoint::from_bytes(&read_input(&a.ckpt, &mut m)?)?;
    let Dataset::Pairs(pairs) = Dataset::from_bytes(&read_input(&a.pairs, &mut m)?)? else {
        return Err(Error::Data(format!("{} is not a pairs dataset", a.pairs.display())));
    };
    let r = evaluate_matching(&ck.disc, &pairs, a.tpr)?;
    println!("{r}");
    if let Some(p) = &a.roc {
        fs::write(p, r.roc_csv())?;
        m.echo(&ck.config);
        m.outputs.push(p.display().to_string());
        m.write(&sidecar(p), started)?;
    }
    Ok(None)
}

fn ablate(a: AblateArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("ablate");
    let train_data = Dataset::from_bytes(&read_input(&a.data, &mut m)?)?;
    let eval_pairs = match &a.pairs {
        Some(p) => Dataset::from_bytes(&read_input(p, &mut m)?)?,
        None => train_data.clone(),
    };
    let Dataset::Pairs(eval_pairs) = eval_pairs else {
        return Err(Error::Data("ablation evaluates on a pairs dataset".into()));
    };
    let mut cfg = load_config(a.config.as_deref(), &mut m)?;
    if a.config.is_none() {
        cfg.task = Task::Matching;
    }
    m.echo(&cfg);
    let table = run_ablation(&train_data, &eval_pairs, &cfg, a.tpr, Some(&a.out))?;
    print!("{table}");
    let csv = a.out.join("ablation.csv");
    fs::write(&csv, table.to_csv())?;
    m.outputs.push(csv.display().to_string());
    for r in &table.rows {
        m.outputs.push(a.out.join(format!("dmr{}_bre{}/final.bgck", r.lambda_dmr, r.lambda_bre)).display().to_string());
    }
    m.write(&a.out.join("manifest.json"), started)?;
    Ok(None)
}

/// Tiles `n` planar images of `shape` into a near-square grid with a
/// one-pixel mid-gray border.
fn tile(images: &[u8], n: usize, shape: [usize; 3]) -> ([usize; 3], Vec<u8>) {
    let [c, h, w] = shape;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = vec![128u8; c * gh * gw];
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((i * c + ch) * h + y) * w + x;
                    let dst = (ch * gh + r * (h + 1) + 1 + y) * gw + col * (w + 1) + 1 + x;
                    out[dst] = images[src];
                }
            }
        }
    }
    ([c, gh, gw], out)
}

fn sample(a: SampleArgs) -> Result<Option<i32>> {
    let started = Instant::now();
    let mut m = RunManifest::new("sample");
    if a.n == 0 {
        return Err(config_err!("--n must be positive"));
    }
    let ck = Checkpoint::from_bytes(&read_input(&a.ckpt, &mut m)?)?;
    m.echo(&ck.config);
    let trainer = Trainer::from_checkpoint(ck)?;
    let x = trainer.sample(a.n)?;
    let shape = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let want = if shape[0] == 1 { "pgm" } else { "ppm" };
    if a.out.extension().is_none_or(|e| e != want) {
        return Err(config_err!("{}-channel samples are written as .{want}", shape[0]));
    }
    let px: Vec<u8> = x.data().iter().map(|&v| denormalize(v)).collect();
    let (gs, grid) = tile(&px, a.n, shape);
    fs::write(&a.out, write_netpbm(gs, &grid)?)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out), started)?;
    Ok(None)
}

fn selfcheck_cmd(a: SelfcheckArgs) -> Result<Option<i32>> {
    let mut failed = 0;
    for (outcomes, elapsed) in selfcheck::run_all(a.seed)? {
        for o in &outcomes {
            println!("{o}");
            failed += usize::from(!o.passed);
        }
        if let Some(o) = outcomes.first() {
            println!("  [{}] {:.1}s", o.suite, elapsed.as_secs_f64());
        }
    }
    if failed > 0 {
        eprintln!("error[selfcheck]: {failed} check(s) failed");
        Ok(Some(EXIT_SELFCHECK))
    } else {
        println!("all checks passed");
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_hash_matches_git() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn tile_places_images_in_grid() {
        let imgs: Vec<u8> = (0..3).flat_map(|i| vec![i as u8 * 10; 4]).collect();
        let (s, g) = tile(&imgs, 3, [1, 2, 2]);
        assert_eq!(s, [1, 7, 7]);
        assert_eq!(g[7 + 1], 0);
        assert_eq!(g[7 + 4], 10);
        assert_eq!(g[4 * 7 + 1], 20);
        assert_eq!(g[4 * 7 + 4], 128);
    }

    #[test]
    fn usage_errors_are_config_class() {
        assert_eq!(main_with_args(["bingan", "train"]), 2);
        assert_eq!(main_with_args(["bingan", "frobnicate"]), 2);
        assert_eq!(main_with_args(["bingan", "--help"]), 0);
    }
}
