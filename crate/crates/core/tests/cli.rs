// SPDX-License-Identifier: Apache-2.0

//! End-to-end runs of the `bingan` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bingan::data::{write_netpbm, Dataset};
use bingan::quantize::Descriptors;
use bingan::train::Checkpoint;

const TOY_CONFIG: &str = "\
# small toy run
task = toy
code_bits = 8
batch_size = 16
z_dim = 16
max_steps = 4
";

fn bingan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bingan")).args(args).env("BINGAN_THREADS", "1").output().expect("spawn bingan")
}

fn ok(args: &[&str]) -> String {
    let out = bingan(args);
    assert!(
        out.status.success(),
        "bingan {args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, class: &str) -> String {
    let out = bingan(args);
    assert_eq!(out.status.code(), Some(code), "bingan {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap_or_default();
    assert!(line.starts_with(&format!("error[{class}]: ")), "unexpected error line {line:?}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn retrieval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("toy.cfg"), TOY_CONFIG).unwrap();

    ok(&["synth", "--task", "retrieval", "--seed", "1", "--n", "10", "--out", s(&p("db.bgds"))]);
    ok(&["synth", "--task", "retrieval", "--seed", "2", "--n", "3", "--split", "test", "--out", s(&p("q.bgds"))]);
    let db = Dataset::read(&p("db.bgds")).unwrap();
    assert_eq!((db.n_examples(), db.shape()), (40, [3, 16, 16]));
    assert!(p("db.bgds.manifest.json").exists());

    let stdout = ok(&["train", "--data", s(&p("db.bgds")), "--config", s(&p("toy.cfg")), "--out", s(&p("run"))]);
    assert!(stdout.contains("trained to step 4"), "{stdout}");
    let ck = Checkpoint::read(&p("run/final.bgck")).unwrap();
    assert_eq!(ck.step, 4);
    let m = manifest(&p("run/manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["code_bits"], "8");
    assert!(m["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("db.bgds")));

    let ck_path = p("run/final.bgck");
    ok(&["extract", "--ckpt", s(&ck_path), "--data", s(&p("db.bgds")), "--out", s(&p("db1.bgbd"))]);
    ok(&["extract", "--ckpt", s(&ck_path), "--data", s(&p("db.bgds")), "--out", s(&p("db2.bgbd"))]);
    assert_eq!(fs::read(p("db1.bgbd")).unwrap(), fs::read(p("db2.bgbd")).unwrap());
    ok(&["extract", "--ckpt", s(&ck_path), "--data", s(&p("q.bgds")), "--out", s(&p("q.bgbd"))]);
    let codes = Descriptors::read(&p("db1.bgbd")).unwrap();
    assert_eq!((codes.codes.n_rows(), codes.codes.n_bits()), (40, 8));

    let report = ok(&[
        "eval-retrieval",
        "--queries",
        s(&p("q.bgbd")),
        "--db",
        s(&p("db1.bgbd")),
        "--k",
        "10",
        "--per-query",
        s(&p("ap.csv")),
    ]);
    assert!(report.contains("mAP@10"), "{report}");
    assert_eq!(fs::read_to_string(p("ap.csv")).unwrap().lines().count(), 1 + 12);

    ok(&["sample", "--ckpt", s(&ck_path), "--n", "4", "--out", s(&p("grid.ppm"))]);
    let (shape, _) = bingan::data::read_netpbm(&fs::read(p("grid.ppm")).unwrap()).unwrap();
    assert_eq!(shape, [3, 35, 35]);
    fails(&["sample", "--ckpt", s(&ck_path), "--out", s(&p("grid.pgm"))], 2, "config");
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("toy.cfg"), TOY_CONFIG).unwrap();
    ok(&["synth", "--task", "retrieval", "--n", "8", "--out", s(&p("d.bgds"))]);

    ok(&["train", "--data", s(&p("d.bgds")), "--config", s(&p("toy.cfg")), "--out", s(&p("full"))]);
    ok(&["train", "--data", s(&p("d.bgds")), "--config", s(&p("toy.cfg")), "--max-steps", "2", "--out", s(&p("half"))]);
    ok(&[
        "train",
        "--data",
        s(&p("d.bgds")),
        "--resume",
        s(&p("half/final.bgck")),
        "--max-steps",
        "4",
        "--out",
        s(&p("rest")),
    ]);
    assert_eq!(fs::read(p("full/final.bgck")).unwrap(), fs::read(p("rest/final.bgck")).unwrap());
}

#[test]
fn matching_and_ablation_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("m.cfg"), "task = matching\ncode_bits = 256\nchannel_div = 16\nbatch_size = 8\nz_dim = 8\nmax_steps = 2\n")
        .unwrap();
    ok(&["synth", "--task", "pairs", "--n", "12", "--out", s(&p("pairs.bgds"))]);
    ok(&["train", "--data", s(&p("pairs.bgds")), "--config", s(&p("m.cfg")), "--out", s(&p("run"))]);

    let report =
        ok(&["eval-matching", "--ckpt", s(&p("run/final.bgck")), "--pairs", s(&p("pairs.bgds")), "--roc", s(&p("roc.csv"))]);
    assert!(report.contains("FPR"), "{report}");
    assert!(fs::read_to_string(p("roc.csv")).unwrap().starts_with("threshold,"));
    assert!(p("roc.csv.manifest.json").exists());

    ok(&["ablate", "--data", s(&p("pairs.bgds")), "--config", s(&p("m.cfg")), "--out", s(&p("abl"))]);
    let table = fs::read_to_string(p("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    for sub in ["dmr0_bre0", "dmr0_bre0.01", "dmr0.05_bre0", "dmr0.05_bre0.01"] {
        assert!(p("abl").join(sub).join("final.bgck").exists(), "{sub}");
    }
    assert_eq!(manifest(&p("abl/manifest.json"))["command"], "ablate");
}

#[test]
fn import_reads_netpbm_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let mut csv = String::from("# file,label\n");
    for i in 0..4u8 {
        let px: Vec<u8> = (0..3 * 8 * 8).map(|j| (j as u8).wrapping_mul(i + 1)).collect();
        fs::write(p(&format!("im{i}.ppm")), write_netpbm([3, 8, 8], &px).unwrap()).unwrap();
        csv.push_str(&format!("im{i}.ppm,{}\n", i % 2));
    }
    fs::write(p("labels.csv"), csv).unwrap();
    ok(&[
        "import",
        "--kind",
        "image",
        "--in",
        s(dir.path()),
        "--labels",
        s(&p("labels.csv")),
        "--downsample",
        "--out",
        s(&p("imp.bgds")),
    ]);
    let d = Dataset::read(&p("imp.bgds")).unwrap();
    assert_eq!((d.n_examples(), d.shape()), (4, [3, 4, 4]));
    assert_eq!(d.labels().unwrap(), &[0, 1, 0, 1]);

    fs::write(p("bad.csv"), "missing.ppm,0\n").unwrap();
    fails(&["import", "--kind", "image", "--in", s(dir.path()), "--labels", s(&p("bad.csv")), "--out", s(&p("x.bgds"))], 3, "data");
}

#[test]
fn errors_are_one_line_with_class_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    fails(&["train"], 2, "config");
    fails(&["frobnicate"], 2, "config");

    fs::write(p("bad.cfg"), "task = toy\nlearning_rat = 0.1\n").unwrap();
    ok(&["synth", "--task", "retrieval", "--n", "2", "--out", s(&p("d.bgds"))]);
    let err = fails(&["train", "--data", s(&p("d.bgds")), "--config", s(&p("bad.cfg")), "--out", s(&p("o"))], 2, "config");
    assert!(err.contains("learning_rat"), "{err}");

    let mut bytes = fs::read(p("d.bgds")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(p("d.bgds"), bytes).unwrap();
    let err = fails(&["extract", "--ckpt", s(&p("d.bgds")), "--data", s(&p("d.bgds")), "--out", s(&p("x.bgbd"))], 3, "format");
    assert_eq!(err.lines().count(), 1, "{err}");

    fails(&["eval-retrieval", "--queries", s(&p("none.bgbd")), "--db", s(&p("none.bgbd"))], 3, "data");
    assert!(ok(&["--help"]).contains("selfcheck"));
}
