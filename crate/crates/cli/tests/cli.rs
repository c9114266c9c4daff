use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fsdm_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsdm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn fsdm(args: &[&str]) -> Output {
    fsdm_in(Path::new("."), args)
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let json = r#"{
            "seed": 5,
            "output_dir": "run",
            "dataset": {"kind": "shapes", "n_source": 12, "m_target": 3},
            "schedule": {"steps": 40},
            "denoiser": {"widths": [4, 8], "time_dim": 8},
            "phasic": {"t_s": 12},
            "train": {"batch_size": 4, "pretrain_iters": 3, "warmup_iters": 2, "adapt_iters": 3,
                       "metrics_every": 2, "eval_steps": 4},
            "sample": {"M": 16, "t_stop": 8, "count": 3}
        }"#;
    fs::write(&path, json).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SUBCOMMANDS: [&str; 6] = ["gen-data", "pretrain", "adapt", "sample", "geolab", "metrics"];

#[test]
fn help_works_for_every_subcommand() {
    ok(&fsdm(&["--help"]));
    for sub in SUBCOMMANDS {
        let out = fsdm(&[sub, "--help"]);
        ok(&out);
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("--seed"),
            "{sub} help lacks --seed"
        );
    }
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsdm(&["gen-data", "--output-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn t_stop_above_start_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let out = fsdm_in(
        dir.path(),
        &["sample", "--config", "tiny.json", "--M", "10", "--t-stop", "20"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t_stop"), "stderr: {err}");
}

fn run_pipeline(dir: &Path) -> PathBuf {
    tiny_config(dir);
    let c = "tiny.json";
    for args in [
        vec!["gen-data", "--config", c],
        vec!["pretrain", "--config", c],
        vec!["adapt", "--config", c],
        vec!["sample", "--config", c, "--mode", "icsg"],
        vec!["metrics", "--config", c],
        vec!["geolab", "--config", c, "--loss", "pairwise-dist"],
    ] {
        ok(&fsdm_in(dir, &args));
    }
    dir.join("run")
}

const OUTPUTS: [&str; 13] = [
    "data/checksums.txt",
    "data/source/sample_000.pgm",
    "data/target/sample_002.pgm",
    "pretrain.ckpt",
    "pretrain_loss.csv",
    "adapt.ckpt",
    "metrics.csv",
    "adapt_loss.csv",
    "samples/sample_000.pgm",
    "samples/sample_002.pgm",
    "sample_metrics.csv",
    "geolab/pairwise_dist.csv",
    "geolab/pairwise_dist_points.csv",
];

#[test]
fn smoke_pipeline_writes_everything_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (run_pipeline(a.path()), run_pipeline(b.path()));
    for name in OUTPUTS {
        let x = fs::read(ra.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let y = fs::read(rb.join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
    assert!(!ra.join("samples/sample_003.pgm").exists());
    let metrics = fs::read_to_string(ra.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("run_id,seed,iteration,loss_dif"));
    // rows at 0, 2 and the final iteration 3
    assert_eq!(lines.count(), 3);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    ok(&fsdm_in(
        dir.path(),
        &["gen-data", "--config", "tiny.json", "--output-dir", "a"],
    ));
    ok(&fsdm_in(
        dir.path(),
        &["gen-data", "--config", "tiny.json", "--seed", "6", "--output-dir", "b"],
    ));
    let sums = |d: &str| fs::read_to_string(dir.path().join(d).join("data/checksums.txt")).unwrap();
    assert_ne!(sums("a"), sums("b"));
}
