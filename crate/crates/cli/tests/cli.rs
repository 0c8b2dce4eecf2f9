//! End-to-end runs of the `trajdiff` binary on a small synthetic config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trajdiff::trace::SampleTrace;
use trajdiff::RunConfig;

fn small() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.synthetic.scenes = 4;
    c.data.synthetic.holdout_scenes = 1;
    c.model.width = 16;
    c.model.ffn = 32;
    c.model.layers = 1;
    c.model.lstm_hidden = 8;
    c.model.cond_width = 8;
    c.model.cnn_channels = [4, 4, 8];
    c.scene.grid = 16;
    c.train.batch_size = 16;
    c.train.max_steps = 20;
    c.eval.n_samples = 4;
    c
}

fn write_config(dir: &Path, name: &str, c: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, c.to_toml().unwrap()).unwrap();
    path
}

fn trajdiff(config: Option<&Path>, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trajdiff"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// preprocess → train → sample --trace → evaluate → plot in `out`.
fn pipeline(config: &Path, out: &Path) {
    ok(&trajdiff(Some(config), out, &["preprocess"]));
    ok(&trajdiff(Some(config), out, &["train"]));
    let ckpt = out.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    ok(&trajdiff(Some(config), out, &["sample", "--checkpoint", ckpt, "--windows", "0,1", "--trace"]));
    ok(&trajdiff(Some(config), out, &["evaluate", "--checkpoint", ckpt]));
    let trace = out.join("samples.trace");
    ok(&trajdiff(Some(config), out, &["plot", "--trace", trace.to_str().unwrap()]));
}

#[test]
fn pipeline_outputs_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", &small());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);

    for f in ["windows.archive", "final.ckpt", "loss_curve.csv", "samples.trace", "samples.csv", "report.json", "report.csv"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between reruns");
    }

    let trace = SampleTrace::read(&a.join("samples.trace")).unwrap();
    assert_eq!(trace.meta.steps.len(), 21);
    assert_eq!(trace.meta.steps.first(), Some(&100));
    assert_eq!(trace.meta.steps.last(), Some(&0));
    let panels = std::fs::read_dir(a.join("panels")).unwrap().count();
    assert_eq!(panels, 21);
    assert!(a.join("error_vs_step.png").exists() && a.join("error_vs_step.csv").exists());

    let report = std::fs::read_to_string(a.join("report.json")).unwrap();
    assert!(report.contains(&small().hash()));

    // A trace evaluates to the same rows as its own final samples.
    let t = a.join("samples.trace");
    ok(&trajdiff(Some(&config), &a.join("from_trace"), &["evaluate", "--trace", t.to_str().unwrap()]));
}

#[test]
fn ablated_checkpoints_compare_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let base = small();
    let config = write_config(dir.path(), "run.toml", &base);
    let mut masked = base.clone();
    masked.train.ablation.history = true;
    let masked_cfg = write_config(dir.path(), "masked.toml", &masked);

    let full = dir.path().join("full");
    let hist = dir.path().join("hist");
    ok(&trajdiff(Some(&config), &full, &["preprocess"]));
    ok(&trajdiff(Some(&config), &full, &["train"]));
    let archive = full.join("windows.archive");
    ok(&trajdiff(Some(&masked_cfg), &hist, &["train", "--archive", archive.to_str().unwrap()]));

    let probe: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(hist.join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["row_max_abs"]["history"], 0.0);
    assert!(probe["row_max_abs"]["neighbors"].as_f64().unwrap() > 0.0);

    let cmp = dir.path().join("cmp");
    let o = trajdiff(
        Some(&config),
        &cmp,
        &[
            "evaluate",
            "--archive",
            archive.to_str().unwrap(),
            "--checkpoint",
            full.join("final.ckpt").to_str().unwrap(),
            "--checkpoint",
            hist.join("final.ckpt").to_str().unwrap(),
            "--horizons",
            "1,2",
        ],
    );
    ok(&o);
    let table = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert!(table.starts_with("hours,steps,full_ade,full_fde,no-history_ade,no-history_fde\n"), "{table}");
    assert_eq!(table.lines().count(), 3);
    assert!(cmp.join("report_full.json").exists() && cmp.join("report_no-history.json").exists());

    let curve = dir.path().join("curve");
    let o = trajdiff(
        None,
        &curve,
        &[
            "plot",
            "--report",
            cmp.join("report_full.json").to_str().unwrap(),
            "--report",
            cmp.join("report_no-history.json").to_str().unwrap(),
        ],
    );
    ok(&o);
    assert!(curve.join("report_curve.png").exists());
}

#[test]
fn mismatched_config_is_refused_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let base = small();
    let config = write_config(dir.path(), "run.toml", &base);
    let out = dir.path().join("out");
    ok(&trajdiff(Some(&config), &out, &["preprocess"]));
    ok(&trajdiff(Some(&config), &out, &["train"]));

    let mut other = base.clone();
    other.train.learning_rate *= 2.0;
    let other_cfg = write_config(dir.path(), "other.toml", &other);
    let ckpt = out.join("final.ckpt");
    let o = trajdiff(Some(&other_cfg), &out, &["sample", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&base.hash()) && err.contains(&other.hash()), "{err}");

    // A different data section makes the archive itself incompatible.
    let mut moved = base.clone();
    moved.data.window_stride += 1;
    let moved_cfg = write_config(dir.path(), "moved.toml", &moved);
    let o = trajdiff(Some(&moved_cfg), &out, &["train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let mut missing = small();
    missing.data.source = trajdiff::config::DataSource::Ais;
    missing.data.inputs = vec![PathBuf::from("nowhere.csv")];
    let cfg = write_config(dir.path(), "missing.toml", &missing);
    let o = trajdiff(Some(&cfg), &out, &["preprocess"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));

    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    missing.data.inputs = vec![PathBuf::from("empty.csv")];
    let cfg = write_config(dir.path(), "empty.toml", &missing);
    let o = trajdiff(Some(&cfg), &out, &["preprocess"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no journeys"), "{}", stderr(&o));

    let o = trajdiff(None, &out, &["preprocess"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(dir.path().join("bad.toml"), "seed = \"x\"\n").unwrap();
    let o = trajdiff(Some(&dir.path().join("bad.toml")), &out, &["preprocess"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), "run.toml", &small());
    let o = trajdiff(Some(&cfg), &out, &["evaluate", "--checkpoint", "absent.ckpt", "--horizons", ""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));

    std::fs::write(dir.path().join("junk.trace"), b"VTTRACE\0garbage").unwrap();
    let o = trajdiff(None, &out, &["plot", "--trace", dir.path().join("junk.trace").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
