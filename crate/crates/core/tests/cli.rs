//! Command-line contract: artifact schemas, overrides, manifests and exit
//! codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relufy::specdec::{optimal_gamma, SaggCurve};

const CONFIG: &str = r#"{
  "seed": 3,
  "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ffn": 32, "max_seq": 160,
            "ffn_activation": {"kind": "relu"}},
  "train": {"steps": 3, "batch_size": 2, "seq_len": 32, "eval_windows": 2}
}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relufy")).args(args).output().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    stdout: String,
}

fn run_ok(sub: &str, extra: &[&str]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = cli(&args);
    assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    Run {
        _dir: dir,
        out,
        stdout: String::from_utf8(o.stdout).unwrap(),
    }
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn keys(v: &serde_json::Value) -> Vec<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn assert_manifest(out: &Path, sub: &str, artifacts: &[&str]) {
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["subcommand"], sub);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    let listed = keys(&m["artifacts"]);
    for a in artifacts {
        assert!(listed.contains(&a.to_string()), "{sub}: {a} missing from {listed:?}");
        assert!(out.join(a).exists());
    }
}

#[test]
fn train_schema() {
    let r = run_ok("train", &["--set", "train.snapshot_steps=[0,3]"]);
    assert_eq!(header(&r.out.join("loss_curve.csv")), "step,train_loss,val_loss");
    assert_eq!(header(&r.out.join("hist_step0.csv")), "bin_lo,bin_hi,count");
    assert!(r.out.join("hist_step3.csv").exists());
    let s = json(&r.out.join("summary.json"));
    assert!(s["final_val_loss"].is_number() && s["initial_val_loss"].is_number());
    assert_manifest(&r.out, "train", &["model.bin", "loss_curve.csv", "summary.json"]);
}

#[test]
fn sparsity_and_hist_schemas() {
    let r = run_ok("sparsity", &["--set", "experiment.windows=2"]);
    assert_eq!(header(&r.out.join("sparsity.csv")), "layer,site,sparsity");
    assert_eq!(keys(&json(&r.out.join("profile.json"))), ["down_in", "qkv_in", "up_in"]);
    assert_manifest(&r.out, "sparsity", &["sparsity.csv", "profile.json"]);

    let r = run_ok("hist", &["--set", "experiment.windows=2"]);
    assert_eq!(header(&r.out.join("histogram.csv")), "bin_lo,bin_hi,count");
}

#[test]
fn aggregated_schema_and_monotone_trace() {
    let r = run_ok("aggregated", &["--set", "experiment.windows=2", "--set", "experiment.tokens=40"]);
    let trace = std::fs::read_to_string(r.out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "t,layer,unused_fraction");
    assert_eq!(header(&r.out.join("baseline.csv")), "t,layer,baseline");
    assert_eq!(trace.lines().count(), 1 + 40 * 2);
}

#[test]
fn flops_example_from_arch_preset() {
    let r = run_ok("flops", &["--arch", "opt-6.7b", "--profile", "0,0,0.97"]);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    let total = v["effective_total"].as_f64().unwrap();
    assert!((total - 4.57e9).abs() < 0.01e9, "{total}");
    assert_eq!(header(&r.out.join("flops.csv")), "site,dense_macs,effective_macs,share");
    assert_eq!(json(&r.out.join("flops.json")), v);
}

#[test]
fn specdec_argmax_row_matches_optimal_gamma() {
    let r = run_ok("specdec", &["--alpha", "0.8", "--c", "0.02", "--gamma-max", "64", "--s", "0"]);
    let csv = std::fs::read_to_string(r.out.join("specdec.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "gamma,alpha,c,s_agg,thm1,thm2,expected_tokens");
    let best = lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[0] as u32, f[5])
        })
        .fold((0, f64::MIN), |acc, (g, s)| if s > acc.1 { (g, s) } else { acc });
    let want = optimal_gamma(0.8, 0.02, &SaggCurve::Constant { value: 0.0 }, 64).unwrap();
    assert_eq!(best.0, want);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v[0]["optimal_gamma"], want);
}

#[test]
fn reuse_schema() {
    let r = run_ok(
        "reuse",
        &[
            "--set", "experiment.warmup=8", "--set", "experiment.horizon=8", "--set", "experiment.windows=2",
            "--set", "experiment.seeds=[0,1]", "--set", "experiment.gammas=[2,4]",
        ],
    );
    let csv = std::fs::read_to_string(r.out.join("reuse.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "gamma,policy,seed,nll,row_loads");
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
}

#[test]
fn relufy_writes_a_loadable_checkpoint() {
    let r = run_ok("relufy", &["--set", "experiment.stage=\"stage2\""]);
    let m = relufy::model::Model::load(r.out.join("relufied.bin")).unwrap();
    assert!(m.config.post_norm_activation.is_some());
    assert!(json(&r.out.join("relufy.json")).is_object());
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let a = run_ok("train", &[]);
    let b = run_ok("train", &[]);
    for name in ["model.bin", "loss_curve.csv", "summary.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.out.join(name)).unwrap(), std::fs::read(b.out.join(name)).unwrap(), "{name}");
    }
    let c = run_ok("train", &["--set", "seed=4"]);
    assert_ne!(std::fs::read(a.out.join("model.bin")).unwrap(), std::fs::read(c.out.join("model.bin")).unwrap());
}

#[test]
fn overrides_reach_the_recorded_config() {
    let r = run_ok("sparsity", &["--set", "experiment.windows=1", "--set", "model.d_ffn=24"]);
    let m = json(&r.out.join("manifest.json"));
    assert_eq!(m["config"]["model"]["d_ffn"], 24);
    assert_eq!(m["config"]["experiment"]["windows"], 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    };
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let bad = write("bad.json", "{\n  \"seed\": 1,\n  \"model\": [\n}");
    let o = cli(&["sparsity", "--config", &bad, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));

    let missing = write("missing.json", "{\"seed\": 1}");
    let o = cli(&["sparsity", "--config", &missing, "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model"));

    let unknown = write("unknown.json", "{\"seed\": 1, \"model\": {}, \"colour\": 2}");
    let o = cli(&["sparsity", "--config", &unknown, "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let o = cli(&["sparsity", "--config", &missing, "--set", "model.d_model=0", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_model"));

    let o = cli(&["specdec", "--alpha", "1.5", "--out", out]);
    assert_eq!(o.status.code(), Some(3));

    let o = cli(&["sparsity", "--config", &missing, "--set", "checkpoint=/nonexistent/x.bin", "--out", out]);
    assert_eq!(o.status.code(), Some(1));

    let o = cli(&["sparsity", "--config", &dir.path().join("nope.json").to_string_lossy(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}
