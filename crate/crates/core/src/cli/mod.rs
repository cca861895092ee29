//! Command-line experiment runner. Each subcommand reads one JSON config,
//! applies `--set` overrides, writes its artifacts into the output
//! directory and finishes with `manifest.json`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 parse error, 3 invalid config.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{apply_override, parse as parse_config};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::InvalidConfig { field, reason } => CliError::Validation(format!("{field}: {reason}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "relufy", version, about = "Activation-sparsity experiments on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value with a dotted key, e.g. `train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from scratch.
    Train(Common),
    /// Apply ReLU surgery to a checkpoint, optionally finetuning.
    Relufy(Common),
    /// Per-layer, per-site input sparsity.
    Sparsity(Common),
    /// Preactivation histogram.
    Hist(Common),
    /// Aggregated-sparsity traces and the random baseline.
    Aggregated(Common),
    /// Analytic per-token MACs.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Architecture preset name.
        #[arg(long)]
        arch: Option<String>,
        /// Input sparsity `qkv_in,up_in,down_in`.
        #[arg(long)]
        profile: Option<String>,
        /// Preset for a FLOPS-matched dense comparison.
        #[arg(long = "arch-b")]
        arch_b: Option<String>,
    },
    /// Speculative-decoding speedup sweep.
    Specdec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Vec<f64>,
        /// Draft-to-target per-token cost ratio.
        #[arg(long)]
        c: Vec<f64>,
        #[arg(long = "gamma-max")]
        gamma_max: Option<u32>,
        /// Constant aggregated sparsity of the target model.
        #[arg(long)]
        s: Option<f64>,
    },
    /// Weight-reuse generation sweep over gamma.
    Reuse(Common),
    /// Train one model per FFN activation.
    BetaSweep(Common),
    /// Pretrain, apply surgery, finetune.
    Recovery(Common),
    /// Choose a shift from preactivations and compare shifted and plain ReLU.
    ShiftedRelu(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Relufy(_) => "relufy",
            Command::Sparsity(_) => "sparsity",
            Command::Hist(_) => "hist",
            Command::Aggregated(_) => "aggregated",
            Command::Flops { .. } => "flops",
            Command::Specdec { .. } => "specdec",
            Command::Reuse(_) => "reuse",
            Command::BetaSweep(_) => "beta-sweep",
            Command::Recovery(_) => "recovery",
            Command::ShiftedRelu(_) => "shifted-relu",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::Relufy(c)
            | Command::Sparsity(c)
            | Command::Hist(c)
            | Command::Aggregated(c)
            | Command::Reuse(c)
            | Command::BetaSweep(c)
            | Command::Recovery(c)
            | Command::ShiftedRelu(c) => c,
            Command::Flops { common, .. } | Command::Specdec { common, .. } => common,
        }
    }

    /// Dedicated flags expressed as overrides of the experiment section.
    fn flag_overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        match self {
            Command::Flops {
                arch, profile, arch_b, ..
            } => {
                if let Some(a) = arch {
                    out.push(("arch".into(), json!(a)));
                }
                if let Some(p) = profile {
                    out.push(("profile".into(), json!(p)));
                }
                if let Some(b) = arch_b {
                    out.push(("arch_b".into(), json!(b)));
                }
            }
            Command::Specdec {
                alpha, c, gamma_max, s, ..
            } => {
                if !alpha.is_empty() {
                    out.push(("alpha".into(), json!(alpha)));
                }
                if !c.is_empty() {
                    out.push(("c".into(), json!(c)));
                }
                if let Some(g) = gamma_max {
                    out.push(("gamma_max".into(), json!(g)));
                }
                if let Some(s) = s {
                    out.push(("s".into(), json!(s)));
                }
            }
            _ => {}
        }
        out
    }
}

const TOP_LEVEL_KEYS: [&str; 7] = ["seed", "model", "train", "experiment", "output_dir", "checkpoint", "corpus"];

/// Resolved config document plus the output sink.
pub struct Context {
    pub doc: Value,
    pub seed: u64,
    pub out_dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Context {
    /// Writes one artifact, creating the output directory on first use.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Runtime(format!("creating {}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        self.artifacts.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn path_of(&self, key: &str) -> Option<PathBuf> {
        self.doc.get(key).and_then(Value::as_str).map(PathBuf::from)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the config, applies overrides and validates the top level.
pub fn resolve(command: &Command) -> Result<Context, CliError> {
    let common = command.common();
    let mut doc = config::load(common.config.as_deref())?;
    for spec in &common.overrides {
        config::apply_override(&mut doc, spec)?;
    }
    for (key, value) in command.flag_overrides() {
        let obj = doc.as_object_mut().expect("config is an object");
        let exp = obj.entry("experiment").or_insert_with(|| json!({}));
        match exp.as_object_mut() {
            Some(e) => {
                e.insert(key, value);
            }
            None => return Err(CliError::Validation("experiment: must be an object".into())),
        }
    }
    let obj = doc.as_object().expect("config is an object");
    if let Some(k) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(CliError::Validation(format!("{k}: unknown top-level key")));
    }
    let seed = match obj.get("seed") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| CliError::Validation("seed: expected a non-negative integer".into()))?,
    };
    let out_dir = match (&common.out, obj.get("output_dir")) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(s))) => PathBuf::from(s),
        (None, Some(_)) => return Err(CliError::Validation("output_dir: expected a path string".into())),
        (None, None) => PathBuf::from("out"),
    };
    for key in ["checkpoint", "corpus"] {
        if obj.get(key).is_some_and(|v| !v.is_string()) {
            return Err(CliError::Validation(format!("{key}: expected a path string")));
        }
    }
    Ok(Context {
        doc,
        seed,
        out_dir,
        artifacts: BTreeMap::new(),
    })
}

/// Parses arguments already split by clap and runs the subcommand.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut ctx = resolve(&cli.command)?;
    commands::execute(&cli.command, &mut ctx)?;
    write_manifest(cli.command.name(), &mut ctx)
}

fn write_manifest(subcommand: &str, ctx: &mut Context) -> Result<(), CliError> {
    let canonical = serde_json::to_string(&ctx.doc).expect("config serializes");
    let manifest = json!({
        "tool": "relufy",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "seed": ctx.seed,
        "config_sha256": hex(&Sha256::digest(canonical.as_bytes())),
        "config": ctx.doc,
        "artifacts": ctx.artifacts,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::create_dir_all(&ctx.out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", ctx.out_dir.display())))?;
    let path = ctx.out_dir.join("manifest.json");
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))
}
