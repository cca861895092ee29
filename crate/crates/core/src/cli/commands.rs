use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{experiment, required, section};
use super::{read_file, CliError, Command, Context};
use crate::activations::ActivationSpec;
use crate::flops::{compute_shares, effective_macs, flops_matched_compare, ArchSpec, SparsityProfile};
use crate::instrument::{random_baseline, HistogramRecorder, PreactHistogram, SparsityRecorder, TraceRecorder};
use crate::model::{Model, ModelConfig, PreactSite, SurgeryStage};
use crate::reuse::{sweep_gamma, sweep_to_csv};
use crate::specdec::{optimal_gamma, sweep, thm2_speedup, SaggCurve};
use crate::train::{
    beta_sweep, beta_sweep_csv, default_sweep_members, eval_loss, finetune_budget, recovery_experiment,
    shifted_relu_experiment, train_model, Corpus, TrainConfig,
};

type Res<T> = Result<T, CliError>;

pub fn execute(command: &Command, ctx: &mut Context) -> Res<()> {
    match command {
        Command::Train(_) => train(ctx),
        Command::Relufy(_) => relufy(ctx),
        Command::Sparsity(_) => sparsity(ctx),
        Command::Hist(_) => hist(ctx),
        Command::Aggregated(_) => aggregated(ctx),
        Command::Flops { .. } => flops(ctx),
        Command::Specdec { .. } => specdec(ctx),
        Command::Reuse(_) => reuse(ctx),
        Command::BetaSweep(_) => run_beta_sweep(ctx),
        Command::Recovery(_) => recovery(ctx),
        Command::ShiftedRelu(_) => shifted_relu(ctx),
    }
}

fn model_config(ctx: &Context) -> Res<ModelConfig> {
    let cfg: ModelConfig = required(&ctx.doc, "model")?;
    cfg.validate()?;
    Ok(cfg)
}

/// A checkpoint when `checkpoint` is set, otherwise a fresh model seeded by
/// the global seed.
fn load_model(ctx: &Context) -> Res<Model> {
    match ctx.path_of("checkpoint") {
        Some(path) => Ok(Model::load(path)?),
        None => Ok(Model::init_random(model_config(ctx)?, ctx.seed)?),
    }
}

/// The train section, with `seed` falling back to the global seed.
fn train_config(ctx: &Context) -> Res<TrainConfig> {
    let mut section = ctx.doc.get("train").cloned().unwrap_or_else(|| json!({}));
    let Some(obj) = section.as_object_mut() else {
        return Err(CliError::Validation("train: must be an object".into()));
    };
    obj.entry("seed").or_insert(json!(ctx.seed));
    let defaults = serde_json::to_value(TrainConfig::default()).expect("defaults serialize");
    for (k, v) in defaults.as_object().expect("struct serializes to an object") {
        if k != "seed" {
            obj.entry(k.clone()).or_insert(v.clone());
        }
    }
    let cfg: TrainConfig = serde_json::from_value(section).map_err(|e| CliError::Validation(format!("train: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn corpus(ctx: &Context) -> Res<Corpus> {
    match ctx.path_of("corpus") {
        Some(path) => Ok(Corpus::from_bytes(read_file(&path)?, 0.1)?),
        None => Ok(Corpus::bundled()),
    }
}

fn window_len(requested: Option<usize>, model: &Model) -> Res<usize> {
    let max = model.config.max_seq;
    let len = requested.unwrap_or(max.min(128));
    if len == 0 || len > max {
        return Err(CliError::Validation(format!(
            "experiment.seq_len: must lie in [1, {max}], got {len}"
        )));
    }
    Ok(len)
}

fn eval_windows(corpus: &Corpus, len: usize, count: usize) -> Res<Vec<Vec<u32>>> {
    let ws = corpus.validation_windows(len, count);
    if ws.is_empty() {
        return Err(CliError::Runtime(format!("validation split has no window of {len} tokens")));
    }
    Ok(ws)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("result serializes");
    s.push('\n');
    s.into_bytes()
}

fn train(ctx: &mut Context) -> Res<()> {
    let model = Model::init_random(model_config(ctx)?, ctx.seed)?;
    let cfg = train_config(ctx)?;
    let corpus = corpus(ctx)?;
    let run = train_model(model, &corpus, &cfg)?;
    ctx.write("model.bin", &run.model.to_bytes()?)?;
    ctx.write("loss_curve.csv", run.curve_csv().as_bytes())?;
    for (step, hist) in &run.snapshots {
        ctx.write(&format!("hist_step{step}.csv"), hist.to_csv().as_bytes())?;
    }
    ctx.write(
        "summary.json",
        &json_bytes(&json!({
            "initial_val_loss": run.initial_val_loss,
            "final_val_loss": run.final_val_loss,
            "n_params": run.model.n_params(),
        })),
    )?;
    println!("final validation loss {:.4}", run.final_val_loss);
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RelufyExp {
    stage: Option<SurgeryStage>,
    finetune_steps: usize,
}

fn relufy(ctx: &mut Context) -> Res<()> {
    let exp: RelufyExp = experiment(&ctx.doc)?;
    let model = load_model(ctx)?;
    let stage = exp.stage.unwrap_or(SurgeryStage::Stage1);
    let surgered = model.relufy(stage);
    let corpus = corpus(ctx)?;
    let mut cfg = train_config(ctx)?;
    let pre = eval_loss(&model, &corpus, &cfg)?;
    let post = eval_loss(&surgered, &corpus, &cfg)?;
    let mut summary = json!({"stage": stage, "pre_surgery_loss": pre, "post_surgery_loss": post});
    let out = if exp.finetune_steps > 0 {
        cfg.steps = exp.finetune_steps;
        let run = train_model(surgered, &corpus, &cfg)?;
        ctx.write("loss_curve.csv", run.curve_csv().as_bytes())?;
        summary["finetuned_loss"] = json!(run.final_val_loss);
        run.model
    } else {
        surgered
    };
    ctx.write("relufied.bin", &out.to_bytes()?)?;
    ctx.write("relufy.json", &json_bytes(&summary))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SparsityExp {
    tau: f64,
    windows: usize,
    seq_len: Option<usize>,
}

impl Default for SparsityExp {
    fn default() -> Self {
        Self {
            tau: 0.0,
            windows: 8,
            seq_len: None,
        }
    }
}

fn sparsity(ctx: &mut Context) -> Res<()> {
    let exp: SparsityExp = experiment(&ctx.doc)?;
    if !(exp.tau >= 0.0) {
        return Err(CliError::Validation("experiment.tau: must be non-negative".into()));
    }
    let model = load_model(ctx)?;
    let len = window_len(exp.seq_len, &model)?;
    let windows = eval_windows(&corpus(ctx)?, len, exp.windows)?;
    let mut rec = SparsityRecorder::new(exp.tau);
    for w in &windows {
        model.forward_with(w, &mut rec, None)?;
    }
    let report = rec.report()?;
    ctx.write("sparsity.csv", report.to_csv().as_bytes())?;
    ctx.write("profile.json", &json_bytes(&report.profile()))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct HistExp {
    site: PreactSite,
    layer: Option<usize>,
    lo: f64,
    hi: f64,
    bins: usize,
    windows: usize,
    seq_len: Option<usize>,
}

impl Default for HistExp {
    fn default() -> Self {
        let h = PreactHistogram::default();
        let (lo, hi) = h.range();
        Self {
            site: PreactSite::Ffn,
            layer: None,
            lo,
            hi,
            bins: h.n_bins(),
            windows: 8,
            seq_len: None,
        }
    }
}

fn hist(ctx: &mut Context) -> Res<()> {
    let exp: HistExp = experiment(&ctx.doc)?;
    let hist = PreactHistogram::new(exp.lo, exp.hi, exp.bins)
        .map_err(|e| CliError::Validation(format!("experiment: {e}")))?;
    let model = load_model(ctx)?;
    if let Some(l) = exp.layer {
        if l >= model.config.n_layers {
            return Err(CliError::Validation(format!(
                "experiment.layer: {l} out of range for {} layers",
                model.config.n_layers
            )));
        }
    }
    let len = window_len(exp.seq_len, &model)?;
    let windows = eval_windows(&corpus(ctx)?, len, exp.windows)?;
    let mut rec = HistogramRecorder::new(exp.site, hist);
    rec.layer = exp.layer;
    for w in &windows {
        model.forward_with(w, &mut rec, None)?;
    }
    ctx.write("histogram.csv", rec.hist.to_csv().as_bytes())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AggregatedExp {
    tau: f64,
    windows: usize,
    tokens: usize,
}

impl Default for AggregatedExp {
    fn default() -> Self {
        Self {
            tau: 0.0,
            windows: 5,
            tokens: 150,
        }
    }
}

fn aggregated(ctx: &mut Context) -> Res<()> {
    let exp: AggregatedExp = experiment(&ctx.doc)?;
    let model = load_model(ctx)?;
    let cfg = &model.config;
    if exp.tokens == 0 || exp.tokens > cfg.max_seq {
        return Err(CliError::Validation(format!(
            "experiment.tokens: must lie in [1, {}], got {}",
            cfg.max_seq, exp.tokens
        )));
    }
    let windows = eval_windows(&corpus(ctx)?, exp.tokens, exp.windows)?;
    let (n_layers, t_max) = (cfg.n_layers, exp.tokens);
    let mut trace = vec![vec![0.0; t_max]; n_layers];
    let mut per_token = vec![0.0; n_layers];
    for w in &windows {
        let mut rec = TraceRecorder::new(n_layers, cfg.d_ffn, exp.tau);
        model.forward_with(w, &mut rec, None)?;
        for (l, acc) in trace.iter_mut().enumerate() {
            for (a, v) in acc.iter_mut().zip(rec.trace().layer(l)) {
                *a += v;
            }
        }
        for (acc, s) in per_token.iter_mut().zip(rec.per_token_sparsity()) {
            *acc += s;
        }
    }
    let n = windows.len() as f64;
    let mut trace_csv = String::from("t,layer,unused_fraction\n");
    let mut base_csv = String::from("t,layer,baseline\n");
    let s: Vec<f64> = per_token.iter().map(|v| v / n).collect();
    for t in 1..=t_max {
        let base = random_baseline(&s, t as u32)?;
        for l in 0..n_layers {
            trace_csv.push_str(&format!("{t},{l},{}\n", trace[l][t - 1] / n));
            base_csv.push_str(&format!("{t},{l},{}\n", base[l]));
        }
    }
    ctx.write("trace.csv", trace_csv.as_bytes())?;
    ctx.write("baseline.csv", base_csv.as_bytes())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ProfileSpec {
    Text(String),
    Fields(SparsityProfile),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FlopsExp {
    arch: Option<String>,
    profile: Option<ProfileSpec>,
    arch_b: Option<String>,
}

fn preset(field: &str, name: &str) -> Res<ArchSpec> {
    ArchSpec::preset(name).map_err(|_| {
        let known: Vec<&str> = ArchSpec::preset_names().collect();
        CliError::Validation(format!("experiment.{field}: unknown preset `{name}` (known: {})", known.join(", ")))
    })
}

fn flops(ctx: &mut Context) -> Res<()> {
    let exp: FlopsExp = experiment(&ctx.doc)?;
    let arch = match (&exp.arch, section::<ModelConfig>(&ctx.doc, "model")?) {
        (Some(name), _) => preset("arch", name)?,
        (None, Some(cfg)) => {
            cfg.validate()?;
            ArchSpec::from_model(&cfg, true)
        }
        (None, None) => return Err(CliError::Validation("experiment.arch: missing (or give a model section)".into())),
    };
    let profile = match exp.profile {
        None => SparsityProfile::default(),
        Some(ProfileSpec::Text(s)) => SparsityProfile::parse(&s).map_err(|e| CliError::Validation(format!("experiment.{e}")))?,
        Some(ProfileSpec::Fields(p)) => {
            p.validate().map_err(|e| CliError::Validation(format!("experiment.{e}")))?;
            p
        }
    };
    let report = effective_macs(&arch, &profile)?;
    let shares = compute_shares(&arch)?;
    let mut out = json!({
        "arch": arch.name,
        "profile": profile,
        "dense_total": report.dense_total,
        "effective_total": report.effective_total,
        "sites": report.sites,
        "shares": shares,
    });
    if let Some(b) = &exp.arch_b {
        let arch_b = preset("arch_b", b)?;
        out["matched"] = serde_json::to_value(flops_matched_compare(&arch, &profile, &arch_b)?).expect("serializes");
    }
    let bytes = json_bytes(&out);
    ctx.write("flops.json", &bytes)?;
    ctx.write("flops.csv", report.to_csv().as_bytes())?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SpecdecExp {
    alpha: Vec<f64>,
    c: Vec<f64>,
    gamma_max: u32,
    /// Constant aggregated sparsity; ignored when `s_agg` is given.
    s: f64,
    s_agg: Option<SaggCurve>,
}

impl Default for SpecdecExp {
    fn default() -> Self {
        Self {
            alpha: vec![0.8],
            c: vec![0.02],
            gamma_max: 64,
            s: 0.0,
            s_agg: None,
        }
    }
}

fn specdec(ctx: &mut Context) -> Res<()> {
    let exp: SpecdecExp = experiment(&ctx.doc)?;
    if exp.alpha.is_empty() || exp.c.is_empty() {
        return Err(CliError::Validation("experiment.alpha: alpha and c lists must be non-empty".into()));
    }
    if exp.gamma_max == 0 {
        return Err(CliError::Validation("experiment.gamma_max: must be at least 1".into()));
    }
    let curve = exp.s_agg.clone().unwrap_or(SaggCurve::Constant { value: exp.s });
    curve.validate()?;
    let rows = sweep(&exp.alpha, &exp.c, &curve, exp.gamma_max).map_err(|e| match e {
        crate::Error::InvalidInput(m) => CliError::Validation(format!("experiment: {m}")),
        other => other.into(),
    })?;
    let mut optima = Vec::new();
    for &alpha in &exp.alpha {
        for &c in &exp.c {
            let gamma = optimal_gamma(alpha, c, &curve, exp.gamma_max)?;
            optima.push(json!({
                "alpha": alpha,
                "c": c,
                "optimal_gamma": gamma,
                "speedup": thm2_speedup(alpha, c, gamma, curve.at(gamma))?,
            }));
        }
    }
    let bytes = json_bytes(&Value::Array(optima));
    ctx.write("specdec.csv", crate::specdec::sweep_to_csv(&rows).as_bytes())?;
    ctx.write("optimal.json", &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ReuseExp {
    gammas: Vec<usize>,
    seeds: Vec<u64>,
    warmup: usize,
    horizon: usize,
    windows: usize,
}

impl Default for ReuseExp {
    fn default() -> Self {
        Self {
            gammas: vec![16],
            seeds: (0..5).collect(),
            warmup: 128,
            horizon: 128,
            windows: 5,
        }
    }
}

fn reuse(ctx: &mut Context) -> Res<()> {
    let exp: ReuseExp = experiment(&ctx.doc)?;
    if let Some(g) = exp.gammas.iter().find(|g| **g == 0) {
        return Err(CliError::Validation(format!("experiment.gammas: gamma must be at least 1, got {g}")));
    }
    let model = load_model(ctx)?;
    let windows = corpus(ctx)?.validation_windows(exp.warmup + exp.horizon + 1, exp.windows);
    let rows = sweep_gamma(&model, &windows, &exp.gammas, &exp.seeds, exp.warmup, exp.horizon)?;
    ctx.write("reuse.csv", sweep_to_csv(&rows).as_bytes())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BetaSweepExp {
    members: Vec<ActivationSpec>,
}

impl Default for BetaSweepExp {
    fn default() -> Self {
        Self {
            members: default_sweep_members(),
        }
    }
}

fn run_beta_sweep(ctx: &mut Context) -> Res<()> {
    let exp: BetaSweepExp = experiment(&ctx.doc)?;
    for (i, m) in exp.members.iter().enumerate() {
        m.validate()
            .map_err(|e| CliError::Validation(format!("experiment.members[{i}]: {e}")))?;
    }
    let base = model_config(ctx)?;
    let cfg = train_config(ctx)?;
    let rows = beta_sweep(&corpus(ctx)?, &base, &exp.members, ctx.seed, &cfg)?;
    ctx.write("beta_sweep.csv", beta_sweep_csv(&rows).as_bytes())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RecoveryExp {
    stage: SurgeryStage,
}

impl Default for RecoveryExp {
    fn default() -> Self {
        Self {
            stage: SurgeryStage::Stage1,
        }
    }
}

fn recovery(ctx: &mut Context) -> Res<()> {
    let exp: RecoveryExp = experiment(&ctx.doc)?;
    let base = model_config(ctx)?;
    let cfg = train_config(ctx)?;
    let r = recovery_experiment(&corpus(ctx)?, &base, ctx.seed, &cfg, exp.stage)?;
    ctx.write("recovery.csv", r.to_csv().as_bytes())?;
    ctx.write("hist_before.csv", r.hist_before.to_csv().as_bytes())?;
    ctx.write("hist_after.csv", r.hist_after.to_csv().as_bytes())?;
    let mut curve = String::from("step,train_loss,val_loss\n");
    for p in &r.finetune_curve {
        let val = p.val_loss.map(|v| v.to_string()).unwrap_or_default();
        curve.push_str(&format!("{},{},{val}\n", p.step, p.train_loss));
    }
    ctx.write("finetune_curve.csv", curve.as_bytes())?;
    ctx.write(
        "recovery.json",
        &json_bytes(&json!({
            "stage": exp.stage,
            "finetune_steps": finetune_budget(cfg.steps),
            "pre_surgery_loss": r.pre_surgery_loss,
            "post_surgery_loss": r.post_surgery_loss,
            "finetuned_loss": r.finetuned_loss,
            "tv_distance": r.tv_distance,
        })),
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ShiftedExp {
    target: f64,
}

impl Default for ShiftedExp {
    fn default() -> Self {
        Self { target: 0.9 }
    }
}

fn shifted_relu(ctx: &mut Context) -> Res<()> {
    let exp: ShiftedExp = experiment(&ctx.doc)?;
    if !(exp.target > 0.0 && exp.target < 1.0) {
        return Err(CliError::Validation("experiment.target: must lie in (0, 1)".into()));
    }
    let base = model_config(ctx)?;
    let cfg = train_config(ctx)?;
    let r = shifted_relu_experiment(&corpus(ctx)?, &base, ctx.seed, &cfg, exp.target)?;
    ctx.write("shifted_relu.json", &json_bytes(&r))?;
    Ok(())
}
