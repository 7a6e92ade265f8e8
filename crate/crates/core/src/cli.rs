//! The `mixrec` command line.
//!
//! Settings are `key=value` pairs resolved in three layers: a config file
//! (`--config`, one pair per line, `#` comments), then `MIXREC_<KEY>`
//! environment variables, then `--set key=value` and the dedicated flags.
//! Later layers win. Unknown keys are rejected in every layer.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corelin::SeededRng;
use crate::data::{
    leave_one_out_split, load_interactions, synth_generate, InteractionTensor, Schema,
    SplitDataset, SynthConfig,
};
use crate::diag::{complexity_counters, decomposition_suite, identity_config};
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_mf_baseline, Metrics, MfConfig, DEFAULT_CUTOFFS};
use crate::train::{
    hash_pairs, tiny_config, tiny_grad_check, Checkpoint, EpochStats, GradCheckOptions,
    TrainConfig, Trainer,
};

/// Exit status when a check ran but did not meet its tolerance.
pub const EXIT_CHECK_FAILED: i32 = 2;
/// Exit status when training diverged (a non-finite loss).
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "mixrec", version, about = "Multi-behavior recommendation with intent hypergraphs")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on an interaction file and evaluate the final model.
    Train(TrainArgs),
    /// Score a checkpoint on a saved split.
    Eval(EvalArgs),
    /// Finite-difference gradient check on a tiny instance.
    Gradcheck(GradcheckArgs),
    /// Write a planted-intent synthetic dataset.
    Synth(SynthArgs),
    /// Score decompositions and operation counts.
    Diag(DiagArgs),
    /// Train every cell of a Cartesian grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// File of key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Whitespace-separated `user item behavior` triples.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory written by a previous run (`split/`); replaces --data.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Disable one component (repeatable).
    #[arg(long)]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory (overrides --out).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory the checkpoint was trained on.
    #[arg(long)]
    pub split: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CUTOFFS.to_vec())]
    pub cutoffs: Vec<usize>,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Seed of the tiny instance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DiagArgs {
    /// Number of decomposition instances.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Step size for the β adaptivity probe.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Also print every coefficient table.
    #[arg(long)]
    pub verbose: bool,
    /// Report operation counts of one epoch on this data instead.
    #[arg(long)]
    pub complexity: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `key=v1,v2,...` (repeatable); the grid is their Cartesian product.
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    pub grid: Vec<String>,
    /// CSV with one row per cell.
    #[arg(long)]
    pub out: PathBuf,
}

/// Keys that are not [`TrainConfig`] fields but belong to a training run.
pub const RUN_KEYS: [&str; 9] = [
    "behaviors",
    "target",
    "eval_negatives",
    "split_seed",
    "cutoffs",
    "eval_every",
    "mf_baseline",
    "mf_lr",
    "mf_reg",
];

pub const SYNTH_KEYS: [&str; 7] = [
    "users",
    "items",
    "intents",
    "funnel_probs",
    "intent_boost",
    "funnel_coupling",
    "synth_seed",
];

fn is_known_key(k: &str) -> bool {
    TrainConfig::KEYS.contains(&k) || RUN_KEYS.contains(&k) || SYNTH_KEYS.contains(&k)
}

fn is_train_key(k: &str) -> bool {
    TrainConfig::KEYS.contains(&k)
}

fn is_run_key(k: &str) -> bool {
    is_train_key(k) || RUN_KEYS.contains(&k)
}

fn split_pair(s: &str, origin: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("{origin}: expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("{origin}: empty key in {s:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Parses a config file body into ordered pairs.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(split_pair(line, &format!("{origin}:{}", n + 1))?);
    }
    Ok(out)
}

/// Collects `MIXREC_*` variables as lower-case keys. Names that match no
/// known key are an error.
pub fn env_pairs(vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (name, v) in vars {
        let Some(rest) = name.strip_prefix("MIXREC_") else {
            continue;
        };
        let key = rest.to_ascii_lowercase();
        if !is_known_key(&key) {
            return Err(Error::Config(format!(
                "environment variable {name} names no known key"
            )));
        }
        out.push((key, v));
    }
    out.sort();
    Ok(out)
}

/// File < environment < flags, as one ordered list.
pub fn layered_pairs(cfg: &ConfigArgs, env: &[(String, String)]) -> Result<Vec<(String, String)>> {
    layered_pairs_for(cfg, env, |_| true)
}

/// Like [`layered_pairs`], but environment keys outside `applies` are
/// dropped: they are meant for other subcommands.
pub fn layered_pairs_for(
    cfg: &ConfigArgs,
    env: &[(String, String)],
    applies: impl Fn(&str) -> bool,
) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(p) = &cfg.config {
        let text = io(fs::read_to_string(p), p)?;
        out.extend(parse_config_text(&text, &p.display().to_string())?);
    }
    out.extend(env.iter().filter(|(k, _)| applies(k)).cloned());
    for s in &cfg.sets {
        out.push(split_pair(s, "--set")?);
    }
    Ok(out)
}

/// Everything a training run depends on apart from file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub behaviors: usize,
    /// Defaults to the last behavior.
    pub target: Option<usize>,
    pub eval_negatives: usize,
    pub split_seed: u64,
    pub cutoffs: Vec<usize>,
    /// Evaluate every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub mf_baseline: bool,
    pub mf_lr: f64,
    pub mf_reg: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            behaviors: 3,
            target: None,
            eval_negatives: 99,
            split_seed: 0,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            eval_every: 0,
            mf_baseline: false,
            mf_lr: MfConfig::default().lr,
            mf_reg: MfConfig::default().reg,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "behaviors" => self.behaviors = parse(key, v)?,
            "target" => self.target = Some(parse(key, v)?),
            "eval_negatives" => self.eval_negatives = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "cutoffs" => self.cutoffs = parse_list(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "mf_baseline" => {
                let mut probe = TrainConfig::default();
                probe.set("no_meta", v)?;
                self.mf_baseline = probe.no_meta;
            }
            "mf_lr" => self.mf_lr = parse(key, v)?,
            "mf_reg" => self.mf_reg = parse(key, v)?,
            k if SYNTH_KEYS.contains(&k) => {
                return Err(Error::Config(format!("{k:?} only applies to `synth`")))
            }
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn target_behavior(&self) -> usize {
        self.target.unwrap_or(self.behaviors.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.behaviors == 0 || self.target_behavior() >= self.behaviors {
            return Err(Error::Config(format!(
                "target {} outside {} behaviors",
                self.target_behavior(),
                self.behaviors
            )));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("cutoffs must be positive".into()));
        }
        if self.eval_negatives == 0 {
            return Err(Error::Config("eval_negatives must be at least 1".into()));
        }
        Ok(())
    }

    /// Sorted `(key, value)` for every setting.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.train.canonical_pairs();
        let cut: Vec<String> = self.cutoffs.iter().map(|c| c.to_string()).collect();
        out.extend([
            ("behaviors".to_string(), self.behaviors.to_string()),
            ("target".to_string(), self.target_behavior().to_string()),
            ("eval_negatives".to_string(), self.eval_negatives.to_string()),
            ("split_seed".to_string(), self.split_seed.to_string()),
            ("cutoffs".to_string(), cut.join(",")),
            ("eval_every".to_string(), self.eval_every.to_string()),
            ("mf_baseline".to_string(), self.mf_baseline.to_string()),
            ("mf_lr".to_string(), self.mf_lr.to_string()),
            ("mf_reg".to_string(), self.mf_reg.to_string()),
        ]);
        out.sort();
        out
    }

    pub fn hash(&self) -> String {
        hash_pairs(&self.canonical_pairs())
    }

    pub fn mf_config(&self) -> MfConfig {
        MfConfig {
            dim: self.train.dim,
            lr: self.mf_lr,
            reg: self.mf_reg,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            ..MfConfig::default()
        }
    }
}

pub fn synth_set(cfg: &mut SynthConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "users" => cfg.num_users = parse(key, v)?,
        "items" => cfg.num_items = parse(key, v)?,
        "behaviors" => {
            cfg.num_behaviors = parse(key, v)?;
        }
        "intents" => cfg.intents = parse(key, v)?,
        "funnel_probs" => {
            cfg.funnel_probs = parse_list(key, v)?;
        }
        "intent_boost" => cfg.intent_boost = parse(key, v)?,
        "funnel_coupling" => cfg.funnel_coupling = parse(key, v)?,
        "synth_seed" => cfg.seed = parse(key, v)?,
        k if is_known_key(k) => {
            return Err(Error::Config(format!("{k:?} does not apply to `synth`")))
        }
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

#[derive(Serialize)]
struct EffectiveConfig<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    config: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct ActiveTerms {
    node_cl: bool,
    graph_cl: bool,
    meta: bool,
    intents: bool,
}

#[derive(Serialize)]
struct RunMetrics<'a> {
    config_hash: &'a str,
    seed: u64,
    epochs: usize,
    ablations: Vec<&'static str>,
    active: ActiveTerms,
    hr: &'a BTreeMap<usize, f64>,
    ndcg: &'a BTreeMap<usize, f64>,
    num_eval_users: usize,
    mf_baseline: Option<MfSummary<'a>>,
}

#[derive(Serialize)]
struct MfSummary<'a> {
    hr: &'a BTreeMap<usize, f64>,
    ndcg: &'a BTreeMap<usize, f64>,
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T> {
    r.map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", what.display()))))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    io(fs::write(path, text + "\n"), path)
}

fn run_dir_name(hash: &str) -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}-{}", &hash[..12])
}

/// Loads (or splits) the data for a run.
fn prepare_split(args_data: Option<&Path>, args_split: Option<&Path>, rc: &RunConfig) -> Result<SplitDataset> {
    match (args_data, args_split) {
        (_, Some(dir)) => SplitDataset::load(dir),
        (Some(path), None) => {
            let schema = Schema::new(rc.behaviors, rc.target_behavior());
            let t = load_interactions(path, &schema)?;
            leave_one_out_split(&t, rc.eval_negatives, &mut SeededRng::new(rc.split_seed, "split"))
        }
        (None, None) => Err(Error::Config("one of --data or --split is required".into())),
    }
}

const EPOCH_HEADER: &str = "epoch,loss,hinge,regularization,node_cl,graph_cl,pairs,batches,messages,graph_macs,hyper_macs,contrastive_macs,hr_at_10,wall_secs";

fn epoch_row(s: &EpochStats, hr: Option<f64>) -> String {
    let l = &s.loss;
    let c = &s.counters;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
        s.epoch,
        l.total,
        l.hinge,
        l.regularization,
        l.node_cl,
        l.graph_cl,
        s.pairs,
        s.batches,
        c.messages,
        c.graph_macs,
        c.hyper_macs,
        c.contrastive_macs,
        hr.map_or(String::new(), |h| h.to_string()),
        s.wall_secs
    )
}

/// Outcome of [`train_run`].
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// `None` after divergence: nothing is evaluated and no `metrics.json`
    /// is written.
    pub metrics: Option<Metrics>,
    pub diverged: bool,
}

/// Trains, evaluates and writes every artifact into `run_dir`:
/// `config.json`, `epochs.csv`, `checkpoint.json` (after every epoch),
/// `complexity.json`, `split/` and `metrics.json`.
pub fn train_run(split: &SplitDataset, rc: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    rc.validate()?;
    io(fs::create_dir_all(run_dir), run_dir)?;
    let hash = rc.hash();
    write_json(
        &run_dir.join("config.json"),
        &EffectiveConfig {
            command: "train",
            config_hash: &hash,
            seed: rc.train.seed,
            config: rc.canonical_pairs().into_iter().collect(),
        },
    )?;
    split.save(run_dir.join("split"))?;

    let mut trainer = Trainer::new(rc.train.clone(), &split.train)?;
    let csv_path = run_dir.join("epochs.csv");
    let mut csv = io(fs::File::create(&csv_path), &csv_path)?;
    io(writeln!(csv, "{EPOCH_HEADER}"), &csv_path)?;
    let ckpt_path = run_dir.join("checkpoint.json");
    let mut last: Option<EpochStats> = None;
    let mut diverged = false;
    for _ in 0..rc.train.epochs {
        let stats = match trainer.train_epoch() {
            Ok(s) => s,
            Err(e @ Error::Divergence { .. }) => {
                eprintln!("{e}; keeping the last good parameters");
                trainer.checkpoint().save(&ckpt_path)?;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let hr = if rc.eval_every > 0 && stats.epoch % rc.eval_every == 0 {
            let m = evaluate(&trainer.scoring_state()?, split, &[10])?;
            Some(m.hr_at(10))
        } else {
            None
        };
        io(writeln!(csv, "{}", epoch_row(&stats, hr)), &csv_path)?;
        trainer.checkpoint().save(&ckpt_path)?;
        eprintln!(
            "epoch {:>3}  loss {:.6}  hinge {:.6}{}",
            stats.epoch,
            stats.loss.total,
            stats.loss.hinge,
            hr.map_or(String::new(), |h| format!("  HR@10 {h:.4}"))
        );
        last = Some(stats);
    }
    if rc.train.epochs == 0 {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    if let Some(s) = &last {
        let dims = trainer.params().dims().clone();
        write_json(
            &run_dir.join("complexity.json"),
            &complexity_counters(s, &dims, split.train.nnz()),
        )?;
    }

    if diverged {
        return Ok(TrainOutcome {
            run_dir: run_dir.to_path_buf(),
            metrics: None,
            diverged,
        });
    }
    let metrics = evaluate(&trainer.scoring_state()?, split, &rc.cutoffs)?;
    let mf = if rc.mf_baseline {
        Some(train_mf_baseline(split, &rc.mf_config(), &rc.cutoffs)?.0)
    } else {
        None
    };
    let nk = split.train.num_behaviors();
    let t = &rc.train;
    let ablations = crate::train::ABLATIONS
        .iter()
        .copied()
        .filter(|a| t.get(a).as_deref() == Some("true"))
        .collect();
    write_json(
        &run_dir.join("metrics.json"),
        &RunMetrics {
            config_hash: &hash,
            seed: t.seed,
            epochs: trainer.epoch(),
            ablations,
            active: ActiveTerms {
                node_cl: t.node_cl_active(nk) && t.lambda2 > 0.0,
                graph_cl: t.graph_cl_active(nk) && t.lambda3 > 0.0,
                meta: t.meta_active(nk) && t.lambda2 > 0.0,
                intents: !t.no_intents,
            },
            hr: &metrics.hr,
            ndcg: &metrics.ndcg,
            num_eval_users: metrics.num_eval_users,
            mf_baseline: mf.as_ref().map(|m| MfSummary {
                hr: &m.hr,
                ndcg: &m.ndcg,
            }),
        },
    )?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        metrics: Some(metrics),
        diverged,
    })
}

fn metrics_line(m: &Metrics) -> String {
    let mut s = String::new();
    for (k, v) in &m.hr {
        let _ = write!(s, "HR@{k} {v:.4}  ");
    }
    for (k, v) in &m.ndcg {
        let _ = write!(s, "NDCG@{k} {v:.4}  ");
    }
    s.trim_end().to_string()
}

fn cmd_train(a: &TrainArgs, env: &[(String, String)]) -> Result<i32> {
    let mut rc = RunConfig::default();
    rc.apply(&layered_pairs_for(&a.cfg, env, is_run_key)?)?;
    for ab in &a.ablate {
        rc.train.set_ablation(ab)?;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    rc.validate()?;
    let split = prepare_split(a.data.as_deref(), a.split.as_deref(), &rc)?;
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => a.out.join(run_dir_name(&rc.hash())),
    };
    let out = train_run(&split, &rc, &dir)?;
    println!("run {}", out.run_dir.display());
    if let Some(m) = &out.metrics {
        println!("{}", metrics_line(m));
    }
    Ok(if out.diverged { EXIT_DIVERGED } else { 0 })
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let split = SplitDataset::load(&a.split)?;
    let trainer = Trainer::from_checkpoint(&ckpt, &split.train)?;
    let m = evaluate(&trainer.scoring_state()?, &split, &a.cutoffs)?;
    #[derive(Serialize)]
    struct Out<'a> {
        train_config_hash: &'a str,
        seed: u64,
        epoch: usize,
        hr: &'a BTreeMap<usize, f64>,
        ndcg: &'a BTreeMap<usize, f64>,
        num_eval_users: usize,
    }
    let out = Out {
        train_config_hash: &ckpt.config_hash,
        seed: ckpt.config.seed,
        epoch: ckpt.epoch,
        hr: &m.hr,
        ndcg: &m.ndcg,
        num_eval_users: m.num_eval_users,
    };
    if let Some(p) = &a.out {
        write_json(p, &out)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs, env: &[(String, String)]) -> Result<i32> {
    let mut cfg = tiny_config();
    for (k, v) in layered_pairs_for(&a.cfg, env, is_train_key)? {
        if is_known_key(&k) && !is_train_key(&k) {
            return Err(Error::Config(format!("{k:?} does not apply here")));
        }
        cfg.set(&k, &v)?;
    }
    let opts = GradCheckOptions {
        step: a.step,
        ..GradCheckOptions::default()
    };
    let r = tiny_grad_check(&cfg, a.seed, &opts)?;
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    println!("{:<24} {:>8} {:>12} {:>12}", "family", "checked", "max_rel", "mean_rel");
    for (name, g) in &r.families {
        println!("{name:<24} {:>8} {:>12.3e} {:>12.3e}", g.checked, g.max_rel, g.mean_rel);
    }
    println!(
        "max relative error {:.3e} over {} entries ({} skipped at kinks, {} pairs excluded); tolerance {:.1e}",
        r.max_rel, r.checked, r.excluded_entries, r.excluded_pairs, a.tol
    );
    if r.passed(a.tol) {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL");
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_synth(a: &SynthArgs, env: &[(String, String)]) -> Result<i32> {
    let mut cfg = SynthConfig::default();
    let applies = |k: &str| SYNTH_KEYS.contains(&k) || k == "behaviors";
    for (k, v) in layered_pairs_for(&a.cfg, env, applies)? {
        synth_set(&mut cfg, &k, &v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = synth_generate(&cfg)?;
    ds.tensor.save_tsv(&a.out)?;
    #[derive(Serialize)]
    struct Sidecar<'a> {
        config: &'a SynthConfig,
        behavior_counts: Vec<usize>,
        user_intents: &'a [usize],
        item_intents: &'a [usize],
    }
    let side = a.out.with_extension("intents.json");
    write_json(
        &side,
        &Sidecar {
            config: &cfg,
            behavior_counts: ds.tensor.behavior_counts(),
            user_intents: &ds.user_intents,
            item_intents: &ds.item_intents,
        },
    )?;
    println!(
        "wrote {} ({} interactions; counts per behavior {:?}) and {}",
        a.out.display(),
        ds.tensor.nnz(),
        ds.tensor.behavior_counts(),
        side.display()
    );
    Ok(0)
}

fn cmd_diag(a: &DiagArgs, env: &[(String, String)]) -> Result<i32> {
    if let Some(data) = &a.complexity {
        let mut rc = RunConfig::default();
        rc.apply(&layered_pairs_for(&a.cfg, env, is_run_key)?)?;
        rc.train.epochs = 1;
        rc.validate()?;
        let t = load_interactions(data, &Schema::new(rc.behaviors, rc.target_behavior()))?;
        let mut trainer = Trainer::new(rc.train.clone(), &t)?;
        let stats = trainer.train_epoch()?;
        let report = complexity_counters(&stats, trainer.params().dims(), t.nnz());
        if let Some(p) = &a.out {
            write_json(p, &report)?;
        }
        print!("{}", report.to_table());
        return Ok(0);
    }
    let mut cfg = identity_config();
    for (k, v) in layered_pairs_for(&a.cfg, env, is_train_key)? {
        if is_known_key(&k) && !is_train_key(&k) {
            return Err(Error::Config(format!("{k:?} does not apply here")));
        }
        cfg.set(&k, &v)?;
    }
    let suite = decomposition_suite(a.instances, a.seed, &cfg, a.lr)?;
    if let Some(p) = &a.out {
        write_json(p, &suite)?;
    }
    if a.verbose {
        for r in &suite.reports {
            println!("{}", r.to_table());
        }
    }
    println!(
        "{:<10} {:>5} {:>5} {:>12} {:>8} {:>12} {:>12}",
        "kind", "user", "item", "abs_error", "nonzero", "beyond_nz", "max_dbeta"
    );
    for r in &suite.reports {
        println!(
            "{:<10} {:>5} {:>5} {:>12.3e} {:>8} {:>12} {:>12}",
            r.kind,
            r.user,
            r.item,
            r.max_abs_error,
            r.nonzero,
            r.beyond_hops_nonzero,
            r.beta_change.map_or("-".into(), |b| format!("{b:.3e}"))
        );
    }
    println!(
        "max error gnn {:.3e} hypergraph {:.3e}; gnn support local: {}; hypergraph support beyond {} hops: {}",
        suite.max_gnn_error,
        suite.max_hyper_error,
        suite.gnn_support_local,
        cfg.layers,
        suite.global_support_seen
    );
    if suite.passed(a.tol) {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL");
        Ok(EXIT_CHECK_FAILED)
    }
}

/// Expands `key=v1,v2` axes into their Cartesian product, first axis
/// varying slowest.
pub fn grid_cells(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let (k, vs) = split_pair(axis, "--grid")?;
        if !is_known_key(&k) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let values: Vec<&str> = vs.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("--grid {k}: no values")));
        }
        cells = cells
            .into_iter()
            .flat_map(|c| {
                let k = &k;
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn cmd_sweep(a: &SweepArgs, env: &[(String, String)]) -> Result<i32> {
    let mut base = RunConfig::default();
    base.apply(&layered_pairs_for(&a.cfg, env, is_run_key)?)?;
    base.validate()?;
    let cells = grid_cells(&a.grid)?;
    let schema = Schema::new(base.behaviors, base.target_behavior());
    let tensor: InteractionTensor = load_interactions(&a.data, &schema)?;
    let mut split_cache: Option<(usize, u64, SplitDataset)> = None;

    let keys: Vec<String> = cells.first().map(|c| c.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut csv = String::new();
    let mut header: Vec<String> = keys.clone();
    header.push("config_hash".into());
    for c in &base.cutoffs {
        header.push(format!("hr_at_{c}"));
    }
    for c in &base.cutoffs {
        header.push(format!("ndcg_at_{c}"));
    }
    let _ = writeln!(csv, "{}", header.join(","));
    let out_dir = a.out.with_extension("runs");
    for cell in &cells {
        let mut rc = base.clone();
        rc.apply(cell)?;
        rc.validate()?;
        if rc.behaviors != base.behaviors || rc.target_behavior() != base.target_behavior() {
            return Err(Error::Config("behaviors and target cannot vary in a sweep".into()));
        }
        let reuse = matches!(&split_cache, Some((n, s, _)) if *n == rc.eval_negatives && *s == rc.split_seed);
        if !reuse {
            let sp = leave_one_out_split(&tensor, rc.eval_negatives, &mut SeededRng::new(rc.split_seed, "split"))?;
            split_cache = Some((rc.eval_negatives, rc.split_seed, sp));
        }
        let split = &split_cache.as_ref().expect("split prepared").2;
        let hash = rc.hash();
        let out = train_run(split, &rc, &out_dir.join(&hash[..12]))?;
        let mut row: Vec<String> = cell.iter().map(|(_, v)| v.clone()).collect();
        row.push(hash);
        for c in &rc.cutoffs {
            row.push(out.metrics.as_ref().map_or(f64::NAN, |m| m.hr_at(*c)).to_string());
        }
        for c in &rc.cutoffs {
            row.push(out.metrics.as_ref().map_or(f64::NAN, |m| m.ndcg_at(*c)).to_string());
        }
        eprintln!("{}  {}", cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "), out.metrics.as_ref().map_or("diverged".into(), metrics_line));
        let _ = writeln!(csv, "{}", row.join(","));
    }
    io(fs::write(&a.out, &csv), &a.out)?;
    print!("{csv}");
    Ok(0)
}

/// Runs one invocation and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, std::env::vars()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command against the given environment.
pub fn dispatch(cli: &Cli, vars: impl IntoIterator<Item = (String, String)>) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A second call in one process fails harmlessly; keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let env = env_pairs(vars)?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, &env),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a, &env),
        Command::Synth(a) => cmd_synth(a, &env),
        Command::Diag(a) => cmd_diag(a, &env),
        Command::Sweep(a) => cmd_sweep(a, &env),
    }
}
