//! Command-line front end: dataset generation, training, matching,
//! registration, evaluation and the ablation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Precision, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{gt_correspondences, CorrespondenceSet, EvalConfig, PointCloud, RigidTransform};
use crate::io::{self, DatasetPair, Manifest, ManifestEntry};
use crate::model::{AblationConfig, MatchOutput, Matcher, PreparedCloud, WarpMode};
use crate::registration::{
    compute_metrics, estimate_pose, inlier_ratio, ransac_pose, sinkhorn_baseline, top_k_select, MatchConfig,
    MetricsReport, RansacOutcome, SelectionMode,
};
use crate::reposition::MatchSource;
use crate::synth::{synth_pair, Shape, SynthParams};
use crate::train::{mix_seed, train_loop, PairCycle, PairSource, SynthStream, TrainConfig, TrainingPair};
use crate::weights::{ModelConfig, ModelWeights};

pub const SINKHORN_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Synthetic,
    Object,
    Outdoor,
}

/// Everything a run needs besides the training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub d: usize,
    pub k_graph: usize,
    pub k_local: usize,
    #[serde(rename = "match")]
    pub match_cfg: MatchConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub seed: u64,
    pub weights_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (d, k_graph, eval) = match p {
            Preset::Synthetic => (64, 12, EvalConfig::synthetic()),
            Preset::Object => (96, 12, EvalConfig::object()),
            Preset::Outdoor => (256, 32, EvalConfig::outdoor()),
        };
        RunConfig {
            preset: p,
            d,
            k_graph,
            k_local: 32,
            match_cfg: MatchConfig::default(),
            eval,
            ablation: AblationConfig::FULL,
            seed: 0,
            weights_path: None,
            output_path: None,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.d, self.k_graph, self.k_local)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.match_cfg.validate()?;
        self.eval.validate()
    }

    /// Preset defaults, overlaid by a JSON file (any subset of fields).
    pub fn layered(preset: Option<Preset>, file: Option<&Path>) -> Result<Self> {
        let overlay: Option<Value> = match file {
            Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => None,
        };
        let from_file = overlay
            .as_ref()
            .and_then(|v| v.get("preset"))
            .map(|v| serde_json::from_value::<Preset>(v.clone()))
            .transpose()?;
        let base = RunConfig::preset(preset.or(from_file).unwrap_or(Preset::Synthetic));
        let Some(mut overlay) = overlay else {
            return Ok(base);
        };
        if let (Some(obj), Some(p)) = (overlay.as_object_mut(), preset) {
            obj.insert("preset".into(), serde_json::to_value(p)?);
        }
        let mut merged = serde_json::to_value(&base)?;
        merge_json(&mut merged, overlay);
        Ok(serde_json::from_value(merged)?)
    }
}

fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse an ablation spec: a table letter `a`..`e`, `full`, `vanilla`, or a
/// comma list drawn from `gcnn,bi_match,gc,rep`.
pub fn parse_ablation(s: &str) -> Result<AblationConfig> {
    let s = s.trim();
    if let Some((_, cfg)) = AblationConfig::table().into_iter().find(|(c, _)| s.len() == 1 && s.starts_with(*c)) {
        return Ok(cfg);
    }
    match s {
        "full" => return Ok(AblationConfig::FULL),
        "vanilla" | "none" => return Ok(AblationConfig::VANILLA),
        _ => {}
    }
    let mut cfg = AblationConfig::VANILLA;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "gcnn" => cfg.gcnn = true,
            "bi_match" | "bimatch" => cfg.bi_match = true,
            "gc" | "global_consistency" => cfg.global_consistency = true,
            "rep" | "reposition" => cfg.reposition = true,
            other => return Err(Error::InvalidArgument(format!("unknown ablation component '{}'", other))),
        }
    }
    Ok(cfg)
}

/// A matcher in either precision.
#[derive(Debug, Clone)]
pub enum AnyMatcher {
    F32(Matcher<f32>),
    F64(Matcher<f64>),
}

impl AnyMatcher {
    pub fn new<T: Real>(weights: ModelWeights<T>, precision: Precision, ablation: AblationConfig) -> Self {
        match precision {
            Precision::F32 => AnyMatcher::F32(Matcher::new(weights.cast(), ablation)),
            Precision::F64 => AnyMatcher::F64(Matcher::new(weights.cast(), ablation)),
        }
    }

    pub fn load(path: &Path, precision: Precision, ablation: AblationConfig) -> Result<Self> {
        Ok(match precision {
            Precision::F32 => AnyMatcher::F32(Matcher::new(io::load_weights(path)?, ablation)),
            Precision::F64 => AnyMatcher::F64(Matcher::new(io::load_weights(path)?, ablation)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyMatcher::F32(m) => m.config(),
            AnyMatcher::F64(m) => m.config(),
        }
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedCloud> {
        PreparedCloud::new(cloud.clone(), self.config().k_local)
    }

    pub fn match_prepared(&self, x: &PreparedCloud, y: &PreparedCloud, mode: &WarpMode) -> Result<MatchOutput> {
        match self {
            AnyMatcher::F32(m) => m.match_prepared(x, y, mode),
            AnyMatcher::F64(m) => m.match_prepared(x, y, mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    /// Final scores of the pipeline.
    Imatcher,
    /// Sinkhorn normalization of the initial scores.
    Sinkhorn,
    /// Raw feature similarity.
    Nn,
}

/// Per-pair evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub matcher: MatcherKind,
    pub match_cfg: MatchConfig,
    pub eval: EvalConfig,
    pub ransac: bool,
    pub seed: u64,
    /// Correspondence budgets for the extra top-k inlier ratios.
    pub budgets: Vec<usize>,
    /// Write a zero runtime so that reports are reproducible byte for byte.
    pub timing: bool,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct PairResult {
    pub id: String,
    pub report: MetricsReport,
    /// `(budget, correspondences kept, inlier ratio)`.
    pub budgets: Vec<(usize, usize, f64)>,
    pub match_source: Option<MatchSource>,
    /// Why the pair produced no estimate, if it failed.
    pub failure: Option<String>,
}

/// Score matrix used for selection under `kind`.
pub fn matcher_scores(out: &MatchOutput, kind: MatcherKind) -> Result<Tensor<f64>> {
    match kind {
        MatcherKind::Imatcher => Ok(out.scores.clone()),
        MatcherKind::Sinkhorn => sinkhorn_baseline(&out.s_hat, SINKHORN_ITERS, None),
        MatcherKind::Nn => Ok(out.s_hat.clone()),
    }
}

fn failed_report(x: &PointCloud, y: &PointCloud, t_gt: &RigidTransform, eval: &EvalConfig) -> MetricsReport {
    let overlap = gt_correspondences(x, y, t_gt, eval.beta)
        .map(|(g, _)| g.len() as f64 / x.len().min(y.len()).max(1) as f64)
        .unwrap_or(0.0);
    MetricsReport {
        rre: 180.0,
        rte: f64::INFINITY,
        rr: false,
        ir: 0.0,
        fmr: false,
        overlap,
        num_corr: 0,
        runtime: 0.0,
    }
}

fn is_pair_failure(e: &Error) -> bool {
    matches!(e, Error::DegenerateGeometry(_) | Error::InvalidInput(_))
}

fn estimate(corr: &CorrespondenceSet, x: &PointCloud, y: &PointCloud, opts: &EvalOptions, index: usize) -> Result<Option<RigidTransform>> {
    let r = if opts.ransac {
        ransac_pose(corr, x, y, &opts.match_cfg, mix_seed(opts.seed, index as u64)).map(|o| match o {
            RansacOutcome::Model { transform, .. } => Some(transform),
            RansacOutcome::NoConsensus => None,
        })
    } else {
        estimate_pose(corr, x, y).map(Some)
    };
    match r {
        Err(Error::DegenerateGeometry(_)) => Ok(None),
        other => other,
    }
}

/// Match, select, estimate and score one pair. Degenerate pairs yield a
/// failed row instead of an error.
pub fn evaluate_pair(matcher: &AnyMatcher, pair: &DatasetPair, index: usize, opts: &EvalOptions) -> Result<PairResult> {
    let start = Instant::now();
    let attempt = || -> Result<(MetricsReport, Vec<(usize, usize, f64)>, Option<MatchSource>)> {
        let (px, py) = (matcher.prepare(&pair.x)?, matcher.prepare(&pair.y)?);
        let out = matcher.match_prepared(&px, &py, &WarpMode::Estimate)?;
        let scores = matcher_scores(&out, opts.matcher)?;
        let corr = opts.match_cfg.select(&scores)?;
        let t_est = estimate(&corr, &pair.x, &pair.y, opts, index)?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut report = compute_metrics(t_est.as_ref(), &pair.t_gt, &corr, &pair.x, &pair.y, &opts.eval)?;
        report.runtime = if opts.timing { elapsed } else { 0.0 };
        let budgets = opts
            .budgets
            .iter()
            .map(|&k| {
                let c = top_k_select(&scores, k)?;
                Ok((k, c.len(), inlier_ratio(&c, &pair.x, &pair.y, &pair.t_gt, opts.eval.inlier_tau)))
            })
            .collect::<Result<_>>()?;
        Ok((report, budgets, out.match_source))
    };
    match attempt() {
        Ok((report, budgets, match_source)) => Ok(PairResult {
            id: pair.id.clone(),
            report,
            budgets,
            match_source,
            failure: None,
        }),
        Err(e) if is_pair_failure(&e) => Ok(PairResult {
            id: pair.id.clone(),
            report: failed_report(&pair.x, &pair.y, &pair.t_gt, &opts.eval),
            budgets: opts.budgets.iter().map(|&k| (k, 0, 0.0)).collect(),
            match_source: None,
            failure: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Evaluate all pairs on up to `opts.threads` threads; results keep the input order.
pub fn evaluate_pairs(matcher: &AnyMatcher, pairs: &[DatasetPair], opts: &EvalOptions) -> Result<Vec<PairResult>> {
    let threads = opts.threads.clamp(1, pairs.len().max(1));
    let mut slots: Vec<Option<Result<PairResult>>> = (0..pairs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (t, chunk) in slots.chunks_mut(pairs.len().div_ceil(threads).max(1)).enumerate() {
            let base = t * pairs.len().div_ceil(threads).max(1);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = base + k;
                    *slot = Some(evaluate_pair(matcher, &pairs[i], i, opts));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every pair evaluated")).collect()
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Per-budget CSV: one row per pair and budget, then a mean row per budget.
pub fn budgets_csv(results: &[PairResult]) -> String {
    let mut s = String::from("pair_id,budget,num_corr,ir\n");
    for r in results {
        for &(k, n, ir) in &r.budgets {
            let _ = writeln!(s, "{},{},{},{:.6}", r.id, k, n, ir);
        }
    }
    if let Some(first) = results.first() {
        for (b, &(k, _, _)) in first.budgets.iter().enumerate() {
            let n = results.len() as f64;
            let mean_n = results.iter().map(|r| r.budgets[b].1 as f64).sum::<f64>() / n;
            let mean_ir = results.iter().map(|r| r.budgets[b].2).sum::<f64>() / n;
            let _ = writeln!(s, "mean,{},{:.6},{:.6}", k, mean_n, mean_ir);
        }
    }
    s
}

fn rows(results: &[PairResult]) -> Vec<(String, MetricsReport)> {
    results.iter().map(|r| (r.id.clone(), r.report)).collect()
}

/// Report CSV with a trailing aggregate row.
pub fn eval_csv(results: &[PairResult]) -> String {
    let rows = rows(results);
    let mut s = io::report_csv(&rows);
    s.push_str(&io::aggregate_csv_line("mean", &rows));
    s
}

pub fn mean_ir(results: &[PairResult]) -> f64 {
    results.iter().map(|r| r.report.ir).sum::<f64>() / results.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "imatcher", version, about = "Point-cloud correspondence matching and registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of cloud pairs with ground-truth motions.
    Gen(GenArgs),
    /// Fit the model weights.
    Train(TrainArgs),
    /// Score one pair and write its correspondences.
    Match(MatchArgs),
    /// Match one pair and estimate the aligning transform.
    Register(RegisterArgs),
    /// Evaluate a dataset and write a per-pair report.
    Eval(EvalArgs),
    /// Train and evaluate the five cumulative ablation configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run in double precision.
    #[arg(long = "f64")]
    pub f64: bool,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k_graph: Option<usize>,
    #[arg(long)]
    pub k_local: Option<usize>,
    /// Ablation: `a`..`e`, `full`, `vanilla`, or a list like `gcnn,rep`.
    #[arg(long)]
    pub ablation: Option<String>,
}

impl CommonArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::layered(self.preset, self.config.as_deref())?;
        if let Some(s) = self.seed {
            rc.seed = s;
        }
        if let Some(d) = self.d {
            rc.d = d;
        }
        if let Some(k) = self.k_graph {
            rc.k_graph = k;
        }
        if let Some(k) = self.k_local {
            rc.k_local = k;
        }
        if let Some(a) = &self.ablation {
            rc.ablation = parse_ablation(a)?;
        }
        rc.validate()?;
        Ok(rc)
    }

    pub fn precision(&self) -> Precision {
        if self.f64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub num_points: usize,
    #[arg(long, default_value_t = 0.7)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Maximum rotation in degrees.
    #[arg(long, default_value_t = 45.0)]
    pub rot: f64,
    #[arg(long, default_value_t = 0.5)]
    pub trans: f64,
    #[arg(long, default_value = "gaussian_blobs")]
    pub shape: Shape,
}

impl SynthArgs {
    pub fn params(&self, seed: u64) -> SynthParams {
        SynthParams {
            num_points: self.num_points,
            overlap_ratio: self.overlap,
            noise_sigma: self.noise,
            rot_max: self.rot,
            trans_max: self.trans,
            seed,
            shape: self.shape,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Dataset directory; without it, fresh synthetic pairs are drawn every step.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Reposition with the estimated transform instead of the ground truth.
    #[arg(long)]
    pub no_gt_warp: bool,
    /// Start from these weights instead of a seeded initialization.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Print the loss every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[arg(long, value_enum, default_value = "imatcher")]
    pub matcher: MatcherKind,
    /// Use top-k selection with this k instead of mutual top-1.
    #[arg(long)]
    pub top_k: Option<usize>,
}

impl SelectArgs {
    fn apply(&self, cfg: &mut MatchConfig) {
        if let Some(k) = self.top_k {
            cfg.mode = SelectionMode::TopK;
            cfg.k = k;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
    #[arg(long)]
    pub ransac: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra correspondence budgets, e.g. `32,64,128`.
    #[arg(long, value_delimiter = ',')]
    pub num_corr: Vec<usize>,
    #[arg(long)]
    pub ransac: bool,
    /// Write zero runtimes so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Evaluation dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Use `weights_<letter>.json` from here instead of training.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub ransac: bool,
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// Commands

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} exists and is not empty (use --force)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> Result<Manifest> {
    let rc = args.common.run_config()?;
    ensure_out_dir(&args.out, args.force)?;
    let mut pairs = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let seed = mix_seed(rc.seed, i as u64);
        let p = synth_pair(&args.synth.params(seed))?;
        let id = format!("pair_{:04}", i);
        let entry = ManifestEntry {
            source: PathBuf::from(format!("{}_src.xyz", id)),
            target: PathBuf::from(format!("{}_tgt.xyz", id)),
            transform: PathBuf::from(format!("{}_gt.txt", id)),
            seed: Some(seed),
            id,
        };
        io::save_cloud(&p.x, &args.out.join(&entry.source))?;
        io::save_cloud(&p.y, &args.out.join(&entry.target))?;
        io::save_transform(&p.t_gt, &args.out.join(&entry.transform))?;
        pairs.push(entry);
    }
    let m = Manifest {
        format_version: io::MANIFEST_FORMAT_VERSION,
        pairs,
    };
    io::save_manifest(&m, &args.out)?;
    Ok(m)
}

fn initial_weights(rc: &RunConfig, init: Option<&Path>) -> Result<ModelWeights<f64>> {
    match init {
        Some(p) => io::load_weights(p),
        None => ModelWeights::init(rc.model_config()?, rc.seed),
    }
}

fn train_with<T: Real>(
    init: ModelWeights<f64>,
    ablation: &AblationConfig,
    cfg: &TrainConfig,
    source: &mut dyn PairSource,
    log_every: usize,
    out: &Path,
) -> Result<Vec<f64>> {
    let outcome = train_loop(init.cast::<T>(), ablation, cfg, source, |step, loss| {
        if log_every > 0 && (step % log_every == 0 || step + 1 == cfg.steps) {
            eprintln!("step {:>6}  loss {:.6}", step, loss);
        }
    })?;
    io::save_weights(&outcome.weights, &out.join("weights.json"))?;
    Ok(outcome.losses)
}

/// Train and write `weights.json`, `loss.csv` and checkpoints under `out`.
pub fn train_to_dir(
    rc: &RunConfig,
    tc: &TrainConfig,
    synth: SynthParams,
    data: Option<&Path>,
    init: Option<&Path>,
    log_every: usize,
    out: &Path,
) -> Result<Vec<f64>> {
    fs::create_dir_all(out)?;
    let w = initial_weights(rc, init)?;
    let mut source: Box<dyn PairSource> = match data {
        Some(dir) => {
            let pairs = io::load_dataset(dir)?
                .into_iter()
                .map(|p| TrainingPair::new(p.x, p.y, p.t_gt, w.config().k_local, rc.eval.beta))
                .collect::<Result<Vec<_>>>()?;
            Box::new(PairCycle { pairs })
        }
        None => Box::new(SynthStream {
            params: synth,
            seed: rc.seed,
            k_local: w.config().k_local,
            beta: rc.eval.beta,
        }),
    };
    let losses = match tc.precision {
        Precision::F32 => train_with::<f32>(w, &rc.ablation, tc, source.as_mut(), log_every, out)?,
        Precision::F64 => train_with::<f64>(w, &rc.ablation, tc, source.as_mut(), log_every, out)?,
    };
    io::write_loss_curve(&losses, &out.join("loss.csv"))?;
    Ok(losses)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<f64>> {
    let rc = args.common.run_config()?;
    let tc = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        seed: rc.seed,
        batch: args.batch,
        precision: args.common.precision(),
        gt_warp: !args.no_gt_warp,
        checkpoint_dir: Some(args.out.join("checkpoints")),
        checkpoint_every: args.checkpoint_every,
        ..TrainConfig::default()
    };
    train_to_dir(
        &rc,
        &tc,
        args.synth.params(rc.seed),
        args.data.as_deref(),
        args.weights.as_deref(),
        args.log_every,
        &args.out,
    )
}

fn load_matcher(rc: &RunConfig, weights: Option<&Path>, precision: Precision) -> Result<AnyMatcher> {
    match weights {
        Some(p) => AnyMatcher::load(p, precision, rc.ablation),
        None => {
            eprintln!("note: no --weights given, using seeded untrained weights");
            Ok(AnyMatcher::new(ModelWeights::<f64>::init(rc.model_config()?, rc.seed)?, precision, rc.ablation))
        }
    }
}

/// Summary of a matching run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchSummary {
    pub num_src: usize,
    pub num_tgt: usize,
    pub num_corr: usize,
    pub row_sum_max: f64,
    pub col_sum_max: f64,
    pub entry_min: f64,
    pub entry_max: f64,
    pub match_source: Option<MatchSource>,
    pub transform: Option<[[f64; 4]; 4]>,
}

fn summarize(s: &Tensor<f64>, corr: &CorrespondenceSet, source: Option<MatchSource>) -> MatchSummary {
    let (m, n) = (s.rows(), s.cols());
    let row_sum_max = (0..m).map(|i| s.row(i).iter().sum::<f64>()).fold(0.0, f64::max);
    let col_sum_max = (0..n).map(|j| (0..m).map(|i| s.at(i, j)).sum::<f64>()).fold(0.0, f64::max);
    MatchSummary {
        num_src: m,
        num_tgt: n,
        num_corr: corr.len(),
        row_sum_max,
        col_sum_max,
        entry_min: s.data().iter().copied().fold(f64::INFINITY, f64::min),
        entry_max: s.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        match_source: source,
        transform: None,
    }
}

fn correspondences_csv(corr: &CorrespondenceSet, s: &Tensor<f64>) -> String {
    let mut out = String::from("src,tgt,score\n");
    for c in corr.pairs() {
        let _ = writeln!(out, "{},{},{:.6}", c.src, c.tgt, s.at(c.src, c.tgt));
    }
    out
}

fn run_match(args: &MatchArgs) -> Result<(RunConfig, PointCloud, PointCloud, CorrespondenceSet, MatchSummary)> {
    let mut rc = args.common.run_config()?;
    args.select.apply(&mut rc.match_cfg);
    rc.validate()?;
    let matcher = load_matcher(&rc, args.weights.as_deref(), args.common.precision())?;
    let (x, y) = (io::load_cloud(&args.src)?, io::load_cloud(&args.tgt)?);
    let out = matcher.match_prepared(&matcher.prepare(&x)?, &matcher.prepare(&y)?, &WarpMode::Estimate)?;
    let scores = matcher_scores(&out, args.select.matcher)?;
    let corr = rc.match_cfg.select(&scores)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("correspondences.csv"), correspondences_csv(&corr, &scores))?;
    let summary = summarize(&scores, &corr, out.match_source);
    Ok((rc, x, y, corr, summary))
}

fn write_summary(s: &MatchSummary, dir: &Path) -> Result<()> {
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)?)?;
    Ok(())
}

pub fn cmd_match(args: &MatchArgs) -> Result<MatchSummary> {
    let (_, _, _, _, summary) = run_match(args)?;
    write_summary(&summary, &args.out)?;
    Ok(summary)
}

pub fn cmd_register(args: &RegisterArgs) -> Result<Option<RigidTransform>> {
    let (rc, x, y, corr, mut summary) = run_match(&args.matching)?;
    let opts = EvalOptions {
        matcher: args.matching.select.matcher,
        match_cfg: rc.match_cfg,
        eval: rc.eval,
        ransac: args.ransac,
        seed: rc.seed,
        budgets: Vec::new(),
        timing: false,
        threads: 1,
    };
    let t = estimate(&corr, &x, &y, &opts, 0)?;
    match &t {
        Some(t) => {
            io::save_transform(t, &args.matching.out.join("transform.txt"))?;
            let h = t.to_homogeneous();
            summary.transform = Some(std::array::from_fn(|r| std::array::from_fn(|c| h[(r, c)])));
        }
        None => eprintln!("warning: no transform could be estimated from {} correspondences", corr.len()),
    }
    write_summary(&summary, &args.matching.out)?;
    Ok(t)
}

fn write_eval_outputs(results: &[PairResult], out: &Path, budgets: bool) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, eval_csv(results))?;
    if budgets {
        fs::write(out.with_extension("budgets.csv"), budgets_csv(results))?;
    }
    for r in results {
        if let Some(f) = &r.failure {
            eprintln!("warning: {} failed: {}", r.id, f);
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<PairResult>> {
    let mut rc = args.common.run_config()?;
    args.select.apply(&mut rc.match_cfg);
    rc.validate()?;
    let matcher = load_matcher(&rc, args.weights.as_deref(), args.common.precision())?;
    let pairs = io::load_dataset(&args.data)?;
    let opts = EvalOptions {
        matcher: args.select.matcher,
        match_cfg: rc.match_cfg,
        eval: rc.eval,
        ransac: args.ransac,
        seed: rc.seed,
        budgets: args.num_corr.clone(),
        timing: !args.no_timing,
        threads: args.threads.unwrap_or_else(default_threads),
    };
    let results = evaluate_pairs(&matcher, &pairs, &opts)?;
    write_eval_outputs(&results, &args.out, !args.num_corr.is_empty())?;
    let (rr, fmr) = crate::registration::recall(&rows(&results).into_iter().map(|r| r.1).collect::<Vec<_>>());
    println!("pairs {}  mean IR {:.4}  RR {:.4}  FMR {:.4}", results.len(), mean_ir(&results), rr, fmr);
    Ok(results)
}

pub const ABLATION_HEADER: &str = "config,gcnn,bi_match,gc,rep,match_source,rre_deg,rte,rr,ir,fmr,overlap,num_corr,runtime_s";

fn source_name(s: Option<MatchSource>) -> &'static str {
    match s {
        Some(MatchSource::WarpedNearestNeighbour) => "warped_nn",
        Some(MatchSource::ScoreArgmax) => "score_argmax",
        None => "none",
    }
}

/// One aggregate line per configuration, in table order.
pub fn ablation_csv(rows: &[(char, AblationConfig, Vec<PairResult>)]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for (c, cfg, results) in rows {
        let agg = io::aggregate_csv_line("", &self::rows(results));
        let agg = agg.trim_end().trim_start_matches(',');
        // Every pair of a configuration takes the same path; report the first that ran.
        let source = results.iter().find_map(|r| r.match_source);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c,
            u8::from(cfg.gcnn),
            u8::from(cfg.bi_match),
            u8::from(cfg.global_consistency),
            u8::from(cfg.reposition),
            source_name(source),
            agg
        );
    }
    s
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<(char, AblationConfig, Vec<PairResult>)>> {
    let mut rc = args.common.run_config()?;
    args.select.apply(&mut rc.match_cfg);
    rc.validate()?;
    fs::create_dir_all(&args.out)?;
    let pairs = io::load_dataset(&args.data)?;
    let precision = args.common.precision();
    let mut table = Vec::new();
    for (c, cfg) in AblationConfig::table() {
        let run = RunConfig { ablation: cfg, ..rc.clone() };
        let weights = match &args.weights_dir {
            Some(dir) => dir.join(format!("weights_{}.json", c)),
            None => {
                let dir = args.out.join(format!("train_{}", c));
                let tc = TrainConfig {
                    steps: args.steps,
                    lr: args.lr,
                    seed: rc.seed,
                    precision,
                    ..TrainConfig::default()
                };
                eprintln!("training ({}) {}", c, cfg);
                train_to_dir(&run, &tc, args.synth.params(rc.seed), None, None, 0, &dir)?;
                dir.join("weights.json")
            }
        };
        let matcher = AnyMatcher::load(&weights, precision, cfg)?;
        let opts = EvalOptions {
            matcher: args.select.matcher,
            match_cfg: rc.match_cfg,
            eval: rc.eval,
            ransac: args.ransac,
            seed: rc.seed,
            budgets: Vec::new(),
            timing: !args.no_timing,
            threads: args.threads.unwrap_or_else(default_threads),
        };
        let results = evaluate_pairs(&matcher, &pairs, &opts)?;
        write_eval_outputs(&results, &args.out.join(format!("report_{}.csv", c)), false)?;
        println!("({}) {:<32} mean IR {:.4}", c, cfg.to_string(), mean_ir(&results));
        table.push((c, cfg, results));
    }
    fs::write(args.out.join("ablation.csv"), ablation_csv(&table))?;
    Ok(table)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let m = cmd_gen(&a)?;
            println!("wrote {} pairs to {}", m.pairs.len(), a.out.display());
        }
        Command::Train(a) => {
            let losses = cmd_train(&a)?;
            println!(
                "trained {} steps, loss {:.6} -> {:.6}",
                losses.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Match(a) => {
            let s = cmd_match(&a)?;
            println!("{} correspondences", s.num_corr);
        }
        Command::Register(a) => {
            if let Some(t) = cmd_register(&a)? {
                println!("{}", t.to_homogeneous());
            }
        }
        Command::Eval(a) => {
            cmd_eval(&a)?;
        }
        Command::Ablate(a) => {
            cmd_ablate(&a)?;
        }
    }
    Ok(())
}
