//! Command-line harness: JSON experiment configs and the subcommands that
//! run training, evaluation, retrieval, ablation grids, gradient checks,
//! gate export and corpus generation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check, grad_check_params, AdError, Array, GradCheckReport, ParamId, ParamStore, Tape, Var};
use crate::encoders::HierarchyConfig;
use crate::eval::{evaluate_model, metrics_csv, retrieval_map, EvalError, Evaluation, MetricsRow, RetrievalRun};
use crate::laf::{laf_forward, AttentionMode, LafConfig, LafWeights, PoolMode};
use crate::latformer::{
    log_to_csv, prepare, train, FusionKind, FusionStrategy, Model, ModelConfig, ModelError, PreparedSample,
    TrainConfig,
};
use crate::synthdata::{make_dataset, randomly_rotated, save_split, Corpus, DataError, DatasetConfig, ShapeKind, NUM_KINDS};

/// Largest accepted relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{file}: {msg} (at `{path}`)")]
    Parse { file: String, path: String, msg: String },
    #[error("invalid config: {field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("gradient check failed: max relative error {0:e} exceeds {GRADCHECK_TOLERANCE:e}")]
    GradCheck(f64),
    #[error("sample index {index} out of range for {len} test samples")]
    SampleIndex { index: usize, len: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn invalid<T>(field: &str, msg: impl Into<String>) -> Result<T> {
    Err(CliError::Invalid {
        field: field.into(),
        msg: msg.into(),
    })
}

/// Model block of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub d_model: usize,
    pub heads: usize,
    pub beta: f64,
    pub eps: f64,
    pub levels: usize,
    pub patch: usize,
    pub n_q: Vec<usize>,
    pub k: usize,
    pub strategy: FusionKind,
    /// `(view scale, point scale)` pairs; same-scale pairs when absent.
    pub scale_pairs: Option<Vec<(usize, usize)>>,
    pub attention_mode: AttentionMode,
    pub proj_width: usize,
    pub hidden_width: usize,
    pub code_width: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            beta: 0.3,
            eps: 1e-5,
            levels: 3,
            patch: 2,
            n_q: vec![64, 32, 16],
            k: 20,
            strategy: FusionKind::Latformer,
            scale_pairs: None,
            attention_mode: AttentionMode::ThresholdedSigmoid,
            proj_width: 256,
            hidden_width: 512,
            code_width: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Model initialization and sample-order seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelBlock,
    pub training: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelBlock::default(),
            training: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The small configuration used for gradient checks: D=8, H=2, L=2,
    /// 32 points, 2 views of 8×8.
    pub fn tiny() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/tiny"),
            dataset: DatasetConfig {
                classes: 3,
                per_class_train: 1,
                per_class_test: 1,
                n_points: 32,
                n_views: 2,
                resolution: 8,
                noise_sigma: 0.01,
                seed: 3,
            },
            model: ModelBlock {
                d_model: 8,
                heads: 2,
                levels: 2,
                n_q: vec![16, 8],
                k: 4,
                proj_width: 16,
                hidden_width: 24,
                code_width: 12,
                ..ModelBlock::default()
            },
            training: TrainConfig::default(),
        }
    }

    pub fn from_json(text: &str, file: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Parse {
            file: file.into(),
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn hierarchy(&self) -> HierarchyConfig {
        HierarchyConfig {
            levels: self.model.levels,
            d_model: self.model.d_model,
            patch: self.model.patch,
            n_q: self.model.n_q.clone(),
            k: self.model.k,
            n_views: self.dataset.n_views,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut cfg = ModelConfig::new(self.hierarchy(), m.heads, m.beta, m.strategy, self.dataset.classes);
        cfg.eps = m.eps;
        cfg.attention_mode = m.attention_mode;
        if let Some(pairs) = &m.scale_pairs {
            cfg.strategy = FusionStrategy {
                kind: m.strategy,
                scale_pairs: pairs.clone(),
            };
        }
        cfg.proj_width = m.proj_width;
        cfg.hidden_width = m.hidden_width;
        cfg.code_width = m.code_width;
        cfg
    }

    /// Checks every field, reporting the first violation by its path.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(2..=NUM_KINDS).contains(&d.classes) {
            return invalid("dataset.classes", format!("{} is outside 2..={NUM_KINDS}", d.classes));
        }
        for (field, v) in [
            ("dataset.per_class_train", d.per_class_train),
            ("dataset.per_class_test", d.per_class_test),
            ("dataset.n_points", d.n_points),
            ("dataset.n_views", d.n_views),
            ("dataset.resolution", d.resolution),
        ] {
            if v == 0 {
                return invalid(field, "must be positive");
            }
        }
        if d.n_points < 4 {
            return invalid("dataset.n_points", format!("{} is below the minimum of 4", d.n_points));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return invalid("dataset.noise_sigma", format!("{} must be finite and non-negative", d.noise_sigma));
        }

        let m = &self.model;
        for (field, v) in [
            ("model.d_model", m.d_model),
            ("model.heads", m.heads),
            ("model.levels", m.levels),
            ("model.patch", m.patch),
            ("model.k", m.k),
            ("model.proj_width", m.proj_width),
            ("model.hidden_width", m.hidden_width),
            ("model.code_width", m.code_width),
        ] {
            if v == 0 {
                return invalid(field, "must be positive");
            }
        }
        if !m.d_model.is_multiple_of(m.heads) {
            return invalid("model.heads", format!("{} does not divide d_model = {}", m.heads, m.d_model));
        }
        if !(0.0..1.0).contains(&m.beta) {
            return invalid("model.beta", format!("{} is outside [0, 1)", m.beta));
        }
        if !(m.eps > 0.0 && m.eps.is_finite()) {
            return invalid("model.eps", format!("{} must be positive", m.eps));
        }
        if m.n_q.len() != m.levels {
            return invalid(
                "model.n_q",
                format!("has {} entries but levels = {}", m.n_q.len(), m.levels),
            );
        }
        if !d.resolution.is_multiple_of(m.patch) {
            return invalid(
                "model.patch",
                format!("{} does not divide dataset.resolution = {}", m.patch, d.resolution),
            );
        }
        if let Err(e) = self.hierarchy().validate(d.n_points, d.resolution) {
            return invalid("model", e.to_string());
        }
        if let Err(e) = self.model_config().strategy.validate(m.levels) {
            return invalid("model.scale_pairs", e.to_string());
        }

        let t = &self.training;
        if t.epochs == 0 {
            return invalid("training.epochs", "must be positive");
        }
        if t.batch == 0 {
            return invalid("training.batch", "must be positive");
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return invalid("training.lr", format!("{} must be finite and non-negative", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return invalid("training.momentum", format!("{} is outside [0, 1)", t.momentum));
        }
        if let Err(e) = self.model_config().validate(d.n_points, d.resolution) {
            return invalid("model", e.to_string());
        }
        Ok(())
    }
}

/// Ablation grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Strategy,
    Beta,
    #[value(name = "heads", alias = "h")]
    Heads,
    K,
    #[value(name = "n_q")]
    NQ,
    #[value(name = "n_views")]
    NViews,
    #[value(name = "scale_pairs")]
    ScalePairs,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Strategy => "strategy",
            Self::Beta => "beta",
            Self::Heads => "heads",
            Self::K => "k",
            Self::NQ => "n_q",
            Self::NViews => "n_views",
            Self::ScalePairs => "scale_pairs",
        }
    }

    /// `(label, config)` for every value of the axis applied to `base`.
    pub fn values(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Strategy => FusionKind::ALL
                .iter()
                .map(|&k| (k.name().to_string(), with(&|c| c.model.strategy = k)))
                .collect(),
            Self::Beta => [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
                .iter()
                .map(|&b| (b.to_string(), with(&|c| c.model.beta = b)))
                .collect(),
            Self::Heads => [1, 2, 4, 8]
                .iter()
                .map(|&h| (h.to_string(), with(&|c| c.model.heads = h)))
                .collect(),
            Self::K => [5, 10, 20, 30]
                .iter()
                .map(|&k| (k.to_string(), with(&|c| c.model.k = k)))
                .collect(),
            Self::NQ => {
                let top = base.model.n_q.first().copied().unwrap_or(64);
                [top * 2, top + top / 2, top]
                    .iter()
                    .map(|&first| {
                        let n_q: Vec<usize> = (0..base.model.levels).map(|l| first >> l).collect();
                        let label = n_q.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("/");
                        (label, with(&|c| c.model.n_q = n_q.clone()))
                    })
                    .collect()
            }
            Self::NViews => [1, 2, 4, 6, 8]
                .iter()
                .map(|&v| (v.to_string(), with(&|c| c.dataset.n_views = v)))
                .collect(),
            Self::ScalePairs => {
                let l = base.model.levels;
                let mut sets: Vec<Vec<(usize, usize)>> = vec![(1..=l).map(|i| (i, i)).collect()];
                sets.extend((1..=l).map(|i| vec![(i, i)]));
                if l >= 2 {
                    sets.push((1..l).map(|i| (i, i + 1)).collect());
                    sets.push((1..l).map(|i| (i + 1, i)).collect());
                }
                sets.into_iter()
                    .map(|pairs| {
                        let label = pairs.iter().map(|(m, k)| format!("{m}-{k}")).collect::<Vec<_>>().join(";");
                        (label, with(&|c| c.model.scale_pairs = Some(pairs.clone())))
                    })
                    .collect()
            }
        }
    }
}

/// Cartesian product of the axes: `(labels per axis, config)` in
/// lexicographic order of the axis value lists.
pub fn grid_cells(base: &ExperimentConfig, axes: &[Axis]) -> Vec<(Vec<String>, ExperimentConfig)> {
    let mut cells = vec![(Vec::new(), base.clone())];
    for &axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|(labels, cfg)| {
                axis.values(&cfg).into_iter().map(move |(label, c)| {
                    let mut l = labels.clone();
                    l.push(label);
                    (l, c)
                })
            })
            .collect();
    }
    cells
}

/// Generated and pre-planned train/test splits.
pub struct PreparedCorpus {
    pub corpus: Corpus,
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

pub fn prepare_corpus(cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let corpus = make_dataset(&cfg.dataset)?;
    let h = cfg.hierarchy();
    let train = prepare(&corpus.train, &h)?;
    let test = prepare(&corpus.test, &h)?;
    Ok(PreparedCorpus { corpus, train, test })
}

/// A trained model with its log and test metrics.
pub struct TrainedRun {
    pub model: Model,
    pub log: Vec<crate::latformer::EpochLog>,
    pub test: Evaluation,
}

pub fn train_and_evaluate(cfg: &ExperimentConfig, data: &PreparedCorpus) -> Result<TrainedRun> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let log = train(&mut model, &data.train, &data.test, &cfg.training, cfg.seed)?;
    let test = evaluate_model(&model, &data.test)?;
    Ok(TrainedRun { model, log, test })
}

/// Outcome of `gradcheck`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub end_to_end: GradCheckReport,
    pub laf: GradCheckReport,
}

impl GradcheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.end_to_end.max_rel_error.max(self.laf.max_rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= GRADCHECK_TOLERANCE && self.end_to_end.checked > 0 && self.laf.checked > 0
    }
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        checked: a.checked + b.checked,
        excluded: a.excluded + b.excluded,
    }
}

/// Central-difference checks of the end-to-end loss over the first,
/// middle and last coordinate of every parameter, and of one LAF block
/// over its inputs and weights. Coordinates whose ±10·step neighbourhood
/// crosses a gate, ReLU or max boundary are excluded.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckOutcome> {
    const STEP: f64 = 1e-5;
    let data = prepare_corpus(cfg)?;
    let model = Model::new(cfg.model_config(), cfg.seed)?;
    let batch: Vec<&PreparedSample> = data.train.iter().take(4).collect();
    let coords = sample_coords(&model.params);
    let end_to_end = grad_check_params(
        &model.params,
        |tape, store| {
            let mut probe = model.clone();
            probe.params = store.clone();
            probe
                .batch_loss(tape, &batch)
                .map(|(loss, _)| loss)
                .map_err(|e| AdError::Invalid(e.to_string()))
        },
        &coords,
        STEP,
    )?;

    let d = cfg.model.d_model;
    let laf_cfg = LafConfig {
        attention_mode: cfg.model_config().laf_config(PoolMode::MaxConcatMean)?.attention_mode,
        eps: cfg.model.eps,
        ..LafConfig::new(d, cfg.model.heads, cfg.model.beta, PoolMode::MaxConcatMean).map_err(ModelError::from)?
    };
    let mut store = ParamStore::new();
    let weights = LafWeights::new(&mut store, "laf", d, cfg.seed).map_err(ModelError::from)?;
    let x0 = Array::uniform(&[6, d], 1.0, cfg.seed ^ 0x51);
    let y0 = Array::uniform(&[5, d], 1.0, cfg.seed ^ 0x52);
    fn loss<'t>(
        tape: &'t Tape,
        s: &ParamStore,
        x: Var<'t>,
        y: Var<'t>,
        cfg: &LafConfig,
        w: &LafWeights,
    ) -> std::result::Result<Var<'t>, AdError> {
        let out = laf_forward(tape, s, &x, &y, cfg, w).map_err(|e| AdError::Invalid(e.to_string()))?;
        Ok(out.pooled.mul(&out.pooled)?.sum())
    }
    let (c, w) = (&laf_cfg, &weights);
    let wrt_x = grad_check(|tape, x| loss(tape, &store, x, tape.constant(y0.clone()), c, w), &x0, STEP)?;
    let wrt_y = grad_check(|tape, y| loss(tape, &store, tape.constant(x0.clone()), y, c, w), &y0, STEP)?;
    let wrt_w = grad_check_params(
        &store,
        |tape, s| loss(tape, s, tape.constant(x0.clone()), tape.constant(y0.clone()), c, w),
        &sample_coords(&store),
        STEP,
    )?;
    Ok(GradcheckOutcome {
        end_to_end,
        laf: merge(merge(wrt_x, wrt_y), wrt_w),
    })
}

fn sample_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    let mut coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| [0, p.value.len() / 2, p.value.len() - 1].map(|i| (id, i)))
        .collect();
    coords.dedup();
    coords
}

#[derive(Debug, Parser)]
#[command(name = "pvfusion", version, about = "Point-cloud and multi-view fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(short = 'c', long = "config")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Checkpoint to load; `<out>/checkpoint.json` by default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json, train_log.csv and metrics.csv.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Apply a random azimuthal rotation to every test sample.
        #[arg(long)]
        rotated: bool,
    },
    /// Leave-one-out retrieval over test-split descriptors.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Train and evaluate every cell of a config grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axes to sweep.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<Axis>,
        /// Replicates per cell, with seeds `seed, seed + 1, ...`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Compare analytic and finite-difference gradients; the tiny config
    /// is used when no config is given.
    Gradcheck(Common),
    /// Write the gate matrices of one test sample.
    ExportGates {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Generate the corpus and write both splits.
    MakeData(Common),
}

fn resolve(common: &Common, fallback: ExperimentConfig) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => fallback,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    Ok((cfg, out))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_model(cfg: &ExperimentConfig, out: &Path, arg: &CheckpointArg) -> Result<Model> {
    let path = arg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    let text = fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    model.params.load_json(&text)?;
    Ok(model)
}

fn metrics_row(cfg: &ExperimentConfig, e: &Evaluation) -> MetricsRow {
    MetricsRow {
        strategy: cfg.model.strategy.name().to_string(),
        seed: cfg.seed,
        oa: e.oa,
        macc: e.macc,
        map: e.map,
    }
}

fn predictions_csv(e: &Evaluation) -> String {
    let mut out = String::from("index,label,predicted\n");
    for (i, (t, p)) in e.truth.iter().zip(&e.predicted).enumerate() {
        let _ = writeln!(out, "{i},{t},{p}");
    }
    out
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => {
            let (cfg, out) = resolve(&common, ExperimentConfig::default())?;
            let data = prepare_corpus(&cfg)?;
            let run = train_and_evaluate(&cfg, &data)?;
            write(&out.join("config.json"), &cfg.to_json())?;
            write(&out.join("checkpoint.json"), &run.model.params.to_json())?;
            write(&out.join("train_log.csv"), &log_to_csv(&run.log))?;
            write(&out.join("metrics.csv"), &metrics_csv(&[metrics_row(&cfg, &run.test)]))?;
            println!(
                "{}: seed {} oa {:.4} macc {:.4} map {:.4}",
                cfg.model.strategy, cfg.seed, run.test.oa, run.test.macc, run.test.map
            );
        }
        Command::Eval {
            common,
            checkpoint,
            rotated,
        } => {
            let (cfg, out) = resolve(&common, ExperimentConfig::default())?;
            let model = load_model(&cfg, &out, &checkpoint)?;
            let corpus = make_dataset(&cfg.dataset)?;
            let (samples, tag) = if rotated {
                (randomly_rotated(&corpus.test, cfg.seed)?, "_rotated")
            } else {
                (corpus.test, "")
            };
            let e = evaluate_model(&model, &prepare(&samples, &cfg.hierarchy())?)?;
            write(&out.join(format!("eval{tag}_metrics.csv")), &metrics_csv(&[metrics_row(&cfg, &e)]))?;
            write(&out.join(format!("eval{tag}_predictions.csv")), &predictions_csv(&e))?;
            println!("oa {:.4} macc {:.4} map {:.4}", e.oa, e.macc, e.map);
        }
        Command::Retrieve { common, checkpoint } => {
            let (cfg, out) = resolve(&common, ExperimentConfig::default())?;
            let model = load_model(&cfg, &out, &checkpoint)?;
            let data = prepare_corpus(&cfg)?;
            let e = evaluate_model(&model, &data.test)?;
            let run = RetrievalRun::leave_one_out(&e.codes, &e.truth)?;
            write(&out.join("rankings.csv"), &run.to_csv())?;
            let report = retrieval_map(&run)?;
            let summary = serde_json::json!({
                "map": report.map,
                "evaluated": report.evaluated,
                "skipped": report.skipped,
            });
            write(
                &out.join("retrieval.json"),
                &serde_json::to_string_pretty(&summary).expect("json"),
            )?;
            println!("map {:.4} over {} queries ({} skipped)", report.map, report.evaluated, report.skipped.len());
        }
        Command::Ablate { common, grid, seeds } => {
            let (cfg, out) = resolve(&common, ExperimentConfig::default())?;
            let cells = grid_cells(&cfg, &grid);
            for (_, c) in &cells {
                c.validate()?;
            }
            let mut csv: String = grid.iter().map(|a| format!("{},", a.name())).collect();
            csv.push_str("seed,oa,macc,map\n");
            for (labels, cell) in &cells {
                let data = prepare_corpus(cell)?;
                for s in 0..seeds {
                    let mut c = cell.clone();
                    c.seed = cfg.seed + s;
                    let run = train_and_evaluate(&c, &data)?;
                    let e = &run.test;
                    let _ = writeln!(csv, "{},{},{},{},{}", labels.join(","), c.seed, e.oa, e.macc, e.map);
                    println!("{} seed {}: oa {:.4}", labels.join(" "), c.seed, e.oa);
                }
            }
            write(&out.join("ablation.csv"), &csv)?;
        }
        Command::Gradcheck(common) => {
            let (cfg, _) = resolve(&common, ExperimentConfig::tiny())?;
            let g = gradcheck(&cfg)?;
            for (name, r) in [("end_to_end", &g.end_to_end), ("laf", &g.laf)] {
                println!(
                    "{name}: max_rel_error {:e} checked {} excluded {}",
                    r.max_rel_error, r.checked, r.excluded
                );
            }
            println!("max_rel_error {:e}", g.max_rel_error());
            if !g.passed() {
                return Err(CliError::GradCheck(g.max_rel_error()));
            }
        }
        Command::ExportGates {
            common,
            checkpoint,
            sample,
        } => {
            let (cfg, out) = resolve(&common, ExperimentConfig::default())?;
            let model = load_model(&cfg, &out, &checkpoint)?;
            let data = prepare_corpus(&cfg)?;
            let s = data.test.get(sample).ok_or(CliError::SampleIndex {
                index: sample,
                len: data.test.len(),
            })?;
            let files = crate::eval::export_gates(&model, s, &out.join("gates"))?;
            println!("wrote {} files to {}", files.len(), out.join("gates").display());
        }
        Command::MakeData(common) => {
            let (cfg, out) = resolve(&common, ExperimentConfig::default())?;
            let corpus = make_dataset(&cfg.dataset)?;
            save_split(&out.join("train.bin"), &corpus.train)?;
            save_split(&out.join("test.bin"), &corpus.test)?;
            let mut index = String::from("split,index,label,kind\n");
            for (split, samples) in [("train", &corpus.train), ("test", &corpus.test)] {
                for (i, s) in samples.iter().enumerate() {
                    let kind = ShapeKind::from_class(s.label)?;
                    let _ = writeln!(index, "{split},{i},{},{}", s.label, kind.name());
                }
            }
            write(&out.join("dataset.csv"), &index)?;
            println!("{} train / {} test samples", corpus.train.len(), corpus.test.len());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 2 on a usage error, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json("{}", "t").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.model.beta, 0.3);
        assert_eq!(cfg.model.eps, 1e-5);
        assert_eq!(cfg.model.k, 20);
        assert_eq!(cfg.model.levels, 3);
        assert_eq!(cfg.model.n_q, vec![64, 32, 16]);
        assert_eq!(cfg.training.batch, 16);
        let round = ExperimentConfig::from_json(&cfg.to_json(), "t").unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn validation_names_the_field() {
        let e = ExperimentConfig::from_json(r#"{"model": {"beta": 1.5}}"#, "t").unwrap_err();
        assert!(matches!(&e, CliError::Invalid { field, .. } if field == "model.beta"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"model": {"n_q": [64, 32]}}"#, "t").unwrap_err();
        assert!(e.to_string().contains("model.n_q"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"training": {"batch": 0}}"#, "t").unwrap_err();
        assert!(e.to_string().contains("training.batch"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"model": {"scale_pairs": [[1, 4]]}}"#, "t").unwrap_err();
        assert!(e.to_string().contains("model.scale_pairs"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"modle": {}}"#, "t").unwrap_err();
        assert!(matches!(e, CliError::Parse { .. }));
        assert!(e.to_string().contains("modle"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"model": {"betta": 0.2}}"#, "t").unwrap_err();
        assert!(e.to_string().contains("betta") && e.to_string().contains("model"), "{e}");
        let e = ExperimentConfig::from_json("{\n  \"seed\": \"x\"\n}", "t").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let base = ExperimentConfig::default();
        let cells = grid_cells(&base, &[Axis::Strategy, Axis::Heads]);
        assert_eq!(cells.len(), 6 * 4);
        assert_eq!(cells[0].0, vec!["latformer", "1"]);
        assert_eq!(cells[5].1.model.heads, 2);
        assert_eq!(cells[5].1.model.strategy, FusionKind::LateFusion);
        for axis in [Axis::Beta, Axis::K, Axis::NQ, Axis::NViews, Axis::ScalePairs] {
            for (label, c) in axis.values(&base) {
                c.validate().unwrap_or_else(|e| panic!("{} = {label}: {e}", axis.name()));
            }
        }
    }

    #[test]
    fn tiny_gradcheck_passes() {
        let g = gradcheck(&ExperimentConfig::tiny()).unwrap();
        assert!(g.passed(), "{g:?}");
    }
}
