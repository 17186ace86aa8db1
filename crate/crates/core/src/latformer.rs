//! Full network: both encoders, per-scale bidirectional fusion, hierarchical
//! concatenation, the final descriptor and a three-layer classifier, plus
//! the fusion-strategy ablations and a deterministic SGD trainer.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, derive_seed, AdError, Linear, ParamStore, Tape, Var};
use crate::encoders::{
    build_point_hierarchy, build_view_hierarchy, EncoderError, HierarchyConfig, PointEncoder, PointGeometry,
    ViewEncoder,
};
use crate::laf::{laf_forward, pool, AttentionMode, GateMatrix, LafConfig, LafError, LafWeights, PoolMode};
use crate::synthdata::{DepthViewSet, Sample};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Laf(#[from] LafError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Latformer,
    LateFusion,
    DeepConcat,
    PointViewOnly,
    ViewPointOnly,
    LatformerSoftmax,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        Self::Latformer,
        Self::LateFusion,
        Self::DeepConcat,
        Self::PointViewOnly,
        Self::ViewPointOnly,
        Self::LatformerSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Latformer => "latformer",
            Self::LateFusion => "late_fusion",
            Self::DeepConcat => "deep_concat",
            Self::PointViewOnly => "point_view_only",
            Self::ViewPointOnly => "view_point_only",
            Self::LatformerSoftmax => "latformer_softmax",
        }
    }

    /// Whether the point-enhanced branch `g_vp` feeds the descriptor.
    fn uses_point_branch(self) -> bool {
        !matches!(self, Self::LateFusion | Self::ViewPointOnly)
    }

    /// Whether the view-enhanced branch `g_pv` feeds the descriptor.
    fn uses_view_branch(self) -> bool {
        !matches!(self, Self::LateFusion | Self::PointViewOnly)
    }

    fn fused_branches(self) -> usize {
        self.uses_point_branch() as usize + self.uses_view_branch() as usize
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown fusion strategy {s:?}")))
    }
}

/// Fusion variant plus the `(view scale, point scale)` pairs to fuse,
/// 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    pub scale_pairs: Vec<(usize, usize)>,
}

impl FusionStrategy {
    /// Same-scale pairs `(1,1) .. (L,L)`.
    pub fn same_scale(kind: FusionKind, levels: usize) -> Self {
        Self {
            kind,
            scale_pairs: (1..=levels).map(|l| (l, l)).collect(),
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.scale_pairs.is_empty() && self.kind != FusionKind::LateFusion {
            return Err(ModelError::Config(format!("{} needs at least one scale pair", self.kind)));
        }
        if let Some(&(m, k)) = self
            .scale_pairs
            .iter()
            .find(|&&(m, k)| m == 0 || k == 0 || m > levels || k > levels)
        {
            return Err(ModelError::Config(format!(
                "scale pair (V{m}, P{k}) outside 1..={levels}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hierarchy: HierarchyConfig,
    pub heads: usize,
    pub beta: f64,
    pub eps: f64,
    pub attention_mode: AttentionMode,
    pub strategy: FusionStrategy,
    pub classes: usize,
    /// Width of each descriptor projection.
    pub proj_width: usize,
    pub hidden_width: usize,
    /// Penultimate (retrieval code) width.
    pub code_width: usize,
}

impl ModelConfig {
    pub fn new(hierarchy: HierarchyConfig, heads: usize, beta: f64, kind: FusionKind, classes: usize) -> Self {
        let strategy = FusionStrategy::same_scale(kind, hierarchy.levels);
        Self {
            hierarchy,
            heads,
            beta,
            eps: 1e-5,
            attention_mode: AttentionMode::ThresholdedSigmoid,
            strategy,
            classes,
            proj_width: 256,
            hidden_width: 512,
            code_width: 256,
        }
    }

    pub fn laf_config(&self, pool_mode: PoolMode) -> Result<LafConfig> {
        let mut cfg = LafConfig::new(self.hierarchy.d_model, self.heads, self.beta, pool_mode)?;
        cfg.eps = self.eps;
        cfg.attention_mode = match self.strategy.kind {
            FusionKind::LatformerSoftmax => AttentionMode::Softmax,
            _ => self.attention_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn descriptor_width(&self) -> usize {
        (2 + self.strategy.kind.fused_branches()) * self.proj_width
    }

    pub fn validate(&self, n_points: usize, resolution: usize) -> Result<()> {
        self.hierarchy.validate(n_points, resolution)?;
        self.laf_config(PoolMode::Max)?;
        self.strategy.validate(self.hierarchy.levels)?;
        if self.classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.proj_width == 0 || self.hidden_width == 0 || self.code_width == 0 {
            return Err(ModelError::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Gates of one fused scale pair.
#[derive(Debug, Clone)]
pub struct ScaleGates {
    pub pair: (usize, usize),
    /// Point queries over view keys, one per head.
    pub point_query: Vec<GateMatrix>,
    /// View queries over point keys, one per head.
    pub view_query: Vec<GateMatrix>,
}

/// Differentiable outputs of one forward pass.
pub struct Forward<'t> {
    /// `1 × C`.
    pub logits: Var<'t>,
    /// `1 × code_width`.
    pub code: Var<'t>,
    pub g_final: Var<'t>,
    pub gates: Vec<ScaleGates>,
}

/// One cloud with its precomputed geometry and rendered views.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub geometry: PointGeometry,
    pub views: DepthViewSet,
    pub label: usize,
}

pub fn prepare(samples: &[Sample], cfg: &HierarchyConfig) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                geometry: PointGeometry::plan(&s.points, cfg)?,
                views: s.views.clone(),
                label: s.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    view_enc: ViewEncoder,
    point_enc: PointEncoder,
    /// Per scale pair: points enhanced with views (`g_vp`).
    laf_point: Vec<LafWeights>,
    /// Per scale pair: views enhanced with points (`g_pv`).
    laf_view: Vec<LafWeights>,
    proj_v: Linear,
    proj_vp: Linear,
    proj_pv: Linear,
    proj_p: Linear,
    head: [Linear; 3],
}

fn as_row<'t>(v: &Var<'t>) -> Result<Var<'t>> {
    let n = v.shape().iter().product();
    Ok(v.reshape(&[1, n])?)
}

impl Model {
    /// Creates every parameter, including LAF blocks a strategy may not use.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.laf_config(PoolMode::Max)?;
        cfg.strategy.validate(cfg.hierarchy.levels)?;
        let d = cfg.hierarchy.d_model;
        let pairs = cfg.strategy.scale_pairs.len().max(1);
        let mut params = ParamStore::new();
        let view_enc = ViewEncoder::new(&mut params, &cfg.hierarchy, seed)?;
        let point_enc = PointEncoder::new(&mut params, &cfg.hierarchy, seed)?;
        let mut laf_point = Vec::new();
        let mut laf_view = Vec::new();
        for i in 0..cfg.strategy.scale_pairs.len() {
            laf_point.push(LafWeights::new(&mut params, &format!("laf.l{i}.vp"), d, seed)?);
            laf_view.push(LafWeights::new(&mut params, &format!("laf.l{i}.pv"), d, seed)?);
        }
        let w = cfg.proj_width;
        let proj_v = Linear::new(&mut params, "head.proj_v", d, w, seed)?;
        let proj_vp = Linear::new(&mut params, "head.proj_vp", pairs * 2 * d, w, seed)?;
        let proj_pv = Linear::new(&mut params, "head.proj_pv", pairs * d, w, seed)?;
        let proj_p = Linear::new(&mut params, "head.proj_p", 2 * d, w, seed)?;
        let head = [
            Linear::new(&mut params, "head.fc1", cfg.descriptor_width(), cfg.hidden_width, seed)?,
            Linear::new(&mut params, "head.fc2", cfg.hidden_width, cfg.code_width, seed)?,
            Linear::new(&mut params, "head.fc3", cfg.code_width, cfg.classes, seed)?,
        ];
        Ok(Self {
            cfg,
            params,
            view_enc,
            point_enc,
            laf_point,
            laf_view,
            proj_v,
            proj_vp,
            proj_pv,
            proj_p,
            head,
        })
    }

    /// Names of all LAF parameters.
    pub fn laf_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("laf."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Per-sample pre-projection features (`g_v`, then `g_vp`, `g_pv` as
    /// the strategy uses them, then `g_p`), each `1 × width`, and the gates.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        geometry: &PointGeometry,
        views: &DepthViewSet,
    ) -> Result<(Vec<Var<'t>>, Vec<ScaleGates>)> {
        let s = &self.params;
        let kind = self.cfg.strategy.kind;
        let vh = build_view_hierarchy(tape, s, views, &self.view_enc)?;
        let ph = build_point_hierarchy(tape, s, geometry, &self.point_enc)?;

        let mut g_vp = Vec::new();
        let mut g_pv = Vec::new();
        let mut gates = Vec::new();
        if kind != FusionKind::LateFusion {
            let point_cfg = self.cfg.laf_config(PoolMode::MaxConcatMean)?;
            let view_cfg = self.cfg.laf_config(PoolMode::Max)?;
            for (i, &(m, k)) in self.cfg.strategy.scale_pairs.iter().enumerate() {
                let vt = &vh.scales[m - 1].tokens;
                let pt = &ph.scales[k - 1].tokens;
                let mut sg = ScaleGates {
                    pair: (m, k),
                    point_query: Vec::new(),
                    view_query: Vec::new(),
                };
                if kind == FusionKind::DeepConcat {
                    g_vp.push(pool(pt, PoolMode::MaxConcatMean)?);
                    g_pv.push(pool(vt, PoolMode::Max)?);
                    continue;
                }
                if kind.uses_point_branch() {
                    let out = laf_forward(tape, s, pt, vt, &point_cfg, &self.laf_point[i])?;
                    g_vp.push(out.pooled);
                    sg.point_query = out.gates;
                }
                if kind.uses_view_branch() {
                    let out = laf_forward(tape, s, vt, pt, &view_cfg, &self.laf_view[i])?;
                    g_pv.push(out.pooled);
                    sg.view_query = out.gates;
                }
                gates.push(sg);
            }
        }

        let mut parts = vec![as_row(&vh.global)?];
        if kind.uses_point_branch() {
            parts.push(as_row(&concat(&g_vp, 0)?)?);
        }
        if kind.uses_view_branch() {
            parts.push(as_row(&concat(&g_pv, 0)?)?);
        }
        parts.push(as_row(&ph.global)?);
        Ok((parts, gates))
    }

    fn projections(&self) -> Vec<Linear> {
        let kind = self.cfg.strategy.kind;
        let mut p = vec![self.proj_v];
        if kind.uses_point_branch() {
            p.push(self.proj_vp);
        }
        if kind.uses_view_branch() {
            p.push(self.proj_pv);
        }
        p.push(self.proj_p);
        p
    }

    /// Projects and classifies a batch of encoded samples; returns
    /// `(g_final, code, logits)` with one row per sample. Rows do not
    /// interact, so results match single-sample evaluation bitwise.
    pub fn head<'t>(&self, tape: &'t Tape, encoded: &[Vec<Var<'t>>]) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        if encoded.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let s = &self.params;
        let parts = self
            .projections()
            .iter()
            .enumerate()
            .map(|(j, proj)| {
                let rows: Vec<Var<'t>> = encoded.iter().map(|e| e[j]).collect();
                Ok(proj.forward(tape, s, &concat(&rows, 0)?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let g_final = concat(&parts, 1)?;
        let h = self.head[0].forward_relu(tape, s, &g_final)?;
        let code = self.head[1].forward_relu(tape, s, &h)?;
        let logits = self.head[2].forward(tape, s, &code)?;
        Ok((g_final, code, logits))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, geometry: &PointGeometry, views: &DepthViewSet) -> Result<Forward<'t>> {
        let (parts, gates) = self.encode(tape, geometry, views)?;
        let (g_final, code, logits) = self.head(tape, &[parts])?;
        Ok(Forward {
            logits,
            code,
            g_final,
            gates,
        })
    }

    /// Mean cross-entropy of a batch, built on one tape. Also returns the
    /// `B × C` logits.
    pub fn batch_loss<'t>(&self, tape: &'t Tape, batch: &[&PreparedSample]) -> Result<(Var<'t>, Var<'t>)> {
        let encoded = batch
            .iter()
            .map(|s| Ok(self.encode(tape, &s.geometry, &s.views)?.0))
            .collect::<Result<Vec<_>>>()?;
        let (_, _, logits) = self.head(tape, &encoded)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        Ok((logits.cross_entropy(&labels)?, logits))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub logits: Vec<f64>,
    /// Penultimate activation, the retrieval descriptor.
    pub code: Vec<f64>,
}

/// Evaluates in chunks of 16 samples; order-preserving.
pub fn predict_batch(model: &Model, samples: &[PreparedSample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let tape = Tape::new();
        let encoded = chunk
            .iter()
            .map(|s| Ok(model.encode(&tape, &s.geometry, &s.views)?.0))
            .collect::<Result<Vec<_>>>()?;
        let (_, code, logits) = model.head(&tape, &encoded)?;
        let (code, logits) = (code.value(), logits.value());
        for r in 0..chunk.len() {
            out.push(Prediction {
                label: argmax(logits.row(r)),
                logits: logits.row(r).to_vec(),
                code: code.row(r).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn accuracy(model: &Model, samples: &[PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let preds = predict_batch(model, samples)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| p.label == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Halve the learning rate every this many epochs; 0 disables decay.
    pub decay_every: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.003,
            momentum: 0.9,
            decay_every: 10,
            batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(ModelError::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::Config(format!("momentum = {} must be in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            e => self.lr * 0.5f64.powi((epoch / e) as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_oa: f64,
    pub test_oa: f64,
}

/// SGD with momentum (`v ← μv + g`, `θ ← θ − lr·v`). The sample order of
/// each epoch is drawn from `seed`. `train_oa` counts the batch
/// predictions made before each update. `test_oa` is `NaN` when `test` is
/// empty.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedSample],
    test_set: &[PreparedSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut velocity: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; model.params.get(id).value.len()]).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            model.params.zero_grads();
            {
                let tape = Tape::new();
                let (loss, logits) = model.batch_loss(&tape, &batch)?;
                loss_sum += loss.value().item() * batch.len() as f64;
                let lv = logits.value();
                correct += batch
                    .iter()
                    .enumerate()
                    .filter(|(r, s)| argmax(lv.row(*r)) == s.label)
                    .count();
                tape.backward(loss)?;
                model.params.absorb_grads(&tape);
            }
            for (&id, vel) in ids.iter().zip(velocity.iter_mut()) {
                let grad = model.params.get(id).grad.data().to_vec();
                let value = model.params.value_mut(id);
                for ((v, g), p) in vel.iter_mut().zip(&grad).zip(value.data_mut()) {
                    *v = cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        let n = train_set.len() as f64;
        let test_oa = if test_set.is_empty() {
            f64::NAN
        } else {
            accuracy(model, test_set)?
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / n,
            train_oa: correct as f64 / n,
            test_oa,
        });
    }
    Ok(log)
}

/// CSV with header `epoch,loss,train_oa,test_oa`.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,train_oa,test_oa\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.train_oa, e.test_oa));
    }
    out
}

/// `[N, D]` tokens of a scale pair, for tests and gate export.
pub fn token_counts(cfg: &HierarchyConfig, resolution: usize) -> (Vec<usize>, Vec<usize>) {
    let views = cfg.view_extents(resolution)[1..].iter().map(|e| e * e).collect();
    (views, cfg.n_q.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, ParamId};
    use crate::synthdata::{make_dataset, DatasetConfig};

    pub(crate) fn tiny_hierarchy() -> HierarchyConfig {
        HierarchyConfig {
            levels: 2,
            d_model: 8,
            patch: 2,
            n_q: vec![16, 8],
            k: 4,
            n_views: 2,
        }
    }

    fn tiny_data(classes: usize, per_class: usize) -> (Vec<PreparedSample>, Vec<PreparedSample>) {
        let data = DatasetConfig {
            classes,
            per_class_train: per_class,
            per_class_test: 1,
            n_points: 32,
            n_views: 2,
            resolution: 8,
            noise_sigma: 0.01,
            seed: 3,
        };
        let corpus = make_dataset(&data).unwrap();
        let h = tiny_hierarchy();
        (prepare(&corpus.train, &h).unwrap(), prepare(&corpus.test, &h).unwrap())
    }

    fn tiny_model(kind: FusionKind, seed: u64) -> Model {
        let mut cfg = ModelConfig::new(tiny_hierarchy(), 2, 0.3, kind, 3);
        cfg.proj_width = 16;
        cfg.hidden_width = 24;
        cfg.code_width = 12;
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn strategy_parsing_and_validation() {
        for k in FusionKind::ALL {
            assert_eq!(k.name().parse::<FusionKind>().unwrap(), k);
        }
        assert!("late".parse::<FusionKind>().is_err());
        let empty = FusionStrategy {
            kind: FusionKind::Latformer,
            scale_pairs: vec![],
        };
        assert!(empty.validate(3).is_err());
        let late = FusionStrategy {
            kind: FusionKind::LateFusion,
            scale_pairs: vec![],
        };
        assert!(late.validate(3).is_ok());
        let bad = FusionStrategy {
            kind: FusionKind::DeepConcat,
            scale_pairs: vec![(1, 4)],
        };
        assert!(bad.validate(3).is_err());
        assert!(FusionStrategy::same_scale(FusionKind::Latformer, 3).validate(3).is_ok());
    }

    #[test]
    fn descriptor_widths() {
        let h = HierarchyConfig {
            levels: 3,
            d_model: 64,
            patch: 2,
            n_q: vec![64, 32, 16],
            k: 20,
            n_views: 6,
        };
        let width = |k| ModelConfig::new(h.clone(), 4, 0.3, k, 8).descriptor_width();
        assert_eq!(width(FusionKind::Latformer), 1024);
        assert_eq!(width(FusionKind::LatformerSoftmax), 1024);
        assert_eq!(width(FusionKind::DeepConcat), 1024);
        assert_eq!(width(FusionKind::LateFusion), 512);
        assert_eq!(width(FusionKind::PointViewOnly), 768);
        assert_eq!(width(FusionKind::ViewPointOnly), 768);
        let m = Model::new(ModelConfig::new(h, 4, 0.3, FusionKind::Latformer, 8), 0).unwrap();
        assert_eq!(m.proj_vp.fan_in, 3 * 2 * 64);
        assert_eq!(m.proj_pv.fan_in, 3 * 64);
        assert_eq!(m.head[0].fan_in, 1024);
        assert_eq!(m.head[1].fan_out, 256);
    }

    #[test]
    fn forward_shapes_and_gates() {
        let (train, _) = tiny_data(3, 1);
        for kind in FusionKind::ALL {
            let m = tiny_model(kind, 1);
            let tape = Tape::new();
            let out = m.forward(&tape, &train[0].geometry, &train[0].views).unwrap();
            assert_eq!(out.logits.shape(), vec![1, 3]);
            assert_eq!(out.code.shape(), vec![1, 12]);
            assert_eq!(out.g_final.shape(), vec![1, m.cfg.descriptor_width()]);
            let attends = !matches!(kind, FusionKind::LateFusion | FusionKind::DeepConcat);
            assert_eq!(out.gates.len(), if attends { 2 } else { 0 });
            if attends {
                let g = &out.gates[0];
                assert_eq!(g.point_query.len(), 2 * kind.uses_point_branch() as usize);
                assert_eq!(g.view_query.len(), 2 * kind.uses_view_branch() as usize);
                if let Some(pq) = g.point_query.first() {
                    assert_eq!((pq.rows(), pq.cols()), (16, 4));
                }
            }
        }
    }

    #[test]
    fn late_fusion_disconnects_laf() {
        let (train, _) = tiny_data(3, 1);
        let mut m = tiny_model(FusionKind::LateFusion, 2);
        let refs: Vec<&PreparedSample> = train.iter().collect();
        let tape = Tape::new();
        let (loss, logits) = m.batch_loss(&tape, &refs).unwrap();
        let before = (*logits.value()).clone();
        tape.backward(loss).unwrap();
        m.params.zero_grads();
        m.params.absorb_grads(&tape);
        drop(tape);
        let names = m.laf_param_names();
        assert_eq!(names.len(), 2 * 2 * 6 * 2);
        for name in &names {
            let id = m.params.id(name).unwrap();
            assert!(m.params.get(id).grad.data().iter().all(|&g| g == 0.0), "{name}");
            m.params.value_mut(id).data_mut()[0] += 0.25;
        }
        let tape = Tape::new();
        let (_, after) = m.batch_loss(&tape, &refs).unwrap();
        assert_eq!(*after.value(), before);
    }

    #[test]
    fn argmax_ties_and_prediction_order() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        let (train, _) = tiny_data(3, 1);
        let m = tiny_model(FusionKind::Latformer, 3);
        let preds = predict_batch(&m, &train).unwrap();
        assert_eq!(preds.len(), 3);
        for (p, s) in preds.iter().zip(&train) {
            let single = predict_batch(&m, std::slice::from_ref(s)).unwrap();
            assert_eq!(&single[0], p);
        }
        let twice = predict_batch(&m, &[train[0].clone(), train[0].clone()]).unwrap();
        assert_eq!(twice[0], twice[1]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (train, test) = tiny_data(3, 2);
        let mut m = tiny_model(FusionKind::Latformer, 4);
        let before = m.params.to_json();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        train_fn(&mut m, &train, &test, &cfg, 1);
        assert_eq!(m.params.to_json(), before);
    }

    fn train_fn(m: &mut Model, a: &[PreparedSample], b: &[PreparedSample], cfg: &TrainConfig, seed: u64) -> Vec<EpochLog> {
        train(m, a, b, cfg, seed).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, test) = tiny_data(3, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(FusionKind::Latformer, 5);
            let log = train_fn(&mut m, &train_set, &test, &cfg, 9);
            (log, m.params.to_json())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 3);
        assert!(log_to_csv(&a.0).starts_with("epoch,loss,train_oa,test_oa\n1,"));
    }

    #[test]
    fn single_sample_overfits() {
        let (train_set, _) = tiny_data(3, 1);
        let one = vec![train_set[1].clone()];
        let mut m = tiny_model(FusionKind::Latformer, 6);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.01,
            decay_every: 0,
            batch: 1,
            ..TrainConfig::default()
        };
        let log = train_fn(&mut m, &one, &[], &cfg, 1);
        let tape = Tape::new();
        let (loss, _) = m.batch_loss(&tape, &[&one[0]]).unwrap();
        assert!(loss.value().item() < 0.01, "final loss {}", loss.value().item());
        assert!(log[0].loss > log[199].loss);
        assert!(log[0].test_oa.is_nan());
    }

    #[test]
    fn lr_schedule_halves() {
        let cfg = TrainConfig {
            lr: 0.08,
            decay_every: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(9), 0.08);
        assert_eq!(cfg.lr_at(10), 0.04);
        assert_eq!(cfg.lr_at(25), 0.02);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (train_set, _) = tiny_data(3, 1);
        for kind in [FusionKind::Latformer, FusionKind::LatformerSoftmax, FusionKind::DeepConcat] {
            let m = tiny_model(kind, 7);
            let refs: Vec<&PreparedSample> = train_set.iter().collect();
            let coords: Vec<(ParamId, usize)> = m
                .params
                .iter()
                .flat_map(|(id, p)| [0, p.value.len() / 2, p.value.len() - 1].map(|i| (id, i)))
                .collect();
            let r = grad_check_params(
                &m.params,
                |tape, store| {
                    let mut probe = m.clone();
                    probe.params = store.clone();
                    Ok(probe.batch_loss(tape, &refs).unwrap().0)
                },
                &coords,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "{kind}: {r:?}");
            assert!(r.checked > coords.len() / 2, "{kind}: {r:?}");
        }
    }

    #[test]
    fn view_and_point_permutations_preserve_logits() {
        let data = DatasetConfig {
            classes: 3,
            per_class_train: 1,
            per_class_test: 1,
            n_points: 32,
            n_views: 2,
            resolution: 8,
            noise_sigma: 0.01,
            seed: 3,
        };
        let corpus = make_dataset(&data).unwrap();
        let h = tiny_hierarchy();
        let s = &corpus.train[2];
        let perm: Vec<usize> = (0..32).map(|i| (i * 13 + 5) % 32).collect();
        let base = PreparedSample {
            geometry: PointGeometry::plan(&s.points, &h).unwrap(),
            views: s.views.clone(),
            label: s.label,
        };
        let moved = PreparedSample {
            geometry: PointGeometry::plan(&s.points.permuted(&perm), &h).unwrap(),
            views: s.views.permuted(&[1, 0]),
            label: s.label,
        };
        for kind in FusionKind::ALL {
            let m = tiny_model(kind, 8);
            let a = predict_batch(&m, std::slice::from_ref(&base)).unwrap();
            let b = predict_batch(&m, std::slice::from_ref(&moved)).unwrap();
            for (x, y) in a[0].logits.iter().zip(&b[0].logits) {
                assert!((x - y).abs() <= 1e-12, "{kind}");
            }
        }
    }
}
