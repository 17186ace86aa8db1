//! Multi-scale local-feature hierarchies for both modalities.
//!
//! Views: patch embedding, then `L` rounds of 2×2 max-pool + linear + ReLU,
//! each scale view-pooled across views and flattened row-major into tokens.
//! Points: one EdgeConv layer for base features, then `L` stacked
//! sample-and-group-pool (SGP) stages: farthest point sampling, kNN
//! grouping, neighbour max-pool, linear + ReLU.
//!
//! All geometric decisions (FPS order, neighbourhoods) depend only on the
//! input coordinates, so they are planned once per cloud in
//! [`PointGeometry`] and reused across forward passes.

use std::cmp::Ordering;

use thiserror::Error;

use crate::autodiff::{self, stack, AdError, Array, Linear, ParamStore, ReduceMode, Tape, Var};
use crate::synthdata::{DepthViewSet, PointCloud, Vec3};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot sample {m} of {n} points")]
    TooManySamples { m: usize, n: usize },
    #[error("k = {k} exceeds the {n} available points")]
    TooManyNeighbors { k: usize, n: usize },
    #[error("invalid hierarchy: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy max-min subset: `start` first, then repeatedly the unselected
/// point farthest from the selected set (lowest index on ties). Returns
/// indices in selection order.
pub fn farthest_point_sample(coords: &[Vec3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(EncoderError::TooManySamples { m, n });
    }
    if start >= n {
        return Err(EncoderError::Config(format!("FPS start {start} out of range for {n} points")));
    }
    let mut selected = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(m);
    let mut current = start;
    for _ in 0..m {
        order.push(current);
        selected[current] = true;
        let c = coords[current];
        let mut best = None::<(usize, f64)>;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(coords[i], c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if best.is_none_or(|(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        match best {
            Some((i, _)) => current = i,
            None => break,
        }
    }
    Ok(order)
}

/// Point farthest from the centroid (lowest index on ties); makes FPS a
/// function of geometry alone.
pub fn canonical_start(coords: &[Vec3]) -> usize {
    let n = coords.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in coords {
        for d in 0..3 {
            c[d] += p[d] / n;
        }
    }
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, &p) in coords.iter().enumerate() {
        let d = dist2(p, c);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// `k` nearest data points per query, ascending distance, lowest index on
/// ties. A query coinciding with a data point includes it. Flattened
/// `M × k`.
pub fn knn_indices(coords: &[Vec3], queries: &[Vec3], k: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(EncoderError::TooManyNeighbors { k, n });
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
    for &q in queries {
        scratch.clear();
        scratch.extend(coords.iter().enumerate().map(|(i, &p)| (dist2(p, q), i)));
        if k < n {
            scratch.select_nth_unstable_by(k - 1, order);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(order);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Sizes of the multi-scale hierarchies.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyConfig {
    /// Scale count `L`.
    pub levels: usize,
    pub d_model: usize,
    /// View patch edge in pixels.
    pub patch: usize,
    /// Points kept by each SGP stage; strictly decreasing.
    pub n_q: Vec<usize>,
    pub k: usize,
    pub n_views: usize,
}

impl HierarchyConfig {
    /// Spatial extent of the view map after patch embedding and after each
    /// reduction: `[R/patch, ceil(./2), ...]`, `levels + 1` entries.
    pub fn view_extents(&self, resolution: usize) -> Vec<usize> {
        let mut e = vec![resolution / self.patch.max(1)];
        for _ in 0..self.levels {
            let last = *e.last().unwrap();
            e.push(last.div_ceil(2));
        }
        e
    }

    pub fn validate(&self, n_points: usize, resolution: usize) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.n_views == 0 {
            return bad("n_views must be positive".into());
        }
        if self.n_q.len() != self.levels {
            return bad(format!("n_q has {} entries for {} levels", self.n_q.len(), self.levels));
        }
        if self.n_q.windows(2).any(|w| w[1] >= w[0]) || self.n_q.contains(&0) {
            return bad(format!("n_q {:?} must be positive and strictly decreasing", self.n_q));
        }
        if self.n_q[0] > n_points {
            return bad(format!("n_q[0] = {} exceeds {n_points} points", self.n_q[0]));
        }
        let smallest_input = if self.levels > 1 { self.n_q[self.levels - 2] } else { n_points };
        if self.k == 0 || self.k > smallest_input.min(n_points) {
            return bad(format!(
                "k = {} must be in 1..={} (smallest SGP input)",
                self.k,
                smallest_input.min(n_points)
            ));
        }
        if self.patch == 0 || !resolution.is_multiple_of(self.patch) {
            return bad(format!("patch {} does not divide resolution {resolution}", self.patch));
        }
        let ext = self.view_extents(resolution);
        if ext[..self.levels].iter().any(|&e| e < 2) {
            return bad(format!(
                "view maps {:?} too small for {} reductions",
                &ext[..self.levels],
                self.levels
            ));
        }
        Ok(())
    }
}

/// One SGP stage's fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SgpStage {
    /// Selected centres, as indices into the stage input, in FPS order.
    pub centers: Vec<usize>,
    pub coords: Vec<Vec3>,
    /// `m × k` neighbour indices into the stage input.
    pub neighbors: Vec<usize>,
}

impl SgpStage {
    /// FPS to `m` centres (canonical start), then `k` neighbours of each
    /// centre among all stage inputs.
    pub fn plan(input: &[Vec3], m: usize, k: usize) -> Result<Self> {
        let centers = farthest_point_sample(input, m, canonical_start(input))?;
        let coords: Vec<Vec3> = centers.iter().map(|&i| input[i]).collect();
        let neighbors = knn_indices(input, &coords, k)?;
        Ok(Self {
            centers,
            coords,
            neighbors,
        })
    }
}

/// All weight-independent geometry of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGeometry {
    pub coords: Vec<Vec3>,
    /// `N_p × k` EdgeConv neighbourhoods.
    pub base_knn: Vec<usize>,
    pub stages: Vec<SgpStage>,
    pub k: usize,
}

impl PointGeometry {
    pub fn plan(pc: &PointCloud, cfg: &HierarchyConfig) -> Result<Self> {
        let base_knn = knn_indices(&pc.coords, &pc.coords, cfg.k)?;
        let mut stages = Vec::with_capacity(cfg.levels);
        let mut input = pc.coords.clone();
        for &m in &cfg.n_q {
            let stage = SgpStage::plan(&input, m, cfg.k)?;
            input = stage.coords.clone();
            stages.push(stage);
        }
        Ok(Self {
            coords: pc.coords.clone(),
            base_knn,
            stages,
            k: cfg.k,
        })
    }
}

/// Where the rows of a [`TokenMatrix`] come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenOrigin {
    /// Row-major flattened `h × w` view-pooled map at scale `level`.
    View { level: usize, h: usize, w: usize },
    /// SGP centres at scale `level`.
    Point { level: usize, coords: Vec<Vec3> },
}

/// `N × D` local features.
#[derive(Debug, Clone)]
pub struct TokenMatrix<'t> {
    pub tokens: Var<'t>,
    pub origin: TokenOrigin,
}

impl TokenMatrix<'_> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// EdgeConv: for point `i` and neighbour `j`, `[f_i, f_j - f_i]` through a
/// shared linear + ReLU, then max over `j`. `knn` is `N × k`.
///
/// With `W = [W1; W2]` split by input half, the pre-activation is
/// `f_i·(W1 − W2) + b + f_j·W2`. The first term does not depend on `j` and
/// ReLU is monotone, so the result is
/// `relu(f_i·(W1 − W2) + b + max_j f_j·W2)`.
pub fn edge_conv<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    feats: &Var<'t>,
    knn: &[usize],
    k: usize,
    layer: &Linear,
) -> Result<Var<'t>> {
    let (n, c) = (feats.shape()[0], feats.shape()[1]);
    if knn.len() != n * k || layer.fan_in != 2 * c {
        return Err(EncoderError::Ad(AdError::ShapeMismatch {
            op: "edge_conv",
            left: feats.shape(),
            right: vec![knn.len() / k.max(1), k, layer.fan_in],
        }));
    }
    let wt = tape.param(store, layer.weight).transpose()?;
    let w_self = wt.slice_cols(0, c)?.transpose()?;
    let w_nbr = wt.slice_cols(c, 2 * c)?.transpose()?;
    let centre = feats
        .matmul(&w_self.sub(&w_nbr)?)?
        .add_row(&tape.param(store, layer.bias))?;
    let neighbour = feats.matmul(&w_nbr)?;
    Ok(centre.add(&neighbour.gather_max(knn, k)?)?.relu())
}

/// Neighbour max-pool over a planned stage followed by linear + ReLU.
pub fn sgp_apply<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    feats: &Var<'t>,
    stage: &SgpStage,
    k: usize,
    layer: &Linear,
) -> Result<Var<'t>> {
    let grouped = feats.gather_max(&stage.neighbors, k)?;
    Ok(layer.forward_relu(tape, store, &grouped)?)
}

/// Plans and applies one SGP stage on `(coords, feats)`.
pub fn sgp_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    coords: &[Vec3],
    feats: &Var<'t>,
    m: usize,
    k: usize,
    layer: &Linear,
) -> Result<(Vec<Vec3>, Var<'t>)> {
    let stage = SgpStage::plan(coords, m, k)?;
    let out = sgp_apply(tape, store, feats, &stage, k, layer)?;
    Ok((stage.coords, out))
}

/// Non-overlapping `patch × patch` blocks of an `R × R` image as rows of a
/// `(R/patch)² × patch²` matrix (block-row-major).
pub fn patchify(image: &[f64], resolution: usize, patch: usize) -> Result<Array> {
    if patch == 0 || !resolution.is_multiple_of(patch) || image.len() != resolution * resolution {
        return Err(EncoderError::Config(format!(
            "patch {patch} does not tile a {resolution}×{resolution} image"
        )));
    }
    let g = resolution / patch;
    let mut data = Vec::with_capacity(image.len());
    for by in 0..g {
        for bx in 0..g {
            for y in 0..patch {
                let row = (by * patch + y) * resolution + bx * patch;
                data.extend_from_slice(&image[row..row + patch]);
            }
        }
    }
    Ok(Array::new(vec![g * g, patch * patch], data)?)
}

/// Patch embedding of every view: `[N_v, R/p, R/p, D]`.
pub fn patch_embed<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    views: &DepthViewSet,
    patch: usize,
    layer: &Linear,
) -> Result<Var<'t>> {
    let r = views.resolution;
    let mut rows = Vec::new();
    for img in &views.images {
        rows.extend(patchify(img, r, patch)?.into_data());
    }
    let g = r / patch;
    let nv = views.len();
    let x = tape.constant(Array::new(vec![nv * g * g, patch * patch], rows)?);
    let h = layer.forward_relu(tape, store, &x)?;
    Ok(h.reshape(&[nv, g, g, layer.fan_out])?)
}

/// 2×2 max-pool (ceil mode) then per-position linear + ReLU; width kept.
pub fn view_scale_reduce<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    map: &Var<'t>,
    layer: &Linear,
) -> Result<Var<'t>> {
    let s = map.shape();
    if s.len() != 4 || s[1] < 2 || s[2] < 2 {
        return Err(EncoderError::Config(format!("cannot reduce a view map of shape {s:?}")));
    }
    let pooled = map.max_pool2()?;
    let ps = pooled.shape();
    let flat = pooled.reshape(&[ps[0] * ps[1] * ps[2], ps[3]])?;
    let h = layer.forward_relu(tape, store, &flat)?;
    Ok(h.reshape(&[ps[0], ps[1], ps[2], layer.fan_out])?)
}

/// Elementwise max across equally shaped per-view maps.
pub fn view_pool<'t>(maps: &[Var<'t>]) -> Result<Var<'t>> {
    if maps.is_empty() {
        return Err(EncoderError::Config("view_pool needs at least one view".into()));
    }
    Ok(stack(maps)?.reduce(0, ReduceMode::Max)?)
}

/// View-branch weights, under `enc.view.*`.
#[derive(Debug, Clone)]
pub struct ViewEncoder {
    pub patch: Linear,
    pub reduce: Vec<Linear>,
    pub patch_size: usize,
}

impl ViewEncoder {
    pub fn new(store: &mut ParamStore, cfg: &HierarchyConfig, seed: u64) -> Result<Self> {
        let p2 = cfg.patch * cfg.patch;
        let patch = Linear::new(store, "enc.view.patch", p2, cfg.d_model, seed)?;
        let reduce = (0..cfg.levels)
            .map(|l| Linear::new(store, &format!("enc.view.reduce{}", l + 1), cfg.d_model, cfg.d_model, seed))
            .collect::<autodiff::Result<Vec<_>>>()?;
        Ok(Self {
            patch,
            reduce,
            patch_size: cfg.patch,
        })
    }
}

/// Point-branch weights, under `enc.point.*`.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub edge: Linear,
    pub sgp: Vec<Linear>,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, cfg: &HierarchyConfig, seed: u64) -> Result<Self> {
        let edge = Linear::new(store, "enc.point.edge", 6, cfg.d_model, seed)?;
        let sgp = (0..cfg.levels)
            .map(|l| Linear::new(store, &format!("enc.point.sgp{}", l + 1), cfg.d_model, cfg.d_model, seed))
            .collect::<autodiff::Result<Vec<_>>>()?;
        Ok(Self { edge, sgp })
    }
}

pub struct ViewHierarchy<'t> {
    /// Spatial max of the scale-1 pooled map, length `D`.
    pub global: Var<'t>,
    pub scales: Vec<TokenMatrix<'t>>,
}

pub struct PointHierarchy<'t> {
    /// Max-pool ⊕ mean-pool of the EdgeConv features, length `2D`.
    pub global: Var<'t>,
    pub base: Var<'t>,
    pub scales: Vec<TokenMatrix<'t>>,
}

pub fn build_view_hierarchy<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    views: &DepthViewSet,
    enc: &ViewEncoder,
) -> Result<ViewHierarchy<'t>> {
    let mut map = patch_embed(tape, store, views, enc.patch_size, &enc.patch)?;
    let mut scales = Vec::with_capacity(enc.reduce.len());
    for (l, layer) in enc.reduce.iter().enumerate() {
        map = view_scale_reduce(tape, store, &map, layer)?;
        let s = map.shape();
        let pooled = map.reduce(0, ReduceMode::Max)?;
        let tokens = pooled.reshape(&[s[1] * s[2], s[3]])?;
        scales.push(TokenMatrix {
            tokens,
            origin: TokenOrigin::View {
                level: l + 1,
                h: s[1],
                w: s[2],
            },
        });
    }
    let global = scales[0].tokens.reduce(0, ReduceMode::Max)?;
    Ok(ViewHierarchy { global, scales })
}

pub fn build_point_hierarchy<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    geom: &PointGeometry,
    enc: &PointEncoder,
) -> Result<PointHierarchy<'t>> {
    let n = geom.coords.len();
    let xyz = Array::new(vec![n, 3], geom.coords.iter().flatten().copied().collect())?;
    let x = tape.constant(xyz);
    let base = edge_conv(tape, store, &x, &geom.base_knn, geom.k, &enc.edge)?;
    let global = autodiff::concat(
        &[base.reduce(0, ReduceMode::Max)?, base.reduce(0, ReduceMode::Mean)?],
        0,
    )?;
    let mut feats = base;
    let mut scales = Vec::with_capacity(geom.stages.len());
    for (l, (stage, layer)) in geom.stages.iter().zip(&enc.sgp).enumerate() {
        feats = sgp_apply(tape, store, &feats, stage, geom.k, layer)?;
        scales.push(TokenMatrix {
            tokens: feats,
            origin: TokenOrigin::Point {
                level: l + 1,
                coords: stage.coords.clone(),
            },
        });
    }
    Ok(PointHierarchy {
        global,
        base,
        scales,
    })
}
