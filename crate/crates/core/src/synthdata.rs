//! Procedural shape corpus: parametric primitive surfaces, area-uniform
//! point sampling and orthographic depth-view rendering.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown shape kind `{0}`")]
    UnknownKind(String),
    #[error("class id {0} has no generator (only {NUM_KINDS} kinds)")]
    UnknownClass(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("cannot render an empty point cloud")]
    EmptyCloud,
    #[error("corpus cache: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const NUM_KINDS: usize = 8;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Camera elevation above the xy-plane.
pub const CAMERA_ELEVATION_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Capsule,
    Pyramid,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_KINDS] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Capsule,
        ShapeKind::Pyramid,
        ShapeKind::Cross,
    ];

    pub fn from_class(class_id: usize) -> Result<Self> {
        Self::ALL
            .get(class_id)
            .copied()
            .ok_or(DataError::UnknownClass(class_id))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Cross => "cross",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownKind(s.to_string()))
    }
}

/// Everything that determines one generated shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub kind: ShapeKind,
    /// Per-axis scale, each in `[0.7, 1.3]` when drawn by [`ShapeSpec::draw`].
    pub scale: Vec3,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub const SCALE_RANGE: (f64, f64) = (0.7, 1.3);

    /// Draws jitter for `class_id` from `seed`; same inputs, same spec.
    pub fn draw(class_id: usize, seed: u64, noise_sigma: f64) -> Result<Self> {
        let kind = ShapeKind::from_class(class_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shape.jitter"));
        let (lo, hi) = Self::SCALE_RANGE;
        let scale = [
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
        ];
        Ok(Self {
            class_id,
            kind,
            scale,
            noise_sigma,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Patch {
    /// Unit sphere, `z = 1 - 2v`, azimuth `2πu`.
    Sphere { radius: f64 },
    Rect { origin: Vec3, e1: Vec3, e2: Vec3 },
    Triangle { a: Vec3, b: Vec3, c: Vec3 },
    /// Disk in a plane `z = height` facing ±z.
    Disk { radius: f64, height: f64 },
    CylinderSide { radius: f64, z0: f64, z1: f64 },
    /// Lateral cone surface from a base circle at `z0` to an apex at `z1`.
    ConeSide { radius: f64, z0: f64, z1: f64 },
    Torus { major: f64, minor: f64 },
    /// Hemisphere centred at `(0, 0, center)` bulging toward `sign`.
    Cap { radius: f64, center: f64, sign: f64 },
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn lerp3(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, p: Vec3) -> Vec3 {
    [dot(m[0], p), dot(m[1], p), dot(m[2], p)]
}

/// Rotation about +z by `angle` radians.
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

impl Patch {
    fn map(&self, u: f64, v: f64) -> Vec3 {
        match *self {
            Patch::Sphere { radius } => {
                let z = 1.0 - 2.0 * v;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = TAU * u;
                [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
            }
            Patch::Rect { origin, e1, e2 } => add(
                origin,
                [
                    e1[0] * u + e2[0] * v,
                    e1[1] * u + e2[1] * v,
                    e1[2] * u + e2[2] * v,
                ],
            ),
            Patch::Triangle { a, b, c } => {
                let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
                [
                    a[0] + (b[0] - a[0]) * u + (c[0] - a[0]) * v,
                    a[1] + (b[1] - a[1]) * u + (c[1] - a[1]) * v,
                    a[2] + (b[2] - a[2]) * u + (c[2] - a[2]) * v,
                ]
            }
            Patch::Disk { radius, height } => {
                let r = radius * u.sqrt();
                let t = TAU * v;
                [r * t.cos(), r * t.sin(), height]
            }
            Patch::CylinderSide { radius, z0, z1 } => {
                let t = TAU * u;
                [radius * t.cos(), radius * t.sin(), z0 + (z1 - z0) * v]
            }
            Patch::ConeSide { radius, z0, z1 } => {
                // distance from apex grows like sqrt for uniform area
                let s = u.sqrt();
                let t = TAU * v;
                let apex = [0.0, 0.0, z1];
                let rim = [radius * t.cos(), radius * t.sin(), z0];
                lerp3(apex, rim, s)
            }
            Patch::Torus { major, minor } => {
                let (a, b) = (TAU * u, TAU * v);
                let ring = major + minor * b.cos();
                [ring * a.cos(), ring * a.sin(), minor * b.sin()]
            }
            Patch::Cap {
                radius,
                center,
                sign,
            } => {
                let z = v;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let t = TAU * u;
                [
                    radius * r * t.cos(),
                    radius * r * t.sin(),
                    center + sign * radius * z,
                ]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn strictly_contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] > self.lo[i] + 1e-12 && p[i] < self.hi[i] - 1e-12)
    }

    fn faces(&self) -> Vec<Patch> {
        let (lo, hi) = (self.lo, self.hi);
        let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let ex = [d[0], 0.0, 0.0];
        let ey = [0.0, d[1], 0.0];
        let ez = [0.0, 0.0, d[2]];
        vec![
            Patch::Rect { origin: lo, e1: ex, e2: ey },
            Patch::Rect { origin: [lo[0], lo[1], hi[2]], e1: ex, e2: ey },
            Patch::Rect { origin: lo, e1: ex, e2: ez },
            Patch::Rect { origin: [lo[0], hi[1], lo[2]], e1: ex, e2: ez },
            Patch::Rect { origin: lo, e1: ey, e2: ez },
            Patch::Rect { origin: [hi[0], lo[1], lo[2]], e1: ey, e2: ez },
        ]
    }
}

/// Parametric surface made of patches over `[0,1]²`, scaled per axis.
///
/// Each patch is cut into a `CELL_GRID²` grid of parameter cells whose
/// scaled areas form one cumulative table; sampling inverts that table and
/// then rejects within the chosen cell, so points are area-uniform on the
/// scaled surface.
#[derive(Debug, Clone)]
pub struct Surface {
    patches: Vec<(Patch, Option<usize>)>,
    solids: Vec<Aabb>,
    scale: Vec3,
    noise_sigma: f64,
    cells: Vec<Cell>,
    /// Running sum of cell areas; last entry is the total area.
    cumulative: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    patch: usize,
    u0: f64,
    v0: f64,
    peak: f64,
}

const CELL_GRID: usize = 32;
const FD_STEP: f64 = 1e-6;
const CELL_RETRIES: usize = 256;

impl Surface {
    fn new(patches: Vec<(Patch, Option<usize>)>, solids: Vec<Aabb>, scale: Vec3, noise: f64) -> Self {
        let mut s = Self {
            patches,
            solids,
            scale,
            noise_sigma: noise,
            cells: vec![],
            cumulative: vec![],
        };
        let w = 1.0 / CELL_GRID as f64;
        let mut total = 0.0;
        for i in 0..s.patches.len() {
            for a in 0..CELL_GRID {
                for b in 0..CELL_GRID {
                    let (u0, v0) = (a as f64 * w, b as f64 * w);
                    let mut area = 0.0;
                    let mut peak: f64 = 0.0;
                    for (du, dv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                        let (u, v) = (u0 + du * w, v0 + dv * w);
                        let j = s.density(i, u, v);
                        peak = peak.max(j);
                        if !s.hidden(i, u, v) {
                            area += 0.25 * j * w * w;
                        }
                    }
                    if area <= 0.0 {
                        continue;
                    }
                    total += area;
                    s.cells.push(Cell {
                        patch: i,
                        u0,
                        v0,
                        peak: peak * 1.25,
                    });
                    s.cumulative.push(total);
                }
            }
        }
        s
    }

    /// Point on patch `i` before noise.
    pub fn point(&self, i: usize, u: f64, v: f64) -> Vec3 {
        let p = self.patches[i].0.map(u, v);
        [p[0] * self.scale[0], p[1] * self.scale[1], p[2] * self.scale[2]]
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn area(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Area element `|∂p/∂u × ∂p/∂v|` by central differences.
    fn density(&self, i: usize, u: f64, v: f64) -> f64 {
        let h = FD_STEP;
        let (u0, u1) = ((u - h).max(0.0), (u + h).min(1.0));
        let (v0, v1) = ((v - h).max(0.0), (v + h).min(1.0));
        let pu0 = self.point(i, u0, v);
        let pu1 = self.point(i, u1, v);
        let pv0 = self.point(i, u, v0);
        let pv1 = self.point(i, u, v1);
        let du = [
            (pu1[0] - pu0[0]) / (u1 - u0),
            (pu1[1] - pu0[1]) / (u1 - u0),
            (pu1[2] - pu0[2]) / (u1 - u0),
        ];
        let dv = [
            (pv1[0] - pv0[0]) / (v1 - v0),
            (pv1[1] - pv0[1]) / (v1 - v0),
            (pv1[2] - pv0[2]) / (v1 - v0),
        ];
        norm(cross3(du, dv))
    }

    fn hidden(&self, i: usize, u: f64, v: f64) -> bool {
        let Some(own) = self.patches[i].1 else {
            return false;
        };
        let p = self.patches[i].0.map(u, v);
        self.solids
            .iter()
            .enumerate()
            .any(|(k, b)| k != own && b.strictly_contains(p))
    }

    /// Point in the cell owning area quantile `q ∈ [0, 1)`.
    fn sample_at<R: Rng>(&self, q: f64, rng: &mut R) -> Vec3 {
        let target = q * self.area();
        let k = self
            .cumulative
            .partition_point(|&c| c <= target)
            .min(self.cells.len() - 1);
        let cell = self.cells[k];
        let w = 1.0 / CELL_GRID as f64;
        let mut fallback = None;
        for _ in 0..CELL_RETRIES {
            let u = cell.u0 + w * rng.random::<f64>();
            let v = cell.v0 + w * rng.random::<f64>();
            if self.hidden(cell.patch, u, v) {
                continue;
            }
            fallback.get_or_insert((u, v));
            if rng.random::<f64>() * cell.peak <= self.density(cell.patch, u, v) {
                return self.point(cell.patch, u, v);
            }
        }
        let (u, v) = fallback.unwrap_or((cell.u0 + 0.5 * w, cell.v0 + 0.5 * w));
        self.point(cell.patch, u, v)
    }

    /// Draws one point, area-uniform, before noise.
    pub fn sample_clean<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let q = rng.random::<f64>();
        self.sample_at(q, rng)
    }

    /// Draws `n` points with jittered systematic sampling over the area
    /// table (one point per `1/n` slice of area), then shuffles them.
    pub fn sample_stratified<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        let mut pts: Vec<Vec3> = (0..n)
            .map(|k| {
                let q = (k as f64 + rng.random::<f64>()) / n as f64;
                self.sample_at(q.min(1.0 - f64::EPSILON), rng)
            })
            .collect();
        pts.shuffle(rng);
        pts
    }
}

/// Builds the parametric surface for a `ShapeSpec` (jitter applied).
pub fn generate_shape(spec: &ShapeSpec) -> Result<Surface> {
    if ShapeKind::from_class(spec.class_id)? != spec.kind {
        return Err(DataError::Invalid(format!(
            "class {} does not match kind {}",
            spec.class_id, spec.kind
        )));
    }
    let free = |ps: Vec<Patch>| ps.into_iter().map(|p| (p, None)).collect::<Vec<_>>();
    let (patches, solids) = match spec.kind {
        ShapeKind::Sphere => (free(vec![Patch::Sphere { radius: 1.0 }]), vec![]),
        ShapeKind::Box => {
            let b = Aabb {
                lo: [-0.5; 3],
                hi: [0.5; 3],
            };
            (free(b.faces()), vec![])
        }
        ShapeKind::Cylinder => (
            free(vec![
                Patch::CylinderSide { radius: 0.5, z0: -0.6, z1: 0.6 },
                Patch::Disk { radius: 0.5, height: -0.6 },
                Patch::Disk { radius: 0.5, height: 0.6 },
            ]),
            vec![],
        ),
        ShapeKind::Cone => (
            free(vec![
                Patch::ConeSide { radius: 0.6, z0: -0.5, z1: 0.7 },
                Patch::Disk { radius: 0.6, height: -0.5 },
            ]),
            vec![],
        ),
        ShapeKind::Torus => (
            free(vec![Patch::Torus { major: 0.6, minor: 0.25 }]),
            vec![],
        ),
        ShapeKind::Capsule => (
            free(vec![
                Patch::CylinderSide { radius: 0.35, z0: -0.4, z1: 0.4 },
                Patch::Cap { radius: 0.35, center: 0.4, sign: 1.0 },
                Patch::Cap { radius: 0.35, center: -0.4, sign: -1.0 },
            ]),
            vec![],
        ),
        ShapeKind::Pyramid => {
            let h = 0.6;
            let (zb, apex) = (-0.4, [0.0, 0.0, 0.7]);
            let corners = [[-h, -h, zb], [h, -h, zb], [h, h, zb], [-h, h, zb]];
            let mut ps: Vec<Patch> = (0..4)
                .map(|i| Patch::Triangle {
                    a: apex,
                    b: corners[i],
                    c: corners[(i + 1) % 4],
                })
                .collect();
            ps.push(Patch::Rect {
                origin: corners[0],
                e1: [2.0 * h, 0.0, 0.0],
                e2: [0.0, 2.0 * h, 0.0],
            });
            (free(ps), vec![])
        }
        ShapeKind::Cross => {
            let (l, t) = (0.7, 0.15);
            let bars = vec![
                Aabb { lo: [-l, -t, -t], hi: [l, t, t] },
                Aabb { lo: [-t, -l, -t], hi: [t, l, t] },
                Aabb { lo: [-t, -t, -l], hi: [t, t, l] },
            ];
            let patches = bars
                .iter()
                .enumerate()
                .flat_map(|(k, b)| b.faces().into_iter().map(move |p| (p, Some(k))))
                .collect();
            (patches, bars)
        }
    };
    Ok(Surface::new(patches, solids, spec.scale, spec.noise_sigma))
}

/// `N_p × 3` coordinates, centred on the centroid and scaled to unit max norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Vec3>,
}

impl PointCloud {
    /// Centres on the centroid and divides by the largest norm.
    pub fn normalized(coords: Vec<Vec3>) -> Self {
        let n = coords.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &coords {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.iter_mut().for_each(|v| *v /= n);
        let centred: Vec<Vec3> = coords
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let scale = centred.iter().map(|&p| norm(p)).fold(0.0, f64::max);
        let scale = if scale > 0.0 { scale } else { 1.0 };
        Self {
            coords: centred
                .into_iter()
                .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.coords.len().max(1) as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    pub fn max_norm(&self) -> f64 {
        self.coords.iter().map(|&p| norm(p)).fold(0.0, f64::max)
    }

    pub fn rotated(&self, m: &Mat3) -> Self {
        Self {
            coords: self.coords.iter().map(|&p| mat_vec(m, p)).collect(),
        }
    }

    /// Reorders points by `order[i]` = source index of new point `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

/// Samples `n` area-uniform points (plus coordinate noise) and normalizes.
pub fn sample_surface_points(surface: &Surface, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 4 {
        return Err(DataError::Invalid(format!("need at least 4 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shape.points"));
    let noise = Normal::new(0.0, surface.noise_sigma.max(0.0))
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let pts = surface
        .sample_stratified(n, &mut rng)
        .into_iter()
        .map(|p| {
            if surface.noise_sigma > 0.0 {
                [
                    p[0] + noise.sample(&mut rng),
                    p[1] + noise.sample(&mut rng),
                    p[2] + noise.sample(&mut rng),
                ]
            } else {
                p
            }
        })
        .collect();
    Ok(PointCloud::normalized(pts))
}

/// `N_v` square depth images; 0 is background, hits lie in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthViewSet {
    pub resolution: usize,
    pub azimuths: Vec<f64>,
    /// Row-major `R × R` images, row 0 at the top.
    pub images: Vec<Vec<f64>>,
}

impl DepthViewSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            resolution: self.resolution,
            azimuths: order.iter().map(|&i| self.azimuths[i]).collect(),
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

/// Camera basis `(right, up, toward-camera)` at azimuth `az`.
fn camera_basis(az: f64) -> (Vec3, Vec3, Vec3) {
    let el = CAMERA_ELEVATION_DEG.to_radians();
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    let right = [-sa, ca, 0.0];
    let up = [-se * ca, -se * sa, ce];
    let toward = [ce * ca, ce * sa, se];
    (right, up, toward)
}

/// Orthographic z-buffered point-splat rendering from `n_views` cameras at
/// equally spaced azimuths and fixed elevation. Depth is `(p·d + 2) / 3`
/// for unit-ball input, so nearer points are brighter and every hit is in
/// `[1/3, 1]`.
pub fn render_depth_views(
    pc: &PointCloud,
    n_views: usize,
    resolution: usize,
    rotation: Option<&Mat3>,
) -> Result<DepthViewSet> {
    if pc.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    if resolution < 8 {
        return Err(DataError::Invalid(format!(
            "resolution must be at least 8, got {resolution}"
        )));
    }
    if n_views == 0 {
        return Err(DataError::Invalid("need at least one view".into()));
    }
    let pts: Vec<Vec3> = match rotation {
        Some(m) => pc.coords.iter().map(|&p| mat_vec(m, p)).collect(),
        None => pc.coords.clone(),
    };
    let r = resolution as f64;
    let pixel = |x: f64| -> usize { (((x + 1.0) * 0.5 * r).floor().max(0.0) as usize).min(resolution - 1) };
    let mut azimuths = Vec::with_capacity(n_views);
    let mut images = Vec::with_capacity(n_views);
    for j in 0..n_views {
        let az = TAU * j as f64 / n_views as f64;
        let (right, up, toward) = camera_basis(az);
        let mut img = vec![0.0; resolution * resolution];
        for &p in &pts {
            let col = pixel(dot(p, right));
            let row = pixel(-dot(p, up));
            let depth = ((dot(p, toward) + 2.0) / 3.0).clamp(f64::MIN_POSITIVE, 1.0);
            let cell = &mut img[row * resolution + col];
            if depth > *cell {
                *cell = depth;
            }
        }
        azimuths.push(az);
        images.push(img);
    }
    Ok(DepthViewSet {
        resolution,
        azimuths,
        images,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub points: PointCloud,
    pub views: DepthViewSet,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub n_points: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: NUM_KINDS,
            per_class_train: 25,
            per_class_test: 12,
            n_points: 256,
            n_views: 6,
            resolution: 16,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates sample `index` of a split; a pure function of its arguments.
pub fn make_sample(cfg: &DatasetConfig, split: &str, index: usize) -> Result<Sample> {
    let label = index % cfg.classes;
    let seed = derive_seed(cfg.seed, &format!("{split}/{index}"));
    let spec = ShapeSpec::draw(label, seed, cfg.noise_sigma)?;
    let surface = generate_shape(&spec)?;
    let points = sample_surface_points(&surface, cfg.n_points, seed)?;
    let views = render_depth_views(&points, cfg.n_views, cfg.resolution, None)?;
    Ok(Sample {
        points,
        views,
        label,
    })
}

/// Train/test corpus; labels cycle through the classes so each split is
/// class-balanced.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Corpus> {
    if cfg.classes == 0 || cfg.classes > NUM_KINDS {
        return Err(DataError::Invalid(format!(
            "classes must be in 1..={NUM_KINDS}, got {}",
            cfg.classes
        )));
    }
    if cfg.per_class_train == 0 || cfg.per_class_test == 0 {
        return Err(DataError::Invalid("per-class counts must be at least 1".into()));
    }
    let split = |name: &str, per_class: usize| {
        (0..per_class * cfg.classes)
            .map(|i| make_sample(cfg, name, i))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Corpus {
        train: split("train", cfg.per_class_train)?,
        test: split("test", cfg.per_class_test)?,
    })
}

/// Copies `samples` with a random azimuthal rotation per sample applied to
/// both the cloud and the rendered views.
pub fn randomly_rotated(samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rotation"));
    samples
        .iter()
        .map(|s| {
            let angle = rng.random_range(0.0..TAU);
            let m = rotation_z(angle);
            let points = s.points.rotated(&m);
            let views = render_depth_views(&points, s.views.len(), s.views.resolution, None)?;
            Ok(Sample {
                points,
                views,
                label: s.label,
            })
        })
        .collect()
}

const CACHE_MAGIC: &[u8; 4] = b"PVFC";
const CACHE_VERSION: u32 = 1;

/// Writes one split. Layout (little-endian):
/// `"PVFC"`, u32 version, u32 samples, u32 points, u32 views, u32 resolution;
/// then per sample `points×3` f32 coordinates followed by `views×R×R` f32
/// depths; then one u8 label per sample.
pub fn write_split<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| DataError::Format("cannot write an empty split".into()))?;
    let (np, nv, r) = (first.points.len(), first.views.len(), first.views.resolution);
    w.write_all(CACHE_MAGIC)?;
    for v in [CACHE_VERSION, samples.len() as u32, np as u32, nv as u32, r as u32] {
        w.write_u32::<LittleEndian>(v)?;
    }
    for s in samples {
        if s.points.len() != np || s.views.len() != nv || s.views.resolution != r {
            return Err(DataError::Format("samples disagree on extents".into()));
        }
        for p in &s.points.coords {
            for &c in p {
                w.write_f32::<LittleEndian>(c as f32)?;
            }
        }
        for img in &s.views.images {
            for &d in img {
                w.write_f32::<LittleEndian>(d as f32)?;
            }
        }
    }
    for s in samples {
        let label = u8::try_from(s.label)
            .map_err(|_| DataError::Format(format!("label {} does not fit a byte", s.label)))?;
        w.write_u8(label)?;
    }
    Ok(())
}

pub fn read_split<R: Read>(mut r: R) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let np = r.read_u32::<LittleEndian>()? as usize;
    let nv = r.read_u32::<LittleEndian>()? as usize;
    let res = r.read_u32::<LittleEndian>()? as usize;
    let azimuths: Vec<f64> = (0..nv).map(|j| TAU * j as f64 / nv as f64).collect();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut coords = Vec::with_capacity(np);
        for _ in 0..np {
            let mut p = [0.0; 3];
            for c in &mut p {
                *c = r.read_f32::<LittleEndian>()? as f64;
            }
            coords.push(p);
        }
        let mut images = Vec::with_capacity(nv);
        for _ in 0..nv {
            let mut img = vec![0.0; res * res];
            for d in &mut img {
                *d = r.read_f32::<LittleEndian>()? as f64;
            }
            images.push(img);
        }
        samples.push(Sample {
            points: PointCloud { coords },
            views: DepthViewSet {
                resolution: res,
                azimuths: azimuths.clone(),
                images,
            },
            label: 0,
        });
    }
    for s in &mut samples {
        s.label = r.read_u8()? as usize;
    }
    Ok(samples)
}

pub fn save_split(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(f);
    write_split(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path)?;
    read_split(io::BufReader::new(f))
}
