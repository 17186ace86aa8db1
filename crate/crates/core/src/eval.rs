//! Classification metrics, descriptor retrieval and gate export.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tape;
use crate::latformer::{predict_batch, Model, ModelError, PreparedSample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no relevant item in the gallery")]
    NoRelevant,
    #[error("every one of the {0} queries has no relevant gallery item")]
    AllSkipped(usize),
    #[error("descriptor width mismatch: {0} vs {1}")]
    Width(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn overall_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class recall over the classes present in `truth`.
pub fn mean_class_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    let mut total = vec![0usize; classes];
    let mut hit = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= classes {
            return Err(EvalError::LabelOutOfRange { label: t, classes });
        }
        total[t] += 1;
        hit[t] += (p == t) as usize;
    }
    let recalls: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &h)| h as f64 / n as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `n/d + a/b` in lowest terms, `None` on overflow.
fn add_ratio((n, d): (u128, u128), a: u128, b: u128) -> Option<(u128, u128)> {
    let l = d.checked_mul(b / gcd(d, b))?;
    let num = n.checked_mul(l / d)?.checked_add(a.checked_mul(l / b)?)?;
    let g = gcd(num, l);
    Some((num / g, l / g))
}

/// Average precision of a ranked relevance list: mean over relevant ranks
/// `r` of `hits(≤ r) / r`. Accumulated as an exact fraction while it fits,
/// so short lists are correctly rounded.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut exact = Some((0u128, 1u128));
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
            exact = exact.and_then(|f| add_ratio(f, hits as u128, (i + 1) as u128));
        }
    }
    if hits == 0 {
        return Err(EvalError::NoRelevant);
    }
    const EXACT_F64: u128 = 1 << 53;
    if let Some((n, d)) = exact.and_then(|(n, d)| Some((n, d.checked_mul(hits as u128)?))) {
        let g = gcd(n, d);
        let (n, d) = (n / g, d / g);
        if n <= EXACT_F64 && d <= EXACT_F64 {
            return Ok(n as f64 / d as f64);
        }
    }
    Ok(sum / hits as f64)
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gallery indices by descending cosine similarity to `query`, lowest
/// index first on ties, with `exclude` left out.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>], exclude: Option<usize>) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, g)| (cosine_similarity(query, g), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Rankings of every query against a gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query_labels: Vec<usize>,
    pub gallery_labels: Vec<usize>,
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalRun {
    pub fn new(
        queries: &[Vec<f64>],
        query_labels: &[usize],
        gallery: &[Vec<f64>],
        gallery_labels: &[usize],
    ) -> Result<Self> {
        Self::build(queries, query_labels, gallery, gallery_labels, false)
    }

    /// The set queried against itself; each query's own entry is excluded.
    pub fn leave_one_out(descriptors: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        Self::build(descriptors, labels, descriptors, labels, true)
    }

    fn build(
        queries: &[Vec<f64>],
        query_labels: &[usize],
        gallery: &[Vec<f64>],
        gallery_labels: &[usize],
        exclude_self: bool,
    ) -> Result<Self> {
        if queries.is_empty() || gallery.is_empty() {
            return Err(EvalError::Empty);
        }
        if queries.len() != query_labels.len() {
            return Err(EvalError::LengthMismatch(queries.len(), query_labels.len()));
        }
        if gallery.len() != gallery_labels.len() {
            return Err(EvalError::LengthMismatch(gallery.len(), gallery_labels.len()));
        }
        let width = gallery[0].len();
        if let Some(bad) = queries.iter().chain(gallery).find(|d| d.len() != width) {
            return Err(EvalError::Width(bad.len(), width));
        }
        let rankings = queries
            .iter()
            .enumerate()
            .map(|(q, d)| rank_gallery(d, gallery, exclude_self.then_some(q)))
            .collect();
        Ok(Self {
            query_labels: query_labels.to_vec(),
            gallery_labels: gallery_labels.to_vec(),
            rankings,
        })
    }

    pub fn relevance(&self, query: usize) -> Vec<bool> {
        let label = self.query_labels[query];
        self.rankings[query]
            .iter()
            .map(|&g| self.gallery_labels[g] == label)
            .collect()
    }

    /// CSV `query,rank,gallery,relevant`, one row per ranked item.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query,rank,gallery,relevant\n");
        for q in 0..self.rankings.len() {
            for (r, (&g, rel)) in self.rankings[q].iter().zip(self.relevance(q)).enumerate() {
                let _ = writeln!(out, "{q},{},{g},{}", r + 1, rel as u8);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub evaluated: usize,
    /// Queries with no relevant gallery item.
    pub skipped: Vec<usize>,
}

/// Mean AP over queries with at least one relevant gallery item.
pub fn retrieval_map(run: &RetrievalRun) -> Result<MapReport> {
    if run.rankings.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    for q in 0..run.rankings.len() {
        match average_precision(&run.relevance(q)) {
            Ok(ap) => {
                sum += ap;
                evaluated += 1;
            }
            Err(EvalError::NoRelevant) => skipped.push(q),
            Err(e) => return Err(e),
        }
    }
    if evaluated == 0 {
        return Err(EvalError::AllSkipped(skipped.len()));
    }
    Ok(MapReport {
        map: sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// One row of an experiment metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub strategy: String,
    pub seed: u64,
    pub oa: f64,
    pub macc: f64,
    pub map: f64,
}

/// CSV `strategy,seed,oa,macc,map`, sorted by `(strategy, seed)`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.seed.cmp(&b.seed)));
    let mut out = String::from("strategy,seed,oa,macc,map\n");
    for r in sorted {
        let _ = writeln!(out, "{},{},{},{},{}", r.strategy, r.seed, r.oa, r.macc, r.map);
    }
    out
}

/// Classification and retrieval metrics of a model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub oa: f64,
    pub macc: f64,
    /// Leave-one-out mAP over retrieval codes; `NaN` when every query is skipped.
    pub map: f64,
    pub map_skipped: usize,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub codes: Vec<Vec<f64>>,
}

pub fn evaluate_model(model: &Model, samples: &[PreparedSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let preds = predict_batch(model, samples)?;
    let predicted: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let codes: Vec<Vec<f64>> = preds.into_iter().map(|p| p.code).collect();
    let run = RetrievalRun::leave_one_out(&codes, &truth)?;
    let (map, map_skipped) = match retrieval_map(&run) {
        Ok(r) => (r.map, r.skipped.len()),
        Err(EvalError::AllSkipped(n)) => (f64::NAN, n),
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        oa: overall_accuracy(&predicted, &truth)?,
        macc: mean_class_accuracy(&predicted, &truth, model.cfg.classes)?,
        map,
        map_skipped,
        predicted,
        truth,
        codes,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn matrix_csv(alpha: &crate::autodiff::Array) -> String {
    let mut out = String::new();
    for r in 0..alpha.rows() {
        let row: Vec<String> = alpha.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes every gate matrix of one forward pass under `dir`:
/// `pair{i}_V{m}_P{k}_{point_query,view_query}_head{h}.csv` (rows are query
/// tokens, columns key tokens) plus `view_tokens_V{m}.csv` (view-pooled token →
/// grid row, col) and `point_tokens_P{k}.csv` (token → x, y, z). Returns the
/// paths written, in order.
pub fn export_gates(model: &Model, sample: &PreparedSample, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let tape = Tape::new();
    let out = model.forward(&tape, &sample.geometry, &sample.views)?;
    let extents = model.cfg.hierarchy.view_extents(sample.views.resolution);
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, &text)?;
        written.push(path);
        Ok(())
    };
    for (i, sg) in out.gates.iter().enumerate() {
        let (m, k) = sg.pair;
        for (direction, gates) in [("point_query", &sg.point_query), ("view_query", &sg.view_query)] {
            for (h, g) in gates.iter().enumerate() {
                emit(format!("pair{i}_V{m}_P{k}_{direction}_head{h}.csv"), matrix_csv(&g.alpha))?;
            }
        }
    }
    let mut views: Vec<usize> = out.gates.iter().map(|g| g.pair.0).collect();
    views.sort_unstable();
    views.dedup();
    for m in views {
        let w = extents[m];
        let mut text = String::from("token,row,col\n");
        for t in 0..w * w {
            let _ = writeln!(text, "{t},{},{}", t / w, t % w);
        }
        emit(format!("view_tokens_V{m}.csv"), text)?;
    }
    let mut points: Vec<usize> = out.gates.iter().map(|g| g.pair.1).collect();
    points.sort_unstable();
    points.dedup();
    for k in points {
        let mut text = String::from("token,x,y,z\n");
        for (t, p) in sample.geometry.stages[k - 1].coords.iter().enumerate() {
            let _ = writeln!(text, "{t},{},{},{}", p[0], p[1], p[2]);
        }
        emit(format!("point_tokens_P{k}.csv"), text)?;
    }
    Ok(written)
}
