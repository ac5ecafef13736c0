//! Training losses and their time-dependent weighting: supervised
//! cross-entropy on labeled pixels, bidirectional cross-pseudo-supervision,
//! the consistency term with its coral/cosine ablation switch, and the
//! Gaussian ramp-up for the unsupervised weights.

use crate::coral::{self, FeatureMatrix};
use crate::numerics::{cross_entropy_rows, softmax_rows, Matrix};
use crate::{Error, Result};

/// Base weights and schedule state for the two unsupervised loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Base weight for the cross-pseudo-supervision term.
    pub lambda_c: f64,
    /// Base weight for the consistency term.
    pub lambda_d: f64,
    /// Ramp ceiling scale.
    pub beta: f64,
    /// Current iteration.
    pub t: usize,
    /// Total iterations.
    pub t_max: usize,
}

impl LossWeights {
    pub fn new(lambda_c: f64, lambda_d: f64, beta: f64, t: usize, t_max: usize) -> Result<Self> {
        if lambda_c < 0.0 || lambda_d < 0.0 || beta <= 0.0 || t_max == 0 {
            return Err(Error::InvalidArg(
                "loss weights require lambda >= 0, beta > 0, t_max >= 1".into(),
            ));
        }
        if lambda_c > beta || lambda_d > beta {
            return Err(Error::InvalidArg(
                "base lambdas must not exceed the ramp ceiling beta".into(),
            ));
        }
        Ok(Self {
            lambda_c,
            lambda_d,
            beta,
            t,
            t_max,
        })
    }
}

/// Gaussian ramp-up factor: `beta * exp(-5 (1 - t/t_max)^2)`, scaled onto the
/// two base weights. `t` past `t_max` clamps to `t_max`.
pub fn rampup_weight(w: &LossWeights) -> (f64, f64) {
    let t = w.t.min(w.t_max) as f64;
    let frac = 1.0 - t / w.t_max as f64;
    let factor = w.beta * (-5.0 * frac * frac).exp();
    (w.lambda_c * factor, w.lambda_d * factor)
}

/// Total objective: `sup + lambda_c * cps + lambda_d * consist` with the
/// lambdas ramped by schedule state.
pub fn total_loss(sup: f64, cps: f64, consist: f64, w: &LossWeights) -> f64 {
    let (lc, ld) = rampup_weight(w);
    sup + lc * cps + ld * consist
}

/// One sample's per-pixel predictions from both branches, with pseudo-labels
/// derived at construction and optional ground truth.
#[derive(Debug, Clone)]
pub struct PixelBatch {
    /// Per-pixel class probabilities from the main branch (S x C).
    pub p1: Matrix,
    /// Per-pixel class probabilities from the auxiliary branch (S x C).
    pub p2: Matrix,
    /// Ground-truth labels, present only for labeled samples.
    pub y_star: Option<Vec<usize>>,
    /// Argmax pseudo-labels of `p1` (ties break to the lowest class index).
    pub y1: Vec<usize>,
    /// Argmax pseudo-labels of `p2`.
    pub y2: Vec<usize>,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = c;
            best_v = v;
        }
    }
    best
}

impl PixelBatch {
    pub fn new(p1: Matrix, p2: Matrix, y_star: Option<Vec<usize>>) -> Result<Self> {
        if p1.rows() != p2.rows() || p1.cols() != p2.cols() {
            return Err(Error::ShapeMismatch(format!(
                "p1 is {}x{}, p2 is {}x{}",
                p1.rows(),
                p1.cols(),
                p2.rows(),
                p2.cols()
            )));
        }
        if p1.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(y) = &y_star {
            if y.len() != p1.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} pixels",
                    y.len(),
                    p1.rows()
                )));
            }
            if y.iter().any(|&c| c >= p1.cols()) {
                return Err(Error::InvalidArg("label out of class range".into()));
            }
        }
        let y1 = (0..p1.rows()).map(|r| argmax_row(p1.row(r))).collect();
        let y2 = (0..p2.rows()).map(|r| argmax_row(p2.row(r))).collect();
        Ok(Self {
            p1,
            p2,
            y_star,
            y1,
            y2,
        })
    }

    pub fn pixels(&self) -> usize {
        self.p1.rows()
    }
}

/// Per-pixel `-ln(q[label] + eps)` averaged over the batch; the shared kernel
/// for both supervision losses. Public so the trainer can evaluate them with
/// explicitly frozen label vectors.
pub fn label_ce(p: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total -= (p.get(r, y) + crate::numerics::LOG_EPS).ln();
    }
    total / p.rows() as f64
}

/// Supervised loss on one labeled sample: mean over pixels of
/// `CE(onehot(y*), p1) + CE(onehot(y*), p2)`. Averaging over the labeled set
/// is the caller's job.
pub fn supervised_loss(batch: &PixelBatch) -> Result<f64> {
    let y = batch.y_star.as_ref().ok_or(Error::MissingLabels)?;
    Ok(label_ce(&batch.p1, y) + label_ce(&batch.p2, y))
}

/// Bidirectional cross-pseudo-supervision: each branch trains on the other's
/// argmax labels, which are treated as constants.
pub fn cps_loss(batch: &PixelBatch) -> f64 {
    label_ce(&batch.p1, &batch.y2) + label_ce(&batch.p2, &batch.y1)
}

/// Similarity measure used by the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// CORAL distance on second-order statistics (rows softmax the negated
    /// distances).
    Coral,
    /// Cosine similarity of unit-normalized embeddings (rows softmax the raw
    /// similarities).
    Cosine,
}

impl std::str::FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coral" => Ok(Self::Coral),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArg(format!(
                "unknown similarity '{other}' (expected coral or cosine)"
            ))),
        }
    }
}

/// Row r, column k holds `cos(unlabeled[r], anchors[k])`; zero-norm vectors
/// contribute zero similarity.
pub fn cosine_similarity_matrix(
    z_unl: &FeatureMatrix,
    z_anc: &FeatureMatrix,
) -> Result<Matrix> {
    if z_unl.dim() != z_anc.dim() {
        return Err(Error::DimMismatch(format!(
            "feature dims {} vs {}",
            z_unl.dim(),
            z_anc.dim()
        )));
    }
    let mut out = Matrix::zeros(z_unl.count(), z_anc.count());
    for r in 0..z_unl.count() {
        let u = z_unl.row(r);
        let nu = norm(u);
        for k in 0..z_anc.count() {
            let a = z_anc.row(k);
            let na = norm(a);
            let sim = if nu < 1e-12 || na < 1e-12 {
                0.0
            } else {
                dot(u, a) / (nu * na)
            };
            out.set(r, k, sim);
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Consistency term with the ablation switch: both branches' similarity
/// matrices against the same anchors are row-softmaxed into distributions and
/// compared with cross-entropy.
pub fn consistency_term(
    z_main: &FeatureMatrix,
    z_aux: &FeatureMatrix,
    anchors: &FeatureMatrix,
    kind: SimilarityKind,
) -> Result<f64> {
    match kind {
        SimilarityKind::Coral => {
            let corr_mp = coral::correlation_matrix(z_main, anchors)?;
            let corr_ap = coral::correlation_matrix(z_aux, anchors)?;
            coral::consistency_loss(&corr_mp, &corr_ap)
        }
        SimilarityKind::Cosine => {
            let sim_m = cosine_similarity_matrix(z_main, anchors)?;
            let sim_a = cosine_similarity_matrix(z_aux, anchors)?;
            let a = softmax_rows(&sim_m);
            let b = softmax_rows(&sim_a);
            cross_entropy_rows(&a, &b)
        }
    }
}
