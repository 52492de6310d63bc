//! Layout prediction: a compact sequence encoder emits, per mentioned
//! object, a K-component Gaussian mixture over its center coordinate.
//! Training combines the absolute NLL objective with a relative hinge
//! penalty ordering mixture means of related objects.

mod checkpoint;
mod encoder;
mod layout;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{EncoderConfig, PredictorParams};
pub use layout::{
    load_layout_file, region_mask, sample_layout, save_layout_file, Layout, LayoutObject,
    RegionShape, SampleMode,
};
pub use train::{train, TrainHyper, TrainOutcome};

use crate::scene_dsl::{RelationKind, SceneDescription};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variances are floored at this value; see `GmmParams::vars`.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("unknown token \"{0}\"")]
    Vocab(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mixture over one object's center; produced by the encoder head.
/// Means are sigmoid-squashed into [0,1]², covariances are diagonal
/// `floor + exp(logvar)`, weights are softmax-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub means: Vec<(f64, f64)>,
    pub vars: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Index of the largest-weight component (first on ties).
    pub fn argmax_component(&self) -> usize {
        let mut best = 0;
        for k in 1..self.weights.len() {
            if self.weights[k] > self.weights[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hinge margin δ in normalized units.
    pub delta: f64,
    /// Weight ξ of the relative loss.
    pub xi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { delta: 0.05, xi: 1.0 }
    }
}

/// −log Σ_k w_k · N(c; μ_k, Σ_k), evaluated with log-sum-exp stabilization.
pub fn gmm_nll(c: (f64, f64), g: &GmmParams) -> Result<f64, PredictorError> {
    let (nll, _) = gmm_nll_with_responsibilities(c, g)?;
    Ok(nll)
}

/// NLL plus per-component responsibilities (softmax of the component
/// log-densities), which the backward pass reuses.
pub(crate) fn gmm_nll_with_responsibilities(
    c: (f64, f64),
    g: &GmmParams,
) -> Result<(f64, Vec<f64>), PredictorError> {
    const LOG_2PI: f64 = 1.8378770664093453;
    let k = g.k();
    assert!(k > 0 && g.means.len() == k && g.vars.len() == k);
    let mut log_terms = Vec::with_capacity(k);
    for i in 0..k {
        let (vx, vy) = g.vars[i];
        if !(vx > 0.0 && vy > 0.0) {
            return Err(PredictorError::Numerical(format!(
                "non-positive variance ({vx}, {vy})"
            )));
        }
        let dx = c.0 - g.means[i].0;
        let dy = c.1 - g.means[i].1;
        let log_n =
            -LOG_2PI - 0.5 * (vx.ln() + vy.ln()) - dx * dx / (2.0 * vx) - dy * dy / (2.0 * vy);
        let w = g.weights[i];
        let log_w = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
        log_terms.push(log_w + log_n);
    }
    let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(PredictorError::Numerical("all mixture terms vanished".into()));
    }
    let sum: f64 = log_terms.iter().map(|t| (t - m).exp()).sum();
    let lse = m + sum.ln();
    let resp: Vec<f64> = log_terms.iter().map(|t| (t - lse).exp()).collect();
    Ok((-lse, resp))
}

/// Relative hinge (margin δ): for LeftOf the rightmost mixture mean of the
/// subject must sit left of the leftmost mean of the object,
///   max{ max_k μ_ik(axis) − min_k μ_jk(axis), −δ }.
/// RightOf/Below evaluate as the flipped relation with roles swapped.
pub fn rel_penalty(kind: RelationKind, g_i: &GmmParams, g_j: &GmmParams, delta: f64) -> f64 {
    rel_penalty_with_grad(kind, g_i, g_j, delta).0
}

/// Penalty and its subgradient as (side, component, axis, ±1) touches:
/// `side` 0 = subject, 1 = object. Empty when the hinge is inactive.
pub(crate) fn rel_penalty_with_grad(
    kind: RelationKind,
    g_i: &GmmParams,
    g_j: &GmmParams,
    delta: f64,
) -> (f64, Vec<(usize, usize, usize, f64)>) {
    // Normalize to the "subject precedes object on `axis`" form.
    let (a, b, axis, swapped) = match kind {
        RelationKind::LeftOf => (g_i, g_j, 0, false),
        RelationKind::RightOf => (g_j, g_i, 0, true),
        RelationKind::Above => (g_i, g_j, 1, false),
        RelationKind::Below => (g_j, g_i, 1, true),
    };
    let coord = |m: &(f64, f64), axis: usize| if axis == 0 { m.0 } else { m.1 };
    let (mut hi_k, mut hi) = (0, f64::NEG_INFINITY);
    for (k, m) in a.means.iter().enumerate() {
        let v = coord(m, axis);
        if v > hi {
            hi = v;
            hi_k = k;
        }
    }
    let (mut lo_k, mut lo) = (0, f64::INFINITY);
    for (k, m) in b.means.iter().enumerate() {
        let v = coord(m, axis);
        if v < lo {
            lo = v;
            lo_k = k;
        }
    }
    let raw = hi - lo;
    if raw <= -delta {
        return (-delta, Vec::new());
    }
    // Sides are reported in (g_i, g_j) order regardless of the swap.
    let (side_a, side_b) = if swapped { (1, 0) } else { (0, 1) };
    (raw, vec![(side_a, hi_k, axis, 1.0), (side_b, lo_k, axis, -1.0)])
}

/// One training example: a description, optionally with ground-truth centers
/// indexed like `desc.objects`.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub desc: SceneDescription,
    pub gt_centers: Option<Vec<(f64, f64)>>,
}

impl TrainItem {
    pub fn from_dataset(item: &crate::scene_dsl::DatasetItem) -> Self {
        let gt_centers = item.layout.as_ref().map(|l| {
            item.desc
                .objects
                .iter()
                .map(|o| {
                    let c = l.iter().find(|c| c.id == o.id).expect("layout id");
                    (c.cx, c.cy)
                })
                .collect()
        });
        TrainItem { desc: item.desc.clone(), gt_centers }
    }
}

/// L_abs + ξ·L_rel over a batch; each term a mean over its contributors.
pub fn total_loss(
    batch: &[TrainItem],
    params: &PredictorParams,
    cfg: &LossConfig,
) -> Result<f64, PredictorError> {
    let (loss, _) = train::loss_and_grad(batch, params, cfg, false)?;
    Ok(loss)
}

/// Loss plus its gradient with respect to every encoder parameter, in the
/// flat registry order of `params.index`.
pub fn total_loss_and_grad(
    batch: &[TrainItem],
    params: &PredictorParams,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), PredictorError> {
    let (loss, grad) = train::loss_and_grad(batch, params, cfg, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Runs the encoder and reads one GmmParams per object mention.
pub fn predict_gmm(
    desc: &SceneDescription,
    params: &PredictorParams,
) -> Result<Vec<GmmParams>, PredictorError> {
    encoder::forward_gmms(desc, params)
}
