//! Batch loss assembly and the Adam training loop.

use super::encoder::{self, PredictorParams};
use super::{
    gmm_nll_with_responsibilities, rel_penalty_with_grad, LossConfig, PredictorError, TrainItem,
};
use crate::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-mention gradient accumulator on the transformed mixture parameters.
struct GmmGrad {
    d_means: Vec<(f64, f64)>,
    d_vars: Vec<(f64, f64)>,
    d_weights: Vec<f64>,
    touched: bool,
}

impl GmmGrad {
    fn zeros(k: usize) -> Self {
        GmmGrad {
            d_means: vec![(0.0, 0.0); k],
            d_vars: vec![(0.0, 0.0); k],
            d_weights: vec![0.0; k],
            touched: false,
        }
    }
}

/// Absolute NLL averaged over labeled objects plus ξ times the hinge
/// penalty averaged over relations. Each mean runs over its own
/// contributor count; a batch contributing to neither term is an error.
pub(crate) fn loss_and_grad(
    batch: &[TrainItem],
    params: &PredictorParams,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), PredictorError> {
    let mut abs_terms = 0usize;
    let mut rel_terms = 0usize;
    for item in batch {
        if let Some(gt) = &item.gt_centers {
            abs_terms += gt.len();
        }
        rel_terms += item.desc.relations.len();
    }
    if abs_terms == 0 && rel_terms == 0 {
        return Err(PredictorError::EmptyBatch);
    }

    let mut abs_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; params.index.total()]);
    let abs_scale = if abs_terms > 0 { 1.0 / abs_terms as f64 } else { 0.0 };
    let rel_scale = if rel_terms > 0 { cfg.xi / rel_terms as f64 } else { 0.0 };

    for item in batch {
        let cache = encoder::forward(&item.desc, params)?;
        let k = params.cfg.k;
        let mut gmm_grads: Vec<GmmGrad> =
            (0..cache.gmms.len()).map(|_| GmmGrad::zeros(k)).collect();

        if let Some(gt) = &item.gt_centers {
            if gt.len() != cache.gmms.len() {
                return Err(PredictorError::Shape(format!(
                    "{} ground-truth centers for {} objects",
                    gt.len(),
                    cache.gmms.len()
                )));
            }
            for (o, (&c, g)) in gt.iter().zip(&cache.gmms).enumerate() {
                let (nll, resp) = gmm_nll_with_responsibilities(c, g)?;
                abs_sum += nll;
                if let Some(gg) = want_grad.then(|| &mut gmm_grads[o]) {
                    for i in 0..k {
                        let (vx, vy) = g.vars[i];
                        let dx = g.means[i].0 - c.0;
                        let dy = g.means[i].1 - c.1;
                        gg.d_means[i].0 += abs_scale * resp[i] * dx / vx;
                        gg.d_means[i].1 += abs_scale * resp[i] * dy / vy;
                        gg.d_vars[i].0 +=
                            abs_scale * resp[i] * (0.5 / vx - dx * dx / (2.0 * vx * vx));
                        gg.d_vars[i].1 +=
                            abs_scale * resp[i] * (0.5 / vy - dy * dy / (2.0 * vy * vy));
                        gg.d_weights[i] += abs_scale * (-resp[i] / g.weights[i].max(1e-300));
                    }
                    gg.touched = true;
                }
            }
        }

        for rel in &item.desc.relations {
            let gi = &cache.gmms[rel.subject_id - 1];
            let gj = &cache.gmms[rel.object_id - 1];
            let (pen, touches) = rel_penalty_with_grad(rel.kind, gi, gj, cfg.delta);
            rel_sum += pen;
            if want_grad {
                for (side, comp, axis, sign) in touches {
                    let mention = if side == 0 { rel.subject_id - 1 } else { rel.object_id - 1 };
                    let gg = &mut gmm_grads[mention];
                    if axis == 0 {
                        gg.d_means[comp].0 += rel_scale * sign;
                    } else {
                        gg.d_means[comp].1 += rel_scale * sign;
                    }
                    gg.touched = true;
                }
            }
        }

        if let Some(grad) = grad.as_deref_mut() {
            if gmm_grads.iter().any(|g| g.touched) {
                let mut d_raws = vec![vec![0.0; params.cfg.head_out()]; cache.gmms.len()];
                for (m, gg) in gmm_grads.iter().enumerate() {
                    if gg.touched {
                        encoder::raw_to_gmm_backward(
                            &cache.gmms[m],
                            &gg.d_means,
                            &gg.d_vars,
                            &gg.d_weights,
                            &mut d_raws[m],
                        );
                    }
                }
                encoder::backward(&item.desc, params, &cache, &d_raws, grad);
            }
        }
    }

    let loss = abs_scale * abs_sum + rel_scale * rel_sum;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PredictorParams,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t as i32);
        let bc2 = 1.0 - Self::B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Minibatch Adam over shuffled items. Non-finite losses abort with a
/// divergence error rather than continuing on poisoned parameters.
pub fn train(
    items: &[TrainItem],
    mut params: PredictorParams,
    hyper: &TrainHyper,
) -> Result<TrainOutcome, PredictorError> {
    if items.is_empty() {
        return Err(PredictorError::EmptyBatch);
    }
    let mut adam = Adam::new(params.index.total(), hyper.lr);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, &["epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, grad) = loss_and_grad(&batch, &params, &hyper.loss, true)?;
            let grad = grad.expect("gradient requested");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PredictorError::Divergence { epoch, loss });
            }
            adam.step(&mut params.flat, &grad);
            epoch_sum += loss;
            batches += 1;
        }
        loss_curve.push(epoch_sum / batches as f64);
    }
    Ok(TrainOutcome { params, loss_curve })
}
