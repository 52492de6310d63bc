//! Scene-text consistency scoring on decoded channels. Each object
//! contributes a global term (smooth-max of its channel signature over the
//! whole frame: did it appear at all?) and a local term (mean signature
//! inside its cropped region: did it appear where the layout wanted it?).
//! The attend loss is the negated weighted sum, so lower is better and a
//! perfect scene bottoms out at −(1 + γ·N).

use crate::generator::{crop_backward_channel, crop_map, crop_with_map, ToyScene, CROP_SIZE};
use crate::predictor::Layout;
use crate::scene_dsl::{ObjectSpec, SceneDescription};
use crate::vocab;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("unknown word \"{0}\"")]
    Vocab(String),
    #[error("layout/description mismatch: {0}")]
    Layout(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// Weight of the local terms relative to the global term.
    pub gamma: f64,
    /// Boltzmann smooth-max temperature; →0 recovers the hard max while
    /// keeping the value inside the channel range.
    pub smoothmax_temp: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { gamma: 5.0, smoothmax_temp: 0.1 }
    }
}

/// An object's per-pixel channel signature: noun·color product, or the bare
/// noun channel when the description leaves the color open.
struct Signature {
    noun: usize,
    color: Option<usize>,
}

impl Signature {
    fn of(obj: &ObjectSpec) -> Result<Signature, ScorerError> {
        let noun = vocab::noun_index(&obj.noun)
            .ok_or_else(|| ScorerError::Vocab(obj.noun.clone()))?;
        let color = match &obj.color {
            Some(c) => {
                Some(vocab::color_index(c).ok_or_else(|| ScorerError::Vocab(c.clone()))?)
            }
            None => None,
        };
        Ok(Signature { noun, color })
    }

    fn value(&self, scene: &ToyScene, y: usize, x: usize) -> f64 {
        let n = scene.noun[[self.noun, y, x]];
        match self.color {
            Some(c) => n * scene.color[[c, y, x]],
            None => n,
        }
    }
}

/// Boltzmann smooth-max Σ vᵢ·e^{vᵢ/τ} / Σ e^{vᵢ/τ}. Stays within
/// [min v, max v], unlike log-sum-exp.
fn smooth_max(values: &[f64], temp: f64) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for &v in values {
        let e = ((v - m) / temp).exp();
        num += v * e;
        den += e;
    }
    num / den
}

/// Mean signature over a cropped patch. The color factor is skipped for
/// objects without a stated color.
pub fn local_score(patch: &ToyScene, obj: &ObjectSpec) -> Result<f64, ScorerError> {
    let sig = Signature::of(obj)?;
    let (h, w) = patch.dims();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            sum += sig.value(patch, y, x);
        }
    }
    Ok(sum / (h * w) as f64)
}

/// Mean over objects of the smooth-max of each object's signature over all
/// pixels: a location-free presence score in (0,1).
pub fn global_score(
    scene: &ToyScene,
    desc: &SceneDescription,
    cfg: &ScorerConfig,
) -> Result<f64, ScorerError> {
    if desc.objects.is_empty() {
        return Err(ScorerError::Layout("description has no objects".into()));
    }
    let (h, w) = scene.dims();
    let mut total = 0.0;
    let mut values = Vec::with_capacity(h * w);
    for obj in &desc.objects {
        let sig = Signature::of(obj)?;
        values.clear();
        for y in 0..h {
            for x in 0..w {
                values.push(sig.value(scene, y, x));
            }
        }
        total += smooth_max(&values, cfg.smoothmax_temp);
    }
    Ok(total / desc.objects.len() as f64)
}

fn layout_object<'a>(layout: &'a Layout, id: usize) -> Result<&'a crate::predictor::LayoutObject, ScorerError> {
    layout
        .objects
        .iter()
        .find(|o| o.id == id)
        .ok_or_else(|| ScorerError::Layout(format!("no layout region for object {id}")))
}

/// −global − γ·Σᵢ localᵢ over region crops. Range [−(1 + γ·N), 0].
pub fn attend_loss(
    scene: &ToyScene,
    desc: &SceneDescription,
    layout: &Layout,
    cfg: &ScorerConfig,
) -> Result<f64, ScorerError> {
    let mut loss = -global_score(scene, desc, cfg)?;
    for obj in &desc.objects {
        let region = layout_object(layout, obj.id)?;
        let patch = crop_with_map(scene, &crop_map(region, scene.dims()));
        loss -= cfg.gamma * local_score(&patch, obj)?;
    }
    Ok(loss)
}

/// −global alone: the objective of spatially unconstrained runs, which have
/// no regions to crop.
pub fn global_loss(
    scene: &ToyScene,
    desc: &SceneDescription,
    cfg: &ScorerConfig,
) -> Result<f64, ScorerError> {
    Ok(-global_score(scene, desc, cfg)?)
}

/// Gradients of the attend loss w.r.t. the decoded channel grids.
pub struct SceneGrad {
    pub noun: Array3<f64>,
    pub color: Array3<f64>,
}

pub fn attend_loss_with_grad(
    scene: &ToyScene,
    desc: &SceneDescription,
    layout: &Layout,
    cfg: &ScorerConfig,
) -> Result<(f64, SceneGrad), ScorerError> {
    loss_with_grad_impl(scene, desc, Some(layout), cfg)
}

pub fn global_loss_with_grad(
    scene: &ToyScene,
    desc: &SceneDescription,
    cfg: &ScorerConfig,
) -> Result<(f64, SceneGrad), ScorerError> {
    loss_with_grad_impl(scene, desc, None, cfg)
}

fn loss_with_grad_impl(
    scene: &ToyScene,
    desc: &SceneDescription,
    layout: Option<&Layout>,
    cfg: &ScorerConfig,
) -> Result<(f64, SceneGrad), ScorerError> {
    if desc.objects.is_empty() {
        return Err(ScorerError::Layout("description has no objects".into()));
    }
    let (h, w) = scene.dims();
    let (cn, _, _) = scene.noun.dim();
    let (cc, _, _) = scene.color.dim();
    let mut d_noun = Array3::zeros((cn, h, w));
    let mut d_color = Array3::zeros((cc, h, w));
    let inv_n = 1.0 / desc.objects.len() as f64;
    let tau = cfg.smoothmax_temp;
    let mut loss = 0.0;

    let mut values = vec![0.0f64; h * w];
    for obj in &desc.objects {
        let sig = Signature::of(obj)?;

        // Global term. dB/dv_p = softmax_p · (1 + (v_p − B)/τ).
        let mut m = f64::NEG_INFINITY;
        for (p, v) in values.iter_mut().enumerate() {
            let (y, x) = (p / w, p % w);
            *v = sig.value(scene, y, x);
            m = m.max(*v);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &v in &values {
            let e = ((v - m) / tau).exp();
            num += v * e;
            den += e;
        }
        let b = num / den;
        loss -= inv_n * b;
        for (p, &v) in values.iter().enumerate() {
            let (y, x) = (p / w, p % w);
            let softmax_p = ((v - m) / tau).exp() / den;
            let dv = -inv_n * softmax_p * (1.0 + (v - b) / tau);
            match sig.color {
                Some(c) => {
                    d_noun[[sig.noun, y, x]] += dv * scene.color[[c, y, x]];
                    d_color[[c, y, x]] += dv * scene.noun[[sig.noun, y, x]];
                }
                None => d_noun[[sig.noun, y, x]] += dv,
            }
        }

        // Local term through the bilinear crop.
        let Some(layout) = layout else { continue };
        let region = layout_object(layout, obj.id)?;
        let map = crop_map(region, (h, w));
        let patch = crop_with_map(scene, &map);
        loss -= cfg.gamma * local_score(&patch, obj)?;

        let scale = -cfg.gamma / (CROP_SIZE * CROP_SIZE) as f64;
        let mut dp_noun = Array2::zeros((CROP_SIZE, CROP_SIZE));
        let mut dp_color = Array2::zeros((CROP_SIZE, CROP_SIZE));
        for y in 0..CROP_SIZE {
            for x in 0..CROP_SIZE {
                match sig.color {
                    Some(c) => {
                        dp_noun[[y, x]] = scale * patch.color[[c, y, x]];
                        dp_color[[y, x]] = scale * patch.noun[[sig.noun, y, x]];
                    }
                    None => dp_noun[[y, x]] = scale,
                }
            }
        }
        let mut acc = Array2::zeros((h, w));
        crop_backward_channel(&map, &dp_noun, &mut acc);
        for y in 0..h {
            for x in 0..w {
                d_noun[[sig.noun, y, x]] += acc[[y, x]];
            }
        }
        if let Some(c) = sig.color {
            acc.fill(0.0);
            crop_backward_channel(&map, &dp_color, &mut acc);
            for y in 0..h {
                for x in 0..w {
                    d_color[[c, y, x]] += acc[[y, x]];
                }
            }
        }
    }
    Ok((loss, SceneGrad { noun: d_noun, color: d_color }))
}
