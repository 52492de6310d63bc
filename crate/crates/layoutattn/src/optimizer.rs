//! Per-description optimization of the N×T combination weights against the
//! attend loss, with the three ablation variants: spatially unconstrained
//! (all-ones masks, global term only), temporally constant (one weight per
//! object tiled across steps), and frozen 1/N.

use crate::attention::soft_region;
use crate::generator::{prepare, GenPrep, GeneratorConfig, GeneratorError, ToyScene};
use crate::predictor::{region_mask, Layout, LayoutObject};
use crate::scene_dsl::SceneDescription;
use crate::scorer::{self, ScorerConfig, ScorerError};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("bad optimizer config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Central differences per λ entry; simple and the oracle for the
    /// analytic path, at 2·N·T generations per step.
    FiniteDifference,
    /// Reverse-mode accumulation through the update recurrence.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Masks replaced by all-ones; the loss keeps only its global term.
    NoSpatial,
    /// One weight per object, held constant across steps.
    NoTemporal,
    /// λ frozen at 1/N; no gradient steps.
    NoOptimization,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatial => "no_spatial",
            Variant::NoTemporal => "no_temporal",
            Variant::NoOptimization => "no_optimization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub iterations: usize,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub fd_step: f64,
    pub gradient_mode: GradientMode,
    pub variant: Variant,
    /// Some(σ): Gaussian soft regions around the layout centers instead of
    /// hard region masks.
    pub soft_sigma: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            iterations: 50,
            clamp_lo: -1.0,
            clamp_hi: 2.0,
            fd_step: 1e-3,
            gradient_mode: GradientMode::FiniteDifference,
            variant: Variant::Full,
            soft_sigma: None,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.lr > 0.0) {
            return Err(OptimizerError::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(OptimizerError::Config(format!(
                "clamp range [{}, {}] is empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if !(self.fd_step > 0.0) {
            return Err(OptimizerError::Config(format!(
                "fd step {} must be positive",
                self.fd_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Best-loss weights, always N×steps (temporally constant runs are
    /// tiled back out).
    pub lambda: Array2<f64>,
    /// Scene decoded at the best weights.
    pub scene: ToyScene,
    pub loss: f64,
    /// Loss at the initial iterate followed by one entry per iteration.
    pub trace: Vec<f64>,
}

/// Layout regions reordered to match the description's object order, so
/// masks line up with local texts.
fn regions_in_desc_order<'a>(
    desc: &SceneDescription,
    layout: &'a Layout,
) -> Result<Vec<&'a LayoutObject>, OptimizerError> {
    desc.objects
        .iter()
        .map(|o| {
            layout.objects.iter().find(|l| l.id == o.id).ok_or_else(|| {
                OptimizerError::Scorer(ScorerError::Layout(format!(
                    "no layout region for object {}",
                    o.id
                )))
            })
        })
        .collect()
}

/// The masks a variant feeds the generator.
pub fn variant_masks(
    desc: &SceneDescription,
    layout: &Layout,
    gen_cfg: &GeneratorConfig,
    opt_cfg: &OptimizerConfig,
) -> Result<Vec<Array2<f64>>, OptimizerError> {
    let g = gen_cfg.grid;
    let regions = regions_in_desc_order(desc, layout)?;
    if opt_cfg.variant == Variant::NoSpatial {
        return Ok(vec![Array2::from_elem((g, g), 1.0); regions.len()]);
    }
    match opt_cfg.soft_sigma {
        Some(sigma) => {
            Ok(regions.iter().map(|r| soft_region((r.cx, r.cy), sigma, (g, g))).collect())
        }
        None => {
            let ordered = Layout { objects: regions.into_iter().cloned().collect() };
            Ok(region_mask(&ordered, (g, g)).map_err(GeneratorError::from)?)
        }
    }
}

struct Engine<'a> {
    prep: GenPrep,
    desc: &'a SceneDescription,
    layout: &'a Layout,
    scorer_cfg: &'a ScorerConfig,
    global_only: bool,
    seed: u64,
}

impl<'a> Engine<'a> {
    fn new(
        desc: &'a SceneDescription,
        layout: &'a Layout,
        gen_cfg: &GeneratorConfig,
        scorer_cfg: &'a ScorerConfig,
        opt_cfg: &OptimizerConfig,
        seed: u64,
    ) -> Result<Engine<'a>, OptimizerError> {
        let masks = variant_masks(desc, layout, gen_cfg, opt_cfg)?;
        let prep = prepare(desc, &masks, gen_cfg)?;
        Ok(Engine {
            prep,
            desc,
            layout,
            scorer_cfg,
            global_only: opt_cfg.variant == Variant::NoSpatial,
            seed,
        })
    }

    fn loss_of(&self, scene: &ToyScene) -> Result<f64, OptimizerError> {
        let l = if self.global_only {
            scorer::global_loss(scene, self.desc, self.scorer_cfg)?
        } else {
            scorer::attend_loss(scene, self.desc, self.layout, self.scorer_cfg)?
        };
        Ok(l)
    }

    fn eval(&self, lambda: &Array2<f64>) -> Result<(f64, ToyScene), OptimizerError> {
        let (z0, _) = self.prep.forward(lambda, self.seed, false)?;
        let scene = self.prep.decode(&z0);
        let loss = self.loss_of(&scene)?;
        Ok((loss, scene))
    }

    fn eval_with_grad(
        &self,
        lambda: &Array2<f64>,
    ) -> Result<(f64, ToyScene, Array2<f64>), OptimizerError> {
        let (z0, cache) = self.prep.forward(lambda, self.seed, true)?;
        let scene = self.prep.decode(&z0);
        let (loss, sgrad) = if self.global_only {
            scorer::global_loss_with_grad(&scene, self.desc, self.scorer_cfg)?
        } else {
            scorer::attend_loss_with_grad(&scene, self.desc, self.layout, self.scorer_cfg)?
        };
        let d_z0 = self.prep.decode_backward(&scene, &sgrad.noun, &sgrad.color);
        let d_lambda = self.prep.backward_lambda(&cache.expect("cache requested"), lambda, &d_z0);
        Ok((loss, scene, d_lambda))
    }
}

/// Central-difference gradient of an arbitrary scalar function of λ.
pub fn fd_gradient<F>(
    lambda: &Array2<f64>,
    step: f64,
    mut f: F,
) -> Result<Array2<f64>, OptimizerError>
where
    F: FnMut(&Array2<f64>) -> Result<f64, OptimizerError>,
{
    let mut grad = Array2::zeros(lambda.dim());
    let mut probe = lambda.clone();
    for idx in 0..lambda.len() {
        let (i, t) = (idx / lambda.ncols(), idx % lambda.ncols());
        let base = lambda[[i, t]];
        probe[[i, t]] = base + step;
        let plus = f(&probe)?;
        probe[[i, t]] = base - step;
        let minus = f(&probe)?;
        probe[[i, t]] = base;
        grad[[i, t]] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Loss and its λ gradient for a full N×steps weight matrix, computed in
/// the configured mode over the configured variant's masks and loss.
pub fn attend_lambda_gradient(
    desc: &SceneDescription,
    layout: &Layout,
    gen_cfg: &GeneratorConfig,
    scorer_cfg: &ScorerConfig,
    opt_cfg: &OptimizerConfig,
    lambda: &Array2<f64>,
    seed: u64,
) -> Result<(f64, Array2<f64>), OptimizerError> {
    opt_cfg.validate()?;
    let engine = Engine::new(desc, layout, gen_cfg, scorer_cfg, opt_cfg, seed)?;
    match opt_cfg.gradient_mode {
        GradientMode::Analytic => {
            let (loss, _, grad) = engine.eval_with_grad(lambda)?;
            Ok((loss, grad))
        }
        GradientMode::FiniteDifference => {
            let (loss, _) = engine.eval(lambda)?;
            let grad = fd_gradient(lambda, opt_cfg.fd_step, |l| Ok(engine.eval(l)?.0))?;
            Ok((loss, grad))
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn optimize(
    desc: &SceneDescription,
    layout: &Layout,
    gen_cfg: &GeneratorConfig,
    scorer_cfg: &ScorerConfig,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<OptimizeOutcome, OptimizerError> {
    opt_cfg.validate()?;
    let n = desc.objects.len();
    if n == 0 {
        return Err(OptimizerError::Config("description has no objects".into()));
    }
    let engine = Engine::new(desc, layout, gen_cfg, scorer_cfg, opt_cfg, seed)?;
    let steps = engine.prep.steps();

    // Temporally constant runs optimize one column and tile it out.
    let t_cols = if opt_cfg.variant == Variant::NoTemporal { 1 } else { steps };
    let tile = |small: &Array2<f64>| -> Array2<f64> {
        if t_cols == steps {
            small.clone()
        } else {
            let mut full = Array2::zeros((n, steps));
            for i in 0..n {
                for t in 0..steps {
                    full[[i, t]] = small[[i, 0]];
                }
            }
            full
        }
    };

    let mut small = Array2::from_elem((n, t_cols), 1.0 / n as f64);
    let iterations =
        if opt_cfg.variant == Variant::NoOptimization { 0 } else { opt_cfg.iterations };
    let mut m = Array2::<f64>::zeros((n, t_cols));
    let mut v = Array2::<f64>::zeros((n, t_cols));
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut best: Option<(f64, ToyScene, Array2<f64>)> = None;

    // Each pass scores the current iterate (trace entry k = iterate k) and,
    // except after the last step, also produces its gradient. The analytic
    // path gets both from one forward/backward sweep.
    for it in 0..iterations {
        let full = tile(&small);
        let (loss, scene, grad_full) = match opt_cfg.gradient_mode {
            GradientMode::Analytic => engine.eval_with_grad(&full)?,
            GradientMode::FiniteDifference => {
                let (loss, scene) = engine.eval(&full)?;
                let grad =
                    fd_gradient(&small, opt_cfg.fd_step, |s| Ok(engine.eval(&tile(s))?.0))?;
                (loss, scene, grad)
            }
        };
        if !loss.is_finite() {
            return Err(OptimizerError::NonFiniteLoss { iteration: it });
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, scene, full));
        }

        let grad_small = collapse_columns(&grad_full, t_cols);
        if grad_small.iter().any(|g| !g.is_finite()) {
            return Err(OptimizerError::NonFiniteLoss { iteration: it });
        }
        let bc1 = 1.0 - ADAM_B1.powi(it as i32 + 1);
        let bc2 = 1.0 - ADAM_B2.powi(it as i32 + 1);
        for ((x, g), (mi, vi)) in
            small.iter_mut().zip(grad_small.iter()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = ADAM_B1 * *mi + (1.0 - ADAM_B1) * g;
            *vi = ADAM_B2 * *vi + (1.0 - ADAM_B2) * g * g;
            let step = opt_cfg.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            *x = (*x - step).clamp(opt_cfg.clamp_lo, opt_cfg.clamp_hi);
        }
    }

    let full = tile(&small);
    let (loss, scene) = engine.eval(&full)?;
    if !loss.is_finite() {
        return Err(OptimizerError::NonFiniteLoss { iteration: iterations });
    }
    trace.push(loss);
    if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
        best = Some((loss, scene, full));
    }

    let (loss, scene, lambda) = best.expect("at least the final iterate was scored");
    Ok(OptimizeOutcome { lambda, scene, loss, trace })
}

/// Chain rule through tiling: a single shared column collects the sum of
/// the per-step gradients.
fn collapse_columns(full: &Array2<f64>, t_cols: usize) -> Array2<f64> {
    if t_cols == full.ncols() {
        return full.clone();
    }
    let mut out = Array2::zeros((full.nrows(), 1));
    for i in 0..full.nrows() {
        out[[i, 0]] = full.row(i).sum();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::RegionShape;
    use crate::scene_dsl::ObjectSpec;

    fn small_gen_cfg() -> GeneratorConfig {
        GeneratorConfig { grid: 16, steps: 4, ..Default::default() }
    }

    fn one_object_desc() -> SceneDescription {
        SceneDescription {
            global_text: "a photo of a red car".into(),
            objects: vec![ObjectSpec { id: 1, noun: "car".into(), color: Some("red".into()) }],
            relations: vec![],
            local_texts: vec!["A photo of a red car".into()],
            mention_token_positions: vec![5],
        }
    }

    fn two_object_desc() -> SceneDescription {
        SceneDescription {
            global_text: "a photo of a red car and a dog".into(),
            objects: vec![
                ObjectSpec { id: 1, noun: "car".into(), color: Some("red".into()) },
                ObjectSpec { id: 2, noun: "dog".into(), color: None },
            ],
            relations: vec![],
            local_texts: vec!["A photo of a red car".into(), "A photo of a dog".into()],
            mention_token_positions: vec![5, 8],
        }
    }

    fn layout_for(n: usize) -> Layout {
        Layout {
            objects: (0..n)
                .map(|i| LayoutObject {
                    id: i + 1,
                    cx: 0.3 + 0.4 * i as f64,
                    cy: 0.5,
                    shape: RegionShape::Circle { r: 0.2 },
                })
                .collect(),
        }
    }

    #[test]
    fn zero_iterations_equals_frozen_variant() {
        let desc = two_object_desc();
        let layout = layout_for(2);
        let gen_cfg = small_gen_cfg();
        let scorer_cfg = ScorerConfig::default();
        let zero = OptimizerConfig { iterations: 0, ..Default::default() };
        let frozen =
            OptimizerConfig { variant: Variant::NoOptimization, ..Default::default() };
        let a = optimize(&desc, &layout, &gen_cfg, &scorer_cfg, &zero, 5).unwrap();
        let b = optimize(&desc, &layout, &gen_cfg, &scorer_cfg, &frozen, 5).unwrap();
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.scene, b.scene);
        assert!(a.lambda.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn best_loss_never_exceeds_initial() {
        let desc = two_object_desc();
        let layout = layout_for(2);
        let gen_cfg = small_gen_cfg();
        let cfg = OptimizerConfig {
            iterations: 6,
            gradient_mode: GradientMode::Analytic,
            ..Default::default()
        };
        let out = optimize(&desc, &layout, &gen_cfg, &ScorerConfig::default(), &cfg, 9).unwrap();
        assert!(out.loss <= out.trace[0]);
        assert_eq!(out.trace.len(), 7);
        assert!((out.loss - out.trace.iter().copied().fold(f64::INFINITY, f64::min)).abs() == 0.0);
    }

    #[test]
    fn no_temporal_columns_stay_exactly_equal() {
        let desc = two_object_desc();
        let layout = layout_for(2);
        let gen_cfg = small_gen_cfg();
        let cfg = OptimizerConfig {
            iterations: 5,
            variant: Variant::NoTemporal,
            gradient_mode: GradientMode::Analytic,
            ..Default::default()
        };
        let out = optimize(&desc, &layout, &gen_cfg, &ScorerConfig::default(), &cfg, 3).unwrap();
        for i in 0..2 {
            let first = out.lambda[[i, 0]];
            for t in 0..gen_cfg.steps {
                assert_eq!(out.lambda[[i, t]], first, "object {i} step {t}");
            }
        }
    }

    #[test]
    fn clamp_bounds_hold_under_huge_learning_rate() {
        let desc = one_object_desc();
        let layout = layout_for(1);
        let gen_cfg = small_gen_cfg();
        let cfg = OptimizerConfig {
            iterations: 8,
            lr: 50.0,
            gradient_mode: GradientMode::Analytic,
            ..Default::default()
        };
        let out = optimize(&desc, &layout, &gen_cfg, &ScorerConfig::default(), &cfg, 1).unwrap();
        for &x in out.lambda.iter() {
            assert!((-1.0..=2.0).contains(&x), "λ={x} escaped the clamp");
        }
    }

    #[test]
    fn optimization_is_seed_deterministic() {
        let desc = two_object_desc();
        let layout = layout_for(2);
        let gen_cfg = small_gen_cfg();
        let cfg = OptimizerConfig {
            iterations: 4,
            gradient_mode: GradientMode::Analytic,
            ..Default::default()
        };
        let a = optimize(&desc, &layout, &gen_cfg, &ScorerConfig::default(), &cfg, 11).unwrap();
        let b = optimize(&desc, &layout, &gen_cfg, &ScorerConfig::default(), &cfg, 11).unwrap();
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let lambda = Array2::from_elem((2, 3), 0.6);
        let grad = fd_gradient(&lambda, 1e-3, |_| Ok(4.25)).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_fd_oracle() {
        let desc = two_object_desc();
        let layout = layout_for(2);
        let gen_cfg = GeneratorConfig { grid: 12, steps: 4, ..Default::default() };
        let scorer_cfg = ScorerConfig::default();
        let mut lambda = Array2::zeros((2, 4));
        for (i, x) in lambda.iter_mut().enumerate() {
            *x = 0.1 + 0.15 * (i as f64 % 4.0);
        }
        let fd_cfg = OptimizerConfig {
            gradient_mode: GradientMode::FiniteDifference,
            ..Default::default()
        };
        let an_cfg =
            OptimizerConfig { gradient_mode: GradientMode::Analytic, ..Default::default() };
        let (lf, gf) =
            attend_lambda_gradient(&desc, &layout, &gen_cfg, &scorer_cfg, &fd_cfg, &lambda, 31)
                .unwrap();
        let (la, ga) =
            attend_lambda_gradient(&desc, &layout, &gen_cfg, &scorer_cfg, &an_cfg, &lambda, 31)
                .unwrap();
        assert_eq!(lf, la);
        for (f, a) in gf.iter().zip(ga.iter()) {
            assert!(
                (f - a).abs() <= 1e-3 * f.abs().max(a.abs()).max(1e-9),
                "fd={f} analytic={a}"
            );
        }
    }

    #[test]
    fn empty_mask_weight_never_moves() {
        let desc = two_object_desc();
        // Second object's region is an explicit all-zero mask.
        let layout = Layout {
            objects: vec![
                LayoutObject { id: 1, cx: 0.3, cy: 0.5, shape: RegionShape::Circle { r: 0.2 } },
                LayoutObject {
                    id: 2,
                    cx: 0.7,
                    cy: 0.5,
                    shape: RegionShape::Mask(Array2::zeros((16, 16))),
                },
            ],
        };
        let gen_cfg = small_gen_cfg();
        let cfg = OptimizerConfig {
            iterations: 5,
            gradient_mode: GradientMode::Analytic,
            ..Default::default()
        };
        let out = optimize(&desc, &layout, &gen_cfg, &ScorerConfig::default(), &cfg, 2).unwrap();
        for t in 0..gen_cfg.steps {
            assert_eq!(out.lambda[[1, t]], 0.5, "frozen by zero gradient");
        }
    }

    #[test]
    fn no_spatial_reports_its_own_objective() {
        let desc = two_object_desc();
        let layout = layout_for(2);
        let gen_cfg = small_gen_cfg();
        let cfg = OptimizerConfig {
            iterations: 3,
            variant: Variant::NoSpatial,
            gradient_mode: GradientMode::Analytic,
            ..Default::default()
        };
        let scorer_cfg = ScorerConfig::default();
        let out = optimize(&desc, &layout, &gen_cfg, &scorer_cfg, &cfg, 17).unwrap();
        let recomputed = scorer::global_loss(&out.scene, &desc, &scorer_cfg).unwrap();
        assert!((out.loss - recomputed).abs() < 1e-12);
        assert!(out.loss >= -1.0 && out.loss <= 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let desc = one_object_desc();
        let layout = layout_for(1);
        let gen_cfg = small_gen_cfg();
        let scorer_cfg = ScorerConfig::default();
        for bad in [
            OptimizerConfig { lr: 0.0, ..Default::default() },
            OptimizerConfig { clamp_lo: 2.0, clamp_hi: -1.0, ..Default::default() },
            OptimizerConfig { fd_step: 0.0, ..Default::default() },
        ] {
            assert!(matches!(
                optimize(&desc, &layout, &gen_cfg, &scorer_cfg, &bad, 0),
                Err(OptimizerError::Config(_))
            ));
        }
    }
}
