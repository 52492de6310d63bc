//! Deterministic toy denoiser: a latent grid evolves for T steps under
//! masked cross-attention against the description texts, then decodes
//! through fixed readout directions into per-pixel noun/color channels.
//!
//! Pixels never attend to each other, only to text tokens, so each pixel's
//! latent evolves independently. That makes mask locality exact and keeps a
//! full run in the low milliseconds.

use crate::predictor::{region_mask, Layout, LayoutObject, PredictorError};
use crate::scene_dsl::SceneDescription;
use crate::vocab::{self, COLOR_COUNT, NOUN_COUNT};
use ndarray::{Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latent dimension is pinned by the embedding construction: colors on
/// basis coordinates 0..8, nouns confined to coordinates 8..16.
pub const LATENT_DIM: usize = 16;

/// Side of the square patch produced by `crop_region`.
pub const CROP_SIZE: usize = 16;

/// Soft-region weights below this contribute nothing and are dropped from
/// the per-mask cell lists.
const MASK_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("unknown token \"{0}\"")]
    Vocab(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<PredictorError> for GeneratorError {
    fn from(e: PredictorError) -> Self {
        GeneratorError::Shape(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub grid: usize,
    pub latent_dim: usize,
    pub steps: usize,
    /// Step size; None means 1/steps.
    pub eta: Option<f64>,
    /// Query gain: logits = q_gain·⟨Z, e_token⟩/√d. Kept small so attention
    /// weights stay near the token-count prior and the seed noise cannot
    /// ignite runaway winners; channel separation then comes from mean drive.
    pub q_gain: f64,
    /// Value gain: attended tokens push Z along v_gain·e_token. Large values
    /// widen the gap between masked and unmasked drive relative to the unit
    /// seed noise.
    pub v_gain: f64,
    /// Channel readout: σ(readout_gain·(⟨Z₀, e⟩ − readout_threshold)).
    pub readout_gain: f64,
    pub readout_threshold: f64,
    /// Value-side scaling for function words; 0 makes them pure sinks that
    /// absorb attention mass but push nothing into the latent.
    pub fw_value_scale: f64,
    /// Seed for the frozen function-word table.
    pub embed_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            grid: 32,
            latent_dim: LATENT_DIM,
            steps: 50,
            eta: None,
            q_gain: 0.25,
            v_gain: 45.0,
            readout_gain: 2.5,
            readout_threshold: 9.0,
            fw_value_scale: 0.0,
            embed_seed: 0x746f6b,
        }
    }
}

impl GeneratorConfig {
    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(1.0 / self.steps as f64)
    }

    fn validate(&self) -> Result<(), GeneratorError> {
        if self.latent_dim != LATENT_DIM {
            return Err(GeneratorError::Shape(format!(
                "latent dim {} unsupported; the embedding basis requires {LATENT_DIM}",
                self.latent_dim
            )));
        }
        if self.steps == 0 || self.grid == 0 || self.eta() <= 0.0 {
            return Err(GeneratorError::Shape("steps, grid, and eta must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen token embedding table. Color tokens occupy standard basis
/// directions e₀..e₇. Nouns live entirely in coordinates 8..15 so noun
/// saturation never bleeds into color readouts: the first eight take
/// +e₈..+e₁₅, the next eight their antipodes −e₈..−e₁₅ (sign-distinct, so
/// readouts cannot confuse them), the last eight normalized Hadamard H₈
/// columns (|cos| ≤ 1/√8 against the noun basis). Function words get seeded
/// pseudo-random unit vectors; their attention role is set by the fw_*
/// config scales.
pub struct TokenEmbeddings {
    table: Array2<f64>,
}

impl TokenEmbeddings {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let d = LATENT_DIM;
        let mut table = Array2::zeros((vocab::vocab_size(), d));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embed_seed);
        for (id, tok) in vocab::all_tokens().iter().enumerate() {
            if let Some(c) = vocab::color_index(tok) {
                table[[id, c]] = 1.0;
            } else if let Some(n) = vocab::noun_index(tok) {
                if n < 8 {
                    table[[id, 8 + n]] = 1.0;
                } else if n < 16 {
                    table[[id, 8 + (n - 8)]] = -1.0;
                } else {
                    let col = n - 16;
                    let scale = 1.0 / (8.0f64).sqrt();
                    for j in 0..8 {
                        let sign = if (col & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                        table[[id, 8 + j]] = sign * scale;
                    }
                }
            } else {
                let mut v = [0.0f64; LATENT_DIM];
                let mut norm2 = 0.0;
                for x in v.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                    norm2 += *x * *x;
                }
                let scale = 1.0 / norm2.sqrt();
                for (j, x) in v.iter().enumerate() {
                    table[[id, j]] = x * scale;
                }
            }
        }
        TokenEmbeddings { table }
    }

    pub fn embed_text(&self, text: &str) -> Result<Array2<f64>, GeneratorError> {
        let tokens = vocab::tokenize(text);
        let mut out = Array2::zeros((tokens.len(), LATENT_DIM));
        for (row, (tok, _)) in tokens.iter().enumerate() {
            let id = vocab::token_id(tok).ok_or_else(|| GeneratorError::Vocab(tok.clone()))?;
            out.row_mut(row).assign(&self.table.row(id));
        }
        Ok(out)
    }

    pub fn noun_direction(&self, noun_idx: usize) -> ArrayView1<'_, f64> {
        let noun = vocab::nouns().nth(noun_idx).expect("noun index");
        self.table.row(vocab::token_id(noun).expect("noun token"))
    }

    pub fn color_direction(&self, color_idx: usize) -> ArrayView1<'_, f64> {
        let color = vocab::COLORS[color_idx];
        self.table.row(vocab::token_id(color).expect("color token"))
    }
}

/// Decoded scene: per-pixel channel activations in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    /// (NOUN_COUNT, h, w)
    pub noun: Array3<f64>,
    /// (COLOR_COUNT, h, w)
    pub color: Array3<f64>,
}

/// Display colors for rendered scenes, indexed like `vocab::COLORS`.
pub const PALETTE: [(u8, u8, u8); COLOR_COUNT] = [
    (220, 40, 40),
    (50, 80, 220),
    (50, 180, 80),
    (230, 220, 60),
    (25, 25, 25),
    (240, 240, 240),
    (240, 150, 40),
    (160, 60, 200),
];

impl ToyScene {
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.noun.dim();
        (h, w)
    }

    /// RGB render: pixel brightness follows the strongest noun channel, hue
    /// the strongest color channel. Presentation only; metrics read the raw
    /// channels.
    pub fn render(&self) -> Vec<(u8, u8, u8)> {
        let (h, w) = self.dims();
        let bg = (18.0, 18.0, 24.0);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut presence = 0.0f64;
                for n in 0..NOUN_COUNT {
                    presence = presence.max(self.noun[[n, y, x]]);
                }
                let mut best_c = 0;
                for c in 1..COLOR_COUNT {
                    if self.color[[c, y, x]] > self.color[[best_c, y, x]] {
                        best_c = c;
                    }
                }
                let fg = PALETTE[best_c];
                let mix = |b: f64, f: u8| (b + presence * (f as f64 - b)).round() as u8;
                out.push((mix(bg.0, fg.0), mix(bg.1, fg.1), mix(bg.2, fg.2)));
            }
        }
        out
    }
}

/// One text's attention-side matrices with duplicate tokens collapsed:
/// softmax over the original sequence equals softmax over unique tokens
/// with an additive ln(count) bias.
struct TextAttn {
    /// u×d; logits = Z·keffᵀ + bias.
    keff: Array2<f64>,
    /// u×d value rows.
    v: Array2<f64>,
    bias: Vec<f64>,
}

impl TextAttn {
    fn build(
        emb: &TokenEmbeddings,
        text: &str,
        cfg: &GeneratorConfig,
    ) -> Result<TextAttn, GeneratorError> {
        let mut ids: Vec<usize> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut is_fw: Vec<bool> = Vec::new();
        for (tok, _) in vocab::tokenize(text) {
            let fw = vocab::is_function_word(&tok);
            let id = vocab::token_id(&tok).ok_or(GeneratorError::Vocab(tok))?;
            match ids.iter().position(|&u| u == id) {
                Some(i) => counts[i] += 1.0,
                None => {
                    ids.push(id);
                    counts.push(1.0);
                    is_fw.push(fw);
                }
            }
        }
        if ids.is_empty() {
            return Err(GeneratorError::Shape("empty text".into()));
        }
        let u = ids.len();
        let d = LATENT_DIM;
        let kscale = cfg.q_gain / (d as f64).sqrt();
        let mut keff = Array2::zeros((u, d));
        let mut v = Array2::zeros((u, d));
        for (row, &id) in ids.iter().enumerate() {
            let vs = if is_fw[row] { cfg.v_gain * cfg.fw_value_scale } else { cfg.v_gain };
            for j in 0..d {
                keff[[row, j]] = kscale * emb.table[[id, j]];
                v[[row, j]] = vs * emb.table[[id, j]];
            }
        }
        Ok(TextAttn { keff, v, bias: counts.iter().map(|c| c.ln()).collect() })
    }

    /// Rows of `z` attend over this text: softmax(z·keffᵀ + bias)·v.
    /// Returns (probs, output).
    fn attend(&self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut logits = z.dot(&self.keff.t());
        for mut row in logits.rows_mut() {
            let mut m = f64::NEG_INFINITY;
            for (c, x) in row.iter_mut().enumerate() {
                *x += self.bias[c];
                m = m.max(*x);
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let out = logits.dot(&self.v);
        (logits, out)
    }

    /// VJP of `attend` onto z given cached probs: dz = dS·keff with
    /// dS = P ⊙ (dP − rowdot(dP, P)), dP = dA·vᵀ.
    fn attend_vjp(&self, probs: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
        let dp = d_out.dot(&self.v.t());
        let (rows, cols) = dp.dim();
        let mut ds = Array2::zeros((rows, cols));
        for r in 0..rows {
            let mut dot = 0.0;
            for c in 0..cols {
                dot += dp[[r, c]] * probs[[r, c]];
            }
            for c in 0..cols {
                ds[[r, c]] = probs[[r, c]] * (dp[[r, c]] - dot);
            }
        }
        ds.dot(&self.keff)
    }
}

/// Nonzero mask cells as (flat pixel index, weight). Weight is 1 for binary
/// masks, fractional for soft regions.
struct MaskCells {
    cells: Vec<(usize, f64)>,
}

/// Everything about a (description, masks, config) triple that is constant
/// across λ values and seeds. Building it once per optimization run avoids
/// re-embedding text every iteration.
pub(crate) struct GenPrep {
    h: usize,
    w: usize,
    steps: usize,
    eta: f64,
    global: TextAttn,
    locals: Vec<TextAttn>,
    masks: Vec<MaskCells>,
    /// (NOUN_COUNT + COLOR_COUNT) × d readout directions; nouns first.
    readout: Array2<f64>,
    readout_gain: f64,
    readout_threshold: f64,
}

struct StepCache {
    p_d: Array2<f64>,
    a_d: Array2<f64>,
    locals: Vec<(Array2<f64>, Array2<f64>)>,
}

pub(crate) struct GenCache {
    steps: Vec<StepCache>,
}

pub(crate) fn prepare(
    desc: &SceneDescription,
    masks: &[Array2<f64>],
    cfg: &GeneratorConfig,
) -> Result<GenPrep, GeneratorError> {
    cfg.validate()?;
    let n = desc.objects.len();
    if desc.local_texts.len() != n {
        return Err(GeneratorError::Shape(format!(
            "{} local texts for {n} objects",
            desc.local_texts.len()
        )));
    }
    if masks.len() != n {
        return Err(GeneratorError::Shape(format!("{} masks for {n} objects", masks.len())));
    }
    let (h, w) = (cfg.grid, cfg.grid);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(GeneratorError::Shape(format!(
                "mask {:?} does not match the {h}x{w} grid",
                m.dim()
            )));
        }
    }

    let emb = TokenEmbeddings::new(cfg);
    let global = TextAttn::build(&emb, &desc.global_text, cfg)?;
    let locals = desc
        .local_texts
        .iter()
        .map(|t| TextAttn::build(&emb, t, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mask_cells = masks
        .iter()
        .map(|m| {
            let cells = m
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > MASK_CUTOFF)
                .map(|(p, &v)| (p, v))
                .collect();
            MaskCells { cells }
        })
        .collect();

    let mut readout = Array2::zeros((NOUN_COUNT + COLOR_COUNT, LATENT_DIM));
    for nidx in 0..NOUN_COUNT {
        readout.row_mut(nidx).assign(&emb.noun_direction(nidx));
    }
    for cidx in 0..COLOR_COUNT {
        readout.row_mut(NOUN_COUNT + cidx).assign(&emb.color_direction(cidx));
    }

    Ok(GenPrep {
        h,
        w,
        steps: cfg.steps,
        eta: cfg.eta(),
        global,
        locals,
        masks: mask_cells,
        readout,
        readout_gain: cfg.readout_gain,
        readout_threshold: cfg.readout_threshold,
    })
}

impl GenPrep {
    pub(crate) fn steps(&self) -> usize {
        self.steps
    }

    fn check_lambda(&self, lambda: &Array2<f64>) -> Result<(), GeneratorError> {
        if lambda.dim() != (self.locals.len(), self.steps) {
            return Err(GeneratorError::Shape(format!(
                "lambda is {:?}, expected ({}, {})",
                lambda.dim(),
                self.locals.len(),
                self.steps
            )));
        }
        Ok(())
    }

    /// Runs the denoising loop. λ column j is consumed at the j-th executed
    /// step (j = 0 is the first update, applied to Z_T). Returns the final
    /// latent Z₀ and, on request, the per-step attention caches the λ
    /// backward pass needs.
    pub(crate) fn forward(
        &self,
        lambda: &Array2<f64>,
        seed: u64,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<GenCache>), GeneratorError> {
        self.check_lambda(lambda)?;
        let hw = self.h * self.w;
        let mut z = initial_latent_raw(self.h, self.w, seed);
        let mut cache = want_cache.then(|| GenCache { steps: Vec::with_capacity(self.steps) });
        let mut coverage = vec![0.0f64; hw];

        for col in 0..self.steps {
            let (p_d, a_d) = self.global.attend(&z);

            coverage.fill(0.0);
            for (i, mask) in self.masks.iter().enumerate() {
                let l = lambda[[i, col]];
                for &(p, wt) in &mask.cells {
                    coverage[p] += l * wt;
                }
            }

            // O = Σ λ_i M_i A_i + (1 − Σ λ_i M_i) A_D, assembled literally.
            let mut out = a_d.clone();
            for (p, &s) in coverage.iter().enumerate() {
                if s != 0.0 {
                    let c = 1.0 - s;
                    for x in out.row_mut(p).iter_mut() {
                        *x *= c;
                    }
                }
            }
            let mut local_caches = Vec::with_capacity(self.locals.len());
            for (i, (text, mask)) in self.locals.iter().zip(&self.masks).enumerate() {
                let l = lambda[[i, col]];
                let m = mask.cells.len();
                let mut zi = Array2::zeros((m, LATENT_DIM));
                for (row, &(p, _)) in mask.cells.iter().enumerate() {
                    zi.row_mut(row).assign(&z.row(p));
                }
                let (p_i, a_i) = text.attend(&zi);
                for (row, &(p, wt)) in mask.cells.iter().enumerate() {
                    let wl = l * wt;
                    if wl != 0.0 {
                        for (x, &a) in out.row_mut(p).iter_mut().zip(a_i.row(row)) {
                            *x += wl * a;
                        }
                    }
                }
                if cache.is_some() {
                    local_caches.push((p_i, a_i));
                }
            }

            z.scaled_add(self.eta, &out);
            if let Some(c) = cache.as_mut() {
                c.steps.push(StepCache { p_d, a_d, locals: local_caches });
            }
        }
        Ok((z, cache))
    }

    /// Reverse pass through the update recurrence: gradient of a scalar loss
    /// w.r.t. λ given its gradient w.r.t. Z₀. Embeddings and masks are
    /// frozen, so λ and Z are the only differentiable inputs.
    pub(crate) fn backward_lambda(
        &self,
        cache: &GenCache,
        lambda: &Array2<f64>,
        d_z0: &Array2<f64>,
    ) -> Array2<f64> {
        assert_eq!(cache.steps.len(), self.steps);
        let hw = self.h * self.w;
        let mut dz = d_z0.clone();
        let mut d_lambda = Array2::zeros((self.locals.len(), self.steps));
        let mut coverage = vec![0.0f64; hw];

        for col in (0..self.steps).rev() {
            let sc = &cache.steps[col];
            coverage.fill(0.0);
            for (i, mask) in self.masks.iter().enumerate() {
                let l = lambda[[i, col]];
                for &(p, wt) in &mask.cells {
                    coverage[p] += l * wt;
                }
            }

            // dλ_{i,col} = η Σ_p wt ⟨dz(p), A_i(p) − A_D(p)⟩.
            for (i, mask) in self.masks.iter().enumerate() {
                let a_i = &sc.locals[i].1;
                let mut acc = 0.0;
                for (row, &(p, wt)) in mask.cells.iter().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..LATENT_DIM {
                        dot += dz[[p, j]] * (a_i[[row, j]] - sc.a_d[[p, j]]);
                    }
                    acc += wt * dot;
                }
                d_lambda[[i, col]] = self.eta * acc;
            }

            // dA_D = η(1−coverage)·dz, then the attention VJP onto Z.
            let mut da_d = dz.clone();
            for (p, &s) in coverage.iter().enumerate() {
                let c = self.eta * (1.0 - s);
                for x in da_d.row_mut(p).iter_mut() {
                    *x *= c;
                }
            }
            let mut dz_next = dz.clone();
            dz_next += &self.global.attend_vjp(&sc.p_d, &da_d);

            for (i, (text, mask)) in self.locals.iter().zip(&self.masks).enumerate() {
                let l = lambda[[i, col]];
                let m = mask.cells.len();
                if m == 0 {
                    continue;
                }
                let mut da_i = Array2::zeros((m, LATENT_DIM));
                for (row, &(p, wt)) in mask.cells.iter().enumerate() {
                    let c = self.eta * l * wt;
                    if c != 0.0 {
                        for (x, &g) in da_i.row_mut(row).iter_mut().zip(dz.row(p)) {
                            *x = c * g;
                        }
                    }
                }
                let dzi = text.attend_vjp(&sc.locals[i].0, &da_i);
                for (row, &(p, _)) in mask.cells.iter().enumerate() {
                    for (x, &g) in dz_next.row_mut(p).iter_mut().zip(dzi.row(row)) {
                        *x += g;
                    }
                }
            }
            dz = dz_next;
        }
        d_lambda
    }

    /// Sigmoid readout of the final latent into channel activations.
    pub(crate) fn decode(&self, z0: &Array2<f64>) -> ToyScene {
        let (h, w) = (self.h, self.w);
        let acts = z0.dot(&self.readout.t());
        let mut noun = Array3::zeros((NOUN_COUNT, h, w));
        let mut color = Array3::zeros((COLOR_COUNT, h, w));
        for p in 0..h * w {
            let (y, x) = (p / w, p % w);
            for n in 0..NOUN_COUNT {
                let a = self.readout_gain * (acts[[p, n]] - self.readout_threshold);
                noun[[n, y, x]] = sigmoid(a);
            }
            for c in 0..COLOR_COUNT {
                let a = self.readout_gain * (acts[[p, NOUN_COUNT + c]] - self.readout_threshold);
                color[[c, y, x]] = sigmoid(a);
            }
        }
        ToyScene { noun, color }
    }

    /// Gradient w.r.t. Z₀ given gradients on the decoded channels.
    pub(crate) fn decode_backward(
        &self,
        scene: &ToyScene,
        d_noun: &Array3<f64>,
        d_color: &Array3<f64>,
    ) -> Array2<f64> {
        let (h, w) = (self.h, self.w);
        let mut d_acts = Array2::zeros((h * w, NOUN_COUNT + COLOR_COUNT));
        for p in 0..h * w {
            let (y, x) = (p / w, p % w);
            for n in 0..NOUN_COUNT {
                let s = scene.noun[[n, y, x]];
                d_acts[[p, n]] = d_noun[[n, y, x]] * self.readout_gain * s * (1.0 - s);
            }
            for c in 0..COLOR_COUNT {
                let s = scene.color[[c, y, x]];
                d_acts[[p, NOUN_COUNT + c]] =
                    d_color[[c, y, x]] * self.readout_gain * s * (1.0 - s);
            }
        }
        d_acts.dot(&self.readout)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn initial_latent_raw(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Array2::zeros((h * w, LATENT_DIM));
    for x in z.iter_mut() {
        *x = StandardNormal.sample(&mut rng);
    }
    z
}

/// The seeded starting latent Z_T as an (h·w)×d matrix, row p = pixel
/// (p / w, p % w). Exposed so closed-form tests can replay the loop.
pub fn initial_latent(cfg: &GeneratorConfig, seed: u64) -> Array2<f64> {
    initial_latent_raw(cfg.grid, cfg.grid, seed)
}

/// Full pipeline on binary region masks derived from the layout.
pub fn generate(
    desc: &SceneDescription,
    layout: &Layout,
    lambda: &Array2<f64>,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<ToyScene, GeneratorError> {
    let masks = region_mask(layout, (cfg.grid, cfg.grid))?;
    generate_with_masks(desc, &masks, lambda, cfg, seed)
}

/// Pipeline on caller-supplied region weights (binary or soft).
pub fn generate_with_masks(
    desc: &SceneDescription,
    masks: &[Array2<f64>],
    lambda: &Array2<f64>,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<ToyScene, GeneratorError> {
    let prep = prepare(desc, masks, cfg)?;
    let (z0, _) = prep.forward(lambda, seed, false)?;
    Ok(prep.decode(&z0))
}

/// Bilinear resample map from a source rectangle onto the CROP_SIZE square.
/// Per output coordinate: two source taps and the high-side weight.
pub(crate) struct CropMap {
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn axis_taps(lo: usize, hi: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let src_len = hi - lo;
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, src_len as f64 - 1.0);
            let f = s.floor();
            let a = f as usize;
            let b = (a + 1).min(src_len - 1);
            (lo + a, lo + b, s - f)
        })
        .collect()
}

/// Minimum square bounding the region, clipped to the grid.
fn region_square(obj: &LayoutObject, grid: (usize, usize)) -> (usize, usize, usize, usize) {
    let (h, w) = grid;
    let mut min_x = usize::MAX;
    let mut max_x = 0;
    let mut min_y = usize::MAX;
    let mut max_y = 0;
    let mut any = false;
    let single = Layout { objects: vec![obj.clone()] };
    let mask = &region_mask(&single, grid).expect("region within grid")[0];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] > 0.0 {
                any = true;
                min_x = min_x.min(x);
                max_x = max_x.max(x);
                min_y = min_y.min(y);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        // Degenerate region: fall back to the pixel containing the center.
        let x = ((obj.cx * w as f64).floor() as usize).min(w - 1);
        let y = ((obj.cy * h as f64).floor() as usize).min(h - 1);
        (min_x, max_x, min_y, max_y) = (x, x, y, y);
    }
    let bw = max_x - min_x + 1;
    let bh = max_y - min_y + 1;
    let side = bw.max(bh);
    let expand = |lo: usize, len: usize, limit: usize| {
        let grow = side - len;
        let lo = lo.saturating_sub(grow / 2);
        let hi = (lo + side).min(limit);
        let lo = hi.saturating_sub(side);
        (lo, hi)
    };
    let (x0, x1) = expand(min_x, bw, w);
    let (y0, y1) = expand(min_y, bh, h);
    (x0, x1, y0, y1)
}

pub(crate) fn crop_map(obj: &LayoutObject, grid: (usize, usize)) -> CropMap {
    let (x0, x1, y0, y1) = region_square(obj, grid);
    CropMap { ys: axis_taps(y0, y1, CROP_SIZE), xs: axis_taps(x0, x1, CROP_SIZE) }
}

fn resample_channel<F: Fn(usize, usize) -> f64>(map: &CropMap, read: F) -> Array2<f64> {
    let mut out = Array2::zeros((CROP_SIZE, CROP_SIZE));
    for (oy, &(ya, yb, wy)) in map.ys.iter().enumerate() {
        for (ox, &(xa, xb, wx)) in map.xs.iter().enumerate() {
            out[[oy, ox]] = (1.0 - wy) * ((1.0 - wx) * read(ya, xa) + wx * read(ya, xb))
                + wy * ((1.0 - wx) * read(yb, xa) + wx * read(yb, xb));
        }
    }
    out
}

/// Minimum bounding square of the region, clipped to the grid, resized to
/// CROP_SIZE×CROP_SIZE by bilinear interpolation.
pub fn crop_region(scene: &ToyScene, obj: &LayoutObject) -> ToyScene {
    let map = crop_map(obj, scene.dims());
    crop_with_map(scene, &map)
}

pub(crate) fn crop_with_map(scene: &ToyScene, map: &CropMap) -> ToyScene {
    let mut noun = Array3::zeros((NOUN_COUNT, CROP_SIZE, CROP_SIZE));
    let mut color = Array3::zeros((COLOR_COUNT, CROP_SIZE, CROP_SIZE));
    for n in 0..NOUN_COUNT {
        noun.index_axis_mut(ndarray::Axis(0), n)
            .assign(&resample_channel(map, |y, x| scene.noun[[n, y, x]]));
    }
    for c in 0..COLOR_COUNT {
        color
            .index_axis_mut(ndarray::Axis(0), c)
            .assign(&resample_channel(map, |y, x| scene.color[[c, y, x]]));
    }
    ToyScene { noun, color }
}

/// Scatters patch-channel gradients back onto scene channels through the
/// same bilinear taps.
pub(crate) fn crop_backward_channel(
    map: &CropMap,
    d_patch: &Array2<f64>,
    d_scene: &mut Array2<f64>,
) {
    for (oy, &(ya, yb, wy)) in map.ys.iter().enumerate() {
        for (ox, &(xa, xb, wx)) in map.xs.iter().enumerate() {
            let g = d_patch[[oy, ox]];
            d_scene[[ya, xa]] += g * (1.0 - wy) * (1.0 - wx);
            d_scene[[ya, xb]] += g * (1.0 - wy) * wx;
            d_scene[[yb, xa]] += g * wy * (1.0 - wx);
            d_scene[[yb, xb]] += g * wy * wx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention;
    use crate::predictor::RegionShape;
    use crate::scene_dsl::parse_description;

    #[test]
    fn embedding_table_geometry() {
        let cfg = GeneratorConfig::default();
        let emb = TokenEmbeddings::new(&cfg);
        for n in 0..NOUN_COUNT {
            let d = emb.noun_direction(n);
            assert!((d.dot(&d) - 1.0).abs() < 1e-12, "noun {n} not unit norm");
        }
        for c in 0..COLOR_COUNT {
            let d = emb.color_direction(c);
            assert!((d.dot(&d) - 1.0).abs() < 1e-12);
        }
        // Distinct colors: orthogonal basis directions.
        for a in 0..COLOR_COUNT {
            for b in 0..a {
                let cos = emb.color_direction(a).dot(&emb.color_direction(b));
                assert!(cos.abs() < 0.2, "colors {a},{b} cos={cos}");
            }
        }
        // Nouns never touch color coordinates, so noun saturation cannot
        // shift a color readout.
        for n in 0..NOUN_COUNT {
            for c in 0..COLOR_COUNT {
                assert_eq!(emb.noun_direction(n)[c], 0.0, "noun {n} spills into color {c}");
            }
        }
        // Distinct nouns are antipodal (sign-distinct under a signed readout)
        // or stay under the Hadamard/basis cross-talk bound.
        for a in 0..NOUN_COUNT {
            for b in 0..a {
                let cos = emb.noun_direction(a).dot(&emb.noun_direction(b));
                assert!(
                    cos.abs() <= 1.0 / 8.0f64.sqrt() + 1e-12 || cos < -0.99,
                    "nouns {a},{b} cos={cos}"
                );
            }
        }
        let fw = emb.table.row(vocab::token_id("photo").unwrap());
        assert!((fw.dot(&fw).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_deterministic_and_counts_rows() {
        let cfg = GeneratorConfig::default();
        let emb = TokenEmbeddings::new(&cfg);
        let a = emb.embed_text("A photo of a red car").unwrap();
        let b = emb.embed_text("A photo of a red car").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nrows(), 6);
        assert!(emb.embed_text("a zebra").is_err());
    }

    /// Independent K/V construction: one row per token occurrence, no dedup,
    /// function-word scales applied straight from the config.
    fn reference_kv(
        emb: &TokenEmbeddings,
        text: &str,
        cfg: &GeneratorConfig,
    ) -> (Array2<f64>, Array2<f64>) {
        let e = emb.embed_text(text).unwrap();
        let mut k = e.clone();
        let mut v = e;
        for (row, (tok, _)) in vocab::tokenize(text).iter().enumerate() {
            let (ks, vs) = if vocab::is_function_word(tok) {
                (1.0, cfg.v_gain * cfg.fw_value_scale)
            } else {
                (1.0, cfg.v_gain)
            };
            for j in 0..LATENT_DIM {
                k[[row, j]] *= ks;
                v[[row, j]] *= vs;
            }
        }
        (k, v)
    }

    #[test]
    fn dedup_softmax_matches_plain_sequence() {
        let cfg = GeneratorConfig::default();
        let emb = TokenEmbeddings::new(&cfg);
        let text = "a photo of a red car";
        let attn = TextAttn::build(&emb, text, &cfg).unwrap();
        assert_eq!(attn.keff.nrows(), 5, "one duplicate collapses");

        let (k, v) = reference_kv(&emb, text, &cfg);
        let z = initial_latent_raw(2, 2, 9);
        let q = z.mapv(|x| x * cfg.q_gain);
        let reference = attention::cross_attention(q.view(), k.view(), v.view()).unwrap();
        let (_, fast) = attn.attend(&z);
        for (a, b) in reference.iter().zip(fast.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_identity_when_square_matches_patch_size() {
        // r=0.25 at center of a 32 grid covers exactly pixels 8..24.
        let obj =
            LayoutObject { id: 1, cx: 0.5, cy: 0.5, shape: RegionShape::Circle { r: 0.25 } };
        let map = crop_map(&obj, (32, 32));
        for (i, &(a, b, w)) in map.ys.iter().enumerate() {
            assert_eq!(a, 8 + i);
            assert_eq!(b, (8 + i + 1).min(23));
            assert!(w.abs() < 1e-12);
        }
        let mut scene = ToyScene {
            noun: Array3::zeros((NOUN_COUNT, 32, 32)),
            color: Array3::zeros((COLOR_COUNT, 32, 32)),
        };
        for y in 0..32 {
            for x in 0..32 {
                scene.noun[[3, y, x]] = (x + 32 * y) as f64 / 1024.0;
            }
        }
        let patch = crop_with_map(&scene, &map);
        for dy in 0..CROP_SIZE {
            for dx in 0..CROP_SIZE {
                assert_eq!(patch.noun[[3, dy, dx]], scene.noun[[3, dy + 8, dx + 8]]);
            }
        }
    }

    #[test]
    fn corner_region_clips_to_grid() {
        let obj = LayoutObject { id: 1, cx: 0.02, cy: 0.02, shape: RegionShape::Circle { r: 0.2 } };
        let (x0, x1, y0, y1) = region_square(&obj, (32, 32));
        assert_eq!((x0, y0), (0, 0));
        assert!(x1 <= 32 && y1 <= 32);
        assert_eq!(x1 - x0, y1 - y0, "clipped square stays square away from the far edge");
    }

    #[test]
    fn full_grid_region_crops_whole_scene() {
        let obj = LayoutObject { id: 1, cx: 0.5, cy: 0.5, shape: RegionShape::Circle { r: 0.8 } };
        let (x0, x1, y0, y1) = region_square(&obj, (32, 32));
        assert_eq!((x0, x1, y0, y1), (0, 32, 0, 32));
    }

    #[test]
    fn crop_backward_matches_fd() {
        let obj = LayoutObject { id: 1, cx: 0.3, cy: 0.6, shape: RegionShape::Circle { r: 0.17 } };
        let map = crop_map(&obj, (16, 16));
        let mut src = Array2::zeros((16, 16));
        for (i, x) in src.iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin();
        }
        let d_patch = Array2::from_shape_fn((CROP_SIZE, CROP_SIZE), |(y, x)| {
            ((y * 16 + x) as f64 * 0.11).cos()
        });
        let mut d_src = Array2::zeros((16, 16));
        crop_backward_channel(&map, &d_patch, &mut d_src);
        let loss = |s: &Array2<f64>| {
            let patch = resample_channel(&map, |y, x| s[[y, x]]);
            (&patch * &d_patch).sum()
        };
        let h = 1e-6;
        for idx in [(0, 0), (5, 9), (11, 3), (15, 15)] {
            let mut plus = src.clone();
            plus[idx] += h;
            let mut minus = src.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - d_src[idx]).abs() < 1e-6, "{idx:?}");
        }
    }

    #[test]
    fn lambda_backward_matches_fd() {
        use crate::scene_dsl::{generate_dataset, CellConfig};
        let cfg = GeneratorConfig { grid: 8, steps: 4, ..Default::default() };
        let items =
            generate_dataset(&[CellConfig::new(2, 1, 1), CellConfig::new(3, 2, 1)], 41, true)
                .unwrap();
        for (t, item) in items.iter().enumerate() {
            let desc = &item.desc;
            let n = desc.objects.len();
            let masks: Vec<Array2<f64>> = (0..n)
                .map(|i| {
                    attention::soft_region(
                        (0.2 + 0.3 * i as f64, 0.3 + 0.2 * i as f64),
                        0.15,
                        (8, 8),
                    )
                })
                .collect();
            let prep = prepare(desc, &masks, &cfg).unwrap();
            let mut lambda = Array2::zeros((n, cfg.steps));
            for (i, x) in lambda.iter_mut().enumerate() {
                *x = 0.3 + 0.1 * ((i * 7 % 5) as f64);
            }
            // Loss functional: fixed random projection of Z₀.
            let dir = initial_latent_raw(8, 8, 1234 + t as u64);
            let seed = 77 + t as u64;
            let (z0, cache) = prep.forward(&lambda, seed, true).unwrap();
            let d_lambda = prep.backward_lambda(&cache.unwrap(), &lambda, &dir);
            let loss = |l: &Array2<f64>| {
                let (z, _) = prep.forward(l, seed, false).unwrap();
                (&z * &dir).sum()
            };
            let h = 1e-5;
            for idx in [(0, 0), (0, cfg.steps - 1), (n - 1, 1), (n - 1, cfg.steps - 2)] {
                let mut plus = lambda.clone();
                plus[idx] += h;
                let mut minus = lambda.clone();
                minus[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = d_lambda[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0),
                    "item {t} idx {idx:?}: fd={fd} analytic={an}"
                );
            }
            let _ = (z0, loss);
        }
    }

    #[test]
    fn empty_mask_gets_zero_gradient() {
        let cfg = GeneratorConfig { grid: 8, steps: 3, ..Default::default() };
        let desc = SceneDescription {
            global_text: "a photo of a red car and a dog".into(),
            objects: vec![
                crate::scene_dsl::ObjectSpec { id: 1, noun: "car".into(), color: Some("red".into()) },
                crate::scene_dsl::ObjectSpec { id: 2, noun: "dog".into(), color: None },
            ],
            relations: vec![],
            local_texts: vec!["A photo of a red car".into(), "A photo of a dog".into()],
            mention_token_positions: vec![5, 8],
        };
        let masks = vec![attention::soft_region((0.3, 0.3), 0.2, (8, 8)), Array2::zeros((8, 8))];
        let prep = prepare(&desc, &masks, &cfg).unwrap();
        let lambda = Array2::from_elem((2, 3), 0.5);
        let (_, cache) = prep.forward(&lambda, 5, true).unwrap();
        let dir = initial_latent_raw(8, 8, 6);
        let d_lambda = prep.backward_lambda(&cache.unwrap(), &lambda, &dir);
        for col in 0..3 {
            assert_eq!(d_lambda[[1, col]], 0.0);
            assert_ne!(d_lambda[[0, col]], 0.0);
        }
    }

    #[test]
    fn generate_rejects_bad_shapes() {
        let cfg = GeneratorConfig { grid: 8, steps: 2, ..Default::default() };
        let desc = parse_description("a red car is to the left of a black mailbox").unwrap();
        let masks = vec![Array2::zeros((8, 8)); 2];
        let lambda_bad = Array2::zeros((2, 3));
        assert!(matches!(
            generate_with_masks(&desc, &masks, &lambda_bad, &cfg, 0),
            Err(GeneratorError::Shape(_))
        ));
        let lambda = Array2::zeros((2, 2));
        assert!(generate_with_masks(&desc, &masks, &lambda, &cfg, 0).is_ok());
        assert!(matches!(
            generate_with_masks(&desc, &masks[..1], &lambda, &cfg, 0),
            Err(GeneratorError::Shape(_))
        ));
    }
}
