//! Sequence encoder: token embeddings + sinusoidal positions feed a stack
//! of pre-LN self-attention blocks; a linear head read at each object's
//! first-mention position emits the 5K raw mixture numbers.
//!
//! Parameters live in one flat Vec<f64> addressed through a named tensor
//! registry so the optimizer, checkpoints, and finite differencing all see
//! the same storage.

use super::{GmmParams, PredictorError, VARIANCE_FLOOR};
use crate::scene_dsl::SceneDescription;
use crate::vocab;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_model: 64, blocks: 2, heads: 4, d_ff: 128, k: 5 }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        debug_assert_eq!(self.d_model % self.heads, 0);
        self.d_model / self.heads
    }

    /// 5 numbers per component: mean x/y, logvar x/y, weight logit.
    pub fn head_out(&self) -> usize {
        5 * self.k
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ParamIndex {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl ParamIndex {
    pub fn build(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            tensors.push(TensorSpec { name, rows, cols, offset });
            offset += rows * cols;
        };
        push("embed".into(), vocab::vocab_size(), d);
        for b in 0..cfg.blocks {
            for t in ["ln1.g", "ln1.b"] {
                push(format!("b{b}.{t}"), 1, d);
            }
            for t in ["wq", "wk", "wv", "wo"] {
                push(format!("b{b}.{t}"), d, d);
            }
            for t in ["bq", "bk", "bv", "bo"] {
                push(format!("b{b}.{t}"), 1, d);
            }
            for t in ["ln2.g", "ln2.b"] {
                push(format!("b{b}.{t}"), 1, d);
            }
            push(format!("b{b}.w1"), d, cfg.d_ff);
            push(format!("b{b}.b1"), 1, cfg.d_ff);
            push(format!("b{b}.w2"), cfg.d_ff, d);
            push(format!("b{b}.b2"), 1, d);
        }
        push("final.g".into(), 1, d);
        push("final.b".into(), 1, d);
        push("head.w".into(), d, cfg.head_out());
        push("head.b".into(), 1, cfg.head_out());
        ParamIndex { tensors, total: offset }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    fn spec(&self, name: &str) -> &TensorSpec {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn view<'a>(&self, flat: &'a [f64], name: &str) -> ArrayView2<'a, f64> {
        let s = self.spec(name);
        ArrayView2::from_shape((s.rows, s.cols), &flat[s.offset..s.offset + s.rows * s.cols])
            .expect("registry shape")
    }

    pub fn view_mut<'a>(&self, flat: &'a mut [f64], name: &str) -> ArrayViewMut2<'a, f64> {
        let s = self.spec(name);
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut flat[s.offset..s.offset + s.rows * s.cols])
            .expect("registry shape")
    }
}

#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub cfg: EncoderConfig,
    pub index: ParamIndex,
    pub flat: Vec<f64>,
    pub vocab_hash: String,
}

impl PredictorParams {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let index = ParamIndex::build(&cfg);
        let mut flat = vec![0.0; index.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        for spec in index.tensors() {
            let slice = &mut flat[spec.offset..spec.offset + spec.rows * spec.cols];
            let is_gain = spec.name.ends_with("ln1.g")
                || spec.name.ends_with("ln2.g")
                || spec.name == "final.g";
            let is_bias = spec.rows == 1;
            if is_gain {
                slice.fill(1.0);
            } else if !is_bias {
                for v in slice.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        let mut params = PredictorParams { cfg, index, flat, vocab_hash: vocab::vocab_hash() };
        // Start mixture spreads near σ ≈ 0.22 instead of σ = 1 so early
        // NLL terms are informative for centers inside the unit square.
        {
            let mut hb = params.index.view_mut(&mut params.flat, "head.b");
            for k in 0..cfg.k {
                hb[[0, 2 * cfg.k + k]] = -3.0;
                hb[[0, 3 * cfg.k + k]] = -3.0;
            }
        }
        params
    }
}

/// Raw head output layout for component k of K:
///   [k]=mean x, [K+k]=mean y, [2K+k]=logvar x, [3K+k]=logvar y, [4K+k]=weight logit.
pub(crate) fn raw_to_gmm(raw: &[f64], k: usize) -> GmmParams {
    debug_assert_eq!(raw.len(), 5 * k);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let means: Vec<(f64, f64)> = (0..k).map(|i| (sig(raw[i]), sig(raw[k + i]))).collect();
    let vars: Vec<(f64, f64)> = (0..k)
        .map(|i| (VARIANCE_FLOOR + raw[2 * k + i].exp(), VARIANCE_FLOOR + raw[3 * k + i].exp()))
        .collect();
    let logits = &raw[4 * k..5 * k];
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / z).collect();
    GmmParams { means, vars, weights }
}

/// Chain rule through the raw→GmmParams transform; gradients arrive on the
/// transformed quantities and accumulate onto the raw head outputs.
pub(crate) fn raw_to_gmm_backward(
    gmm: &GmmParams,
    d_means: &[(f64, f64)],
    d_vars: &[(f64, f64)],
    d_weights: &[f64],
    d_raw: &mut [f64],
) {
    let k = gmm.k();
    for i in 0..k {
        let (mx, my) = gmm.means[i];
        d_raw[i] += d_means[i].0 * mx * (1.0 - mx);
        d_raw[k + i] += d_means[i].1 * my * (1.0 - my);
        d_raw[2 * k + i] += d_vars[i].0 * (gmm.vars[i].0 - VARIANCE_FLOOR);
        d_raw[3 * k + i] += d_vars[i].1 * (gmm.vars[i].1 - VARIANCE_FLOOR);
    }
    // Softmax Jacobian: dlogit_k = w_k (d_w_k − Σ_j w_j d_w_j).
    let dot: f64 = (0..k).map(|j| gmm.weights[j] * d_weights[j]).sum();
    for i in 0..k {
        d_raw[4 * k + i] += gmm.weights[i] * (d_weights[i] - dot);
    }
}

fn sinusoidal_positions(len: usize, d: usize) -> Array2<f64> {
    let mut pos = Array2::zeros((len, d));
    for p in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pos[[p, 2 * i]] = (p as f64 * freq).sin();
            pos[[p, 2 * i + 1]] = (p as f64 * freq).cos();
        }
    }
    pos
}

fn gelu(x: f64) -> f64 {
    // tanh approximation; smooth everywhere, which keeps finite differences honest.
    const C: f64 = 0.7978845608028654; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LnCache {
    /// Row-wise normalized input x̂ before gain/shift.
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    gamma: ArrayView2<f64>,
    beta: ArrayView2<f64>,
) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (x[[r, c]] - mean) * rs;
            xhat[[r, c]] = h;
            out[[r, c]] = h * gamma[[0, c]] + beta[[0, c]];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    idx: &ParamIndex,
    flat: &[f64],
    grad: &mut [f64],
    gamma_name: &str,
    beta_name: &str,
) -> Array2<f64> {
    let (n, d) = d_out.dim();
    let gamma = idx.view(flat, gamma_name).to_owned();
    {
        let mut d_gamma = idx.view_mut(grad, gamma_name);
        for r in 0..n {
            for c in 0..d {
                d_gamma[[0, c]] += d_out[[r, c]] * cache.xhat[[r, c]];
            }
        }
    }
    {
        let mut d_beta = idx.view_mut(grad, beta_name);
        for r in 0..n {
            for c in 0..d {
                d_beta[[0, c]] += d_out[[r, c]];
            }
        }
    }
    let mut dx = Array2::zeros((n, d));
    let inv_d = 1.0 / d as f64;
    for r in 0..n {
        let mut sum_dh = 0.0;
        let mut sum_dh_x = 0.0;
        for c in 0..d {
            let dh = d_out[[r, c]] * gamma[[0, c]];
            sum_dh += dh;
            sum_dh_x += dh * cache.xhat[[r, c]];
        }
        for c in 0..d {
            let dh = d_out[[r, c]] * gamma[[0, c]];
            dx[[r, c]] = cache.rstd[r] * (dh - inv_d * sum_dh - cache.xhat[[r, c]] * inv_d * sum_dh_x);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.dot(&w);
    for mut row in out.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += b[[0, c]];
        }
    }
    out
}

fn linear_backward(
    x: &Array2<f64>,
    d_out: &Array2<f64>,
    idx: &ParamIndex,
    flat: &[f64],
    grad: &mut [f64],
    w_name: &str,
    b_name: &str,
) -> Array2<f64> {
    let w = idx.view(flat, w_name);
    let dx = d_out.dot(&w.t());
    {
        let mut d_w = idx.view_mut(grad, w_name);
        let contribution = x.t().dot(d_out);
        d_w += &contribution;
    }
    {
        let mut d_b = idx.view_mut(grad, b_name);
        for row in d_out.rows() {
            for (c, v) in row.iter().enumerate() {
                d_b[[0, c]] += v;
            }
        }
    }
    dx
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per head.
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    token_ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    y: Array2<f64>,
    pub gmms: Vec<GmmParams>,
}

fn token_ids(desc: &SceneDescription) -> Result<Vec<usize>, PredictorError> {
    vocab::tokenize(&desc.global_text)
        .into_iter()
        .map(|(tok, _)| vocab::token_id(&tok).ok_or_else(|| PredictorError::Vocab(tok.to_string())))
        .collect()
}

pub(crate) fn forward(
    desc: &SceneDescription,
    params: &PredictorParams,
) -> Result<ForwardCache, PredictorError> {
    let cfg = &params.cfg;
    let idx = &params.index;
    let flat = &params.flat[..];
    let ids = token_ids(desc)?;
    let len = ids.len();
    let d = cfg.d_model;
    for &p in &desc.mention_token_positions {
        if p >= len {
            return Err(PredictorError::Shape(format!(
                "mention position {p} outside sequence of length {len}"
            )));
        }
    }

    let embed = idx.view(flat, "embed");
    let mut x = sinusoidal_positions(len, d);
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..d {
            x[[r, c]] += embed[[id, c]];
        }
    }

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let n = |t: &str| format!("b{b}.{t}");
        let (h1, ln1) = layer_norm(&x, idx.view(flat, &n("ln1.g")), idx.view(flat, &n("ln1.b")));
        let q = linear(&h1, idx.view(flat, &n("wq")), idx.view(flat, &n("bq")));
        let k = linear(&h1, idx.view(flat, &n("wk")), idx.view(flat, &n("bk")));
        let v = linear(&h1, idx.view(flat, &n("wv")), idx.view(flat, &n("bv")));
        let mut probs = Vec::with_capacity(cfg.heads);
        let mut concat = Array2::zeros((len, d));
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut logits = qh.dot(&kh.t());
            logits *= scale;
            softmax_rows(&mut logits);
            let oh = logits.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
            probs.push(logits);
        }
        let attn = linear(&concat, idx.view(flat, &n("wo")), idx.view(flat, &n("bo")));
        let x_mid = &x + &attn;
        let (h2, ln2) =
            layer_norm(&x_mid, idx.view(flat, &n("ln2.g")), idx.view(flat, &n("ln2.b")));
        let ff_pre = linear(&h2, idx.view(flat, &n("w1")), idx.view(flat, &n("b1")));
        let ff_act = ff_pre.mapv(gelu);
        let ff_out = linear(&ff_act, idx.view(flat, &n("w2")), idx.view(flat, &n("b2")));
        let x_out = &x_mid + &ff_out;
        blocks.push(BlockCache { ln1, h1, q, k, v, probs, concat, ln2, h2, ff_pre, ff_act });
        x = x_out;
    }

    let (y, ln_f) = layer_norm(&x, idx.view(flat, "final.g"), idx.view(flat, "final.b"));
    let head_w = idx.view(flat, "head.w");
    let head_b = idx.view(flat, "head.b");
    let mut gmms = Vec::with_capacity(desc.mention_token_positions.len());
    for &p in &desc.mention_token_positions {
        let row = y.row(p);
        let mut raw = vec![0.0; cfg.head_out()];
        for (c, r) in raw.iter_mut().enumerate() {
            let mut acc = head_b[[0, c]];
            for j in 0..d {
                acc += row[j] * head_w[[j, c]];
            }
            *r = acc;
        }
        gmms.push(raw_to_gmm(&raw, cfg.k));
    }
    Ok(ForwardCache { token_ids: ids, blocks, ln_f, y, gmms })
}

pub(crate) fn forward_gmms(
    desc: &SceneDescription,
    params: &PredictorParams,
) -> Result<Vec<GmmParams>, PredictorError> {
    Ok(forward(desc, params)?.gmms)
}

/// Accumulates parameter gradients for one item given gradients on the raw
/// head outputs at each mention.
pub(crate) fn backward(
    desc: &SceneDescription,
    params: &PredictorParams,
    cache: &ForwardCache,
    d_raws: &[Vec<f64>],
    grad: &mut [f64],
) {
    let cfg = &params.cfg;
    let idx = &params.index;
    let flat = &params.flat[..];
    let d = cfg.d_model;
    let len = cache.token_ids.len();

    let mut dy = Array2::zeros((len, d));
    {
        let head_w = idx.view(flat, "head.w").to_owned();
        for (m, &p) in desc.mention_token_positions.iter().enumerate() {
            for j in 0..d {
                let mut acc = 0.0;
                for c in 0..cfg.head_out() {
                    acc += d_raws[m][c] * head_w[[j, c]];
                }
                dy[[p, j]] += acc;
            }
        }
        let mut d_head_w = idx.view_mut(grad, "head.w");
        for (m, &p) in desc.mention_token_positions.iter().enumerate() {
            let row = cache.y.row(p);
            for c in 0..cfg.head_out() {
                let g = d_raws[m][c];
                for j in 0..d {
                    d_head_w[[j, c]] += row[j] * g;
                }
            }
        }
    }
    {
        let mut d_head_b = idx.view_mut(grad, "head.b");
        for d_raw in d_raws {
            for (c, g) in d_raw.iter().enumerate() {
                d_head_b[[0, c]] += g;
            }
        }
    }

    let mut dx = layer_norm_backward(&dy, &cache.ln_f, idx, flat, grad, "final.g", "final.b");

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for b in (0..cfg.blocks).rev() {
        let bc = &cache.blocks[b];
        let n = |t: &str| format!("b{b}.{t}");

        // x_out = x_mid + FF(LN2(x_mid)); dx holds d(x_out) here.
        let d_ff_act = linear_backward(&bc.ff_act, &dx, idx, flat, grad, &n("w2"), &n("b2"));
        let mut d_ff_pre = d_ff_act;
        ndarray::Zip::from(&mut d_ff_pre).and(&bc.ff_pre).for_each(|g, &x| *g *= gelu_deriv(x));
        let d_h2 = linear_backward(&bc.h2, &d_ff_pre, idx, flat, grad, &n("w1"), &n("b1"));
        let d_from_ln2 =
            layer_norm_backward(&d_h2, &bc.ln2, idx, flat, grad, &n("ln2.g"), &n("ln2.b"));
        let d_x_mid = &dx + &d_from_ln2;

        // x_mid = x_in + concat·Wo + bo.
        let d_concat = linear_backward(&bc.concat, &d_x_mid, idx, flat, grad, &n("wo"), &n("bo"));
        let mut dq = Array2::zeros((len, d));
        let mut dk = Array2::zeros((len, d));
        let mut dv = Array2::zeros((len, d));
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &bc.probs[h];
            let d_oh = d_concat.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = bc.v.slice(ndarray::s![.., cols.clone()]);
            let qh = bc.q.slice(ndarray::s![.., cols.clone()]);
            let kh = bc.k.slice(ndarray::s![.., cols.clone()]);
            let dp = d_oh.dot(&vh.t());
            dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&p.t().dot(&d_oh));
            // Softmax rows: dS = P ⊙ (dP − rowdot(dP, P)), then the 1/√dh scale.
            let mut ds = Array2::zeros((len, len));
            for r in 0..len {
                let dot: f64 = (0..len).map(|c| dp[[r, c]] * p[[r, c]]).sum();
                for c in 0..len {
                    ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
                }
            }
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
        }
        let mut d_h1 = linear_backward(&bc.h1, &dq, idx, flat, grad, &n("wq"), &n("bq"));
        d_h1 += &linear_backward(&bc.h1, &dk, idx, flat, grad, &n("wk"), &n("bk"));
        d_h1 += &linear_backward(&bc.h1, &dv, idx, flat, grad, &n("wv"), &n("bv"));
        let d_from_ln1 =
            layer_norm_backward(&d_h1, &bc.ln1, idx, flat, grad, &n("ln1.g"), &n("ln1.b"));
        dx = &d_x_mid + &d_from_ln1;
    }

    // Positions are constants; only embedding rows receive gradient.
    let mut d_embed = idx.view_mut(grad, "embed");
    for (r, &id) in cache.token_ids.iter().enumerate() {
        for c in 0..d {
            d_embed[[id, c]] += dx[[r, c]];
        }
    }
}
