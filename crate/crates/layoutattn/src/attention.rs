//! Cross-attention and the masked spatial-temporal combination of global
//! and per-object local attention outputs.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), AttentionError> {
    if cond {
        Ok(())
    } else {
        Err(AttentionError::Shape(msg()))
    }
}

/// Row-wise softmax(Q Kᵀ / √d) V with row-max stabilization.
/// Q is (pixels × d); K, V are (tokens × d); the output is (pixels × d).
pub fn cross_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>, AttentionError> {
    let d = q.ncols();
    ensure(d >= 1 && q.nrows() >= 1, || "empty Q".into())?;
    ensure(k.ncols() == d, || format!("K has {} cols, Q has {d}", k.ncols()))?;
    ensure(k.nrows() == v.nrows(), || {
        format!("K has {} rows, V has {}", k.nrows(), v.nrows())
    })?;
    ensure(k.nrows() >= 1, || "no tokens".into())?;
    let p = attention_probs(q, k);
    Ok(p.dot(&v))
}

/// The softmax factor of `cross_attention`; rows sum to 1.
pub fn attention_probs(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    softmax_rows_inplace(&mut logits);
    logits
}

pub(crate) fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Spatial-temporal combination at one denoising step:
///   O = Σ_i λ_i · M_i ⊙ Attn(Q, K_i, V_i) + (1 − Σ_i λ_i · M_i) ⊙ Attn(Q, K_D, V_D)
/// Masks are h×w with pixel (x, y) mapping to Q row y·w + x; the mask value
/// broadcasts over all d channels. The global coefficient is used as the
/// formula gives it, even when it leaves [0, 1] (overlaps, λ outside [0,1]).
pub fn combined_attention(
    q: ArrayView2<f64>,
    global: (ArrayView2<f64>, ArrayView2<f64>),
    locals: &[(ArrayView2<f64>, ArrayView2<f64>)],
    masks: &[Array2<f64>],
    lambda_t: &[f64],
) -> Result<Array2<f64>, AttentionError> {
    let n = locals.len();
    ensure(masks.len() == n, || format!("{} masks for {n} locals", masks.len()))?;
    ensure(lambda_t.len() == n, || format!("{} weights for {n} locals", lambda_t.len()))?;
    for m in masks {
        ensure(m.len() == q.nrows(), || {
            format!("mask {}x{} does not cover {} query rows", m.nrows(), m.ncols(), q.nrows())
        })?;
    }

    let a_d = cross_attention(q, global.0, global.1)?;
    let d = a_d.ncols();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut weight_sum = vec![0.0; q.nrows()];
    for ((k_i, v_i), (m_i, &l_i)) in locals.iter().zip(masks.iter().zip(lambda_t)) {
        let a_i = cross_attention(q, *k_i, *v_i)?;
        ensure(a_i.ncols() == d, || "local V width differs from global".into())?;
        for (pix, &m) in m_i.iter().enumerate() {
            let w = l_i * m;
            if w != 0.0 {
                weight_sum[pix] += w;
                for c in 0..d {
                    out[[pix, c]] += w * a_i[[pix, c]];
                }
            }
        }
    }
    for (pix, &s) in weight_sum.iter().enumerate() {
        let c_glob = 1.0 - s;
        for c in 0..d {
            out[[pix, c]] += c_glob * a_d[[pix, c]];
        }
    }
    Ok(out)
}

/// Soft pixel region: G(x, y) = exp(−‖pixel − C‖² / (2σ²)) on an h×w grid,
/// normalized so the value at C itself is 1. Pixel centers sit at
/// ((x + 0.5) / w, (y + 0.5) / h) in normalized coordinates.
pub fn soft_region(center: (f64, f64), sigma: f64, grid: (usize, usize)) -> Array2<f64> {
    let (h, w) = grid;
    let mut g = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64;
            let py = (y as f64 + 0.5) / h as f64;
            let d2 = (px - center.0).powi(2) + (py - center.1).powi(2);
            g[[y, x]] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    g
}

/// `combined_attention` with continuous region weights G_i in place of the
/// binary masks; identical arithmetic, provided for the soft-region variant.
pub fn combined_attention_soft(
    q: ArrayView2<f64>,
    global: (ArrayView2<f64>, ArrayView2<f64>),
    locals: &[(ArrayView2<f64>, ArrayView2<f64>)],
    regions: &[Array2<f64>],
    lambda_t: &[f64],
) -> Result<Array2<f64>, AttentionError> {
    combined_attention(q, global, locals, regions, lambda_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randm(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn one_token_collapses_to_its_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = randm(5, 3, &mut rng);
        let k = randm(1, 3, &mut rng);
        let v = randm(1, 3, &mut rng);
        let out = cross_attention(q.view(), k.view(), v.view()).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(v.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Array2::zeros((4, 3));
        let k = randm(6, 3, &mut rng);
        let v = randm(6, 3, &mut rng);
        let out = cross_attention(q.view(), k.view(), v.view()).unwrap();
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = Array2::<f64>::zeros((4, 3));
        let k = Array2::<f64>::zeros((2, 5));
        let v = Array2::<f64>::zeros((2, 3));
        assert!(cross_attention(q.view(), k.view(), v.view()).is_err());
        let k2 = Array2::<f64>::zeros((2, 3));
        let v2 = Array2::<f64>::zeros((3, 3));
        assert!(cross_attention(q.view(), k2.view(), v2.view()).is_err());
    }

    #[test]
    fn soft_region_values() {
        let sigma = 0.13_f64;
        // Center exactly on the pixel (y=8, x=16) center.
        let c = (16.5 / 32.0, 8.5 / 32.0);
        let g = soft_region(c, sigma, (32, 32));
        assert!((g[[8, 16]] - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|&x| x > 0.0 && x <= 1.0));
        // The grid cell containing C holds the maximum.
        let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(g[[8, 16]], gmax);
        // Half value at distance σ·√(2 ln 2): pick a pixel offset along x of
        // that distance by checking the closed form directly.
        let r_half = sigma * (2.0_f64 * 2.0_f64.ln()).sqrt();
        let val = (-(r_half * r_half) / (2.0 * sigma * sigma)).exp();
        assert!((val - 0.5).abs() < 1e-12);
        // Large σ flattens to 1.
        let flat = soft_region((0.5, 0.5), 1e6, (8, 8));
        assert!(flat.iter().all(|&x| (x - 1.0).abs() < 1e-9));
    }
}
