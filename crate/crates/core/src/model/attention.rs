//! Pixel-to-prompt cross-attention and the fixed 2-D sinusoidal encoding.

use nalgebra::DMatrix;

/// Fixed sinusoidal encoding of `(row, col)`; the first half of the channels
/// encode the row, the second half the column.
pub fn positional_encoding(height: usize, width: usize, dim: usize) -> DMatrix<f64> {
    let half = dim.div_ceil(2).max(1);
    DMatrix::from_fn(height * width, dim, |n, j| {
        let (row, col) = (n / width, n % width);
        let (coord, k) = if j < half { (row, j) } else { (col, j - half) };
        let pair = (k / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / half as f64);
        let angle = coord as f64 * freq;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub(crate) struct AttentionCache {
    /// `G + pe`
    pub keys: DMatrix<f64>,
    /// Row-softmax weights, `N × u`.
    pub weights: DMatrix<f64>,
}

pub(crate) fn softmax_rows(m: &mut DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let data = m.as_mut_slice();
    for r in 0..rows {
        let max = (0..cols).map(|j| data[j * rows + r]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..cols {
            let v = (data[j * rows + r] - max).exp();
            data[j * rows + r] = v;
            total += v;
        }
        for j in 0..cols {
            data[j * rows + r] /= total;
        }
    }
}

/// Returns `softmax((g + pe) pᵀ / √b) p`, the residual added to `g`.
pub(crate) fn attention_forward(
    g: &DMatrix<f64>,
    pe: &DMatrix<f64>,
    prompt: &DMatrix<f64>,
) -> (DMatrix<f64>, AttentionCache) {
    let scale = 1.0 / (g.ncols() as f64).sqrt();
    let keys = g + pe;
    let mut weights = &keys * prompt.transpose();
    weights *= scale;
    softmax_rows(&mut weights);
    let out = &weights * prompt;
    (out, AttentionCache { keys, weights })
}

/// Backward pass of [`attention_forward`]: returns `(∂/∂g, ∂/∂prompt)` of the
/// attention output only (the residual path is added by the caller).
pub(crate) fn attention_backward(
    cache: &AttentionCache,
    prompt: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
    want_prompt: bool,
) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let scale = 1.0 / (prompt.ncols() as f64).sqrt();
    let a = &cache.weights;
    let d_a = d_out * prompt.transpose();
    let mut d_s = a.component_mul(&d_a);
    let rows = d_s.nrows();
    let (ds, aw) = (d_s.as_mut_slice(), a.as_slice());
    for r in 0..rows {
        let dot: f64 = (0..aw.len() / rows).map(|j| ds[j * rows + r]).sum();
        for j in 0..aw.len() / rows {
            ds[j * rows + r] -= aw[j * rows + r] * dot;
        }
    }
    d_s *= scale;
    let d_g = &d_s * prompt;
    let d_p = want_prompt.then(|| a.tr_mul(d_out) + d_s.tr_mul(&cache.keys));
    (d_g, d_p)
}
