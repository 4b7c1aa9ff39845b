//! Layer primitives with explicit forward/backward passes.
//!
//! All parameters are `Array2<f64>` (biases as a single row) so the
//! optimizer and the weights file can treat every tensor uniformly.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embed::TokenEmbeddingMatrix;

/// Affine map `y = x W^T + b` with gradient buffers.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    /// (out, in)
    pub w: Array2<f64>,
    /// (1, out)
    pub b: Array2<f64>,
    pub gw: Array2<f64>,
    pub gb: Array2<f64>,
}

impl Dense {
    /// Glorot-uniform initialization scaled by `scale` (1.0 = standard).
    pub fn init(out_dim: usize, in_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Dense {
        let limit = scale * (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = Array2::zeros((out_dim, in_dim));
        for v in w.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * limit;
        }
        Dense {
            w,
            b: Array2::zeros((1, out_dim)),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array2::zeros((1, out_dim)),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Accumulate parameter gradients; returns dL/dx when requested.
    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        self.gw += &dy.t().dot(&x);
        self.gb += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.w))
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

/// Per-channel batch normalization over axis 0.
///
/// In batch mode rows are normalized by batch statistics (the backward pass
/// differentiates through them); in running mode the stored running
/// statistics are used, which makes the layer an affine map.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
    pub g_gamma: Array2<f64>,
    pub g_beta: Array2<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mode: bool,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> BatchNorm {
        BatchNorm {
            gamma: Array2::ones((1, channels)),
            beta: Array2::zeros((1, channels)),
            running_mean: Array2::zeros((1, channels)),
            running_var: Array2::ones((1, channels)),
            g_gamma: Array2::zeros((1, channels)),
            g_beta: Array2::zeros((1, channels)),
            momentum,
            eps,
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, batch_mode: bool) -> (Array2<f64>, BnCache) {
        let c = x.ncols();
        let m = x.nrows() as f64;
        let (mean, var) = if batch_mode {
            let mean = x.sum_axis(Axis(0)) / m;
            let mut var = Array1::zeros(c);
            for row in x.rows() {
                for (j, &v) in row.iter().enumerate() {
                    var[j] += (v - mean[j]).powi(2);
                }
            }
            var /= m;
            (mean, var)
        } else {
            (
                self.running_mean.row(0).to_owned(),
                self.running_var.row(0).to_owned(),
            )
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.to_owned();
        for mut row in xhat.rows_mut() {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for j in 0..c {
                row[j] = row[j] * self.gamma[[0, j]] + self.beta[[0, j]];
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mode,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    pub fn backward(&mut self, cache: &BnCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let (rows, c) = (dy.nrows(), dy.ncols());
        let m = rows as f64;
        for j in 0..c {
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..rows {
                dg += dy[[i, j]] * cache.xhat[[i, j]];
                db += dy[[i, j]];
            }
            self.g_gamma[[0, j]] += dg;
            self.g_beta[[0, j]] += db;
        }
        let mut dx = Array2::zeros((rows, c));
        if cache.batch_mode {
            for j in 0..c {
                let g = self.gamma[[0, j]];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..rows {
                    let dxhat = dy[[i, j]] * g;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * cache.xhat[[i, j]];
                }
                for i in 0..rows {
                    let dxhat = dy[[i, j]] * g;
                    dx[[i, j]] = cache.inv_std[j] / m
                        * (m * dxhat - sum_dxhat - cache.xhat[[i, j]] * sum_dxhat_xhat);
                }
            }
        } else {
            for j in 0..c {
                let scale = self.gamma[[0, j]] * cache.inv_std[j];
                for i in 0..rows {
                    dx[[i, j]] = dy[[i, j]] * scale;
                }
            }
        }
        dx
    }

    /// Fold the batch statistics of one forward pass into the running
    /// estimates: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, cache: &BnCache) {
        debug_assert!(cache.batch_mode);
        let m = self.momentum;
        for j in 0..self.running_mean.ncols() {
            self.running_mean[[0, j]] = m * self.running_mean[[0, j]] + (1.0 - m) * cache.batch_mean[j];
            self.running_var[[0, j]] = m * self.running_var[[0, j]] + (1.0 - m) * cache.batch_var[j];
        }
    }

    pub fn zero_grads(&mut self) {
        self.g_gamma.fill(0.0);
        self.g_beta.fill(0.0);
    }
}

/// Inverted dropout: the kept entries are scaled by 1/keep so inference
/// needs no rescaling. Returns the mask to reuse in the backward pass.
pub(crate) fn dropout_mask(
    shape: (usize, usize),
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let keep = 1.0 - rate;
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    mask
}

/// Unfold embeddings into convolution rows: sample `s`, window position `p`
/// maps to row `s * positions + p` holding the window's `width * embed_dim`
/// values.
pub(crate) fn im2col(samples: &[&TokenEmbeddingMatrix], width: usize) -> Array2<f64> {
    let b = samples.len();
    let t = samples[0].max_len();
    let e = samples[0].embed_dim();
    let p = t - width + 1;
    let mut u = Array2::zeros((b * p, width * e));
    for (si, m) in samples.iter().enumerate() {
        for pos in 0..p {
            for k in 0..width {
                u.slice_mut(s![si * p + pos, k * e..(k + 1) * e])
                    .assign(&m.values.row(pos + k));
            }
        }
    }
    u
}

/// Same unfolding over an already-stacked activation array of shape
/// (batch * t, channels).
pub(crate) fn im2col_stacked(x: ArrayView2<'_, f64>, batch: usize, width: usize) -> Array2<f64> {
    let t = x.nrows() / batch;
    let c = x.ncols();
    let p = t - width + 1;
    let mut u = Array2::zeros((batch * p, width * c));
    for s_i in 0..batch {
        for pos in 0..p {
            for k in 0..width {
                u.slice_mut(s![s_i * p + pos, k * c..(k + 1) * c])
                    .assign(&x.row(s_i * t + pos + k));
            }
        }
    }
    u
}

/// Scatter-add the adjoint of [`im2col_stacked`] back onto the input rows.
pub(crate) fn col2im_stacked(
    du: ArrayView2<'_, f64>,
    batch: usize,
    t: usize,
    channels: usize,
    width: usize,
) -> Array2<f64> {
    let p = t - width + 1;
    let mut dx = Array2::zeros((batch * t, channels));
    for s_i in 0..batch {
        for pos in 0..p {
            for k in 0..width {
                let src = du.slice(s![s_i * p + pos, k * channels..(k + 1) * channels]);
                let mut dst = dx.slice_mut(s![s_i * t + pos + k, ..]);
                dst += &src;
            }
        }
    }
    dx
}

/// Max over each sample's position block. Returns (batch, channels) maxima
/// and the within-block argmax rows for the backward scatter.
pub(crate) fn global_max_pool(
    c: ArrayView2<'_, f64>,
    batch: usize,
) -> (Array2<f64>, Array2<usize>) {
    let p = c.nrows() / batch;
    let f = c.ncols();
    let mut out = Array2::zeros((batch, f));
    let mut arg = Array2::zeros((batch, f));
    for s_i in 0..batch {
        for j in 0..f {
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for pos in 0..p {
                let v = c[[s_i * p + pos, j]];
                if v > best {
                    best = v;
                    best_p = pos;
                }
            }
            out[[s_i, j]] = best;
            arg[[s_i, j]] = best_p;
        }
    }
    (out, arg)
}

pub(crate) fn global_max_pool_backward(
    dg: ArrayView2<'_, f64>,
    arg: &Array2<usize>,
    positions: usize,
) -> Array2<f64> {
    let (batch, f) = (dg.nrows(), dg.ncols());
    let mut dc = Array2::zeros((batch * positions, f));
    for s_i in 0..batch {
        for j in 0..f {
            dc[[s_i * positions + arg[[s_i, j]], j]] += dg[[s_i, j]];
        }
    }
    dc
}

/// Row-wise softmax with the usual max-shift for stability.
pub(crate) fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut probs = logits.to_owned();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean cross-entropy of the true-class probabilities. NaN probabilities
/// propagate (the floor clamp must not mask a diverged forward pass).
pub(crate) fn cross_entropy(probs: ArrayView2<'_, f64>, y: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let p = probs[[i, label]];
        if p.is_nan() {
            return f64::NAN;
        }
        loss -= p.max(1e-300).ln();
    }
    loss / y.len() as f64
}

/// dL/dlogits of mean cross-entropy after softmax: (p - onehot) / batch.
pub(crate) fn cross_entropy_backward(probs: &Array2<f64>, y: &[usize]) -> Array2<f64> {
    let mut d = probs.clone();
    let scale = 1.0 / y.len() as f64;
    for (i, &label) in y.iter().enumerate() {
        d[[i, label]] -= 1.0;
    }
    d *= scale;
    d
}
