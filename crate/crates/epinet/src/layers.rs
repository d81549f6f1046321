//! Baseline building blocks: strided convolution, spatial max-pooling,
//! bias + ReLU, across-channel LRN, inverted dropout, fully-connected maps
//! and the softmax log-loss. Forward and hand-written backward for each.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    col2im_accumulate, im2col, matmul, matmul_a_bt, matmul_at_b, out_extent, PatchMatrix, Tensor,
};

/// K dense filters of side `W` over `C` channels plus the pooling geometry
/// that usually follows them in a conv + max-pool pair.
#[derive(Debug, Clone)]
pub struct ConvBank<F: Scalar> {
    pub count: usize,
    pub filter_side: usize,
    pub channels: usize,
    pub input_stride: usize,
    /// Pooling window side D; 1 means no pooling stage.
    pub pool: usize,
    pub pool_stride: usize,
    /// K * C * W * W, filter-major then channel-major.
    pub weights: Vec<F>,
    pub biases: Vec<F>,
}

impl<F: Scalar> ConvBank<F> {
    pub fn new(count: usize, filter_side: usize, channels: usize, input_stride: usize) -> Self {
        ConvBank {
            count,
            filter_side,
            channels,
            input_stride,
            pool: 1,
            pool_stride: 1,
            weights: vec![F::zero(); count * channels * filter_side * filter_side],
            biases: vec![F::zero(); count],
        }
    }

    pub fn filter_volume(&self) -> usize {
        self.filter_side * self.filter_side * self.channels
    }
}

/// Dense strided valid convolution via im2col + matmul.
pub fn conv_forward<F: Scalar>(input: &Tensor<F>, bank: &ConvBank<F>) -> Result<Tensor<F>> {
    if input.c != bank.channels {
        return Err(Error::dim(
            "conv_forward",
            format!("input has {} channels, bank expects {}", input.c, bank.channels),
        ));
    }
    let patches = im2col(input, bank.filter_side, bank.input_stride)?;
    let m = bank.filter_volume();
    let mut scores = vec![F::zero(); patches.rows * bank.count];
    matmul_a_bt(&patches.data, patches.rows, m, &bank.weights, bank.count, &mut scores);
    let ho = out_extent(input.h, bank.filter_side, bank.input_stride);
    let wo = out_extent(input.w, bank.filter_side, bank.input_stride);
    let mut out = Tensor::zeros(input.n, bank.count, ho, wo);
    for (r, origin) in patches.origins.iter().enumerate() {
        let gy = origin.y / bank.input_stride;
        let gx = origin.x / bank.input_stride;
        for k in 0..bank.count {
            *out.at_mut(origin.image, k, gy, gx) = scores[r * bank.count + k];
        }
    }
    out.debug_assert_finite("conv_forward");
    Ok(out)
}

pub fn conv_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    bank: &ConvBank<F>,
) -> Result<(Tensor<F>, Vec<F>)> {
    let patches = im2col(input, bank.filter_side, bank.input_stride)?;
    let m = bank.filter_volume();
    if grad_out.n != input.n || grad_out.c != bank.count {
        return Err(Error::dim("conv_backward", "upstream gradient shape mismatch"));
    }
    let mut grad_scores = vec![F::zero(); patches.rows * bank.count];
    for (r, origin) in patches.origins.iter().enumerate() {
        let gy = origin.y / bank.input_stride;
        let gx = origin.x / bank.input_stride;
        for k in 0..bank.count {
            grad_scores[r * bank.count + k] = grad_out.at(origin.image, k, gy, gx);
        }
    }
    let mut grad_weights = vec![F::zero(); bank.count * m];
    matmul_at_b(&grad_scores, patches.rows, bank.count, &patches.data, m, &mut grad_weights);
    let mut grad_patches = PatchMatrix {
        rows: patches.rows,
        cols: m,
        data: vec![F::zero(); patches.rows * m],
        origins: patches.origins.clone(),
    };
    matmul(&grad_scores, patches.rows, bank.count, &bank.weights, m, &mut grad_patches.data);
    let mut grad_input = Tensor::zeros(input.n, input.c, input.h, input.w);
    col2im_accumulate(&grad_patches, &mut grad_input, bank.filter_side, bank.input_stride)?;
    Ok((grad_input, grad_weights))
}

/// Winning input offsets of a spatial max-pool, one per output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolArgmax {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub entries: Vec<(u8, u8)>,
    pub min_margin: f64,
}

/// Per-channel spatial max over `pool x pool` windows. Ties break toward the
/// smallest site in row-major order.
pub fn maxpool_forward<F: Scalar>(
    input: &Tensor<F>,
    pool: usize,
    stride: usize,
) -> Result<(Tensor<F>, PoolArgmax)> {
    if pool == 0 || stride == 0 || pool > input.h || pool > input.w {
        return Err(Error::dim(
            "maxpool_forward",
            format!("pool {pool} invalid for input {}x{}", input.h, input.w),
        ));
    }
    let ho = out_extent(input.h, pool, stride);
    let wo = out_extent(input.w, pool, stride);
    let mut out = Tensor::zeros(input.n, input.c, ho, wo);
    let mut entries = vec![(0u8, 0u8); input.n * input.c * ho * wo];
    let mut min_margin = f64::INFINITY;
    for im in 0..input.n {
        for c in 0..input.c {
            for gy in 0..ho {
                for gx in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut runner = F::neg_infinity();
                    let mut best_off = (0u8, 0u8);
                    for py in 0..pool {
                        for px in 0..pool {
                            let v = input.at(im, c, gy * stride + py, gx * stride + px);
                            if v > best {
                                runner = best;
                                best = v;
                                best_off = (py as u8, px as u8);
                            } else if v > runner {
                                runner = v;
                            }
                        }
                    }
                    if runner.is_finite() {
                        let gap = Scalar::to_f64(best) - Scalar::to_f64(runner);
                        if gap < min_margin {
                            min_margin = gap;
                        }
                    }
                    let oi = out.idx(im, c, gy, gx);
                    out.data_mut()[oi] = best;
                    entries[oi] = best_off;
                }
            }
        }
    }
    Ok((
        out,
        PoolArgmax {
            n: input.n,
            c: input.c,
            h: ho,
            w: wo,
            entries,
            min_margin,
        },
    ))
}

/// Scatter each upstream gradient to its recorded argmax site; exactly one
/// nonzero per output element.
pub fn maxpool_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    argmax: &PoolArgmax,
    input_dims: (usize, usize, usize, usize),
    pool: usize,
    stride: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = input_dims;
    if grad_out.dims() != (argmax.n, argmax.c, argmax.h, argmax.w) {
        return Err(Error::dim("maxpool_backward", "argmax/gradient mismatch"));
    }
    let _ = pool;
    let mut grad_input = Tensor::zeros(n, c, h, w);
    for im in 0..argmax.n {
        for ch in 0..argmax.c {
            for gy in 0..argmax.h {
                for gx in 0..argmax.w {
                    let oi = grad_out.idx(im, ch, gy, gx);
                    let (py, px) = argmax.entries[oi];
                    *grad_input.at_mut(im, ch, gy * stride + py as usize, gx * stride + px as usize) =
                        grad_input.at(im, ch, gy * stride + py as usize, gx * stride + px as usize)
                            + grad_out.data()[oi];
                }
            }
        }
    }
    Ok(grad_input)
}

/// Channel-wise bias add then clamp at zero: y = max(y + beta_c, 0).
pub fn bias_relu_forward<F: Scalar>(input: &Tensor<F>, biases: &[F]) -> Result<Tensor<F>> {
    if biases.len() != input.c {
        return Err(Error::dim(
            "bias_relu_forward",
            format!("{} biases for {} channels", biases.len(), input.c),
        ));
    }
    let mut out = input.clone();
    let plane = input.h * input.w;
    for im in 0..input.n {
        for c in 0..input.c {
            let base = out.idx(im, c, 0, 0);
            let b = biases[c];
            for v in out.data_mut()[base..base + plane].iter_mut() {
                let s = *v + b;
                *v = if s > F::zero() { s } else { F::zero() };
            }
        }
    }
    Ok(out)
}

/// Backward of bias + ReLU. `output` is the forward result; the gradient
/// passes where output > 0. Returns (grad_input, grad_biases).
pub fn bias_relu_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    output: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>)> {
    if grad_out.dims() != output.dims() {
        return Err(Error::dim("bias_relu_backward", "shape mismatch"));
    }
    let mut grad_input = Tensor::zeros(output.n, output.c, output.h, output.w);
    let mut grad_biases = vec![F::zero(); output.c];
    let plane = output.h * output.w;
    for im in 0..output.n {
        for c in 0..output.c {
            let base = output.idx(im, c, 0, 0);
            let mut acc = F::zero();
            for i in base..base + plane {
                if output.data()[i] > F::zero() {
                    let g = grad_out.data()[i];
                    grad_input.data_mut()[i] = g;
                    acc = acc + g;
                }
            }
            grad_biases[c] = grad_biases[c] + acc;
        }
    }
    Ok((grad_input, grad_biases))
}

/// Across-channel local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            n: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 2.0,
        }
    }
}

fn lrn_denoms<F: Scalar>(input: &Tensor<F>, p: &LrnParams) -> Vec<f64> {
    let half = p.n / 2;
    let mut denoms = vec![0.0; input.len()];
    for im in 0..input.n {
        for c in 0..input.c {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(input.c - 1);
            for y in 0..input.h {
                for x in 0..input.w {
                    let mut s = 0.0;
                    for cc in lo..=hi {
                        let v = Scalar::to_f64(input.at(im, cc, y, x));
                        s += v * v;
                    }
                    denoms[input.idx(im, c, y, x)] = p.k + p.alpha / p.n as f64 * s;
                }
            }
        }
    }
    denoms
}

/// out = in / (k + (alpha/n) * sum of squared neighbors)^beta.
pub fn lrn_forward<F: Scalar>(input: &Tensor<F>, p: &LrnParams) -> Result<Tensor<F>> {
    if p.n % 2 == 0 || p.k <= 0.0 || p.alpha < 0.0 {
        return Err(Error::dim("lrn_forward", "invalid LRN parameters"));
    }
    let denoms = lrn_denoms(input, p);
    let mut out = input.clone();
    for (v, d) in out.data_mut().iter_mut().zip(denoms.iter()) {
        *v = F::from_f64(Scalar::to_f64(*v) * d.powf(-p.beta));
    }
    out.debug_assert_finite("lrn_forward");
    Ok(out)
}

/// Exact backward of the LRN expression.
pub fn lrn_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    p: &LrnParams,
) -> Result<Tensor<F>> {
    if grad_out.dims() != input.dims() {
        return Err(Error::dim("lrn_backward", "shape mismatch"));
    }
    let denoms = lrn_denoms(input, p);
    let half = p.n / 2;
    let mut grad_input = Tensor::zeros(input.n, input.c, input.h, input.w);
    let scale = 2.0 * p.alpha * p.beta / p.n as f64;
    for im in 0..input.n {
        for y in 0..input.h {
            for x in 0..input.w {
                // g_i * x_i * S_i^(-beta-1), reused by every channel in the
                // neighborhood of i.
                let mut weighted = vec![0.0; input.c];
                for c in 0..input.c {
                    let i = input.idx(im, c, y, x);
                    weighted[c] = Scalar::to_f64(grad_out.data()[i])
                        * Scalar::to_f64(input.data()[i])
                        * denoms[i].powf(-p.beta - 1.0);
                }
                for c in 0..input.c {
                    let i = input.idx(im, c, y, x);
                    let lo = c.saturating_sub(half);
                    let hi = (c + half).min(input.c - 1);
                    let cross: f64 = weighted[lo..=hi].iter().sum();
                    let direct =
                        Scalar::to_f64(grad_out.data()[i]) * denoms[i].powf(-p.beta);
                    let xj = Scalar::to_f64(input.data()[i]);
                    grad_input.data_mut()[i] = F::from_f64(direct - scale * xj * cross);
                }
            }
        }
    }
    Ok(grad_input)
}

/// Inverted dropout: in train mode zero with probability `rate` and scale
/// survivors by 1/(1-rate); eval mode is the identity.
pub fn dropout_forward<F: Scalar>(
    input: &Tensor<F>,
    rate: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<F>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::dim("dropout_forward", format!("rate {rate} outside [0,1)")));
    }
    if !train || rate == 0.0 {
        return Ok((input.clone(), vec![true; input.len()]));
    }
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mut out = input.clone();
    let mut mask = vec![false; input.len()];
    for (v, keep) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
        if rng.gen::<f64>() >= rate {
            *keep = true;
            *v = *v * scale;
        } else {
            *v = F::zero();
        }
    }
    Ok((out, mask))
}

/// Reuses the forward mask exactly.
pub fn dropout_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    mask: &[bool],
    rate: f64,
) -> Result<Tensor<F>> {
    if grad_out.len() != mask.len() {
        return Err(Error::dim("dropout_backward", "mask length mismatch"));
    }
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mut out = grad_out.clone();
    for (v, &keep) in out.data_mut().iter_mut().zip(mask.iter()) {
        *v = if keep { *v * scale } else { F::zero() };
    }
    Ok(out)
}

/// Flatten spatial dims and apply an affine map. Weights are `out x in`
/// row-major; output is `(n, out, 1, 1)`.
pub fn fc_forward<F: Scalar>(
    input: &Tensor<F>,
    weights: &[F],
    biases: &[F],
) -> Result<Tensor<F>> {
    let d = input.c * input.h * input.w;
    if weights.len() % d != 0 {
        return Err(Error::dim(
            "fc_forward",
            format!("weight matrix not divisible by input size {d}"),
        ));
    }
    let out_dim = weights.len() / d;
    if biases.len() != out_dim {
        return Err(Error::dim("fc_forward", "bias length mismatch"));
    }
    let mut scores = vec![F::zero(); input.n * out_dim];
    matmul_a_bt(input.data(), input.n, d, weights, out_dim, &mut scores);
    for row in scores.chunks_mut(out_dim) {
        for (v, &b) in row.iter_mut().zip(biases.iter()) {
            *v = *v + b;
        }
    }
    Tensor::from_vec(input.n, out_dim, 1, 1, scores)
}

/// Returns (grad_input, grad_weights, grad_biases).
pub fn fc_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    weights: &[F],
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let d = input.c * input.h * input.w;
    let out_dim = weights.len() / d;
    if grad_out.n != input.n || grad_out.c != out_dim {
        return Err(Error::dim("fc_backward", "shape mismatch"));
    }
    let mut grad_weights = vec![F::zero(); out_dim * d];
    matmul_at_b(grad_out.data(), input.n, out_dim, input.data(), d, &mut grad_weights);
    let mut grad_in = vec![F::zero(); input.n * d];
    matmul(grad_out.data(), input.n, out_dim, weights, d, &mut grad_in);
    let mut grad_biases = vec![F::zero(); out_dim];
    for row in grad_out.data().chunks(out_dim) {
        for (gb, &g) in grad_biases.iter_mut().zip(row.iter()) {
            *gb = *gb + g;
        }
    }
    Ok((
        Tensor::from_vec(input.n, input.c, input.h, input.w, grad_in)?,
        grad_weights,
        grad_biases,
    ))
}

/// Mean over the batch of -log softmax(logits)[label], with max-subtraction
/// for stability. Gradient is (softmax - onehot) / batch.
pub fn softmax_loss<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(f64, Tensor<F>)> {
    let classes = logits.c * logits.h * logits.w;
    if labels.len() != logits.n {
        return Err(Error::dim("softmax_loss", "label count mismatch"));
    }
    let mut grad = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
    let inv_batch = 1.0 / logits.n as f64;
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::dim(
                "softmax_loss",
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(Scalar::to_f64(v)));
        let mut denom = 0.0;
        for &v in row.iter() {
            denom += (Scalar::to_f64(v) - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(Scalar::to_f64(row[label]) - max - log_denom);
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, &v) in row.iter().enumerate() {
            let p = (Scalar::to_f64(v) - max).exp() / denom;
            let onehot = if j == label { 1.0 } else { 0.0 };
            g[j] = F::from_f64((p - onehot) * inv_batch);
        }
    }
    Ok((loss * inv_batch, grad))
}
