//! Epitomic convolution: mini-epitome and topographic variants.
//!
//! An epitome is a parameter image of side `V >= W`; every `W x W` window at
//! an allowed displacement is a usable filter, and overlapping windows share
//! weights. The forward pass scores each sparsely extracted input patch
//! against the candidate windows and keeps the maximum (per epitome for the
//! mini-epitome variant, per pooling block of the candidate grid for the
//! topographic variant). The backward pass routes gradients only through the
//! recorded winning displacement; overlapping windows sum their
//! contributions into the shared epitome cells.
//!
//! Both variants run through one engine: the mini-epitome layer is the
//! single-block special case of the topographic one.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{col2im_accumulate, im2col, matmul_a_bt, out_extent, PatchMatrix, Tensor};

/// A dictionary of K epitomes of side `V` over `C` channels, producing
/// filters of side `W` at displacements that are multiples of
/// `epitome_stride`. Biases are applied by the subsequent activation, not
/// inside the max.
#[derive(Debug, Clone)]
pub struct EpitomeBank<F: Scalar> {
    /// K
    pub count: usize,
    /// V
    pub epitome_side: usize,
    /// W
    pub filter_side: usize,
    /// C
    pub channels: usize,
    pub epitome_stride: usize,
    pub normalize: bool,
    pub lambda: F,
    /// K * C * V * V, epitome-major then channel-major.
    pub weights: Vec<F>,
    /// K, the per-epitome beta.
    pub biases: Vec<F>,
}

impl<F: Scalar> EpitomeBank<F> {
    pub fn new(
        count: usize,
        epitome_side: usize,
        filter_side: usize,
        channels: usize,
        epitome_stride: usize,
        normalize: bool,
        lambda: F,
    ) -> Result<Self> {
        if filter_side == 0 || count == 0 || channels == 0 || epitome_stride == 0 {
            return Err(Error::dim("EpitomeBank", "all dimensions must be positive"));
        }
        if epitome_side < filter_side {
            return Err(Error::dim(
                "EpitomeBank",
                format!("epitome side {epitome_side} smaller than filter side {filter_side}"),
            ));
        }
        if epitome_side - filter_side > u8::MAX as usize {
            return Err(Error::dim(
                "EpitomeBank",
                "displacement range exceeds the 8-bit argmax encoding",
            ));
        }
        if normalize && lambda <= F::zero() {
            return Err(Error::dim(
                "EpitomeBank",
                "lambda must be positive when normalization is enabled",
            ));
        }
        let weights = vec![F::zero(); count * channels * epitome_side * epitome_side];
        let biases = vec![F::zero(); count];
        Ok(EpitomeBank {
            count,
            epitome_side,
            filter_side,
            channels,
            epitome_stride,
            normalize,
            lambda,
            weights,
            biases,
        })
    }

    /// Candidate displacements per axis: floor((V - W) / s_e) + 1.
    pub fn candidates_per_axis(&self) -> usize {
        (self.epitome_side - self.filter_side) / self.epitome_stride + 1
    }

    /// Filter volume W * W * C.
    pub fn filter_volume(&self) -> usize {
        self.filter_side * self.filter_side * self.channels
    }

    #[inline]
    fn weight_index(&self, k: usize, c: usize, vy: usize, vx: usize) -> usize {
        ((k * self.channels + c) * self.epitome_side + vy) * self.epitome_side + vx
    }

    fn check_displacement(&self, dy: usize, dx: usize) -> Result<()> {
        let max = self.epitome_side - self.filter_side;
        if dy > max || dx > max || dy % self.epitome_stride != 0 || dx % self.epitome_stride != 0 {
            return Err(Error::dim(
                "extract_filter",
                format!(
                    "displacement ({dy},{dx}) outside candidate grid (max {max}, stride {})",
                    self.epitome_stride
                ),
            ));
        }
        Ok(())
    }

    /// Indices into `weights` of the `W x W x C` window of epitome `k` at
    /// displacement `(dy, dx)`, channel-major. Overlapping windows alias the
    /// same underlying cells; equality of indices is the aliasing witness.
    pub fn filter_weight_indices(&self, k: usize, dy: usize, dx: usize) -> Vec<usize> {
        let w = self.filter_side;
        let mut idx = Vec::with_capacity(self.filter_volume());
        for c in 0..self.channels {
            for py in 0..w {
                for px in 0..w {
                    idx.push(self.weight_index(k, c, dy + py, dx + px));
                }
            }
        }
        idx
    }

    /// The filter w_{k,p}: the `W x W x C` sub-window of epitome `k` at
    /// displacement `p = (dy, dx)`.
    pub fn extract_filter(&self, k: usize, dy: usize, dx: usize) -> Result<Vec<F>> {
        if k >= self.count {
            return Err(Error::dim("extract_filter", format!("epitome {k} out of range")));
        }
        self.check_displacement(dy, dx)?;
        Ok(self
            .filter_weight_indices(k, dy, dx)
            .iter()
            .map(|&i| self.weights[i])
            .collect())
    }
}

/// Large-epitome variant: the candidate-displacement grid of each epitome is
/// max-pooled in `epit_pool x epit_pool` blocks (stride equal to the block
/// side), yielding several output channels per epitome. Per-output-channel
/// biases are owned by the subsequent activation layer.
#[derive(Debug, Clone)]
pub struct TopographicBank<F: Scalar> {
    pub bank: EpitomeBank<F>,
    pub epit_pool: usize,
}

impl<F: Scalar> TopographicBank<F> {
    pub fn new(bank: EpitomeBank<F>, epit_pool: usize) -> Result<Self> {
        let n_c = bank.candidates_per_axis();
        if epit_pool == 0 || epit_pool > n_c {
            return Err(Error::dim(
                "TopographicBank",
                format!("epitome pool {epit_pool} invalid for candidate grid {n_c}"),
            ));
        }
        Ok(TopographicBank { bank, epit_pool })
    }

    /// Outputs per epitome per axis: floor((n_c - P_e) / P_e) + 1.
    pub fn outputs_per_axis(&self) -> usize {
        (self.bank.candidates_per_axis() - self.epit_pool) / self.epit_pool + 1
    }

    /// Total output channels: K * n_o^2.
    pub fn output_channels(&self) -> usize {
        let n_o = self.outputs_per_axis();
        self.bank.count * n_o * n_o
    }
}

/// Winning epitome displacement per output element, recorded at forward time
/// for exact backward routing. Offsets are in epitome pixels and fit in 8
/// bits by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxMap {
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub entries: Vec<(u8, u8)>,
    /// Smallest winner-vs-runner-up score gap seen in the forward pass
    /// (infinite when every pooling block has a single candidate). Used by
    /// the gradient checker's kink guard.
    pub min_margin: f64,
}

impl ArgmaxMap {
    #[inline]
    pub fn idx(&self, n: usize, ch: usize, y: usize, x: usize) -> usize {
        ((n * self.channels + ch) * self.h + y) * self.w + x
    }
}

/// Gradients with respect to an epitome bank's weights (same layout).
#[derive(Debug, Clone)]
pub struct EpitomeGrads<F: Scalar> {
    pub weights: Vec<F>,
}

/// Per-candidate filter matrix: one row of length `W*W*C` per (k, j, l)
/// column, holding the raw window or, when normalizing, `(w - mean(w)) / n`
/// with `n = sqrt(w_bar . w_bar + lambda)`.
struct FilterMatrix<F: Scalar> {
    rows: Vec<F>,
    /// Contrast n per filter row; 1 for unnormalized banks.
    norms: Vec<F>,
    cols: usize,
    volume: usize,
}

fn build_filter_matrix<F: Scalar>(bank: &EpitomeBank<F>) -> FilterMatrix<F> {
    let n_c = bank.candidates_per_axis();
    let m = bank.filter_volume();
    let cols = bank.count * n_c * n_c;
    let mut rows = vec![F::zero(); cols * m];
    let mut norms = vec![F::one(); cols];
    let inv_m = F::one() / F::from_f64(m as f64);
    let mut col = 0;
    for k in 0..bank.count {
        for j in 0..n_c {
            for l in 0..n_c {
                let dy = j * bank.epitome_stride;
                let dx = l * bank.epitome_stride;
                let dst = &mut rows[col * m..(col + 1) * m];
                let mut r = 0;
                for c in 0..bank.channels {
                    for py in 0..bank.filter_side {
                        let base = bank.weight_index(k, c, dy + py, dx);
                        dst[r..r + bank.filter_side]
                            .copy_from_slice(&bank.weights[base..base + bank.filter_side]);
                        r += bank.filter_side;
                    }
                }
                if bank.normalize {
                    let mut sum = F::zero();
                    for &v in dst.iter() {
                        sum = sum + v;
                    }
                    let mean = sum * inv_m;
                    let mut sq = F::zero();
                    for v in dst.iter_mut() {
                        *v = *v - mean;
                        sq = sq + *v * *v;
                    }
                    let norm = (sq + bank.lambda).sqrt();
                    let inv = F::one() / norm;
                    for v in dst.iter_mut() {
                        *v = *v * inv;
                    }
                    norms[col] = norm;
                }
                col += 1;
            }
        }
    }
    FilterMatrix {
        rows,
        norms,
        cols,
        volume: m,
    }
}

fn engine_forward<F: Scalar>(
    input: &Tensor<F>,
    bank: &EpitomeBank<F>,
    input_stride: usize,
    epit_pool: usize,
) -> Result<(Tensor<F>, ArgmaxMap, PatchMatrix<F>, FilterMatrix<F>)> {
    if input.c != bank.channels {
        return Err(Error::dim(
            "epitomic_forward",
            format!("input has {} channels, bank expects {}", input.c, bank.channels),
        ));
    }
    let n_c = bank.candidates_per_axis();
    let n_o = (n_c - epit_pool) / epit_pool + 1;
    let patches = im2col(input, bank.filter_side, input_stride)?;
    let filters = build_filter_matrix(bank);
    let mut scores = vec![F::zero(); patches.rows * filters.cols];
    matmul_a_bt(
        &patches.data,
        patches.rows,
        filters.volume,
        &filters.rows,
        filters.cols,
        &mut scores,
    );

    let ho = out_extent(input.h, bank.filter_side, input_stride);
    let wo = out_extent(input.w, bank.filter_side, input_stride);
    let channels = bank.count * n_o * n_o;
    let mut output = Tensor::zeros(input.n, channels, ho, wo);
    let mut entries = vec![(0u8, 0u8); input.n * channels * ho * wo];
    let mut min_margin = f64::INFINITY;

    for (r, origin) in patches.origins.iter().enumerate() {
        let gy = origin.y / input_stride;
        let gx = origin.x / input_stride;
        let row_scores = &scores[r * filters.cols..(r + 1) * filters.cols];
        for k in 0..bank.count {
            let k_scores = &row_scores[k * n_c * n_c..(k + 1) * n_c * n_c];
            for a in 0..n_o {
                for b in 0..n_o {
                    let mut best = F::neg_infinity();
                    let mut runner = F::neg_infinity();
                    let mut best_j = 0;
                    let mut best_l = 0;
                    for j in a * epit_pool..a * epit_pool + epit_pool {
                        for l in b * epit_pool..b * epit_pool + epit_pool {
                            let s = k_scores[j * n_c + l];
                            if s > best {
                                runner = best;
                                best = s;
                                best_j = j;
                                best_l = l;
                            } else if s > runner {
                                runner = s;
                            }
                        }
                    }
                    if runner.is_finite() {
                        let gap = Scalar::to_f64(best) - Scalar::to_f64(runner);
                        if gap < min_margin {
                            min_margin = gap;
                        }
                    }
                    let ch = (k * n_o + a) * n_o + b;
                    let oi = output.idx(origin.image, ch, gy, gx);
                    output.data_mut()[oi] = best;
                    entries[oi] = (
                        (best_j * bank.epitome_stride) as u8,
                        (best_l * bank.epitome_stride) as u8,
                    );
                }
            }
        }
    }
    output.debug_assert_finite("epitomic_forward");
    let argmax = ArgmaxMap {
        n: input.n,
        channels,
        h: ho,
        w: wo,
        entries,
        min_margin,
    };
    Ok((output, argmax, patches, filters))
}

fn engine_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    bank: &EpitomeBank<F>,
    argmax: &ArgmaxMap,
    input_stride: usize,
    epit_pool: usize,
) -> Result<(Tensor<F>, EpitomeGrads<F>)> {
    let n_c = bank.candidates_per_axis();
    let n_o = (n_c - epit_pool) / epit_pool + 1;
    let channels = bank.count * n_o * n_o;
    let ho = out_extent(input.h, bank.filter_side, input_stride);
    let wo = out_extent(input.w, bank.filter_side, input_stride);
    if (argmax.n, argmax.channels, argmax.h, argmax.w) != (input.n, channels, ho, wo)
        || grad_out.dims() != (input.n, channels, ho, wo)
    {
        return Err(Error::dim(
            "epitomic_backward",
            "argmax or upstream gradient does not match the forward call",
        ));
    }

    let patches = im2col(input, bank.filter_side, input_stride)?;
    let filters = build_filter_matrix(bank);
    let m = filters.volume;

    // Per-filter accumulators u = sum of g * x over the outputs this filter won.
    let mut col_grads = vec![F::zero(); filters.cols * m];
    let mut grad_patches = PatchMatrix {
        rows: patches.rows,
        cols: patches.cols,
        data: vec![F::zero(); patches.rows * patches.cols],
        origins: patches.origins.clone(),
    };

    for (r, origin) in patches.origins.iter().enumerate() {
        let gy = origin.y / input_stride;
        let gx = origin.x / input_stride;
        let patch = patches.row(r);
        for ch in 0..channels {
            let oi = argmax.idx(origin.image, ch, gy, gx);
            let g = grad_out.data()[oi];
            if g == F::zero() {
                continue;
            }
            let (dy, dx) = argmax.entries[oi];
            let j = dy as usize / bank.epitome_stride;
            let l = dx as usize / bank.epitome_stride;
            let k = ch / (n_o * n_o);
            let col = (k * n_c + j) * n_c + l;
            let filt = &filters.rows[col * m..(col + 1) * m];
            let acc = &mut col_grads[col * m..(col + 1) * m];
            for i in 0..m {
                acc[i] = acc[i] + g * patch[i];
            }
            let gp = &mut grad_patches.data[r * m..(r + 1) * m];
            for i in 0..m {
                gp[i] = gp[i] + g * filt[i];
            }
        }
    }

    // Fold per-filter accumulators back into the shared epitome cells.
    let mut grad_weights = vec![F::zero(); bank.weights.len()];
    let inv_m = F::one() / F::from_f64(m as f64);
    for k in 0..bank.count {
        for j in 0..n_c {
            for l in 0..n_c {
                let col = (k * n_c + j) * n_c + l;
                let u = &col_grads[col * m..(col + 1) * m];
                let dy = j * bank.epitome_stride;
                let dx = l * bank.epitome_stride;
                let scatter = |vals: &[F], grad_weights: &mut [F]| {
                    let mut r = 0;
                    for c in 0..bank.channels {
                        for py in 0..bank.filter_side {
                            let base = bank.weight_index(k, c, dy + py, dx);
                            for px in 0..bank.filter_side {
                                grad_weights[base + px] = grad_weights[base + px] + vals[r + px];
                            }
                            r += bank.filter_side;
                        }
                    }
                };
                if bank.normalize {
                    // d score / d w = (x - mean(x) 1)/n - score * w_bar / n^2,
                    // accumulated over rows: (u - mean(u) 1 - (b . u) b)/n
                    // with b = w_bar / n the normalized filter row.
                    let b = &filters.rows[col * m..(col + 1) * m];
                    let mut sum = F::zero();
                    let mut proj = F::zero();
                    for i in 0..m {
                        sum = sum + u[i];
                        proj = proj + b[i] * u[i];
                    }
                    let mean = sum * inv_m;
                    let inv_n = F::one() / filters.norms[col];
                    let vals: Vec<F> =
                        (0..m).map(|i| (u[i] - mean - proj * b[i]) * inv_n).collect();
                    scatter(&vals, &mut grad_weights);
                } else {
                    scatter(u, &mut grad_weights);
                }
            }
        }
    }

    let mut grad_input = Tensor::zeros(input.n, input.c, input.h, input.w);
    col2im_accumulate(&grad_patches, &mut grad_input, bank.filter_side, input_stride)?;
    grad_input.debug_assert_finite("epitomic_backward");
    Ok((grad_input, EpitomeGrads { weights: grad_weights }))
}

/// Mini-epitome forward: one output per epitome per input patch, the maximum
/// response over all candidate displacements. Ties break toward the smallest
/// displacement in row-major scan order.
pub fn epitomic_forward<F: Scalar>(
    input: &Tensor<F>,
    bank: &EpitomeBank<F>,
    input_stride: usize,
) -> Result<(Tensor<F>, ArgmaxMap)> {
    let n_c = bank.candidates_per_axis();
    let (out, argmax, _, _) = engine_forward(input, bank, input_stride, n_c)?;
    Ok((out, argmax))
}

pub fn epitomic_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    bank: &EpitomeBank<F>,
    argmax: &ArgmaxMap,
    input_stride: usize,
) -> Result<(Tensor<F>, EpitomeGrads<F>)> {
    let n_c = bank.candidates_per_axis();
    engine_backward(grad_out, input, bank, argmax, input_stride, n_c)
}

/// Topographic forward: channel (k, a, b) holds the max score over the
/// `P_e x P_e` block (a, b) of epitome k's candidate grid; channel order is
/// epitome-major, then row-major over (a, b).
pub fn topographic_forward<F: Scalar>(
    input: &Tensor<F>,
    bank: &TopographicBank<F>,
    input_stride: usize,
) -> Result<(Tensor<F>, ArgmaxMap)> {
    let (out, argmax, _, _) = engine_forward(input, &bank.bank, input_stride, bank.epit_pool)?;
    Ok((out, argmax))
}

pub fn topographic_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    bank: &TopographicBank<F>,
    argmax: &ArgmaxMap,
    input_stride: usize,
) -> Result<(Tensor<F>, EpitomeGrads<F>)> {
    engine_backward(grad_out, input, &bank.bank, argmax, input_stride, bank.epit_pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_1x3(weights: Vec<f64>) -> EpitomeBank<f64> {
        let mut b = EpitomeBank::new(1, 3, 2, 1, 1, false, 0.0).unwrap();
        b.weights = weights;
        b
    }

    /// Independent-path oracle: score every candidate filter with plain
    /// per-element loops (no im2col, no shared matmul) and keep the max.
    fn brute_force_forward(
        input: &Tensor<f64>,
        bank: &EpitomeBank<f64>,
        stride: usize,
        epit_pool: usize,
    ) -> Tensor<f64> {
        let n_c = bank.candidates_per_axis();
        let n_o = (n_c - epit_pool) / epit_pool + 1;
        let ho = (input.h - bank.filter_side) / stride + 1;
        let wo = (input.w - bank.filter_side) / stride + 1;
        let mut out = Tensor::zeros(input.n, bank.count * n_o * n_o, ho, wo);
        for im in 0..input.n {
            for gy in 0..ho {
                for gx in 0..wo {
                    for k in 0..bank.count {
                        for a in 0..n_o {
                            for b in 0..n_o {
                                let mut best = f64::NEG_INFINITY;
                                for j in a * epit_pool..(a + 1) * epit_pool {
                                    for l in b * epit_pool..(b + 1) * epit_pool {
                                        let dy = j * bank.epitome_stride;
                                        let dx = l * bank.epitome_stride;
                                        let filt = bank.extract_filter(k, dy, dx).unwrap();
                                        let (mean, norm) = if bank.normalize {
                                            let m = filt.len() as f64;
                                            let mean: f64 = filt.iter().sum::<f64>() / m;
                                            let sq: f64 =
                                                filt.iter().map(|v| (v - mean) * (v - mean)).sum();
                                            (mean, (sq + bank.lambda).sqrt())
                                        } else {
                                            (0.0, 1.0)
                                        };
                                        let mut s = 0.0;
                                        let mut idx = 0;
                                        for c in 0..input.c {
                                            for py in 0..bank.filter_side {
                                                for px in 0..bank.filter_side {
                                                    let x = input.at(
                                                        im,
                                                        c,
                                                        gy * stride + py,
                                                        gx * stride + px,
                                                    );
                                                    s += x * (filt[idx] - mean) / norm;
                                                    idx += 1;
                                                }
                                            }
                                        }
                                        if s > best {
                                            best = s;
                                        }
                                    }
                                }
                                let ch = (k * n_o + a) * n_o + b;
                                *out.at_mut(im, ch, gy, gx) = best;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn extract_whole_epitome_when_v_equals_w() {
        let mut b = EpitomeBank::new(1, 2, 2, 1, 1, false, 0.0).unwrap();
        b.weights = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(b.extract_filter(0, 0, 0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(b.extract_filter(0, 1, 0).is_err());
    }

    #[test]
    fn extract_filter_offset_window() {
        let b = bank_1x3((1..=9).map(|v| v as f64).collect());
        assert_eq!(b.extract_filter(0, 1, 1).unwrap(), vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn extract_filter_out_of_range() {
        let b = bank_1x3(vec![0.0; 9]);
        assert!(b.extract_filter(0, 2, 0).is_err());
    }

    #[test]
    fn forward_v_equals_w_is_plain_convolution() {
        let mut b = EpitomeBank::new(1, 2, 2, 1, 1, false, 0.0).unwrap();
        b.weights = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::from_vec(1, 1, 2, 2, b.weights.clone()).unwrap();
        let (out, argmax) = epitomic_forward(&x, &b, 1).unwrap();
        let norm_sq: f64 = b.weights.iter().map(|v| v * v).sum();
        assert_eq!(out.data(), &[norm_sq]);
        assert_eq!(argmax.entries, vec![(0, 0)]);
    }

    #[test]
    fn forward_scans_all_displacements() {
        let b = bank_1x3((1..=9).map(|v| v as f64).collect());
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = epitomic_forward(&x, &b, 1).unwrap();
        // Candidate scores are {37, 47, 67, 77}.
        assert_eq!(out.data(), &[77.0]);
        assert_eq!(argmax.entries, vec![(1, 1)]);
    }

    #[test]
    fn forward_imagenet_layer1_shapes() {
        let bank = EpitomeBank::<f32>::new(96, 12, 8, 3, 2, false, 0.0).unwrap();
        assert_eq!(bank.candidates_per_axis(), 3); // 9 candidate displacements per site
        let input = Tensor::zeros(1, 3, 220, 220);
        let (out, _) = epitomic_forward(&input, &bank, 4).unwrap();
        assert_eq!(out.dims(), (1, 96, 54, 54));
    }

    #[test]
    fn normalized_constant_filter_scores_zero() {
        let mut b = EpitomeBank::new(1, 2, 2, 1, 1, true, 0.01).unwrap();
        b.weights = vec![3.0; 4];
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let (out, _) = epitomic_forward(&x, &b, 1).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn normalized_two_element_filter_hand_value() {
        // w = [3, -1], x = [1, 0]: w_bar = [2, -2], contrast sqrt(8.01),
        // response 2 / sqrt(8.01).
        let mut b = EpitomeBank::new(1, 1, 1, 2, 1, true, 0.01).unwrap();
        b.weights = vec![3.0, -1.0];
        let x = Tensor::from_vec(1, 2, 1, 1, vec![1.0, 0.0]).unwrap();
        let (out, _) = epitomic_forward(&x, &b, 1).unwrap();
        let expected = 2.0 / 8.01f64.sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[0] - 0.70666).abs() < 1e-5);
    }

    #[test]
    fn backward_zero_grad_gives_zero_grads() {
        let b = bank_1x3((1..=9).map(|v| v as f64).collect());
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, argmax) = epitomic_forward(&x, &b, 1).unwrap();
        let g = Tensor::zeros(1, 1, 1, 1);
        let (gi, gb) = epitomic_backward(&g, &x, &b, &argmax, 1).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gb.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_routes_through_winning_window() {
        let b = bank_1x3((1..=9).map(|v| v as f64).collect());
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, argmax) = epitomic_forward(&x, &b, 1).unwrap();
        let g = Tensor::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        let (gi, gb) = epitomic_backward(&g, &x, &b, &argmax, 1).unwrap();
        // x scattered into window (1,1) of the epitome.
        assert_eq!(gb.weights, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
        // grad wrt input is the winning filter.
        assert_eq!(gi.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    /// Independent adjoint oracle for the unnormalized layer: route each
    /// upstream gradient through the recorded window with plain loops.
    fn brute_force_backward(
        grad_out: &Tensor<f64>,
        input: &Tensor<f64>,
        bank: &EpitomeBank<f64>,
        argmax: &ArgmaxMap,
        stride: usize,
    ) -> (Tensor<f64>, Vec<f64>) {
        assert!(!bank.normalize);
        let mut grad_in = Tensor::zeros(input.n, input.c, input.h, input.w);
        let mut grad_w = vec![0.0; bank.weights.len()];
        for im in 0..argmax.n {
            for ch in 0..argmax.channels {
                for gy in 0..argmax.h {
                    for gx in 0..argmax.w {
                        let g = grad_out.at(im, ch, gy, gx);
                        let (dy, dx) = argmax.entries[argmax.idx(im, ch, gy, gx)];
                        let k = ch; // one output per epitome in the mini-epitome case
                        let idxs = bank.filter_weight_indices(k, dy as usize, dx as usize);
                        let mut i = 0;
                        for c in 0..input.c {
                            for py in 0..bank.filter_side {
                                for px in 0..bank.filter_side {
                                    let x = input.at(im, c, gy * stride + py, gx * stride + px);
                                    grad_w[idxs[i]] += g * x;
                                    *grad_in.at_mut(im, c, gy * stride + py, gx * stride + px) +=
                                        g * bank.weights[idxs[i]];
                                    i += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        (grad_in, grad_w)
    }

    #[test]
    fn backward_sums_overlapping_windows() {
        // Two input sites share one epitome; when their winning windows
        // overlap the shared cells must accumulate both contributions.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut saw_overlap = false;
        for _ in 0..20 {
            let mut b = bank_1x3(vec![0.0; 9]);
            for wv in b.weights.iter_mut() {
                *wv = rng.gen_range(-1.0..1.0);
            }
            let x = Tensor::from_vec(
                1,
                1,
                2,
                4,
                (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let (_, argmax) = epitomic_forward(&x, &b, 2).unwrap();
            let g = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 1.0]).unwrap();
            let (gi, gb) = epitomic_backward(&g, &x, &b, &argmax, 2).unwrap();
            let (gi_o, gw_o) = brute_force_backward(&g, &x, &b, &argmax, 2);
            for (a, e) in gi.data().iter().zip(gi_o.data().iter()) {
                assert!((a - e).abs() < 1e-12);
            }
            for (a, e) in gb.weights.iter().zip(gw_o.iter()) {
                assert!((a - e).abs() < 1e-12);
            }
            let (d1, x1) = argmax.entries[0];
            let (d2, x2) = argmax.entries[1];
            let w1: std::collections::HashSet<_> = b
                .filter_weight_indices(0, d1 as usize, x1 as usize)
                .into_iter()
                .collect();
            let w2: std::collections::HashSet<_> = b
                .filter_weight_indices(0, d2 as usize, x2 as usize)
                .into_iter()
                .collect();
            if (d1, x1) != (d2, x2) && w1.intersection(&w2).next().is_some() {
                saw_overlap = true;
            }
        }
        assert!(saw_overlap, "no overlapping-window instance exercised");
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let k = rng.gen_range(1..=4);
            let w = rng.gen_range(1..=5);
            let v = rng.gen_range(w..=8);
            let c = rng.gen_range(1..=3);
            let s_e = rng.gen_range(1..=2.min(v - w + 1));
            let normalize = case % 2 == 0;
            let mut bank =
                EpitomeBank::new(k, v, w, c, s_e, normalize, if normalize { 0.01 } else { 0.0 })
                    .unwrap();
            for wv in bank.weights.iter_mut() {
                *wv = rng.gen_range(-1.0..1.0);
            }
            let h = rng.gen_range(w..w + 4);
            let x = Tensor::from_vec(
                1,
                c,
                h,
                h,
                (0..c * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let (out, _) = epitomic_forward(&x, &bank, 1).unwrap();
            let n_c = bank.candidates_per_axis();
            let oracle = brute_force_forward(&x, &bank, 1, n_c);
            for (a, b) in out.data().iter().zip(oracle.data().iter()) {
                assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn table3_output_channel_counts() {
        for (v, w, s_e, p_e, expected) in
            [(36, 8, 2, 3, 25), (26, 6, 1, 3, 49), (26, 3, 1, 3, 64)]
        {
            let bank = EpitomeBank::<f32>::new(4, v, w, 3, s_e, true, 0.01).unwrap();
            let tb = TopographicBank::new(bank, p_e).unwrap();
            let n_o = tb.outputs_per_axis();
            assert_eq!(n_o * n_o, expected);
        }
    }

    #[test]
    fn topographic_collapses_to_epitomic_when_single_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // V = W + D - 1, s_e = 1, P_e = D -> n_o = 1.
        let mut bank = EpitomeBank::new(2, 5, 3, 2, 1, true, 0.01).unwrap();
        for wv in bank.weights.iter_mut() {
            *wv = rng.gen_range(-1.0..1.0);
        }
        let tb = TopographicBank::new(bank.clone(), 3).unwrap();
        assert_eq!(tb.outputs_per_axis(), 1);
        let x = Tensor::from_vec(
            1,
            2,
            6,
            6,
            (0..72).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
        )
        .unwrap();
        let (out_e, am_e) = epitomic_forward(&x, &bank, 1).unwrap();
        let (out_t, am_t) = topographic_forward(&x, &tb, 1).unwrap();
        assert_eq!(out_e, out_t);
        assert_eq!(am_e, am_t);
        let g = Tensor::from_vec(
            1,
            2,
            4,
            4,
            (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (gi_e, gb_e) = epitomic_backward(&g, &x, &bank, &am_e, 1).unwrap();
        let (gi_t, gb_t) = topographic_backward(&g, &x, &tb, &am_t, 1).unwrap();
        assert_eq!(gi_e, gi_t);
        assert_eq!(gb_e.weights, gb_t.weights);
    }

    #[test]
    fn topographic_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = EpitomeBank::new(2, 8, 3, 1, 1, true, 0.01).unwrap();
        for wv in bank.weights.iter_mut() {
            *wv = rng.gen_range(-1.0..1.0);
        }
        let tb = TopographicBank::new(bank, 2).unwrap();
        assert_eq!(tb.outputs_per_axis(), 3);
        let x = Tensor::from_vec(
            1,
            1,
            5,
            5,
            (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (out, _) = topographic_forward(&x, &tb, 1).unwrap();
        let oracle = brute_force_forward(&x, &tb.bank, 1, tb.epit_pool);
        assert_eq!(out.dims(), (1, 18, 3, 3));
        for (a, b) in out.data().iter().zip(oracle.data().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn adjacent_topographic_channels_share_weight_cells() {
        // Hard-wired topography: with W > s_e * P_e, corresponding candidates
        // of adjacent pooling blocks are one block stride apart and alias
        // exactly (W - s_e * P_e) * W * C shared cells.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = EpitomeBank::<f64>::new(1, 12, 5, 2, 1, false, 0.0).unwrap();
        for wv in bank.weights.iter_mut() {
            *wv = rng.gen_range(-1.0..1.0);
        }
        let tb = TopographicBank::new(bank, 2).unwrap();
        let w = tb.bank.filter_side;
        let s_e = tb.bank.epitome_stride;
        let p_e = tb.epit_pool;
        assert!(w > s_e * p_e);
        let block_stride = s_e * p_e;
        let expect = (w - block_stride) * w * tb.bank.channels;
        let idx_a: std::collections::HashSet<_> =
            tb.bank.filter_weight_indices(0, 0, 0).into_iter().collect();
        let idx_b: std::collections::HashSet<_> = tb
            .bank
            .filter_weight_indices(0, 0, block_stride)
            .into_iter()
            .collect();
        assert_eq!(idx_a.intersection(&idx_b).count(), expect);

        // And on a real forward pass, winners of horizontally adjacent
        // channels are at most 2*P_e - 1 candidates apart, so they overlap
        // whenever W exceeds that span.
        let x = Tensor::from_vec(
            1,
            2,
            5,
            5,
            (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (out, argmax) = topographic_forward(&x, &tb, 1).unwrap();
        let n_o = tb.outputs_per_axis();
        assert_eq!(out.c, n_o * n_o);
        let max_span = s_e * (2 * p_e - 1);
        for a in 0..n_o {
            for b in 0..n_o.saturating_sub(1) {
                let e1 = argmax.entries[argmax.idx(0, a * n_o + b, 0, 0)];
                let e2 = argmax.entries[argmax.idx(0, a * n_o + b + 1, 0, 0)];
                let gap_y = (e1.0 as i64 - e2.0 as i64).unsigned_abs() as usize;
                let gap_x = (e1.1 as i64 - e2.1 as i64).unsigned_abs() as usize;
                assert!(gap_y <= max_span && gap_x <= max_span);
                if gap_y < w && gap_x < w {
                    let s1: std::collections::HashSet<_> = tb
                        .bank
                        .filter_weight_indices(0, e1.0 as usize, e1.1 as usize)
                        .into_iter()
                        .collect();
                    let s2: std::collections::HashSet<_> = tb
                        .bank
                        .filter_weight_indices(0, e2.0 as usize, e2.1 as usize)
                        .into_iter()
                        .collect();
                    assert!(s1.intersection(&s2).next().is_some());
                }
            }
        }
    }

    #[test]
    fn mean_shift_invariance_normalized() {
        // Dyadic weights and a power-of-two filter volume keep every
        // mean-subtraction step exact in floating point, so invariance to
        // v -> v + c*1 holds bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            // W=2, C=2 -> volume 8.
            let mut bank = EpitomeBank::new(2, 4, 2, 2, 1, true, 0.01).unwrap();
            for wv in bank.weights.iter_mut() {
                *wv = rng.gen_range(-32i32..32) as f64 / 8.0;
            }
            let c = rng.gen_range(-16i32..16) as f64 / 4.0;
            let mut shifted = bank.clone();
            for wv in shifted.weights.iter_mut() {
                *wv += c;
            }
            let x = Tensor::from_vec(
                1,
                2,
                3,
                3,
                (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let (out_a, am_a) = epitomic_forward(&x, &bank, 1).unwrap();
            let (out_b, am_b) = epitomic_forward(&x, &shifted, 1).unwrap();
            assert_eq!(out_a, out_b);
            assert_eq!(am_a.entries, am_b.entries);
        }
    }

    #[test]
    fn scale_invariance_normalized_lambda_zero() {
        // With lambda = 0 the response is scale free; scaling by a power of
        // two is even exact bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &scale in &[0.5, 2.0, 4.0] {
            let mut bank = EpitomeBank::new(2, 4, 2, 2, 1, false, 0.0).unwrap();
            bank.normalize = true; // lambda = 0 allowed only through this path
            for wv in bank.weights.iter_mut() {
                *wv = rng.gen_range(-1.0..1.0);
            }
            let mut scaled = bank.clone();
            for wv in scaled.weights.iter_mut() {
                *wv *= scale;
            }
            let x = Tensor::from_vec(
                1,
                2,
                3,
                3,
                (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let (out_a, _) = epitomic_forward(&x, &bank, 1).unwrap();
            let (out_b, _) = epitomic_forward(&x, &scaled, 1).unwrap();
            assert_eq!(out_a, out_b);
        }
    }

    #[test]
    fn argmax_sparsity_single_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut bank = EpitomeBank::new(2, 6, 3, 2, 1, false, 0.0).unwrap();
        for wv in bank.weights.iter_mut() {
            *wv = rng.gen_range(-1.0..1.0);
        }
        let x = Tensor::from_vec(
            1,
            2,
            3,
            3,
            (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, argmax) = epitomic_forward(&x, &bank, 1).unwrap();
        // Unit upstream gradient on channel 0 only.
        let g = Tensor::from_vec(1, 2, 1, 1, vec![1.0, 0.0]).unwrap();
        let (_, gb) = epitomic_backward(&g, &x, &bank, &argmax, 1).unwrap();
        let (dy, dx) = argmax.entries[0];
        let window: std::collections::HashSet<_> = bank
            .filter_weight_indices(0, dy as usize, dx as usize)
            .into_iter()
            .collect();
        for (i, &v) in gb.weights.iter().enumerate() {
            if !window.contains(&i) {
                assert_eq!(v, 0.0, "cell {i} outside the winning window is nonzero");
            }
        }
        assert!(window.iter().any(|&i| gb.weights[i] != 0.0));
    }
}
