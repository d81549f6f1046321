//! Dense 4-axis tensors, patch extraction (im2col) and the GEMM-shaped
//! matrix kernel every layer is built on.
//!
//! Summation order in `matmul` is fixed so results are bit-reproducible
//! run-to-run, including under row-parallel execution.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Count of scalar multiply-accumulates performed by `matmul` since the last
/// reset. Used by the cost-parity tests; not a wall-clock proxy.
static MAC_COUNT: AtomicU64 = AtomicU64::new(0);

pub fn reset_mac_count() {
    MAC_COUNT.store(0, Ordering::Relaxed);
}

pub fn mac_count() -> u64 {
    MAC_COUNT.load(Ordering::Relaxed)
}

/// Dense `N x C x H x W` tensor, row-major with `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![F::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!(
                    "data length {} does not match dims {}x{}x{}x{}",
                    data.len(),
                    n,
                    c,
                    h,
                    w
                ),
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> F {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut F {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Debug-build check that no operation produced NaN or Inf.
    pub fn debug_assert_finite(&self, context: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {context}"
        );
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

/// Origin site of one extracted patch row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

/// Rows of flattened input patches (channel-major within each row), one row
/// per grid site, so that convolution becomes a matrix product.
#[derive(Debug, Clone)]
pub struct PatchMatrix<F: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
    pub origins: Vec<PatchOrigin>,
}

impl<F: Scalar> PatchMatrix<F> {
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Number of valid filter placements along one axis (valid extraction only).
#[inline]
pub fn out_extent(input: usize, filter: usize, stride: usize) -> usize {
    (input - filter) / stride + 1
}

/// Extract `filter x filter` patches on a regular grid with the given stride.
/// Valid-region extraction only; no padding.
pub fn im2col<F: Scalar>(input: &Tensor<F>, filter: usize, stride: usize) -> Result<PatchMatrix<F>> {
    if filter == 0 || stride == 0 {
        return Err(Error::dim("im2col", "filter and stride must be positive"));
    }
    if filter > input.h || filter > input.w {
        return Err(Error::dim(
            "im2col",
            format!(
                "filter {}x{} larger than input {}x{}",
                filter, filter, input.h, input.w
            ),
        ));
    }
    let ho = out_extent(input.h, filter, stride);
    let wo = out_extent(input.w, filter, stride);
    let rows = input.n * ho * wo;
    let cols = filter * filter * input.c;
    let mut data = vec![F::zero(); rows * cols];
    let mut origins = Vec::with_capacity(rows);
    let mut r = 0;
    for image in 0..input.n {
        for gy in 0..ho {
            for gx in 0..wo {
                let oy = gy * stride;
                let ox = gx * stride;
                origins.push(PatchOrigin {
                    image,
                    y: oy,
                    x: ox,
                });
                let row = &mut data[r * cols..(r + 1) * cols];
                let mut col = 0;
                for c in 0..input.c {
                    for py in 0..filter {
                        let base = input.idx(image, c, oy + py, ox);
                        row[col..col + filter].copy_from_slice(&input.data[base..base + filter]);
                        col += filter;
                    }
                }
                r += 1;
            }
        }
    }
    Ok(PatchMatrix {
        rows,
        cols,
        data,
        origins,
    })
}

/// Adjoint of `im2col`: add each patch-gradient row into the input-gradient
/// tensor at its origin site. Overlapping sites sum.
pub fn col2im_accumulate<F: Scalar>(
    grads: &PatchMatrix<F>,
    into: &mut Tensor<F>,
    filter: usize,
    stride: usize,
) -> Result<()> {
    let ho = out_extent(into.h, filter, stride);
    let wo = out_extent(into.w, filter, stride);
    if grads.rows != into.n * ho * wo || grads.cols != filter * filter * into.c {
        return Err(Error::dim(
            "col2im_accumulate",
            format!(
                "patch matrix {}x{} inconsistent with target {:?}, filter {}, stride {}",
                grads.rows,
                grads.cols,
                into.dims(),
                filter,
                stride
            ),
        ));
    }
    for r in 0..grads.rows {
        let o = grads.origins[r];
        let row = grads.row(r);
        let mut col = 0;
        for c in 0..into.c {
            for py in 0..filter {
                let base = into.idx(o.image, c, o.y + py, o.x);
                for px in 0..filter {
                    into.data[base + px] = into.data[base + px] + row[col + px];
                }
                col += filter;
            }
        }
    }
    Ok(())
}

/// `out = a (m x k) * b (k x n)`, all row-major. Fixed i,l,j loop order:
/// each output element accumulates over `l` sequentially, so the result is
/// deterministic regardless of row-parallelism.
pub fn matmul<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    assert_eq!(a.len(), m * k, "matmul: lhs size mismatch");
    assert_eq!(b.len(), k * n, "matmul: rhs size mismatch");
    assert_eq!(out.len(), m * n, "matmul: output size mismatch");
    MAC_COUNT.fetch_add((m * n * k) as u64, Ordering::Relaxed);
    let body = |(i, out_row): (usize, &mut [F])| {
        out_row.fill(F::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if m >= 32 && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// `out = a^T (k x m)^T * b (k x n)` where `a` is stored `k x m` row-major.
pub fn matmul_at_b<F: Scalar>(a: &[F], k: usize, m: usize, b: &[F], n: usize, out: &mut [F]) {
    assert_eq!(a.len(), k * m, "matmul_at_b: lhs size mismatch");
    assert_eq!(b.len(), k * n, "matmul_at_b: rhs size mismatch");
    assert_eq!(out.len(), m * n, "matmul_at_b: output size mismatch");
    MAC_COUNT.fetch_add((m * n * k) as u64, Ordering::Relaxed);
    out.fill(F::zero());
    // Accumulation order over l is fixed and identical for every output cell.
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out = a (m x k) * b^T` where `b` is stored `n x k` row-major.
pub fn matmul_a_bt<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    assert_eq!(a.len(), m * k, "matmul_a_bt: lhs size mismatch");
    assert_eq!(b.len(), n * k, "matmul_a_bt: rhs size mismatch");
    assert_eq!(out.len(), m * n, "matmul_a_bt: output size mismatch");
    MAC_COUNT.fetch_add((m * n * k) as u64, Ordering::Relaxed);
    let body = |(i, out_row): (usize, &mut [F])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m >= 32 && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}
