//! Forward and adjoint kernels.
//!
//! The `Tensor`-level functions at the top of this file are the public,
//! shape-checked entry points. The slice kernels below them are shared with
//! [`Graph`](super::Graph), which calls them when recording and replaying.

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Cross-correlation with square kernels.
///
/// `input` is `[C, H, W]` or batched `[N, C, H, W]`; `kernels` is
/// `[O, C, K, K]`. Output spatial size is `(H + 2*padding - K) / stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let batched = input.rank() == 4;
    let geom = ConvGeom::new(
        input.shape(),
        kernels.shape(),
        bias.shape(),
        stride,
        padding,
    )?;
    let out = conv2d_forward(input.data(), kernels.data(), bias.data(), &geom);
    let shape = if batched {
        vec![geom.n, geom.o, geom.oh, geom.ow]
    } else {
        vec![geom.o, geom.oh, geom.ow]
    };
    Tensor::new(&shape, out)
}

/// `y = W x + b` for `x` of shape `[n]`, or row-wise for `x` of shape `[N, n]`.
pub fn linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, n) = match input.shape() {
        [n] => (1, *n),
        [r, n] => (*r, *n),
        s => return Err(shape_err!("linear input must be rank 1 or 2, got {s:?}")),
    };
    let (m, wn) = match weight.shape() {
        [m, wn] => (*m, *wn),
        s => return Err(shape_err!("linear weight must be rank 2, got {s:?}")),
    };
    if wn != n || bias.shape() != [m] {
        return Err(shape_err!(
            "linear: input width {n}, weight {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        ));
    }
    let out = linear_forward(input.data(), rows, n, weight.data(), Some(bias.data()), m);
    if input.rank() == 1 {
        Tensor::new(&[m], out)
    } else {
        Tensor::new(&[rows, m], out)
    }
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&x| relu_scalar(x)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Derivative of relu; the subgradient at zero is taken as zero.
pub fn relu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// `-log softmax(scores)[target]`, evaluated with max subtraction.
pub fn softmax_cross_entropy<T: Real>(scores: &Tensor<T>, target: usize) -> Result<T> {
    let s = scores.data();
    if target >= s.len() {
        return Err(invalid!(
            "target {target} out of range for {} scores",
            s.len()
        ));
    }
    scores.ensure_finite("softmax_cross_entropy scores")?;
    Ok(softmax_ce_forward(s, target).0)
}

pub fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[inline]
pub(crate) fn relu_scalar<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Returns `(loss, probabilities)`.
pub(crate) fn softmax_ce_forward<T: Real>(s: &[T], target: usize) -> (T, Vec<T>) {
    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = s.iter().map(|&v| (v - max).exp()).sum();
    let log_total = total.ln();
    let loss = log_total + max - s[target];
    let probs = s.iter().map(|&v| (v - max - log_total).exp()).collect();
    (loss, probs)
}

/// Convolution geometry for a batch of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(shape_err!(
                    "conv2d input must be rank 3 or 4, got {input:?}"
                ))
            }
        };
        let (o, kc, k) = match *kernel {
            [o, kc, kh, kw] if kh == kw => (o, kc, kh),
            _ => {
                return Err(shape_err!(
                    "conv2d kernels must be [O, C, K, K], got {kernel:?}"
                ))
            }
        };
        if kc != c {
            return Err(shape_err!(
                "conv2d: input has {c} channels, kernels expect {kc}"
            ));
        }
        if bias != [o] {
            return Err(shape_err!("conv2d: bias {bias:?} for {o} output channels"));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("conv2d: {h}x{w} input too small for kernel {k}"));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub(crate) fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub(crate) fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub(crate) fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }
}

const PAD: u32 = u32::MAX;

/// For every kernel tap `(ky, kx)` and output position, the offset of the
/// input pixel it reads within one plane, or `PAD` for padding.
fn tap_table(g: &ConvGeom) -> Vec<u32> {
    let mut table = Vec::with_capacity(g.k * g.k * g.out_plane());
    for ky in 0..g.k {
        for kx in 0..g.k {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let inside = (0..g.h as isize).contains(&iy) && (0..g.w as isize).contains(&ix);
                    table.push(if inside {
                        (iy as usize * g.w + ix as usize) as u32
                    } else {
                        PAD
                    });
                }
            }
        }
    }
    table
}

/// Unfolds one `[C, H, W]` image into `[C*K*K, OH*OW]` columns.
fn unfold<T: Real>(img: &[T], g: &ConvGeom, table: &[u32], cols: &mut [T]) {
    let p = g.out_plane();
    let taps = g.k * g.k;
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let rows = &mut cols[ch * taps * p..(ch + 1) * taps * p];
        for (d, &i) in rows.iter_mut().zip(table) {
            *d = if i == PAD {
                T::zero()
            } else {
                plane[i as usize]
            };
        }
    }
}

/// Adjoint of [`unfold`]: scatters column gradients back onto the image.
fn fold_add<T: Real>(cols: &[T], g: &ConvGeom, table: &[u32], img: &mut [T]) {
    let p = g.out_plane();
    let taps = g.k * g.k;
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let rows = &cols[ch * taps * p..(ch + 1) * taps * p];
        for (&v, &i) in rows.iter().zip(table) {
            if i != PAD {
                plane[i as usize] += v;
            }
        }
    }
}

/// Returns the `[N, O, OH, OW]` output. Columns are unfolded one image at
/// a time into a reused buffer.
pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let patch = g.patch();
    let p = g.out_plane();
    let table = tap_table(g);
    let mut col = vec![T::zero(); patch * p];
    let mut out = vec![T::zero(); g.n * g.o * p];
    let kmat = MatRef::new(kernel, g.o, patch);
    for i in 0..g.n {
        let img = &input[i * g.in_image()..(i + 1) * g.in_image()];
        unfold(img, g, &table, &mut col);
        let dst = &mut out[i * g.o * p..(i + 1) * g.o * p];
        for (o, plane) in dst.chunks_mut(p).enumerate() {
            plane.fill(bias[o]);
        }
        gemm(kmat, MatRef::new(&col, patch, p), T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    dout: &[T],
    kernel: &[T],
    input: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let patch = g.patch();
    let p = g.out_plane();
    let mut dkernel = vec![T::zero(); g.o * patch];
    let mut dbias = vec![T::zero(); g.o];
    let mut dinput = need_input.then(|| vec![T::zero(); g.n * g.in_image()]);
    let mut dcols = vec![T::zero(); if need_input { patch * p } else { 0 }];
    let table = tap_table(g);
    let mut col = vec![T::zero(); patch * p];
    let kmat = MatRef::new(kernel, g.o, patch);
    for i in 0..g.n {
        let dy = &dout[i * g.o * p..(i + 1) * g.o * p];
        unfold(
            &input[i * g.in_image()..(i + 1) * g.in_image()],
            g,
            &table,
            &mut col,
        );
        for (o, plane) in dy.chunks(p).enumerate() {
            dbias[o] += plane.iter().copied().sum::<T>();
        }
        let dymat = MatRef::new(dy, g.o, p);
        gemm(
            dymat,
            MatRef::new(&col, patch, p).t(),
            T::one(),
            &mut dkernel,
        );
        if let Some(dinput) = dinput.as_mut() {
            gemm(kmat.t(), dymat, T::zero(), &mut dcols);
            fold_add(
                &dcols,
                g,
                &table,
                &mut dinput[i * g.in_image()..(i + 1) * g.in_image()],
            );
        }
    }
    ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: dbias,
    }
}

/// `[rows, n] x [m, n]^T + b -> [rows, m]`.
pub(crate) fn linear_forward<T: Real>(
    x: &[T],
    rows: usize,
    n: usize,
    w: &[T],
    b: Option<&[T]>,
    m: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * m];
    let beta = match b {
        Some(b) => {
            for row in out.chunks_mut(m) {
                row.copy_from_slice(b);
            }
            T::one()
        }
        None => T::zero(),
    };
    gemm(
        MatRef::new(x, rows, n),
        MatRef::new(w, m, n).t(),
        beta,
        &mut out,
    );
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    rows: usize,
    n: usize,
    w: &[T],
    m: usize,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let dymat = MatRef::new(dy, rows, m);
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); rows * n];
        gemm(dymat, MatRef::new(w, m, n), T::zero(), &mut dx);
        dx
    });
    let mut dw = vec![T::zero(); m * n];
    gemm(dymat.t(), MatRef::new(x, rows, n), T::zero(), &mut dw);
    let mut db = vec![T::zero(); m];
    for row in dy.chunks(m) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

/// Row pairs `(g*n + i, g*n + j)` for all groups, ordered `(g, i, j)`.
pub(crate) fn group_pairs(groups: usize, n: usize) -> Vec<(u32, u32)> {
    let mut pairs = Vec::with_capacity(groups * n * n);
    for g in 0..groups {
        for i in 0..n {
            for j in 0..n {
                pairs.push(((g * n + i) as u32, (g * n + j) as u32));
            }
        }
    }
    pairs
}

/// Linear layer applied to selected ordered pairs of rows.
///
/// `x` is `[rows, d]`, `w` is `[m, 2d]`. Output row `p` is
/// `w * concat(x[a], x[b]) + b` for `pairs[p] = (a, b)`, computed as
/// `A x_a + B x_b + b` with `A`, `B` the left and right column blocks of `w`.
pub(crate) fn pair_linear_forward<T: Real>(
    x: &[T],
    rows: usize,
    d: usize,
    w: &[T],
    b: &[T],
    m: usize,
    pairs: &[(u32, u32)],
) -> Vec<T> {
    let mut left = vec![T::zero(); rows * m];
    let mut right = vec![T::zero(); rows * m];
    let xm = MatRef::new(x, rows, d);
    gemm(
        xm,
        MatRef::strided(w, m, d, 2 * d).t(),
        T::zero(),
        &mut left,
    );
    gemm(
        xm,
        MatRef::strided(&w[d..], m, d, 2 * d).t(),
        T::zero(),
        &mut right,
    );
    let mut out = vec![T::zero(); pairs.len() * m];
    for (o, &(a, c)) in out.chunks_mut(m).zip(pairs) {
        let la = &left[a as usize * m..(a as usize + 1) * m];
        let rc = &right[c as usize * m..(c as usize + 1) * m];
        for k in 0..m {
            o[k] = la[k] + rc[k] + b[k];
        }
    }
    out
}

/// Returns `(dx, dw, db)` for [`pair_linear_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    rows: usize,
    d: usize,
    w: &[T],
    m: usize,
    pairs: &[(u32, u32)],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dleft = vec![T::zero(); rows * m];
    let mut dright = vec![T::zero(); rows * m];
    let mut db = vec![T::zero(); m];
    for (src, &(a, c)) in dy.chunks(m).zip(pairs) {
        let la = a as usize * m;
        let rc = c as usize * m;
        for k in 0..m {
            dleft[la + k] += src[k];
            dright[rc + k] += src[k];
            db[k] += src[k];
        }
    }
    let xm = MatRef::new(x, rows, d);
    let dl = MatRef::new(&dleft, rows, m);
    let dr = MatRef::new(&dright, rows, m);
    // dw is [m, 2d]: left block from dleft, right block from dright.
    let mut dwl = vec![T::zero(); m * d];
    let mut dwr = vec![T::zero(); m * d];
    gemm(dl.t(), xm, T::zero(), &mut dwl);
    gemm(dr.t(), xm, T::zero(), &mut dwr);
    let mut dw = vec![T::zero(); m * 2 * d];
    for r in 0..m {
        dw[r * 2 * d..r * 2 * d + d].copy_from_slice(&dwl[r * d..(r + 1) * d]);
        dw[r * 2 * d + d..(r + 1) * 2 * d].copy_from_slice(&dwr[r * d..(r + 1) * d]);
    }
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); rows * d];
        gemm(dl, MatRef::strided(w, m, d, 2 * d), T::zero(), &mut dx);
        gemm(dr, MatRef::strided(&w[d..], m, d, 2 * d), T::one(), &mut dx);
        dx
    });
    (dx, dw, db)
}
