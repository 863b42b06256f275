//! Dense row-major `f64` arrays and the numeric kernels behind every
//! differentiable op. Nothing in here knows about graphs.

use crate::autodiff::error::{AdError, Result};

/// An n-dimensional row-major array of 64-bit floats.
///
/// A shape of `[]` denotes a scalar holding exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AdError::InvalidShape {
                op: "array",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(AdError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, other: &Array, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Frobenius norm over every element.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_broadcastable(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(AdError::ShapeMismatch {
            op,
            lhs: small.to_vec(),
            rhs: big.to_vec(),
        })
    }
}

/// Splits a broadcast of `small` onto `big` into runs. Each run is
/// `(big_off, small_off, len, repeated)`: `len` consecutive elements of
/// `big` that read either `len` consecutive elements of `small` or, when
/// `repeated`, the single element at `small_off`.
fn broadcast_runs(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize, usize, bool)) {
    // Collapse adjacent axes of the same kind; drop axes of extent 1.
    let mut dims: Vec<(usize, bool)> = Vec::new();
    for (&s, &b) in small.iter().zip(big) {
        if b == 1 {
            continue;
        }
        let rep = s == 1;
        match dims.last_mut() {
            Some((n, r)) if *r == rep => *n *= b,
            _ => dims.push((b, rep)),
        }
    }
    let Some(&(inner, inner_rep)) = dims.last() else {
        f(0, 0, 1, false);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut small_strides = vec![0usize; outer.len()];
    let mut acc = if inner_rep { 1 } else { inner };
    for (i, &(n, rep)) in outer.iter().enumerate().rev() {
        if !rep {
            small_strides[i] = acc;
            acc *= n;
        }
    }
    let total: usize = outer.iter().map(|d| d.0).product();
    let mut counter = vec![0usize; outer.len()];
    let mut small_off = 0usize;
    for r in 0..total {
        f(r * inner, small_off, inner, inner_rep);
        for i in (0..outer.len()).rev() {
            counter[i] += 1;
            small_off += small_strides[i];
            if counter[i] < outer[i].0 {
                break;
            }
            small_off -= small_strides[i] * counter[i];
            counter[i] = 0;
        }
    }
}

pub(crate) fn broadcast_to(a: &Array, shape: &[usize]) -> Result<Array> {
    check_broadcastable("broadcast_to", &a.shape, shape)?;
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    broadcast_runs(&a.shape, shape, |bi, si, n, rep| {
        let dst = &mut out[bi..bi + n];
        if rep {
            dst.fill(a.data[si]);
        } else {
            dst.copy_from_slice(&a.data[si..si + n]);
        }
    });
    Ok(Array {
        shape: shape.to_vec(),
        data: out,
    })
}

pub(crate) fn sum_to(a: &Array, shape: &[usize]) -> Result<Array> {
    check_broadcastable("sum_to", shape, &a.shape)?;
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    broadcast_runs(shape, &a.shape, |bi, si, n, rep| {
        let src = &a.data[bi..bi + n];
        if rep {
            out[si] += src.iter().sum::<f64>();
        } else {
            for (o, v) in out[si..si + n].iter_mut().zip(src) {
                *o += v;
            }
        }
    });
    Ok(Array {
        shape: shape.to_vec(),
        data: out,
    })
}

/// `x ⊙ broadcast(s)` without materializing the broadcast.
pub(crate) fn mul_bcast(x: &Array, s: &Array) -> Result<Array> {
    check_broadcastable("mul_bcast", &s.shape, &x.shape)?;
    let mut out = vec![0.0; x.data.len()];
    broadcast_runs(&s.shape, &x.shape, |bi, si, n, rep| {
        let (dst, src) = (&mut out[bi..bi + n], &x.data[bi..bi + n]);
        if rep {
            let c = s.data[si];
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v * c);
        } else {
            let sv = &s.data[si..si + n];
            dst.iter_mut().zip(src).zip(sv).for_each(|((o, v), c)| *o = v * c);
        }
    });
    Ok(Array {
        shape: x.shape.clone(),
        data: out,
    })
}

/// `x + broadcast(s)` without materializing the broadcast.
pub(crate) fn add_bcast(x: &Array, s: &Array) -> Result<Array> {
    check_broadcastable("add_bcast", &s.shape, &x.shape)?;
    let mut out = vec![0.0; x.data.len()];
    broadcast_runs(&s.shape, &x.shape, |bi, si, n, rep| {
        let (dst, src) = (&mut out[bi..bi + n], &x.data[bi..bi + n]);
        if rep {
            let c = s.data[si];
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v + c);
        } else {
            let sv = &s.data[si..si + n];
            dst.iter_mut().zip(src).zip(sv).for_each(|((o, v), c)| *o = v + c);
        }
    });
    Ok(Array {
        shape: x.shape.clone(),
        data: out,
    })
}

/// `x ⊙ broadcast(s) + broadcast(t)` with `s` and `t` of one shape.
pub(crate) fn affine_bcast(x: &Array, s: &Array, t: &Array) -> Result<Array> {
    check_broadcastable("affine_bcast", &s.shape, &x.shape)?;
    if s.shape != t.shape {
        return Err(AdError::ShapeMismatch {
            op: "affine_bcast",
            lhs: s.shape.clone(),
            rhs: t.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.data.len()];
    broadcast_runs(&s.shape, &x.shape, |bi, si, n, rep| {
        let (dst, src) = (&mut out[bi..bi + n], &x.data[bi..bi + n]);
        if rep {
            let (a, c) = (s.data[si], t.data[si]);
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v * a + c);
        } else {
            let (sv, tv) = (&s.data[si..si + n], &t.data[si..si + n]);
            for (((o, v), a), c) in dst.iter_mut().zip(src).zip(sv).zip(tv) {
                *o = v * a + c;
            }
        }
    });
    Ok(Array {
        shape: x.shape.clone(),
        data: out,
    })
}

/// `sum_to(a ⊙ b, shape)` in one pass.
pub(crate) fn mul_sum_to(a: &Array, b: &Array, shape: &[usize]) -> Result<Array> {
    if a.shape != b.shape {
        return Err(AdError::ShapeMismatch {
            op: "mul_sum_to",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    check_broadcastable("mul_sum_to", shape, &a.shape)?;
    let mut out = vec![0.0; shape.iter().product()];
    broadcast_runs(shape, &a.shape, |bi, si, n, rep| {
        let (x, y) = (&a.data[bi..bi + n], &b.data[bi..bi + n]);
        if rep {
            out[si] += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        } else {
            for ((o, p), q) in out[si..si + n].iter_mut().zip(x).zip(y) {
                *o += p * q;
            }
        }
    });
    Ok(Array {
        shape: shape.to_vec(),
        data: out,
    })
}

/// Keeps `x` where `reference > 0`, zero elsewhere.
pub(crate) fn masked(x: &Array, reference: &Array) -> Result<Array> {
    x.zip_map(reference, "masked", |v, r| if r > 0.0 { v } else { 0.0 })
}

fn dims2(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match a.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        s => Err(AdError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected a 2-d matrix".into(),
        }),
    }
}

/// `c = a · b (+ c when accumulate)` for row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass buffers sized for (m×k), (k×n) and (m×n) under the
    // given strides; the output does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out, false);
    Ok(Array {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn transpose(a: &Array) -> Result<Array> {
    let (r, c) = dims2("transpose", a)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Array {
        shape: vec![c, r],
        data: out,
    })
}

fn dims4(op: &'static str, a: &Array) -> Result<[usize; 4]> {
    match a.shape.as_slice() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(AdError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected a 4-d (batch, channel, height, width) tensor".into(),
        }),
    }
}

fn conv_kernel_dims(op: &'static str, w: &Array) -> Result<(usize, usize)> {
    match w.shape.as_slice() {
        &[co, ci, 3, 3] => Ok((co, ci)),
        s => Err(AdError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected a (out, in, 3, 3) kernel".into(),
        }),
    }
}

/// Unfolds one image `[c, h, w]` into `[c*9, h*w]` patch columns for a
/// 3×3 kernel with stride 1 and zero padding 1.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = (ci * 9 + kh * 3 + kw) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + kh as isize - 1;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let sx = x as isize + kw as isize - 1;
                        *v = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1, no bias.
pub(crate) fn conv2d(x: &Array, k: &Array) -> Result<Array> {
    let [b, c, h, w] = dims4("conv2d", x)?;
    let (co, ci) = conv_kernel_dims("conv2d", k)?;
    if ci != c {
        return Err(AdError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: k.shape.clone(),
        });
    }
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    let mut out = vec![0.0; b * co * hw];
    for bi in 0..b {
        im2col(&x.data[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut cols);
        gemm(
            co,
            c * 9,
            hw,
            &k.data,
            (c * 9) as isize,
            1,
            &cols,
            hw as isize,
            1,
            &mut out[bi * co * hw..(bi + 1) * co * hw],
            false,
        );
    }
    Ok(Array {
        shape: vec![b, co, h, w],
        data: out,
    })
}

/// Gradient of a 3×3 convolution with respect to its kernel:
/// `dk[o,i,a,b] = Σ g[n,o,y,x] · x_pad[n,i,y+a-1,x+b-1]`.
pub(crate) fn conv2d_kernel_grad(x: &Array, g: &Array) -> Result<Array> {
    let [b, c, h, w] = dims4("conv2d_kernel_grad", x)?;
    let [gb, co, gh, gw] = dims4("conv2d_kernel_grad", g)?;
    if gb != b || gh != h || gw != w {
        return Err(AdError::ShapeMismatch {
            op: "conv2d_kernel_grad",
            lhs: x.shape.clone(),
            rhs: g.shape.clone(),
        });
    }
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    let mut out = vec![0.0; co * c * 9];
    for bi in 0..b {
        im2col(&x.data[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut cols);
        // (co × hw) · (hw × c*9), reading cols transposed.
        gemm(
            co,
            hw,
            c * 9,
            &g.data[bi * co * hw..(bi + 1) * co * hw],
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            &mut out,
            bi > 0,
        );
    }
    Ok(Array {
        shape: vec![co, c, 3, 3],
        data: out,
    })
}

/// Swaps the in/out channel axes and rotates each 3×3 tap by 180°, turning
/// a forward kernel into the kernel of its transposed convolution.
pub(crate) fn kernel_flip(k: &Array) -> Result<Array> {
    let (co, ci) = conv_kernel_dims("kernel_flip", k)?;
    let mut out = vec![0.0; k.data.len()];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..9 {
                out[(i * co + o) * 9 + (8 - t)] = k.data[(o * ci + i) * 9 + t];
            }
        }
    }
    Ok(Array {
        shape: vec![ci, co, 3, 3],
        data: out,
    })
}

/// Flat source offsets of the maxima of each 2×2 window. On exact ties the
/// earliest position in the window wins. Odd trailing rows/columns are
/// dropped (floor).
pub(crate) fn maxpool2x2_indices(x: &Array) -> Result<(Vec<usize>, Vec<usize>)> {
    let [b, c, h, w] = dims4("maxpool2d", x)?;
    if h < 2 || w < 2 {
        return Err(AdError::InvalidShape {
            op: "maxpool2d",
            shape: x.shape.clone(),
            reason: "spatial dims must be at least 2".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    let d = &x.data;
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            let top = base + 2 * y * w;
            for xx in 0..ow {
                let p = top + 2 * xx;
                let (mut best, mut bv) = (p, d[p]);
                for cand in [p + 1, p + w, p + w + 1] {
                    let v = d[cand];
                    let better = v > bv;
                    best = if better { cand } else { best };
                    bv = if better { v } else { bv };
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![b, c, oh, ow]))
}

pub(crate) fn gather(a: &Array, idx: &[usize], shape: &[usize]) -> Array {
    Array {
        shape: shape.to_vec(),
        data: idx.iter().map(|&i| a.data[i]).collect(),
    }
}

pub(crate) fn scatter(g: &Array, idx: &[usize], shape: &[usize]) -> Array {
    let mut out = vec![0.0; shape.iter().product()];
    for (&i, &v) in idx.iter().zip(&g.data) {
        out[i] += v;
    }
    Array {
        shape: shape.to_vec(),
        data: out,
    }
}

/// Row-wise log-sum-exp of a matrix, returned as a column `[rows, 1]`.
pub(crate) fn logsumexp_rows(a: &Array) -> Result<Array> {
    let (r, c) = dims2("logsumexp", a)?;
    let data = (0..r)
        .map(|i| {
            let row = &a.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Ok(Array { shape: vec![r, 1], data })
}

pub(crate) fn softplus(v: f64) -> f64 {
    // ln(1 + e^v) without overflow for large v
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
