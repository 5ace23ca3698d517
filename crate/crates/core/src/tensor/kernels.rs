// Raw forward/backward kernels over flat slices. Shape validation happens in
// the tape layer; everything here assumes consistent extents.

use super::{strides, Scalar, Tensor};
use crate::error::{dim_err, Result};

pub const ELU_ALPHA: f64 = 1.0;
pub const BCE_EPS: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `floor((extent + 2*padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// ---- matmul ----------------------------------------------------------------

pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// For each output batch, the (a, b) batch indices.
    pub batch_map: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return dim_err(format!("matmul needs rank >= 2 operands, got {a:?} x {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {a:?} x {b:?}"));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return dim_err(format!("matmul batch extents not broadcastable: {a:?} x {b:?}"));
        }
        batch.push(x.max(y));
    }
    let total: usize = batch.iter().product();
    let (sa, sb) = (strides(&pa), strides(&pb));
    let out_strides = strides(&batch);
    let batch_map = (0..total)
        .map(|flat| {
            let (mut ia, mut ib) = (0, 0);
            for d in 0..rank {
                let i = (flat / out_strides[d]) % batch[d];
                if pa[d] != 1 {
                    ia += i * sa[d];
                }
                if pb[d] != 1 {
                    ib += i * sb[d];
                }
            }
            (ia, ib)
        })
        .collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan { m, k, n, out_shape, batch_map })
}

/// out[m,n] += a[m,k] * b[k,n]; each output sums over k in ascending order.
#[inline]
pub(crate) fn gemm<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
#[inline]
pub(crate) fn gemm_nt<F: Scalar>(g: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + kk] = out[i * k + kk] + acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
#[inline]
pub(crate) fn gemm_tn<F: Scalar>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

pub(crate) fn matmul_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, plan: &MatmulPlan) -> Tensor<F> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![F::zero(); plan.batch_map.len() * m * n];
    for (bi, &(ia, ib)) in plan.batch_map.iter().enumerate() {
        gemm(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            &b.data()[ib * k * n..(ib + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::from_parts(plan.out_shape.clone(), out)
}

// ---- conv2d ----------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 {
            return dim_err(format!("conv2d expects [C,H,W] and [Co,Ci,kh,kw], got {input:?} and {kernels:?}"));
        }
        if input[0] != kernels[1] {
            return dim_err(format!("conv2d channel mismatch: input {input:?}, kernels {kernels:?}"));
        }
        let (oh, ow) = match (
            conv_output_extent(input[1], kernels[2], stride, pad),
            conv_output_extent(input[2], kernels[3], stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return dim_err(format!(
                    "kernel {kernels:?} does not fit input {input:?} with padding {pad}, stride {stride}"
                ))
            }
        };
        Ok(Self {
            c_in: input[0],
            h: input[1],
            w: input[2],
            c_out: kernels[0],
            kh: kernels[2],
            kw: kernels[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Output positions `o` along one axis whose source `o*stride + k - pad`
    /// lies inside `[0, extent)`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if extent + self.pad <= k { 0 } else { (extent + self.pad - k - 1) / s + 1 };
        lo..hi.min(out_extent).max(lo)
    }
}

// Per output element the contributions arrive in (ci, ky, kx) order starting
// from zero, the same order as a direct nested-loop reference.
pub(crate) fn conv2d_forward<F: Scalar>(input: &[F], kernels: &[F], g: &ConvGeom) -> Vec<F> {
    let plane = g.oh * g.ow;
    let mut out = vec![F::zero(); g.c_out * plane];
    for co in 0..g.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let oys = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = kernels[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let oxs = g.valid(kx, g.w, g.ow);
                    for oy in oys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let base = kx as isize - g.pad as isize;
                            for ox in oxs.clone() {
                                let ix = (ox as isize + base) as usize;
                                orow[ox] = orow[ox] + wv * srow[ix];
                            }
                        } else {
                            for ox in oxs.clone() {
                                let ix = ox * g.stride + kx - g.pad;
                                orow[ox] = orow[ox] + wv * srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_kernels<F: Scalar>(input: &[F], grad: &[F], g: &ConvGeom) -> Vec<F> {
    let plane = g.oh * g.ow;
    let mut dk = vec![F::zero(); g.c_out * g.c_in * g.kh * g.kw];
    for co in 0..g.c_out {
        let go = &grad[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let oys = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let oxs = g.valid(kx, g.w, g.ow);
                    let mut acc = F::zero();
                    for oy in oys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        for ox in oxs.clone() {
                            acc = acc + grow[ox] * srow[ox * g.stride + kx - g.pad];
                        }
                    }
                    dk[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    dk
}

pub(crate) fn conv2d_grad_input<F: Scalar>(kernels: &[F], grad: &[F], g: &ConvGeom) -> Vec<F> {
    let plane = g.oh * g.ow;
    let mut di = vec![F::zero(); g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        let go = &grad[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let dst = &mut di[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let oys = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = kernels[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let oxs = g.valid(kx, g.w, g.ow);
                    for oy in oys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        for ox in oxs.clone() {
                            let ix = ox * g.stride + kx - g.pad;
                            drow[ix] = drow[ix] + wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    di
}

// ---- max pool --------------------------------------------------------------

/// Non-overlapping `size x size` max pooling over [C,H,W]; returns the output
/// and, per output element, the flat input index of the (first) maximum.
pub(crate) fn maxpool_forward<F: Scalar>(x: &Tensor<F>, size: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 3 || size == 0 || s[1] < size || s[2] < size {
        return dim_err(format!("max_pool{size} cannot pool shape {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), arg))
}

// ---- reductions along an axis ---------------------------------------------

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(src[at(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<F: Scalar>(y: &Tensor<F>, g: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![F::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: F = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Layer normalisation over the last axis. Returns (output, xhat, 1/std per row).
pub(crate) fn layer_norm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let n = *x.shape().last().unwrap();
    let rows = x.len() / n;
    let eps = F::of(LAYER_NORM_EPS);
    let nf = F::of(n as f64);
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<F>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let is = F::one() / (var + eps).sqrt();
        inv.push(is);
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat[r * n + j] = h;
            out[r * n + j] = gamma[j] * h + beta[j];
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), out), xhat, inv)
}

pub(crate) struct LayerNormGrads<F> {
    pub dx: Vec<F>,
    pub dgamma: Vec<F>,
    pub dbeta: Vec<F>,
}

pub(crate) fn layer_norm_backward<F: Scalar>(
    g: &[F],
    xhat: &[F],
    inv: &[F],
    gamma: &[F],
) -> LayerNormGrads<F> {
    let n = gamma.len();
    let rows = g.len() / n;
    let nf = F::of(n as f64);
    let mut dx = vec![F::zero(); g.len()];
    let mut dgamma = vec![F::zero(); n];
    let mut dbeta = vec![F::zero(); n];
    let mut dh = vec![F::zero(); n];
    for r in 0..rows {
        let gr = &g[r * n..(r + 1) * n];
        let hr = &xhat[r * n..(r + 1) * n];
        let (mut sum_dh, mut sum_dh_h) = (F::zero(), F::zero());
        for j in 0..n {
            dgamma[j] = dgamma[j] + gr[j] * hr[j];
            dbeta[j] = dbeta[j] + gr[j];
            dh[j] = gr[j] * gamma[j];
            sum_dh = sum_dh + dh[j];
            sum_dh_h = sum_dh_h + dh[j] * hr[j];
        }
        for j in 0..n {
            dx[r * n + j] = inv[r] / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

// ---- layout ----------------------------------------------------------------

pub(crate) fn permute<F: Scalar>(x: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; axes.len()];
    let src = x.data();
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn concat<F: Scalar>(parts: &[&Tensor<F>], axis: usize) -> Tensor<F> {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_parts(shape, out)
}

/// Splits `g` along `axis` into pieces with the given extents.
pub(crate) fn split<F: Scalar>(g: &Tensor<F>, axis: usize, extents: &[usize]) -> Vec<Tensor<F>> {
    let (outer, _, inner) = axis_split(g.shape(), axis);
    let total: usize = extents.iter().sum();
    let mut offset = 0;
    extents
        .iter()
        .map(|&e| {
            let mut data = Vec::with_capacity(outer * e * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[start..start + e * inner]);
            }
            offset += e;
            let mut shape = g.shape().to_vec();
            shape[axis] = e;
            Tensor::from_parts(shape, data)
        })
        .collect()
}
