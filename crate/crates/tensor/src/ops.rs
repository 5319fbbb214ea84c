//! Forward kernels and their vector-Jacobian products.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::CustomBackward;
use crate::tensor::Tensor;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Matmul layout resolved from operand shapes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    trans_b: bool,
}

/// Spatial layout for an NHWC im2col.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

pub(crate) enum Op<F: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize, dims: MatmulDims },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: F },
    AddScalar { a: usize },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    Permute { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Repeat { a: usize, times: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, axis: usize, normed: Vec<F>, rstd: Vec<F> },
    Gelu { a: usize },
    Relu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    L1Loss { a: usize, b: usize },
    MseLoss { a: usize, b: usize },
    Im2Col { a: usize, geom: Conv2dGeometry },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<F> },
    Custom { inputs: Vec<usize>, backward: Box<dyn CustomBackward<F>> },
}

impl<F: Scalar> Op<F> {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            L1Loss { a, b } | MseLoss { a, b } => vec![*a, *b],
            AddRow { a, row } | MulRow { a, row } => vec![*a, *row],
            Scale { a, .. }
            | AddScalar { a }
            | Permute { a, .. }
            | Reshape { a }
            | Repeat { a, .. }
            | Softmax { a, .. }
            | LayerNorm { a, .. }
            | Gelu { a }
            | Relu { a }
            | Sum { a }
            | Mean { a }
            | Im2Col { a, .. } => vec![*a],
            Concat { parts, .. } => parts.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Gradients for each entry of `inputs()`, given the upstream gradient.
    pub(crate) fn backward(
        &self,
        g: &[F],
        out: &Tensor<F>,
        inputs: &[&Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { dims, .. } => {
                let (ga, gb) = matmul_backward(*dims, g, inputs[0].data(), inputs[1].data());
                vec![Some(ga), Some(gb)]
            }
            Add { .. } => vec![Some(g.to_vec()), Some(g.to_vec())],
            Sub { .. } => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
            Mul { .. } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let ga = g.iter().zip(b).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(a).map(|(&g, &a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }
            Scale { s, .. } => vec![Some(g.iter().map(|&v| v * *s).collect())],
            AddScalar { .. } => vec![Some(g.to_vec())],
            AddRow { .. } => {
                let d = inputs[1].numel();
                let mut grow = vec![F::zero(); d];
                for chunk in g.chunks_exact(d) {
                    for (acc, &v) in grow.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                vec![Some(g.to_vec()), Some(grow)]
            }
            MulRow { .. } => {
                let (a, row) = (inputs[0].data(), inputs[1].data());
                let d = row.len();
                let mut ga = vec![F::zero(); g.len()];
                let mut grow = vec![F::zero(); d];
                for ((gc, ac), gac) in g.chunks_exact(d).zip(a.chunks_exact(d)).zip(ga.chunks_exact_mut(d)) {
                    for j in 0..d {
                        gac[j] = gc[j] * row[j];
                        grow[j] = grow[j] + gc[j] * ac[j];
                    }
                }
                vec![Some(ga), Some(grow)]
            }
            Permute { axes, .. } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![Some(permute_data(g, out.shape(), &inverse))]
            }
            Reshape { .. } => vec![Some(g.to_vec())],
            Concat { axis, .. } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total_len = out.shape()[*axis];
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|part| {
                        let len = part.shape()[*axis];
                        let mut gp = Vec::with_capacity(part.numel());
                        for o in 0..outer {
                            let start = (o * total_len + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        offset += len;
                        Some(gp)
                    })
                    .collect()
            }
            Repeat { times, .. } => {
                let len = inputs[0].numel();
                let mut ga = vec![F::zero(); len];
                for r in 0..*times {
                    for (acc, &v) in ga.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                        *acc = *acc + v;
                    }
                }
                vec![Some(ga)]
            }
            Softmax { axis, .. } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = F::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot = dot + g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }
            LayerNorm { axis, normed, rstd, .. } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let inv_len = F::from_f64(1.0 / len as f64);
                let mut gx = vec![F::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let r = rstd[o * inner + i];
                        let mut mean_g = F::zero();
                        let mut mean_gx = F::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            mean_g = mean_g + g[idx];
                            mean_gx = mean_gx + g[idx] * normed[idx];
                        }
                        mean_g = mean_g * inv_len;
                        mean_gx = mean_gx * inv_len;
                        for l in 0..len {
                            let idx = base + l * inner;
                            gx[idx] = r * (g[idx] - mean_g - normed[idx] * mean_gx);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Gelu { .. } => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect())]
            }
            Relu { .. } => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect(),
                )]
            }
            Sum { .. } => vec![Some(vec![g[0]; inputs[0].numel()])],
            Mean { .. } => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / F::from_f64(n as f64); n])]
            }
            L1Loss { .. } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let scale = g[0] / F::from_f64(a.len() as f64);
                let ga: Vec<F> = a
                    .iter()
                    .zip(b)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > F::zero() {
                            scale
                        } else if d < F::zero() {
                            -scale
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![Some(ga), Some(gb)]
            }
            MseLoss { .. } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let scale = g[0] * F::from_f64(2.0 / a.len() as f64);
                let ga: Vec<F> = a.iter().zip(b).map(|(&a, &b)| scale * (a - b)).collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![Some(ga), Some(gb)]
            }
            Im2Col { geom, .. } => vec![Some(col2im(g, geom))],
            Attention { dims, probs, .. } => {
                let (gq, gk, gv) = attention_backward(dims, g, inputs[0].data(), inputs[1].data(), inputs[2].data(), probs);
                vec![Some(gq), Some(gk), Some(gv)]
            }
            Custom { backward, .. } => backward.backward(g, inputs, out),
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Layout of a fused multi-head attention: queries `[batch, len_q, width]`,
/// keys and values `[batch, len_kv, width]`, `heads` slices of the width.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub len_q: usize,
    pub len_kv: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale<F: Scalar>(&self) -> F {
        F::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// General strided `c = alpha·a·b + beta·c`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<F: Scalar>(
    (m, k, n): (usize, usize, usize),
    alpha: F,
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    beta: F,
    c: &mut [F],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index gemm touches.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Returns `(output, softmax probabilities [batch, heads, len_q, len_kv])`.
pub(crate) fn attention_forward<F: Scalar>(d: &AttnDims, q: &[F], k: &[F], v: &[F]) -> (Vec<F>, Vec<F>) {
    let (lq, lk, w, dh) = (d.len_q, d.len_kv, d.width, d.head_dim());
    let mut probs = vec![F::zero(); d.batch * d.heads * lq * lk];
    let mut out = vec![F::zero(); d.batch * lq * w];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qo = b * lq * w + h * dh;
            let ko = b * lk * w + h * dh;
            let p = &mut probs[(b * d.heads + h) * lq * lk..(b * d.heads + h + 1) * lq * lk];
            gemm_strided((lq, dh, lk), d.scale(), &q[qo..], (w, 1), &k[ko..], (1, w), F::zero(), p, (lk, 1));
            for row in p.chunks_exact_mut(lk) {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total = total + *x;
                }
                let inv = F::one() / total;
                for x in row.iter_mut() {
                    *x = *x * inv;
                }
            }
            gemm_strided((lq, lk, dh), F::one(), p, (lk, 1), &v[ko..], (w, 1), F::zero(), &mut out[qo..], (w, 1));
        }
    }
    (out, probs)
}

fn attention_backward<F: Scalar>(d: &AttnDims, g: &[F], q: &[F], k: &[F], v: &[F], probs: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (lq, lk, w, dh) = (d.len_q, d.len_kv, d.width, d.head_dim());
    let (mut gq, mut gk, mut gv) = (vec![F::zero(); q.len()], vec![F::zero(); k.len()], vec![F::zero(); v.len()]);
    let mut dp = vec![F::zero(); lq * lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qo = b * lq * w + h * dh;
            let ko = b * lk * w + h * dh;
            let p = &probs[(b * d.heads + h) * lq * lk..(b * d.heads + h + 1) * lq * lk];
            // dP = G·Vᵀ, dV = Pᵀ·G
            gemm_strided((lq, dh, lk), F::one(), &g[qo..], (w, 1), &v[ko..], (1, w), F::zero(), &mut dp, (lk, 1));
            gemm_strided((lk, lq, dh), F::one(), p, (1, lk), &g[qo..], (w, 1), F::zero(), &mut gv[ko..], (w, 1));
            // Softmax VJP, folded with the score scale.
            for (drow, prow) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in drow.iter_mut().zip(prow) {
                    *x = pv * (*x - dot) * d.scale();
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q
            gemm_strided((lq, lk, dh), F::one(), &dp, (lk, 1), &k[ko..], (w, 1), F::zero(), &mut gq[qo..], (w, 1));
            gemm_strided((lk, lq, dh), F::one(), &dp, (1, lk), &q[qo..], (w, 1), F::zero(), &mut gk[ko..], (w, 1));
        }
    }
    (gq, gk, gv)
}

fn gemm<F: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    beta: F,
    c: &mut [F],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index gemm touches.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolves `a @ b` (or `a @ b^T`) for 2-D and batched 3-D operands.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(MatmulDims, Vec<usize>)> {
    let op = if trans_b { "matmul_t" } else { "matmul" };
    let (b_rows, b_cols) = match b.len() {
        2 => (b[0], b[1]),
        3 => (b[1], b[2]),
        _ => return shape_err(op, a, b),
    };
    let (bk, bn) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    let dims = match (a.len(), b.len()) {
        (2, 2) if a[1] == bk => MatmulDims { batch: 1, m: a[0], k: bk, n: bn, b_batched: false, trans_b },
        (3, 2) if a[2] == bk => MatmulDims { batch: 1, m: a[0] * a[1], k: bk, n: bn, b_batched: false, trans_b },
        (3, 3) if a[0] == b[0] && a[2] == bk => {
            MatmulDims { batch: a[0], m: a[1], k: bk, n: bn, b_batched: true, trans_b }
        }
        _ => return shape_err(op, a, b),
    };
    let mut out = a[..a.len() - 1].to_vec();
    out.push(bn);
    Ok((dims, out))
}

fn b_strides(d: &MatmulDims) -> (usize, usize) {
    if d.trans_b {
        (1, d.k)
    } else {
        (d.n, 1)
    }
}

pub(crate) fn matmul_forward<F: Scalar>(d: MatmulDims, a: &[F], b: &[F]) -> Vec<F> {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut c = vec![F::zero(); d.batch * m * n];
    for bi in 0..d.batch {
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let b_s = if d.b_batched { &b[bi * k * n..(bi + 1) * k * n] } else { b };
        gemm((m, k, n), a_s, (k, 1), b_s, b_strides(&d), F::zero(), &mut c[bi * m * n..(bi + 1) * m * n]);
    }
    c
}

fn matmul_backward<F: Scalar>(d: MatmulDims, g: &[F], a: &[F], b: &[F]) -> (Vec<F>, Vec<F>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut ga = vec![F::zero(); a.len()];
    let mut gb = vec![F::zero(); b.len()];
    let (brs, bcs) = b_strides(&d);
    for bi in 0..d.batch {
        let g_s = &g[bi * m * n..(bi + 1) * m * n];
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let (b_s, gb_s) = if d.b_batched {
            (&b[bi * k * n..(bi + 1) * k * n], &mut gb[bi * k * n..(bi + 1) * k * n])
        } else {
            (b, &mut gb[..])
        };
        // dA = dC · Bᵀ
        gemm((m, n, k), g_s, (n, 1), b_s, (bcs, brs), F::zero(), &mut ga[bi * m * k..(bi + 1) * m * k]);
        // dB = Aᵀ · dC, written in B's storage order.
        if d.trans_b {
            // stored [n, k]: dBᵀ = dCᵀ · A
            gemm((n, m, k), g_s, (1, n), a_s, (k, 1), F::one(), gb_s);
        } else {
            gemm((k, m, n), a_s, (1, k), g_s, (n, 1), F::one(), gb_s);
        }
    }
    (ga, gb)
}

pub(crate) fn permute_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

/// Materializes `data` (with `shape`) permuted so that output axis i is input axis `axes[i]`.
pub(crate) fn permute_data<F: Scalar>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permute_shape(shape, axes);
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn softmax_forward<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut total = F::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                y[base + l * inner] = e;
                total = total + e;
            }
            for l in 0..len {
                y[base + l * inner] = y[base + l * inner] / total;
            }
        }
    }
    y
}

pub(crate) fn layer_norm_forward<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> (Vec<F>, Vec<F>) {
    let (outer, len, inner) = axis_split(shape, axis);
    let inv_len = F::from_f64(1.0 / len as f64);
    let eps = F::from_f64(LAYER_NORM_EPS);
    let mut y = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); outer * inner];
    if inner == 1 {
        for ((xr, yr), r) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)).zip(rstd.iter_mut()) {
            let mean = xr.iter().copied().sum::<F>() * inv_len;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_len;
            *r = F::one() / (var + eps).sqrt();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * *r;
            }
        }
        return (y, rstd);
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = F::zero();
            for l in 0..len {
                mean = mean + x[base + l * inner];
            }
            mean = mean * inv_len;
            let mut var = F::zero();
            for l in 0..len {
                let d = x[base + l * inner] - mean;
                var = var + d * d;
            }
            let r = F::one() / (var * inv_len + eps).sqrt();
            rstd[o * inner + i] = r;
            for l in 0..len {
                y[base + l * inner] = (x[base + l * inner] - mean) * r;
            }
        }
    }
    (y, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `0.5·x·(1 + tanh(u))`, evaluated as `x·σ(2u)`.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-F::from_f64(2.0) * gelu_inner(x)).exp())
}

fn gelu_inner<F: Scalar>(x: F) -> F {
    F::from_f64(GELU_C) * (x + F::from_f64(GELU_A) * x * x * x)
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let two = F::from_f64(2.0);
    let th = two / (F::one() + (-two * gelu_inner(x)).exp()) - F::one();
    let dinner = c * (F::one() + F::from_f64(3.0) * a * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * dinner
}

pub(crate) fn check_conv_geometry(shape: &[usize], geom: &Conv2dGeometry) -> Result<()> {
    let expect = [geom.batch, geom.height, geom.width, geom.channels];
    if shape != expect {
        return shape_err("im2col", shape, &expect);
    }
    if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.padding < geom.kernel || geom.width + 2 * geom.padding < geom.kernel {
        return invalid("im2col", format!("kernel/stride/padding incompatible with input: {geom:?}"));
    }
    Ok(())
}

/// NHWC patches: output row = (b, oy, ox), column = (ky, kx, c).
pub(crate) fn im2col<F: Scalar>(x: &[F], g: &Conv2dGeometry) -> Vec<F> {
    let (oh, ow, plen) = (g.out_height(), g.out_width(), g.patch_len());
    let mut out = vec![F::zero(); g.batch * oh * ow * plen];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.channels;
                        let dst = row + (ky * g.kernel + kx) * g.channels;
                        out[dst..dst + g.channels].copy_from_slice(&x[src..src + g.channels]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<F: Scalar>(cols: &[F], g: &Conv2dGeometry) -> Vec<F> {
    let (oh, ow, plen) = (g.out_height(), g.out_width(), g.patch_len());
    let mut x = vec![F::zero(); g.batch * g.height * g.width * g.channels];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.channels;
                        let src = row + (ky * g.kernel + kx) * g.channels;
                        for c in 0..g.channels {
                            x[dst + c] = x[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}
