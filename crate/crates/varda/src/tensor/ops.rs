//! Forward implementations and backward closures for every tape operation.
//!
//! Broadcasting is deliberately narrow: two operands must have equal shapes,
//! or one must be a single element, or the smaller shape must be a trailing
//! suffix of the larger (so the smaller tensor is repeated over the leading
//! axes). Anything else is a shape error; there is no general NumPy-style
//! alignment and no silent expansion along interior axes.

use std::cell::Ref;

use super::kernels::{col2im_acc, im2col, matmul_abt_acc, matmul_acc, matmul_atb_acc, ConvGeom};
use super::{Tape, Tensor, TensorError};
use crate::Real;

impl Tensor {
    /// Gradient values if present, as a borrow rather than a clone.
    pub(crate) fn grad_data(&self) -> Option<Ref<'_, [Real]>> {
        let r = self.inner.grad.borrow();
        if r.is_some() {
            Some(Ref::map(r, |o| o.as_deref().unwrap()))
        } else {
            None
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn apply(self, a: Real, b: Real) -> Real {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }

    /// Partials (d out / d a, d out / d b) at one element.
    fn partials(self, g: Real, a: Real, b: Real) -> (Real, Real) {
        match self {
            BinKind::Add => (g, g),
            BinKind::Sub => (g, -g),
            BinKind::Mul => (g * b, g * a),
            BinKind::Div => (g / b, -g * a / (b * b)),
        }
    }
}

/// How operand shapes line up: `a_is_big` says which operand keeps the output
/// shape, `small_len` divides the big length and indexes the small operand as
/// `i % small_len` (1 for a single-element operand, equal lengths when the
/// shapes match exactly).
struct BcastPlan {
    a_is_big: bool,
    small_len: usize,
}

fn broadcast_plan(op: &'static str, a: &Tensor, b: &Tensor) -> Result<BcastPlan, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    let (na, nb) = (a.numel(), b.numel());
    let (big, small, a_is_big) = if na >= nb { (sa, sb, true) } else { (sb, sa, false) };
    let small_len = small.iter().product::<usize>().max(1);
    let compatible = small_len == 1 || big.ends_with(small);
    if !compatible {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("cannot broadcast {sa:?} against {sb:?} (equal, single-element, or trailing-suffix shapes only)"),
        });
    }
    Ok(BcastPlan { a_is_big, small_len })
}

impl Tape {
    fn binary(&self, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if matches!(kind, BinKind::Div) {
            if b.data().iter().any(|&v| v == 0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    detail: "zero divisor; clamp the denominator first".into(),
                });
            }
        }
        let plan = broadcast_plan(kind.name(), a, b)?;
        let (big, small) = if plan.a_is_big { (a, b) } else { (b, a) };
        let s_len = plan.small_len;
        let bd = big.data();
        let sd = small.data();
        let n = bd.len();

        let mut out = Vec::with_capacity(n);
        if s_len == n {
            if plan.a_is_big {
                out.extend(bd.iter().zip(sd.iter()).map(|(&x, &y)| kind.apply(x, y)));
            } else {
                out.extend(bd.iter().zip(sd.iter()).map(|(&x, &y)| kind.apply(y, x)));
            }
        } else if s_len == 1 {
            let sv = sd[0];
            if plan.a_is_big {
                out.extend(bd.iter().map(|&x| kind.apply(x, sv)));
            } else {
                out.extend(bd.iter().map(|&x| kind.apply(sv, x)));
            }
        } else {
            for chunk in bd.chunks_exact(s_len) {
                if plan.a_is_big {
                    out.extend(chunk.iter().zip(sd.iter()).map(|(&x, &y)| kind.apply(x, y)));
                } else {
                    out.extend(chunk.iter().zip(sd.iter()).map(|(&x, &y)| kind.apply(y, x)));
                }
            }
        }
        drop(bd);
        drop(sd);

        let result = self.out(big.shape().to_vec(), out, &[a, b]);
        if result.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), result.clone());
            let a_is_big = plan.a_is_big;
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let n = g.len();
                let (big_t, small_t) = if a_is_big { (&a2, &b2) } else { (&b2, &a2) };
                let mut gbig = vec![0.0; n];
                let mut gsmall = vec![0.0; s_len];
                {
                    let bd = big_t.data();
                    let sd = small_t.data();
                    for i in 0..n {
                        let s = i % s_len;
                        let (av, bv) = if a_is_big { (bd[i], sd[s]) } else { (sd[s], bd[i]) };
                        let (da, db) = kind.partials(g[i], av, bv);
                        let (dbig, dsmall) = if a_is_big { (da, db) } else { (db, da) };
                        gbig[i] += dbig;
                        gsmall[s] += dsmall;
                    }
                }
                drop(g);
                big_t.accumulate_grad(&gbig);
                small_t.accumulate_grad(&gsmall);
            });
        }
        Ok(result)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Elementwise division. A zero anywhere in the denominator is a domain
    /// error; clamp first if zeros are possible.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let data = a.data().iter().map(|&v| -v).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ga: Vec<Real> = g.iter().map(|&v| -v).collect();
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor, c: Real) -> Result<Tensor, TensorError> {
        let data = a.data().iter().map(|&v| v + c).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ga: Vec<Real> = g.to_vec();
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn mul_scalar(&self, a: &Tensor, c: Real) -> Result<Tensor, TensorError> {
        let data = a.data().iter().map(|&v| v * c).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ga: Vec<Real> = g.iter().map(|&v| v * c).collect();
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// `exp` can overflow to infinity for large arguments; it is the
    /// designated way out of log space and callers keep its input clamped.
    pub fn exp(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let data: Vec<Real> = a.data().iter().map(|&v| v.exp()).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let od = o2.data();
                let ga: Vec<Real> = g.iter().zip(od.iter()).map(|(&gv, &ov)| gv * ov).collect();
                drop(od);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Natural log; requires strictly positive input (clamp first otherwise).
    pub fn log(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "nonpositive input; clamp to a positive floor first".into(),
            });
        }
        let data: Vec<Real> = a.data().iter().map(|&v| v.ln()).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ad = a2.data();
                let ga: Vec<Real> = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv / av).collect();
                drop(ad);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Square root; requires strictly positive input so the backward pass
    /// stays finite.
    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "nonpositive input; clamp to a positive floor first".into(),
            });
        }
        let data: Vec<Real> = a.data().iter().map(|&v| v.sqrt()).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let od = o2.data();
                let ga: Vec<Real> =
                    g.iter().zip(od.iter()).map(|(&gv, &ov)| gv * 0.5 / ov).collect();
                drop(od);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let data: Vec<Real> = a.data().iter().map(|&v| v * v).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ad = a2.data();
                let ga: Vec<Real> =
                    g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * 2.0 * av).collect();
                drop(ad);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let data: Vec<Real> = a.data().iter().map(|&v| v.max(0.0)).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ad = a2.data();
                let ga: Vec<Real> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gv, &av)| if av > 0.0 { gv } else { 0.0 })
                    .collect();
                drop(ad);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Clamp values into `[lo, hi]`; gradient passes only strictly inside the
    /// interval and is zero on the boundary and outside.
    pub fn clamp(&self, a: &Tensor, lo: Real, hi: Real) -> Result<Tensor, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                detail: format!("lo {lo} must not exceed hi {hi}"),
            });
        }
        let data: Vec<Real> = a.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let out = self.out(a.shape().to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ad = a2.data();
                let ga: Vec<Real> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gv, &av)| if av > lo && av < hi { gv } else { 0.0 })
                    .collect();
                drop(ad);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let total: Real = a.data().iter().sum();
        let out = self.out(vec![], vec![total], &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let g0 = g[0];
                drop(g);
                let ga = vec![g0; a2.numel()];
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let n = a.numel() as Real;
        let total: Real = a.data().iter().sum();
        let out = self.out(vec![], vec![total / n], &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let g0 = g[0] / n;
                drop(g);
                let ga = vec![g0; a2.numel()];
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    pub fn sum_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        self.reduce_axis("sum_axis", a, axis, 1.0)
    }

    pub fn mean_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let len = *a.shape().get(axis).ok_or(TensorError::InvalidArgument {
            op: "mean_axis",
            detail: format!("axis {axis} out of range for shape {:?}", a.shape()),
        })?;
        self.reduce_axis("mean_axis", a, axis, 1.0 / len as Real)
    }

    /// Sum over `axis` scaled by `scale`, removing that axis from the shape.
    fn reduce_axis(
        &self,
        op: &'static str,
        a: &Tensor,
        axis: usize,
        scale: Real,
    ) -> Result<Tensor, TensorError> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op,
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_decomp(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);

        let ad = a.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &ad[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[i];
                }
            }
        }
        if scale != 1.0 {
            for v in &mut data {
                *v *= scale;
            }
        }
        drop(ad);

        let out = self.out(out_shape, data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let dst = &mut ga[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for i in 0..inner {
                            dst[i] = src[i] * scale;
                        }
                    }
                }
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis` (max subtraction per slice).
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_decomp(shape, axis);
        let ad = a.data();
        let mut data = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = Real::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(ad[at(k)]);
                }
                let mut denom = 0.0;
                for k in 0..len {
                    let e = (ad[at(k)] - mx).exp();
                    data[at(k)] = e;
                    denom += e;
                }
                for k in 0..len {
                    data[at(k)] /= denom;
                }
            }
        }
        drop(ad);

        let out = self.out(shape.to_vec(), data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let p = o2.data();
                let mut ga = vec![0.0; p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[at(k)] * p[at(k)];
                        }
                        for k in 0..len {
                            ga[at(k)] = p[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                drop(p);
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// [m x k] times [k x n].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("incompatible shapes {sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(&a.data(), &b.data(), &mut data, m, k, n);

        let out = self.out(vec![m, n], data, &[a, b]);
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                if a2.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    matmul_abt_acc(&g, &b2.data(), &mut ga, m, n, k);
                    a2.accumulate_grad(&ga);
                }
                if b2.requires_grad() {
                    let mut gb = vec![0.0; k * n];
                    matmul_atb_acc(&a2.data(), &g, &mut gb, m, k, n);
                    b2.accumulate_grad(&gb);
                }
            });
        }
        Ok(out)
    }

    /// 2-D convolution: x is [batch x in_ch x h x w], w is
    /// [out_ch x in_ch x kh x kw], zero padding `pad` on all sides.
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, TensorError> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("want 4-d input and weight, got {sx:?} and {sw:?}"),
            });
        }
        if sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} != weight channels {}", sx[1], sw[1]),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let img_len = c * h * wd;

        let xd = x.data();
        let wd_ = w.data();
        let mut data = vec![0.0; bsz * f * ol];
        let mut cols = vec![0.0; if geom.is_identity_cols() { 0 } else { pl * ol }];
        for b in 0..bsz {
            let img = &xd[b * img_len..(b + 1) * img_len];
            let dst = &mut data[b * f * ol..(b + 1) * f * ol];
            if geom.is_identity_cols() {
                matmul_acc(&wd_, img, dst, f, pl, ol);
            } else {
                im2col(img, &geom, &mut cols);
                matmul_acc(&wd_, &cols, dst, f, pl, ol);
            }
        }
        drop(xd);
        drop(wd_);

        let out = self.out(vec![bsz, f, oh, ow], data, &[x, w]);
        if out.requires_grad() {
            let (x2, w2, o2) = (x.clone(), w.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let xd = x2.data();
                let wd_ = w2.data();
                let mut cols = vec![0.0; if geom.is_identity_cols() { 0 } else { pl * ol }];

                if w2.requires_grad() {
                    let mut gw = vec![0.0; f * pl];
                    for b in 0..bsz {
                        let img = &xd[b * img_len..(b + 1) * img_len];
                        let gb = &g[b * f * ol..(b + 1) * f * ol];
                        if geom.is_identity_cols() {
                            matmul_abt_acc(gb, img, &mut gw, f, ol, pl);
                        } else {
                            im2col(img, &geom, &mut cols);
                            matmul_abt_acc(gb, &cols, &mut gw, f, ol, pl);
                        }
                    }
                    w2.accumulate_grad(&gw);
                }

                if x2.requires_grad() {
                    // w^T laid out [patch x out_ch] once, reused per image.
                    let mut wt = vec![0.0; pl * f];
                    for fi in 0..f {
                        for p in 0..pl {
                            wt[p * f + fi] = wd_[fi * pl + p];
                        }
                    }
                    let mut gx = vec![0.0; bsz * img_len];
                    let mut dcols = vec![0.0; pl * ol];
                    for b in 0..bsz {
                        let gb = &g[b * f * ol..(b + 1) * f * ol];
                        let dst = &mut gx[b * img_len..(b + 1) * img_len];
                        if geom.is_identity_cols() {
                            matmul_acc(&wt, gb, dst, pl, f, ol);
                        } else {
                            dcols.fill(0.0);
                            matmul_acc(&wt, gb, &mut dcols, pl, f, ol);
                            col2im_acc(&dcols, &geom, dst);
                        }
                    }
                    x2.accumulate_grad(&gx);
                }
            });
        }
        Ok(out)
    }

    /// Add a per-channel bias to a [batch x ch x h x w] tensor.
    pub fn add_channel_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (sx, sb) = (x.shape(), bias.shape());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                detail: format!("want [b,c,h,w] and [c], got {sx:?} and {sb:?}"),
            });
        }
        let (bsz, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        let xd = x.data();
        let bd = bias.data();
        let mut data = Vec::with_capacity(xd.len());
        for b in 0..bsz {
            for ch in 0..c {
                let bias_v = bd[ch];
                let src = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                data.extend(src.iter().map(|&v| v + bias_v));
            }
        }
        drop(xd);
        drop(bd);

        let out = self.out(sx.to_vec(), data, &[x, bias]);
        if out.requires_grad() {
            let (x2, b2, o2) = (x.clone(), bias.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                if x2.requires_grad() {
                    x2.accumulate_grad(&g);
                }
                if b2.requires_grad() {
                    let mut gb = vec![0.0; c];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let src = &g[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                            gb[ch] += src.iter().sum::<Real>();
                        }
                    }
                    b2.accumulate_grad(&gb);
                }
            });
        }
        Ok(out)
    }

    /// Nearest-neighbor upsample of a [b x c x h x w] tensor by an integer
    /// factor.
    pub fn upsample_nearest(&self, x: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_nearest",
                detail: format!("want 4-d input, got {sx:?}"),
            });
        }
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                detail: "factor must be at least 1".into(),
            });
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut data = vec![0.0; bc * oh * ow];
        for p in 0..bc {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / factor;
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * w + ox / factor];
                }
            }
        }
        drop(xd);

        let out = self.out(vec![sx[0], sx[1], oh, ow], data, &[x]);
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let mut gx = vec![0.0; bc * h * w];
                for p in 0..bc {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        let sy = oy / factor;
                        for ox in 0..ow {
                            dst[sy * w + ox / factor] += src[oy * ow + ox];
                        }
                    }
                }
                drop(g);
                x2.accumulate_grad(&gx);
            });
        }
        Ok(out)
    }

    /// Average pooling with a square window and matching stride; spatial
    /// extents must divide evenly.
    pub fn avgpool(&self, x: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "avgpool",
                detail: format!("want 4-d input, got {sx:?}"),
            });
        }
        if factor == 0 || sx[2] % factor != 0 || sx[3] % factor != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avgpool",
                detail: format!("factor {factor} must divide spatial extents {}x{}", sx[2], sx[3]),
            });
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as Real;
        let xd = x.data();
        let mut data = vec![0.0; bc * oh * ow];
        for p in 0..bc {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                let oy = y / factor;
                for x_ in 0..w {
                    dst[oy * ow + x_ / factor] += src[y * w + x_];
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        drop(xd);

        let out = self.out(vec![sx[0], sx[1], oh, ow], data, &[x]);
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let mut gx = vec![0.0; bc * h * w];
                for p in 0..bc {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        let oy = y / factor;
                        for x_ in 0..w {
                            dst[y * w + x_] = src[oy * ow + x_ / factor] * inv;
                        }
                    }
                }
                drop(g);
                x2.accumulate_grad(&gx);
            });
        }
        Ok(out)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", a.shape()),
            });
        }
        let out = self.out(shape.to_vec(), a.to_vec(), &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let ga: Vec<Real> = g.to_vec();
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Swap the first two axes of a tensor with rank at least 2.
    pub fn transpose01(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let sa = a.shape();
        if sa.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose01",
                detail: format!("want rank >= 2, got {sa:?}"),
            });
        }
        let (d0, d1) = (sa[0], sa[1]);
        let rest: usize = sa[2..].iter().product();
        let ad = a.data();
        let mut data = vec![0.0; ad.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = &ad[(i * d1 + j) * rest..(i * d1 + j + 1) * rest];
                let dst = &mut data[(j * d0 + i) * rest..(j * d0 + i + 1) * rest];
                dst.copy_from_slice(src);
            }
        }
        drop(ad);

        let mut out_shape = sa.to_vec();
        out_shape.swap(0, 1);
        let out = self.out(out_shape, data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let mut ga = vec![0.0; g.len()];
                for j in 0..d1 {
                    for i in 0..d0 {
                        let src = &g[(j * d0 + i) * rest..(j * d0 + i + 1) * rest];
                        let dst = &mut ga[(i * d1 + j) * rest..(i * d1 + j + 1) * rest];
                        dst.copy_from_slice(src);
                    }
                }
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Prepend an axis of length `t` by repeating the whole tensor `t` times.
    pub fn tile_leading(&self, a: &Tensor, t: usize) -> Result<Tensor, TensorError> {
        if t == 0 {
            return Err(TensorError::InvalidArgument {
                op: "tile_leading",
                detail: "repeat count must be at least 1".into(),
            });
        }
        let n = a.numel();
        let ad = a.data();
        let mut data = Vec::with_capacity(n * t);
        for _ in 0..t {
            data.extend_from_slice(&ad);
        }
        drop(ad);

        let mut shape = vec![t];
        shape.extend_from_slice(a.shape());
        let out = self.out(shape, data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let mut ga = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    for (acc, &v) in ga.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Repeat each leading-axis slice `t` times consecutively:
    /// [d0, rest...] becomes [d0*t, rest...] with slice i occupying rows
    /// i*t .. (i+1)*t.
    pub fn repeat_rows(&self, a: &Tensor, t: usize) -> Result<Tensor, TensorError> {
        let sa = a.shape();
        if sa.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                detail: "want rank >= 1".into(),
            });
        }
        if t == 0 {
            return Err(TensorError::InvalidArgument {
                op: "repeat_rows",
                detail: "repeat count must be at least 1".into(),
            });
        }
        let d0 = sa[0];
        let row: usize = sa[1..].iter().product();
        let ad = a.data();
        let mut data = Vec::with_capacity(ad.len() * t);
        for i in 0..d0 {
            let src = &ad[i * row..(i + 1) * row];
            for _ in 0..t {
                data.extend_from_slice(src);
            }
        }
        drop(ad);

        let mut shape = sa.to_vec();
        shape[0] = d0 * t;
        let out = self.out(shape, data, &[a]);
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let mut ga = vec![0.0; d0 * row];
                for i in 0..d0 {
                    let dst = &mut ga[i * row..(i + 1) * row];
                    for rep in 0..t {
                        let src = &g[(i * t + rep) * row..(i * t + rep + 1) * row];
                        for (acc, &v) in dst.iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                drop(g);
                a2.accumulate_grad(&ga);
            });
        }
        Ok(out)
    }

    /// Concatenate two [b x c x h x w] tensors along the channel axis.
    pub fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("want matching [b,*,h,w], got {sa:?} and {sb:?}"),
            });
        }
        let (bsz, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let ad = a.data();
        let bd = b.data();
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for i in 0..bsz {
            data.extend_from_slice(&ad[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bd[i * cb * plane..(i + 1) * cb * plane]);
        }
        drop(ad);
        drop(bd);

        let out = self.out(vec![bsz, ca + cb, sa[2], sa[3]], data, &[a, b]);
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                let Some(g) = o2.grad_data() else { return };
                let stride = (ca + cb) * plane;
                if a2.requires_grad() {
                    let mut ga = Vec::with_capacity(bsz * ca * plane);
                    for i in 0..bsz {
                        ga.extend_from_slice(&g[i * stride..i * stride + ca * plane]);
                    }
                    a2.accumulate_grad(&ga);
                }
                if b2.requires_grad() {
                    let mut gb = Vec::with_capacity(bsz * cb * plane);
                    for i in 0..bsz {
                        gb.extend_from_slice(&g[i * stride + ca * plane..(i + 1) * stride]);
                    }
                    b2.accumulate_grad(&gb);
                }
            });
        }
        Ok(out)
    }
}

fn axis_decomp(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor, TensorError};
    use crate::Real;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_broadcasts_suffix_and_scalar() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

        let s = Tensor::scalar(100.0);
        let d = tape.add(&c, &s).unwrap();
        assert_eq!(d.to_vec()[0], 111.0);
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        assert!(matches!(tape.add(&a, &b), Err(TensorError::ShapeMismatch { .. })));
        // Same element count but non-suffix layout must not silently alias.
        let c = t(&[3, 2], &[0.0; 6]);
        assert!(matches!(tape.add(&a, &c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn broadcast_backward_reduces_over_leading_axes() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[5.0, 7.0]);
        let c = tape.mul(&a, &b).unwrap();
        let loss = tape.sum(&c).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0, 5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0 + 3.0, 2.0 + 4.0]);
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[1.0, 0.0]);
        assert!(matches!(tape.div(&a, &b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let tape = Tape::new();
        let a = t(&[2], &[1.0, 0.0]);
        assert!(matches!(tape.log(&a), Err(TensorError::Domain { .. })));
        let b = t(&[1], &[-1.0]);
        assert!(matches!(tape.sqrt(&b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn gradient_accumulates_when_tensor_used_twice() {
        let tape = Tape::new();
        let x = t(&[1], &[3.0]);
        let y = tape.mul(&x, &x).unwrap(); // x^2, dy/dx = 2x = 6
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = t(&[1], &[2.0]);
        let y = tape.square(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let x = t(&[2], &[1.0, 2.0]);
        let y = tape.square(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
        let loss = tape.sum(&y).unwrap();
        assert!(matches!(tape.backward(&loss), Err(TensorError::InactiveTape)));
    }

    #[test]
    fn constants_are_not_tracked() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.square(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_is_zero_for_uniform_upstream() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 5.0, 5.0]);
        let p = tape.softmax(&x, 1).unwrap();
        let d = p.to_vec();
        let r0: Real = d[..3].iter().sum();
        let r1: Real = d[3..].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12 && (r1 - 1.0).abs() < 1e-12);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);

        // sum(softmax) is constant, so gradients must vanish.
        let loss = tape.sum(&p).unwrap();
        tape.backward(&loss).unwrap();
        assert!(x.grad().unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn conv2d_hand_checked_values() {
        let tape = Tape::new();
        // 1x1x3x3 input, single 2x2 kernel of ones, stride 1, no padding.
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = tape.conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![12.0, 16.0, 24.0, 28.0]);

        // Stride 2, pad 1 keeps corners.
        let y2 = tape.conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y2.shape(), &[1, 1, 2, 2]);
        assert_eq!(y2.to_vec(), vec![1.0, 5.0, 11.0, 28.0]);
    }

    #[test]
    fn conv2d_1x1_equals_general_path() {
        let tape = Tape::new();
        let x = t(&[2, 3, 4, 4], &(0..96).map(|i| (i as Real).sin()).collect::<Vec<_>>());
        let w = t(&[5, 3, 1, 1], &(0..15).map(|i| (i as Real).cos()).collect::<Vec<_>>());
        let fast = tape.conv2d(&x, &w, 1, 0).unwrap();
        // Force the general path with an equivalent padded 3x3 kernel that is
        // zero except at the center.
        let mut w3 = vec![0.0; 5 * 3 * 9];
        for f in 0..5 {
            for c in 0..3 {
                w3[(f * 3 + c) * 9 + 4] = w.to_vec()[f * 3 + c];
            }
        }
        let w3 = t(&[5, 3, 3, 3], &w3);
        let slow = tape.conv2d(&x, &w3, 1, 1).unwrap();
        for (a, b) in fast.to_vec().iter().zip(slow.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_then_avgpool_is_identity() {
        let tape = Tape::new();
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let up = tape.upsample_nearest(&x, 3).unwrap();
        assert_eq!(up.shape(), &[1, 2, 6, 6]);
        let down = tape.avgpool(&up, 3).unwrap();
        assert_eq!(down.to_vec(), x.to_vec());
    }

    #[test]
    fn transpose_tile_repeat_shapes() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tr = tape.transpose01(&a).unwrap();
        assert_eq!(tr.shape(), &[3, 2]);
        assert_eq!(tr.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        let tiled = tape.tile_leading(&a, 2).unwrap();
        assert_eq!(tiled.shape(), &[2, 2, 3]);
        assert_eq!(&tiled.to_vec()[6..], &a.to_vec()[..]);

        let rep = tape.repeat_rows(&a, 2).unwrap();
        assert_eq!(rep.shape(), &[4, 3]);
        assert_eq!(&rep.to_vec()[3..6], &[1.0, 2.0, 3.0]);
        assert_eq!(&rep.to_vec()[6..9], &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_channels_roundtrip_gradients() {
        let tape = Tape::new();
        let a = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        let w = t(&[12], &(1..=12).map(|i| i as Real).collect::<Vec<_>>());
        let flat = tape.reshape(&c, &[12]).unwrap();
        let prod = tape.mul(&flat, &w).unwrap();
        let loss = tape.sum(&prod).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), (5..=12).map(|i| i as Real).collect::<Vec<_>>());
    }

    #[test]
    fn sum_axis_and_mean_axis_remove_the_axis() {
        let tape = Tape::new();
        let a = t(&[2, 3, 2], &(0..12).map(|i| i as Real).collect::<Vec<_>>());
        let s = tape.sum_axis(&a, 1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.to_vec(), vec![0.0 + 2.0 + 4.0, 1.0 + 3.0 + 5.0, 6.0 + 8.0 + 10.0, 7.0 + 9.0 + 11.0]);
        let m = tape.mean_axis(&a, 2).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert!((m.to_vec()[0] - 0.5).abs() < 1e-12);
    }
}
