use rayon::prelude::*;

use super::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use super::{Real, Tensor, PAR_ROWS};
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

fn check_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok(())
}

/// `out[n, :] = x[n, :] W + b` for row-major `x` (n×c_in) and `w` (c_in×c_out).
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, c_in: usize, c_out: usize) -> Vec<T> {
    let n = if c_in == 0 { 0 } else { x.len() / c_in };
    let mut out = vec![T::zero(); n * c_out];
    let row = |(xi, oi): (&[T], &mut [T])| {
        if let Some(b) = b {
            oi.copy_from_slice(b);
        }
        for (c, &xv) in xi.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wr = &w[c * c_out..(c + 1) * c_out];
            for (o, &wv) in oi.iter_mut().zip(wr) {
                *o = *o + xv * wv;
            }
        }
    };
    if c_out == 0 {
        return out;
    }
    if n >= PAR_ROWS {
        x.par_chunks(c_in).zip(out.par_chunks_mut(c_out)).for_each(row);
    } else {
        x.chunks(c_in).zip(out.chunks_mut(c_out)).for_each(row);
    }
    out
}

/// VJP of [`linear_forward`]: returns `(dx, dW, db)`.
pub fn linear_backward<T: Real>(x: &[T], w: &[T], dy: &[T], c_in: usize, c_out: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = if c_out == 0 { 0 } else { dy.len() / c_out };
    let mut dx = vec![T::zero(); n * c_in];
    let dx_row = |(dyi, dxi): (&[T], &mut [T])| {
        for (c, d) in dxi.iter_mut().enumerate() {
            let wr = &w[c * c_out..(c + 1) * c_out];
            *d = wr.iter().zip(dyi).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
    };
    if c_in > 0 && c_out > 0 {
        if n >= PAR_ROWS {
            dy.par_chunks(c_out).zip(dx.par_chunks_mut(c_in)).for_each(dx_row);
        } else {
            dy.chunks(c_out).zip(dx.chunks_mut(c_in)).for_each(dx_row);
        }
    }

    let mut dw = vec![T::zero(); c_in * c_out];
    let dw_row = |(c, dwr): (usize, &mut [T])| {
        for r in 0..n {
            let xv = x[r * c_in + c];
            if xv == T::zero() {
                continue;
            }
            let dyr = &dy[r * c_out..(r + 1) * c_out];
            for (o, &g) in dwr.iter_mut().zip(dyr) {
                *o = *o + xv * g;
            }
        }
    };
    if c_out > 0 {
        if n * c_in >= PAR_ROWS * 8 {
            dw.par_chunks_mut(c_out).enumerate().for_each(dw_row);
        } else {
            dw.chunks_mut(c_out).enumerate().for_each(dw_row);
        }
    }

    let mut db = vec![T::zero(); c_out];
    for r in 0..n {
        for (o, &g) in db.iter_mut().zip(&dy[r * c_out..(r + 1) * c_out]) {
            *o = *o + g;
        }
    }
    (dx, dw, db)
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl<T: Real> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let x = ctx.value(self.x);
        let w = ctx.value(self.w);
        let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
        let (dx, dw, db) = linear_backward(x.data(), w.data(), dy, c_in, c_out);
        sink.accumulate(self.x, &dx);
        sink.accumulate(self.w, &dw);
        if let Some(b) = self.b {
            sink.accumulate(b, &db);
        }
        Ok(())
    }
}

/// `y = xW + b` with `x: N×C_in`, `w: C_in×C_out`, `b: C_out`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (xv, wv) = (g.value(x), g.value(w));
    check_matrix("linear", xv)?;
    check_matrix("linear", wv)?;
    if xv.shape()[1] != wv.shape()[0] {
        return Err(Error::Shape {
            op: "linear",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    let (c_in, c_out) = (wv.shape()[0], wv.shape()[1]);
    if let Some(b) = b {
        if g.value(b).numel() != c_out {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: wv.shape().to_vec(),
                rhs: g.value(b).shape().to_vec(),
            });
        }
    }
    let out = linear_forward(xv.data(), wv.data(), b.map(|b| g.value(b).data()), c_in, c_out);
    let t = Tensor::new(&[xv.shape()[0], c_out], out)?;
    Ok(g.record(t, LinearOp { x, w, b }))
}

/// Per-row normalisation. Returns `(y, x_hat, rstd)`.
pub fn layer_norm_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = if cols == 0 { 0 } else { x.len() / cols };
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let c = T::lit(cols as f64);
    for r in 0..n {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().copied().sum::<T>() / c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let rs = T::one() / (var + T::lit(eps)).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let h = (xr[j] - mean) * rs;
            xhat[r * cols + j] = h;
            y[r * cols + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

struct LayerNormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let gamma = ctx.value(self.gamma).data();
        let cols = gamma.len();
        let n = self.rstd.len();
        let c = T::lit(cols as f64);
        let mut dx = vec![T::zero(); n * cols];
        let mut dgamma = vec![T::zero(); cols];
        let mut dbeta = vec![T::zero(); cols];
        for r in 0..n {
            let dyr = &dy[r * cols..(r + 1) * cols];
            let xh = &self.xhat[r * cols..(r + 1) * cols];
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for j in 0..cols {
                let gj = dyr[j] * gamma[j];
                mean_g = mean_g + gj;
                mean_gx = mean_gx + gj * xh[j];
                dgamma[j] = dgamma[j] + dyr[j] * xh[j];
                dbeta[j] = dbeta[j] + dyr[j];
            }
            mean_g = mean_g / c;
            mean_gx = mean_gx / c;
            for j in 0..cols {
                let gj = dyr[j] * gamma[j];
                dx[r * cols + j] = self.rstd[r] * (gj - mean_g - xh[j] * mean_gx);
            }
        }
        sink.accumulate(self.x, &dx);
        sink.accumulate(self.gamma, &dgamma);
        sink.accumulate(self.beta, &dbeta);
        Ok(())
    }
}

/// Row-wise zero-mean / unit-variance normalisation, then `* gamma + beta`.
pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let xv = g.value(x);
    check_matrix("layer_norm", xv)?;
    let cols = xv.shape()[1];
    if cols == 0 {
        return Err(Error::invalid("layer_norm needs at least one channel"));
    }
    if g.value(gamma).numel() != cols || g.value(beta).numel() != cols {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: xv.shape().to_vec(),
            rhs: g.value(gamma).shape().to_vec(),
        });
    }
    let (y, xhat, rstd) = layer_norm_forward(xv.data(), g.value(gamma).data(), g.value(beta).data(), cols, eps);
    let t = Tensor::new(xv.shape(), y)?;
    Ok(g.record(t, LayerNormOp { x, gamma, beta, xhat, rstd }))
}

/// `x * Φ(x)` with the exact normal CDF.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative `Φ(x) + x φ(x)`.
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

struct GeluOp {
    x: Var,
}

impl<T: Real> Backward<T> for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let x = ctx.value(self.x).data();
        let dx: Vec<T> = x.iter().zip(dy).map(|(&v, &d)| d * gelu_grad(v)).collect();
        sink.accumulate(self.x, &dx);
        Ok(())
    }
}

pub fn gelu<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let xv = g.value(x);
    let y: Vec<T> = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
    let t = Tensor::new(xv.shape(), y)?;
    Ok(g.record(t, GeluOp { x }))
}

struct AddOp {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        sink.accumulate(self.a, dy);
        sink.accumulate(self.b, dy);
        Ok(())
    }
}

/// Elementwise sum of two same-shaped tensors.
pub fn add<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::Shape {
            op: "add",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        });
    }
    let y: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
    let t = Tensor::new(av.shape(), y)?;
    Ok(g.record(t, AddOp { a, b }))
}

struct CrossEntropyOp<T> {
    logits: Var,
    labels: Vec<Option<usize>>,
    probs: Vec<T>,
    count: usize,
}

impl<T: Real> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy_mean"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let k = ctx.value(self.logits).cols();
        let mut d = vec![T::zero(); self.probs.len()];
        if self.count > 0 {
            let scale = dy[0] / T::lit(self.count as f64);
            for (i, label) in self.labels.iter().enumerate() {
                let Some(label) = *label else { continue };
                for c in 0..k {
                    let onehot = if c == label { T::one() } else { T::zero() };
                    d[i * k + c] = (self.probs[i * k + c] - onehot) * scale;
                }
            }
        }
        sink.accumulate(self.logits, &d);
        Ok(())
    }
}

/// Mean negative log-likelihood of the true class over non-ignored rows.
///
/// If every row is ignored the loss is zero and so is its gradient.
pub fn cross_entropy_mean<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u32], ignore_index: u32) -> Result<Var> {
    let lv = g.value(logits);
    check_matrix("cross_entropy_mean", lv)?;
    let (n, k) = (lv.shape()[0], lv.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy_mean",
            lhs: lv.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut resolved = Vec::with_capacity(n);
    for &l in labels {
        if l == ignore_index {
            resolved.push(None);
        } else if (l as usize) < k {
            resolved.push(Some(l as usize));
        } else {
            return Err(Error::invalid(format!("label {l} outside [0, {k}) and not the ignore index")));
        }
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..n {
        let row = lv.row(i);
        let mut arg = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = c;
            }
        }
        let max = row[arg];
        // log-sum-exp as max + ln(1 + Σ_{c≠arg} e^{x_c - max}) keeps tiny losses accurate
        let mut rest = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * k + c] = e;
            if c != arg {
                rest = rest + e;
            }
        }
        let sum = T::one() + rest;
        for c in 0..k {
            probs[i * k + c] = probs[i * k + c] / sum;
        }
        if let Some(label) = resolved[i] {
            total = total + ((max - row[label]) + rest.ln_1p());
            count += 1;
        }
    }
    let loss = if count > 0 { total / T::lit(count as f64) } else { T::zero() };
    Ok(g.record(
        Tensor::scalar(loss),
        CrossEntropyOp {
            logits,
            labels: resolved,
            probs,
            count,
        },
    ))
}
