//! Elementwise monotone maps driven by conditioner outputs.
//!
//! Each transformer has a differentiable batch form used in training and a
//! plain scalar form used for inversion. All of them are the identity when
//! every parameter is zero.

use candle_core::{Tensor, D};

use crate::error::{CiderError, Result};
use crate::ops::{device, log_sigmoid, log_sigmoid_f64, log_sum_exp_f64, softplus, softplus_f64, softplus_inv_one, DTYPE};

/// Bound on the affine log-scale, applied as `c·tanh(p/c)`.
pub const MAX_LOG_SCALE: f64 = 3.0;
pub const MIN_BIN: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transformer {
    /// `y = x·exp(s) + t`.
    Affine,
    /// Deep sigmoidal map `y = logit(Σ_k w_k σ(a_k x + b_k))`.
    Sigmoidal { components: usize },
    /// Rational-quadratic spline on `[-bound, bound]`, identity outside.
    Spline { bins: usize, bound: f64 },
}

fn narrow(p: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    Ok(p.narrow(D::Minus1, start, len)?)
}

fn softmax_f64(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_f64(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Knots, heights and derivatives of one spline from its raw parameters.
struct SplineKnots {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

fn spline_knots(p: &[f64], bins: usize, bound: f64) -> SplineKnots {
    let widths = softmax_f64(&p[..bins]);
    let heights = softmax_f64(&p[bins..2 * bins]);
    let knots = |fr: &[f64]| {
        let mut out = Vec::with_capacity(bins + 1);
        out.push(-bound);
        let mut acc = 0.0;
        for f in fr {
            acc += (MIN_BIN + (1.0 - bins as f64 * MIN_BIN) * f) * 2.0 * bound;
            out.push(acc - bound);
        }
        out
    };
    let mut ds = vec![1.0];
    ds.extend(
        p[2 * bins..3 * bins - 1]
            .iter()
            .map(|r| MIN_DERIVATIVE + (1.0 - MIN_DERIVATIVE) * softplus_f64(r + softplus_inv_one())),
    );
    ds.push(1.0);
    SplineKnots {
        xs: knots(&widths),
        ys: knots(&heights),
        ds,
    }
}

fn bin_of(knots: &[f64], v: f64) -> usize {
    let interior = &knots[1..knots.len() - 1];
    interior.iter().filter(|&&k| v >= k).count()
}

impl Transformer {
    pub fn params_per_dim(&self) -> usize {
        match *self {
            Transformer::Affine => 2,
            Transformer::Sigmoidal { components } => 3 * components,
            Transformer::Spline { bins, .. } => 3 * bins - 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Transformer::Affine => Ok(()),
            Transformer::Sigmoidal { components } if components >= 1 => Ok(()),
            Transformer::Spline { bins, bound } if bins >= 2 && bound > 0.0 => Ok(()),
            other => Err(CiderError::Config(format!("invalid transformer {other:?}"))),
        }
    }

    /// Batch map: `x` is `n × m`, `p` is `n × m × P`. Returns the output and
    /// the elementwise log-derivative, both `n × m`.
    pub fn forward(&self, x: &Tensor, p: &Tensor) -> Result<(Tensor, Tensor)> {
        match *self {
            Transformer::Affine => {
                let s = ((narrow(p, 0, 1)?.squeeze(D::Minus1)? / MAX_LOG_SCALE)?.tanh()? * MAX_LOG_SCALE)?;
                let t = narrow(p, 1, 1)?.squeeze(D::Minus1)?;
                let y = ((x * s.exp()?)? + t)?;
                Ok((y, s))
            }
            Transformer::Sigmoidal { components: k } => {
                let a = softplus(&(narrow(p, 0, k)? + softplus_inv_one())?)?;
                let b = narrow(p, k, k)?;
                let log_w = candle_nn::ops::log_softmax(&narrow(p, 2 * k, k)?, D::Minus1)?;
                let u = (a.broadcast_mul(&x.unsqueeze(D::Minus1)?)? + b)?;
                let ls = log_sigmoid(&u)?;
                let lns = log_sigmoid(&u.neg()?)?;
                let log_s = (&log_w + &ls)?.log_sum_exp(D::Minus1)?;
                let log_1ms = (&log_w + &lns)?.log_sum_exp(D::Minus1)?;
                let y = (&log_s - &log_1ms)?;
                let log_num = (((log_w + a.log()?)? + ls)? + lns)?.log_sum_exp(D::Minus1)?;
                let ld = ((log_num - log_s)? - log_1ms)?;
                Ok((y, ld))
            }
            Transformer::Spline { bins: k, bound } => spline_forward(x, p, k, bound),
        }
    }

    pub fn forward_scalar(&self, x: f64, p: &[f64]) -> (f64, f64) {
        match *self {
            Transformer::Affine => {
                let s = MAX_LOG_SCALE * (p[0] / MAX_LOG_SCALE).tanh();
                (x * s.exp() + p[1], s)
            }
            Transformer::Sigmoidal { components: k } => {
                let log_w: Vec<f64> = {
                    let lse = log_sum_exp_f64(&p[2 * k..3 * k]);
                    p[2 * k..3 * k].iter().map(|v| v - lse).collect()
                };
                let mut s_terms = Vec::with_capacity(k);
                let mut c_terms = Vec::with_capacity(k);
                let mut n_terms = Vec::with_capacity(k);
                for c in 0..k {
                    let a = softplus_f64(p[c] + softplus_inv_one());
                    let u = a * x + p[k + c];
                    let (ls, lns) = (log_sigmoid_f64(u), log_sigmoid_f64(-u));
                    s_terms.push(log_w[c] + ls);
                    c_terms.push(log_w[c] + lns);
                    n_terms.push(log_w[c] + a.ln() + ls + lns);
                }
                let log_s = log_sum_exp_f64(&s_terms);
                let log_1ms = log_sum_exp_f64(&c_terms);
                (log_s - log_1ms, log_sum_exp_f64(&n_terms) - log_s - log_1ms)
            }
            Transformer::Spline { bins, bound } => {
                if !(-bound..=bound).contains(&x) {
                    return (x, 0.0);
                }
                let kn = spline_knots(p, bins, bound);
                let b = bin_of(&kn.xs, x);
                let (w, h) = (kn.xs[b + 1] - kn.xs[b], kn.ys[b + 1] - kn.ys[b]);
                let s = h / w;
                let xi = (x - kn.xs[b]) / w;
                let (d0, d1) = (kn.ds[b], kn.ds[b + 1]);
                let mix = xi * (1.0 - xi);
                let den = s + (d0 + d1 - 2.0 * s) * mix;
                let y = kn.ys[b] + h * (s * xi * xi + d0 * mix) / den;
                let deriv = s * s * (d1 * xi * xi + 2.0 * s * mix + d0 * (1.0 - xi) * (1.0 - xi)) / (den * den);
                (y, deriv.ln())
            }
        }
    }

    /// Solves `forward_scalar(x, p).0 = y` for `x`.
    pub fn inverse_scalar(&self, y: f64, p: &[f64]) -> Result<f64> {
        match *self {
            Transformer::Affine => {
                let s = MAX_LOG_SCALE * (p[0] / MAX_LOG_SCALE).tanh();
                Ok((y - p[1]) * (-s).exp())
            }
            Transformer::Sigmoidal { .. } => self.bisect(y, p),
            Transformer::Spline { bins, bound } => {
                if !(-bound..=bound).contains(&y) {
                    return Ok(y);
                }
                let kn = spline_knots(p, bins, bound);
                let b = bin_of(&kn.ys, y);
                let (w, h) = (kn.xs[b + 1] - kn.xs[b], kn.ys[b + 1] - kn.ys[b]);
                let s = h / w;
                let (d0, d1) = (kn.ds[b], kn.ds[b + 1]);
                let dy = y - kn.ys[b];
                let bend = d0 + d1 - 2.0 * s;
                let qa = h * (s - d0) + dy * bend;
                let qb = h * d0 - dy * bend;
                let qc = -s * dy;
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
                let xi = (2.0 * qc) / (-qb - disc.sqrt());
                Ok(xi.clamp(0.0, 1.0) * w + kn.xs[b])
            }
        }
    }

    fn bisect(&self, y: f64, p: &[f64]) -> Result<f64> {
        let f = |x: f64| self.forward_scalar(x, p).0;
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        let mut grow = 0;
        while f(lo) > y || f(hi) < y {
            lo *= 2.0;
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(CiderError::numeric("sigmoidal flow", format!("cannot bracket {y}")));
            }
        }
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi.abs().max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn spline_forward(x: &Tensor, p: &Tensor, k: usize, bound: f64) -> Result<(Tensor, Tensor)> {
    let (n, m) = x.dims2()?;
    let frac = |raw: &Tensor| -> Result<Tensor> {
        let sm = candle_nn::ops::softmax(raw, D::Minus1)?;
        Ok(((sm * (1.0 - k as f64 * MIN_BIN))? + MIN_BIN)?.affine(2.0 * bound, 0.0)?)
    };
    let widths = frac(&narrow(p, 0, k)?)?;
    let heights = frac(&narrow(p, k, k)?)?;
    let start = Tensor::full(-bound, (n, m, 1), &device())?;
    let xk = Tensor::cat(&[&start, &(widths.cumsum(D::Minus1)? - bound)?], D::Minus1)?;
    let yk = Tensor::cat(&[&start, &(heights.cumsum(D::Minus1)? - bound)?], D::Minus1)?;
    let inner = ((softplus(&(narrow(p, 2 * k, k - 1)? + softplus_inv_one())?)? * (1.0 - MIN_DERIVATIVE))?
        + MIN_DERIVATIVE)?;
    let ones = Tensor::ones((n, m, 1), DTYPE, &device())?;
    let ds = Tensor::cat(&[&ones, &inner, &ones], D::Minus1)?;

    let inside = x.ge(-bound)?.to_dtype(DTYPE)?.mul(&x.le(bound)?.to_dtype(DTYPE)?)?;
    let xc = x.clamp(-bound, bound)?;
    let xcu = xc.unsqueeze(D::Minus1)?;
    let interior = xk.narrow(D::Minus1, 1, k - 1)?.detach();
    let idx = interior.broadcast_le(&xcu.detach())?.to_dtype(DTYPE)?.sum(D::Minus1)?;
    let slots = Tensor::arange(0u32, k as u32, &device())?.to_dtype(DTYPE)?;
    let mask = idx.unsqueeze(D::Minus1)?.broadcast_eq(&slots)?.to_dtype(DTYPE)?;
    let pick = |t: &Tensor| -> Result<Tensor> { Ok((t * &mask)?.sum(D::Minus1)?) };

    let x0 = pick(&xk.narrow(D::Minus1, 0, k)?)?;
    let y0 = pick(&yk.narrow(D::Minus1, 0, k)?)?;
    let w = pick(&widths)?;
    let h = pick(&heights)?;
    let d0 = pick(&ds.narrow(D::Minus1, 0, k)?)?;
    let d1 = pick(&ds.narrow(D::Minus1, 1, k)?)?;
    let s = (&h / &w)?;
    let xi = ((&xc - &x0)? / &w)?;
    let one_m = xi.affine(-1.0, 1.0)?;
    let mix = (&xi * &one_m)?;
    let bend = ((&d0 + &d1)? - (&s * 2.0)?)?;
    let den = (&s + (&bend * &mix)?)?;
    let num = ((&s * xi.sqr()?)? + (&d0 * &mix)?)?;
    let y_in = (&y0 + ((&h * num)? / &den)?)?;
    let dnum = (((&d1 * xi.sqr()?)? + ((&s * 2.0)? * &mix)?)? + (&d0 * one_m.sqr()?)?)?;
    let deriv = ((s.sqr()? * dnum)? / den.sqr()?)?;
    let outside = inside.affine(-1.0, 1.0)?;
    let y = ((&inside * y_in)? + (&outside * x)?)?;
    let ld = (&inside * deriv.log()?)?;
    Ok((y, ld))
}
