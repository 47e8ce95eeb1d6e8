//! Differentiable scalar helpers and seeded tensor initialisers.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CiderError, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    if x.dtype() == DTYPE && x.device().is_cpu() {
        return x.contiguous()?.apply_op1(Softplus);
    }
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    x.relu()? + tail
}

/// Single-pass softplus whose gradient is `σ(x)`.
#[derive(Debug, Clone, Copy)]
struct Softplus;

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let data = match storage {
            CpuStorage::F64(v) => v,
            _ => candle_core::bail!("softplus: only f64 tensors are supported"),
        };
        let out: Vec<f64> = match layout.contiguous_offsets() {
            Some((a, b)) => data[a..b].iter().map(|&v| softplus_f64(v)).collect(),
            None => candle_core::bail!("softplus: operand must be contiguous"),
        };
        Ok((CpuStorage::F64(out), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((grad_res * candle_nn::ops::sigmoid(arg)?)?))
    }
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// `log σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    softplus(&x.neg()?)?.neg()
}

pub fn elu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.elu(1.0)
}

/// `softplus⁻¹(1)`, the offset that makes a zero raw parameter map to 1.
pub fn softplus_inv_one() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sigmoid_f64(x: f64) -> f64 {
    -softplus_f64(-x)
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp_f64(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor> {
    Ok(Tensor::from_vec(normal_vec(rng, rows * cols, std), (rows, cols), &device())?)
}

pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Errors when `t` holds a NaN or infinity.
pub fn ensure_finite(t: &Tensor, component: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(CiderError::numeric(component, "non-finite values"))
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        let x = Tensor::new(&[-800.0f64, -1.0, 0.0, 1.0, 800.0], &device()).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[2] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(y[4], 800.0);
        for (a, b) in [-1.0f64, 1.0].iter().zip([y[1], y[3]]) {
            assert!((softplus_f64(*a) - b).abs() < 1e-15);
        }
    }

    #[test]
    fn log_sigmoid_matches_reference() {
        for x in [-30.0, -2.0, 0.0, 3.0, 40.0] {
            let t = Tensor::new(&[x], &device()).unwrap();
            let got = log_sigmoid(&t).unwrap().to_vec1::<f64>().unwrap()[0];
            assert!((got - sigmoid_f64(x).ln()).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softplus_offset_maps_zero_to_one() {
        assert!((softplus_f64(softplus_inv_one()) - 1.0).abs() < 1e-15);
    }
}
