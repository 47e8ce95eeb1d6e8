//! Masked autoregressive conditioner: one hidden `tanh` layer whose
//! weight masks make output parameters of variable `i` depend only on
//! variables earlier in the ordering.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CiderError, Result};
use crate::ops::{device, normal_tensor, DTYPE};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Made {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    mask1: Tensor,
    mask2: Tensor,
    /// Variables in conditioning order.
    pub order: Vec<usize>,
    pub width: usize,
    pub params_per_dim: usize,
}

impl Made {
    /// Registers `{prefix}/w1`, `b1`, `w2`, `b2`. The output layer starts at
    /// `out_std` (zero gives a conditioner that always emits zeros).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        hidden: usize,
        params_per_dim: usize,
        reverse: bool,
        out_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || hidden == 0 || params_per_dim == 0 {
            return Err(CiderError::Config(format!(
                "conditioner needs positive sizes, got width {width}, hidden {hidden}, params {params_per_dim}"
            )));
        }
        let order: Vec<usize> = if reverse {
            (0..width).rev().collect()
        } else {
            (0..width).collect()
        };
        let mut degree = vec![0usize; width];
        for (pos, &var) in order.iter().enumerate() {
            degree[var] = pos + 1;
        }
        let span = width.saturating_sub(1).max(1);
        let hidden_degree: Vec<usize> = (0..hidden).map(|j| j % span + 1).collect();

        let mut m1 = vec![0.0; width * hidden];
        for i in 0..width {
            for j in 0..hidden {
                if degree[i] <= hidden_degree[j] {
                    m1[i * hidden + j] = 1.0;
                }
            }
        }
        let out = width * params_per_dim;
        let mut m2 = vec![0.0; hidden * out];
        for j in 0..hidden {
            for i in 0..width {
                if hidden_degree[j] < degree[i] {
                    for p in 0..params_per_dim {
                        m2[j * out + i * params_per_dim + p] = 1.0;
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = normal_tensor(&mut rng, width, hidden, 1.0 / (width as f64).sqrt())?;
        let w2 = if out_std > 0.0 {
            normal_tensor(&mut rng, hidden, out, out_std)?
        } else {
            Tensor::zeros((hidden, out), DTYPE, &device())?
        };
        let b2 = if out_std > 0.0 {
            normal_tensor(&mut rng, 1, out, out_std)?.reshape(out)?
        } else {
            Tensor::zeros(out, DTYPE, &device())?
        };
        Ok(Self {
            w1: store.register(format!("{prefix}/w1"), w1)?,
            b1: store.register(format!("{prefix}/b1"), Tensor::zeros(hidden, DTYPE, &device())?)?,
            w2: store.register(format!("{prefix}/w2"), w2)?,
            b2: store.register(format!("{prefix}/b2"), b2)?,
            mask1: Tensor::from_vec(m1, (width, hidden), &device())?,
            mask2: Tensor::from_vec(m2, (hidden, out), &device())?,
            order,
            width,
            params_per_dim,
        })
    }

    /// Parameters for every variable, shape `n × width × params_per_dim`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dims2()?.0;
        let w1 = (self.w1.as_tensor() * &self.mask1)?;
        let w2 = (self.w2.as_tensor() * &self.mask2)?;
        let h = x.matmul(&w1)?.broadcast_add(self.b1.as_tensor())?.tanh()?;
        let out = h.matmul(&w2)?.broadcast_add(self.b2.as_tensor())?;
        Ok(out.reshape((n, self.width, self.params_per_dim))?)
    }
}
