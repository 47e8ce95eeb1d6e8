//! Continuous-time layer: `dz/dt = tanh(zW + b + t·u)·A` integrated over
//! `[0, 1]` with fixed-step RK4, tracking `d log|det| / dt = tr(∂f/∂z)`.
//!
//! The trace is exact for this field:
//! `tr = Σ_h (1 - tanh²_h)·Σ_i W_ih A_hi`.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CiderError, Result};
use crate::ops::{device, normal_tensor, DTYPE};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct OdeLayer {
    pub w: Var,
    pub b: Var,
    pub u: Var,
    pub a: Var,
    pub steps: usize,
}

impl OdeLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        hidden: usize,
        steps: usize,
        out_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || hidden == 0 || steps == 0 {
            return Err(CiderError::Config(format!(
                "ODE layer needs positive sizes, got width {width}, hidden {hidden}, steps {steps}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = normal_tensor(&mut rng, width, hidden, 1.0 / (width as f64).sqrt())?;
        let a = if out_std > 0.0 {
            normal_tensor(&mut rng, hidden, width, out_std)?
        } else {
            Tensor::zeros((hidden, width), DTYPE, &device())?
        };
        let b = if out_std > 0.0 {
            normal_tensor(&mut rng, 1, hidden, out_std)?.reshape(hidden)?
        } else {
            Tensor::zeros(hidden, DTYPE, &device())?
        };
        Ok(Self {
            w: store.register(format!("{prefix}/w"), w)?,
            b: store.register(format!("{prefix}/b"), b)?,
            u: store.register(format!("{prefix}/u"), Tensor::zeros(hidden, DTYPE, &device())?)?,
            a: store.register(format!("{prefix}/a"), a)?,
            steps,
        })
    }

    /// Field value and trace of its Jacobian at time `t`.
    fn field(&self, z: &Tensor, t: f64, coupling: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = z
            .matmul(self.w.as_tensor())?
            .broadcast_add(&(self.b.as_tensor() + (self.u.as_tensor() * t)?)?)?;
        let act = pre.tanh()?;
        let dz = act.matmul(self.a.as_tensor())?;
        let slope = act.sqr()?.affine(-1.0, 1.0)?;
        let trace = slope.broadcast_mul(coupling)?.sum(1)?;
        Ok((dz, trace))
    }

    fn coupling(&self) -> Result<Tensor> {
        Ok((self.w.as_tensor() * self.a.as_tensor().t()?)?.sum(0)?.unsqueeze(0)?)
    }

    /// One RK4 increment of state and log-det starting at `(z, t)`.
    fn increment(&self, z: &Tensor, t: f64, coupling: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = 1.0 / self.steps as f64;
        let (k1, l1) = self.field(z, t, coupling)?;
        let (k2, l2) = self.field(&(z + (&k1 * (h / 2.0))?)?, t + h / 2.0, coupling)?;
        let (k3, l3) = self.field(&(z + (&k2 * (h / 2.0))?)?, t + h / 2.0, coupling)?;
        let (k4, l4) = self.field(&(z + (&k3 * h)?)?, t + h, coupling)?;
        let dz = ((((k1 + (k2 * 2.0)?)? + (k3 * 2.0)?)? + k4)? * (h / 6.0))?;
        let dl = ((((l1 + (l2 * 2.0)?)? + (l3 * 2.0)?)? + l4)? * (h / 6.0))?;
        Ok((dz, dl))
    }

    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let coupling = self.coupling()?;
        let h = 1.0 / self.steps as f64;
        let mut state = z.clone();
        let mut ld = Tensor::zeros(z.dims2()?.0, DTYPE, &device())?;
        for s in 0..self.steps {
            let (dz, dl) = self.increment(&state, s as f64 * h, &coupling)?;
            state = (state + dz)?;
            ld = (ld + dl)?;
        }
        Ok((state, ld))
    }

    /// Inverts each RK4 step exactly by fixed-point iteration, so the
    /// result reproduces `y` under [`OdeLayer::forward`] to rounding.
    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let coupling = self.coupling()?.detach();
        let h = 1.0 / self.steps as f64;
        let mut state = y.detach();
        for s in (0..self.steps).rev() {
            let t = s as f64 * h;
            let mut guess = state.clone();
            let mut converged = false;
            for _ in 0..200 {
                let (dz, _) = self.increment(&guess, t, &coupling)?;
                let next = (&state - dz)?;
                let change = (&next - &guess)?.abs()?.max_keepdim(1)?.max(0)?.squeeze(0)?.to_scalar::<f64>()?;
                guess = next;
                if change < 1e-14 {
                    converged = true;
                    break;
                }
                if !change.is_finite() {
                    break;
                }
            }
            if !converged {
                return Err(CiderError::numeric("ODE flow", "inverse step did not converge"));
            }
            state = guess;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_weights_are_identity() {
        let mut store = ParamStore::new();
        let layer = OdeLayer::new(&mut store, "o", 3, 5, 8, 0.0, 1).unwrap();
        let z = Tensor::new(&[[0.2f64, -1.0, 3.0]], &device()).unwrap();
        let (y, ld) = layer.forward(&z).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), z.to_vec2::<f64>().unwrap());
        assert_eq!(ld.to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn inverse_reproduces_input() {
        let mut store = ParamStore::new();
        let layer = OdeLayer::new(&mut store, "o", 2, 6, 16, 0.5, 3).unwrap();
        let z = Tensor::new(&[[0.2f64, -1.0], [1.5, 0.3]], &device()).unwrap();
        let (y, _) = layer.forward(&z).unwrap();
        let back = layer.inverse(&y).unwrap();
        let diff = (back - &z).unwrap().abs().unwrap().max_keepdim(1).unwrap().max(0).unwrap();
        assert!(diff.squeeze(0).unwrap().to_scalar::<f64>().unwrap() < 1e-12);
    }
}
