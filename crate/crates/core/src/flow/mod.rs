//! Bijective maps between the two domains' variant latents.
//!
//! A [`FlowTransform`] is a stack of layers, each returning its output and
//! the per-sample `log|det J|`. Autoregressive layers alternate their
//! variable order; inversion runs in plain arithmetic, one variable at a
//! time.

pub mod made;
pub mod ode;
pub mod transformers;

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{CiderError, Result};
use crate::ops::{device, ensure_finite, DTYPE};
use crate::params::ParamStore;

pub use made::Made;
pub use ode::OdeLayer;
pub use transformers::Transformer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Maf,
    Naf,
    Node,
    Ncsf,
}

impl FlowKind {
    pub const ALL: [FlowKind; 4] = [FlowKind::Maf, FlowKind::Naf, FlowKind::Node, FlowKind::Ncsf];
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FlowKind::Maf => "maf",
            FlowKind::Naf => "naf",
            FlowKind::Node => "node",
            FlowKind::Ncsf => "ncsf",
        };
        f.write_str(s)
    }
}

impl FromStr for FlowKind {
    type Err = CiderError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maf" => Ok(FlowKind::Maf),
            "naf" => Ok(FlowKind::Naf),
            "node" => Ok(FlowKind::Node),
            "ncsf" => Ok(FlowKind::Ncsf),
            other => Err(CiderError::Config(format!("unknown flow kind {other:?}"))),
        }
    }
}

/// Density used for the flow likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowBase {
    /// Gaussian of bandwidth `s` centred on the paired user's latent.
    #[default]
    Pairing,
    /// Standard normal evaluated at the mapped latent.
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub layers: usize,
    pub hidden: usize,
    pub bandwidth: f64,
    pub base: FlowBase,
    pub bins: usize,
    pub bound: f64,
    pub components: usize,
    pub ode_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            kind: FlowKind::Ncsf,
            layers: 3,
            hidden: 32,
            bandwidth: 0.1,
            base: FlowBase::Pairing,
            bins: 8,
            bound: 3.0,
            components: 4,
            ode_steps: 32,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ode_steps == 0 {
            return Err(CiderError::Config(
                "flow layers, hidden width and ODE steps must be positive".into(),
            ));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(CiderError::Config(format!("flow bandwidth must be positive, got {}", self.bandwidth)));
        }
        self.transformer().map_or(Ok(()), |t| t.validate())
    }

    fn transformer(&self) -> Option<Transformer> {
        match self.kind {
            FlowKind::Maf => Some(Transformer::Affine),
            FlowKind::Naf => Some(Transformer::Sigmoidal {
                components: self.components,
            }),
            FlowKind::Ncsf => Some(Transformer::Spline {
                bins: self.bins,
                bound: self.bound,
            }),
            FlowKind::Node => None,
        }
    }
}

/// Elementwise `y = x·exp(s) + t` with learnable `s`, `t`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub log_scale: Var,
    pub shift: Var,
}

impl AffineLayer {
    pub fn fixed(log_scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        let n = log_scale.len();
        Ok(Self {
            log_scale: Var::from_tensor(&Tensor::from_vec(log_scale, n, &device())?)?,
            shift: Var::from_tensor(&Tensor::from_vec(shift, n, &device())?)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AutoregressiveLayer {
    pub conditioner: Made,
    pub transformer: Transformer,
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Affine(AffineLayer),
    Autoregressive(AutoregressiveLayer),
    Ode(OdeLayer),
}

impl FlowLayer {
    fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            FlowLayer::Affine(a) => {
                let y = z
                    .broadcast_mul(&a.log_scale.as_tensor().exp()?)?
                    .broadcast_add(a.shift.as_tensor())?;
                let ld = a
                    .log_scale
                    .as_tensor()
                    .sum_all()?
                    .broadcast_as(z.dims2()?.0)?
                    .contiguous()?;
                Ok((y, ld))
            }
            FlowLayer::Autoregressive(l) => {
                let params = l.conditioner.forward(z)?;
                let (y, ld) = l.transformer.forward(z, &params)?;
                Ok((y, ld.sum(D::Minus1)?))
            }
            FlowLayer::Ode(o) => o.forward(z),
        }
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            FlowLayer::Affine(a) => Ok(y
                .broadcast_sub(a.shift.as_tensor())?
                .broadcast_mul(&a.log_scale.as_tensor().neg()?.exp()?)?
                .detach()),
            FlowLayer::Autoregressive(l) => {
                let (n, m) = y.dims2()?;
                let target = y.to_vec2::<f64>()?;
                let mut x = vec![vec![0.0; m]; n];
                for &var in &l.conditioner.order {
                    let xt = Tensor::new(x.clone(), &device())?;
                    let params = l.conditioner.forward(&xt)?.to_vec3::<f64>()?;
                    for i in 0..n {
                        x[i][var] = l.transformer.inverse_scalar(target[i][var], &params[i][var])?;
                    }
                }
                Ok(Tensor::new(x, &device())?.reshape((n, m))?)
            }
            FlowLayer::Ode(o) => o.inverse(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowTransform {
    pub layers: Vec<FlowLayer>,
    pub width: usize,
}

impl FlowTransform {
    /// Identity-initialised flow registered under `flow/layer{l}/...`.
    pub fn new(store: &mut ParamStore, config: &FlowConfig, width: usize, seed: u64) -> Result<Self> {
        Self::with_init(store, config, width, seed, 0.0)
    }

    /// Like [`FlowTransform::new`] with output weights drawn at `out_std`,
    /// giving a non-trivial map before training.
    pub fn with_init(
        store: &mut ParamStore,
        config: &FlowConfig,
        width: usize,
        seed: u64,
        out_std: f64,
    ) -> Result<Self> {
        config.validate()?;
        if width == 0 {
            return Err(CiderError::Config("flow width must be positive".into()));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let prefix = format!("flow/layer{}", l + 1);
            let layer_seed = seed.wrapping_mul(31).wrapping_add(l as u64 + 1);
            let layer = match config.transformer() {
                Some(transformer) => FlowLayer::Autoregressive(AutoregressiveLayer {
                    conditioner: Made::new(
                        store,
                        &prefix,
                        width,
                        config.hidden,
                        transformer.params_per_dim(),
                        l % 2 == 1,
                        out_std,
                        layer_seed,
                    )?,
                    transformer,
                }),
                None => FlowLayer::Ode(OdeLayer::new(
                    store,
                    &prefix,
                    width,
                    config.hidden,
                    config.ode_steps,
                    out_std,
                    layer_seed,
                )?),
            };
            layers.push(layer);
        }
        Ok(Self { layers, width })
    }

    pub fn from_layers(layers: Vec<FlowLayer>, width: usize) -> Self {
        Self { layers, width }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        let (_, m) = z.dims2()?;
        if m != self.width {
            return Err(CiderError::contract(format!(
                "flow width {} applied to input of width {m}",
                self.width
            )));
        }
        ensure_finite(z, "flow input")
    }

    /// `F(z)` and the summed log-determinant per sample.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(z)?;
        let mut state = z.clone();
        let mut total = Tensor::zeros(z.dims2()?.0, DTYPE, &device())?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(&state)?;
            ensure_finite(&next, &format!("flow layer {}", l + 1))?;
            ensure_finite(&ld, &format!("flow layer {} log-det", l + 1))?;
            state = next;
            total = (total + ld)?;
        }
        Ok((state, total))
    }

    /// `F⁻¹(y)` and the log-determinant of the inverse map per sample.
    /// Not differentiable.
    pub fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(y)?;
        let mut state = y.detach();
        let mut total = Tensor::zeros(y.dims2()?.0, DTYPE, &device())?;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let prev = layer.inverse(&state)?;
            ensure_finite(&prev, &format!("flow layer {} inverse", l + 1))?;
            let (_, ld) = layer.forward(&prev)?;
            total = (total - ld.detach())?;
            state = prev;
        }
        Ok((state, total))
    }
}

pub fn flow_forward(flow: &FlowTransform, z: &Tensor) -> Result<(Tensor, Tensor)> {
    flow.forward(z)
}
