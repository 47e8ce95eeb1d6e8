//! Layered variational bipartite graph encoder.
//!
//! Each layer propagates the previous layer's means over the normalised
//! interaction graph (user → item → user for the user side, and the mirror
//! image for items) and emits a diagonal Gaussian per node:
//!
//! ```text
//! H    = Ā · (Āᵀ · input)
//! μ    = ELU(H · W_μ)
//! σ²   = softplus(H · W_σ) + 1e-6
//! ```
//!
//! Layers `1..=k` form the shallow block, `k+1..=K` the deep block.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, NormalizedAdjacency};
use crate::error::{CiderError, Result};
use crate::ops::{elu, ensure_finite, normal_tensor, softplus};
use crate::params::ParamStore;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const EMBEDDING_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Total layers `K`.
    pub layers: usize,
    /// Shallow depth `k`.
    pub shallow: usize,
    /// Per-layer width `d`.
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            shallow: 2,
            dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(CiderError::Config(format!("encoder needs at least 2 layers, got {}", self.layers)));
        }
        if self.shallow < 1 || self.shallow >= self.layers {
            return Err(CiderError::Config(format!(
                "shallow depth must satisfy 1 <= k < K, got k={} K={}",
                self.shallow, self.layers
            )));
        }
        if self.dim == 0 {
            return Err(CiderError::Config("embedding width must be positive".into()));
        }
        Ok(())
    }

    pub fn shallow_width(&self) -> usize {
        self.shallow * self.dim
    }

    pub fn deep_width(&self) -> usize {
        (self.layers - self.shallow) * self.dim
    }

    pub fn full_width(&self) -> usize {
        self.layers * self.dim
    }
}

/// Base embedding tables with i.i.d. `N(0, 0.1²)` entries.
pub fn init_embeddings(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = normal_tensor(&mut rng, num_users, dim, EMBEDDING_INIT_STD)?;
    let items = normal_tensor(&mut rng, num_items, dim, EMBEDDING_INIT_STD)?;
    Ok((users, items))
}

#[derive(Debug, Clone)]
pub struct VbgeLayer {
    pub w_mu: Var,
    pub w_sigma: Var,
}

/// One Gaussian graph layer. `adjacency` is oriented towards the side
/// being encoded: pass the user × item matrix for users and its
/// [`NormalizedAdjacency::transposed`] view for items.
pub fn vbge_layer(
    adjacency: &NormalizedAdjacency,
    input: &Tensor,
    layer: &VbgeLayer,
    name: &str,
) -> Result<(Tensor, Tensor)> {
    let (rows, width) = input.dims2()?;
    if rows != adjacency.rows() || width != layer.w_mu.dims()[0] {
        return Err(CiderError::contract(format!(
            "{name}: input {rows}x{width} does not fit adjacency {}x{} / weights {:?}",
            adjacency.rows(),
            adjacency.cols(),
            layer.w_mu.dims()
        )));
    }
    let hop = adjacency.to_items(input)?;
    let agg = adjacency.to_users(&hop)?;
    let mean = elu(&agg.matmul(layer.w_mu.as_tensor())?)?;
    let var = (softplus(&agg.matmul(layer.w_sigma.as_tensor())?)? + VARIANCE_FLOOR)?;
    ensure_finite(&mean, name)?;
    ensure_finite(&var, name)?;
    Ok((mean, var))
}

/// Per-layer Gaussian node representations.
#[derive(Debug, Clone)]
pub struct LayeredRepresentation {
    pub means: Vec<Tensor>,
    pub vars: Vec<Tensor>,
    pub shallow: usize,
}

pub type LayeredUserRepresentation = LayeredRepresentation;
pub type LayeredItemRepresentation = LayeredRepresentation;

fn cat(parts: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

impl LayeredRepresentation {
    pub fn layers(&self) -> usize {
        self.means.len()
    }

    pub fn shallow_mean(&self) -> Result<Tensor> {
        cat(&self.means[..self.shallow])
    }

    pub fn shallow_var(&self) -> Result<Tensor> {
        cat(&self.vars[..self.shallow])
    }

    pub fn deep_mean(&self) -> Result<Tensor> {
        cat(&self.means[self.shallow..])
    }

    pub fn deep_var(&self) -> Result<Tensor> {
        cat(&self.vars[self.shallow..])
    }

    pub fn full_mean(&self) -> Result<Tensor> {
        cat(&self.means)
    }

    pub fn full_var(&self) -> Result<Tensor> {
        cat(&self.vars)
    }

    /// Rows `index` of every layer.
    pub fn select(&self, index: &Tensor) -> Result<LayeredRepresentation> {
        Ok(LayeredRepresentation {
            means: self
                .means
                .iter()
                .map(|m| m.index_select(index, 0))
                .collect::<candle_core::Result<_>>()?,
            vars: self
                .vars
                .iter()
                .map(|v| v.index_select(index, 0))
                .collect::<candle_core::Result<_>>()?,
            shallow: self.shallow,
        })
    }
}

/// Embedding tables and layer weights of one domain.
#[derive(Debug, Clone)]
pub struct DomainEncoder {
    pub user_embedding: Var,
    pub item_embedding: Var,
    pub user_layers: Vec<VbgeLayer>,
    pub item_layers: Vec<VbgeLayer>,
    pub config: EncoderConfig,
}

impl DomainEncoder {
    /// Registers parameters under `domain/{x|y}/...`.
    pub fn new(
        store: &mut ParamStore,
        domain: Domain,
        num_users: usize,
        num_items: usize,
        config: EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let prefix = format!("domain/{}", domain.key());
        let (users, items) = init_embeddings(num_users, num_items, config.dim, seed)?;
        let user_embedding = store.register(format!("{prefix}/user/embedding"), users)?;
        let item_embedding = store.register(format!("{prefix}/item/embedding"), items)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let std = 1.0 / (config.dim as f64).sqrt();
        let mut make = |side: &str, l: usize| -> Result<VbgeLayer> {
            let w_mu = normal_tensor(&mut rng, config.dim, config.dim, std)?;
            let w_sigma = normal_tensor(&mut rng, config.dim, config.dim, std)?;
            Ok(VbgeLayer {
                w_mu: store.register(format!("{prefix}/{side}/layer{l}/mu"), w_mu)?,
                w_sigma: store.register(format!("{prefix}/{side}/layer{l}/sigma"), w_sigma)?,
            })
        };
        let user_layers = (1..=config.layers)
            .map(|l| make("user", l))
            .collect::<Result<Vec<_>>>()?;
        let item_layers = (1..=config.layers)
            .map(|l| make("item", l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            user_embedding,
            item_embedding,
            user_layers,
            item_layers,
            config,
        })
    }
}

fn encode_side(
    adjacency: &NormalizedAdjacency,
    base: &Tensor,
    layers: &[VbgeLayer],
    shallow: usize,
    label: &str,
) -> Result<LayeredRepresentation> {
    let mut means = Vec::with_capacity(layers.len());
    let mut vars = Vec::with_capacity(layers.len());
    let mut input = base.clone();
    for (l, layer) in layers.iter().enumerate() {
        let (mean, var) = vbge_layer(adjacency, &input, layer, &format!("{label} layer {}", l + 1))?;
        input = mean.clone();
        means.push(mean);
        vars.push(var);
    }
    Ok(LayeredRepresentation { means, vars, shallow })
}

/// Runs all `K` layers on both sides of one domain's graph.
pub fn encode_domain(
    adjacency: &NormalizedAdjacency,
    encoder: &DomainEncoder,
) -> Result<(LayeredUserRepresentation, LayeredItemRepresentation)> {
    let k = encoder.config.shallow;
    let users = encode_side(
        adjacency,
        encoder.user_embedding.as_tensor(),
        &encoder.user_layers,
        k,
        "user",
    )?;
    let items = encode_side(
        &adjacency.transposed(),
        encoder.item_embedding.as_tensor(),
        &encoder.item_layers,
        k,
        "item",
    )?;
    Ok((users, items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{device, softplus_f64};

    fn layer_from(mu: &[f64], sigma: &[f64], d: usize) -> VbgeLayer {
        let t = |v: &[f64]| Var::from_tensor(&Tensor::from_vec(v.to_vec(), (d, d), &device()).unwrap()).unwrap();
        VbgeLayer {
            w_mu: t(mu),
            w_sigma: t(sigma),
        }
    }

    #[test]
    fn zero_graph_gives_activation_of_zero() {
        let adj = NormalizedAdjacency::empty(3, 2);
        let input = Tensor::ones((3, 2), crate::ops::DTYPE, &device()).unwrap();
        let layer = layer_from(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let (mu, var) = vbge_layer(&adj, &input, &layer, "t").unwrap();
        assert!(mu.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&m| m == 0.0));
        let expect = std::f64::consts::LN_2 + 1e-6;
        for v in var.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_edge_layer_is_hand_computable() {
        // Ā = [1]; H = input; μ = ELU(input·w), σ² = softplus(input·w') + 1e-6
        let adj = NormalizedAdjacency::from_interactions(1, 1, &[(0, 0)]);
        let input = Tensor::new(&[[0.5f64, -1.0]], &device()).unwrap();
        let layer = layer_from(&[2.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let (mu, var) = vbge_layer(&adj, &input, &layer, "t").unwrap();
        let mu = mu.to_vec2::<f64>().unwrap();
        let var = var.to_vec2::<f64>().unwrap();
        assert!((mu[0][0] - 1.0).abs() < 1e-15);
        assert!((mu[0][1] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((var[0][0] - (softplus_f64(0.5) + 1e-6)).abs() < 1e-15);
        assert!((var[0][1] - (softplus_f64(-1.0) + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn config_bounds() {
        assert!(EncoderConfig { layers: 3, shallow: 3, dim: 4 }.validate().is_err());
        assert!(EncoderConfig { layers: 1, shallow: 0, dim: 4 }.validate().is_err());
        assert!(EncoderConfig { layers: 2, shallow: 1, dim: 0 }.validate().is_err());
        assert!(EncoderConfig { layers: 2, shallow: 1, dim: 1 }.validate().is_ok());
    }

    #[test]
    fn default_blocks_are_sliced_by_layer() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { layers: 3, shallow: 2, dim: 4 };
        let enc = DomainEncoder::new(&mut store, Domain::X, 3, 2, cfg, 7).unwrap();
        let adj = NormalizedAdjacency::from_interactions(3, 2, &[(0, 0), (1, 1), (2, 0)]);
        let (users, items) = encode_domain(&adj, &enc).unwrap();
        assert_eq!(users.shallow_mean().unwrap().dims(), &[3, 8]);
        assert_eq!(users.deep_mean().unwrap().dims(), &[3, 4]);
        assert_eq!(items.full_mean().unwrap().dims(), &[2, 12]);
        let joined = Tensor::cat(&[users.shallow_mean().unwrap(), users.deep_mean().unwrap()], 1).unwrap();
        assert_eq!(
            joined.to_vec2::<f64>().unwrap(),
            users.full_mean().unwrap().to_vec2::<f64>().unwrap()
        );
        assert_eq!(store.len(), 2 + 4 * 3);
        assert!(store.get("domain/x/item/layer3/sigma").is_some());
    }
}
