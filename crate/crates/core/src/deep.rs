//! Stable/variant decomposition of the deep block and the flow linking
//! the two domains' variant latents.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Domain;
use crate::error::{CiderError, Result};
use crate::flow::{FlowBase, FlowTransform};
use crate::ops::{device, elu, ensure_finite, normal_tensor, sigmoid, DTYPE};
use crate::params::ParamStore;

/// Lower clamp for `Z_v` when it scales noise.
pub const MIN_VARIANT: f64 = 1e-6;

/// `W_s`, `W_v` of one domain.
#[derive(Debug, Clone)]
pub struct DecompositionHeads {
    pub w_s: Var,
    pub w_v: Var,
    /// Offset of the variant head, shape `1 × m`.
    pub b_v: Var,
}

impl DecompositionHeads {
    /// Registers `deep/{x|y}/w_s` (identity start) and `deep/{x|y}/w_v`.
    pub fn new(store: &mut ParamStore, domain: Domain, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(41);
        let w_s = Tensor::eye(width, DTYPE, &device())?;
        let w_v = normal_tensor(&mut rng, width, width, 1.0 / (width as f64).sqrt())?;
        Ok(Self {
            w_s: store.register(format!("deep/{}/w_s", domain.key()), w_s)?,
            w_v: store.register(format!("deep/{}/w_v", domain.key()), w_v)?,
            b_v: store.register(format!("deep/{}/b_v", domain.key()), Tensor::zeros((1, width), DTYPE, &device())?)?,
        })
    }

    pub fn from_tensors(w_s: &Tensor, w_v: &Tensor) -> Result<Self> {
        let width = w_v.dims2()?.1;
        Ok(Self {
            w_s: Var::from_tensor(w_s)?,
            w_v: Var::from_tensor(w_v)?,
            b_v: Var::from_tensor(&Tensor::zeros((1, width), DTYPE, &device())?)?,
        })
    }

    pub fn width(&self) -> usize {
        self.w_s.dims()[0]
    }

    /// `(ELU(D W_s), sigmoid(D W_v + b_v))` for one domain's rows.
    pub fn split(&self, deep: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, m) = deep.dims2()?;
        if m != self.width() {
            return Err(CiderError::contract(format!(
                "deep block of width {m} for heads of width {}",
                self.width()
            )));
        }
        let z_s = elu(&deep.matmul(self.w_s.as_tensor())?)?;
        let z_v = sigmoid(&deep.matmul(self.w_v.as_tensor())?.broadcast_add(self.b_v.as_tensor())?)?;
        ensure_finite(&z_s, "stable latent")?;
        ensure_finite(&z_v, "variant latent")?;
        Ok((z_s, z_v))
    }
}

#[derive(Debug, Clone)]
pub struct LatentDecomposition {
    pub z_s: Tensor,
    pub z_v_x: Tensor,
    pub z_v_y: Tensor,
}

/// Decomposes the deep blocks of paired users; the shared `Z_s` is the
/// mean of the two stable heads.
pub fn decompose(
    d_x: &Tensor,
    d_y: &Tensor,
    heads_x: &DecompositionHeads,
    heads_y: &DecompositionHeads,
) -> Result<LatentDecomposition> {
    if d_x.dims() != d_y.dims() {
        return Err(CiderError::contract(format!(
            "paired deep blocks differ in shape: {:?} vs {:?}",
            d_x.dims(),
            d_y.dims()
        )));
    }
    let (s_x, z_v_x) = heads_x.split(d_x)?;
    let (s_y, z_v_y) = heads_y.split(d_y)?;
    Ok(LatentDecomposition {
        z_s: ((s_x + s_y)? * 0.5)?,
        z_v_x,
        z_v_y,
    })
}

/// Flow likelihood loss `L_d`, averaged over pairs.
pub fn flow_nll(flow: &FlowTransform, z_x: &Tensor, z_y: &Tensor, bandwidth: f64, base: FlowBase) -> Result<Tensor> {
    let (n, m) = z_x.dims2()?;
    if n == 0 {
        return Err(CiderError::contract("flow likelihood needs at least one pair".to_string()));
    }
    if z_y.dims() != z_x.dims() {
        return Err(CiderError::contract(format!(
            "paired variant latents differ in shape: {:?} vs {:?}",
            z_x.dims(),
            z_y.dims()
        )));
    }
    let (mapped, log_det) = flow.forward(z_x)?;
    let (resid, s) = match base {
        FlowBase::Pairing => ((mapped - z_y)?, bandwidth),
        FlowBase::StandardNormal => (mapped, 1.0),
    };
    let norm = m as f64 * (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_density = ((resid.sqr()?.sum(1)? * (-0.5 / (s * s)))? - norm)?;
    let nll = (log_density + log_det)?.neg()?.mean_all()?;
    ensure_finite(&nll, "flow likelihood")?;
    Ok(nll)
}

/// `D̂ = Z_s + Z_v ⊙ ε`. Without a generator `ε = 0`.
pub fn reparameterize(z_s: &Tensor, z_v: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    if z_s.dims() != z_v.dims() {
        return Err(CiderError::contract(format!(
            "reparameterize shapes differ: {:?} vs {:?}",
            z_s.dims(),
            z_v.dims()
        )));
    }
    match rng {
        None => Ok(z_s.clone()),
        Some(rng) => {
            let (n, m) = z_s.dims2()?;
            let eps = normal_tensor(rng, n, m, 1.0)?;
            Ok((z_s + (z_v.clamp(MIN_VARIANT, 1.0)? * eps)?)?)
        }
    }
}

/// Deep block in the target domain for users seen only in the other one.
#[derive(Debug, Clone)]
pub struct CrossDomainInference {
    pub d_hat: Tensor,
    /// Variant latent carried into the target domain.
    pub z_v: Tensor,
}

/// Maps the source variant latent through `F` (into Y) or `F⁻¹` (into X)
/// and reconstructs around the source stable latent.
pub fn cross_domain_infer(
    flow: &FlowTransform,
    z_s: &Tensor,
    z_v_source: &Tensor,
    target: Domain,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<CrossDomainInference> {
    let z_v = match target {
        Domain::Y => flow.forward(z_v_source)?.0,
        Domain::X => flow.inverse(z_v_source)?.0,
    };
    let d_hat = reparameterize(z_s, &z_v, rng)?;
    Ok(CrossDomainInference { d_hat, z_v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AffineLayer, FlowConfig, FlowLayer};

    fn t(rows: Vec<Vec<f64>>) -> Tensor {
        Tensor::new(rows, &device()).unwrap()
    }

    fn identity_flow(m: usize) -> FlowTransform {
        let mut store = ParamStore::new();
        FlowTransform::new(&mut store, &FlowConfig::default(), m, 0).unwrap()
    }

    #[test]
    fn zero_input_gives_half_variance() {
        let heads = DecompositionHeads::from_tensors(
            &Tensor::eye(3, DTYPE, &device()).unwrap(),
            &Tensor::ones((3, 3), DTYPE, &device()).unwrap(),
        )
        .unwrap();
        let (s, v) = heads.split(&Tensor::zeros((2, 3), DTYPE, &device()).unwrap()).unwrap();
        assert!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
        assert!(v.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identity_heads_on_unit_input() {
        let eye = Tensor::eye(1, DTYPE, &device()).unwrap();
        let heads = DecompositionHeads::from_tensors(&eye, &eye).unwrap();
        let (s, v) = heads.split(&t(vec![vec![1.0]])).unwrap();
        assert_eq!(s.to_vec2::<f64>().unwrap()[0][0], 1.0);
        assert!((v.to_vec2::<f64>().unwrap()[0][0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn paired_stable_latent_is_the_head_average() {
        let eye = Tensor::eye(2, DTYPE, &device()).unwrap();
        let hx = DecompositionHeads::from_tensors(&eye, &eye).unwrap();
        let hy = DecompositionHeads::from_tensors(&(&eye * 3.0).unwrap(), &eye).unwrap();
        let d = t(vec![vec![1.0, 2.0]]);
        let dec = decompose(&d, &d, &hx, &hy).unwrap();
        assert_eq!(dec.z_s.to_vec2::<f64>().unwrap(), vec![vec![2.0, 4.0]]);
    }

    #[test]
    fn zero_residual_hits_the_floor() {
        let m = 3;
        let z = t(vec![vec![0.2, 0.5, 0.9], vec![0.1, 0.4, 0.6]]);
        let got = flow_nll(&identity_flow(m), &z, &z, 0.1, FlowBase::Pairing)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let floor = m as f64 * (0.1 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((got - floor).abs() < 1e-12);
    }

    #[test]
    fn moving_the_target_away_increases_the_loss() {
        let z = t(vec![vec![0.3, 0.3]]);
        let flow = identity_flow(2);
        let mut last = f64::NEG_INFINITY;
        for shift in [0.0, 0.01, 0.05, 0.2, 1.0] {
            let zy = t(vec![vec![0.3 + shift, 0.3]]);
            let v = flow_nll(&flow, &z, &zy, 0.1, FlowBase::Pairing).unwrap().to_scalar::<f64>().unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn doubling_flow_subtracts_its_log_det() {
        let m = 2;
        let flow = FlowTransform::from_layers(
            vec![FlowLayer::Affine(AffineLayer::fixed(vec![2f64.ln(); m], vec![0.0; m]).unwrap())],
            m,
        );
        let zx = t(vec![vec![0.1, 0.2]]);
        let zy = t(vec![vec![0.2, 0.4]]);
        let got = flow_nll(&flow, &zx, &zy, 0.1, FlowBase::Pairing).unwrap().to_scalar::<f64>().unwrap();
        let floor = m as f64 * (0.1 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((got - (floor - m as f64 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn evaluation_mode_returns_stable_latent() {
        let zs = t(vec![vec![0.4, -0.1]]);
        let zv = t(vec![vec![0.9, 0.9]]);
        assert_eq!(
            reparameterize(&zs, &zv, None).unwrap().to_vec2::<f64>().unwrap(),
            zs.to_vec2::<f64>().unwrap()
        );
        let tiny = t(vec![vec![0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = reparameterize(&zs, &tiny, Some(&mut rng)).unwrap().to_vec2::<f64>().unwrap();
        assert!((d[0][0] - 0.4).abs() < 1e-4 && (d[0][1] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn noise_variance_matches_variant_squared() {
        let n = 100_000;
        let zs = Tensor::zeros((n, 2), DTYPE, &device()).unwrap();
        let zv = Tensor::new(&[[0.3f64, 0.8]], &device()).unwrap().broadcast_as((n, 2)).unwrap().contiguous().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = reparameterize(&zs, &zv, Some(&mut rng)).unwrap();
        let var = d.sqr().unwrap().mean(0).unwrap().to_vec1::<f64>().unwrap();
        let mean = d.mean(0).unwrap().to_vec1::<f64>().unwrap();
        for (j, want) in [0.09, 0.64].iter().enumerate() {
            let v = var[j] - mean[j] * mean[j];
            assert!((v - want).abs() < 0.03 * want, "dim {j}: {v} vs {want}");
        }
    }

    #[test]
    fn identity_flow_carries_the_source_reconstruction() {
        let zs = t(vec![vec![0.4, -0.1]]);
        let zv = t(vec![vec![0.2, 0.7]]);
        let flow = identity_flow(2);
        for target in [Domain::X, Domain::Y] {
            let out = cross_domain_infer(&flow, &zs, &zv, target, None).unwrap();
            assert_eq!(out.d_hat.to_vec2::<f64>().unwrap(), zs.to_vec2::<f64>().unwrap());
            let diff = (out.z_v - &zv).unwrap().abs().unwrap().sum_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn empty_pair_batch_is_a_contract_error() {
        let z = Tensor::zeros((0, 2), DTYPE, &device()).unwrap();
        assert!(flow_nll(&identity_flow(2), &z, &z, 0.1, FlowBase::Pairing).is_err());
    }
}
