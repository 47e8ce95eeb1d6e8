//! Training objective: the information bound on reconstructed deep
//! features, loss bookkeeping, and which terms each variant uses.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::error::{CiderError, Result};
use crate::ops::log_sigmoid;

/// Probability clamp applied inside the bound.
pub const PROB_CLAMP: f64 = 1e-7;

fn logit_limit() -> f64 {
    ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln()
}

/// Mean over users of `log σ(⟨v⁺, d̂⟩) + mean_j log(1 - σ(⟨v⁻_j, d̂⟩))`.
///
/// `d_hat` is `n × m`, `positives` `n × m`, and `negatives` either `n × m`
/// or `n × j × m`.
pub fn vib_bound(d_hat: &Tensor, positives: &Tensor, negatives: &Tensor) -> Result<Tensor> {
    let (n, m) = d_hat.dims2()?;
    if n == 0 || positives.dims() != d_hat.dims() {
        return Err(CiderError::contract(format!(
            "bound needs one positive per user row: users {:?}, positives {:?}",
            d_hat.dims(),
            positives.dims()
        )));
    }
    let negatives = match negatives.rank() {
        2 => negatives.unsqueeze(1)?,
        _ => negatives.clone(),
    };
    let (nn, _, mn) = negatives.dims3()?;
    if nn != n || mn != m {
        return Err(CiderError::contract(format!(
            "negatives {:?} do not match users {:?}",
            negatives.dims(),
            d_hat.dims()
        )));
    }
    let lim = logit_limit();
    let pos = (d_hat * positives)?.sum(1)?.clamp(-lim, lim)?;
    let neg = negatives
        .broadcast_mul(&d_hat.unsqueeze(1)?)?
        .sum(2)?
        .clamp(-lim, lim)?;
    let pos_term = log_sigmoid(&pos)?;
    let neg_term = log_sigmoid(&neg.neg()?)?.mean(1)?;
    Ok((pos_term + neg_term)?.mean_all()?)
}

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    pub vib_x: f64,
    pub vib_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines components as `λ_s·L_s + λ_d·L_d - vib_x - vib_y`.
    pub fn new(l_s: f64, l_d: f64, vib_x: f64, vib_y: f64, lambda_s: f64, lambda_d: f64) -> Self {
        Self {
            l_s,
            l_d,
            vib_x,
            vib_y,
            total: combine(l_s, l_d, vib_x, vib_y, lambda_s, lambda_d),
        }
    }

    pub fn check(&self, lambda_s: f64, lambda_d: f64) -> Result<()> {
        let named = [
            ("L_s", self.l_s),
            ("L_d", self.l_d),
            ("vib_x", self.vib_x),
            ("vib_y", self.vib_y),
            ("total", self.total),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(CiderError::numeric(*name, "non-finite loss component"));
        }
        let expect = combine(self.l_s, self.l_d, self.vib_x, self.vib_y, lambda_s, lambda_d);
        if (expect - self.total).abs() > 1e-10 {
            return Err(CiderError::contract(format!(
                "loss total {} differs from its components ({expect})",
                self.total
            )));
        }
        Ok(())
    }
}

fn combine(l_s: f64, l_d: f64, vib_x: f64, vib_y: f64, lambda_s: f64, lambda_d: f64) -> f64 {
    l_s * lambda_s + l_d * lambda_d - vib_x - vib_y
}

/// Differentiable total in the same operation order as [`LossBreakdown::new`].
pub fn total_loss(
    l_s: &Tensor,
    l_d: &Tensor,
    vib_x: &Tensor,
    vib_y: &Tensor,
    lambda_s: f64,
    lambda_d: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let total = (((l_s * lambda_s)? + (l_d * lambda_d)?)? - vib_x)?;
    let total = (total - vib_y)?;
    let v = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        l_s: v(l_s)?,
        l_d: v(l_d)?,
        vib_x: v(vib_x)?,
        vib_y: v(vib_y)?,
        total: v(&total)?,
    };
    breakdown.check(lambda_s, lambda_d)?;
    Ok((total, breakdown))
}

/// Components switched on for a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActiveComponents {
    pub shallow_cpa: bool,
    pub deep_cpa: bool,
    pub mmd: bool,
    pub decomposition: bool,
    pub flow: bool,
    /// Decompose the whole representation instead of the deep block.
    pub whole_representation: bool,
}

pub fn select_variant(variant: Variant) -> ActiveComponents {
    let none = ActiveComponents {
        shallow_cpa: false,
        deep_cpa: false,
        mmd: false,
        decomposition: false,
        flow: false,
        whole_representation: false,
    };
    match variant {
        Variant::A => none,
        Variant::B => ActiveComponents { mmd: true, ..none },
        Variant::C => ActiveComponents {
            shallow_cpa: true,
            deep_cpa: true,
            ..none
        },
        Variant::D => ActiveComponents {
            shallow_cpa: true,
            decomposition: true,
            ..none
        },
        Variant::E => ActiveComponents {
            decomposition: true,
            flow: true,
            whole_representation: true,
            ..none
        },
        Variant::Full => ActiveComponents {
            shallow_cpa: true,
            decomposition: true,
            flow: true,
            ..none
        },
    }
}
