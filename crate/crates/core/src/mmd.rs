//! Maximum mean discrepancy with an RBF kernel.

use candle_core::Tensor;

use crate::error::{CiderError, Result};

fn sq_dists(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let aa = a.sqr()?.sum_keepdim(1)?;
    let bb = b.sqr()?.sum_keepdim(1)?.t()?;
    let ab = a.matmul(&b.t()?)?;
    Ok(aa.broadcast_add(&bb)?.broadcast_sub(&(ab * 2.0)?)?.relu()?)
}

/// Median of the pooled off-diagonal pairwise distances.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let pooled = Tensor::cat(&[x, y], 0)?.detach();
    let d = sq_dists(&pooled, &pooled)?.to_vec2::<f64>()?;
    let mut v: Vec<f64> = Vec::new();
    for (i, row) in d.iter().enumerate() {
        for &dist in &row[i + 1..] {
            v.push(dist.sqrt());
        }
    }
    v.retain(|d| *d > 0.0);
    if v.is_empty() {
        return Ok(1.0);
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

/// Biased estimate of `MMD²` between row samples `x` and `y`. Bandwidth
/// defaults to the median heuristic.
pub fn mmd_rbf(x: &Tensor, y: &Tensor, bandwidth: Option<f64>) -> Result<Tensor> {
    let (nx, wx) = x.dims2()?;
    let (ny, wy) = y.dims2()?;
    if nx == 0 || ny == 0 || wx != wy {
        return Err(CiderError::contract(format!(
            "MMD needs non-empty samples of equal width, got {nx}x{wx} and {ny}x{wy}"
        )));
    }
    let sigma = match bandwidth {
        Some(s) => s,
        None => median_bandwidth(x, y)?,
    };
    let scale = -1.0 / (2.0 * sigma * sigma);
    let k = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok((sq_dists(a, b)? * scale)?.exp()?.mean_all()?) };
    Ok(((k(x, x)? + k(y, y)?)? - (k(x, y)? * 2.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::device;

    #[test]
    fn identical_samples_have_zero_discrepancy() {
        let x = Tensor::new(&[[0.0f64, 1.0], [2.0, -1.0], [0.5, 0.5]], &device()).unwrap();
        let v = mmd_rbf(&x, &x, None).unwrap().to_scalar::<f64>().unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn single_points_by_hand() {
        let x = Tensor::new(&[[0.0f64]], &device()).unwrap();
        let y = Tensor::new(&[[1.0f64]], &device()).unwrap();
        let v = mmd_rbf(&x, &y, Some(1.0)).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn median_of_three_distances() {
        let x = Tensor::new(&[[0.0f64], [1.0]], &device()).unwrap();
        let y = Tensor::new(&[[3.0f64]], &device()).unwrap();
        // distances 1, 3, 2
        assert!((median_bandwidth(&x, &y).unwrap() - 2.0).abs() < 1e-12);
    }
}
