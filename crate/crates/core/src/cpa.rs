//! Centroid-based probabilistic alignment of the shallow subspace.
//!
//! Every domain keeps `T` diagonal-Gaussian interest centroids. Users are
//! softly assigned to centroids by KL distance at temperature `α`, the
//! expected distance summed over users is the within-domain matching score
//! `L_m`, and index-paired centroids of the two domains are pulled together
//! by `L_sa = Σ_t KL(C_tˣ ‖ C_tʸ)`.

use candle_core::{Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::encoder::VARIANCE_FLOOR;
use crate::error::{CiderError, Result};
use crate::ops::device;

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians given as
/// `(mean, variance)` slices.
pub fn kl_diag_gaussian(q: (&[f64], &[f64]), p: (&[f64], &[f64])) -> Result<f64> {
    let w = q.0.len();
    if q.1.len() != w || p.0.len() != w || p.1.len() != w {
        return Err(CiderError::contract(format!(
            "KL width mismatch: q=({}, {}), p=({}, {})",
            q.0.len(),
            q.1.len(),
            p.0.len(),
            p.1.len()
        )));
    }
    let mut acc = 0.0;
    for j in 0..w {
        let (mq, vq, mp, vp) = (q.0[j], q.1[j], p.0[j], p.1[j]);
        let diff = mq - mp;
        acc += (vp / vq).ln() + (vq + diff * diff) / vp - 1.0;
    }
    Ok((0.5 * acc).max(0.0))
}

/// `KL(q_i ‖ p_t)` for every row `i` of `q` and row `t` of `p`, shape `n × T`.
pub fn pairwise_kl(q_mean: &Tensor, q_var: &Tensor, p_mean: &Tensor, p_var: &Tensor) -> Result<Tensor> {
    let (_, w) = q_mean.dims2()?;
    let (_, wp) = p_mean.dims2()?;
    if w != wp || q_var.dims() != q_mean.dims() || p_var.dims() != p_mean.dims() {
        return Err(CiderError::contract(format!(
            "KL width mismatch: users {:?}, centroids {:?}",
            q_mean.dims(),
            p_mean.dims()
        )));
    }
    let qm = q_mean.unsqueeze(1)?;
    let qv = q_var.unsqueeze(1)?;
    let pm = p_mean.unsqueeze(0)?;
    let pv = p_var.unsqueeze(0)?;
    let log_ratio = pv.log()?.broadcast_sub(&qv.log()?)?;
    let diff2 = qm.broadcast_sub(&pm)?.sqr()?;
    let quad = qv.broadcast_add(&diff2)?.broadcast_div(&pv)?;
    let terms = ((log_ratio + quad)? - 1.0)?;
    Ok((terms.sum(D::Minus1)? * 0.5)?)
}

/// Row-wise `KL(q_t ‖ p_t)` for equally shaped `T × w` blocks.
pub fn paired_kl(q_mean: &Tensor, q_var: &Tensor, p_mean: &Tensor, p_var: &Tensor) -> Result<Tensor> {
    if q_mean.dims() != p_mean.dims() || q_var.dims() != p_var.dims() || q_mean.dims() != q_var.dims() {
        return Err(CiderError::contract(format!(
            "paired KL shape mismatch: {:?} vs {:?}",
            q_mean.dims(),
            p_mean.dims()
        )));
    }
    let log_ratio = (p_var.log()? - q_var.log()?)?;
    let quad = ((q_var + (q_mean - p_mean)?.sqr()?)? / p_var)?;
    let terms = ((log_ratio + quad)? - 1.0)?;
    Ok((terms.sum(D::Minus1)? * 0.5)?)
}

/// Responsibilities `π⁽ⁱ⁾(t) ∝ π(t)·exp(-α·KL_it)`, normalised in log space.
pub fn soft_assign(kl: &Tensor, priors: &[f64], alpha: f64) -> Result<Tensor> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(CiderError::contract(format!("temperature must be positive, got {alpha}")));
    }
    let (_, t) = kl.dims2()?;
    if priors.len() != t || t == 0 {
        return Err(CiderError::contract(format!(
            "{} priors for {t} centroids",
            priors.len()
        )));
    }
    let log_prior: Vec<f64> = priors.iter().map(|p| p.max(PRIOR_FLOOR).ln()).collect();
    let log_prior = Tensor::from_vec(log_prior, (1, t), &device())?;
    let logits = log_prior.broadcast_sub(&(kl * alpha)?)?;
    Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?.exp()?)
}

/// Scalar version of [`soft_assign`] for one user.
pub fn soft_assign_row(kls: &[f64], priors: &[f64], alpha: f64) -> Vec<f64> {
    let logits: Vec<f64> = kls
        .iter()
        .zip(priors)
        .map(|(k, p)| p.max(PRIOR_FLOOR).ln() - alpha * k)
        .collect();
    let lse = crate::ops::log_sum_exp_f64(&logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

const PRIOR_FLOOR: f64 = 1e-12;

/// Diagonal-Gaussian interest centroids of one domain, parameterised by
/// mean and log-variance.
#[derive(Debug, Clone)]
pub struct GaussianCentroids {
    pub means: Var,
    pub log_vars: Var,
    pub priors: Vec<f64>,
}

impl GaussianCentroids {
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let t = means.len();
        if t == 0 || variances.len() != t {
            return Err(CiderError::contract("centroid set must be non-empty".to_string()));
        }
        let w = means[0].len();
        let flat_mean: Vec<f64> = means.into_iter().flatten().collect();
        let flat_lv: Vec<f64> = variances
            .into_iter()
            .flatten()
            .map(|v| v.max(VARIANCE_FLOOR).ln())
            .collect();
        if flat_mean.len() != t * w || flat_lv.len() != t * w {
            return Err(CiderError::contract("ragged centroid rows".to_string()));
        }
        Ok(Self {
            means: Var::from_tensor(&Tensor::from_vec(flat_mean, (t, w), &device())?)?,
            log_vars: Var::from_tensor(&Tensor::from_vec(flat_lv, (t, w), &device())?)?,
            priors: vec![1.0 / t as f64; t],
        })
    }

    pub fn count(&self) -> usize {
        self.means.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.means.dims()[1]
    }

    pub fn variances(&self) -> Result<Tensor> {
        Ok(self.log_vars.as_tensor().exp()?)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.means.clone(), self.log_vars.clone()]
    }

    pub fn mean_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.means.as_tensor().to_vec2::<f64>()?)
    }

    pub fn variance_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.variances()?.to_vec2::<f64>()?)
    }

    pub fn records(&self, domain: Domain) -> Result<Vec<CentroidRecord>> {
        let means = self.mean_rows()?;
        let vars = self.variance_rows()?;
        Ok(means
            .into_iter()
            .zip(vars)
            .zip(&self.priors)
            .enumerate()
            .map(|(t, ((mean, variance), &prior))| CentroidRecord {
                domain,
                t,
                mean,
                variance,
                prior,
            })
            .collect())
    }

    /// Rebuilds a centroid set from dump records, in `t` order.
    pub fn from_records(records: &[CentroidRecord]) -> Result<Self> {
        let mut rows: Vec<&CentroidRecord> = records.iter().collect();
        rows.sort_by_key(|r| r.t);
        let mut set = Self::new(
            rows.iter().map(|r| r.mean.clone()).collect(),
            rows.iter().map(|r| r.variance.clone()).collect(),
        )?;
        set.priors = rows.iter().map(|r| r.prior).collect();
        Ok(set)
    }
}

/// One line of the centroid dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidRecord {
    pub domain: Domain,
    pub t: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub prior: f64,
}

/// Within-domain matching score `L_m = Σ_i Σ_t π⁽ⁱ⁾(t)·KL(q_i ‖ C_t)` and
/// the responsibilities used for it.
pub fn matching_score(
    user_mean: &Tensor,
    user_var: &Tensor,
    centroid_mean: &Tensor,
    centroid_var: &Tensor,
    priors: &[f64],
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    if user_mean.dims2()?.0 == 0 {
        return Err(CiderError::contract("matching score needs at least one user".to_string()));
    }
    let kl = pairwise_kl(user_mean, user_var, centroid_mean, centroid_var)?;
    let resp = soft_assign(&kl, priors, alpha)?;
    let score = (&resp * &kl)?.sum_all()?;
    Ok((score, resp))
}

/// Gradient step on `(mean, log-variance)` followed by the variance floor,
/// then priors set to the normalised responsibility mass. Non-finite
/// gradients skip the step and return `false`.
pub fn update_centroids(
    centroids: &mut GaussianCentroids,
    grad_mean: &Tensor,
    grad_log_var: &Tensor,
    responsibilities: Option<&Tensor>,
    lr: f64,
) -> Result<bool> {
    if lr <= 0.0 {
        return Err(CiderError::contract(format!("centroid learning rate must be positive, got {lr}")));
    }
    let finite = |t: &Tensor| -> Result<bool> { Ok(t.abs()?.sum_all()?.to_scalar::<f64>()?.is_finite()) };
    if !finite(grad_mean)? || !finite(grad_log_var)? {
        log::warn!("skipping centroid update: non-finite gradient");
        return Ok(false);
    }
    let new_mean = (centroids.means.as_tensor() - (grad_mean * lr)?)?;
    let new_lv = (centroids.log_vars.as_tensor() - (grad_log_var * lr)?)?.clamp(VARIANCE_FLOOR.ln(), f64::MAX)?;
    centroids.means.set(&new_mean)?;
    centroids.log_vars.set(&new_lv)?;
    if let Some(resp) = responsibilities {
        let mass = resp.sum(0)?.to_vec1::<f64>()?;
        let total: f64 = mass.iter().sum();
        if total > 0.0 && total.is_finite() {
            centroids.priors = mass.iter().map(|m| m / total).collect();
        }
    }
    Ok(true)
}

/// `L_sa = Σ_t KL(C_tˣ ‖ C_tʸ)` with centroids paired by index.
pub fn centroid_alignment_loss(x: &GaussianCentroids, y: &GaussianCentroids) -> Result<Tensor> {
    if x.count() != y.count() {
        return Err(CiderError::contract(format!(
            "centroid counts differ: {} vs {}",
            x.count(),
            y.count()
        )));
    }
    let kl = paired_kl(
        x.means.as_tensor(),
        &x.variances()?,
        y.means.as_tensor(),
        &y.variances()?,
    )?;
    Ok(kl.sum_all()?)
}

/// Shannon entropy of a responsibility row.
pub fn assignment_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Points for centroid seeding: per-user posterior means and variances.
#[derive(Debug, Clone)]
pub struct PosteriorRows {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl PosteriorRows {
    pub fn from_tensors(mean: &Tensor, var: &Tensor) -> Result<Self> {
        Ok(Self {
            means: mean.to_vec2::<f64>()?,
            vars: var.to_vec2::<f64>()?,
        })
    }

    fn len(&self) -> usize {
        self.means.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd refinement. Returns a cluster label
/// per point.
pub fn kmeans_pp(points: &[Vec<f64>], clusters: usize, iterations: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let n = points.len();
    if n == 0 || clusters == 0 {
        return vec![0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(31);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < clusters {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in best.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut arg = 0;
                let mut low = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(p, center);
                    if d < low {
                        low = d;
                        arg = c;
                    }
                }
                arg
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..iterations {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Moment-matched Gaussian per cluster: the member means' average, and
/// the average member variance plus the spread of member means (the
/// variance of the members' mixture), floored.
pub fn cluster_gaussians(rows: &PosteriorRows, labels: &[usize], clusters: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let w = rows.means.first().map_or(0, Vec::len);
    let global: Vec<usize> = (0..rows.len()).collect();
    let mut means = Vec::with_capacity(clusters);
    let mut vars = Vec::with_capacity(clusters);
    for c in 0..clusters {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            members = global.clone();
        }
        let n = members.len() as f64;
        let mut mean = vec![0.0; w];
        for &i in &members {
            for (m, x) in mean.iter_mut().zip(&rows.means[i]) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; w];
        for &i in &members {
            for j in 0..w {
                let d = rows.means[i][j] - mean[j];
                var[j] += (rows.vars[i][j] + d * d) / n;
            }
        }
        var.iter_mut().for_each(|v| *v = v.max(VARIANCE_FLOOR));
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// Seeds both domains' centroids from one clustering of the paired users'
/// joint shallow means, so centroid `t` describes the same people in
/// both domains. Without paired users each domain is clustered alone.
pub fn init_paired_centroids(
    x: &PosteriorRows,
    y: &PosteriorRows,
    pairs: &[(usize, usize)],
    clusters: usize,
    iterations: usize,
    seed: u64,
) -> Result<(GaussianCentroids, GaussianCentroids)> {
    if clusters == 0 {
        return Err(CiderError::Config("need at least one centroid".into()));
    }
    if pairs.is_empty() {
        let lx = kmeans_pp(&x.means, clusters, iterations, seed);
        let ly = kmeans_pp(&y.means, clusters, iterations, seed.wrapping_add(1));
        let (mx, vx) = cluster_gaussians(x, &lx, clusters);
        let (my, vy) = cluster_gaussians(y, &ly, clusters);
        return Ok((GaussianCentroids::new(mx, vx)?, GaussianCentroids::new(my, vy)?));
    }
    let joint: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(i, j)| {
            let mut row = x.means[i].clone();
            row.extend_from_slice(&y.means[j]);
            row
        })
        .collect();
    let labels = kmeans_pp(&joint, clusters, iterations, seed);
    let sub = |rows: &PosteriorRows, pick: fn(&(usize, usize)) -> usize| PosteriorRows {
        means: pairs.iter().map(|p| rows.means[pick(p)].clone()).collect(),
        vars: pairs.iter().map(|p| rows.vars[pick(p)].clone()).collect(),
    };
    let (mx, vx) = cluster_gaussians(&sub(x, |p| p.0), &labels, clusters);
    let (my, vy) = cluster_gaussians(&sub(y, |p| p.1), &labels, clusters);
    Ok((GaussianCentroids::new(mx, vx)?, GaussianCentroids::new(my, vy)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let w = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), w), &device()).unwrap()
    }

    #[test]
    fn identical_gaussians_have_zero_kl() {
        assert_eq!(kl_diag_gaussian((&[0.0, 0.0], &[1.0, 1.0]), (&[0.0, 0.0], &[1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let shift = kl_diag_gaussian((&[0.0], &[1.0]), (&[1.0], &[1.0])).unwrap();
        assert!((shift - 0.5).abs() < 1e-15);
        let wide = kl_diag_gaussian((&[0.0], &[4.0]), (&[0.0], &[1.0])).unwrap();
        assert!((wide - 0.5 * ((0.25f64).ln() + 3.0)).abs() < 1e-15);
        assert!((wide - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn width_mismatch_is_a_contract_error() {
        assert!(kl_diag_gaussian((&[0.0], &[1.0]), (&[0.0, 1.0], &[1.0, 1.0])).is_err());
        let a = t2(&[&[0.0, 0.0]]);
        let b = t2(&[&[0.0]]);
        assert!(pairwise_kl(&a, &a, &b, &b).is_err());
    }

    #[test]
    fn tensor_kl_matches_scalar() {
        let qm = t2(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let qv = t2(&[&[0.5, 2.0], &[1.5, 0.1]]);
        let pm = t2(&[&[0.0, 0.0], &[1.0, -1.0], &[0.2, 0.2]]);
        let pv = t2(&[&[1.0, 1.0], &[0.3, 3.0], &[2.0, 0.7]]);
        let kl = pairwise_kl(&qm, &qv, &pm, &pv).unwrap().to_vec2::<f64>().unwrap();
        let (qm, qv, pm, pv) = (
            qm.to_vec2::<f64>().unwrap(),
            qv.to_vec2::<f64>().unwrap(),
            pm.to_vec2::<f64>().unwrap(),
            pv.to_vec2::<f64>().unwrap(),
        );
        for i in 0..2 {
            for t in 0..3 {
                let want = kl_diag_gaussian((&qm[i], &qv[i]), (&pm[t], &pv[t])).unwrap();
                assert!((kl[i][t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_distances_give_uniform_rows() {
        let kl = t2(&[&[0.7, 0.7, 0.7, 0.7]]);
        let r = soft_assign(&kl, &[0.25; 4], 3.0).unwrap().to_vec2::<f64>().unwrap();
        assert!(r[0].iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_centroid_softmax_by_hand() {
        let kl = t2(&[&[0.0, std::f64::consts::LN_2]]);
        let r = soft_assign(&kl, &[0.5, 0.5], 1.0).unwrap().to_vec2::<f64>().unwrap();
        assert!((r[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r[0][1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn large_temperature_is_hard_assignment() {
        let kl = t2(&[&[1.3, 0.9, 2.0]]);
        let r = soft_assign(&kl, &[1.0 / 3.0; 3], 50.0).unwrap().to_vec2::<f64>().unwrap();
        assert!((r[0][1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_space_survives_extreme_distances() {
        let kl = t2(&[&[1e6, 1e6 + 1.0]]);
        let r = soft_assign(&kl, &[0.5, 0.5], 1000.0).unwrap().to_vec2::<f64>().unwrap();
        assert!((r[0][0] + r[0][1] - 1.0).abs() < 1e-12);
        assert!(r[0][0] > 0.999);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let kl = t2(&[&[0.0]]);
        assert!(soft_assign(&kl, &[1.0], 0.0).is_err());
    }

    #[test]
    fn single_user_on_its_centroid_scores_zero() {
        let m = t2(&[&[0.4, -0.2]]);
        let v = t2(&[&[0.3, 0.9]]);
        let (score, _) = matching_score(&m, &v, &m, &v, &[1.0], 3.0).unwrap();
        assert!(score.to_scalar::<f64>().unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_by_two_table() {
        // 1-D users and centroids chosen so the KL table is easy to recompute.
        let um = t2(&[&[0.0], &[1.0]]);
        let uv = t2(&[&[1.0], &[1.0]]);
        let cm = t2(&[&[0.0], &[2.0]]);
        let cv = t2(&[&[1.0], &[1.0]]);
        let (score, resp) = matching_score(&um, &uv, &cm, &cv, &[0.5, 0.5], 2.0).unwrap();
        let table = [[0.0, 2.0], [0.5, 0.5]];
        let mut want = 0.0;
        for (i, row) in table.iter().enumerate() {
            let r = soft_assign_row(row, &[0.5, 0.5], 2.0);
            let got = resp.to_vec2::<f64>().unwrap();
            for t in 0..2 {
                assert!((got[i][t] - r[t]).abs() < 1e-15);
                want += r[t] * row[t];
            }
        }
        assert!((score.to_scalar::<f64>().unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn temperature_does_not_matter_for_equal_distances() {
        let um = t2(&[&[0.0]]);
        let uv = t2(&[&[1.0]]);
        let cm = t2(&[&[1.0], &[-1.0]]);
        let cv = t2(&[&[1.0], &[1.0]]);
        let (a, _) = matching_score(&um, &uv, &cm, &cv, &[0.5, 0.5], 0.5).unwrap();
        let (b, _) = matching_score(&um, &uv, &cm, &cv, &[0.5, 0.5], 40.0).unwrap();
        assert!((a.to_scalar::<f64>().unwrap() - b.to_scalar::<f64>().unwrap()).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_keeps_centroids() {
        let mut c = GaussianCentroids::new(vec![vec![0.5, 1.0]], vec![vec![0.2, 3.0]]).unwrap();
        let before = (c.mean_rows().unwrap(), c.variance_rows().unwrap());
        let z = Tensor::zeros((1, 2), crate::ops::DTYPE, &device()).unwrap();
        assert!(update_centroids(&mut c, &z, &z, None, 0.1).unwrap());
        assert_eq!(before, (c.mean_rows().unwrap(), c.variance_rows().unwrap()));
    }

    #[test]
    fn one_step_moves_towards_the_user_and_lowers_the_score() {
        let um = t2(&[&[1.0, -1.0]]);
        let uv = t2(&[&[0.5, 0.5]]);
        let mut c = GaussianCentroids::new(vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
        let score = |c: &GaussianCentroids| {
            matching_score(&um, &uv, c.means.as_tensor(), &c.variances().unwrap(), &c.priors, 3.0).unwrap()
        };
        let (before, resp) = score(&c);
        let grads = before.backward().unwrap();
        let gm = grads.get(c.means.as_tensor()).unwrap().clone();
        let gv = grads.get(c.log_vars.as_tensor()).unwrap().clone();
        update_centroids(&mut c, &gm, &gv, Some(&resp), 0.01).unwrap();
        let (after, _) = score(&c);
        assert!(after.to_scalar::<f64>().unwrap() < before.to_scalar::<f64>().unwrap());
        let m = c.mean_rows().unwrap();
        assert!(m[0][0] > 0.0 && m[0][1] < 0.0);
        assert!((c.priors.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_skips_update() {
        let mut c = GaussianCentroids::new(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let bad = Tensor::new(&[[f64::NAN]], &device()).unwrap();
        let ok = Tensor::zeros((1, 1), crate::ops::DTYPE, &device()).unwrap();
        assert!(!update_centroids(&mut c, &bad, &ok, None, 0.1).unwrap());
        assert_eq!(c.mean_rows().unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn variance_floor_survives_updates() {
        let mut c = GaussianCentroids::new(vec![vec![0.0]], vec![vec![1e-9]]).unwrap();
        assert!((c.variance_rows().unwrap()[0][0] - 1e-6).abs() < 1e-18);
        let g = Tensor::new(&[[100.0f64]], &device()).unwrap();
        update_centroids(&mut c, &g, &g, None, 1.0).unwrap();
        assert!(c.variance_rows().unwrap()[0][0] >= 1e-6 * (1.0 - 1e-12));
    }

    #[test]
    fn alignment_of_identical_sets_is_zero() {
        let a = GaussianCentroids::new(vec![vec![0.1], vec![2.0]], vec![vec![1.0], vec![0.5]]).unwrap();
        let b = a.clone();
        assert_eq!(centroid_alignment_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn alignment_sums_closed_forms_and_is_asymmetric() {
        let x = GaussianCentroids::new(vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![4.0]]).unwrap();
        let y = GaussianCentroids::new(vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        let got = centroid_alignment_loss(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        let want = 0.5 + 0.5 * ((0.25f64).ln() + 3.0);
        assert!((got - want).abs() < 1e-14);
        let back = centroid_alignment_loss(&y, &x).unwrap().to_scalar::<f64>().unwrap();
        assert!((back - got).abs() > 1e-3);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let a = GaussianCentroids::new(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let b = GaussianCentroids::new(vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        assert!(centroid_alignment_loss(&a, &b).is_err());
    }

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| if i < 10 { vec![0.0 + i as f64 * 0.01] } else { vec![10.0 + i as f64 * 0.01] })
            .collect();
        let labels = kmeans_pp(&pts, 2, 10, 3);
        assert!(labels[..10].iter().all(|&l| l == labels[0]));
        assert!(labels[10..].iter().all(|&l| l == labels[10]));
        assert_ne!(labels[0], labels[10]);
    }

    #[test]
    fn paired_seeding_describes_the_same_users() {
        let x = PosteriorRows {
            means: vec![vec![0.0], vec![0.1], vec![5.0], vec![5.1]],
            vars: vec![vec![0.01]; 4],
        };
        let y = PosteriorRows {
            means: vec![vec![-3.0], vec![-3.1], vec![7.0], vec![7.1]],
            vars: vec![vec![0.02]; 4],
        };
        let pairs = vec![(0, 0), (1, 1), (2, 2), (3, 3)];
        let (cx, cy) = init_paired_centroids(&x, &y, &pairs, 2, 10, 1).unwrap();
        let mx = cx.mean_rows().unwrap();
        let my = cy.mean_rows().unwrap();
        for t in 0..2 {
            let low_x = mx[t][0] < 2.0;
            let low_y = my[t][0] < 2.0;
            assert_eq!(low_x, low_y, "centroid {t} mixes clusters");
        }
        // mixture variance: member variance plus spread of member means
        let vx = cx.variance_rows().unwrap();
        assert!((vx[0][0] - (0.01 + 0.0025)).abs() < 1e-12);
    }
}
