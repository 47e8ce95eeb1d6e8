//! Planted-cluster two-domain interaction generator for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, InteractionRecord};
use crate::error::{CiderError, Result};

/// Share of interactions drawn from the user's own cluster.
pub const IN_CLUSTER_MASS: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Users per domain, shared users included.
    pub users: usize,
    /// Items per domain.
    pub items: usize,
    pub overlap: usize,
    pub clusters: usize,
    /// Probability that a shared user keeps its cluster in domain Y.
    pub rho: f64,
    pub interactions: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            overlap: 300,
            clusters: 2,
            rho: 0.9,
            interactions: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(CiderError::Config("synthetic spec needs users and items".into()));
        }
        if self.overlap > self.users {
            return Err(CiderError::Config(format!(
                "overlap {} exceeds users per domain {}",
                self.overlap, self.users
            )));
        }
        if self.clusters == 0 || self.clusters > self.items {
            return Err(CiderError::Config(format!(
                "need between 1 and {} clusters, got {}",
                self.items, self.clusters
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CiderError::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.interactions == 0 || self.interactions > self.items {
            return Err(CiderError::Config(format!(
                "cannot draw {} distinct interactions from {} items",
                self.interactions, self.items
            )));
        }
        Ok(())
    }
}

/// Generated dataset plus the planted cluster of every user id.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: InteractionDataset,
    /// `(user id, cluster in X)` for users present in X.
    pub clusters_x: Vec<(String, usize)>,
    pub clusters_y: Vec<(String, usize)>,
}

fn draw_items(rng: &mut ChaCha8Rng, cluster: usize, spec: &SyntheticSpec) -> Vec<usize> {
    let in_cluster: Vec<usize> = (0..spec.items).filter(|j| j % spec.clusters == cluster).collect();
    let out_cluster: Vec<usize> = (0..spec.items).filter(|j| j % spec.clusters != cluster).collect();
    let mut taken = vec![false; spec.items];
    let mut out = Vec::with_capacity(spec.interactions);
    while out.len() < spec.interactions {
        let pool = if out_cluster.is_empty() || rng.random::<f64>() < IN_CLUSTER_MASS {
            &in_cluster
        } else {
            &out_cluster
        };
        let j = pool[rng.random_range(0..pool.len())];
        if !taken[j] {
            taken[j] = true;
            out.push(j);
        }
    }
    out
}

/// Item `j` belongs to cluster `j mod clusters`. Shared users are `u{i}`,
/// exclusive ones `x{i}` / `y{i}`; items are `a{j}` in X and `b{j}` in Y.
/// Timestamps follow draw order.
pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut clusters_x = Vec::new();
    let mut clusters_y = Vec::new();
    let emit = |records: &mut Vec<InteractionRecord>, user: &str, prefix: char, items: Vec<usize>| {
        for (t, j) in items.into_iter().enumerate() {
            records.push(InteractionRecord {
                user: user.to_string(),
                item: format!("{prefix}{j}"),
                timestamp: Some(t as f64),
            });
        }
    };
    for i in 0..spec.overlap {
        let id = format!("u{i}");
        let cx = rng.random_range(0..spec.clusters);
        let cy = if rng.random::<f64>() < spec.rho {
            cx
        } else {
            rng.random_range(0..spec.clusters)
        };
        let ix = draw_items(&mut rng, cx, spec);
        let iy = draw_items(&mut rng, cy, spec);
        emit(&mut xs, &id, 'a', ix);
        emit(&mut ys, &id, 'b', iy);
        clusters_x.push((id.clone(), cx));
        clusters_y.push((id, cy));
    }
    for i in 0..spec.users - spec.overlap {
        for (records, truth, prefix, tag) in [
            (&mut xs, &mut clusters_x, 'a', 'x'),
            (&mut ys, &mut clusters_y, 'b', 'y'),
        ] {
            let id = format!("{tag}{i}");
            let c = rng.random_range(0..spec.clusters);
            let items = draw_items(&mut rng, c, spec);
            emit(records, &id, prefix, items);
            truth.push((id, c));
        }
    }
    let dataset = InteractionDataset::from_records(&xs, &ys, spec.seed)?;
    Ok(SyntheticData {
        dataset,
        clusters_x,
        clusters_y,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    Ok(generate_synthetic_with_truth(spec)?.dataset)
}
