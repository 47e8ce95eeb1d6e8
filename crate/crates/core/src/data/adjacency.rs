use std::sync::Arc;

use candle_core::Tensor;

use super::{Domain, InteractionDataset, Split};
use crate::error::Result;
use crate::sparse::{Csr, SpMatMul};

/// Symmetric degree-normalised user × item interaction matrix,
/// `w_uv = 1 / sqrt(deg(u) · deg(v))`, with its item × user transpose.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    forward: Arc<Csr>,
    transpose: Arc<Csr>,
}

impl NormalizedAdjacency {
    pub fn from_interactions(users: usize, items: usize, pairs: &[(usize, usize)]) -> Self {
        let mut user_deg = vec![0usize; users];
        let mut item_deg = vec![0usize; items];
        for &(u, v) in pairs {
            user_deg[u] += 1;
            item_deg[v] += 1;
        }
        let triplets: Vec<(usize, usize, f64)> = pairs
            .iter()
            .map(|&(u, v)| (u, v, 1.0 / ((user_deg[u] * item_deg[v]) as f64).sqrt()))
            .collect();
        let forward = Csr::from_triplets(users, items, &triplets);
        let transpose = forward.transpose();
        Self {
            forward: Arc::new(forward),
            transpose: Arc::new(transpose),
        }
    }

    pub fn rows(&self) -> usize {
        self.forward.rows
    }

    pub fn cols(&self) -> usize {
        self.forward.cols
    }

    pub fn matrix(&self) -> &Csr {
        &self.forward
    }

    pub fn transpose_view(&self) -> &Csr {
        &self.transpose
    }

    /// `Ā · items`, an `items × d` block mapped to `users × d`.
    pub fn to_users(&self, items: &Tensor) -> Result<Tensor> {
        Ok(SpMatMul::new(self.forward.clone(), self.transpose.clone()).apply(items)?)
    }

    /// `Āᵀ · users`.
    pub fn to_items(&self, users: &Tensor) -> Result<Tensor> {
        Ok(SpMatMul::new(self.transpose.clone(), self.forward.clone()).apply(users)?)
    }

    /// Same structure with users and items swapped.
    pub fn transposed(&self) -> NormalizedAdjacency {
        NormalizedAdjacency {
            forward: self.transpose.clone(),
            transpose: self.forward.clone(),
        }
    }

    /// Zero-weight graph of the given shape.
    pub fn empty(users: usize, items: usize) -> Self {
        Self::from_interactions(users, items, &[])
    }
}

/// Graph over the training interactions of `domain`, with the held-out
/// positives of the `exclude` splits removed.
pub fn build_adjacency(
    dataset: &InteractionDataset,
    domain: Domain,
    exclude: &[Split],
) -> NormalizedAdjacency {
    let data = dataset.domain(domain);
    let pairs = dataset.training_interactions(domain, exclude);
    NormalizedAdjacency::from_interactions(data.num_users(), data.num_items(), &pairs)
}
