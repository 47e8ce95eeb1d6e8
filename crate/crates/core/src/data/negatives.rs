use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, InteractionDataset, Split};
use crate::error::{CiderError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub user: usize,
    pub positive: usize,
    pub split: Split,
    pub negatives: Vec<usize>,
}

/// Fixed evaluation candidates: one held-out positive and `pool_size`
/// never-interacted items per test/validation user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSamplePool {
    pub domain: Domain,
    pub pool_size: usize,
    pub entries: Vec<PoolEntry>,
}

impl NegativeSamplePool {
    pub fn for_split(&self, split: Split) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn stream(domain: Domain) -> u64 {
    match domain {
        Domain::X => 11,
        Domain::Y => 12,
    }
}

/// Samples without replacement from the items each evaluation user never
/// touched in `domain`; deterministic in `seed`.
pub fn sample_negatives(
    dataset: &InteractionDataset,
    domain: Domain,
    pool_size: usize,
    seed: u64,
) -> Result<NegativeSamplePool> {
    let data = dataset.domain(domain);
    let user_items = data.user_items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream(domain));

    let mut entries = Vec::new();
    for held in dataset.held_out(domain) {
        let mut touched = vec![false; data.num_items()];
        for &v in &user_items[held.user] {
            touched[v] = true;
        }
        let eligible: Vec<usize> = (0..data.num_items()).filter(|&v| !touched[v]).collect();
        if eligible.len() < pool_size {
            return Err(CiderError::InsufficientNegatives {
                user: data.users[held.user].clone(),
                available: eligible.len(),
                required: pool_size,
            });
        }
        let negatives = rand::seq::index::sample(&mut rng, eligible.len(), pool_size)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        entries.push(PoolEntry {
            user: held.user,
            positive: held.item,
            split: held.split,
            negatives,
        });
    }
    Ok(NegativeSamplePool {
        domain,
        pool_size,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionRecord;
    use std::collections::HashSet;

    /// 20 shared users so that four land in test/validation; user `u0`
    /// interacts with `touched` items out of `vocab`.
    fn dataset(vocab: usize, touched: usize, seed: u64) -> InteractionDataset {
        let build = |filler: &str| {
            let mut recs = Vec::new();
            for v in 0..vocab {
                recs.push(InteractionRecord::new(filler, format!("i{v}")));
            }
            for u in 0..20 {
                let n = if u == 0 { touched } else { 1 };
                for v in 0..n {
                    recs.push(InteractionRecord::new(format!("u{u}"), format!("i{v}")));
                }
            }
            recs
        };
        InteractionDataset::from_records(&build("fx"), &build("fy"), seed).unwrap()
    }

    /// A dataset seed under which `u0` is an evaluation user.
    fn with_u0_held_out(vocab: usize, touched: usize) -> InteractionDataset {
        (0..200)
            .map(|s| dataset(vocab, touched, s))
            .find(|ds| {
                ds.overlap
                    .iter()
                    .any(|o| o.id == "u0" && o.split != Split::Train)
            })
            .unwrap()
    }

    #[test]
    fn forced_pool_is_the_complement() {
        let ds = with_u0_held_out(1000, 1);
        let pool = sample_negatives(&ds, Domain::X, 999, 1).unwrap();
        for e in &pool.entries {
            let set: HashSet<_> = e.negatives.iter().copied().collect();
            assert_eq!(set.len(), 999);
            assert!(!set.contains(&e.positive));
        }
    }

    #[test]
    fn exactly_enough_eligible_items() {
        let vocab = 12_319;
        let ds = with_u0_held_out(vocab, vocab - 999);
        let u0 = ds.x.users.iter().position(|u| u == "u0").unwrap();
        let pool = sample_negatives(&ds, Domain::X, 999, 9).unwrap();
        let e = pool.entries.iter().find(|e| e.user == u0).unwrap();
        let set: HashSet<_> = e.negatives.iter().copied().collect();
        let first = ds.x.items.iter().position(|i| i == &format!("i{}", vocab - 999)).unwrap();
        let expected: HashSet<_> = (first..first + 999).collect();
        assert_eq!(set, expected);
    }

    #[test]
    fn too_few_negatives_names_the_user() {
        let ds = dataset(50, 1, 0);
        let err = sample_negatives(&ds, Domain::X, 999, 1).unwrap_err();
        assert!(matches!(err, CiderError::InsufficientNegatives { required: 999, .. }));
    }

    #[test]
    fn seeds_change_pools() {
        let ds = dataset(1500, 3, 0);
        let a = sample_negatives(&ds, Domain::Y, 999, 1).unwrap();
        let b = sample_negatives(&ds, Domain::Y, 999, 2).unwrap();
        let again = sample_negatives(&ds, Domain::Y, 999, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, again);
    }
}
