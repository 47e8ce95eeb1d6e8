//! Two-domain implicit-feedback datasets.
//!
//! A dataset holds one [`DomainData`] per domain, the users shared between
//! them, and the train/test/validation assignment of every shared user.
//! Test and validation users keep their history in the interaction graph
//! except for one held-out positive per domain: their most recent
//! interaction.

mod adjacency;
mod negatives;
mod sampler;

pub use adjacency::{build_adjacency, NormalizedAdjacency};
pub use negatives::{sample_negatives, NegativeSamplePool, PoolEntry};
pub use sampler::{sample_user_batch, PairingPlan, UserBatch, UserBatchSampler};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CiderError, Result};

pub const DATASET_FORMAT: &str = "cider-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Domain::X => "x",
            Domain::Y => "y",
        }
    }

    pub fn both() -> [Domain; 2] {
        [Domain::X, Domain::Y]
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::X => "X",
            Domain::Y => "Y",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

/// One raw `(user, item[, timestamp])` row.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: Option<f64>,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub name: String,
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// `(user, item)` pairs in chronological order, no duplicates.
    pub interactions: Vec<(usize, usize)>,
}

impl DomainData {
    /// Builds vocabularies in first-appearance order. Interactions are kept
    /// in timestamp order when every record carries one, record order
    /// otherwise; repeated pairs keep their earliest occurrence.
    pub fn from_records(name: &str, records: &[InteractionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(CiderError::EmptyDomain(name.to_string()));
        }
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut user_index: HashMap<&str, usize> = HashMap::new();
        let mut item_index: HashMap<&str, usize> = HashMap::new();
        let mut indexed = Vec::with_capacity(records.len());
        for r in records {
            let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
                users.push(r.user.clone());
                users.len() - 1
            });
            let v = *item_index.entry(r.item.as_str()).or_insert_with(|| {
                items.push(r.item.clone());
                items.len() - 1
            });
            indexed.push((u, v, r.timestamp));
        }
        if indexed.iter().all(|(_, _, t)| t.is_some()) {
            indexed.sort_by(|a, b| a.2.unwrap().total_cmp(&b.2.unwrap()));
        }
        let mut seen = HashSet::with_capacity(indexed.len());
        let interactions = indexed
            .into_iter()
            .map(|(u, v, _)| (u, v))
            .filter(|pair| seen.insert(*pair))
            .collect();
        Ok(Self {
            name: name.to_string(),
            users,
            items,
            interactions,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Item lists per user, chronological.
    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users.len()];
        for &(u, v) in &self.interactions {
            out[u].push(v);
        }
        out
    }
}

/// A user present in both domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapUser {
    pub id: String,
    pub x: usize,
    pub y: usize,
    pub split: Split,
}

impl OverlapUser {
    pub fn index(&self, domain: Domain) -> usize {
        match domain {
            Domain::X => self.x,
            Domain::Y => self.y,
        }
    }
}

/// The leave-one-out positive of an evaluation user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeldOut {
    pub user: usize,
    pub item: usize,
    pub split: Split,
    /// Position of the user in [`InteractionDataset::overlap`].
    pub overlap_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub x: DomainData,
    pub y: DomainData,
    /// Shared users in domain-X first-appearance order.
    pub overlap: Vec<OverlapUser>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetCache {
    format: String,
    version: u32,
    dataset: InteractionDataset,
}

/// Rounds half up, so a lone shared user lands in train.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let tenth = (n + 5) / 10;
    let test = tenth.min(n);
    let validation = tenth.min(n - test);
    (n - test - validation, test, validation)
}

impl InteractionDataset {
    /// Assembles a dataset from two record lists and assigns the 80/10/10
    /// split over shared users with a seeded shuffle.
    pub fn from_records(
        records_x: &[InteractionRecord],
        records_y: &[InteractionRecord],
        seed: u64,
    ) -> Result<Self> {
        let x = DomainData::from_records("X", records_x)?;
        let y = DomainData::from_records("Y", records_y)?;
        let y_index: HashMap<&str, usize> = y
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        let shared: Vec<(usize, usize)> = x
            .users
            .iter()
            .enumerate()
            .filter_map(|(i, u)| y_index.get(u.as_str()).map(|&j| (i, j)))
            .collect();
        if shared.is_empty() {
            log::warn!("domains share no users; cross-domain pairing is unavailable");
        }

        let mut order: Vec<usize> = (0..shared.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let (_, n_test, n_val) = split_counts(shared.len());
        let mut splits = vec![Split::Train; shared.len()];
        for (rank, &pos) in order.iter().enumerate() {
            if rank < n_test {
                splits[pos] = Split::Test;
            } else if rank < n_test + n_val {
                splits[pos] = Split::Validation;
            }
        }
        let overlap = shared
            .into_iter()
            .zip(splits)
            .map(|((xi, yi), split)| OverlapUser {
                id: x.users[xi].clone(),
                x: xi,
                y: yi,
                split,
            })
            .collect();
        let ds = Self {
            x,
            y,
            overlap,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn domain(&self, domain: Domain) -> &DomainData {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }

    pub fn overlap_in(&self, split: Split) -> impl Iterator<Item = (usize, &OverlapUser)> {
        self.overlap
            .iter()
            .enumerate()
            .filter(move |(_, o)| o.split == split)
    }

    /// Held-out positives (the chronologically last interaction) of every
    /// test and validation user in `domain`.
    pub fn held_out(&self, domain: Domain) -> Vec<HeldOut> {
        let data = self.domain(domain);
        let mut last = vec![None; data.num_users()];
        for &(u, v) in &data.interactions {
            last[u] = Some(v);
        }
        self.overlap
            .iter()
            .enumerate()
            .filter(|(_, o)| o.split != Split::Train)
            .filter_map(|(pos, o)| {
                let user = o.index(domain);
                last[user].map(|item| HeldOut {
                    user,
                    item,
                    split: o.split,
                    overlap_pos: pos,
                })
            })
            .collect()
    }

    /// Interactions left after removing the held-out positives of the
    /// listed splits.
    pub fn training_interactions(&self, domain: Domain, exclude: &[Split]) -> Vec<(usize, usize)> {
        let removed: HashSet<(usize, usize)> = self
            .held_out(domain)
            .into_iter()
            .filter(|h| exclude.contains(&h.split))
            .map(|h| (h.user, h.item))
            .collect();
        self.domain(domain)
            .interactions
            .iter()
            .copied()
            .filter(|p| !removed.contains(p))
            .collect()
    }

    /// Users of `domain` that may appear in training batches: everyone
    /// except test and validation users.
    pub fn training_users(&self, domain: Domain) -> Vec<usize> {
        let mut held = vec![false; self.domain(domain).num_users()];
        for o in &self.overlap {
            if o.split != Split::Train {
                held[o.index(domain)] = true;
            }
        }
        (0..held.len()).filter(|&u| !held[u]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for data in [&self.x, &self.y] {
            if data.interactions.is_empty() {
                return Err(CiderError::EmptyDomain(data.name.clone()));
            }
            let mut seen = HashSet::with_capacity(data.interactions.len());
            for &(u, v) in &data.interactions {
                if u >= data.num_users() || v >= data.num_items() {
                    return Err(CiderError::contract(format!(
                        "domain {}: interaction ({u}, {v}) outside vocabulary",
                        data.name
                    )));
                }
                if !seen.insert((u, v)) {
                    return Err(CiderError::contract(format!(
                        "domain {}: duplicate interaction ({u}, {v})",
                        data.name
                    )));
                }
            }
        }
        for o in &self.overlap {
            if self.x.users.get(o.x) != Some(&o.id) || self.y.users.get(o.y) != Some(&o.id) {
                return Err(CiderError::contract(format!(
                    "overlap user {} does not resolve in both domains",
                    o.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cache = DatasetCache {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        };
        Ok(serde_json::to_vec(&cache)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let cache: DatasetCache = serde_json::from_slice(bytes)?;
        if cache.format != DATASET_FORMAT {
            return Err(CiderError::contract(format!(
                "not a dataset cache: format {:?}",
                cache.format
            )));
        }
        if cache.version != DATASET_VERSION {
            return Err(CiderError::Version {
                found: cache.version,
                expected: DATASET_VERSION,
            });
        }
        cache.dataset.validate()?;
        Ok(cache.dataset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads `user_id,item_id[,timestamp]` rows. A first row reading
/// `user_id,item_id...` is treated as a header.
pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if idx == 0
            && row.len() >= 2
            && row[0].eq_ignore_ascii_case("user_id")
            && row[1].eq_ignore_ascii_case("item_id")
        {
            continue;
        }
        let parse_err = |reason: &str| CiderError::Parse {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        if row.len() < 2 || row.len() > 3 {
            return Err(parse_err("expected user_id,item_id[,timestamp]"));
        }
        if row[0].is_empty() || row[1].is_empty() {
            return Err(parse_err("empty user or item id"));
        }
        let timestamp = match row.get(2) {
            Some(t) if !t.is_empty() => Some(
                t.parse::<f64>()
                    .ok()
                    .filter(|t| t.is_finite())
                    .ok_or_else(|| parse_err("timestamp is not a number"))?,
            ),
            _ => None,
        };
        records.push(InteractionRecord {
            user: row[0].to_string(),
            item: row[1].to_string(),
            timestamp,
        });
    }
    Ok(records)
}

fn csv_error(path: &Path, e: csv::Error) -> CiderError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CiderError::Io(io),
        other => CiderError::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Loads both domain files and assigns splits.
pub fn load_domain_pair(path_x: &Path, path_y: &Path, seed: u64) -> Result<InteractionDataset> {
    let records_x = read_interactions(path_x)?;
    let records_y = read_interactions(path_y)?;
    if records_x.is_empty() {
        return Err(CiderError::EmptyDomain(path_x.display().to_string()));
    }
    if records_y.is_empty() {
        return Err(CiderError::EmptyDomain(path_y.display().to_string()));
    }
    InteractionDataset::from_records(&records_x, &records_y, seed)
}
