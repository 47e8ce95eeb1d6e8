//! All learnable state of one run and its checkpoint directory.
//!
//! A checkpoint directory holds `config.json`, `encoder.ckpt` (every
//! parameter outside `flow/`), `flow.ckpt` and `centroids.jsonl`. Variant C
//! also writes `deep_centroids.jsonl`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use candle_core::{Tensor, Var};

use crate::config::ExperimentConfig;
use crate::cpa::{init_paired_centroids, CentroidRecord, GaussianCentroids, PosteriorRows};
use crate::data::{build_adjacency, Domain, InteractionDataset, NormalizedAdjacency, PairingPlan, Split};
use crate::deep::DecompositionHeads;
use crate::encoder::{encode_domain, DomainEncoder, LayeredRepresentation};
use crate::error::{CiderError, Result};
use crate::flow::FlowTransform;
use crate::objective::{select_variant, ActiveComponents};
use crate::ops::device;
use crate::params::ParamStore;

pub const CONFIG_FILE: &str = "config.json";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const FLOW_FILE: &str = "flow.ckpt";
pub const CENTROIDS_FILE: &str = "centroids.jsonl";
pub const DEEP_CENTROIDS_FILE: &str = "deep_centroids.jsonl";

/// Training graphs of both domains: held-out positives of test and
/// validation users removed.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub x: NormalizedAdjacency,
    pub y: NormalizedAdjacency,
}

impl Graphs {
    pub fn training(dataset: &InteractionDataset) -> Self {
        let exclude = [Split::Test, Split::Validation];
        Self {
            x: build_adjacency(dataset, Domain::X, &exclude),
            y: build_adjacency(dataset, Domain::Y, &exclude),
        }
    }
}

/// Encoder output for both domains.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub users_x: LayeredRepresentation,
    pub items_x: LayeredRepresentation,
    pub users_y: LayeredRepresentation,
    pub items_y: LayeredRepresentation,
}

impl Encoded {
    pub fn users(&self, domain: Domain) -> &LayeredRepresentation {
        match domain {
            Domain::X => &self.users_x,
            Domain::Y => &self.users_y,
        }
    }

    pub fn items(&self, domain: Domain) -> &LayeredRepresentation {
        match domain {
            Domain::X => &self.items_x,
            Domain::Y => &self.items_y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentroidPair {
    pub x: GaussianCentroids,
    pub y: GaussianCentroids,
}

impl CentroidPair {
    pub fn get_mut(&mut self, domain: Domain) -> &mut GaussianCentroids {
        match domain {
            Domain::X => &mut self.x,
            Domain::Y => &mut self.y,
        }
    }

    pub fn get(&self, domain: Domain) -> &GaussianCentroids {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.x.vars();
        v.extend(self.y.vars());
        v
    }

    pub fn records(&self) -> Result<Vec<CentroidRecord>> {
        let mut r = self.x.records(Domain::X)?;
        r.extend(self.y.records(Domain::Y)?);
        Ok(r)
    }

    fn from_records(records: &[CentroidRecord]) -> Result<Self> {
        let part = |d: Domain| -> Vec<CentroidRecord> { records.iter().filter(|r| r.domain == d).cloned().collect() };
        Ok(Self {
            x: GaussianCentroids::from_records(&part(Domain::X))?,
            y: GaussianCentroids::from_records(&part(Domain::Y))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CiderModel {
    pub store: ParamStore,
    pub encoder_x: DomainEncoder,
    pub encoder_y: DomainEncoder,
    pub heads: Option<(DecompositionHeads, DecompositionHeads)>,
    pub flow: Option<FlowTransform>,
    pub centroids: Option<CentroidPair>,
    pub deep_centroids: Option<CentroidPair>,
    pub active: ActiveComponents,
    pub config: ExperimentConfig,
}

fn domain_seed(seed: u64, domain: Domain) -> u64 {
    match domain {
        Domain::X => seed.wrapping_mul(2),
        Domain::Y => seed.wrapping_mul(2).wrapping_add(1),
    }
}

impl CiderModel {
    /// Fresh parameters sized for `dataset`; centroids are seeded later
    /// from encoded users by [`CiderModel::init_centroids`].
    pub fn new(config: &ExperimentConfig, dataset: &InteractionDataset) -> Result<Self> {
        config.validate()?;
        let active = select_variant(config.train.variant);
        let seed = config.train.seed;
        let mut store = ParamStore::new();
        let encoder_x = DomainEncoder::new(
            &mut store,
            Domain::X,
            dataset.x.num_users(),
            dataset.x.num_items(),
            config.encoder,
            domain_seed(seed, Domain::X),
        )?;
        let encoder_y = DomainEncoder::new(
            &mut store,
            Domain::Y,
            dataset.y.num_users(),
            dataset.y.num_items(),
            config.encoder,
            domain_seed(seed, Domain::Y),
        )?;
        let width = if active.whole_representation {
            config.encoder.full_width()
        } else {
            config.encoder.deep_width()
        };
        let heads = if active.decomposition {
            Some((
                DecompositionHeads::new(&mut store, Domain::X, width, domain_seed(seed, Domain::X))?,
                DecompositionHeads::new(&mut store, Domain::Y, width, domain_seed(seed, Domain::Y))?,
            ))
        } else {
            None
        };
        let flow = if active.flow {
            Some(FlowTransform::new(&mut store, &config.flow, width, seed)?)
        } else {
            None
        };
        Ok(Self {
            store,
            encoder_x,
            encoder_y,
            heads,
            flow,
            centroids: None,
            deep_centroids: None,
            active,
            config: config.clone(),
        })
    }

    pub fn encode(&self, graphs: &Graphs) -> Result<Encoded> {
        let (users_x, items_x) = encode_domain(&graphs.x, &self.encoder_x)?;
        let (users_y, items_y) = encode_domain(&graphs.y, &self.encoder_y)?;
        Ok(Encoded {
            users_x,
            items_x,
            users_y,
            items_y,
        })
    }

    pub fn heads(&self, domain: Domain) -> Option<&DecompositionHeads> {
        self.heads.as_ref().map(|(x, y)| match domain {
            Domain::X => x,
            Domain::Y => y,
        })
    }

    /// Block fed to the decomposition and the bound: the deep block, or
    /// everything when the variant ignores the shallow/deep split.
    pub fn deep_block(&self, rep: &LayeredRepresentation) -> Result<Tensor> {
        if self.active.whole_representation {
            rep.full_mean()
        } else {
            rep.deep_mean()
        }
    }

    /// Shallow means placed in front of the reconstructed block when
    /// ranking; absent when the variant ignores the split.
    pub fn ranking_prefix(&self, rep: &LayeredRepresentation) -> Result<Option<Tensor>> {
        if self.active.whole_representation {
            Ok(None)
        } else {
            Ok(Some(rep.shallow_mean()?))
        }
    }

    /// Seeds centroids from the paired training users of `plan` (or each
    /// domain's training users when nobody is paired).
    pub fn init_centroids(&mut self, encoded: &Encoded, dataset: &InteractionDataset, plan: &PairingPlan) -> Result<()> {
        let t = self.config.cpa.centroids;
        let seed = self.config.train.seed;
        let train_x = dataset.training_users(Domain::X);
        let train_y = dataset.training_users(Domain::Y);
        let rows = |rep: &LayeredRepresentation, users: &[usize], deep: bool| -> Result<PosteriorRows> {
            let idx = Tensor::from_vec(users.iter().map(|&u| u as u32).collect::<Vec<_>>(), users.len(), &device())?;
            let sel = rep.select(&idx)?;
            if deep {
                PosteriorRows::from_tensors(&sel.deep_mean()?, &sel.deep_var()?)
            } else {
                PosteriorRows::from_tensors(&sel.shallow_mean()?, &sel.shallow_var()?)
            }
        };
        let pos = |users: &[usize]| -> std::collections::HashMap<usize, usize> {
            users.iter().enumerate().map(|(i, &u)| (u, i)).collect()
        };
        let (px, py) = (pos(&train_x), pos(&train_y));
        let pairs: Vec<(usize, usize)> = plan
            .paired
            .iter()
            .filter_map(|(a, b)| Some((*px.get(a)?, *py.get(b)?)))
            .collect();
        let seed_pair = |deep: bool| -> Result<CentroidPair> {
            let x = rows(&encoded.users_x, &train_x, deep)?;
            let y = rows(&encoded.users_y, &train_y, deep)?;
            let (cx, cy) = init_paired_centroids(&x, &y, &pairs, t, self.config.cpa.kmeans_iterations, seed)?;
            Ok(CentroidPair { x: cx, y: cy })
        };
        if self.active.shallow_cpa {
            self.centroids = Some(seed_pair(false)?);
        }
        if self.active.deep_cpa {
            self.deep_centroids = Some(seed_pair(true)?);
        }
        Ok(())
    }

    /// Everything the main optimizer updates.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = self.store.vars();
        for pair in [&self.centroids, &self.deep_centroids].into_iter().flatten() {
            vars.extend(pair.vars());
        }
        vars
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        self.store.without_prefix("flow/").save(&dir.join(ENCODER_FILE))?;
        self.store.subset("flow/").save(&dir.join(FLOW_FILE))?;
        write_centroids(&dir.join(CENTROIDS_FILE), self.centroids.as_ref())?;
        if self.deep_centroids.is_some() {
            write_centroids(&dir.join(DEEP_CENTROIDS_FILE), self.deep_centroids.as_ref())?;
        }
        Ok(())
    }

    /// Rebuilds a model from a checkpoint directory written by
    /// [`CiderModel::save`] for the same dataset.
    pub fn load(dir: &Path, dataset: &InteractionDataset) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let mut model = Self::new(&config, dataset)?;
        model.store.without_prefix("flow/").load_values(&dir.join(ENCODER_FILE))?;
        model.store.subset("flow/").load_values(&dir.join(FLOW_FILE))?;
        model.centroids = read_centroids(&dir.join(CENTROIDS_FILE))?;
        let deep = dir.join(DEEP_CENTROIDS_FILE);
        if deep.exists() {
            model.deep_centroids = read_centroids(&deep)?;
        }
        Ok(model)
    }
}

pub fn write_centroids(path: &Path, pair: Option<&CentroidPair>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(pair) = pair {
        for r in pair.records()? {
            writeln!(f, "{}", serde_json::to_string(&r)?)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_centroids(path: &Path) -> Result<Option<CentroidPair>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str::<CentroidRecord>(&line)?);
        }
    }
    if records.is_empty() {
        return Ok(None);
    }
    CentroidPair::from_records(&records).map(Some).map_err(|e| {
        CiderError::contract(format!("{}: {e}", path.display()))
    })
}
