//! Leave-one-out ranking evaluation, run aggregation, and the overlap-ratio
//! harness.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{sample_negatives, Domain, InteractionDataset, NegativeSamplePool, Split};
use crate::deep::{cross_domain_infer, reparameterize};
use crate::error::{CiderError, Result};
use crate::model::{CiderModel, Encoded, Graphs};
use crate::train::train;

/// Inner products of one user representation with each candidate.
pub fn score_user(user: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|c| {
            if c.len() != user.len() {
                return Err(CiderError::contract(format!(
                    "user width {} against candidate width {}",
                    user.len(),
                    c.len()
                )));
            }
            Ok(user.iter().zip(c).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// 1-based rank of `positive` among `candidates` (item index, score).
/// Equal scores are ordered by ascending item index.
pub fn rank_of(positive: (usize, f64), negatives: &[(usize, f64)]) -> usize {
    let (pi, ps) = positive;
    1 + negatives
        .iter()
        .filter(|&&(i, s)| s > ps || (s == ps && i < pi))
        .count()
}

pub fn metric_names(cutoffs: &[usize]) -> Vec<String> {
    let mut names = vec!["MRR".to_string()];
    names.extend(cutoffs.iter().map(|k| format!("HR@{k}")));
    names.extend(cutoffs.iter().map(|k| format!("NDCG@{k}")));
    names
}

/// MRR, HR@k and NDCG@k of a rank list.
pub fn compute_metrics(ranks: &[usize], cutoffs: &[usize]) -> Result<BTreeMap<String, f64>> {
    if ranks.is_empty() {
        return Err(CiderError::contract("metrics need at least one rank"));
    }
    if ranks.contains(&0) {
        return Err(CiderError::contract("ranks start at 1"));
    }
    let n = ranks.len() as f64;
    let mut out = BTreeMap::new();
    out.insert("MRR".to_string(), ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n);
    for &k in cutoffs {
        let hits = ranks.iter().filter(|&&r| r <= k);
        out.insert(format!("HR@{k}"), hits.clone().count() as f64 / n);
        out.insert(
            format!("NDCG@{k}"),
            hits.map(|&r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

/// `{domain: {metric: {mean, std}}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricReport {
    pub domains: BTreeMap<String, BTreeMap<String, MetricStat>>,
}

impl MetricReport {
    pub fn from_single(domains: BTreeMap<String, BTreeMap<String, f64>>) -> Self {
        Self {
            domains: domains
                .into_iter()
                .map(|(d, m)| (d, m.into_iter().map(|(k, v)| (k, MetricStat { mean: v, std: 0.0 })).collect()))
                .collect(),
        }
    }

    pub fn mean(&self, domain: &str, metric: &str) -> Option<f64> {
        Some(self.domains.get(domain)?.get(metric)?.mean)
    }

    /// Mean of a metric over domains.
    pub fn domain_average(&self, metric: &str) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.domains.values().map(|m| m.get(metric).map(|s| s.mean)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn rows(&self) -> Vec<(String, String, MetricStat)> {
        self.domains
            .iter()
            .flat_map(|(d, m)| m.iter().map(move |(k, s)| (d.clone(), k.clone(), *s)))
            .collect()
    }

    /// Writes `report.json` and `report.csv` (domain,metric,mean,std).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv"))).map_err(csv_err)?;
        w.write_record(["domain", "metric", "mean", "std"]).map_err(csv_err)?;
        for (d, k, s) in self.rows() {
            w.write_record([d, k, s.mean.to_string(), s.std.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> CiderError {
    CiderError::contract(format!("csv: {e}"))
}

/// Per-metric mean and sample standard deviation over runs, taken over
/// each run's mean.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| CiderError::contract("aggregation needs at least one report"))?;
    let keys = |r: &MetricReport| -> Vec<(String, String)> { r.rows().into_iter().map(|(d, k, _)| (d, k)).collect() };
    let expect = keys(first);
    for r in &reports[1..] {
        if keys(r) != expect {
            return Err(CiderError::contract("reports carry different metric keys"));
        }
    }
    let n = reports.len() as f64;
    let mut out = MetricReport::default();
    for (d, k) in expect {
        let vals: Vec<f64> = reports.iter().map(|r| r.domains[&d][&k].mean).collect();
        // shifted by the first value so identical runs give exactly zero spread
        let shift: Vec<f64> = vals.iter().map(|v| v - vals[0]).collect();
        let offset = shift.iter().sum::<f64>() / n;
        let mean = vals[0] + offset;
        let std = if reports.len() > 1 {
            (shift.iter().map(|d| (d - offset).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.domains.entry(d).or_default().insert(k, MetricStat { mean, std });
    }
    Ok(out)
}

/// Evaluation pools of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPools {
    pub x: NegativeSamplePool,
    pub y: NegativeSamplePool,
}

impl EvalPools {
    pub fn sample(dataset: &InteractionDataset, pool_size: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            x: sample_negatives(dataset, Domain::X, pool_size, seed)?,
            y: sample_negatives(dataset, Domain::Y, pool_size, seed)?,
        })
    }

    pub fn get(&self, domain: Domain) -> &NegativeSamplePool {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }
}

fn check_pool(pool: &NegativeSamplePool, dataset: &InteractionDataset, domain: Domain) -> Result<()> {
    if pool.domain != domain {
        return Err(CiderError::contract(format!("pool for {} used as {domain}", pool.domain)));
    }
    let held = dataset.held_out(domain);
    if held.len() != pool.entries.len() {
        return Err(CiderError::contract(format!(
            "pool has {} entries, dataset holds out {}",
            pool.entries.len(),
            held.len()
        )));
    }
    let items = dataset.domain(domain).num_items();
    for (h, e) in held.iter().zip(&pool.entries) {
        if h.user != e.user || h.item != e.positive || h.split != e.split || e.negatives.iter().any(|&v| v >= items) {
            return Err(CiderError::contract(format!("pool entry for user {} does not match the dataset", e.user)));
        }
    }
    Ok(())
}

fn row(t: &Tensor, i: usize) -> Result<Tensor> {
    Ok(t.narrow(0, i, 1)?)
}

/// Reconstructed block of an evaluation user in `target` built from the
/// other domain alone.
fn cross_domain_block(model: &CiderModel, enc: &Encoded, target: Domain, source_user: usize) -> Result<Tensor> {
    let source = target.other();
    let rep = enc.users(source);
    let d_o = row(&model.deep_block(rep)?, source_user)?;
    match model.heads(source) {
        Some(h) => {
            let (z_s, z_v) = h.split(&d_o)?;
            match &model.flow {
                Some(flow) => Ok(cross_domain_infer(flow, &z_s, &z_v, target, None)?.d_hat),
                None => reparameterize(&z_s, &z_v, None),
            }
        }
        None => Ok(d_o),
    }
}

/// `Û` of an evaluation user in `domain`, with `ε = 0`.
fn user_vector(
    model: &CiderModel,
    enc: &Encoded,
    domain: Domain,
    user: usize,
    counterpart: usize,
    cross: bool,
) -> Result<Vec<f64>> {
    let (shallow_src, shallow_user, d_hat) = if cross {
        (domain.other(), counterpart, cross_domain_block(model, enc, domain, counterpart)?)
    } else {
        let d = row(&model.deep_block(enc.users(domain))?, user)?;
        let d_hat = match (model.heads(domain), model.heads(domain.other())) {
            (Some(h), Some(ho)) => {
                let (s, _) = h.split(&d)?;
                let d_o = row(&model.deep_block(enc.users(domain.other()))?, counterpart)?;
                let (s_o, _) = ho.split(&d_o)?;
                ((s + s_o)? * 0.5)?
            }
            _ => d,
        };
        (domain, user, d_hat)
    };
    let u = match model.ranking_prefix(enc.users(shallow_src))? {
        Some(s) => Tensor::cat(&[&row(&s, shallow_user)?, &d_hat], 1)?,
        None => d_hat,
    };
    Ok(u.flatten_all()?.to_vec1::<f64>()?)
}

/// Ranks of the held-out positives of `split` in `domain`.
pub fn domain_ranks(
    model: &CiderModel,
    enc: &Encoded,
    dataset: &InteractionDataset,
    pool: &NegativeSamplePool,
    domain: Domain,
    split: Split,
    cross_all: bool,
) -> Result<Vec<usize>> {
    check_pool(pool, dataset, domain)?;
    let items = enc.items(domain).full_mean()?.to_vec2::<f64>()?;
    let held = dataset.held_out(domain);
    let mut trained = vec![false; dataset.domain(domain).num_users()];
    for (u, _) in dataset.training_interactions(domain, &[Split::Test, Split::Validation]) {
        trained[u] = true;
    }
    let mut ranks = Vec::new();
    for (h, e) in held.iter().zip(&pool.entries) {
        if e.split != split {
            continue;
        }
        let counterpart = dataset.overlap[h.overlap_pos].index(domain.other());
        let cross = cross_all || !trained[e.user];
        let u = user_vector(model, enc, domain, e.user, counterpart, cross)?;
        let pos = score_user(&u, std::slice::from_ref(&items[e.positive]))?[0];
        let negs: Vec<Vec<f64>> = e.negatives.iter().map(|&v| items[v].clone()).collect();
        let scores = score_user(&u, &negs)?;
        let pairs: Vec<(usize, f64)> = e.negatives.iter().copied().zip(scores).collect();
        ranks.push(rank_of((e.positive, pos), &pairs));
    }
    Ok(ranks)
}

/// Scores every evaluation user of `split` in both domains. Runs trained
/// without paired users rank everyone through the cross-domain path.
pub fn evaluate(
    model: &CiderModel,
    dataset: &InteractionDataset,
    pools: &EvalPools,
    split: Split,
    cross_all: bool,
) -> Result<MetricReport> {
    if split == Split::Train {
        return Err(CiderError::contract("evaluation needs the test or validation split"));
    }
    let enc = model.encode(&Graphs::training(dataset))?;
    let cutoffs = &model.config.eval.cutoffs;
    let mut out = BTreeMap::new();
    for domain in Domain::both() {
        let ranks = domain_ranks(model, &enc, dataset, pools.get(domain), domain, split, cross_all)?;
        if ranks.is_empty() {
            return Err(CiderError::contract(format!("no {split:?} users in domain {domain}")));
        }
        out.insert(domain.to_string(), compute_metrics(&ranks, cutoffs)?);
    }
    Ok(MetricReport::from_single(out))
}

/// One trained run evaluated on its own test pools.
pub fn train_and_evaluate(dataset: &InteractionDataset, config: &ExperimentConfig) -> Result<(crate::train::TrainOutcome, MetricReport)> {
    let outcome = train(dataset, config)?;
    let pools = EvalPools::sample(dataset, config.eval.pool_size, config.train.seed)?;
    let cross_all = outcome.plan.paired.is_empty();
    let report = evaluate(&outcome.model, dataset, &pools, Split::Test, cross_all)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub report: MetricReport,
}

/// Retrains at each retained-overlap fraction and evaluates on the same
/// test users.
pub fn overlap_ratio_harness(dataset: &InteractionDataset, ratios: &[f64], base: &ExperimentConfig) -> Result<Vec<RatioRow>> {
    ratios
        .iter()
        .map(|&r| {
            if !(0.0..=1.0).contains(&r) {
                return Err(CiderError::Config(format!("overlap ratio {r} outside [0, 1]")));
            }
            let mut cfg = base.clone();
            cfg.train.overlap_ratio = r;
            let (_, report) = train_and_evaluate(dataset, &cfg)?;
            Ok(RatioRow { ratio: r, report })
        })
        .collect()
}

/// CSV with a leading `ratio` column.
pub fn write_ratio_csv(rows: &[RatioRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["ratio", "domain", "metric", "mean", "std"]).map_err(csv_err)?;
    for r in rows {
        for (d, k, s) in r.report.rows() {
            w.write_record([r.ratio.to_string(), d, k, s.mean.to_string(), s.std.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
