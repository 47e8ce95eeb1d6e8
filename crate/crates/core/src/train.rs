//! Optimizer loop over user-group batches.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::cpa::{centroid_alignment_loss, matching_score, update_centroids, CentroidRecord, GaussianCentroids};
use crate::data::{Domain, InteractionDataset, PairingPlan, Split, UserBatch, UserBatchSampler};
use crate::deep::{flow_nll, reparameterize};
use crate::encoder::{LayeredRepresentation, VARIANCE_FLOOR};
use crate::error::{CiderError, Result};
use crate::mmd::mmd_rbf;
use crate::model::{CentroidPair, CiderModel, Encoded, Graphs};
use crate::objective::{total_loss, vib_bound, LossBreakdown};
use crate::ops::device;

const NOISE_STREAM: u64 = 51;
const ITEM_STREAM: u64 = 52;

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Shallow centroid alignment after the step, when centroids exist.
    pub alignment: Option<f64>,
    /// Largest deviation of an assignment row sum from 1 in this step.
    pub row_sum_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Shallow centroid alignment right after initialisation.
    pub initial_alignment: Option<f64>,
    /// Centroid records at the end of each epoch, filled when `cpa.dump` is set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centroid_trace: Vec<EpochCentroids>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCentroids {
    pub epoch: usize,
    pub records: Vec<CentroidRecord>,
}

impl TrainLog {
    /// Mean breakdown per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<LossBreakdown> {
        let mut out: Vec<(LossBreakdown, usize)> = Vec::new();
        for s in &self.steps {
            if out.len() <= s.epoch {
                out.resize(s.epoch + 1, (LossBreakdown::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), 0));
            }
            let (acc, n) = &mut out[s.epoch];
            acc.l_s += s.loss.l_s;
            acc.l_d += s.loss.l_d;
            acc.vib_x += s.loss.vib_x;
            acc.vib_y += s.loss.vib_y;
            acc.total += s.loss.total;
            *n += 1;
        }
        out.into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(mut b, n)| {
                let k = n as f64;
                b.l_s /= k;
                b.l_d /= k;
                b.vib_x /= k;
                b.vib_y /= k;
                b.total /= k;
                b
            })
            .collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.steps.iter().map(|s| s.row_sum_error).fold(0.0, f64::max)
    }

    /// CSV with columns `epoch,step,L_s,L_d,vib_x,vib_y,total`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "step", "L_s", "L_d", "vib_x", "vib_y", "total"])
            .map_err(csv_err)?;
        for s in &self.steps {
            let l = &s.loss;
            w.write_record(&[
                s.epoch.to_string(),
                s.step.to_string(),
                l.l_s.to_string(),
                l.l_d.to_string(),
                l.vib_x.to_string(),
                l.vib_y.to_string(),
                l.total.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CiderError {
    CiderError::contract(format!("csv: {e}"))
}

pub struct TrainOutcome {
    pub model: CiderModel,
    pub log: TrainLog,
    pub plan: PairingPlan,
}

/// Per-user training items of one domain, for drawing bound positives and
/// rejection-sampled negatives.
struct ItemTable {
    items: Vec<Vec<usize>>,
    seen: Vec<HashSet<usize>>,
    num_items: usize,
}

impl ItemTable {
    fn new(dataset: &InteractionDataset, domain: Domain) -> Self {
        let data = dataset.domain(domain);
        let mut items = vec![Vec::new(); data.num_users()];
        for (u, v) in dataset.training_interactions(domain, &[Split::Test, Split::Validation]) {
            items[u].push(v);
        }
        let seen = data.user_items().into_iter().map(|v| v.into_iter().collect()).collect();
        Self {
            items,
            seen,
            num_items: data.num_items(),
        }
    }

    fn positive(&self, user: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let list = &self.items[user];
        if list.is_empty() {
            return Err(CiderError::contract(format!("training user {user} has no training items")));
        }
        Ok(list[rng.random_range(0..list.len())])
    }

    fn negative(&self, user: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.seen[user].len() >= self.num_items {
            return Err(CiderError::InsufficientNegatives {
                user: user.to_string(),
                available: 0,
                required: 1,
            });
        }
        loop {
            let v = rng.random_range(0..self.num_items);
            if !self.seen[user].contains(&v) {
                return Ok(v);
            }
        }
    }
}

fn index(users: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        users.iter().map(|&u| u as u32).collect::<Vec<_>>(),
        users.len(),
        &device(),
    )?)
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::new(0.0f64, &device())?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

/// Max |row sum - 1| of a responsibility matrix.
fn row_sum_error(resp: &Tensor) -> Result<f64> {
    let sums = resp.sum(1)?.to_vec1::<f64>()?;
    Ok(sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max))
}

/// Pick the shallow or deep posterior block of a batch.
fn block(rep: &LayeredRepresentation, deep: bool) -> Result<(Tensor, Tensor)> {
    if deep {
        Ok((rep.deep_mean()?, rep.deep_var()?))
    } else {
        Ok((rep.shallow_mean()?, rep.shallow_var()?))
    }
}

/// Separate gradient step on the centroids against detached users.
fn centroid_step(
    pair: &mut CentroidPair,
    batch_x: &LayeredRepresentation,
    batch_y: &LayeredRepresentation,
    deep: bool,
    config: &ExperimentConfig,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (domain, rep) in [(Domain::X, batch_x), (Domain::Y, batch_y)] {
        let (m, v) = block(rep, deep)?;
        let c = pair.get_mut(domain);
        let (score, resp) = matching_score(
            &m.detach(),
            &v.detach(),
            c.means.as_tensor(),
            &c.variances()?,
            &c.priors,
            config.cpa.alpha,
        )?;
        worst = worst.max(row_sum_error(&resp)?);
        let grads = score.backward()?;
        let zeros = || c.means.as_tensor().zeros_like();
        let gm = match grads.get(c.means.as_tensor()) {
            Some(g) => g.clone(),
            None => zeros()?,
        };
        let glv = match grads.get(c.log_vars.as_tensor()) {
            Some(g) => g.clone(),
            None => zeros()?,
        };
        update_centroids(c, &gm, &glv, Some(&resp), config.cpa.lr)?;
    }
    Ok(worst)
}

/// Matching scores of live users against frozen centroids (averaged over
/// users) plus the alignment of the live centroid sets.
fn cpa_loss(
    pair: &CentroidPair,
    batch_x: &LayeredRepresentation,
    batch_y: &LayeredRepresentation,
    deep: bool,
    alpha: f64,
) -> Result<(Tensor, f64)> {
    let mut total = centroid_alignment_loss(&pair.x, &pair.y)?;
    let mut worst: f64 = 0.0;
    for (domain, rep) in [(Domain::X, batch_x), (Domain::Y, batch_y)] {
        let (m, v) = block(rep, deep)?;
        let c = pair.get(domain);
        let n = m.dims2()?.0 as f64;
        let (score, resp) = matching_score(
            &m,
            &v,
            &c.means.as_tensor().detach(),
            &c.variances()?.detach(),
            &c.priors,
            alpha,
        )?;
        worst = worst.max(row_sum_error(&resp)?);
        total = (total + (score / n)?)?;
    }
    Ok((total, worst))
}

fn floor_log_vars(c: &GaussianCentroids) -> Result<()> {
    let clamped = c.log_vars.as_tensor().clamp(VARIANCE_FLOOR.ln(), f64::MAX)?;
    c.log_vars.set(&clamped)?;
    Ok(())
}

pub fn alignment(pair: &CentroidPair) -> Result<f64> {
    scalar(&centroid_alignment_loss(&pair.x, &pair.y)?)
}

/// Stable latents with paired rows (the leading `paired`) replaced by the
/// two domains' average.
fn fuse_stable(s_x: &Tensor, s_y: &Tensor, paired: usize) -> Result<(Tensor, Tensor)> {
    let n = s_x.dims2()?.0;
    if paired == 0 {
        return Ok((s_x.clone(), s_y.clone()));
    }
    let avg = ((s_x.narrow(0, 0, paired)? + s_y.narrow(0, 0, paired)?)? * 0.5)?;
    if paired == n {
        return Ok((avg.clone(), avg));
    }
    let rest_x = s_x.narrow(0, paired, n - paired)?;
    let rest_y = s_y.narrow(0, paired, n - paired)?;
    Ok((Tensor::cat(&[&avg, &rest_x], 0)?, Tensor::cat(&[&avg, &rest_y], 0)?))
}

struct Trainer {
    graphs: Graphs,
    items_x: ItemTable,
    items_y: ItemTable,
    noise: ChaCha8Rng,
    item_rng: ChaCha8Rng,
}

impl Trainer {
    fn new(dataset: &InteractionDataset, seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            items_x: ItemTable::new(dataset, Domain::X),
            items_y: ItemTable::new(dataset, Domain::Y),
            graphs: Graphs::training(dataset),
            noise: stream(NOISE_STREAM),
            item_rng: stream(ITEM_STREAM),
        }
    }

    fn bound(
        &mut self,
        model: &CiderModel,
        domain: Domain,
        d_hat: &Tensor,
        users: &[usize],
        items: &LayeredRepresentation,
    ) -> Result<Tensor> {
        let table = match domain {
            Domain::X => &self.items_x,
            Domain::Y => &self.items_y,
        };
        let j = model.config.train.negatives;
        let mut pos = Vec::with_capacity(users.len());
        let mut neg = Vec::with_capacity(users.len() * j);
        for &u in users {
            pos.push(table.positive(u, &mut self.item_rng)?);
            for _ in 0..j {
                neg.push(table.negative(u, &mut self.item_rng)?);
            }
        }
        let item_block = model.deep_block(items)?;
        let m = item_block.dims2()?.1;
        let p = item_block.index_select(&index(&pos)?, 0)?;
        let q = item_block.index_select(&index(&neg)?, 0)?.reshape((users.len(), j, m))?;
        vib_bound(d_hat, &p, &q)
    }

    /// Forward pass of the main objective for one batch.
    fn loss(&mut self, model: &CiderModel, enc: &Encoded, batch: &UserBatch) -> Result<(Tensor, LossBreakdown, f64)> {
        let (terms, worst) = self.terms(model, enc, batch)?;
        let cfg = &model.config.train;
        let (total, breakdown) = total_loss(&terms.l_s, &terms.l_d, &terms.vib_x, &terms.vib_y, cfg.lambda_s, cfg.lambda_d)?;
        Ok((total, breakdown, worst))
    }

    fn terms(&mut self, model: &CiderModel, enc: &Encoded, batch: &UserBatch) -> Result<(ObjectiveTerms, f64)> {
        let cfg = &model.config;
        let act = model.active;
        let ux = enc.users_x.select(&index(&batch.x)?)?;
        let uy = enc.users_y.select(&index(&batch.y)?)?;
        let mut worst: f64 = 0.0;

        let mut l_s = zero()?;
        let mut l_d = zero()?;
        if let Some(pair) = &model.centroids {
            let (l, w) = cpa_loss(pair, &ux, &uy, false, cfg.cpa.alpha)?;
            l_s = l;
            worst = worst.max(w);
        }
        if let Some(pair) = &model.deep_centroids {
            let (l, w) = cpa_loss(pair, &ux, &uy, true, cfg.cpa.alpha)?;
            l_d = l;
            worst = worst.max(w);
        }
        if act.mmd {
            l_s = mmd_rbf(&ux.shallow_mean()?, &uy.shallow_mean()?, None)?;
            l_d = mmd_rbf(&ux.deep_mean()?, &uy.deep_mean()?, None)?;
        }

        let d_x = model.deep_block(&ux)?;
        let d_y = model.deep_block(&uy)?;
        let (d_hat_x, d_hat_y) = match (model.heads(Domain::X), model.heads(Domain::Y)) {
            (Some(hx), Some(hy)) => {
                let (s_x, v_x) = hx.split(&d_x)?;
                let (s_y, v_y) = hy.split(&d_y)?;
                let p = batch.paired;
                if let (Some(flow), true) = (&model.flow, p > 0) {
                    // per dimension, so the term does not grow with the latent width
                    l_d = (flow_nll(
                        flow,
                        &v_x.narrow(0, 0, p)?,
                        &v_y.narrow(0, 0, p)?,
                        cfg.flow.bandwidth,
                        cfg.flow.base,
                    )? / flow.width as f64)?;
                }
                let (z_x, z_y) = fuse_stable(&s_x, &s_y, p)?;
                (
                    reparameterize(&z_x, &v_x, Some(&mut self.noise))?,
                    reparameterize(&z_y, &v_y, Some(&mut self.noise))?,
                )
            }
            _ => (d_x, d_y),
        };
        let vib_x = self.bound(model, Domain::X, &d_hat_x, &batch.x, &enc.items_x)?;
        let vib_y = self.bound(model, Domain::Y, &d_hat_y, &batch.y, &enc.items_y)?;
        Ok((ObjectiveTerms { l_s, l_d, vib_x, vib_y }, worst))
    }
}

/// Live loss terms of one batch, before weighting.
pub struct ObjectiveTerms {
    pub l_s: Tensor,
    pub l_d: Tensor,
    pub vib_x: Tensor,
    pub vib_y: Tensor,
}

/// Objective terms of `batch` under the model's current parameters. Noise
/// and item draws restart from `seed` on every call, so repeated calls
/// with unchanged parameters agree exactly.
pub fn objective_terms(model: &CiderModel, dataset: &InteractionDataset, batch: &UserBatch, seed: u64) -> Result<ObjectiveTerms> {
    let mut trainer = Trainer::new(dataset, seed);
    let enc = model.encode(&trainer.graphs)?;
    Ok(trainer.terms(model, &enc, batch)?.0)
}

fn diverged(epoch: usize, step: usize, e: CiderError) -> CiderError {
    match e {
        CiderError::Numeric { component, detail } => CiderError::Diverged {
            epoch,
            step,
            detail: format!("{component}: {detail}"),
        },
        other => other,
    }
}

/// Rejects a step whose total is non-finite or exceeds `factor` times the
/// first step's magnitude (at least 1).
pub fn check_divergence(loss: &LossBreakdown, reference: f64, factor: f64) -> std::result::Result<(), String> {
    let limit = factor * reference.abs().max(1.0);
    if loss.total.is_finite() && loss.total.abs() <= limit {
        return Ok(());
    }
    Err(format!(
        "total {} against limit {limit} (L_s {}, L_d {}, vib_x {}, vib_y {})",
        loss.total, loss.l_s, loss.l_d, loss.vib_x, loss.vib_y
    ))
}

/// Trains a fresh model on `dataset` under `config`.
pub fn train(dataset: &InteractionDataset, config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let tc = &config.train;
    let mut model = CiderModel::new(config, dataset)?;
    let plan = PairingPlan::new(dataset, tc.overlap_ratio, tc.seed);
    let mut trainer = Trainer::new(dataset, tc.seed);
    let initial = model.encode(&trainer.graphs)?;
    model.init_centroids(&initial, dataset, &plan)?;
    drop(initial);

    let mut log = TrainLog {
        steps: Vec::new(),
        initial_alignment: model.centroids.as_ref().map(alignment).transpose()?,
        centroid_trace: Vec::new(),
    };
    if tc.epochs == 0 {
        return Ok(TrainOutcome { model, log, plan });
    }

    let mut sampler = UserBatchSampler::new(&plan, tc.paired_fraction, tc.seed);
    let vars: Vec<Var> = model.trainable_vars();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: tc.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let steps = sampler.steps_per_epoch(tc.group_size);
    let mut first_total: Option<f64> = None;
    let mut global = 0usize;
    for epoch in 0..tc.epochs {
        for step in 0..steps {
            let batch = sampler.next_batch(tc.group_size);
            if batch.x.is_empty() {
                return Err(CiderError::contract("sampler produced an empty batch"));
            }
            let enc = model.encode(&trainer.graphs)?;
            let mut worst: f64 = 0.0;
            if global % config.cpa.period == 0 {
                let ux = enc.users_x.select(&index(&batch.x)?)?;
                let uy = enc.users_y.select(&index(&batch.y)?)?;
                if let Some(pair) = model.centroids.as_mut() {
                    worst = worst.max(centroid_step(pair, &ux, &uy, false, config)?);
                }
                if let Some(pair) = model.deep_centroids.as_mut() {
                    worst = worst.max(centroid_step(pair, &ux, &uy, true, config)?);
                }
            }
            let (total, breakdown, w) = trainer
                .loss(&model, &enc, &batch)
                .map_err(|e| diverged(epoch, step, e))?;
            worst = worst.max(w);
            let reference = *first_total.get_or_insert(breakdown.total);
            check_divergence(&breakdown, reference, tc.divergence_factor).map_err(|detail| CiderError::Diverged {
                epoch,
                step,
                detail,
            })?;
            opt.backward_step(&total)?;
            for pair in [&model.centroids, &model.deep_centroids].into_iter().flatten() {
                floor_log_vars(&pair.x)?;
                floor_log_vars(&pair.y)?;
            }
            let align = model.centroids.as_ref().map(alignment).transpose()?;
            log.steps.push(StepLog {
                epoch,
                step,
                loss: breakdown,
                alignment: align,
                row_sum_error: worst,
            });
            global += 1;
        }
        if config.cpa.dump {
            if let Some(pair) = model.centroids.as_ref() {
                log.centroid_trace.push(EpochCentroids {
                    epoch,
                    records: pair.records()?,
                });
            }
        }
        if let Some(last) = log.epoch_means().last() {
            log::debug!("epoch {epoch}: total {:.6}", last.total);
        }
    }
    Ok(TrainOutcome { model, log, plan })
}

/// Writes the per-step loss CSV and, when requested, the centroid dump.
pub fn write_run(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    outcome.model.save(dir)?;
    outcome.log.write_csv(&dir.join("loss.csv"))?;
    let mut f = std::fs::File::create(dir.join("train_log.json"))?;
    f.write_all(serde_json::to_string(&outcome.log)?.as_bytes())?;
    if !outcome.log.centroid_trace.is_empty() {
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("centroid_trace.jsonl"))?);
        for snap in &outcome.log.centroid_trace {
            writeln!(w, "{}", serde_json::to_string(snap)?)?;
        }
        w.flush()?;
    }
    Ok(())
}
