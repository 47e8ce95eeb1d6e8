use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Domain, InteractionDataset, Split};

/// Which training users are paired across domains and which are treated
/// as exclusive to one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingPlan {
    /// `(x index, y index)` of paired training users.
    pub paired: Vec<(usize, usize)>,
    pub exclusive_x: Vec<usize>,
    pub exclusive_y: Vec<usize>,
}

impl PairingPlan {
    /// Keeps `retain` (in `[0, 1]`) of the train-split shared users paired;
    /// the rest become unrelated users in each domain.
    pub fn new(dataset: &InteractionDataset, retain: f64, seed: u64) -> Self {
        let mut shared: Vec<(usize, usize)> = dataset
            .overlap_in(Split::Train)
            .map(|(_, o)| (o.x, o.y))
            .collect();
        let keep = ((retain.clamp(0.0, 1.0) * shared.len() as f64).round() as usize).min(shared.len());
        if keep < shared.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(21);
            shared.shuffle(&mut rng);
            shared.truncate(keep);
            shared.sort_unstable();
        }
        let mut is_paired_x = vec![false; dataset.x.num_users()];
        let mut is_paired_y = vec![false; dataset.y.num_users()];
        for &(x, y) in &shared {
            is_paired_x[x] = true;
            is_paired_y[y] = true;
        }
        let exclusive_x = dataset
            .training_users(Domain::X)
            .into_iter()
            .filter(|&u| !is_paired_x[u])
            .collect();
        let exclusive_y = dataset
            .training_users(Domain::Y)
            .into_iter()
            .filter(|&u| !is_paired_y[u])
            .collect();
        Self {
            paired: shared,
            exclusive_x,
            exclusive_y,
        }
    }

    pub fn training_population(&self, domain: Domain) -> usize {
        self.paired.len()
            + match domain {
                Domain::X => self.exclusive_x.len(),
                Domain::Y => self.exclusive_y.len(),
            }
    }

    /// Share of batch positions given to paired users when none is configured.
    pub fn natural_fraction(&self) -> f64 {
        let pop = self
            .training_population(Domain::X)
            .max(self.training_population(Domain::Y));
        if pop == 0 {
            0.0
        } else {
            self.paired.len() as f64 / pop as f64
        }
    }
}

/// Positionally aligned user groups; the first `paired` positions hold the
/// same person in both domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserBatch {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub paired: usize,
}

impl UserBatch {
    pub fn users(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }
}

#[derive(Debug, Clone)]
struct Cycler<T: Copy> {
    items: Vec<T>,
    pos: usize,
}

impl<T: Copy> Cycler<T> {
    fn new(items: Vec<T>) -> Self {
        let pos = items.len();
        Self { items, pos }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Option<T> {
        if self.items.is_empty() {
            return None;
        }
        if self.pos == self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.items[self.pos - 1])
    }
}

/// Epoch-style sampler: each pool is reshuffled once exhausted. Not meant
/// to be shared between threads.
#[derive(Debug, Clone)]
pub struct UserBatchSampler {
    rng: ChaCha8Rng,
    paired: Cycler<(usize, usize)>,
    exclusive_x: Cycler<usize>,
    exclusive_y: Cycler<usize>,
    all_x: Cycler<usize>,
    all_y: Cycler<usize>,
    paired_fraction: f64,
    population: (usize, usize),
    warned: bool,
}

impl UserBatchSampler {
    pub fn new(plan: &PairingPlan, paired_fraction: Option<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(22);
        let fraction = paired_fraction
            .unwrap_or_else(|| plan.natural_fraction())
            .clamp(0.0, 1.0);
        let all = |excl: &[usize], pick: fn(&(usize, usize)) -> usize| {
            let mut v: Vec<usize> = plan.paired.iter().map(pick).collect();
            v.extend_from_slice(excl);
            v
        };
        Self {
            rng,
            paired: Cycler::new(plan.paired.clone()),
            exclusive_x: Cycler::new(plan.exclusive_x.clone()),
            exclusive_y: Cycler::new(plan.exclusive_y.clone()),
            all_x: Cycler::new(all(&plan.exclusive_x, |p| p.0)),
            all_y: Cycler::new(all(&plan.exclusive_y, |p| p.1)),
            paired_fraction: fraction,
            population: (
                plan.training_population(Domain::X),
                plan.training_population(Domain::Y),
            ),
            warned: false,
        }
    }

    pub fn steps_per_epoch(&self, group_size: usize) -> usize {
        let pop = self.population.0.max(self.population.1).max(1);
        pop.div_ceil(group_size.max(1))
    }

    pub fn next_batch(&mut self, group_size: usize) -> UserBatch {
        assert!(group_size >= 1, "group size must be positive");
        if !self.warned && (group_size > self.population.0 || group_size > self.population.1) {
            log::warn!(
                "group size {group_size} exceeds training population ({}, {}); sampling with replacement",
                self.population.0,
                self.population.1
            );
            self.warned = true;
        }
        let n_pair = if self.paired.items.is_empty() {
            0
        } else {
            ((self.paired_fraction * group_size as f64).round() as usize).min(group_size)
        };
        let mut x = Vec::with_capacity(group_size);
        let mut y = Vec::with_capacity(group_size);
        for _ in 0..n_pair {
            let (ux, uy) = self.paired.next(&mut self.rng).expect("non-empty");
            x.push(ux);
            y.push(uy);
        }
        for _ in n_pair..group_size {
            let ux = match self.exclusive_x.next(&mut self.rng) {
                Some(u) => Some(u),
                None => self.all_x.next(&mut self.rng),
            };
            let uy = match self.exclusive_y.next(&mut self.rng) {
                Some(u) => Some(u),
                None => self.all_y.next(&mut self.rng),
            };
            if let (Some(ux), Some(uy)) = (ux, uy) {
                x.push(ux);
                y.push(uy);
            }
        }
        UserBatch {
            x,
            y,
            paired: n_pair,
        }
    }
}

pub fn sample_user_batch(sampler: &mut UserBatchSampler, group_size: usize) -> UserBatch {
    sampler.next_batch(group_size)
}
