//! Synthetic clustered tasks.
//!
//! Each cluster `j` has a ground-truth model `theta_j*`. A client draws its
//! cluster mix from `Dirichlet(alpha)` and samples every point from the
//! cluster picked by that mix; features are standard normal. Linear targets
//! are `x . theta + noise`; logistic labels are Bernoulli of the sigmoid.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use ebscfl_core::rfca::{LossKind, TrainTask};
use ebscfl_core::rng::{self, Rng};

use crate::config::{LossName, RunConfig};
use crate::error::{SimError, SimResult};

const DIRICHLET_RETRIES: usize = 64;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub truths: Vec<DVector<f64>>,
    pub clients: Vec<TrainTask>,
    /// Cluster mix of every client.
    pub mixes: Vec<Vec<f64>>,
    /// Clusters in contiguous blocks, so that consecutive shards follow the
    /// cluster layout.
    pub root: TrainTask,
    /// One held-out set per cluster.
    pub tests: Vec<TrainTask>,
}

impl Dataset {
    pub fn dominant(&self, client: usize) -> usize {
        let mix = &self.mixes[client];
        (0..mix.len()).fold(0, |b, j| if mix[j] > mix[b] { j } else { b })
    }
}

pub fn loss_kind(name: LossName) -> LossKind {
    match name {
        LossName::Linear => LossKind::Linear,
        LossName::Logistic => LossKind::Logistic,
    }
}

/// Cluster proportions from independent `Gamma(alpha, 1)` draws. A draw that
/// underflows to all zeros is retried; `alpha = inf` gives the uniform mix.
pub fn dirichlet(m: usize, alpha: f64, rng: &mut Rng) -> SimResult<Vec<f64>> {
    if alpha.is_infinite() {
        return Ok(vec![1.0 / m as f64; m]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| SimError::Config(format!("dirichlet alpha {alpha}: {e}")))?;
    for _ in 0..DIRICHLET_RETRIES {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|d| d / total).collect());
        }
    }
    Err(SimError::Config(format!("dirichlet alpha {alpha} keeps producing empty draws")))
}

fn pick(mix: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    mix.len() - 1
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gaussian_vec(l: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(l, |_, _| StandardNormal.sample(rng))
}

struct Sampler<'a> {
    truths: &'a [DVector<f64>],
    loss: LossKind,
    noise: f64,
}

impl Sampler<'_> {
    fn sample(&self, clusters: &[usize], rng: &mut Rng) -> (DMatrix<f64>, DVector<f64>) {
        let l = self.truths[0].len();
        let x = DMatrix::from_fn(clusters.len(), l, |_, _| StandardNormal.sample(rng));
        let y = DVector::from_fn(clusters.len(), |i, _| {
            let z = x.row(i).dot(&self.truths[clusters[i]].transpose());
            match self.loss {
                LossKind::Linear => z + self.noise * rng.sample::<f64, _>(StandardNormal),
                LossKind::Logistic => f64::from(rng.random::<f64>() < sigmoid(z)),
            }
        });
        (x, y)
    }

    fn task(&self, clusters: &[usize], batch: usize, iters: usize, rng: &mut Rng) -> SimResult<TrainTask> {
        let (x, y) = self.sample(clusters, rng);
        Ok(TrainTask::new(self.loss, x, y, batch.min(clusters.len()), iters)?)
    }
}

pub fn gen_dataset(cfg: &RunConfig) -> SimResult<Dataset> {
    let (n, m, l) = (cfg.dims.n, cfg.dims.m, cfg.dims.l);
    if n < m {
        return Err(SimError::Config(format!("need n >= m, got n={n} m={m}")));
    }
    let d = &cfg.data;
    let seed = rng::derive_seed(cfg.seed, "sim/data");
    let mut trng = rng::substream(seed, 0);
    let truths: Vec<_> = (0..m)
        .map(|_| {
            let v = gaussian_vec(l, &mut trng);
            let norm = v.norm().max(f64::MIN_POSITIVE);
            v * (d.separation / norm)
        })
        .collect();
    let sampler = Sampler { truths: &truths, loss: loss_kind(cfg.train.loss), noise: d.noise };

    let mut mixes = Vec::with_capacity(n);
    let mut clients = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::substream(seed, 1000 + i as u64);
        let mix = dirichlet(m, d.dirichlet_alpha, &mut rng)?;
        let clusters: Vec<usize> = (0..d.samples_per_client).map(|_| pick(&mix, &mut rng)).collect();
        clients.push(sampler.task(&clusters, cfg.train.batch, cfg.train.local_iters, &mut rng)?);
        mixes.push(mix);
    }

    let mut rng = rng::substream(seed, 1);
    let root_clusters: Vec<usize> = (0..d.root_samples).map(|s| s * m / d.root_samples).collect();
    let root = sampler.task(&root_clusters, cfg.train.batch, cfg.train.server_iters, &mut rng)?;
    let tests = (0..m)
        .map(|j| sampler.task(&vec![j; d.test_samples], d.test_samples, 1, &mut rng))
        .collect::<SimResult<Vec<_>>>()?;
    Ok(Dataset { truths, clients, mixes, root, tests })
}

/// Same task with targets flipped: negated for regression, `1 - y` for
/// classification.
pub fn flip_labels(task: &TrainTask) -> TrainTask {
    let mut t = task.clone();
    t.targets = match t.loss {
        LossKind::Linear => -&t.targets,
        LossKind::Logistic => t.targets.map(|y| 1.0 - y),
    };
    t
}
