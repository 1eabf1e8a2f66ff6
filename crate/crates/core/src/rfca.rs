//! Plaintext robust clustered aggregation.
//!
//! Clients pick the cluster model with the lowest batch loss, train locally
//! and report a one-hot cluster choice with the model delta. The server
//! weights each delta by the ReLU of its cosine with a per-cluster reference
//! update and rescales it to the reference norm.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Least squares, `0.5 * mean((x.theta - y)^2)`.
    Linear,
    /// Binary cross-entropy with labels in `{0, 1}`.
    Logistic,
}

#[derive(Debug, Clone)]
pub struct TrainTask {
    pub loss: LossKind,
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub batch: usize,
    pub local_iters: usize,
}

impl TrainTask {
    pub fn new(loss: LossKind, features: DMatrix<f64>, targets: DVector<f64>, batch: usize, local_iters: usize) -> Result<Self> {
        let task = Self { loss, features, targets, batch, local_iters };
        task.validate()?;
        Ok(task)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidParameter("empty dataset".into()));
        }
        if self.targets.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} targets", self.len()),
                got: format!("{}", self.targets.len()),
            });
        }
        if self.batch == 0 || self.batch > self.len() {
            return Err(Error::InvalidParameter(format!("batch size {} not in 1..={}", self.batch, self.len())));
        }
        if self.local_iters == 0 {
            return Err(Error::InvalidParameter("local iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Rows `range` as a task with the same settings; the batch is clamped.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let rows = range.len();
        let features = self.features.rows(range.start, rows).into_owned();
        let targets = self.targets.rows(range.start, rows).into_owned();
        Self::new(self.loss, features, targets, self.batch.min(rows.max(1)), self.local_iters)
    }

    fn subset(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.features[(idx[r], c)]);
        let y = DVector::from_fn(idx.len(), |r, _| self.targets[idx[r]]);
        (x, y)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn loss_on(kind: LossKind, x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let z = x * theta;
    let b = y.len() as f64;
    match kind {
        LossKind::Linear => 0.5 * (z - y).norm_squared() / b,
        LossKind::Logistic => z.iter().zip(y.iter()).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / b,
    }
}

fn grad_on(kind: LossKind, x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
    let z = x * theta;
    let resid = match kind {
        LossKind::Linear => z - y,
        LossKind::Logistic => z.map(sigmoid) - y,
    };
    x.tr_mul(&resid) / y.len() as f64
}

/// Mean loss of `theta` on the whole task.
pub fn loss(task: &TrainTask, theta: &DVector<f64>) -> f64 {
    loss_on(task.loss, &task.features, &task.targets, theta)
}

/// Fraction of correctly classified samples (threshold 0.5); `None` for
/// regression tasks.
pub fn accuracy(task: &TrainTask, theta: &DVector<f64>) -> Option<f64> {
    if task.loss != LossKind::Logistic {
        return None;
    }
    let z = &task.features * theta;
    let hits = z.iter().zip(task.targets.iter()).filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5)).count();
    Some(hits as f64 / task.len() as f64)
}

fn sample_batch(task: &TrainTask, rng: &mut Rng) -> Vec<usize> {
    if task.batch == task.len() {
        (0..task.len()).collect()
    } else {
        index::sample(rng, task.len(), task.batch).into_vec()
    }
}

fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = j;
        }
    }
    best
}

/// Selects the model with the lowest loss on a sampled batch, then runs
/// `iters` mini-batch gradient steps from it. Returns the cluster index and
/// the model delta.
pub fn clustered_model_update(
    models: &[DVector<f64>],
    task: &TrainTask,
    eta: f64,
    iters: usize,
    rng: &mut Rng,
) -> Result<(usize, DVector<f64>)> {
    if models.is_empty() {
        return Err(Error::InvalidParameter("no cluster models".into()));
    }
    task.validate()?;
    if iters == 0 {
        return Err(Error::InvalidParameter("local iterations must be at least 1".into()));
    }
    let (x, y) = task.subset(&sample_batch(task, rng));
    let losses: Vec<f64> = models.iter().map(|m| loss_on(task.loss, &x, &y, m)).collect();
    if let Some(j) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("selection loss of cluster {j}")));
    }
    let j = argmin_lowest(&losses);
    let start = &models[j];
    let mut theta = start.clone();
    for step in 0..iters {
        let (x, y) = task.subset(&sample_batch(task, rng));
        theta -= grad_on(task.loss, &x, &y, &theta) * eta;
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("local step {step} diverged on cluster {j}")));
        }
    }
    Ok((j, theta - start))
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub models: Vec<DVector<f64>>,
    pub server_updates: Vec<DVector<f64>>,
    pub norms: Vec<f64>,
    pub eta: f64,
}

impl ClusterState {
    pub fn new(models: Vec<DVector<f64>>, server_updates: Vec<DVector<f64>>, eta: f64) -> Result<Self> {
        if models.is_empty() || models.len() != server_updates.len() {
            return Err(Error::InvalidParameter("need one server update per cluster model".into()));
        }
        let l = models[0].len();
        if models.iter().chain(&server_updates).any(|v| v.len() != l) {
            return Err(Error::InvalidParameter("models and server updates must share length".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {eta}")));
        }
        let norms = server_updates.iter().map(|g| g.norm()).collect();
        Ok(Self { models, server_updates, norms, eta })
    }

    pub fn m(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models[0].len()
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.norms[j] > 0.0
    }
}

/// Trains reference updates on `n_splits` consecutive shards of the root
/// task, accumulating `(m / n_splits) * delta` into the chosen cluster.
pub fn server_init(
    root: &TrainTask,
    init_models: Vec<DVector<f64>>,
    eta: f64,
    eta_init: f64,
    server_iters: usize,
    n_splits: usize,
    seed: u64,
) -> Result<ClusterState> {
    if n_splits == 0 || n_splits > root.len() {
        return Err(Error::InvalidParameter(format!("cannot split {} samples into {n_splits} shards", root.len())));
    }
    let m = init_models.len();
    let l = root.dim();
    let mut updates = vec![DVector::zeros(l); m];
    let scale = m as f64 / n_splits as f64;
    for s in 0..n_splits {
        let lo = s * root.len() / n_splits;
        let hi = (s + 1) * root.len() / n_splits;
        let shard = root.slice(lo..hi)?;
        let mut rng = rng::substream(rng::derive_seed(seed, "rfca/server_init"), s as u64);
        let (j, delta) = clustered_model_update(&init_models, &shard, eta_init, server_iters, &mut rng)?;
        updates[j] += delta * scale;
    }
    ClusterState::new(init_models, updates, eta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub cluster: usize,
    pub gradient: DVector<f64>,
}

impl ClientUpdate {
    pub fn new(cluster: usize, gradient: DVector<f64>) -> Self {
        Self { cluster, gradient }
    }

    pub fn onehot(&self, m: usize) -> Vec<f64> {
        (0..m).map(|k| if k == self.cluster { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Sum of weights inside the cluster.
    #[default]
    PerCluster,
    /// Sum of weights over every cluster and client.
    Global,
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    pub per_cluster: Vec<DVector<f64>>,
    /// `ReLU(c_i^k)` at each client's own cluster.
    pub weights: Vec<f64>,
    /// Clients left out for having a zero-norm update.
    pub excluded: Vec<usize>,
    /// Clusters whose denominator was zero; their aggregate is zero.
    pub skipped: Vec<usize>,
}

pub fn cosine_weight(g: &DVector<f64>, g0: &DVector<f64>) -> f64 {
    let (a, b) = (g.norm(), g0.norm());
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    (g.dot(g0) / (a * b)).max(0.0)
}

pub fn aggregate_plain(state: &ClusterState, updates: &[ClientUpdate], denom: Denominator) -> Result<Aggregate> {
    if updates.is_empty() {
        return Err(Error::InvalidParameter("no client updates".into()));
    }
    let (m, l) = (state.m(), state.dim());
    let mut per_cluster = vec![DVector::zeros(l); m];
    let mut sums = vec![0.0; m];
    let mut weights = vec![0.0; updates.len()];
    let mut excluded = Vec::new();
    for (i, u) in updates.iter().enumerate() {
        if u.cluster >= m {
            return Err(Error::IndexOutOfRange { index: u.cluster, limit: m });
        }
        if u.gradient.len() != l {
            return Err(Error::ShapeMismatch { expected: format!("length {l}"), got: format!("{}", u.gradient.len()) });
        }
        if !u.gradient.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("update of client {i}")));
        }
        let norm = u.gradient.norm();
        if norm == 0.0 {
            excluded.push(i);
            continue;
        }
        let k = u.cluster;
        let w = cosine_weight(&u.gradient, &state.server_updates[k]);
        weights[i] = w;
        if w > 0.0 {
            sums[k] += w;
            per_cluster[k] += &u.gradient * (w * state.norms[k] / norm);
        }
    }
    let total: f64 = sums.iter().sum();
    let mut skipped = Vec::new();
    for k in 0..m {
        let d = match denom {
            Denominator::PerCluster => sums[k],
            Denominator::Global => total,
        };
        if sums[k] == 0.0 || d == 0.0 {
            skipped.push(k);
            per_cluster[k].fill(0.0);
        } else {
            per_cluster[k] /= d;
        }
    }
    Ok(Aggregate { per_cluster, weights, excluded, skipped })
}

/// `theta_k += eta * g^k`; skipped clusters stay put.
pub fn apply_aggregate(state: &mut ClusterState, agg: &[DVector<f64>]) {
    let eta = state.eta;
    for (theta, g) in state.models.iter_mut().zip(agg) {
        theta.axpy(eta, g, 1.0);
    }
}

/// Substitutes adversarial updates during a round.
pub trait AttackHook {
    fn substitute(&mut self, round: usize, client: usize, state: &ClusterState, honest: ClientUpdate) -> ClientUpdate;
}

pub struct NoAttack;

impl AttackHook for NoAttack {
    fn substitute(&mut self, _: usize, _: usize, _: &ClusterState, honest: ClientUpdate) -> ClientUpdate {
        honest
    }
}

/// Honest local updates of every client for one round, seeded per client.
pub fn local_updates(state: &ClusterState, clients: &[TrainTask], eta: f64, round: usize, seed: u64) -> Result<Vec<ClientUpdate>> {
    let round_seed = rng::derive_index(rng::derive_seed(seed, "rfca/round"), round as u64);
    clients
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = rng::substream(round_seed, i as u64);
            let (j, g) = clustered_model_update(&state.models, task, eta, task.local_iters, &mut rng)?;
            Ok(ClientUpdate::new(j, g))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub clusters: Vec<usize>,
    pub weights: Vec<f64>,
    pub mean_loss: f64,
    pub param_error: Option<Vec<f64>>,
}

pub fn param_errors(state: &ClusterState, truths: &[DVector<f64>]) -> Vec<f64> {
    state.models.iter().zip(truths).map(|(t, s)| (t - s).norm()).collect()
}

/// Mean loss each client sees at its best cluster model.
pub fn mean_best_loss(state: &ClusterState, clients: &[TrainTask]) -> f64 {
    let total: f64 = clients
        .iter()
        .map(|c| state.models.iter().map(|m| loss(c, m)).fold(f64::INFINITY, f64::min))
        .sum();
    total / clients.len().max(1) as f64
}

pub struct RunConfig<'a> {
    pub rounds: usize,
    pub local_eta: f64,
    pub denominator: Denominator,
    pub truths: Option<&'a [DVector<f64>]>,
    pub seed: u64,
}

pub fn run_rounds(
    state: &mut ClusterState,
    clients: &[TrainTask],
    cfg: &RunConfig<'_>,
    hook: &mut dyn AttackHook,
) -> Result<Vec<RoundRecord>> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidParameter("need at least one global round".into()));
    }
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let honest = local_updates(state, clients, cfg.local_eta, round, cfg.seed)?;
        let updates: Vec<_> =
            honest.into_iter().enumerate().map(|(i, u)| hook.substitute(round, i, state, u)).collect();
        let agg = aggregate_plain(state, &updates, cfg.denominator)?;
        apply_aggregate(state, &agg.per_cluster);
        let mean_loss = mean_best_loss(state, clients);
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at round {round}")));
        }
        records.push(RoundRecord {
            round,
            clusters: updates.iter().map(|u| u.cluster).collect(),
            weights: agg.weights,
            mean_loss,
            param_error: cfg.truths.map(|t| param_errors(state, t)),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moma;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn linear_task(theta: &DVector<f64>, n: usize, seed: u64) -> TrainTask {
        let mut rng = rng::substream(seed, 0);
        let x = moma::gaussian(n, theta.len(), &mut rng);
        let y = &x * theta;
        TrainTask::new(LossKind::Linear, x, y, n.min(16), 3).unwrap()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn single_cluster_always_selected() {
        let task = linear_task(&dv(&[1.0, -1.0]), 20, 1);
        let mut rng = rng::substream(1, 1);
        let (j, _) = clustered_model_update(&[dv(&[5.0, 5.0])], &task, 0.1, 2, &mut rng).unwrap();
        assert_eq!(j, 0);
    }

    #[test]
    fn selects_true_cluster_and_stays() {
        let truths = [dv(&[1.0, 0.0, 0.0]), dv(&[0.0, 2.0, 0.0])];
        let task = linear_task(&truths[1], 40, 2);
        let mut rng = rng::substream(2, 1);
        let (j, delta) = clustered_model_update(&truths, &task, 0.1, 5, &mut rng).unwrap();
        assert_eq!(j, 1);
        assert!(delta.norm() <= 1e-12);
    }

    #[test]
    fn ties_break_low_and_zero_steps() {
        let task = linear_task(&dv(&[1.0]), 10, 3);
        let same = [dv(&[0.0]), dv(&[0.0])];
        let mut rng = rng::substream(3, 0);
        let (j, delta) = clustered_model_update(&same, &task, 0.0, 1, &mut rng).unwrap();
        assert_eq!(j, 0);
        assert_eq!(delta, dv(&[0.0]));
        assert!(clustered_model_update(&same, &task, 0.1, 0, &mut rng).is_err());
        let empty = TrainTask::new(LossKind::Linear, DMatrix::zeros(0, 1), DVector::zeros(0), 1, 1);
        assert!(empty.is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let task = linear_task(&dv(&[1.0]), 10, 4);
        let mut rng = rng::substream(4, 0);
        let err = clustered_model_update(&[dv(&[f64::NAN])], &task, 0.1, 1, &mut rng);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn logistic_gradient_matches_finite_difference() {
        let mut rng = rng::substream(5, 0);
        let x = moma::gaussian(12, 3, &mut rng);
        let y = DVector::from_fn(12, |i, _| (i % 2) as f64);
        let theta = dv(&[0.3, -0.2, 0.5]);
        let g = grad_on(LossKind::Logistic, &x, &y, &theta);
        for k in 0..3 {
            let mut e = DVector::zeros(3);
            e[k] = 1e-6;
            let fd = (loss_on(LossKind::Logistic, &x, &y, &(&theta + &e)) - loss_on(LossKind::Logistic, &x, &y, &(&theta - &e))) / 2e-6;
            assert!((fd - g[k]).abs() <= 1e-7);
        }
    }

    #[test]
    fn server_init_cases() {
        let truth = dv(&[1.0, 2.0]);
        let task = linear_task(&truth, 16, 6);
        let init = vec![DVector::zeros(2)];
        let state = server_init(&task, init.clone(), 0.1, 0.1, 3, 1, 7).unwrap();
        let mut rng = rng::substream(rng::derive_seed(7, "rfca/server_init"), 0);
        let (_, delta) = clustered_model_update(&init, &task, 0.1, 3, &mut rng).unwrap();
        assert_eq!(state.server_updates[0], delta);
        assert!(state.is_active(0));

        let frozen = server_init(&task, vec![DVector::zeros(2), dv(&[1.0, 1.0])], 0.1, 0.0, 3, 2, 7).unwrap();
        assert!(!frozen.is_active(0) && !frozen.is_active(1));
    }

    #[test]
    fn server_init_separates_clusters() {
        let truths = [dv(&[3.0, 0.0, 0.0, 0.0]), dv(&[0.0, 0.0, 3.0, 0.0])];
        let a = linear_task(&truths[0], 32, 8);
        let b = linear_task(&truths[1], 32, 9);
        let x = DMatrix::from_fn(64, 4, |r, c| if r < 32 { a.features[(r, c)] } else { b.features[(r - 32, c)] });
        let y = DVector::from_fn(64, |r, _| if r < 32 { a.targets[r] } else { b.targets[r - 32] });
        let root = TrainTask::new(LossKind::Linear, x, y, 16, 5).unwrap();
        let init = vec![truths[0].scale(0.3), truths[1].scale(0.3)];
        let state = server_init(&root, init, 0.1, 0.1, 5, 2, 10).unwrap();
        assert!(state.is_active(0) && state.is_active(1));
        let g = &state.server_updates;
        let cos = g[0].dot(&g[1]) / (g[0].norm() * g[1].norm());
        assert!(cos < 0.9, "cosine {cos}");
    }

    fn state_with(g0: DVector<f64>) -> ClusterState {
        ClusterState::new(vec![DVector::zeros(g0.len())], vec![g0], 1.0).unwrap()
    }

    #[test]
    fn aligned_client_passes_through() {
        let g = dv(&[0.6, 0.8]);
        let state = state_with(g.clone());
        let agg = aggregate_plain(&state, &[ClientUpdate::new(0, g.clone())], Denominator::PerCluster).unwrap();
        assert!((&agg.per_cluster[0] - g).amax() <= 1e-15);
        let neg = aggregate_plain(&state, &[ClientUpdate::new(0, dv(&[-1.0, 0.0]))], Denominator::PerCluster).unwrap();
        assert_eq!(neg.per_cluster[0], DVector::zeros(2));
        assert_eq!(neg.skipped, vec![0]);
    }

    #[test]
    fn three_clients_match_brute_force() {
        let g0 = dv(&[2.0, 0.0]);
        let state = state_with(g0.clone());
        let at = |c: f64, norm: f64| dv(&[c * norm, (1.0 - c * c).sqrt() * norm]);
        let gs = [at(0.8, 1.0), at(0.5, 3.0), at(-0.2, 0.5)];
        let ups: Vec<_> = gs.iter().map(|g| ClientUpdate::new(0, g.clone())).collect();
        let agg = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
        for (w, want) in agg.weights.iter().zip([0.8, 0.5, 0.0]) {
            assert!((w - want).abs() <= 1e-12);
        }
        // direct evaluation with hand-computed weights
        let mut want = DVector::zeros(2);
        for (g, c) in gs.iter().zip([0.8f64, 0.5, -0.2]) {
            want += g * (c.max(0.0) * 2.0 / g.norm());
        }
        want /= 1.3;
        assert!((&agg.per_cluster[0] - want).amax() <= 1e-12);
    }

    #[test]
    fn zero_norm_client_excluded() {
        let state = state_with(dv(&[1.0, 0.0]));
        let ups = [ClientUpdate::new(0, DVector::zeros(2)), ClientUpdate::new(0, dv(&[1.0, 1.0]))];
        let agg = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
        assert_eq!(agg.excluded, vec![0]);
        assert!((agg.per_cluster[0].norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn global_denominator_variant() {
        let state = ClusterState::new(vec![DVector::zeros(2); 2], vec![dv(&[1.0, 0.0]), dv(&[0.0, 1.0])], 1.0).unwrap();
        let ups = [ClientUpdate::new(0, dv(&[1.0, 0.0])), ClientUpdate::new(1, dv(&[0.0, 1.0]))];
        let per = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
        let glob = aggregate_plain(&state, &ups, Denominator::Global).unwrap();
        assert!((&per.per_cluster[0] - &glob.per_cluster[0] * 2.0).amax() <= 1e-15);
    }

    struct Negate;
    impl AttackHook for Negate {
        fn substitute(&mut self, _: usize, _: usize, state: &ClusterState, honest: ClientUpdate) -> ClientUpdate {
            ClientUpdate::new(honest.cluster, -&state.server_updates[honest.cluster])
        }
    }

    fn two_cluster_setup(seed: u64) -> (ClusterState, Vec<TrainTask>, Vec<DVector<f64>>) {
        let truths = vec![dv(&[2.0, 0.0, 0.0, 0.0]), dv(&[0.0, 0.0, 2.0, 0.0])];
        let clients: Vec<_> = (0..6).map(|i| linear_task(&truths[i % 2], 30, seed + i as u64)).collect();
        let init: Vec<_> = truths.iter().map(|t| t.scale(0.3)).collect();
        let root_a = linear_task(&truths[0], 30, seed + 100);
        let root_b = linear_task(&truths[1], 30, seed + 101);
        let x = DMatrix::from_fn(60, 4, |r, c| if r < 30 { root_a.features[(r, c)] } else { root_b.features[(r - 30, c)] });
        let y = DVector::from_fn(60, |r, _| if r < 30 { root_a.targets[r] } else { root_b.targets[r - 30] });
        let root = TrainTask::new(LossKind::Linear, x, y, 16, 3).unwrap();
        let state = server_init(&root, init, 0.5, 0.1, 3, 2, seed).unwrap();
        (state, clients, truths)
    }

    #[test]
    fn training_reduces_error() {
        let (mut state, clients, truths) = two_cluster_setup(20);
        let before = param_errors(&state, &truths);
        let cfg = RunConfig { rounds: 30, local_eta: 0.1, denominator: Denominator::PerCluster, truths: Some(&truths), seed: 1 };
        let rec = run_rounds(&mut state, &clients, &cfg, &mut NoAttack).unwrap();
        let after = rec.last().unwrap().param_error.clone().unwrap();
        for k in 0..2 {
            assert!(after[k] < before[k], "cluster {k}: {} -> {}", before[k], after[k]);
        }
    }

    #[test]
    fn all_adversarial_freezes_models() {
        let (mut state, clients, _) = two_cluster_setup(21);
        let start = state.models.clone();
        let cfg = RunConfig { rounds: 3, local_eta: 0.1, denominator: Denominator::PerCluster, truths: None, seed: 2 };
        let rec = run_rounds(&mut state, &clients, &cfg, &mut Negate).unwrap();
        assert_eq!(state.models, start);
        assert!(rec.iter().all(|r| r.weights.iter().all(|&w| w == 0.0)));
    }

    #[test]
    fn zero_rate_keeps_models() {
        let (mut state, clients, _) = two_cluster_setup(22);
        state.eta = 0.0;
        let start = state.models.clone();
        let cfg = RunConfig { rounds: 2, local_eta: 0.1, denominator: Denominator::PerCluster, truths: None, seed: 3 };
        let rec = run_rounds(&mut state, &clients, &cfg, &mut NoAttack).unwrap();
        assert_eq!(state.models, start);
        assert_eq!(rec[0].mean_loss, rec[1].mean_loss);
        let bad = RunConfig { rounds: 0, ..cfg };
        assert!(run_rounds(&mut state, &clients, &bad, &mut NoAttack).is_err());
    }

    fn random_updates(m: usize, l: usize, n: usize, seed: u64) -> (ClusterState, Vec<ClientUpdate>) {
        let mut rng = rng::substream(seed, 3);
        let g0: Vec<_> = (0..m).map(|_| DVector::from_fn(l, |_, _| rng.random_range(-1.0..1.0))).collect();
        let state = ClusterState::new(vec![DVector::zeros(l); m], g0, 1.0).unwrap();
        let ups = (0..n)
            .map(|_| ClientUpdate::new(rng.random_range(0..m), DVector::from_fn(l, |_, _| rng.random_range(-1.0..1.0))))
            .collect();
        (state, ups)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scale_invariance(seed in any::<u64>(), lambda in 1e-3f64..1e3, pick in 0usize..6) {
            let (state, mut ups) = random_updates(3, 5, 6, seed);
            let base = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
            ups[pick].gradient *= lambda;
            let scaled = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
            for (a, b) in base.per_cluster.iter().zip(&scaled.per_cluster) {
                prop_assert!((a - b).amax() <= 1e-9);
            }
        }

        #[test]
        fn excluded_clients_change_nothing(seed in any::<u64>()) {
            let (state, ups) = random_updates(2, 4, 8, seed);
            let base = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
            let kept: Vec<_> = ups.iter().zip(&base.weights).filter(|(_, &w)| w > 0.0).map(|(u, _)| u.clone()).collect();
            prop_assume!(!kept.is_empty());
            let pruned = aggregate_plain(&state, &kept, Denominator::PerCluster).unwrap();
            for (a, b) in base.per_cluster.iter().zip(&pruned.per_cluster) {
                prop_assert!((a - b).amax() <= 1e-12);
            }
        }

        #[test]
        fn cluster_isolation(seed in any::<u64>(), k in 0usize..3) {
            let (state, mut ups) = random_updates(3, 4, 6, seed);
            let base = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
            let extra = ClientUpdate::new(k, state.server_updates[k].clone());
            ups.push(extra);
            let more = aggregate_plain(&state, &ups, Denominator::PerCluster).unwrap();
            for j in (0..3).filter(|&j| j != k) {
                prop_assert_eq!(&base.per_cluster[j], &more.per_cluster[j]);
            }
        }
    }
}
