//! In-process simulation of clients, server and KDC.
//!
//! Each round: clients train locally (in parallel), adversaries substitute
//! their updates, and the server aggregates with one of three rules. In
//! secure mode every submission crosses the wire format as bytes, and the
//! KDC issues fresh round keys.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use ebscfl_core::kdc::{init_keys_with, plan_layers, refresh_round, KeyMaterial, LayerPlan};
use ebscfl_core::protocol::{client_encode, update_models, EncodedGradient, Keys, RoundStatus};
use ebscfl_core::rfca::{
    aggregate_plain, apply_aggregate, clustered_model_update, cosine_weight, server_init, ClientUpdate, ClusterState,
    Denominator,
};
use ebscfl_core::rng;
use ebscfl_core::wire::{self, PayloadKind};
use ebscfl_core::Error as CoreError;

use crate::attack::{inject_attack, pick_adversaries, AttackContext};
use crate::config::{AttackKind, InitKind, NormalizerKind, RunConfig};
use crate::data::{gen_dataset, Dataset};
use crate::error::{SimError, SimResult};
use crate::metrics::{air, asr, evaluate, mark_successful, matched_errors, MetricsRow, PhaseTimes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Plaintext robust aggregation (the oracle).
    Plain,
    /// The secure protocol.
    Secure,
    /// Unweighted per-cluster mean, no normalization.
    FedAvg,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Secure => "secure",
            Mode::FedAvg => "fedavg",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: Mode,
    pub metrics: Vec<MetricsRow>,
    pub times: Vec<PhaseTimes>,
    /// `[round][client]` aggregation weight (cosine ReLU against the
    /// client's chosen cluster).
    pub weights: Vec<Vec<f64>>,
    pub clusters: Vec<Vec<usize>>,
    pub adversary: Vec<bool>,
    pub models: Vec<DVector<f64>>,
    pub initial_error: Vec<f64>,
    /// `[round][cluster]` matched parameter error after the round.
    pub errors: Vec<Vec<f64>>,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map(|r| r.fa).unwrap_or(f64::NAN)
    }

    pub fn final_error(&self) -> f64 {
        self.errors.last().map(|e| e.iter().sum::<f64>() / e.len() as f64).unwrap_or(f64::NAN)
    }
}

pub fn initial_models(cfg: &RunConfig, data: &Dataset) -> SimResult<Vec<DVector<f64>>> {
    let (m, l) = (cfg.dims.m, cfg.dims.l);
    let mut rng = rng::substream(rng::derive_seed(cfg.seed, "sim/init"), 0);
    let mut gauss = || DVector::from_fn(l, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng));
    (0..m)
        .map(|j| match cfg.init.kind {
            InitKind::Random => Ok(gauss() * cfg.init.scale),
            InitKind::Ball => {
                let d = gauss();
                Ok(&data.truths[j] + d.normalize() * cfg.init.scale)
            }
            InitKind::Warm => {
                let start = gauss() * cfg.init.scale;
                let (lo, hi) = (j * data.root.len() / m, (j + 1) * data.root.len() / m);
                let shard = data.root.slice(lo..hi)?;
                let mut r = rng::substream(rng::derive_seed(cfg.seed, "sim/warm"), j as u64);
                let own = std::slice::from_ref(&start);
                let (_, step) = clustered_model_update(own, &shard, cfg.train.eta_init, cfg.train.server_iters, &mut r)?;
                Ok(start + step)
            }
        })
        .collect()
}

fn reference_state(cfg: &RunConfig, data: &Dataset, models: Vec<DVector<f64>>, round: usize) -> SimResult<ClusterState> {
    let seed = rng::derive_index(rng::derive_seed(cfg.seed, "sim/server"), round as u64);
    Ok(server_init(&data.root, models, cfg.train.eta, cfg.train.eta_init, cfg.train.server_iters, cfg.dims.m, seed)?)
}

/// Server references for key generation; an inactive cluster gets a
/// placeholder direction (its updates are scaled by a zero norm anyway).
fn key_references(state: &ClusterState) -> Vec<DVector<f64>> {
    state
        .server_updates
        .iter()
        .map(|g| {
            if g.norm() > 0.0 {
                g.clone()
            } else {
                DVector::from_fn(g.len(), |i, _| if i == 0 { 1.0 } else { 0.0 })
            }
        })
        .collect()
}

struct Kdc {
    km: KeyMaterial,
    plan: Option<LayerPlan>,
}

impl Kdc {
    fn keys(&self) -> Keys<'_> {
        match &self.plan {
            Some(p) => Keys::Layered(&self.km, p),
            None => Keys::Base(&self.km),
        }
    }

    fn issued_bytes(&self) -> SimResult<usize> {
        let keys = self.keys();
        let mut total = 0;
        for i in 0..self.km.dims().n {
            total += wire::write_encode_key(keys.encode_key(i))?.len();
        }
        if let Some(p) = &self.plan {
            total += wire::write_transform_keys(p, self.km.round())?.len();
        }
        Ok(total)
    }
}

fn build_kdc(cfg: &RunConfig, state: &ClusterState, previous: Option<&Kdc>, round: usize) -> SimResult<Kdc> {
    let dims = cfg.protocol_dims()?;
    let seed = rng::derive_index(rng::derive_seed(cfg.seed, "sim/kdc"), round as u64);
    let km = match previous {
        Some(prev) if !cfg.train.refresh_server_update => refresh_round(&prev.km, seed)?,
        _ => init_keys_with(&dims, &key_references(state), cfg.dims.normalizer.into(), seed)?,
    };
    let plan = if dims.layers.len() > 1 || dims.layers[0] != dims.n {
        Some(plan_layers(&km, &dims.layers, rng::derive_seed(seed, "layers"))?)
    } else {
        None
    };
    Ok(Kdc { km, plan })
}

fn fedavg(state: &mut ClusterState, updates: &[ClientUpdate]) {
    let m = state.m();
    let mut sums = vec![DVector::zeros(state.dim()); m];
    let mut counts = vec![0usize; m];
    for u in updates {
        sums[u.cluster] += &u.gradient;
        counts[u.cluster] += 1;
    }
    for j in 0..m {
        if counts[j] > 0 {
            let step = &sums[j] * (state.eta / counts[j] as f64);
            state.models[j] += step;
        }
    }
}

fn onehot_row(cluster: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(1, m, |_, j| if j == cluster { 1.0 } else { 0.0 })
}

/// Client side of a secure round: encode, then serialize.
fn client_submit(u: &ClientUpdate, keys: &Keys<'_>, km: &KeyMaterial, i: usize) -> SimResult<Vec<u8>> {
    let ek = keys.encode_key(i);
    let d = match client_encode(&u.gradient, u.cluster, ek, km.a(), km.dims()) {
        Ok(d) => d,
        Err(CoreError::ZeroNorm(_)) => EncodedGradient::null(ek),
        Err(e) => return Err(e.into()),
    };
    Ok(wire::write_gradient(&d)?)
}

/// Runs `cfg.train.rounds` rounds. With `attack` false the adversary set is
/// empty (the attack-free twin). `na` enables AIR.
pub fn run(cfg: &RunConfig, mode: Mode, attack: bool, na: Option<f64>) -> SimResult<RunOutput> {
    cfg.validate()?;
    let data = gen_dataset(cfg)?;
    let (n, m) = (cfg.dims.n, cfg.dims.m);
    let init = initial_models(cfg, &data)?;
    let initial_error = matched_errors(&init, &data.truths);
    let mut state = reference_state(cfg, &data, init, 0)?;
    let adversary = if attack && cfg.attack.kind != AttackKind::None {
        pick_adversaries(n, cfg.adversary_count(), cfg.seed)
    } else {
        vec![false; n]
    };
    let attackers = adversary.iter().filter(|&&a| a).count();
    let denom = match cfg.dims.normalizer {
        NormalizerKind::PerCluster => Denominator::PerCluster,
        NormalizerKind::Global => Denominator::Global,
    };

    let mut out = RunOutput {
        mode,
        metrics: Vec::new(),
        times: Vec::new(),
        weights: Vec::new(),
        clusters: Vec::new(),
        adversary: adversary.clone(),
        models: Vec::new(),
        initial_error,
        errors: Vec::new(),
    };
    let mut successful = vec![false; n];
    let mut ma = f64::NEG_INFINITY;
    let mut kdc: Option<Kdc> = None;

    for round in 0..cfg.train.rounds {
        let mut times = PhaseTimes { round, ..PhaseTimes::default() };
        state.eta = cfg.train.eta / (1.0 + cfg.train.eta_decay * round as f64);
        let t0 = Instant::now();
        let round_seed = rng::derive_index(rng::derive_seed(cfg.seed, "sim/round"), round as u64);
        let honest: Vec<ClientUpdate> = data
            .clients
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let mut r = rng::substream(round_seed, i as u64);
                let (j, g) = clustered_model_update(&state.models, task, cfg.train.eta, task.local_iters, &mut r)?;
                Ok(ClientUpdate::new(j, g))
            })
            .collect::<SimResult<_>>()?;
        let benign_means = benign_means(&honest, &adversary, m, state.dim());
        let updates: Vec<ClientUpdate> = honest
            .into_iter()
            .enumerate()
            .map(|(i, u)| {
                if !adversary[i] {
                    return Ok(u);
                }
                let mean = benign_means[u.cluster].as_ref();
                let ctx = AttackContext { models: &state.models, task: &data.clients[i], eta: cfg.train.eta, benign_mean: mean };
                let mut r = rng::substream(round_seed, (n + i) as u64);
                inject_attack(u, &cfg.attack, &ctx, &mut r)
            })
            .collect::<SimResult<_>>()?;
        times.local_train = t0.elapsed().as_secs_f64();

        let weights: Vec<f64> = updates.iter().map(|u| cosine_weight(&u.gradient, &state.server_updates[u.cluster])).collect();
        mark_successful(&weights, &adversary, &mut successful);

        let model_refs: Vec<_> = state.models.iter().map(|v| DMatrix::from_row_slice(1, v.len(), v.as_slice())).collect();
        let broadcast = wire::encode(round as u32, wire::KDC_SENDER - 1, PayloadKind::Gradient, &model_refs.iter().collect::<Vec<_>>())?.len();
        let bytes_server = broadcast * n;
        let mut bytes_kdc = 0;
        let bytes_client;
        let mut skipped = 0;

        match mode {
            Mode::Plain | Mode::FedAvg => {
                let t = Instant::now();
                let mut total = 0;
                for (i, u) in updates.iter().enumerate() {
                    let g = DMatrix::from_row_slice(1, u.gradient.len(), u.gradient.as_slice());
                    total += wire::encode(round as u32, i as u32, PayloadKind::Gradient, &[&g, &onehot_row(u.cluster, m)])?.len();
                }
                bytes_client = total / n;
                times.encode = t.elapsed().as_secs_f64();
                let t = Instant::now();
                if mode == Mode::Plain {
                    let agg = aggregate_plain(&state, &updates, denom)?;
                    skipped = agg.skipped.len();
                    apply_aggregate(&mut state, &agg.per_cluster);
                } else {
                    fedavg(&mut state, &updates);
                }
                times.aggregate = t.elapsed().as_secs_f64();
            }
            Mode::Secure => {
                let t = Instant::now();
                let next = build_kdc(cfg, &state, kdc.as_ref(), round)?;
                bytes_kdc = next.issued_bytes()?;
                kdc = Some(next);
                times.keygen = t.elapsed().as_secs_f64();
                let k = kdc.as_ref().expect("kdc built above");
                let keys = k.keys();

                let t = Instant::now();
                let wire_msgs: Vec<Vec<u8>> = updates
                    .par_iter()
                    .enumerate()
                    .map(|(i, u)| client_submit(u, &keys, &k.km, i))
                    .collect::<SimResult<_>>()?;
                bytes_client = wire_msgs.iter().map(Vec::len).sum::<usize>() / n;
                times.encode = t.elapsed().as_secs_f64();

                let t = Instant::now();
                let mut deltas = wire_msgs.iter().map(|b| wire::read_gradient(b)).collect::<Result<Vec<_>, _>>()?;
                if round == cfg.faults.dropout_round && !cfg.faults.dropout.is_empty() {
                    deltas.retain(|d| !cfg.faults.dropout.contains(&d.owner));
                }
                let mut outcome = keys.aggregate(&deltas)?;
                if let RoundStatus::NeedsResend(bad) = &outcome.status {
                    let verdicts = outcome.verdicts.clone();
                    for &i in bad {
                        deltas[i] = EncodedGradient::null(keys.encode_key(i));
                    }
                    outcome = keys.aggregate(&deltas)?;
                    outcome.verdicts = verdicts;
                }
                skipped = outcome.updates.iter().filter(|u| u.is_none()).count();
                update_models(&mut state, &outcome);
                times.aggregate = t.elapsed().as_secs_f64();
            }
        }

        if cfg.train.refresh_server_update {
            let fresh = reference_state(cfg, &data, state.models.clone(), round + 1)?;
            state.server_updates = fresh.server_updates;
            state.norms = fresh.norms;
        }

        let eval = evaluate(&state, &data.tests);
        let fa = eval.iter().map(|e| e.1).sum::<f64>() / eval.len() as f64;
        ma = ma.max(fa);
        let errors = matched_errors(&state.models, &data.truths);
        out.metrics.push(MetricsRow {
            round,
            test_loss: eval.iter().map(|e| e.0).collect(),
            test_acc: eval.iter().map(|e| e.1).collect(),
            param_error: errors.clone(),
            fa,
            ma,
            asr: asr(successful.iter().filter(|&&s| s).count(), attackers),
            air: na.map(|na| air(fa, ma, na)).unwrap_or(f64::NAN),
            bytes_client,
            bytes_server,
            bytes_kdc,
            skipped,
        });
        out.errors.push(errors);
        out.weights.push(weights);
        out.clusters.push(updates.iter().map(|u| u.cluster).collect());
        out.times.push(times);
    }
    out.models = state.models;
    Ok(out)
}

fn benign_means(updates: &[ClientUpdate], adversary: &[bool], m: usize, l: usize) -> Vec<Option<DVector<f64>>> {
    let mut sums = vec![DVector::zeros(l); m];
    let mut counts = vec![0usize; m];
    for (u, &a) in updates.iter().zip(adversary) {
        if !a {
            sums[u.cluster] += &u.gradient;
            counts[u.cluster] += 1;
        }
    }
    sums.into_iter().zip(counts).map(|(s, c)| (c > 0).then(|| s / c as f64)).collect()
}

/// A secure run whose dropout aborts reports the protocol's abort error.
pub fn is_abort(e: &SimError) -> bool {
    matches!(e, SimError::Protocol(CoreError::RoundAborted(_)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.dims.n = 4;
        c.dims.m = 2;
        c.dims.l = 4;
        c.train.rounds = 3;
        c.data.samples_per_client = 32;
        c
    }

    #[test]
    fn secure_tracks_plain() {
        let cfg = small();
        let plain = run(&cfg, Mode::Plain, false, None).unwrap();
        let secure = run(&cfg, Mode::Secure, false, None).unwrap();
        for (a, b) in plain.errors.iter().flatten().zip(secure.errors.iter().flatten()) {
            assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
        }
        assert!(secure.metrics[0].bytes_client > plain.metrics[0].bytes_client);
        assert!(secure.metrics[0].bytes_kdc > 0);
    }

    #[test]
    fn dropout_aborts() {
        let mut cfg = small();
        cfg.faults.dropout = vec![1];
        let err = run(&cfg, Mode::Secure, false, None).unwrap_err();
        assert!(is_abort(&err), "{err}");
    }

    #[test]
    fn layered_and_segmented_configs_run() {
        let mut cfg = small();
        cfg.dims.layers = vec![2, 2];
        cfg.dims.segments = 2;
        let plain = run(&cfg, Mode::Plain, false, None).unwrap();
        let secure = run(&cfg, Mode::Secure, false, None).unwrap();
        for (a, b) in plain.models.iter().zip(&secure.models) {
            assert!((a - b).norm() <= 1e-6 * a.norm().max(1.0));
        }
    }

    #[test]
    fn deterministic() {
        let mut cfg = small();
        cfg.attack.kind = AttackKind::SignFlip;
        cfg.attack.fraction = 0.25;
        let a = run(&cfg, Mode::Plain, true, None).unwrap();
        let b = run(&cfg, Mode::Plain, true, None).unwrap();
        assert_eq!(format!("{:?}", a.metrics), format!("{:?}", b.metrics));
        assert_eq!(a.adversary.iter().filter(|&&x| x).count(), 1);
    }

    #[test]
    fn warm_start_moves_each_model_toward_its_shard() {
        let mut cfg = small();
        cfg.init.kind = InitKind::Warm;
        cfg.init.scale = 0.0;
        let data = gen_dataset(&cfg).unwrap();
        let init = initial_models(&cfg, &data).unwrap();
        // Root shards follow the cluster layout, so model j is nearer truth j
        // than the origin is.
        for (j, theta) in init.iter().enumerate() {
            assert!((theta - &data.truths[j]).norm() < data.truths[j].norm());
        }
        assert!((&init[0] - &init[1]).norm() > 0.0);
        assert_eq!(init, initial_models(&cfg, &data).unwrap());
    }
}
