//! Experiments shared by the CLI and the acceptance suite.
//!
//! Secure aggregates are compared with the plaintext rule on random client
//! updates; the robustness and contraction fixtures run the full simulation.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use ebscfl_core::kdc::{init_keys_with, key_size_formula, plan_layers, KeyMaterial, LayerPlan, Normalizer, ProtocolDims};
use ebscfl_core::moma;
use ebscfl_core::protocol::{adversary, client_encode, secure_round, server_verify, AggregationOutcome, EncodedGradient, Keys, Verdict};
use ebscfl_core::rfca::{aggregate_plain, ClientUpdate, ClusterState, Denominator};
use ebscfl_core::rng::{self, Rng};
use ebscfl_core::vomca::{self, Ciphertext, VomcaKeys};
use ebscfl_core::wire;

use crate::config::{AttackKind, InitKind, RunConfig};
use crate::error::{SimError, SimResult};
use crate::sim::{run, Mode};

fn gaussian(l: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(l, |_, _| StandardNormal.sample(rng))
}

/// Random server references and client updates. Gradient norms spread over
/// several orders of magnitude.
#[derive(Debug, Clone)]
pub struct Workload {
    pub g0: Vec<DVector<f64>>,
    pub updates: Vec<ClientUpdate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    /// Isotropic client updates: cosines spread over `(-1, 1)`, so a
    /// cluster's weight sum can be arbitrarily small.
    Isotropic,
    /// Updates with a clear stance on their reference, see
    /// [`Workload::aligned`].
    Aligned,
}

/// Share of aligned updates that oppose their reference (weight zero).
pub const ALIGNED_DISSENT: f64 = 0.25;

impl Workload {
    pub fn new(kind: WorkloadKind, n: usize, m: usize, l: usize, seed: u64) -> Self {
        match kind {
            WorkloadKind::Isotropic => Self::random(n, m, l, seed),
            WorkloadKind::Aligned => Self::aligned(n, m, l, seed),
        }
    }

    /// Each update is `a * g0_hat + b * noise / sqrt(l)` with `a, b` in
    /// `[0.2, 1)` and the noise orthogonal to `g0_hat`, negated with probability [`ALIGNED_DISSENT`], then scaled
    /// by `10^U(-2, 2)`.
    pub fn aligned(n: usize, m: usize, l: usize, seed: u64) -> Self {
        let mut rng = rng::substream(rng::derive_seed(seed, "experiments/aligned"), 0);
        let g0: Vec<DVector<f64>> = (0..m).map(|_| gaussian(l, &mut rng)).collect();
        let updates = (0..n)
            .map(|_| {
                let cluster = rng.random_range(0..m);
                let a = rng.random_range(0.2..1.0);
                let b = rng.random_range(0.2..1.0);
                let sign = if rng.random_bool(ALIGNED_DISSENT) { -1.0 } else { 1.0 };
                let scale = 10f64.powf(rng.random_range(-2.0..2.0));
                let hat = g0[cluster].normalize();
                let mut noise = gaussian(l, &mut rng);
                noise -= &hat * noise.dot(&hat);
                let g = hat * a + noise * (b / (l as f64).sqrt());
                ClientUpdate::new(cluster, g * (sign * scale))
            })
            .collect();
        Self { g0, updates }
    }

    pub fn random(n: usize, m: usize, l: usize, seed: u64) -> Self {
        let mut rng = rng::substream(rng::derive_seed(seed, "experiments/workload"), 0);
        let g0 = (0..m).map(|_| gaussian(l, &mut rng)).collect();
        let updates = (0..n)
            .map(|_| {
                let cluster = rng.random_range(0..m);
                let scale = 10f64.powf(rng.random_range(-2.0..2.0));
                ClientUpdate::new(cluster, gaussian(l, &mut rng) * scale)
            })
            .collect();
        Self { g0, updates }
    }

    pub fn state(&self) -> SimResult<ClusterState> {
        let l = self.g0[0].len();
        Ok(ClusterState::new(vec![DVector::zeros(l); self.g0.len()], self.g0.clone(), 1.0)?)
    }

    /// Plaintext per-cluster aggregates; skipped clusters are zero.
    pub fn oracle(&self) -> SimResult<Vec<DVector<f64>>> {
        Ok(aggregate_plain(&self.state()?, &self.updates, Denominator::PerCluster)?.per_cluster)
    }
}

/// Decoded secure aggregates rescaled by `|g0_j|`, plus the largest
/// `| |delta_i|^2 - 3 |` among the encoded submissions.
pub struct SecureResult {
    pub updates: Vec<DVector<f64>>,
    pub outcome: AggregationOutcome,
    pub norm_dev: f64,
}

pub fn secure_aggregate(work: &Workload, dims: &ProtocolDims, seed: u64) -> SimResult<SecureResult> {
    let km = init_keys_with(dims, &work.g0, Normalizer::PerCluster, seed)?;
    let plan = layer_plan(&km, dims, seed)?;
    let keys = match &plan {
        Some(p) => Keys::Layered(&km, p),
        None => Keys::Base(&km),
    };
    let mut norm_dev: f64 = 0.0;
    let outcome = secure_round(&work.updates, &keys, &mut |_, d| {
        norm_dev = norm_dev.max((d.norm_sq() - 3.0).abs());
        d
    })?;
    let updates = outcome
        .updates
        .iter()
        .zip(km.g0_norms())
        .map(|(u, &norm)| u.as_ref().map(|u| u * norm).unwrap_or_else(|| DVector::zeros(dims.l)))
        .collect();
    Ok(SecureResult { updates, outcome, norm_dev })
}

fn layer_plan(km: &KeyMaterial, dims: &ProtocolDims, seed: u64) -> SimResult<Option<LayerPlan>> {
    if dims.layers.len() == 1 && dims.layers[0] == dims.n {
        return Ok(None);
    }
    Ok(Some(plan_layers(km, &dims.layers, rng::derive_seed(seed, "experiments/layers"))?))
}

/// Largest per-cluster relative residual. A cluster whose reference is zero
/// is measured against the largest reference of the round.
pub fn relative_residual(got: &[DVector<f64>], want: &[DVector<f64>]) -> f64 {
    let scale = want.iter().map(|w| w.norm()).fold(f64::MIN_POSITIVE, f64::max);
    got.iter()
        .zip(want)
        .map(|(g, w)| {
            let reference = if w.norm() > 0.0 { w.norm() } else { scale };
            (g - w).norm() / reference
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceRow {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub seed: u64,
    pub residual: f64,
    pub norm_dev: f64,
    pub all_accepted: bool,
}

pub fn equivalence_case(kind: WorkloadKind, n: usize, m: usize, l: usize, seed: u64) -> SimResult<EquivalenceRow> {
    let dims = ProtocolDims::new(n, m, l)?;
    let work = Workload::new(kind, n, m, l, seed);
    let secure = secure_aggregate(&work, &dims, seed)?;
    Ok(EquivalenceRow {
        n,
        m,
        l,
        seed,
        residual: relative_residual(&secure.updates, &work.oracle()?),
        norm_dev: secure.norm_dev,
        all_accepted: secure.outcome.verdicts.iter().all(|v| v.accepted()),
    })
}

pub const KEYSTONE_N: [usize; 3] = [2, 4, 8];
pub const KEYSTONE_M: [usize; 3] = [1, 2, 3];
pub const KEYSTONE_L: [usize; 3] = [4, 8, 16];

pub fn keystone_grid(kind: WorkloadKind, seeds: u64) -> SimResult<Vec<EquivalenceRow>> {
    let mut rows = Vec::new();
    for n in KEYSTONE_N {
        for m in KEYSTONE_M {
            for l in KEYSTONE_L {
                for seed in 0..seeds {
                    rows.push(equivalence_case(kind, n, m, l, seed)?);
                }
            }
        }
    }
    Ok(rows)
}

/// Skip-normalization submissions (raw norm away from one) rejected out of
/// the number tried.
pub fn skip_normalization_trials(n: usize, m: usize, l: usize, seed: u64) -> SimResult<(usize, usize)> {
    let dims = ProtocolDims::new(n, m, l)?;
    let work = Workload::random(n, m, l, seed);
    let km = init_keys_with(&dims, &work.g0, Normalizer::PerCluster, seed)?;
    let mut rng = rng::substream(rng::derive_seed(seed, "experiments/skip-norm"), 0);
    let mut rejected = 0;
    for (i, u) in work.updates.iter().enumerate() {
        let norm = if rng.random::<bool>() { rng.random_range(1.01..10.0) } else { rng.random_range(0.05..0.99) };
        let raw = u.gradient.normalize() * norm;
        let d = adversary::skip_normalization(&raw, u.cluster, km.encode_key(i), km.a(), &dims);
        if !server_verify(&d, &km).accepted() {
            rejected += 1;
        }
    }
    Ok((rejected, n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTest {
    pub clients: usize,
    pub residual: f64,
    pub norm_dev: f64,
    pub honest_accepted: usize,
    /// Submissions with raw norm away from one, refused by the server.
    pub skip_rejected: usize,
    /// Honest submissions perturbed by `1e-3`, refused by the server.
    pub tamper_rejected: usize,
}

impl SelfTest {
    pub fn passed(&self) -> bool {
        let n = self.clients;
        self.residual <= 1e-6 && self.norm_dev <= 1e-6 && [self.honest_accepted, self.skip_rejected, self.tamper_rejected] == [n; 3]
    }
}

/// Key generation followed by one aligned round through the secure path,
/// one skip-normalization and one tampered submission per client.
pub fn selftest(dims: &ProtocolDims, seed: u64) -> SimResult<SelfTest> {
    let (n, m, l) = (dims.n, dims.m, dims.l);
    let work = Workload::aligned(n, m, l, seed);
    let secure = secure_aggregate(&work, dims, seed)?;
    let km = init_keys_with(dims, &work.g0, Normalizer::PerCluster, seed)?;
    let plan = layer_plan(&km, dims, seed)?;
    let keys = match &plan {
        Some(p) => Keys::Layered(&km, p),
        None => Keys::Base(&km),
    };
    let mut rng = rng::substream(rng::derive_seed(seed, "experiments/selftest"), 0);
    let honest = work
        .updates
        .iter()
        .enumerate()
        .map(|(i, u)| client_encode(&u.gradient, u.cluster, keys.encode_key(i), km.a(), dims))
        .collect::<Result<Vec<_>, _>>()?;
    // Each forged submission replaces one honest slot; the verdict of that
    // slot is read from a full aggregation so layered cohorts check it too.
    let refused = |i: usize, forged: EncodedGradient| -> SimResult<bool> {
        let mut round = honest.clone();
        round[i] = forged;
        Ok(!keys.aggregate(&round)?.verdicts[i].accepted())
    };
    let (mut skip_rejected, mut tamper_rejected) = (0, 0);
    for (i, u) in work.updates.iter().enumerate() {
        let raw = u.gradient.normalize() * rng.random_range(1.5..4.0);
        let skipped = adversary::skip_normalization(&raw, u.cluster, keys.encode_key(i), km.a(), dims);
        skip_rejected += usize::from(refused(i, skipped)?);
        let d = &honest[i];
        let noise: Vec<DMatrix<f64>> = d.deltas.iter().map(|row| moma::gaussian(1, row.ncols(), &mut rng)).collect();
        let total = noise.iter().map(|e| e.norm_squared()).sum::<f64>().sqrt();
        let noise: Vec<_> = noise.into_iter().map(|e| e * (1e-3 / total)).collect();
        tamper_rejected += usize::from(refused(i, adversary::additive(d, &noise))?);
    }
    Ok(SelfTest {
        clients: n,
        residual: relative_residual(&secure.updates, &work.oracle()?),
        norm_dev: secure.norm_dev,
        honest_accepted: secure.outcome.verdicts.iter().filter(|v| v.accepted()).count(),
        skip_rejected,
        tamper_rejected,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TamperReport {
    pub honest: usize,
    pub honest_accepted: usize,
    pub tampered: usize,
    pub false_accepts: usize,
}

/// Honest VOMCA ciphertexts plus `per_key` additive tamperings each, with
/// Frobenius magnitude log-uniform in `[1e-3, 1e2]`.
pub fn vomca_tampering(keysets: u64, per_key: usize) -> SimResult<TamperReport> {
    let mut rep = TamperReport::default();
    for k in 0..keysets {
        let n = 2 + (k as usize % 7);
        let r = 1 + (k as usize % 2);
        let keys = VomcaKeys::keygen(n, r, 2 * n * r, k)?;
        let mut rng = rng::substream(rng::derive_seed(k, "experiments/tamper"), 0);
        for t in 0..per_key {
            let i = t % n;
            let x = moma::gaussian(r, r, &mut rng);
            let ct = vomca::encode(&x, i, &keys)?;
            rep.honest += 1;
            rep.honest_accepted += usize::from(vomca::verify(&ct, &keys));
            let noise = moma::gaussian(ct.value.nrows(), ct.value.ncols(), &mut rng);
            let magnitude = 10f64.powf(rng.random_range(-3.0..2.0));
            let forged = Ciphertext { value: &ct.value + noise.normalize() * magnitude, owner: i };
            rep.tampered += 1;
            rep.false_accepts += usize::from(vomca::verify(&forged, &keys));
        }
    }
    Ok(rep)
}

/// The same tampering against encoded gradients and the server's check.
pub fn protocol_tampering(cases: u64, per_case: usize) -> SimResult<TamperReport> {
    let mut rep = TamperReport::default();
    for seed in 0..cases {
        let (n, m, l) = (2 + (seed as usize % 3) * 2, 1 + (seed as usize % 3), 4);
        let dims = ProtocolDims::new(n, m, l)?;
        let work = Workload::random(n, m, l, seed);
        let km = init_keys_with(&dims, &work.g0, Normalizer::PerCluster, seed)?;
        let mut rng = rng::substream(rng::derive_seed(seed, "experiments/tamper-protocol"), 0);
        for t in 0..per_case {
            let i = t % n;
            let u = &work.updates[i];
            let d = client_encode(&u.gradient, u.cluster, km.encode_key(i), km.a(), &dims)?;
            rep.honest += 1;
            rep.honest_accepted += usize::from(server_verify(&d, &km) == Verdict::Accepted);
            let magnitude = 10f64.powf(rng.random_range(-3.0..2.0));
            let noise: Vec<DMatrix<f64>> = d
                .deltas
                .iter()
                .map(|row| moma::gaussian(1, row.ncols(), &mut rng))
                .collect();
            let total = noise.iter().map(|e| e.norm_squared()).sum::<f64>().sqrt();
            let noise: Vec<_> = noise.into_iter().map(|e| e * (magnitude / total)).collect();
            let forged = adversary::additive(&d, &noise);
            rep.tampered += 1;
            rep.false_accepts += usize::from(server_verify(&forged, &km).accepted());
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionRow {
    pub label: String,
    pub n: usize,
    pub seed: u64,
    pub residual: f64,
}

/// Segmented (`s` in 1, 2, 4) and layered (`xi` in {n}, {2,2}, {2,2,2})
/// aggregates against the unsegmented single-group path on the same
/// updates.
pub fn compression_cases(seeds: u64) -> SimResult<Vec<CompressionRow>> {
    let (m, l) = (2, 8);
    let mut rows = Vec::new();
    for seed in 0..seeds {
        for (n, variants) in [
            (4usize, vec![("s=1", 1usize, vec![]), ("s=2", 2, vec![]), ("s=4", 4, vec![]), ("xi={n}", 1, vec![4]), ("xi={2,2}", 1, vec![2, 2])]),
            (8, vec![("xi={n}", 1, vec![8]), ("xi={2,2,2}", 1, vec![2, 2, 2]), ("s=2,xi={2,2,2}", 2, vec![2, 2, 2])]),
        ] {
            let work = Workload::aligned(n, m, l, seed);
            let base = secure_aggregate(&work, &ProtocolDims::new(n, m, l)?, seed)?.updates;
            for (label, s, xi) in variants {
                let mut dims = ProtocolDims::segmented(n, m, l, s)?;
                if !xi.is_empty() {
                    dims = dims.with_layers(xi)?;
                }
                let got = secure_aggregate(&work, &dims, seed.wrapping_add(1000))?.updates;
                rows.push(CompressionRow { label: label.into(), n, seed, residual: relative_residual(&got, &base) });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySizeRow {
    pub n: usize,
    pub xi: Vec<usize>,
    pub r: usize,
    pub serialized_entries: usize,
    pub formula: usize,
}

pub fn key_size_cases() -> SimResult<Vec<KeySizeRow>> {
    let mut rows = Vec::new();
    for (n, m, l, s, xi) in [
        (4usize, 2usize, 4usize, 1usize, vec![2usize, 2]),
        (8, 2, 4, 1, vec![2, 2, 2]),
        (4, 1, 8, 2, vec![4]),
        (6, 1, 4, 1, vec![1, 3, 2]),
        (8, 1, 8, 4, vec![1, 8]),
    ] {
        let dims = ProtocolDims::segmented(n, m, l, s)?;
        let work = Workload::random(n, m, l, 5);
        let km = init_keys_with(&dims, &work.g0, Normalizer::PerCluster, 5)?;
        let plan = plan_layers(&km, &xi, 9)?;
        let bytes = wire::write_transform_keys(&plan, 0)?;
        rows.push(KeySizeRow {
            n,
            r: dims.r(),
            serialized_entries: wire::payload_entries(&bytes)?,
            formula: key_size_formula(dims.r(), &xi),
            xi,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub s: usize,
    pub t: usize,
    /// Serialized upload of one client.
    pub bytes_client: usize,
    /// Serialized encode key downloaded by one client.
    pub bytes_key: usize,
    /// Median seconds to encode one client's gradient.
    pub encode_secs: f64,
    pub keygen_secs: f64,
    pub aggregate_secs: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// One bench point with segment length `t` and the grouping
/// `[1, n]` (single-client first stage).
pub fn bench_point(n: usize, m: usize, l: usize, t: usize, reps: usize, seed: u64) -> SimResult<BenchRow> {
    if l % t != 0 {
        return Err(SimError::Config(format!("bench needs t | l, got l={l} t={t}")));
    }
    let s = l / t;
    let dims = ProtocolDims::with_segment_len(n, m, l, s, t)?.with_layers(ebscfl_core::kdc::default_layers(n))?;
    let work = Workload::random(n, m, l, seed);

    let start = Instant::now();
    let km = init_keys_with(&dims, &work.g0, Normalizer::PerCluster, seed)?;
    let plan = plan_layers(&km, &dims.layers, rng::derive_seed(seed, "bench/layers"))?;
    let keygen_secs = start.elapsed().as_secs_f64();
    let keys = Keys::Layered(&km, &plan);

    let mut samples = Vec::with_capacity(reps);
    let mut deltas = Vec::new();
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        deltas = work
            .updates
            .iter()
            .enumerate()
            .map(|(i, u)| client_encode(&u.gradient, u.cluster, keys.encode_key(i), km.a(), &dims))
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(start.elapsed().as_secs_f64() / n as f64);
    }
    let bytes_client = wire::write_gradient(&deltas[0])?.len();
    let bytes_key = wire::write_encode_key(keys.encode_key(0))?.len();

    let start = Instant::now();
    let outcome = keys.aggregate(&deltas)?;
    let aggregate_secs = start.elapsed().as_secs_f64();
    if !outcome.completed() {
        return Err(SimError::Acceptance("bench round refused an honest submission".into()));
    }
    Ok(BenchRow { n, m, l, s, t, bytes_client, bytes_key, encode_secs: median(samples), keygen_secs, aggregate_secs })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Bench points: per-client bytes at two client counts, then a sweep over
/// `l` at `m = 1`. Each part has its own segment length.
pub struct BenchGrid {
    pub n_pair: [usize; 2],
    /// `(m, l, t)` of the client-count pair.
    pub n_pair_dims: (usize, usize, usize),
    pub l_sweep: Vec<usize>,
    pub l_sweep_n: usize,
    pub l_sweep_t: usize,
    pub reps: usize,
}

impl BenchGrid {
    pub fn small() -> Self {
        Self { n_pair: [8, 32], n_pair_dims: (2, 32, 8), l_sweep: vec![256, 512, 1024, 2048], l_sweep_n: 4, l_sweep_t: 16, reps: 9 }
    }

    pub fn full() -> Self {
        Self {
            n_pair: [8, 32],
            n_pair_dims: (2, 64, 16),
            l_sweep: vec![64, 128, 256, 512, 1024, 2048, 4096],
            l_sweep_n: 4,
            l_sweep_t: 16,
            reps: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Client bytes at the larger `n` over the smaller.
    pub bytes_n_ratio: f64,
    pub bytes_l_slope: f64,
    pub encode_l_slope: f64,
}

pub fn bench(grid: &BenchGrid, seed: u64) -> SimResult<BenchReport> {
    let (m, l, t) = grid.n_pair_dims;
    let mut rows = Vec::new();
    for n in grid.n_pair {
        rows.push(bench_point(n, m, l, t, grid.reps, seed)?);
    }
    let bytes_n_ratio = rows[1].bytes_client as f64 / rows[0].bytes_client as f64;
    let mut sweep = Vec::new();
    for &l in &grid.l_sweep {
        sweep.push(bench_point(grid.l_sweep_n, 1, l, grid.l_sweep_t, grid.reps, seed)?);
    }
    let ls: Vec<f64> = sweep.iter().map(|r| r.l as f64).collect();
    let bytes: Vec<f64> = sweep.iter().map(|r| r.bytes_client as f64).collect();
    let encode: Vec<f64> = sweep.iter().map(|r| r.encode_secs).collect();
    rows.extend(sweep);
    Ok(BenchReport { bytes_l_slope: loglog_slope(&ls, &bytes), encode_l_slope: loglog_slope(&ls, &encode), bytes_n_ratio, rows })
}

/// The synthetic two-cluster task used for the robustness checks: ten
/// clients, models warm-started on their root shards and the server
/// references fixed after initialization unless `refresh` is set.
pub fn robustness_config(seed: u64, kind: AttackKind, refresh: bool) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.dims.n = 10;
    c.dims.m = 2;
    c.dims.l = 8;
    c.train.rounds = 30;
    c.train.refresh_server_update = refresh;
    c.init.kind = InitKind::Warm;
    c.init.scale = 0.1;
    c.attack.kind = kind;
    c.attack.fraction = 0.4;
    c
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobustnessReport {
    pub seeds: u64,
    /// Mean final parameter errors over the seeds.
    pub ebs_twin: f64,
    pub ebs_attacked: f64,
    pub fedavg_twin: f64,
    pub fedavg_attacked: f64,
    /// Adversary-rounds with zero weight under label flipping.
    pub lf_zero: usize,
    pub lf_total: usize,
}

impl RobustnessReport {
    pub fn ebs_ratio(&self) -> f64 {
        self.ebs_attacked / self.ebs_twin
    }

    pub fn fedavg_ratio(&self) -> f64 {
        self.fedavg_attacked / self.fedavg_twin
    }

    pub fn lf_zero_fraction(&self) -> f64 {
        self.lf_zero as f64 / self.lf_total as f64
    }
}

/// Sign-flip runs of the secure protocol and of FedAvg against their
/// attack-free twins, plus label-flip weight traces.
pub fn robustness(seeds: u64, ebs_mode: Mode, refresh: bool) -> SimResult<RobustnessReport> {
    let mut rep = RobustnessReport { seeds, ..Default::default() };
    let k = seeds as f64;
    for seed in 0..seeds {
        let cfg = robustness_config(seed, AttackKind::SignFlip, refresh);
        rep.ebs_twin += run(&cfg, ebs_mode, false, None)?.final_error() / k;
        rep.ebs_attacked += run(&cfg, ebs_mode, true, None)?.final_error() / k;
        rep.fedavg_twin += run(&cfg, Mode::FedAvg, false, None)?.final_error() / k;
        rep.fedavg_attacked += run(&cfg, Mode::FedAvg, true, None)?.final_error() / k;

        let lf = run(&robustness_config(seed, AttackKind::LabelFlip, refresh), ebs_mode, true, None)?;
        for w in &lf.weights {
            for (i, &adv) in lf.adversary.iter().enumerate() {
                if adv {
                    rep.lf_total += 1;
                    rep.lf_zero += usize::from(w[i] == 0.0);
                }
            }
        }
    }
    Ok(rep)
}

/// Strongly convex two-cluster regression started inside the ball
/// `|theta_j - theta_j*| <= (1/2 - alpha) (lambda / L) Delta`.
pub fn contraction_config(seed: u64, refresh: bool) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.dims.n = 10;
    c.dims.m = 2;
    c.dims.l = 8;
    c.train.rounds = 30;
    c.train.refresh_server_update = refresh;
    c.init.kind = InitKind::Ball;
    c.init.scale = 0.5;
    c
}

pub const CONTRACTION_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContractionReport {
    /// Cluster-rounds that started inside the ball.
    pub eligible: usize,
    pub contracted: usize,
    /// Smallest ball radius over the seeds.
    pub min_radius: f64,
}

impl ContractionReport {
    pub fn fraction(&self) -> f64 {
        self.contracted as f64 / self.eligible as f64
    }
}

/// Ball radius of a dataset: `lambda / L` from the extreme eigenvalues of
/// the pooled feature covariance, `Delta` the smallest distance between
/// ground truths.
pub fn ball_radius(cfg: &RunConfig) -> SimResult<f64> {
    let data = crate::data::gen_dataset(cfg)?;
    let l = cfg.dims.l;
    let mut cov = DMatrix::<f64>::zeros(l, l);
    let mut rows = 0usize;
    for task in &data.clients {
        cov += task.features.transpose() * &task.features;
        rows += task.len();
    }
    cov /= rows as f64;
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let mut delta = f64::INFINITY;
    for a in 0..data.truths.len() {
        for b in a + 1..data.truths.len() {
            delta = delta.min((&data.truths[a] - &data.truths[b]).norm());
        }
    }
    Ok((0.5 - CONTRACTION_ALPHA) * (lo / hi) * delta)
}

pub fn contraction(seeds: u64, refresh: bool) -> SimResult<ContractionReport> {
    let mut rep = ContractionReport { min_radius: f64::INFINITY, ..Default::default() };
    for seed in 0..seeds {
        let cfg = contraction_config(seed, refresh);
        let radius = ball_radius(&cfg)?;
        rep.min_radius = rep.min_radius.min(radius);
        let out = run(&cfg, Mode::Plain, false, None)?;
        let mut prev = out.initial_error.clone();
        for errs in &out.errors {
            for (j, &e) in errs.iter().enumerate() {
                if prev[j] <= radius {
                    rep.eligible += 1;
                    rep.contracted += usize::from(e < prev[j]);
                }
            }
            prev = errs.clone();
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn residual_uses_round_scale_for_zero_reference() {
        let want = [DVector::from_element(2, 0.0), DVector::from_element(2, 2.0)];
        let got = [DVector::from_element(2, 1e-9), DVector::from_element(2, 2.0)];
        let r = relative_residual(&got, &want);
        assert!(r > 0.0 && r < 1e-9);
    }

    #[test]
    fn small_equivalence_case() {
        let row = equivalence_case(WorkloadKind::Aligned, 3, 2, 4, 1).unwrap();
        assert!(row.residual <= 1e-6, "{row:?}");
        assert!(row.norm_dev <= 1e-6);
        assert!(row.all_accepted);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
