//! Client and server halves of the secure clustered aggregation round.
//!
//! Server-side entry points take [`EncodedGradient`] values only; nothing a
//! server function receives carries a cluster index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kdc::{split_segments, Cohort, EncodeKey, KeyMaterial, LayerPlan, Normalizer, ProtocolDims};
use crate::moma::MomaFamily;
use crate::rfca::{ClientUpdate, ClusterState};
use crate::srfc;

pub const NORM_TARGET: f64 = 3.0;
pub const NORM_TOL: f64 = 1e-6;
pub const VK_TOL: f64 = 1e-8;
/// ReLU sums at or below this leave every model of the pass unchanged. The
/// decoded sum of an all-zero pass carries absolute noise of order 1e-9.
pub const MIN_WEIGHT_SUM: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Issuer {
    Client,
    /// Zero-gradient stand-in issued by the KDC for padding or for a client
    /// whose submission was refused.
    Kdc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGradient {
    /// One `1 x 3rg` row per segment.
    pub deltas: Vec<DMatrix<f64>>,
    pub owner: usize,
    pub round: u32,
    pub issuer: Issuer,
}

impl EncodedGradient {
    pub fn norm_sq(&self) -> f64 {
        self.deltas.iter().map(|d| d.norm_squared()).sum()
    }

    /// The masks alone, as issued by the KDC for an empty slot.
    pub fn null(ek: &EncodeKey) -> Self {
        Self { deltas: ek.ek1.clone(), owner: ek.owner, round: ek.round, issuer: Issuer::Kdc }
    }
}

/// `delta_k = (g_k / |g|) A_j ek0 + ek1_k` for every segment `k`.
pub fn client_encode(
    g: &DVector<f64>,
    cluster: usize,
    ek: &EncodeKey,
    a: &MomaFamily,
    dims: &ProtocolDims,
) -> Result<EncodedGradient> {
    if g.len() != dims.l {
        return Err(Error::ShapeMismatch { expected: format!("gradient of length {}", dims.l), got: format!("{}", g.len()) });
    }
    if cluster >= dims.m {
        return Err(Error::IndexOutOfRange { index: cluster, limit: dims.m });
    }
    let norm = g.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if norm == 0.0 {
        return Err(Error::ZeroNorm("gradient".into()));
    }
    Ok(embed(&(g / norm), cluster, ek, a, dims))
}

fn embed(v: &DVector<f64>, cluster: usize, ek: &EncodeKey, a: &MomaFamily, dims: &ProtocolDims) -> EncodedGradient {
    let deltas = split_segments(v, dims.s, dims.t)
        .iter()
        .zip(&ek.ek1)
        .map(|(seg, mask)| seg * a.block(cluster) * &ek.ek0 + mask)
        .collect();
    EncodedGradient { deltas, owner: ek.owner, round: ek.round, issuer: Issuer::Client }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Shape,
    VkCheck,
    NormCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn accepted(self) -> bool {
        self == Verdict::Accepted
    }
}

/// Checks a submission against the cohort's verification key, `local` being
/// the submitter's position inside the cohort.
pub fn verify_in_cohort(delta: &EncodedGradient, cohort: &Cohort, local: usize) -> Verdict {
    if delta.issuer == Issuer::Kdc {
        return Verdict::Accepted;
    }
    let vk = cohort.vk();
    let cols = vk.first[0].ncols();
    if delta.deltas.len() != vk.first.len()
        || delta.deltas.iter().any(|d| d.shape() != (1, cols) || !d.iter().all(|v| v.is_finite()))
    {
        return Verdict::Rejected(RejectReason::Shape);
    }
    for (k, (d, first)) in delta.deltas.iter().zip(&vk.first).enumerate() {
        let expected = vk.second[local][k];
        if (first.dot(d) - expected).abs() > VK_TOL * expected.abs().max(1.0) {
            return Verdict::Rejected(RejectReason::VkCheck);
        }
    }
    if (delta.norm_sq() - NORM_TARGET).abs() > NORM_TOL {
        return Verdict::Rejected(RejectReason::NormCheck);
    }
    Verdict::Accepted
}

pub fn server_verify(delta: &EncodedGradient, km: &KeyMaterial) -> Verdict {
    if delta.owner >= km.dims().n {
        return Verdict::Rejected(RejectReason::Shape);
    }
    verify_in_cohort(delta, km.cohort(), delta.owner)
}

/// `alpha_i` with rows `(alpha_i)_j = delta_i alpha'_j`, evaluated through
/// the factored form of `alpha'`.
pub fn assemble_alpha(delta: &EncodedGradient, cohort: &Cohort, run: usize) -> Result<DMatrix<f64>> {
    let ap = cohort.alpha_prime(run);
    if delta.deltas.len() != ap.u.len() {
        return Err(Error::IncompleteSet { expected: ap.u.len(), got: delta.deltas.len() });
    }
    let mut coeff = DMatrix::zeros(1, ap.u[0].ncols());
    for (d, u) in delta.deltas.iter().zip(&ap.u) {
        if d.ncols() != u.nrows() {
            return Err(Error::ShapeMismatch { expected: format!("1x{}", u.nrows()), got: format!("{}x{}", d.nrows(), d.ncols()) });
        }
        coeff += d * u;
    }
    let blocks = cohort.alpha_blocks();
    let c = blocks[0].nrows();
    let mut alpha = DMatrix::zeros(c, c);
    for (b, blk) in blocks.iter().enumerate() {
        let w = coeff[b];
        alpha.zip_apply(blk, |x, y| *x += w * y);
    }
    Ok(alpha)
}

fn cohort_relu(cohort: &Cohort, run: usize, deltas: &[&EncodedGradient]) -> Result<DMatrix<f64>> {
    let alphas = deltas.iter().map(|d| assemble_alpha(d, cohort, run)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DMatrix<f64>> = alphas.iter().collect();
    srfc::aggregate_alphas(&refs, cohort.srfc().public())
}

/// Per segment: `(sum_a delta_ak) (E dk)^T`.
fn cohort_pair(cohort: &Cohort, e: &DMatrix<f64>, deltas: &[&EncodedGradient]) -> Vec<DMatrix<f64>> {
    let edk = e * cohort.dk();
    let s = deltas[0].deltas.len();
    (0..s)
        .map(|k| {
            let mut sum = DMatrix::zeros(1, edk.ncols());
            for d in deltas {
                sum += &d.deltas[k];
            }
            sum * edk.transpose()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundStatus {
    Completed,
    /// Submissions from these owners were refused; they must resend or be
    /// replaced before the masks can cancel.
    NeedsResend(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub verdicts: Vec<Verdict>,
    pub status: RoundStatus,
    /// Decoded `sum_i ReLU(w_i)` of every pass.
    pub weight_sums: Vec<f64>,
    /// Decoded weighted rows `g` of every pass, one `1 x tm` row per
    /// segment; `None` for a no-op pass.
    pub rows: Vec<Option<Vec<DMatrix<f64>>>>,
    /// `g A_j^T` per cluster, truncated to `l`; `None` leaves the model.
    pub updates: Vec<Option<DVector<f64>>>,
}

impl AggregationOutcome {
    fn refused(verdicts: Vec<Verdict>, m: usize) -> Self {
        let bad = verdicts.iter().enumerate().filter(|(_, v)| !v.accepted()).map(|(i, _)| i).collect();
        Self { verdicts, status: RoundStatus::NeedsResend(bad), weight_sums: Vec::new(), rows: Vec::new(), updates: vec![None; m] }
    }

    pub fn completed(&self) -> bool {
        self.status == RoundStatus::Completed
    }

    pub fn is_noop(&self) -> bool {
        self.updates.iter().all(Option::is_none)
    }
}

fn order_full_set<'a>(deltas: &'a [EncodedGradient], n: usize) -> Result<Vec<&'a EncodedGradient>> {
    let mut slots: Vec<Option<&EncodedGradient>> = vec![None; n];
    for d in deltas {
        match slots.get_mut(d.owner) {
            Some(slot @ None) => *slot = Some(d),
            Some(Some(_)) => return Err(Error::RoundAborted(format!("duplicate submission from client {}", d.owner))),
            None => return Err(Error::RoundAborted(format!("unknown client {}", d.owner))),
        }
    }
    let missing: Vec<usize> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i).collect();
    if !missing.is_empty() {
        return Err(Error::RoundAborted(format!("missing submissions from clients {missing:?}; the round restarts")));
    }
    Ok(slots.into_iter().flatten().collect())
}

fn decode_updates(
    rows: &[Option<Vec<DMatrix<f64>>>],
    a: &MomaFamily,
    normalizer: Normalizer,
    dims: &ProtocolDims,
) -> Vec<Option<DVector<f64>>> {
    let mut out = vec![None; dims.m];
    for (run, row) in rows.iter().enumerate() {
        let Some(segs) = row else { continue };
        for j in normalizer.clusters(run, dims.m) {
            let mut full = Vec::with_capacity(dims.padded_len());
            for g in segs {
                full.extend((g * a.block(j).transpose()).iter().copied());
            }
            full.truncate(dims.l);
            out[j] = Some(DVector::from_vec(full));
        }
    }
    out
}

fn scaled_rows(parts: Vec<DMatrix<f64>>, weight_sum: f64) -> Option<Vec<DMatrix<f64>>> {
    (weight_sum > MIN_WEIGHT_SUM).then(|| parts.into_iter().map(|p| p / weight_sum).collect())
}

/// Verifies every submission, then evaluates each pass: the secure ReLU sum
/// `S`, `dk' = E dk / S` and `g = (sum_i delta_i) dk'^T`. Requires exactly
/// one submission per keyed client.
pub fn robust_aggregate(deltas: &[EncodedGradient], km: &KeyMaterial) -> Result<AggregationOutcome> {
    let dims = km.dims();
    let ordered = order_full_set(deltas, dims.n)?;
    let verdicts: Vec<Verdict> = ordered.iter().map(|d| server_verify(d, km)).collect();
    if verdicts.iter().any(|v| !v.accepted()) {
        return Ok(AggregationOutcome::refused(verdicts, dims.m));
    }
    let cohort = km.cohort();
    let beta = &cohort.srfc().public().beta;
    let mut weight_sums = Vec::new();
    let mut rows = Vec::new();
    for run in 0..cohort.runs() {
        let e = cohort_relu(cohort, run, &ordered)?;
        let s = srfc::decode_with_beta(&e, beta)?;
        weight_sums.push(s);
        rows.push(scaled_rows(cohort_pair(cohort, &e, &ordered), s));
    }
    let updates = decode_updates(&rows, km.a(), km.normalizer(), dims);
    Ok(AggregationOutcome { verdicts, status: RoundStatus::Completed, weight_sums, rows, updates })
}

/// The segmented path. Segmentation is carried by the key material
/// (`dims.s > 1`), so this is the same evaluation as [`robust_aggregate`].
pub fn run_segmented(deltas: &[EncodedGradient], km: &KeyMaterial) -> Result<AggregationOutcome> {
    robust_aggregate(deltas, km)
}

/// Grouped evaluation. Each first-stage cohort computes its encoded ReLU
/// sum; those are carried up the transform chain and only the root is
/// decoded. Gradient rows are paired with their own cohort's decoding key
/// and summed across cohorts, where the residual masks cancel.
pub fn run_layered(deltas: &[EncodedGradient], plan: &LayerPlan, km: &KeyMaterial) -> Result<AggregationOutcome> {
    let dims = km.dims();
    let ordered = order_full_set(deltas, dims.n)?;
    let verdicts: Vec<Verdict> = ordered
        .iter()
        .map(|d| {
            let (g, a) = plan.locate(d.owner);
            verify_in_cohort(d, &plan.cohorts()[g], a)
        })
        .collect();
    if verdicts.iter().any(|v| !v.accepted()) {
        return Ok(AggregationOutcome::refused(verdicts, dims.m));
    }
    let fillers: Vec<EncodedGradient> = (dims.n..plan.slots()).map(|slot| EncodedGradient::null(plan.encode_key(slot))).collect();
    let all: Vec<&EncodedGradient> = ordered.into_iter().chain(fillers.iter()).collect();
    let cohorts = plan.cohorts();
    let g1 = plan.xi()[0];

    let mut weight_sums = Vec::new();
    let mut rows = Vec::new();
    for run in 0..cohorts[0].runs() {
        let encoded: Vec<DMatrix<f64>> = cohorts
            .iter()
            .enumerate()
            .map(|(g, c)| cohort_relu(c, run, &all[g * g1..(g + 1) * g1]))
            .collect::<Result<_>>()?;
        let mut level = encoded.clone();
        for (keys, &fan) in plan.transform_keys().iter().zip(&plan.xi()[1..]) {
            let mut up = vec![DMatrix::zeros(level[0].nrows(), keys[0].ncols()); level.len() / fan];
            for (node, (e, tk)) in level.iter().zip(keys).enumerate() {
                up[node / fan] += e * tk;
            }
            level = up;
        }
        let s = level[0].row(0).dot(&plan.root_row().row(0));
        weight_sums.push(s);
        let mut total = vec![DMatrix::zeros(1, dims.r()); dims.s];
        for (g, (c, e)) in cohorts.iter().zip(&encoded).enumerate() {
            for (acc, part) in total.iter_mut().zip(cohort_pair(c, e, &all[g * g1..(g + 1) * g1])) {
                *acc += part;
            }
        }
        rows.push(scaled_rows(total, s));
    }
    let updates = decode_updates(&rows, km.a(), km.normalizer(), dims);
    Ok(AggregationOutcome { verdicts, status: RoundStatus::Completed, weight_sums, rows, updates })
}

/// `theta_j += eta |g0_j| (g A_j^T)` for every cluster with an update.
pub fn update_models(state: &mut ClusterState, outcome: &AggregationOutcome) {
    let eta = state.eta;
    for (j, upd) in outcome.updates.iter().enumerate() {
        if let Some(u) = upd {
            let scale = eta * state.norms[j];
            state.models[j].axpy(scale, u, 1.0);
        }
    }
}

/// Where the encoded submissions of a round come from.
pub enum Keys<'a> {
    Base(&'a KeyMaterial),
    Layered(&'a KeyMaterial, &'a LayerPlan),
}

impl Keys<'_> {
    fn km(&self) -> &KeyMaterial {
        match self {
            Keys::Base(km) | Keys::Layered(km, _) => km,
        }
    }

    pub fn encode_key(&self, i: usize) -> &EncodeKey {
        match self {
            Keys::Base(km) => km.encode_key(i),
            Keys::Layered(_, plan) => plan.encode_key(i),
        }
    }

    pub fn aggregate(&self, deltas: &[EncodedGradient]) -> Result<AggregationOutcome> {
        match self {
            Keys::Base(km) => robust_aggregate(deltas, km),
            Keys::Layered(km, plan) => run_layered(deltas, plan, km),
        }
    }
}

/// Encodes every update (zero updates become KDC stand-ins), lets `tamper`
/// rewrite submissions, aggregates, and on refusal substitutes the refused
/// slots with KDC stand-ins and aggregates again. The returned verdicts are
/// those of the first attempt.
pub fn secure_round(
    updates: &[ClientUpdate],
    keys: &Keys<'_>,
    tamper: &mut dyn FnMut(usize, EncodedGradient) -> EncodedGradient,
) -> Result<AggregationOutcome> {
    let km = keys.km();
    let mut deltas = Vec::with_capacity(updates.len());
    for (i, u) in updates.iter().enumerate() {
        let ek = keys.encode_key(i);
        let d = match client_encode(&u.gradient, u.cluster, ek, km.a(), km.dims()) {
            Ok(d) => d,
            Err(Error::ZeroNorm(_)) => EncodedGradient::null(ek),
            Err(e) => return Err(e),
        };
        deltas.push(tamper(i, d));
    }
    let first = keys.aggregate(&deltas)?;
    let RoundStatus::NeedsResend(bad) = &first.status else {
        return Ok(first);
    };
    for &i in bad {
        deltas[i] = EncodedGradient::null(keys.encode_key(i));
    }
    let mut second = keys.aggregate(&deltas)?;
    second.verdicts = first.verdicts;
    Ok(second)
}

/// Malformed submissions used by the verification tests and the attack
/// harness.
pub mod adversary {
    use super::*;

    pub fn additive(delta: &EncodedGradient, noise: &[DMatrix<f64>]) -> EncodedGradient {
        let mut out = delta.clone();
        for (d, e) in out.deltas.iter_mut().zip(noise) {
            *d += e;
        }
        out
    }

    pub fn scaled(delta: &EncodedGradient, factor: f64) -> EncodedGradient {
        EncodedGradient { deltas: delta.deltas.iter().map(|d| d * factor).collect(), ..delta.clone() }
    }

    /// Embeds the raw gradient without dividing by its norm.
    pub fn skip_normalization(g: &DVector<f64>, cluster: usize, ek: &EncodeKey, a: &MomaFamily, dims: &ProtocolDims) -> EncodedGradient {
        embed(g, cluster, ek, a, dims)
    }

    /// Embeds the unit gradient through a channel `fake` (`t x tm`) that is
    /// not one of the issued cluster channels.
    pub fn forged_channel(g: &DVector<f64>, fake: &DMatrix<f64>, ek: &EncodeKey, dims: &ProtocolDims) -> EncodedGradient {
        let unit = g / g.norm();
        let deltas = split_segments(&unit, dims.s, dims.t)
            .iter()
            .zip(&ek.ek1)
            .map(|(seg, mask)| seg * fake * &ek.ek0 + mask)
            .collect();
        EncodedGradient { deltas, owner: ek.owner, round: ek.round, issuer: Issuer::Client }
    }

    /// Places the unit gradient into the client's mask channel instead of
    /// its gradient channel.
    pub fn mask_channel(g: &DVector<f64>, cluster: usize, ek: &EncodeKey, mask_block: &DMatrix<f64>, a: &MomaFamily, dims: &ProtocolDims) -> EncodedGradient {
        let unit = g / g.norm();
        let deltas = split_segments(&unit, dims.s, dims.t)
            .iter()
            .zip(&ek.ek1)
            .map(|(seg, mask)| seg * a.block(cluster) * mask_block + mask)
            .collect();
        EncodedGradient { deltas, owner: ek.owner, round: ek.round, issuer: Issuer::Client }
    }
}
