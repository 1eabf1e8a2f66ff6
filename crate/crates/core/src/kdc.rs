//! Key distribution center.
//!
//! Every key set is built around a *cohort*: a group of client slots that
//! share one triple of families (the SRFC family, the encoding family `M'`
//! and the verification key). The base protocol is a single cohort over all
//! clients. A layer plan splits the padded slot range into several cohorts
//! and links their ReLU sums through key-transformation stages.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moma::{self, MaskSet, MomaFamily};
use crate::rng;
use crate::skt;
use crate::srfc::{MaskPlan, SrfcParams};

pub const SRFC_BOUND: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolDims {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub s: usize,
    pub t: usize,
    pub layers: Vec<usize>,
}

impl ProtocolDims {
    pub fn new(n: usize, m: usize, l: usize) -> Result<Self> {
        Self::segmented(n, m, l, 1)
    }

    /// `s` segments of length `ceil(l / s)`.
    pub fn segmented(n: usize, m: usize, l: usize, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidParameter("need at least one segment".into()));
        }
        Self::with_segment_len(n, m, l, s, l.div_ceil(s))
    }

    pub fn with_segment_len(n: usize, m: usize, l: usize, s: usize, t: usize) -> Result<Self> {
        let dims = Self { n, m, l, s, t, layers: vec![n] };
        dims.validate()?;
        Ok(dims)
    }

    pub fn with_layers(mut self, layers: Vec<usize>) -> Result<Self> {
        self.layers = layers;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n < 2 {
            return bad(format!("need at least 2 clients, got {}", self.n));
        }
        if self.m == 0 || self.l == 0 || self.s == 0 || self.t == 0 {
            return bad("m, l, s and t must be positive".into());
        }
        if self.s * self.t < self.l {
            return bad(format!("{} segments of {} cannot hold {}", self.s, self.t, self.l));
        }
        if self.t * self.m < 2 {
            return bad("segment channel width t*m must be at least 2".into());
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if self.slots() < self.n {
            return bad(format!("layer product {} is below n = {}", self.slots(), self.n));
        }
        Ok(())
    }

    /// Rows of every block: `t * m`.
    pub fn r(&self) -> usize {
        self.t * self.m
    }

    pub fn padded_len(&self) -> usize {
        self.s * self.t
    }

    pub fn slots(&self) -> usize {
        self.layers.iter().product()
    }
}

/// Which cosine the encoded weight carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalizer {
    /// One pass per cluster; each pass has its own ReLU sum.
    #[default]
    PerCluster,
    /// One pass for all clusters sharing a single ReLU sum.
    Global,
}

impl Normalizer {
    pub fn runs(self, m: usize) -> usize {
        match self {
            Normalizer::PerCluster => m,
            Normalizer::Global => 1,
        }
    }

    /// Clusters decoded by pass `run`.
    pub fn clusters(self, run: usize, m: usize) -> std::ops::Range<usize> {
        match self {
            Normalizer::PerCluster => run..run + 1,
            Normalizer::Global => 0..m,
        }
    }
}

/// Zero-pads `v` to `s * t` and cuts it into `1 x t` rows.
pub fn split_segments(v: &DVector<f64>, s: usize, t: usize) -> Vec<DMatrix<f64>> {
    (0..s)
        .map(|k| DMatrix::from_fn(1, t, |_, c| v.get(k * t + c).copied().unwrap_or(0.0)))
        .collect()
}

/// Per-slot masks. `rpp[j][k]` is the `1 x t` piece of `R''` for cluster `j`
/// and segment `k`; `mu[k]` is `1 x tm`; `verifier[k]` is `1 x t`.
#[derive(Debug, Clone)]
pub struct SlotMasks {
    pub rpp: Vec<Vec<DMatrix<f64>>>,
    pub mu: Vec<DMatrix<f64>>,
    pub verifier: Vec<DMatrix<f64>>,
}

impl SlotMasks {
    /// `sum_j R''_jk A_j`, the `1 x tm` mask row of segment `k`.
    pub fn rpp_row(&self, a: &MomaFamily, k: usize) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(1, a.cols());
        for (j, r) in self.rpp.iter().enumerate() {
            acc += &r[k] * a.block(j);
        }
        acc
    }

    /// `nu_k = sum_j R''_jk A_j + mu_k`.
    pub fn nu(&self, a: &MomaFamily, k: usize) -> DMatrix<f64> {
        self.rpp_row(a, k) + &self.mu[k]
    }

    pub fn rpp_norm_sq(&self) -> f64 {
        self.rpp.iter().flatten().map(|r| r.norm_squared()).sum()
    }
}

fn gen_rpp(slots: usize, dims: &ProtocolDims, seed: u64) -> Result<Vec<Vec<Vec<DMatrix<f64>>>>> {
    let (m, s, t) = (dims.m, dims.s, dims.t);
    let set = MaskSet::unit_zero_sum(slots, s * m * t, rng::derive_seed(seed, "kdc/rpp"))?;
    Ok(set
        .members()
        .iter()
        .map(|row| {
            (0..m)
                .map(|j| (0..s).map(|k| row.columns((k * m + j) * t, t).into_owned()).collect())
                .collect()
        })
        .collect())
}

fn gen_slot_masks(slots: usize, dims: &ProtocolDims, seed: u64) -> Result<Vec<SlotMasks>> {
    let rpp = gen_rpp(slots, dims, seed)?;
    let scale = 1.0 / (dims.s as f64).sqrt();
    let mus: Vec<Vec<DMatrix<f64>>> = (0..dims.s)
        .map(|k| {
            let set = MaskSet::unit_zero_sum(slots, dims.r(), rng::derive_index(rng::derive_seed(seed, "kdc/mu"), k as u64))?;
            Ok(set.into_members().into_iter().map(|m| m * scale).collect())
        })
        .collect::<Result<_>>()?;
    let mut vrng = rng::substream(rng::derive_seed(seed, "kdc/verifier"), 0);
    Ok(rpp
        .into_iter()
        .enumerate()
        .map(|(i, rpp)| SlotMasks {
            rpp,
            mu: (0..dims.s).map(|k| mus[k][i].clone()).collect(),
            verifier: (0..dims.s).map(|_| moma::gaussian(1, dims.t, &mut vrng)).collect(),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct EncodeKey {
    pub owner: usize,
    pub round: u32,
    /// `M'_a`, the client's gradient channel.
    pub ek0: DMatrix<f64>,
    /// Per segment: `sum_j R''_ijk A_j M'_{a+g} + mu_ik M'_{a+2g}`.
    pub ek1: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct CohortVk {
    /// Per segment: `sum_a V_ak (sum_j A_j) M'_{a+g}`.
    pub first: Vec<DMatrix<f64>>,
    /// `[member][segment]`: `V_ak (sum_j R''_ajk)^T`.
    pub second: Vec<Vec<f64>>,
}

/// The public part of the weight-encoding matrices of one pass, in factored
/// form: `alpha'_j = sum_b u[:, b] * blocks[b][j, :]`. `u` is stored per
/// segment; the blocks are shared by all passes and live on the cohort.
#[derive(Debug, Clone)]
pub struct AlphaPrime {
    pub u: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    members: Vec<usize>,
    mp: MomaFamily,
    srfc: SrfcParams,
    ek: Vec<EncodeKey>,
    vk: CohortVk,
    dk: DMatrix<f64>,
    alpha: Vec<AlphaPrime>,
    blocks: Vec<DMatrix<f64>>,
}

impl Cohort {
    /// `targets[run][k]` is the `tm x 1` column against which segment `k`
    /// of the embedded gradient is projected in pass `run`.
    fn build(
        members: Vec<usize>,
        masks: &[SlotMasks],
        a: &MomaFamily,
        targets: &[Vec<DMatrix<f64>>],
        dims: &ProtocolDims,
        plan: impl FnOnce(&MomaFamily) -> Result<MaskPlan>,
        round: u32,
        seed: u64,
    ) -> Result<Self> {
        let g = members.len();
        let r = dims.r();
        let mfam = MomaFamily::generate(2 * g, r, 2 * r * g, rng::derive_seed(seed, "cohort/srfc_family"))?;
        let mp = MomaFamily::generate(3 * g, r, 3 * r * g, rng::derive_seed(seed, "cohort/encode_family"))?;
        let plan = plan(&mfam)?;
        let srfc = SrfcParams::for_family(mfam, SRFC_BOUND, plan, rng::derive_seed(seed, "cohort/srfc"))?;

        let mask_sum = mp.sum_range(g..2 * g) + mp.sum_range(2 * g..3 * g);
        let mut dk = DMatrix::zeros(2 * r * g, 3 * r * g);
        let fam = srfc.family();
        for i in 0..g {
            dk.gemm_tr(1.0, fam.block(i), mp.block(i), 1.0);
        }
        dk.gemm_tr(1.0, &fam.sum_range(g..2 * g), &mask_sum, 1.0);

        let asum = a.sum();
        let mut first = vec![DMatrix::zeros(1, 3 * r * g); dims.s];
        for (local, &slot) in members.iter().enumerate() {
            let row = &asum * mp.block(local + g);
            for (k, f) in first.iter_mut().enumerate() {
                *f += &masks[slot].verifier[k] * &row;
            }
        }

        let mut mrng = rng::substream(rng::derive_seed(seed, "cohort/mixing"), 0);
        let mix = moma::well_conditioned(2 * g, &mut mrng);
        let mix_inv = mix.clone().try_inverse().ok_or_else(|| Error::Singular("mixing matrix".into()))?;
        let plain: Vec<&DMatrix<f64>> = (0..g).map(|i| srfc.p_block(i)).chain((0..g).map(|i| srfc.q_block(i))).collect();
        let c = srfc.c();
        let blocks = (0..2 * g)
            .map(|b| {
                let mut acc = DMatrix::zeros(c, c);
                for (e, src) in plain.iter().enumerate() {
                    let w = mix_inv[(b, e)];
                    acc.zip_apply(*src, |x, y| *x += w * y);
                }
                acc
            })
            .collect();

        let alpha = targets
            .iter()
            .map(|per_seg| {
                let u = per_seg
                    .iter()
                    .enumerate()
                    .map(|(k, target)| {
                        let mut u = DMatrix::zeros(3 * r * g, 2 * g);
                        for (local, &slot) in members.iter().enumerate() {
                            u.set_column(local, &mp.block(local).tr_mul(target).column(0));
                            let v = mp.block(local + 2 * g).tr_mul(&masks[slot].mu[k].transpose());
                            u.set_column(g + local, &v.column(0));
                        }
                        u * &mix
                    })
                    .collect();
                AlphaPrime { u }
            })
            .collect();

        let mut cohort = Self {
            members,
            mp,
            srfc,
            ek: Vec::new(),
            vk: CohortVk { first, second: Vec::new() },
            dk,
            alpha,
            blocks,
        };
        cohort.rekey(masks, a, round);
        Ok(cohort)
    }

    /// Recomputes the parts that depend on `R''`.
    fn rekey(&mut self, masks: &[SlotMasks], a: &MomaFamily, round: u32) {
        let g = self.members.len();
        let s = self.vk.first.len();
        self.ek = self
            .members
            .iter()
            .enumerate()
            .map(|(local, &slot)| {
                let sm = &masks[slot];
                let ek1 = (0..s)
                    .map(|k| sm.rpp_row(a, k) * self.mp.block(local + g) + &sm.mu[k] * self.mp.block(local + 2 * g))
                    .collect();
                EncodeKey { owner: slot, round, ek0: self.mp.block(local).clone(), ek1 }
            })
            .collect();
        self.vk.second = self
            .members
            .iter()
            .map(|&slot| {
                let sm = &masks[slot];
                (0..s)
                    .map(|k| {
                        let tot: DMatrix<f64> = sm.rpp.iter().map(|r| &r[k]).sum();
                        sm.verifier[k].dot(&tot)
                    })
                    .collect()
            })
            .collect();
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn local_index(&self, slot: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == slot)
    }

    pub fn encode_family(&self) -> &MomaFamily {
        &self.mp
    }

    pub fn srfc(&self) -> &SrfcParams {
        &self.srfc
    }

    pub fn encode_key(&self, local: usize) -> &EncodeKey {
        &self.ek[local]
    }

    pub fn vk(&self) -> &CohortVk {
        &self.vk
    }

    pub fn dk(&self) -> &DMatrix<f64> {
        &self.dk
    }

    pub fn alpha_prime(&self, run: usize) -> &AlphaPrime {
        &self.alpha[run]
    }

    pub fn runs(&self) -> usize {
        self.alpha.len()
    }

    /// Mixed weight-encoding blocks shared by all passes.
    pub fn alpha_blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Row `j` of the dense `alpha'` of a pass and segment (`3rg x 2rg`).
    pub fn dense_alpha_row(&self, run: usize, k: usize, j: usize) -> DMatrix<f64> {
        let u = &self.alpha[run].u[k];
        let c = self.srfc.c();
        let mut out = DMatrix::zeros(u.nrows(), c);
        for (b, blk) in self.blocks.iter().enumerate() {
            out += u.column(b) * blk.row(j);
        }
        out
    }
}

fn unit(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::ZeroNorm("server update".into()));
    }
    Ok(v / n)
}

/// `targets[run][k]` for the chosen normalizer.
fn pass_targets(a: &MomaFamily, g0_unit: &[DVector<f64>], dims: &ProtocolDims, norm: Normalizer) -> Vec<Vec<DMatrix<f64>>> {
    let segs: Vec<Vec<DMatrix<f64>>> = g0_unit.iter().map(|g| split_segments(g, dims.s, dims.t)).collect();
    let column = |q: usize, k: usize| a.block(q).tr_mul(&segs[q][k].transpose());
    (0..norm.runs(dims.m))
        .map(|run| {
            (0..dims.s)
                .map(|k| {
                    let mut acc = DMatrix::zeros(dims.r(), 1);
                    for q in norm.clusters(run, dims.m) {
                        acc += column(q, k);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KeyMaterial {
    dims: ProtocolDims,
    normalizer: Normalizer,
    a: MomaFamily,
    g0_unit: Vec<DVector<f64>>,
    g0_norms: Vec<f64>,
    masks: Vec<SlotMasks>,
    cohort: Cohort,
    round: u32,
    seed: u64,
}

pub fn init_keys(dims: &ProtocolDims, g0: &[DVector<f64>], seed: u64) -> Result<KeyMaterial> {
    init_keys_with(dims, g0, Normalizer::default(), seed)
}

pub fn init_keys_with(dims: &ProtocolDims, g0: &[DVector<f64>], normalizer: Normalizer, seed: u64) -> Result<KeyMaterial> {
    dims.validate()?;
    if g0.len() != dims.m {
        return Err(Error::IncompleteSet { expected: dims.m, got: g0.len() });
    }
    if let Some(g) = g0.iter().find(|g| g.len() != dims.l) {
        return Err(Error::ShapeMismatch { expected: format!("server update of length {}", dims.l), got: format!("{}", g.len()) });
    }
    let g0_unit = g0.iter().map(unit).collect::<Result<Vec<_>>>()?;
    let g0_norms = g0.iter().map(|g| g.norm()).collect();
    let (t, m) = (dims.t, dims.m);
    let a = MomaFamily::generate(m, t, t * m, rng::derive_seed(seed, "kdc/a"))?;
    let masks = gen_slot_masks(dims.n, dims, rng::derive_seed(seed, "kdc/masks"))?;
    let targets = pass_targets(&a, &g0_unit, dims, normalizer);
    let cohort = Cohort::build(
        (0..dims.n).collect(),
        &masks,
        &a,
        &targets,
        dims,
        |_| Ok(MaskPlan::Dense),
        0,
        rng::derive_seed(seed, "kdc/cohort"),
    )?;
    Ok(KeyMaterial { dims: dims.clone(), normalizer, a, g0_unit, g0_norms, masks, cohort, round: 0, seed })
}

/// Fresh `R''` for the next round; every family, `mu`, `dk` and `alpha'`
/// stay as they are.
pub fn refresh_round(km: &KeyMaterial, seed: u64) -> Result<KeyMaterial> {
    let mut next = km.clone();
    next.round = km.round.wrapping_add(1);
    let rpp = gen_rpp(km.dims.n, &km.dims, rng::derive_index(rng::derive_seed(seed, "kdc/refresh"), next.round as u64))?;
    for (slot, r) in next.masks.iter_mut().zip(rpp) {
        slot.rpp = r;
    }
    next.cohort.rekey(&next.masks, &next.a, next.round);
    Ok(next)
}

impl KeyMaterial {
    pub fn dims(&self) -> &ProtocolDims {
        &self.dims
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn a(&self) -> &MomaFamily {
        &self.a
    }

    pub fn g0_unit(&self) -> &[DVector<f64>] {
        &self.g0_unit
    }

    pub fn g0_norms(&self) -> &[f64] {
        &self.g0_norms
    }

    pub fn masks(&self) -> &[SlotMasks] {
        &self.masks
    }

    pub fn cohort(&self) -> &Cohort {
        &self.cohort
    }

    pub fn encode_key(&self, i: usize) -> &EncodeKey {
        self.cohort.encode_key(i)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dk(&self) -> &DMatrix<f64> {
        self.cohort.dk()
    }

    /// `sum_i ek1_i dk^T` per segment. The raw sum is not zero because each
    /// client's masks sit in its own channels; after contraction with `dk`
    /// the zero-sum masks cancel.
    pub fn ek1_decoded_sum(&self) -> Vec<DMatrix<f64>> {
        let dk = self.cohort.dk();
        let mut acc = vec![DMatrix::zeros(1, dk.nrows()); self.dims.s];
        for ek in &self.cohort.ek {
            for (a, b) in acc.iter_mut().zip(&ek.ek1) {
                *a += b * dk.transpose();
            }
        }
        acc
    }
}

/// Segment layout for an `l`-vector: `(s, t)` and the zero-padded length.
pub fn plan_segmentation(dims: &ProtocolDims) -> Result<(usize, usize, usize)> {
    dims.validate()?;
    Ok((dims.s, dims.t, dims.padded_len()))
}

/// `S = 2 r xi_x + sum_{i<x} 4 r^2 xi_i xi_{i+1} prod_{j>i} xi_j` with
/// `r = lm` (or `tm` when segmented).
pub fn key_size_formula(r: usize, xi: &[usize]) -> usize {
    let x = xi.len();
    let mut total = 2 * r * xi[x - 1];
    for i in 0..x - 1 {
        let above: usize = xi[i + 1..].iter().product();
        total += 4 * r * r * xi[i] * xi[i + 1] * above;
    }
    total
}

/// Default grouping: single-client first stage, then one root over all
/// slots.
pub fn default_layers(n: usize) -> Vec<usize> {
    vec![1, n]
}

#[derive(Debug, Clone)]
pub struct LayerPlan {
    xi: Vec<usize>,
    n: usize,
    masks: Vec<SlotMasks>,
    cohorts: Vec<Cohort>,
    /// `keys[level][node]`: transform from a node to its parent.
    keys: Vec<Vec<DMatrix<f64>>>,
    root_row: DMatrix<f64>,
}

/// Builds grouped key material over `prod xi` slots. Slots `n..` are filled
/// by KDC-issued zero-gradient ciphertexts. `A`, the server updates and the
/// normalizer are taken from `km`; every mask and family is fresh.
pub fn plan_layers(km: &KeyMaterial, xi: &[usize], seed: u64) -> Result<LayerPlan> {
    let dims = km.dims.clone().with_layers(xi.to_vec())?;
    let slots = dims.slots();
    let (r, s) = (dims.r(), dims.s);
    let g1 = xi[0];
    let groups = slots / g1;
    let masks = gen_slot_masks(slots, &dims, rng::derive_seed(seed, "layers/masks"))?;
    let targets = pass_targets(&km.a, &km.g0_unit, &dims, km.normalizer);
    let zeta = MaskSet::zero_sum(slots, r, r, rng::derive_seed(seed, "layers/zeta"))?.into_members();
    let q = paired_offsets(&masks, &km.a, groups, g1, s, r, rng::derive_seed(seed, "layers/offsets"))?;

    let mut prng = rng::substream(rng::derive_seed(seed, "layers/rho"), 0);
    let mut cohorts = Vec::with_capacity(groups);
    for grp in 0..groups {
        let members: Vec<usize> = (grp * g1..(grp + 1) * g1).collect();
        let zeta_g: Vec<DMatrix<f64>> = members.iter().map(|&i| zeta[i].clone()).collect();
        let z_sum: DMatrix<f64> = zeta_g.iter().sum();
        let p_total = &q[grp] - z_sum;
        let mut rho: Vec<DMatrix<f64>> = (0..g1 - 1).map(|_| moma::gaussian(r, r, &mut prng)).collect();
        let partial: DMatrix<f64> = rho.iter().fold(DMatrix::zeros(r, r), |acc, x| acc + x);
        rho.push(p_total - partial);
        let cohort = Cohort::build(
            members,
            &masks,
            &km.a,
            &targets,
            &dims,
            |fam| {
                let r_total = rho.iter().enumerate().map(|(a, p)| p * fam.block(a + g1)).collect();
                Ok(MaskPlan::Provided { zeta: zeta_g, r_total })
            },
            0,
            rng::derive_index(rng::derive_seed(seed, "layers/cohort"), grp as u64),
        )?;
        cohorts.push(cohort);
    }

    // Families of the upper levels and the transforms into them.
    let mut keys = Vec::new();
    let mut below: Vec<MomaFamily> = cohorts.iter().map(|c| c.srfc().family().clone()).collect();
    for lvl in 1..xi.len() {
        let (xb, xa) = (xi[lvl - 1], xi[lvl]);
        let nodes = below.len() / xa;
        let fams: Vec<MomaFamily> = (0..nodes)
            .map(|p| {
                let seed = rng::derive_index(rng::derive_seed(seed, &format!("layers/level{lvl}")), p as u64);
                MomaFamily::generate(2 * xa, r, 2 * r * xa, seed)
            })
            .collect::<Result<_>>()?;
        let zero = vec![DMatrix::zeros(r, r); xb];
        let level_keys = below
            .iter()
            .enumerate()
            .map(|(node, fam)| {
                let c = node % xa;
                let mut mapping = vec![c; xb];
                mapping.extend(std::iter::repeat_n(c + xa, xb));
                let tks = skt::gen_keys_raw(fam, &zero, &fams[node / xa], &mapping, None)?;
                skt::sum_keys(&tks.iter().collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        keys.push(level_keys);
        below = fams;
    }
    let root = &below[0];
    let top = *xi.last().expect("non-empty plan");
    let root_row = root.sum_range(0..top).rows(0, 1).into_owned();
    Ok(LayerPlan { xi: xi.to_vec(), n: km.dims.n, masks, cohorts, keys, root_row })
}

// Offsets Q_G (r x r) with sum_G Q_G = 0 and sum_G Q_G nu_{G,k}^T = 0 for
// every segment k, so that the per-group decode residues cancel globally.
fn paired_offsets(
    masks: &[SlotMasks],
    a: &MomaFamily,
    groups: usize,
    g1: usize,
    s: usize,
    r: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if groups == 1 {
        return Ok(vec![DMatrix::zeros(r, r)]);
    }
    // nu[k] is groups x r.
    let nu: Vec<DMatrix<f64>> = (0..s)
        .map(|k| {
            let mut out = DMatrix::zeros(groups, r);
            for grp in 0..groups {
                let mut acc = DMatrix::zeros(1, r);
                for slot in grp * g1..(grp + 1) * g1 {
                    acc += masks[slot].nu(a, k);
                }
                out.set_row(grp, &acc.row(0));
            }
            center_columns(out)
        })
        .collect();
    let gram = DMatrix::from_fn(s, s, |x, y| nu[x].dot(&nu[y]));
    let gram_pinv = gram.pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))?;
    let mut rng = rng::substream(seed, 0);
    let mut q = vec![DMatrix::zeros(r, r); groups];
    for row in 0..r {
        let mut x = center_columns(moma::gaussian(groups, r, &mut rng));
        let proj = DVector::from_fn(s, |k, _| x.dot(&nu[k]));
        let coef = &gram_pinv * proj;
        for k in 0..s {
            x -= &nu[k] * coef[k];
        }
        for (grp, qg) in q.iter_mut().enumerate() {
            qg.set_row(row, &x.row(grp));
        }
    }
    Ok(q)
}

fn center_columns(mut x: DMatrix<f64>) -> DMatrix<f64> {
    let rows = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / rows;
        col.add_scalar_mut(-mean);
    }
    x
}

impl LayerPlan {
    pub fn xi(&self) -> &[usize] {
        &self.xi
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn slots(&self) -> usize {
        self.xi.iter().product()
    }

    pub fn masks(&self) -> &[SlotMasks] {
        &self.masks
    }

    pub fn cohorts(&self) -> &[Cohort] {
        &self.cohorts
    }

    /// Cohort index and local position of a slot.
    pub fn locate(&self, slot: usize) -> (usize, usize) {
        (slot / self.xi[0], slot % self.xi[0])
    }

    pub fn encode_key(&self, slot: usize) -> &EncodeKey {
        let (g, a) = self.locate(slot);
        self.cohorts[g].encode_key(a)
    }

    pub fn transform_keys(&self) -> &[Vec<DMatrix<f64>>] {
        &self.keys
    }

    pub fn root_row(&self) -> &DMatrix<f64> {
        &self.root_row
    }

    /// Entries of every transform key plus the root decoding row.
    pub fn key_entries(&self) -> usize {
        self.keys.iter().flatten().map(|k| k.len()).sum::<usize>() + self.root_row.len()
    }

    pub fn key_size_formula(&self) -> usize {
        key_size_formula(self.root_row.len() / (2 * self.xi[self.xi.len() - 1]), &self.xi)
    }
}
