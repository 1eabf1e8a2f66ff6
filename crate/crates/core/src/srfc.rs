//! Secure ReLU sum.
//!
//! Each client's scalar is carried by an encoding `alpha_i = x_i P_i + Q_i`
//! with `P_i = M_i^T R'_i M_i` and `Q_i = M_{i+n}^T R'_i M_{i+n}`. The server
//! combines the encodings with the public matrices `beta`, `tau1`, `tau2`
//! and `tau3` and obtains `sum_i ReLU(x_i) M_i + 1/2 zeta_i M_{i+n}`, whose
//! trace against `beta` is `r * sum_i ReLU(x_i)`.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{check_shape, Error, Result};
use crate::moma::{self, signed_sqrt, signed_square, MaskSet, MomaFamily};
use crate::rng::{self, Rng};

/// Relative size below which a value about to pass through the signed root
/// is treated as rounding residue and set to zero. The scale is the
/// Cauchy-Schwarz bound of the product that produced the value.
pub const FLUSH_RATIO: f64 = 1e-14;
const R_FLOOR: f64 = 0.5;

/// Signs of the four optional terms in `tau2` and `tau3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignConfig {
    pub tau2_r1: f64,
    pub tau2_r2: f64,
    pub tau3_cross: f64,
    pub tau3_r2: f64,
}

impl SignConfig {
    pub const PRINTED: SignConfig =
        SignConfig { tau2_r1: 1.0, tau2_r2: 1.0, tau3_cross: 1.0, tau3_r2: -1.0 };

    /// All sixteen placements, the printed one first.
    pub fn candidates() -> Vec<SignConfig> {
        let mut out = vec![Self::PRINTED];
        for bits in 0..16u8 {
            let s = |b: u8| if bits & (1 << b) == 0 { 1.0 } else { -1.0 };
            let c = SignConfig { tau2_r1: s(0), tau2_r2: s(1), tau3_cross: s(2), tau3_r2: s(3) };
            if c != Self::PRINTED {
                out.push(c);
            }
        }
        out
    }

    /// The configuration chosen by [`calibrate_signs`], computed once.
    pub fn calibrated() -> Result<SignConfig> {
        static CELL: OnceLock<std::result::Result<SignConfig, Error>> = OnceLock::new();
        CELL.get_or_init(|| calibrate_signs().map(|c| c.chosen)).clone()
    }
}

/// Matrices the server holds.
#[derive(Debug, Clone)]
pub struct SrfcPublic {
    pub beta: DMatrix<f64>,
    pub tau1: DMatrix<f64>,
    pub tau2: DMatrix<f64>,
    pub tau3: DMatrix<f64>,
}

/// How the additive masks `R_i = R0_i + R1_i` and `zeta_i` are chosen.
#[derive(Debug, Clone)]
pub enum MaskPlan {
    /// Fresh Gaussian zero-sum sets.
    Dense,
    /// Caller-supplied `zeta_i` and `R_i`; they need not sum to zero inside
    /// this instance (used when several instances share one budget).
    Provided { zeta: Vec<DMatrix<f64>>, r_total: Vec<DMatrix<f64>> },
}

#[derive(Debug, Clone)]
pub struct SrfcParams {
    family: MomaFamily,
    bound: f64,
    signs: SignConfig,
    public: SrfcPublic,
    rprime: Vec<DMatrix<f64>>,
    zeta: Vec<DMatrix<f64>>,
    r0: Vec<DMatrix<f64>>,
    r1: Vec<DMatrix<f64>>,
    r2: Vec<DMatrix<f64>>,
    p: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrfcEncoding {
    pub alpha: DMatrix<f64>,
    pub owner: usize,
}

pub fn gen_params(n: usize, r: usize, bound: f64, seed: u64) -> Result<SrfcParams> {
    let signs = SignConfig::calibrated()?;
    gen_params_with_signs(n, r, bound, signs, seed)
}

fn gen_params_with_signs(n: usize, r: usize, bound: f64, signs: SignConfig, seed: u64) -> Result<SrfcParams> {
    if n == 0 || r == 0 {
        return Err(Error::InvalidParameter("SRFC needs n >= 1 and r >= 1".into()));
    }
    let family = MomaFamily::generate(2 * n, r, 2 * r * n, rng::derive_seed(seed, "srfc/family"))?;
    SrfcParams::build(family, bound, MaskPlan::Dense, signs, seed)
}

impl SrfcParams {
    /// Builds parameters over an existing family of `2n` blocks.
    pub fn for_family(family: MomaFamily, bound: f64, plan: MaskPlan, seed: u64) -> Result<Self> {
        Self::build(family, bound, plan, SignConfig::calibrated()?, seed)
    }

    fn build(family: MomaFamily, bound: f64, plan: MaskPlan, signs: SignConfig, seed: u64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter(format!("bound must be positive, got {bound}")));
        }
        if family.len() % 2 != 0 || family.is_empty() {
            return Err(Error::InvalidParameter("SRFC family must hold 2n blocks".into()));
        }
        let n = family.len() / 2;
        let (r, c) = (family.rows(), family.cols());

        let mut rng = rng::substream(rng::derive_seed(seed, "srfc/rprime"), 0);
        let rprime: Vec<_> = (0..n).map(|_| moma::well_conditioned(r, &mut rng)).collect();
        let rprime_inv = rprime
            .iter()
            .map(|m| m.clone().try_inverse().ok_or_else(|| Error::Singular("R' mask".into())))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = rng::substream(rng::derive_seed(seed, "srfc/sparse"), 0);
        let mut r1 = Vec::with_capacity(n);
        let mut r2 = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = sparse_pair(family.block(i), bound, &mut rng);
            r1.push(a);
            r2.push(b);
        }

        let (zeta, r_total) = match plan {
            MaskPlan::Dense => (
                MaskSet::zero_sum(n, r, r, rng::derive_seed(seed, "srfc/zeta"))?.into_members(),
                MaskSet::zero_sum(n, r, c, rng::derive_seed(seed, "srfc/r"))?.into_members(),
            ),
            MaskPlan::Provided { zeta, r_total } => {
                if zeta.len() != n || r_total.len() != n {
                    return Err(Error::IncompleteSet { expected: n, got: zeta.len().min(r_total.len()) });
                }
                for z in &zeta {
                    check_shape("zeta", z.shape(), (r, r))?;
                }
                for m in &r_total {
                    check_shape("R", m.shape(), (r, c))?;
                }
                (zeta, r_total)
            }
        };
        let r0: Vec<_> = r_total.iter().zip(&r1).map(|(t, a)| t - a).collect();

        let beta = family.sum();
        let mut tau1 = DMatrix::zeros(c, c);
        let mut tau2 = DMatrix::zeros(c, c);
        let mut tau3 = DMatrix::zeros(c, c);
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for i in 0..n {
            let mi = family.block(i);
            let mn = family.block(i + n);
            let inv = &rprime_inv[i];
            let inv2 = inv * inv;

            tau1.gemm_tr(1.0, mi, &(inv * mi), 1.0);
            let mask_row = &r0[i] + &zeta[i] * mn;
            tau1.gemm_tr(1.0, mn, &(inv * mask_row), 1.0);

            tau2.gemm_tr(1.0, mi, &(&inv2 * mi.component_mul(mi)), 1.0);
            let t2 = r1[i].component_mul(&r1[i]) * signs.tau2_r1 + &r2[i] * signs.tau2_r2;
            tau2.gemm_tr(1.0, mn, &(&inv2 * t2), 1.0);

            let cross = signed_square(&(mi.component_mul(&r1[i]) * 2.0));
            tau3.gemm_tr(signs.tau3_cross, mi, &(&inv2 * cross), 1.0);
            tau3.gemm_tr(signs.tau3_r2, mn, &(&inv2 * signed_square(&r2[i])), 1.0);

            let mut pi = DMatrix::zeros(c, c);
            pi.gemm_tr(1.0, mi, &(&rprime[i] * mi), 0.0);
            let mut qi = DMatrix::zeros(c, c);
            qi.gemm_tr(1.0, mn, &(&rprime[i] * mn), 0.0);
            p.push(pi);
            q.push(qi);
        }

        Ok(Self {
            family,
            bound,
            signs,
            public: SrfcPublic { beta, tau1, tau2, tau3 },
            rprime,
            zeta,
            r0,
            r1,
            r2,
            p,
            q,
        })
    }

    pub fn n(&self) -> usize {
        self.family.len() / 2
    }

    pub fn r(&self) -> usize {
        self.family.rows()
    }

    pub fn c(&self) -> usize {
        self.family.cols()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn signs(&self) -> SignConfig {
        self.signs
    }

    pub fn family(&self) -> &MomaFamily {
        &self.family
    }

    pub fn public(&self) -> &SrfcPublic {
        &self.public
    }

    pub fn rprime(&self) -> &[DMatrix<f64>] {
        &self.rprime
    }

    pub fn zeta(&self) -> &[DMatrix<f64>] {
        &self.zeta
    }

    pub fn r0(&self) -> &[DMatrix<f64>] {
        &self.r0
    }

    pub fn sparse_r1(&self) -> &[DMatrix<f64>] {
        &self.r1
    }

    pub fn sparse_r2(&self) -> &[DMatrix<f64>] {
        &self.r2
    }

    /// `M_i^T R'_i M_i`, the coefficient of `x_i` in `alpha_i`.
    pub fn p_block(&self, i: usize) -> &DMatrix<f64> {
        &self.p[i]
    }

    /// `M_{i+n}^T R'_i M_{i+n}`, the constant part of `alpha_i`.
    pub fn q_block(&self, i: usize) -> &DMatrix<f64> {
        &self.q[i]
    }
}

// R1 lives on the non-positive entries of M, R2 on the positive ones. R1 is
// drawn above bound*|M| so that |x| M + R1 never changes sign. Both stay in
// the upper part of their range: a mask near zero makes the signed roots
// lose the small terms they carry.
fn sparse_pair(m: &DMatrix<f64>, bound: f64, rng: &mut Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    let mut r1 = DMatrix::zeros(r, c);
    let mut r2 = DMatrix::zeros(r, c);
    for j in 0..r {
        for k in 0..c {
            let v = m[(j, k)];
            let u = open_unit(rng);
            if v <= 0.0 {
                let a = v.abs().max(R_FLOOR).min(1.0);
                r1[(j, k)] = bound * (a + (1.0 - a) * u);
            } else {
                r2[(j, k)] = 2.0 * bound * bound * (R_FLOOR + (1.0 - R_FLOOR) * u);
            }
        }
    }
    (r1, r2)
}

fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn encode_alpha(x: f64, i: usize, params: &SrfcParams) -> Result<SrfcEncoding> {
    let n = params.n();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, limit: n });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("SRFC input".into()));
    }
    if x.abs() >= params.bound {
        return Err(Error::OutOfBound { value: x, bound: params.bound });
    }
    Ok(SrfcEncoding { alpha: &params.p[i] * x + &params.q[i], owner: i })
}

pub fn aggregate_encoded_relu(encodings: &[SrfcEncoding], params: &SrfcParams) -> Result<DMatrix<f64>> {
    let n = params.n();
    let mut seen = vec![false; n];
    for e in encodings {
        if e.owner >= n {
            return Err(Error::IndexOutOfRange { index: e.owner, limit: n });
        }
        seen[e.owner] = true;
    }
    if encodings.len() != n || seen.iter().any(|s| !s) {
        return Err(Error::IncompleteSet { expected: n, got: encodings.len() });
    }
    let alphas: Vec<&DMatrix<f64>> = encodings.iter().map(|e| &e.alpha).collect();
    aggregate_alphas(&alphas, &params.public)
}

/// Server-side evaluation over raw encodings. Only public matrices are
/// touched; completeness of the client set is the caller's responsibility.
pub fn aggregate_alphas(alphas: &[&DMatrix<f64>], public: &SrfcPublic) -> Result<DMatrix<f64>> {
    let c = public.tau1.nrows();
    let r = public.beta.nrows();
    let mut sum = DMatrix::zeros(c, c);
    for a in alphas {
        check_shape("alpha", a.shape(), (c, c))?;
        sum += *a;
    }
    let mut acc = (&public.beta * sum) * &public.tau1;
    let col2 = column_norms(&public.tau2);
    let col3 = column_norms(&public.tau3);
    for a in alphas {
        let ba = &public.beta * *a;
        let sq = &ba * *a;
        acc += signed_root_branch(&sq, &public.tau2, &public.tau3, &col2, &col3);
    }
    if !acc.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("SRFC aggregate".into()));
    }
    debug_assert_eq!(acc.nrows(), r);
    Ok(acc * 0.5)
}

// F^{-1}(sq tau2 + F^{-1}(sq tau3)) where sq = beta alpha^2.
fn signed_root_branch(sq: &DMatrix<f64>, tau2: &DMatrix<f64>, tau3: &DMatrix<f64>, col2: &[f64], col3: &[f64]) -> DMatrix<f64> {
    signed_root_parts(sq, tau2, tau3, col2, col3).1
}

// Returns the inner root F^{-1}(sq tau3) and the full branch.
//
// Both signed roots amplify rounding residue near zero, so each argument is
// compared with an estimate of its own rounding scale first: the
// Cauchy-Schwarz bound of the product, plus for the outer root the inner
// root's sensitivity 1/(2 sqrt|t|).
fn signed_root_parts(
    sq: &DMatrix<f64>,
    tau2: &DMatrix<f64>,
    tau3: &DMatrix<f64>,
    col2: &[f64],
    col3: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows: Vec<f64> = sq.row_iter().map(|r| r.norm()).collect();
    let t = sq * tau3;
    let mut inner = DMatrix::zeros(t.nrows(), t.ncols());
    let mut z = sq * tau2;
    let (nr, nc) = t.shape();
    for k in 0..nc {
        for j in 0..nr {
            let s3 = rows[j] * col3[k];
            let tv = t[(j, k)];
            let mut scale = rows[j] * col2[k];
            if tv.abs() > FLUSH_RATIO * s3 {
                inner[(j, k)] = tv.signum() * tv.abs().sqrt();
                z[(j, k)] += inner[(j, k)];
                scale += s3 / (2.0 * tv.abs().sqrt());
            }
            if z[(j, k)].abs() <= FLUSH_RATIO * scale {
                z[(j, k)] = 0.0;
            }
        }
    }
    (inner, signed_sqrt(&z))
}

fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

/// `tr(encoded beta^T) / r`.
pub fn decode_relu_sum(encoded: &DMatrix<f64>, params: &SrfcParams) -> Result<f64> {
    decode_with_beta(encoded, &params.public.beta)
}

pub fn decode_with_beta(encoded: &DMatrix<f64>, beta: &DMatrix<f64>) -> Result<f64> {
    check_shape("encoded ReLU sum", encoded.shape(), beta.shape())?;
    Ok(encoded.component_mul(beta).sum() / beta.nrows() as f64)
}

/// Max-abs residuals of the four intermediate identities on a probe:
/// the `tau1` contraction, the `tau3` branch, the combined signed root and
/// the final assembly. The roots are the ones the decoder computes,
/// including its flush of rounding residue.
pub fn identity_residuals(params: &SrfcParams, xs: &[f64]) -> Result<[f64; 4]> {
    let n = params.n();
    if xs.len() != n {
        return Err(Error::IncompleteSet { expected: n, got: xs.len() });
    }
    let fam = &params.family;
    let pubm = &params.public;
    let encs = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| encode_alpha(x, i, params))
        .collect::<Result<Vec<_>>>()?;

    let mut sum = DMatrix::zeros(params.c(), params.c());
    let mut want1 = DMatrix::zeros(params.r(), params.c());
    let mut want4 = DMatrix::zeros(params.r(), params.c());
    let mut res2 = 0.0f64;
    let mut res3 = 0.0f64;
    let col2 = column_norms(&pubm.tau2);
    let col3 = column_norms(&pubm.tau3);
    for (i, e) in encs.iter().enumerate() {
        let x = xs[i];
        let mi = fam.block(i);
        let mn = fam.block(i + n);
        sum += &e.alpha;
        want1 += mi * x + &params.r0[i] + &params.zeta[i] * mn;
        want4 += mi * x.max(0.0) + &params.zeta[i] * mn * 0.5;

        let sq = (&pubm.beta * &e.alpha) * &e.alpha;
        let (branch3, combined) = signed_root_parts(&sq, &pubm.tau2, &pubm.tau3, &col2, &col3);
        let want2 = mi.component_mul(&params.r1[i]) * (2.0 * x.abs()) - &params.r2[i];
        res2 = res2.max((&branch3 - want2).amax());
        let want3 = mi * x.abs() + &params.r1[i];
        res3 = res3.max((combined - want3).amax());
    }
    let got1 = (&pubm.beta * sum) * &pubm.tau1;
    let res1 = (got1 - want1).amax();
    let got4 = aggregate_encoded_relu(&encs, params)?;
    let res4 = (got4 - want4).amax();
    Ok([res1, res2, res3, res4])
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub chosen: SignConfig,
    pub residuals: Vec<(SignConfig, [f64; 4])>,
}

const PROBE_TOL: f64 = 1e-8;
const PROBE_SEED: u64 = 0x5eed_0f_5afe;

/// Tries every sign placement on a small mixed-sign probe and returns the
/// first one under which all four identities hold.
pub fn calibrate_signs() -> Result<Calibration> {
    let xs = [0.8, -0.55, 0.3];
    let mut residuals = Vec::new();
    let mut chosen = None;
    for cand in SignConfig::candidates() {
        let params = gen_params_with_signs(xs.len(), 3, 1.0, cand, PROBE_SEED)?;
        let res = identity_residuals(&params, &xs)?;
        if chosen.is_none() && res.iter().all(|v| *v <= PROBE_TOL) {
            chosen = Some(cand);
        }
        residuals.push((cand, res));
    }
    match chosen {
        Some(chosen) => Ok(Calibration { chosen, residuals }),
        None => Err(Error::Calibration(format!("no sign placement passed: {residuals:?}"))),
    }
}
