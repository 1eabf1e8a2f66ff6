//! Mutually orthogonal matrix families, zero-sum masks and the signed-square
//! maps shared by every masking mechanism in the crate.
//!
//! A family is a list of `k` wide blocks, each `r x c`, cut as consecutive
//! row bands from one `c x c` orthogonal matrix. The blocks satisfy
//! `M_i * M_j^T = I` for `i == j` and `0` otherwise, which is what lets a
//! secret embedded through one block be read back through the sum of all
//! blocks without interference from the others.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_shape, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct MomaFamily {
    blocks: Vec<DMatrix<f64>>,
    rows: usize,
    cols: usize,
    seed: u64,
}

impl MomaFamily {
    /// Samples a family of `k` blocks of shape `r x c`.
    ///
    /// The generator draws a `c x c` standard normal matrix, orthonormalizes
    /// it (Householder QR with the sign of `R`'s diagonal folded into `Q`, so
    /// the result is unique for a given draw) and slices the first `k * r`
    /// rows of `Q^T` into blocks.
    pub fn generate(k: usize, r: usize, c: usize, seed: u64) -> Result<Self> {
        Self::check_dims(k, r, c)?;
        let mut rng = rng::substream(seed, rng::streams::FAMILY);
        let q = random_orthogonal(c, &mut rng);
        Self::from_orthogonal(&q, k, r, seed)
    }

    /// Builds a family from an explicit orthogonal matrix (row bands of `q`).
    /// Used by tests that want a known family such as the identity.
    pub fn from_orthogonal(q: &DMatrix<f64>, k: usize, r: usize, seed: u64) -> Result<Self> {
        let c = q.ncols();
        Self::check_dims(k, r, c)?;
        if q.nrows() != c {
            return Err(Error::ShapeMismatch {
                expected: format!("square {c}x{c}"),
                got: format!("{}x{}", q.nrows(), c),
            });
        }
        let blocks = (0..k).map(|b| q.rows(b * r, r).into_owned()).collect();
        Ok(Self { blocks, rows: r, cols: c, seed })
    }

    /// Rebuilds a family from stored blocks. Orthogonality is not
    /// re-checked; see [`MomaFamily::max_gram_error`].
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>, seed: u64) -> Result<Self> {
        let (r, c) = blocks.first().map(|b| b.shape()).unwrap_or((0, 0));
        Self::check_dims(blocks.len(), r, c)?;
        for b in &blocks {
            check_shape("family block", b.shape(), (r, c))?;
        }
        Ok(Self { blocks, rows: r, cols: c, seed })
    }

    fn check_dims(k: usize, r: usize, c: usize) -> Result<()> {
        if k == 0 || r == 0 || c == 0 {
            return Err(Error::InvalidParameter(format!(
                "family dimensions must be positive (k={k}, r={r}, c={c})"
            )));
        }
        if c < k * r {
            return Err(Error::InsufficientDimension { blocks: k, rows: r, cols: c });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn try_block(&self, i: usize) -> Result<&DMatrix<f64>> {
        self.blocks
            .get(i)
            .ok_or(Error::IndexOutOfRange { index: i, limit: self.blocks.len() })
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Elementwise sum of the blocks in `range`.
    pub fn sum_range(&self, range: std::ops::Range<usize>) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.rows, self.cols);
        for b in &self.blocks[range] {
            acc += b;
        }
        acc
    }

    pub fn sum(&self) -> DMatrix<f64> {
        self.sum_range(0..self.blocks.len())
    }

    /// Largest entry of `M_i M_j^T - delta_ij I` over all block pairs.
    pub fn max_gram_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, bi) in self.blocks.iter().enumerate() {
            for (j, bj) in self.blocks.iter().enumerate() {
                let mut g = bi * bj.transpose();
                if i == j {
                    for d in 0..self.rows {
                        g[(d, d)] -= 1.0;
                    }
                }
                worst = worst.max(g.amax());
            }
        }
        worst
    }
}

/// Uniformly distributed `n x n` orthogonal matrix from a Gaussian draw.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = gaussian(n, n, rng);
    orthonormalize(g)
}

/// Orthonormalizes the columns of a square matrix, fixing signs so that the
/// triangular factor has a positive diagonal.
pub fn orthonormalize(g: DMatrix<f64>) -> DMatrix<f64> {
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    // Rows of the returned matrix are the orthonormal basis we slice from.
    q.transpose()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random orthogonal times a diagonal with entries in `[0.5, 2]`; the
/// condition number is at most 4.
pub fn well_conditioned(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let q = random_orthogonal(n, rng);
    let d = DVector::from_fn(n, |_, _| rng.random_range(0.5..=2.0));
    q * DMatrix::from_diagonal(&d)
}

/// 2-norm condition number via singular values; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Entrywise `sign(a) * a^2`.
pub fn signed_square(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.map(|v| v * v.abs())
}

/// Entrywise `sign(a) * sqrt(|a|)`; zero maps to zero.
pub fn signed_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.map(|v| {
        if v == 0.0 {
            0.0
        } else {
            v.signum() * v.abs().sqrt()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    ZeroSum,
    UnitNormZeroSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    members: Vec<DMatrix<f64>>,
    kind: MaskKind,
    seed: u64,
}

impl MaskSet {
    /// `n - 1` standard normal members followed by their negated sum.
    pub fn zero_sum(n: usize, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("mask count must be at least 1".into()));
        }
        let mut rng = rng::substream(seed, rng::streams::ZERO_SUM);
        let mut members = Vec::with_capacity(n);
        let mut acc = DMatrix::zeros(rows, cols);
        for _ in 0..n - 1 {
            let m = gaussian(rows, cols, &mut rng);
            acc += &m;
            members.push(m);
        }
        members.push(-acc);
        Ok(Self { members, kind: MaskKind::ZeroSum, seed })
    }

    /// Unit-norm row vectors that sum to zero: `v_i = cos(2 pi i / n + phi) u
    /// + sin(2 pi i / n + phi) w` for a random orthonormal pair `(u, w)`.
    pub fn unit_zero_sum(n: usize, dim: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(
                "unit-norm zero-sum masks need at least 2 members".into(),
            ));
        }
        if dim < 2 {
            return Err(Error::InvalidParameter(
                "unit-norm zero-sum masks need dimension at least 2".into(),
            ));
        }
        let mut rng = rng::substream(seed, rng::streams::UNIT_ZERO_SUM);
        let (u, w) = orthonormal_pair(dim, &mut rng);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let members = (0..n)
            .map(|i| {
                let angle = std::f64::consts::TAU * i as f64 / n as f64 + phi;
                let v = &u * angle.cos() + &w * angle.sin();
                DMatrix::from_row_slice(1, dim, v.as_slice())
            })
            .collect();
        Ok(Self { members, kind: MaskKind::UnitNormZeroSum, seed })
    }

    /// Wraps externally built members (for instance masks derived under an
    /// extra linear constraint) after checking the zero-sum invariant.
    pub fn from_members(members: Vec<DMatrix<f64>>, kind: MaskKind, seed: u64) -> Result<Self> {
        let set = Self { members, kind, seed };
        if set.members.is_empty() {
            return Err(Error::InvalidParameter("empty mask set".into()));
        }
        let scale = set.members.iter().map(|m| m.amax()).fold(1.0, f64::max);
        if set.sum_residual() > 1e-9 * scale {
            return Err(Error::InvalidParameter("mask members do not sum to zero".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn member(&self, i: usize) -> &DMatrix<f64> {
        &self.members[i]
    }

    pub fn members(&self) -> &[DMatrix<f64>] {
        &self.members
    }

    pub fn into_members(self) -> Vec<DMatrix<f64>> {
        self.members
    }

    /// Max-abs entry of the elementwise member sum.
    pub fn sum_residual(&self) -> f64 {
        let (r, c) = self.members[0].shape();
        let mut acc = DMatrix::zeros(r, c);
        for m in &self.members {
            acc += m;
        }
        acc.amax()
    }
}

/// Zero-sum family of `n` invertible `r x r` matrices with every member's
/// condition number at most `max_cond`. The first `n - 1` members are well
/// conditioned by construction; the closing member is the negated sum and is
/// redrawn (together with the rest) until it also meets the bound.
pub fn invertible_zero_sum(n: usize, r: usize, max_cond: f64, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    if n < 2 {
        return Err(Error::Singular(
            "a zero-sum set with one member is the zero matrix".into(),
        ));
    }
    let mut rng = rng::substream(seed, rng::streams::INVERTIBLE);
    for _ in 0..64 {
        let mut members: Vec<DMatrix<f64>> = (0..n - 1).map(|_| well_conditioned(r, &mut rng)).collect();
        let mut last = DMatrix::zeros(r, r);
        for m in &members {
            last -= m;
        }
        if condition_number(&last) <= max_cond {
            members.push(last);
            return Ok(members);
        }
    }
    Err(Error::Singular(format!(
        "could not draw an invertible zero-sum set (n={n}, r={r}, cond<={max_cond})"
    )))
}

fn orthonormal_pair(dim: usize, rng: &mut Rng) -> (DVector<f64>, DVector<f64>) {
    loop {
        let a = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let b = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let na = a.norm();
        if na < 1e-8 {
            continue;
        }
        let u: DVector<f64> = a / na;
        let b = &b - &u * u.dot(&b);
        let nb = b.norm();
        if nb < 1e-8 {
            continue;
        }
        return (u, b / nb);
    }
}
