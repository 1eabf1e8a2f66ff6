//! Key transformation between orthogonal families.
//!
//! A ciphertext `x M_i + R_i M_{i+n}` is moved into a destination family by
//! right-multiplying with
//! `tk_i = M_i^T M'_{C(i)} + M_{i+n}^T (M'_{C(i+n)} + R_i^{-1} R'_i)`,
//! which yields `x M'_{C(i)} + R_i M'_{C(i+n)} + R'_i`.

use nalgebra::DMatrix;

use crate::error::{check_shape, Error, Result};
use crate::moma::{self, MaskSet, MomaFamily};
use crate::rng;
use crate::vomca::{Ciphertext, VomcaKeys};

const SOURCE_COND_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformKey {
    pub tk: DMatrix<f64>,
    pub source: usize,
    pub dst_main: usize,
    pub dst_mask: usize,
}

impl TransformKey {
    pub fn entries(&self) -> usize {
        self.tk.len()
    }
}

/// Keys for every source ciphertext of `src`. `mapping` has `2n` entries:
/// `mapping[i]` is `C(i)` and `mapping[i + n]` is `C(i + n)`.
pub fn gen_transform_keys(
    src: &VomcaKeys,
    dst: &MomaFamily,
    mapping: &[usize],
    fresh: &[DMatrix<f64>],
) -> Result<Vec<TransformKey>> {
    gen_keys_raw(src.family(), src.masks(), dst, mapping, Some(fresh))
}

/// Same construction over an explicit source family and masks. With
/// `fresh = None` the mask term of the key is omitted and the source masks
/// need not be invertible.
pub fn gen_keys_raw(
    src_family: &MomaFamily,
    src_masks: &[DMatrix<f64>],
    dst: &MomaFamily,
    mapping: &[usize],
    fresh: Option<&[DMatrix<f64>]>,
) -> Result<Vec<TransformKey>> {
    let n = src_masks.len();
    let r = src_family.rows();
    if src_family.len() < 2 * n {
        return Err(Error::InvalidParameter("source family needs 2n blocks".into()));
    }
    if dst.rows() != r {
        return Err(Error::ShapeMismatch {
            expected: format!("destination blocks with {r} rows"),
            got: format!("{} rows", dst.rows()),
        });
    }
    if mapping.len() != 2 * n {
        return Err(Error::IncompleteSet { expected: 2 * n, got: mapping.len() });
    }
    for &c in mapping {
        if c >= dst.len() {
            return Err(Error::IndexOutOfRange { index: c, limit: dst.len() });
        }
    }
    if let Some(f) = fresh {
        if f.len() != n {
            return Err(Error::IncompleteSet { expected: n, got: f.len() });
        }
        for m in f {
            check_shape("fresh mask", m.shape(), (r, dst.cols()))?;
        }
    }

    let mut keys = Vec::with_capacity(n);
    for i in 0..n {
        let mi = src_family.block(i);
        let mn = src_family.block(i + n);
        let mut mask_target = dst.block(mapping[i + n]).clone();
        if let Some(f) = fresh {
            let cond = moma::condition_number(&src_masks[i]);
            let inv = if cond <= SOURCE_COND_LIMIT { src_masks[i].clone().try_inverse() } else { None };
            let inv = inv.ok_or_else(|| Error::Singular(format!("source mask {i} (cond {cond:e})")))?;
            mask_target += inv * &f[i];
        }
        let mut tk = DMatrix::zeros(src_family.cols(), dst.cols());
        tk.gemm_tr(1.0, mi, dst.block(mapping[i]), 0.0);
        tk.gemm_tr(1.0, mn, &mask_target, 1.0);
        keys.push(TransformKey { tk, source: i, dst_main: mapping[i], dst_mask: mapping[i + n] });
    }
    Ok(keys)
}

/// Fresh masks that sum to zero inside every destination group.
pub fn fresh_group_masks(groups: &[Vec<usize>], n: usize, r: usize, c: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    let mut out = vec![None; n];
    for (g, members) in groups.iter().enumerate() {
        let set = MaskSet::zero_sum(members.len(), r, c, rng::derive_index(seed, g as u64))?;
        for (&i, m) in members.iter().zip(set.into_members()) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, limit: n });
            }
            out[i] = Some(m);
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or_else(|| Error::InvalidParameter(format!("source {i} in no group"))))
        .collect()
}

pub fn transform(ct: &Ciphertext, tk: &TransformKey) -> Result<Ciphertext> {
    if ct.value.ncols() != tk.tk.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("ciphertext with {} columns", tk.tk.nrows()),
            got: format!("{} columns", ct.value.ncols()),
        });
    }
    Ok(Ciphertext { value: &ct.value * &tk.tk, owner: ct.owner })
}

/// Sum of several keys, for applying one combined key to a group.
pub fn sum_keys(keys: &[&TransformKey]) -> Result<DMatrix<f64>> {
    let first = keys.first().ok_or_else(|| Error::InvalidParameter("no keys to sum".into()))?;
    let mut acc = first.tk.clone();
    for k in &keys[1..] {
        check_shape("transform key", k.tk.shape(), acc.shape())?;
        acc += &k.tk;
    }
    Ok(acc)
}

/// `dk' = sum_{i in group} M'_{C(i)}`, repeated indices counted again.
/// Rejects groups where a mask channel coincides with a main channel.
pub fn group_decode_key(dst: &MomaFamily, mapping: &[usize], group: &[usize]) -> Result<DMatrix<f64>> {
    let n = mapping.len() / 2;
    let mut dk = DMatrix::zeros(dst.rows(), dst.cols());
    for &i in group {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, limit: n });
        }
        dk += dst.try_block(mapping[i])?;
    }
    for &i in group {
        if group.iter().any(|&j| mapping[j] == mapping[i + n]) {
            return Err(Error::InvalidParameter(format!(
                "mask channel of source {i} collides with a main channel"
            )));
        }
    }
    Ok(dk)
}

/// Multiplicity of the main channels in a group when it is uniform; this is
/// the constant the grouped decode scales every secret by.
pub fn decode_constant(mapping: &[usize], group: &[usize]) -> Option<f64> {
    let count = |c: usize| group.iter().filter(|&&j| mapping[j] == c).count();
    let first = count(mapping[*group.first()?]);
    group.iter().all(|&i| count(mapping[i]) == first).then_some(first as f64)
}

pub fn grouped_decode(cts: &[Ciphertext], dk: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut acc = DMatrix::zeros(dk.nrows(), dk.ncols());
    for ct in cts {
        check_shape("transformed ciphertext", ct.value.shape(), dk.shape())?;
        acc += &ct.value;
    }
    Ok(acc * dk.transpose())
}
