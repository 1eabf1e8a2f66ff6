//! Verifiable orthogonal matrix confusion.
//!
//! Client `i` hides an `r x r` secret as `x M_i + R_i M_{i+n}`. Individual
//! ciphertexts decode to `x_i + R_i`; the masks cancel only in the full sum.
//! The verification key lets the server confirm that the mask component of
//! each ciphertext is the one the KDC issued.

use nalgebra::DMatrix;

use crate::error::{check_shape, Error, Result};
use crate::moma::{self, MaskSet, MomaFamily};
use crate::rng;

const VERIFY_TOL: f64 = 1e-8;
const MASK_COND_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStyle {
    /// Gaussian zero-sum masks.
    General,
    /// Well-conditioned invertible zero-sum masks, required when the
    /// ciphertexts will later be re-keyed.
    Invertible,
}

#[derive(Debug, Clone)]
pub struct VerifyKey {
    pub first: DMatrix<f64>,
    pub second: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct VomcaKeys {
    family: MomaFamily,
    masks: Vec<DMatrix<f64>>,
    verifier_masks: Vec<DMatrix<f64>>,
    dk: DMatrix<f64>,
    vk: VerifyKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub value: DMatrix<f64>,
    pub owner: usize,
}

impl VomcaKeys {
    pub fn keygen(n: usize, r: usize, c: usize, seed: u64) -> Result<Self> {
        Self::keygen_with(n, r, c, MaskStyle::General, seed)
    }

    pub fn keygen_with(n: usize, r: usize, c: usize, style: MaskStyle, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one client".into()));
        }
        let family = MomaFamily::generate(2 * n, r, c, rng::derive_seed(seed, "vomca/family"))?;
        let mask_seed = rng::derive_seed(seed, "vomca/masks");
        let masks = match style {
            MaskStyle::General => MaskSet::zero_sum(n, r, r, mask_seed)?.into_members(),
            MaskStyle::Invertible => moma::invertible_zero_sum(n, r, MASK_COND_LIMIT, mask_seed)?,
        };
        Self::from_parts(family, masks, seed)
    }

    /// Assembles keys over a caller-supplied family and masks.
    pub fn from_parts(family: MomaFamily, masks: Vec<DMatrix<f64>>, seed: u64) -> Result<Self> {
        if family.len() % 2 != 0 || family.is_empty() {
            return Err(Error::InvalidParameter("family must hold 2n blocks".into()));
        }
        let n = family.len() / 2;
        let r = family.rows();
        if masks.len() != n {
            return Err(Error::IncompleteSet { expected: n, got: masks.len() });
        }
        for m in &masks {
            check_shape("mask", m.shape(), (r, r))?;
        }
        let mut vrng = rng::substream(rng::derive_seed(seed, "vomca/verifier"), 0);
        let verifier_masks: Vec<_> = (0..n).map(|_| moma::gaussian(r, r, &mut vrng)).collect();
        Self::with_verifier(family, masks, verifier_masks)
    }

    /// Assembles keys from all three stored parts; `dk` and `vk` are derived.
    pub fn with_verifier(family: MomaFamily, masks: Vec<DMatrix<f64>>, verifier_masks: Vec<DMatrix<f64>>) -> Result<Self> {
        if family.len() % 2 != 0 || family.is_empty() {
            return Err(Error::InvalidParameter("family must hold 2n blocks".into()));
        }
        let n = family.len() / 2;
        let r = family.rows();
        if masks.len() != n || verifier_masks.len() != n {
            return Err(Error::IncompleteSet { expected: n, got: masks.len().min(verifier_masks.len()) });
        }
        for m in masks.iter().chain(&verifier_masks) {
            check_shape("mask", m.shape(), (r, r))?;
        }
        let dk = family.sum();
        let mut first = DMatrix::zeros(r, family.cols());
        for (i, v) in verifier_masks.iter().enumerate() {
            first += v * family.block(i + n);
        }
        let second = verifier_masks.iter().zip(&masks).map(|(v, m)| v * m.transpose()).collect();
        Ok(Self { family, masks, verifier_masks, dk, vk: VerifyKey { first, second } })
    }

    pub fn n(&self) -> usize {
        self.masks.len()
    }

    pub fn family(&self) -> &MomaFamily {
        &self.family
    }

    pub fn masks(&self) -> &[DMatrix<f64>] {
        &self.masks
    }

    pub fn verifier_masks(&self) -> &[DMatrix<f64>] {
        &self.verifier_masks
    }

    pub fn dk(&self) -> &DMatrix<f64> {
        &self.dk
    }

    pub fn vk(&self) -> &VerifyKey {
        &self.vk
    }
}

pub fn encode(x: &DMatrix<f64>, i: usize, keys: &VomcaKeys) -> Result<Ciphertext> {
    let n = keys.n();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, limit: n });
    }
    let r = keys.family.rows();
    check_shape("secret", x.shape(), (r, r))?;
    let value = x * keys.family.block(i) + &keys.masks[i] * keys.family.block(i + n);
    Ok(Ciphertext { value, owner: i })
}

/// Scalar convenience for `r = 1`.
pub fn encode_scalar(x: f64, i: usize, keys: &VomcaKeys) -> Result<Ciphertext> {
    encode(&DMatrix::from_element(1, 1, x), i, keys)
}

pub fn verify(ct: &Ciphertext, keys: &VomcaKeys) -> bool {
    let Some(expected) = keys.vk.second.get(ct.owner) else {
        return false;
    };
    if ct.value.shape() != keys.vk.first.shape() || !ct.value.iter().all(|v| v.is_finite()) {
        return false;
    }
    let got = &keys.vk.first * ct.value.transpose();
    let scale = expected.norm().max(1.0);
    (got - expected).amax() <= VERIFY_TOL * scale
}

/// `(sum chi_i) dk^T` over exactly the full client set.
pub fn decode_sum(cts: &[Ciphertext], keys: &VomcaKeys) -> Result<DMatrix<f64>> {
    let n = keys.n();
    let mut seen = vec![false; n];
    for ct in cts {
        if ct.owner >= n {
            return Err(Error::IndexOutOfRange { index: ct.owner, limit: n });
        }
        seen[ct.owner] = true;
    }
    if cts.len() != n || seen.iter().any(|s| !s) {
        return Err(Error::IncompleteSet { expected: n, got: cts.len() });
    }
    decode_partial(cts, keys)
}

/// Decodes any subset. Without the full set the surviving masks remain in
/// the result; this exists for tests that demonstrate that offset.
pub fn decode_partial(cts: &[Ciphertext], keys: &VomcaKeys) -> Result<DMatrix<f64>> {
    let (r, c) = (keys.family.rows(), keys.family.cols());
    let mut acc = DMatrix::zeros(r, c);
    for ct in cts {
        check_shape("ciphertext", ct.value.shape(), (r, c))?;
        acc += &ct.value;
    }
    Ok(acc * keys.dk.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_keys() -> VomcaKeys {
        let fam = MomaFamily::from_orthogonal(&DMatrix::identity(2, 2), 2, 1, 0).unwrap();
        VomcaKeys::from_parts(fam, vec![DMatrix::zeros(1, 1)], 0).unwrap()
    }

    #[test]
    fn identity_family_single_client() {
        let keys = identity_keys();
        assert_eq!(keys.dk(), &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_eq!(keys.masks()[0], DMatrix::zeros(1, 1));
        assert_eq!(keys.vk().second[0], DMatrix::zeros(1, 1));
        let ct = encode_scalar(5.0, 0, &keys).unwrap();
        assert_eq!(ct.value, DMatrix::from_row_slice(1, 2, &[5.0, 0.0]));
        assert!(verify(&ct, &keys));
        assert_eq!(decode_sum(&[ct], &keys).unwrap()[(0, 0)], 5.0);
    }

    #[test]
    fn decode_key_norm() {
        let keys = VomcaKeys::keygen(2, 1, 4, 3).unwrap();
        assert!((keys.dk().norm_squared() - 4.0).abs() <= 1e-9);
        let keys = VomcaKeys::keygen(3, 2, 14, 4).unwrap();
        let g = keys.dk() * keys.dk().transpose();
        assert!((g - DMatrix::identity(2, 2) * 6.0).amax() <= 1e-9);
    }

    #[test]
    fn partial_decode_is_mask_offset() {
        let keys = VomcaKeys::keygen(3, 2, 12, 8).unwrap();
        let mut rng = rng::substream(1, 0);
        let xs: Vec<_> = (0..3).map(|_| moma::gaussian(2, 2, &mut rng)).collect();
        let cts: Vec<_> = xs.iter().enumerate().map(|(i, x)| encode(x, i, &keys).unwrap()).collect();
        for (i, ct) in cts.iter().enumerate() {
            let d = decode_partial(std::slice::from_ref(ct), &keys).unwrap();
            assert!((d - &xs[i] - &keys.masks()[i]).amax() <= 1e-10);
        }
        let total = decode_sum(&cts, &keys).unwrap();
        let want = &xs[0] + &xs[1] + &xs[2];
        assert!((total - want).amax() <= 1e-9);
    }

    #[test]
    fn omitted_ciphertext_leaves_mask() {
        let keys = VomcaKeys::keygen(2, 1, 4, 5).unwrap();
        let a = encode_scalar(1.5, 0, &keys).unwrap();
        let b = encode_scalar(-0.5, 1, &keys).unwrap();
        assert!(matches!(decode_sum(&[a.clone()], &keys), Err(Error::IncompleteSet { .. })));
        assert!(matches!(decode_sum(&[a.clone(), a.clone()], &keys), Err(Error::IncompleteSet { .. })));
        let partial = decode_partial(&[a], &keys).unwrap()[(0, 0)];
        let residual = partial - 1.5;
        assert!((residual - keys.masks()[0][(0, 0)]).abs() <= 1e-12);
        assert!(residual.abs() > 1e-6);
        let _ = b;
    }

    #[test]
    fn tampering_rejected() {
        let keys = VomcaKeys::keygen(3, 1, 6, 11).unwrap();
        let ct = encode_scalar(0.3, 1, &keys).unwrap();
        assert!(verify(&ct, &keys));
        let mut bumped = ct.clone();
        bumped.value += keys.family().block(1 + 3) * 1.0;
        assert!(!verify(&bumped, &keys));
        let scaled = Ciphertext { value: &ct.value * 2.0, owner: 1 };
        assert!(!verify(&scaled, &keys));
        let wrong_owner = Ciphertext { value: ct.value.clone(), owner: 0 };
        assert!(!verify(&wrong_owner, &keys));
        assert!(encode_scalar(1.0, 3, &keys).is_err());
    }

    #[test]
    fn invertible_masks_requested() {
        let keys = VomcaKeys::keygen_with(4, 3, 24, MaskStyle::Invertible, 2).unwrap();
        for m in keys.masks() {
            assert!(moma::condition_number(m) <= MASK_COND_LIMIT);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn honest_accept_and_exact_sum(n in 1usize..9, r in 1usize..3, seed in any::<u64>()) {
            let keys = VomcaKeys::keygen(n, r, 2 * n * r, seed).unwrap();
            let mut rng = rng::substream(seed, 77);
            let xs: Vec<_> = (0..n).map(|_| moma::gaussian(r, r, &mut rng)).collect();
            let mut want = DMatrix::zeros(r, r);
            let mut cts = Vec::new();
            for (i, x) in xs.iter().enumerate() {
                let ct = encode(x, i, &keys).unwrap();
                prop_assert!(verify(&ct, &keys));
                cts.push(ct);
                want += x;
            }
            let got = decode_sum(&cts, &keys).unwrap();
            prop_assert!((got - &want).amax() <= 1e-9 * want.amax().max(1.0));
        }
    }
}
