//! Flat binary layout shared by in-process messages and on-disk fixtures.
//!
//! A message is a 16-byte header followed by `count` matrices. Header fields,
//! all little-endian: `round: u32`, `sender: u32`, `kind: u16`,
//! `reserved: u16` (zero), `count: u32`. Each matrix is `rows: u32`,
//! `cols: u32`, then `rows * cols` `f64` values in row-major order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kdc::{EncodeKey, LayerPlan};
use crate::moma::MomaFamily;
use crate::protocol::{EncodedGradient, Issuer};
use crate::vomca::VomcaKeys;

pub const HEADER_LEN: usize = 16;
/// Sender id used for messages that originate at the KDC.
pub const KDC_SENDER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum PayloadKind {
    Gradient = 1,
    NullGradient = 2,
    EncodeKey = 3,
    KeyBundle = 4,
    TransformKeys = 5,
}

impl TryFrom<u16> for PayloadKind {
    type Error = Error;

    fn try_from(v: u16) -> Result<Self> {
        Ok(match v {
            1 => Self::Gradient,
            2 => Self::NullGradient,
            3 => Self::EncodeKey,
            4 => Self::KeyBundle,
            5 => Self::TransformKeys,
            _ => return Err(Error::Wire(format!("unknown payload kind {v}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub round: u32,
    pub sender: u32,
    pub kind: PayloadKind,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Header,
    pub matrices: Vec<DMatrix<f64>>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Wire(format!("{what} {v} exceeds u32")))
}

pub fn encode(round: u32, sender: u32, kind: PayloadKind, matrices: &[&DMatrix<f64>]) -> Result<Vec<u8>> {
    let body: usize = matrices.iter().map(|m| 8 + 8 * m.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&sender.to_le_bytes());
    out.extend_from_slice(&(kind as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&to_u32(matrices.len(), "matrix count")?.to_le_bytes());
    for m in matrices {
        out.extend_from_slice(&to_u32(m.nrows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&to_u32(m.ncols(), "cols")?.to_le_bytes());
        for row in m.row_iter() {
            for v in row.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Wire(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u16(&mut self) -> Result<u16> {
        self.take::<2>().map(u16::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

pub fn decode(buf: &[u8]) -> Result<Message> {
    let mut rd = Reader { buf, pos: 0 };
    let round = rd.u32()?;
    let sender = rd.u32()?;
    let kind = PayloadKind::try_from(rd.u16()?)?;
    if rd.u16()? != 0 {
        return Err(Error::Wire("reserved header field is not zero".into()));
    }
    let count = rd.u32()?;
    let mut matrices = Vec::new();
    for _ in 0..count {
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= buf.len() - rd.pos)
            .ok_or_else(|| Error::Wire(format!("matrix {rows}x{cols} overruns the buffer")))?;
        let data = (0..len).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
        matrices.push(DMatrix::from_row_slice(rows, cols, &data));
    }
    if rd.pos != buf.len() {
        return Err(Error::Wire(format!("{} trailing bytes", buf.len() - rd.pos)));
    }
    Ok(Message { header: Header { round, sender, kind, count }, matrices })
}

/// Number of `f64` entries carried by a message, read from the bytes alone.
pub fn payload_entries(buf: &[u8]) -> Result<usize> {
    Ok(decode(buf)?.matrices.iter().map(|m| m.len()).sum())
}

pub fn write_gradient(d: &EncodedGradient) -> Result<Vec<u8>> {
    let kind = match d.issuer {
        Issuer::Client => PayloadKind::Gradient,
        Issuer::Kdc => PayloadKind::NullGradient,
    };
    let refs: Vec<_> = d.deltas.iter().collect();
    encode(d.round, to_u32(d.owner, "owner")?, kind, &refs)
}

pub fn read_gradient(buf: &[u8]) -> Result<EncodedGradient> {
    let msg = decode(buf)?;
    let issuer = match msg.header.kind {
        PayloadKind::Gradient => Issuer::Client,
        PayloadKind::NullGradient => Issuer::Kdc,
        other => return Err(Error::Wire(format!("expected a gradient, got {other:?}"))),
    };
    Ok(EncodedGradient {
        deltas: msg.matrices,
        owner: msg.header.sender as usize,
        round: msg.header.round,
        issuer,
    })
}

/// `ek0` first, then one `ek1` row per segment.
pub fn write_encode_key(ek: &EncodeKey) -> Result<Vec<u8>> {
    let mut refs = vec![&ek.ek0];
    refs.extend(ek.ek1.iter());
    encode(ek.round, KDC_SENDER, PayloadKind::EncodeKey, &refs)
}

pub fn read_encode_key(buf: &[u8], owner: usize) -> Result<EncodeKey> {
    let msg = expect(decode(buf)?, PayloadKind::EncodeKey)?;
    let mut it = msg.matrices.into_iter();
    let ek0 = it.next().ok_or_else(|| Error::Wire("encode key without ek0".into()))?;
    Ok(EncodeKey { owner, round: msg.header.round, ek0, ek1: it.collect() })
}

/// `2n` family blocks, `n` masks, `n` verifier masks.
pub fn write_key_bundle(keys: &VomcaKeys) -> Result<Vec<u8>> {
    let refs: Vec<_> = keys
        .family()
        .blocks()
        .iter()
        .chain(keys.masks())
        .chain(keys.verifier_masks())
        .collect();
    encode(0, KDC_SENDER, PayloadKind::KeyBundle, &refs)
}

pub fn read_key_bundle(buf: &[u8], seed: u64) -> Result<VomcaKeys> {
    let msg = expect(decode(buf)?, PayloadKind::KeyBundle)?;
    if msg.matrices.len() % 4 != 0 || msg.matrices.is_empty() {
        return Err(Error::Wire(format!("key bundle holds {} matrices, want 4n", msg.matrices.len())));
    }
    let n = msg.matrices.len() / 4;
    let mut it = msg.matrices.into_iter();
    let blocks: Vec<_> = it.by_ref().take(2 * n).collect();
    let masks: Vec<_> = it.by_ref().take(n).collect();
    let verifier: Vec<_> = it.collect();
    VomcaKeys::with_verifier(MomaFamily::from_blocks(blocks, seed)?, masks, verifier)
}

/// Every level's transformation keys followed by the root decoding row.
pub fn write_transform_keys(plan: &LayerPlan, round: u32) -> Result<Vec<u8>> {
    let mut refs: Vec<_> = plan.transform_keys().iter().flatten().collect();
    refs.push(plan.root_row());
    encode(round, KDC_SENDER, PayloadKind::TransformKeys, &refs)
}

fn expect(msg: Message, kind: PayloadKind) -> Result<Message> {
    if msg.header.kind == kind {
        Ok(msg)
    } else {
        Err(Error::Wire(format!("expected {kind:?}, got {:?}", msg.header.kind)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kdc::{init_keys, plan_layers, ProtocolDims};
    use crate::protocol::client_encode;
    use nalgebra::DVector;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode(7, 3, PayloadKind::Gradient, &[&m]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 + 6 * 8);
        assert_eq!(&bytes[0..4], &7u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..10], &1u16.to_le_bytes());
        assert_eq!(&bytes[10..12], &[0, 0]);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        // Row-major: the second value is (0, 1).
        assert_eq!(&bytes[32..40], &2.0f64.to_le_bytes());
    }

    #[test]
    fn malformed_input_rejected() {
        let m = DMatrix::from_element(2, 2, 1.5);
        let bytes = encode(0, 0, PayloadKind::KeyBundle, &[&m]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad_kind = bytes.clone();
        bad_kind[8] = 99;
        assert!(decode(&bad_kind).is_err());
        let mut reserved = bytes.clone();
        reserved[10] = 1;
        assert!(decode(&reserved).is_err());
        let mut huge = bytes;
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
    }

    #[test]
    fn gradient_and_key_round_trip() {
        let dims = ProtocolDims::segmented(3, 2, 5, 2).unwrap();
        let km = init_keys(&dims, &[DVector::from_element(5, 1.0), DVector::from_element(5, -0.5)], 4).unwrap();
        let g = DVector::from_fn(5, |i, _| i as f64 - 1.5);
        let d = client_encode(&g, 1, km.encode_key(2), km.a(), &dims).unwrap();
        assert_eq!(read_gradient(&write_gradient(&d).unwrap()).unwrap(), d);
        let null = EncodedGradient::null(km.encode_key(0));
        assert_eq!(read_gradient(&write_gradient(&null).unwrap()).unwrap(), null);

        let ek = km.encode_key(1);
        let back = read_encode_key(&write_encode_key(ek).unwrap(), 1).unwrap();
        assert_eq!(back.ek0, ek.ek0);
        assert_eq!(back.ek1, ek.ek1);
        assert_eq!(back.round, ek.round);
        assert!(read_gradient(&write_encode_key(ek).unwrap()).is_err());
    }

    #[test]
    fn key_bundle_round_trip() {
        let keys = VomcaKeys::keygen(3, 2, 12, 8).unwrap();
        let back = read_key_bundle(&write_key_bundle(&keys).unwrap(), 8).unwrap();
        assert_eq!(back.family().blocks(), keys.family().blocks());
        assert_eq!(back.dk(), keys.dk());
        assert_eq!(back.vk().first, keys.vk().first);
        let x = DMatrix::from_element(2, 2, 0.25);
        let ct = crate::vomca::encode(&x, 1, &keys).unwrap();
        assert!(crate::vomca::verify(&ct, &back));
    }

    #[test]
    fn transform_key_bytes_match_size_formula() {
        for (n, xi) in [(4, vec![2, 2]), (8, vec![2, 2, 2]), (4, vec![4]), (6, vec![1, 3, 2])] {
            let dims = ProtocolDims::new(n, 1, 2).unwrap();
            let km = init_keys(&dims, &[DVector::from_element(2, 1.0)], 2).unwrap();
            let plan = plan_layers(&km, &xi, 3).unwrap();
            let bytes = write_transform_keys(&plan, 0).unwrap();
            let entries = payload_entries(&bytes).unwrap();
            assert_eq!(entries, plan.key_size_formula(), "n={n} xi={xi:?}");
            let count = plan.transform_keys().iter().flatten().count() + 1;
            assert_eq!(bytes.len(), HEADER_LEN + 8 * count + 8 * entries);
        }
    }

    proptest! {
        #[test]
        fn arbitrary_matrices_round_trip(
            shapes in proptest::collection::vec((0usize..5, 0usize..5), 0..4),
            round in any::<u32>(),
            sender in any::<u32>(),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::substream(seed, 0);
            let mats: Vec<_> = shapes.iter().map(|&(r, c)| crate::moma::gaussian(r, c, &mut rng)).collect();
            let refs: Vec<_> = mats.iter().collect();
            let bytes = encode(round, sender, PayloadKind::EncodeKey, &refs).unwrap();
            let msg = decode(&bytes).unwrap();
            prop_assert_eq!(msg.header.round, round);
            prop_assert_eq!(msg.header.sender, sender);
            prop_assert_eq!(msg.header.count as usize, mats.len());
            prop_assert_eq!(msg.matrices, mats);
        }
    }
}
