//! Binary checkpoint container and the factor codec used at the map/reduce
//! boundary.
//!
//! All integers and floats are little-endian. Layout (version 1):
//!
//! ```text
//! magic        8 bytes   "TGPCKPT\0"
//! version      u32       1
//! round        u64       rounds completed
//! config_hash  32 bytes  SHA-256 of the canonical configuration
//! factors      factor block (below)
//! n_groups     u64
//! per group:   seed 32 bytes, stream u64, word_pos u128
//! has_group_factors  u8  (0 or 1)
//! if 1, per group: factor block
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! A factor block is `K: u32`, then per mode `rows: u64`, `cols: u64` and
//! `rows * cols` f64 values in row-major order.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{FactorRole, FactorSet};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"TGPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub config_hash: [u8; 32],
    pub factors: FactorSet,
    pub rng_states: Vec<RngState>,
    /// Only present when group factors persist across rounds.
    pub group_factors: Option<Vec<FactorSet>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
}

fn put_factors(out: &mut Vec<u8>, f: &FactorSet) {
    out.extend_from_slice(&(f.ndims() as u32).to_le_bytes());
    for m in f.matrices() {
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
}

fn read_factors(r: &mut Reader<'_>, role: FactorRole) -> Result<FactorSet> {
    let k = r.u32()? as usize;
    let mut mats = Vec::with_capacity(k.min(64));
    for _ in 0..k {
        let rows = r.usize()?;
        let cols = r.usize()?;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
            .ok_or_else(|| Error::Checkpoint("factor block larger than data".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        mats.push(DMatrix::from_row_slice(rows, cols, &data));
    }
    FactorSet::new(mats, role).map_err(|e| Error::Checkpoint(format!("bad factor block: {e}")))
}

/// Serializes a factor set as a single factor block.
pub fn encode_factors(f: &FactorSet) -> Vec<u8> {
    let mut out = Vec::new();
    put_factors(&mut out, f);
    out
}

pub fn decode_factors(bytes: &[u8], role: FactorRole) -> Result<FactorSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let f = read_factors(&mut r, role)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after factor block".into()));
    }
    Ok(f)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        put_factors(&mut out, &self.factors);
        out.extend_from_slice(&(self.rng_states.len() as u64).to_le_bytes());
        for s in &self.rng_states {
            out.extend_from_slice(&s.seed);
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        match &self.group_factors {
            None => out.push(0),
            Some(groups) => {
                out.push(1);
                for g in groups {
                    put_factors(&mut out, g);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let round = r.usize()?;
        let config_hash = r.array()?;
        let factors = read_factors(&mut r, FactorRole::Common)?;
        let n = r.usize()?;
        if n > body.len() {
            return Err(Error::Checkpoint("group count larger than data".into()));
        }
        let mut rng_states = Vec::with_capacity(n);
        for _ in 0..n {
            rng_states.push(RngState {
                seed: r.array()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            });
        }
        let group_factors = match r.u8()? {
            0 => None,
            1 => Some(
                (0..n)
                    .map(|id| read_factors(&mut r, FactorRole::Group(id)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            other => return Err(Error::Checkpoint(format!("bad group-factor flag {other}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            round,
            config_hash,
            factors,
            rng_states,
            group_factors,
        })
    }

    /// Writes through a temporary file and a rename, so a crash never leaves
    /// a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};

    fn sample() -> Checkpoint {
        let f = FactorSet::new(
            vec![
                DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 1e-300, f64::MAX, -0.0]),
                DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.3]),
            ],
            FactorRole::Common,
        )
        .unwrap();
        Checkpoint {
            round: 3,
            config_hash: [7; 32],
            factors: f.clone(),
            rng_states: vec![
                RngState::capture(&substream(1, Purpose::Group, 0)),
                RngState::capture(&substream(1, Purpose::Group, 1)),
            ],
            group_factors: Some(vec![
                f.clone().with_role(FactorRole::Group(0)),
                f.with_role(FactorRole::Group(1)),
            ]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let mut c = c;
        c.group_factors = None;
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(&bytes[20..52], &[7u8; 32]);
        // K, then the first mode's rows and cols
        assert_eq!(u32::from_le_bytes(bytes[52..56].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[56..64].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[64..72].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[72..80].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[80..88].try_into().unwrap()), -2.5);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        bytes[60] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Checkpoint(_))));
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"garbage").is_err());
    }

    #[test]
    fn factor_codec_round_trip() {
        let f = sample().factors;
        let back = decode_factors(&encode_factors(&f), FactorRole::Common).unwrap();
        assert_eq!(back, f);
        let mut bytes = encode_factors(&f);
        bytes.push(0);
        assert!(decode_factors(&bytes, FactorRole::Common).is_err());
    }
}
