use std::ops::Range;

use super::DomainParams;
use crate::error::{Error, Result};

/// Packed evaluation of one key over the whole domain: bit `j` is
/// `Eval(k, j)`. Bits are LSB-first within each word and every bit past
/// `n_items` is zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareVector {
    domain: DomainParams,
    words: Vec<u64>,
}

pub(crate) fn words_for(bits: u64) -> usize {
    bits.div_ceil(64) as usize
}

impl ShareVector {
    pub fn zeros(domain: DomainParams) -> Self {
        ShareVector {
            domain,
            words: vec![0; words_for(domain.n_items())],
        }
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(domain: DomainParams, bits: I) -> Result<Self> {
        let mut out = ShareVector::zeros(domain);
        let mut len = 0u64;
        for bit in bits {
            if len == domain.n_items() {
                return Err(Error::Domain(format!("more than {} bits supplied", domain.n_items())));
            }
            out.set(len, bit);
            len += 1;
        }
        if len != domain.n_items() {
            return Err(Error::Domain(format!("expected {} bits, got {len}", domain.n_items())));
        }
        Ok(out)
    }

    /// The indicator vector of `index`.
    pub fn one_hot(domain: DomainParams, index: u64) -> Result<Self> {
        domain.check_index(index)?;
        let mut out = ShareVector::zeros(domain);
        out.set(index, true);
        Ok(out)
    }

    pub fn domain(&self) -> DomainParams {
        self.domain
    }

    pub fn len(&self) -> u64 {
        self.domain.n_items()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, index: u64) -> bool {
        assert!(index < self.len(), "bit {index} out of range");
        self.words[(index / 64) as usize] >> (index % 64) & 1 == 1
    }

    pub(crate) fn set(&mut self, index: u64, bit: bool) {
        let word = &mut self.words[(index / 64) as usize];
        let mask = 1u64 << (index % 64);
        if bit {
            *word |= mask;
        } else {
            *word &= !mask;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(|j| self.get(j))
    }

    /// Indices of set bits in increasing order.
    pub fn ones(&self) -> impl Iterator<Item = u64> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as u64;
                rest &= rest - 1;
                Some(w as u64 * 64 + bit)
            })
        })
    }

    pub fn xor(&self, other: &ShareVector) -> Result<ShareVector> {
        if self.domain != other.domain {
            return Err(Error::Domain(format!(
                "share vectors of length {} and {} cannot be combined",
                self.len(),
                other.len()
            )));
        }
        Ok(ShareVector {
            domain: self.domain,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a ^ b).collect(),
        })
    }

    /// Copies `len` bits from `bits` (LSB-first) into positions
    /// `offset..offset + len`.
    pub(crate) fn write_bits(&mut self, offset: u64, bits: &[u64], len: u64) {
        debug_assert!(offset + len <= self.len());
        if offset.is_multiple_of(64) {
            let first = (offset / 64) as usize;
            let full = (len / 64) as usize;
            self.words[first..first + full].copy_from_slice(&bits[..full]);
            for j in full as u64 * 64..len {
                self.set(offset + j, bits[(j / 64) as usize] >> (j % 64) & 1 == 1);
            }
        } else {
            for j in 0..len {
                self.set(offset + j, bits[(j / 64) as usize] >> (j % 64) & 1 == 1);
            }
        }
    }

    /// Bits `range` repacked so that `range.start` lands on bit 0 of the
    /// first word.
    pub fn extract(&self, range: Range<u64>) -> Vec<u64> {
        assert!(range.start <= range.end && range.end <= self.len());
        let len = range.end - range.start;
        let shift = (range.start % 64) as u32;
        let base = (range.start / 64) as usize;
        let mut out: Vec<u64> = (0..words_for(len))
            .map(|k| {
                let lo = self.words[base + k] >> shift;
                let hi = if shift == 0 {
                    0
                } else {
                    self.words.get(base + k + 1).map_or(0, |w| w << (64 - shift))
                };
                lo | hi
            })
            .collect();
        if !len.is_multiple_of(64) {
            if let Some(last) = out.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        out
    }

    /// Packed bytes, LSB-first within each byte, `ceil(n_items / 8)` long.
    pub fn packed_bytes(&self) -> Vec<u8> {
        let mut bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        bytes.truncate(self.len().div_ceil(8) as usize);
        bytes
    }

    /// `n_items` as u64-LE followed by the packed bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.len().to_le_bytes().to_vec();
        out.extend(self.packed_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated share vector header"))?;
        let domain = DomainParams::new(u64::from_le_bytes(header)).map_err(|e| Error::format(0, e.to_string()))?;
        let body = &bytes[8..];
        let expected = domain.n_items().div_ceil(8);
        if body.len() as u64 != expected {
            return Err(Error::format(
                8 + body.len().min(expected as usize) as u64,
                format!("expected {expected} packed bytes, found {}", body.len()),
            ));
        }
        let mut out = ShareVector::zeros(domain);
        for (word, chunk) in out.words.iter_mut().zip(body.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *word = u64::from_le_bytes(buf);
        }
        let tail = domain.n_items() % 64;
        if tail != 0 && out.words.last().is_some_and(|w| w >> tail != 0) {
            return Err(Error::format(
                bytes.len() as u64 - 1,
                "padding bits past n_items must be zero",
            ));
        }
        Ok(out)
    }
}
