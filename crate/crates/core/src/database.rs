//! Fixed-width record store and the reference XOR scan.
//!
//! Records are raw bytes laid out contiguously: record `j` lives at byte
//! offset `j * record_len`. [`naive_scan`] is the single-threaded
//! `r = XOR_j Eval(k, j) * D[j]` used both as the CPU baseline and as the
//! correctness oracle for the PIM pipeline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::thread;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dpf::ShareVector;
use crate::error::{Error, Result};
use crate::subresult::Subresult;

const DB_MAGIC: &[u8; 4] = b"IMPD";
const DB_VERSION: u8 = 1;
/// magic, version, 3 reserved bytes, n_items u64, record_len u32.
pub const DB_HEADER_LEN: usize = 20;

/// Default record width: a 256-bit hash.
pub const DEFAULT_RECORD_LEN: usize = 32;

#[derive(Clone, PartialEq, Eq)]
pub struct Database {
    n_items: u64,
    record_len: usize,
    payload: Vec<u8>,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database")
            .field("n_items", &self.n_items)
            .field("record_len", &self.record_len)
            .finish_non_exhaustive()
    }
}

fn payload_len(n_items: u64, record_len: usize) -> Result<usize> {
    n_items
        .checked_mul(record_len as u64)
        .and_then(|b| usize::try_from(b).ok())
        .filter(|&b| b <= isize::MAX as usize)
        .ok_or_else(|| {
            Error::Capacity(format!(
                "{n_items} records of {record_len} bytes overflow the host address space"
            ))
        })
}

fn alloc_payload(len: usize) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    payload
        .try_reserve_exact(len)
        .map_err(|e| Error::Capacity(format!("cannot allocate {len} payload bytes: {e}")))?;
    payload.resize(len, 0);
    Ok(payload)
}

impl Database {
    pub fn from_payload(n_items: u64, record_len: usize, payload: Vec<u8>) -> Result<Self> {
        if n_items == 0 || record_len == 0 {
            return Err(Error::Domain(format!(
                "a database needs n_items >= 1 and record_len >= 1, got {n_items} x {record_len}"
            )));
        }
        let expected = payload_len(n_items, record_len)?;
        if payload.len() != expected {
            return Err(Error::Domain(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        Ok(Database {
            n_items,
            record_len,
            payload,
        })
    }

    pub fn from_records<R: AsRef<[u8]>>(records: &[R]) -> Result<Self> {
        let record_len = records.first().map_or(0, |r| r.as_ref().len());
        if records.iter().any(|r| r.as_ref().len() != record_len) {
            return Err(Error::Domain("records must all have the same width".into()));
        }
        let payload = records.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Database::from_payload(records.len() as u64, record_len, payload)
    }

    /// Pseudorandom records, deterministic in `seed`.
    pub fn generate(n_items: u64, record_len: usize, seed: [u8; 32]) -> Result<Self> {
        if n_items == 0 || record_len == 0 {
            return Err(Error::Domain(format!(
                "a database needs n_items >= 1 and record_len >= 1, got {n_items} x {record_len}"
            )));
        }
        let mut payload = alloc_payload(payload_len(n_items, record_len)?)?;
        ChaCha8Rng::from_seed(seed).fill_bytes(&mut payload);
        Ok(Database {
            n_items,
            record_len,
            payload,
        })
    }

    pub fn n_items(&self) -> u64 {
        self.n_items
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn size_bytes(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn record(&self, index: u64) -> Option<&[u8]> {
        (index < self.n_items).then(|| {
            let start = index as usize * self.record_len;
            &self.payload[start..start + self.record_len]
        })
    }

    /// Bytes of records `range`.
    pub fn block(&self, range: Range<u64>) -> &[u8] {
        assert!(range.start <= range.end && range.end <= self.n_items);
        &self.payload[range.start as usize * self.record_len..range.end as usize * self.record_len]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(DB_MAGIC)?;
        out.write_all(&[DB_VERSION, 0, 0, 0])?;
        out.write_all(&self.n_items.to_le_bytes())?;
        let record_len = u32::try_from(self.record_len)
            .map_err(|_| Error::Capacity(format!("record_len {} exceeds u32", self.record_len)))?;
        out.write_all(&record_len.to_le_bytes())?;
        out.write_all(&self.payload)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Database::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut header = [0u8; DB_HEADER_LEN];
        let got = read_full(input, &mut header)?;
        if got < 4 || &header[..4] != DB_MAGIC {
            if got >= 4 {
                return Err(Error::format(0, "bad magic, expected \"IMPD\""));
            }
            return Err(Error::format(got as u64, "truncated header, expected magic \"IMPD\""));
        }
        if got < 5 {
            return Err(Error::format(got as u64, "truncated header"));
        }
        if header[4] != DB_VERSION {
            return Err(Error::format(4, format!("unsupported database version {}", header[4])));
        }
        if got < DB_HEADER_LEN {
            return Err(Error::format(got as u64, "truncated header"));
        }
        let n_items = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let record_len = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        if n_items == 0 {
            return Err(Error::format(8, "n_items must be at least 1"));
        }
        if record_len == 0 {
            return Err(Error::format(16, "record_len must be at least 1"));
        }
        let len = payload_len(n_items, record_len)?;
        let mut payload = alloc_payload(len)?;
        let got = read_full(input, &mut payload)?;
        if got < len {
            return Err(Error::format(
                (DB_HEADER_LEN + got) as u64,
                format!("truncated payload: header declares {len} bytes, file holds {got}"),
            ));
        }
        let mut probe = [0u8; 1];
        if input.read(&mut probe)? != 0 {
            return Err(Error::format(
                (DB_HEADER_LEN + len) as u64,
                "trailing bytes after payload",
            ));
        }
        Ok(Database {
            n_items,
            record_len,
            payload,
        })
    }
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

/// Contiguous index block assigned to one DPU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Partition {
    pub dpu_index: usize,
    /// First index held by the DPU.
    pub dstart: u64,
    /// One past the last index held; equal to `dstart` for an empty block.
    pub dend_exclusive: u64,
}

impl Partition {
    pub fn len(&self) -> u64 {
        self.dend_exclusive - self.dstart
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<u64> {
        self.dstart..self.dend_exclusive
    }

    /// Inclusive last index, `None` for an empty block.
    pub fn dend(&self) -> Option<u64> {
        (!self.is_empty()).then(|| self.dend_exclusive - 1)
    }
}

/// `B_d = ceil(n_items / p_dpus)`.
pub fn block_size(n_items: u64, p_dpus: usize) -> u64 {
    n_items.div_ceil(p_dpus as u64)
}

/// Splits `[0, n_items)` into `p_dpus` consecutive blocks of `B_d` indices.
/// The last non-empty block may be short and trailing blocks may be empty.
pub fn partition_plan(n_items: u64, p_dpus: usize) -> Vec<Partition> {
    assert!(p_dpus >= 1, "partition_plan needs at least one DPU");
    let bd = block_size(n_items, p_dpus);
    (0..p_dpus)
        .map(|d| {
            let dstart = (d as u64 * bd).min(n_items);
            Partition {
                dpu_index: d,
                dstart,
                dend_exclusive: (dstart + bd).min(n_items),
            }
        })
        .collect()
}

pub(crate) fn xor_into(acc: &mut [u8], record: &[u8]) {
    for (a, r) in acc.iter_mut().zip(record) {
        *a ^= r;
    }
}

/// XOR of the records of `block` (holding indices `base..`) whose bits are
/// set in `words`, restricted to the local positions `range`. Bit `i` of
/// `words` selects local record `i`.
pub(crate) fn xor_selected(block: &[u8], record_len: usize, words: &[u64], range: Range<u64>, acc: &mut [u8]) {
    if range.is_empty() {
        return;
    }
    let first = (range.start / 64) as usize;
    let last = ((range.end - 1) / 64) as usize;
    for (w, &word) in words.iter().enumerate().take(last + 1).skip(first) {
        let mut word = word;
        if w == first {
            word &= u64::MAX << (range.start % 64);
        }
        if w == last && !range.end.is_multiple_of(64) {
            word &= (1u64 << (range.end % 64)) - 1;
        }
        while word != 0 {
            let j = w * 64 + word.trailing_zeros() as usize;
            word &= word - 1;
            xor_into(acc, &block[j * record_len..(j + 1) * record_len]);
        }
    }
}

fn check_lengths(db: &Database, shares: &ShareVector) -> Result<()> {
    if shares.len() != db.n_items {
        return Err(Error::Domain(format!(
            "share vector covers {} items but the database holds {}",
            shares.len(),
            db.n_items
        )));
    }
    Ok(())
}

/// XOR of every record whose share bit is set.
pub fn naive_scan(db: &Database, shares: &ShareVector) -> Result<Subresult> {
    check_lengths(db, shares)?;
    let mut acc = vec![0u8; db.record_len];
    xor_selected(&db.payload, db.record_len, shares.words(), 0..db.n_items, &mut acc);
    Ok(Subresult::new(acc))
}

/// Multi-threaded variant of [`naive_scan`] for benchmarks; identical output.
pub fn naive_scan_parallel(db: &Database, shares: &ShareVector, threads: usize) -> Result<Subresult> {
    check_lengths(db, shares)?;
    let threads = threads.max(1);
    let chunks = partition_plan(db.n_items, threads);
    let parts: Vec<Vec<u8>> = thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .filter(|p| !p.is_empty())
            .map(|p| {
                let range = p.range();
                scope.spawn(move || {
                    let mut acc = vec![0u8; db.record_len];
                    xor_selected(&db.payload, db.record_len, shares.words(), range, &mut acc);
                    acc
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scan thread panicked"))
            .collect()
    });
    let mut acc = vec![0u8; db.record_len];
    for part in &parts {
        xor_into(&mut acc, part);
    }
    Ok(Subresult::new(acc))
}
