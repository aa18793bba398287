//! PIR client: turns a record index into two DPF keys, sends one to each
//! server and XORs the two answers back into the record.

use std::collections::HashMap;
use std::net::ToSocketAddrs;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dpf::{gen, DomainParams, DpfKey, PointFunction};
use crate::error::{Error, Result};
use crate::netproto::Connection;
use crate::subresult::Subresult;

/// One outstanding retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuerySession {
    pub query_id: u64,
    pub target_index: u64,
    pub domain: DomainParams,
    pub record_len: usize,
}

impl QuerySession {
    pub fn new(query_id: u64, target_index: u64, domain: DomainParams, record_len: usize) -> Result<Self> {
        domain.check_index(target_index)?;
        Ok(QuerySession {
            query_id,
            target_index,
            domain,
            record_len,
        })
    }
}

/// Keys for the indicator of `i`; the first goes to server 1, the second
/// to server 2.
pub fn make_query(i: u64, domain: DomainParams, rng_seed: [u8; 32]) -> Result<(DpfKey, DpfKey)> {
    gen(domain, PointFunction::indicator(i), rng_seed)
}

/// `r1 XOR r2`.
pub fn reconstruct(r1: &Subresult, r2: &Subresult) -> Result<Vec<u8>> {
    if r1.len() != r2.len() {
        return Err(Error::Protocol(format!(
            "server answers differ in length: {} and {} bytes",
            r1.len(),
            r2.len()
        )));
    }
    Ok(r1.xor(r2)?.into_bytes())
}

/// A connection pair to two servers holding the same database.
pub struct PirClient {
    conns: [Connection; 2],
    domain: DomainParams,
    record_len: usize,
    next_id: u64,
    rng: ChaCha20Rng,
}

#[cfg(feature = "os-rng")]
fn os_seed() -> Result<[u8; 32]> {
    let mut seed = [0u8; 32];
    getrandom::getrandom(&mut seed).map_err(|e| Error::Internal(format!("no OS randomness available: {e}")))?;
    Ok(seed)
}

impl PirClient {
    /// Connects to both servers with key randomness drawn from the OS.
    #[cfg(feature = "os-rng")]
    pub fn connect<A: ToSocketAddrs>(servers: [A; 2]) -> Result<Self> {
        PirClient::connect_seeded(servers, os_seed()?)
    }

    /// Connects with a fixed key-generation seed, for reproducible runs.
    pub fn connect_seeded<A: ToSocketAddrs>(servers: [A; 2], seed: [u8; 32]) -> Result<Self> {
        let [a, b] = servers;
        PirClient::from_connections([Connection::connect(a)?, Connection::connect(b)?], seed)
    }

    /// Checks that both servers announced the same database shape.
    pub fn from_connections(conns: [Connection; 2], seed: [u8; 32]) -> Result<Self> {
        let (a, b) = (conns[0].info(), conns[1].info());
        if (a.n_items, a.record_len) != (b.n_items, b.record_len) {
            return Err(Error::Consistency(format!(
                "server 1 holds {} records of {} bytes, server 2 holds {} of {}",
                a.n_items, a.record_len, b.n_items, b.record_len
            )));
        }
        Ok(PirClient {
            domain: DomainParams::new(a.n_items)?,
            record_len: a.record_len as usize,
            conns,
            next_id: 1,
            rng: ChaCha20Rng::from_seed(seed),
        })
    }

    pub fn domain(&self) -> DomainParams {
        self.domain
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    fn session(&mut self, i: u64) -> Result<(QuerySession, DpfKey, DpfKey)> {
        let s = QuerySession::new(self.next_id, i, self.domain, self.record_len)?;
        self.next_id += 1;
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        let (k1, k2) = make_query(i, self.domain, seed)?;
        Ok((s, k1, k2))
    }

    /// Retrieves record `i`.
    pub fn fetch(&mut self, i: u64) -> Result<Vec<u8>> {
        Ok(self.fetch_batch(&[i])?.remove(0))
    }

    /// Retrieves several records. Every key is sent to both servers before
    /// any answer is read; output `j` is record `indices[j]`.
    pub fn fetch_batch(&mut self, indices: &[u64]) -> Result<Vec<Vec<u8>>> {
        let mut sessions = Vec::with_capacity(indices.len());
        let mut keys: [Vec<DpfKey>; 2] = [Vec::new(), Vec::new()];
        for &i in indices {
            let (s, k1, k2) = self.session(i)?;
            sessions.push(s);
            keys[0].push(k1);
            keys[1].push(k2);
        }
        for (conn, keys) in self.conns.iter_mut().zip(&keys) {
            for (s, k) in sessions.iter().zip(keys) {
                conn.send_query(s.query_id, k)?;
            }
            conn.flush()?;
        }

        let slot: HashMap<u64, usize> = sessions.iter().enumerate().map(|(j, s)| (s.query_id, j)).collect();
        let mut answers: [Vec<Option<Subresult>>; 2] = [vec![None; indices.len()], vec![None; indices.len()]];
        for (conn, answers) in self.conns.iter_mut().zip(answers.iter_mut()) {
            for _ in 0..indices.len() {
                let (id, bytes) = conn.recv_response()?;
                let j = *slot
                    .get(&id)
                    .ok_or_else(|| Error::Protocol(format!("response for unknown query id {id}")))?;
                if answers[j].is_some() {
                    return Err(Error::Protocol(format!("duplicate response for query id {id}")));
                }
                if bytes.len() != self.record_len {
                    return Err(Error::Protocol(format!(
                        "response of {} bytes, expected {}",
                        bytes.len(),
                        self.record_len
                    )));
                }
                answers[j] = Some(Subresult::new(bytes));
            }
        }
        let [a1, a2] = answers;
        a1.into_iter()
            .zip(a2)
            .map(|(r1, r2)| reconstruct(&r1.expect("all answered"), &r2.expect("all answered")))
            .collect()
    }
}
