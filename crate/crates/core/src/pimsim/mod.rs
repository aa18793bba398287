//! Functional simulator of an UPMEM-style processing-in-memory backend.
//!
//! A [`Cluster`] is a group of DPUs, each owning a private MRAM bank that
//! holds one contiguous block of the database and the matching chunk of a
//! query's share bits. Within a DPU the scan is a two-stage reduction:
//! every tasklet XORs the selected records of its `B_t = ceil(B_d / T)`
//! indices into a partial, then tasklet 0 folds the partials into the
//! DPU's subresult.
//!
//! The simulator checks MRAM and WRAM budgets but does not model cycles;
//! timing comes from [`cost`].

pub mod cost;

use std::ops::Range;
use std::sync::Arc;
use std::thread;

use crate::database::{block_size, partition_plan, xor_selected, Database, Partition};
use crate::dpf::ShareVector;
use crate::error::{Error, Result};
use crate::subresult::Subresult;

pub use cost::{estimate_cost, CostModel, CostReport, DbShape, MeasuredPhases, Phase, PhaseCost};

pub const DEFAULT_DPUS: usize = 2048;
pub const DEFAULT_TASKLETS: usize = 16;
pub const MAX_TASKLETS: usize = 24;
pub const DEFAULT_MRAM_BYTES: u64 = 64 << 20;
pub const DEFAULT_WRAM_BYTES: u64 = 64 << 10;
/// WRAM each tasklet reserves for streaming records in from MRAM.
pub const SCAN_BUFFER_BYTES: u64 = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PimTopology {
    pub p_dpus: usize,
    pub tasklets: usize,
    pub mram_bytes: u64,
    pub wram_bytes: u64,
    pub clusters: usize,
}

impl Default for PimTopology {
    fn default() -> Self {
        PimTopology {
            p_dpus: DEFAULT_DPUS,
            tasklets: DEFAULT_TASKLETS,
            mram_bytes: DEFAULT_MRAM_BYTES,
            wram_bytes: DEFAULT_WRAM_BYTES,
            clusters: 1,
        }
    }
}

impl PimTopology {
    pub fn validate(&self) -> Result<()> {
        if self.p_dpus == 0 {
            return Err(Error::Config("at least one DPU is required".into()));
        }
        if self.clusters == 0 || !self.p_dpus.is_multiple_of(self.clusters) {
            return Err(Error::Config(format!(
                "{} clusters do not evenly divide {} DPUs",
                self.clusters, self.p_dpus
            )));
        }
        if !(1..=MAX_TASKLETS).contains(&self.tasklets) {
            return Err(Error::Config(format!(
                "tasklets must be in 1..={MAX_TASKLETS}, got {}",
                self.tasklets
            )));
        }
        Ok(())
    }

    /// `P_c`.
    pub fn dpus_per_cluster(&self) -> usize {
        self.p_dpus / self.clusters
    }
}

/// WRAM needed by `tasklets` tasklets scanning records of `record_len`
/// bytes: one accumulator plus one scan buffer each.
pub fn wram_needed(tasklets: usize, record_len: usize) -> u64 {
    tasklets as u64 * (record_len as u64 + SCAN_BUFFER_BYTES)
}

/// MRAM resident on one DPU: its DB block, its share chunk and the
/// subresult slot.
pub fn mram_needed(block_items: u64, record_len: usize) -> u64 {
    block_items * record_len as u64 + block_items.div_ceil(8) + record_len as u64
}

/// One simulated DPU and the contents of its MRAM bank.
///
/// The DB block is a read-only view of the DPU's own partition of a shared
/// database, so several clusters can hold "copies" without duplicating
/// host memory.
#[derive(Clone, Debug)]
pub struct DpuState {
    pub dpu_index: usize,
    pub partition: Partition,
    db: Option<Arc<Database>>,
    share_chunk: Vec<u64>,
    subresult: Option<Subresult>,
}

impl DpuState {
    pub fn db_block(&self) -> &[u8] {
        match &self.db {
            Some(db) => db.block(self.partition.range()),
            None => &[],
        }
    }

    /// Packed share bits for this DPU's indices, local bit 0 = `dstart`.
    pub fn share_chunk(&self) -> &[u64] {
        &self.share_chunk
    }

    fn execute(&mut self, tasklets: usize, bt: u64, record_len: usize) -> Subresult {
        // Stage 1: per-tasklet partials over B_t consecutive indices.
        let partials: Vec<Subresult> = tasklet_ranges(self.partition.len(), bt, tasklets)
            .into_iter()
            .map(|r| {
                let mut acc = vec![0u8; record_len];
                xor_selected(self.db_block(), record_len, &self.share_chunk, r, &mut acc);
                Subresult::new(acc)
            })
            .collect();
        // Stage 2: the master tasklet folds the partials.
        let mut s = Subresult::zero(record_len);
        for t in &partials {
            s.xor_assign(t).expect("uniform partial width");
        }
        self.subresult = Some(s.clone());
        s
    }
}

/// Local index ranges of a DPU block of `block_len` items, one per tasklet,
/// each `B_t` long except for clipping at the block end.
pub fn tasklet_ranges(block_len: u64, bt: u64, tasklets: usize) -> Vec<Range<u64>> {
    (0..tasklets as u64)
        .map(|tid| {
            let start = (tid * bt).min(block_len);
            start..(start + bt).min(block_len)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ClusterState {
    Empty,
    Preloaded,
    Scattered,
    Executed,
}

#[derive(Clone, Copy, Debug)]
struct Resident {
    /// Items in the full database the share vectors cover.
    db_items: u64,
    /// Index range of the database held by this cluster.
    range: (u64, u64),
    record_len: usize,
    block_items: u64,
}

/// A group of `P_c` DPUs serving one query at a time.
#[derive(Debug)]
pub struct Cluster {
    tasklets: usize,
    mram_bytes: u64,
    wram_bytes: u64,
    host_threads: usize,
    dpus: Vec<DpuState>,
    resident: Option<Resident>,
    state: ClusterState,
}

fn default_host_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

impl Cluster {
    pub fn new(dpus: usize, tasklets: usize, mram_bytes: u64, wram_bytes: u64) -> Result<Self> {
        PimTopology {
            p_dpus: dpus,
            tasklets,
            mram_bytes,
            wram_bytes,
            clusters: 1,
        }
        .validate()?;
        Ok(Cluster {
            tasklets,
            mram_bytes,
            wram_bytes,
            host_threads: default_host_threads(),
            dpus: (0..dpus)
                .map(|d| DpuState {
                    dpu_index: d,
                    partition: Partition {
                        dpu_index: d,
                        dstart: 0,
                        dend_exclusive: 0,
                    },
                    db: None,
                    share_chunk: Vec::new(),
                    subresult: None,
                })
                .collect(),
            resident: None,
            state: ClusterState::Empty,
        })
    }

    /// Builds one cluster of `topology.dpus_per_cluster()` DPUs.
    pub fn from_topology(topology: &PimTopology) -> Result<Self> {
        topology.validate()?;
        Cluster::new(
            topology.dpus_per_cluster(),
            topology.tasklets,
            topology.mram_bytes,
            topology.wram_bytes,
        )
    }

    /// Number of host threads the simulated DPUs are multiplexed over.
    pub fn with_host_threads(mut self, threads: usize) -> Self {
        self.host_threads = threads.max(1);
        self
    }

    pub fn num_dpus(&self) -> usize {
        self.dpus.len()
    }

    pub fn tasklets(&self) -> usize {
        self.tasklets
    }

    pub fn dpus(&self) -> &[DpuState] {
        &self.dpus
    }

    /// Largest record count one DPU of this cluster can hold.
    pub fn max_block_items(&self, record_len: usize) -> u64 {
        let per_item = record_len as f64 + 0.125;
        let mut items = ((self.mram_bytes.saturating_sub(record_len as u64)) as f64 / per_item) as u64;
        while items > 0 && mram_needed(items, record_len) > self.mram_bytes {
            items -= 1;
        }
        items
    }

    /// Largest database (in records) the cluster can hold in one pass.
    pub fn capacity_items(&self, record_len: usize) -> u64 {
        self.max_block_items(record_len) * self.dpus.len() as u64
    }

    fn check_wram(&self, record_len: usize) -> Result<()> {
        let needed = wram_needed(self.tasklets, record_len);
        if needed > self.wram_bytes {
            return Err(Error::WramBudget {
                dpu: 0,
                needed,
                available: self.wram_bytes,
            });
        }
        Ok(())
    }

    /// Loads the whole database into the DPUs' MRAM, `B_d` records each.
    pub fn preload(&mut self, db: &Arc<Database>) -> Result<()> {
        self.preload_range(db, 0..db.n_items())
    }

    /// Loads records `range` of `db` into the DPUs. Used directly by
    /// multi-pass execution when the database exceeds the cluster's MRAM.
    pub fn preload_range(&mut self, db: &Arc<Database>, range: Range<u64>) -> Result<()> {
        if range.start >= range.end || range.end > db.n_items() {
            return Err(Error::Domain(format!(
                "invalid preload range {range:?} for {} items",
                db.n_items()
            )));
        }
        let record_len = db.record_len();
        self.check_wram(record_len)?;
        let items = range.end - range.start;
        let plan = partition_plan(items, self.dpus.len());
        for part in &plan {
            let needed = mram_needed(part.len(), record_len);
            if needed > self.mram_bytes {
                return Err(Error::Capacity(format!(
                    "DPU {} needs {needed} bytes of MRAM for {} records, {} available",
                    part.dpu_index,
                    part.len(),
                    self.mram_bytes
                )));
            }
        }
        self.state = ClusterState::Empty;
        for (dpu, part) in self.dpus.iter_mut().zip(plan) {
            let partition = Partition {
                dpu_index: part.dpu_index,
                dstart: range.start + part.dstart,
                dend_exclusive: range.start + part.dend_exclusive,
            };
            dpu.db = Some(Arc::clone(db));
            dpu.partition = partition;
            dpu.share_chunk.clear();
            dpu.subresult = None;
        }
        self.resident = Some(Resident {
            db_items: db.n_items(),
            range: (range.start, range.end),
            record_len,
            block_items: block_size(items, self.dpus.len()),
        });
        self.state = ClusterState::Preloaded;
        Ok(())
    }

    fn resident(&self) -> Result<Resident> {
        self.resident
            .ok_or_else(|| Error::State("cluster has no preloaded database".into()))
    }

    pub fn resident_range(&self) -> Option<Range<u64>> {
        self.resident.map(|r| r.range.0..r.range.1)
    }

    /// Sends each DPU the packed share bits for its index range. Returns
    /// the bytes copied host to DPU.
    pub fn scatter_shares(&mut self, shares: &ShareVector) -> Result<u64> {
        let resident = self.resident()?;
        if shares.len() != resident.db_items {
            return Err(Error::Domain(format!(
                "share vector covers {} items, preloaded database has {}",
                shares.len(),
                resident.db_items
            )));
        }
        let mut bytes = 0;
        for dpu in &mut self.dpus {
            dpu.share_chunk = shares.extract(dpu.partition.range());
            dpu.subresult = None;
            bytes += dpu.partition.len().div_ceil(8);
        }
        self.state = ClusterState::Scattered;
        Ok(bytes)
    }

    /// Runs the two-stage reduction on every DPU; one subresult per DPU in
    /// DPU order.
    pub fn dpu_execute(&mut self) -> Result<Vec<Subresult>> {
        let resident = self.resident()?;
        if self.state != ClusterState::Scattered && self.state != ClusterState::Executed {
            return Err(Error::State("dpu_execute called before scatter_shares".into()));
        }
        self.check_wram(resident.record_len)?;
        let tasklets = self.tasklets;
        let bt = resident.block_items.div_ceil(tasklets as u64);
        let record_len = resident.record_len;
        let per_thread = self.dpus.len().div_ceil(self.host_threads);
        if self.host_threads == 1 {
            for dpu in &mut self.dpus {
                dpu.execute(tasklets, bt, record_len);
            }
        } else {
            thread::scope(|scope| {
                for group in self.dpus.chunks_mut(per_thread) {
                    scope.spawn(move || {
                        for dpu in group {
                            dpu.execute(tasklets, bt, record_len);
                        }
                    });
                }
            });
        }
        self.state = ClusterState::Executed;
        Ok(self
            .dpus
            .iter()
            .map(|d| d.subresult.clone().expect("executed"))
            .collect())
    }

    /// Copies the per-DPU subresults back to the host. Returns them in DPU
    /// order with the bytes moved (`P_c * L`).
    pub fn gather_subresults(&self) -> Result<(Vec<Subresult>, u64)> {
        let resident = self.resident()?;
        if self.state != ClusterState::Executed {
            return Err(Error::State("gather_subresults called before dpu_execute".into()));
        }
        let subresults: Vec<Subresult> = self
            .dpus
            .iter()
            .map(|d| d.subresult.clone().expect("executed"))
            .collect();
        let bytes = (subresults.len() * resident.record_len) as u64;
        Ok((subresults, bytes))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::database::naive_scan;
    use crate::dpf::DomainParams;

    fn random_shares(n: u64, rng: &mut impl Rng) -> ShareVector {
        ShareVector::from_bits(DomainParams::new(n).unwrap(), (0..n).map(|_| rng.gen())).unwrap()
    }

    fn run(cluster: &mut Cluster, shares: &ShareVector) -> Subresult {
        cluster.scatter_shares(shares).unwrap();
        cluster.dpu_execute().unwrap();
        let (subs, _) = cluster.gather_subresults().unwrap();
        let mut r = Subresult::zero(subs[0].len());
        for s in &subs {
            r.xor_assign(s).unwrap();
        }
        r
    }

    #[test]
    fn topology_validation() {
        assert!(PimTopology::default().validate().is_ok());
        let bad = |f: fn(&mut PimTopology)| {
            let mut t = PimTopology::default();
            f(&mut t);
            t.validate().is_err()
        };
        assert!(bad(|t| t.clusters = 3));
        assert!(bad(|t| t.clusters = 0));
        assert!(bad(|t| t.tasklets = 0));
        assert!(bad(|t| t.tasklets = 25));
        assert!(bad(|t| t.p_dpus = 0));
        let t = PimTopology {
            clusters: 4,
            ..Default::default()
        };
        assert_eq!(t.dpus_per_cluster(), 512);
    }

    #[test]
    fn preload_splits_blocks() {
        let db = Arc::new(Database::generate(1 << 16, 32, [1; 32]).unwrap());
        let mut cluster = Cluster::new(64, 16, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        cluster.preload(&db).unwrap();
        for dpu in cluster.dpus() {
            assert_eq!(dpu.partition.len(), 1024);
            assert_eq!(dpu.db_block().len(), 32 << 10);
        }
        let joined: Vec<u8> = cluster
            .dpus()
            .iter()
            .flat_map(|d| d.db_block().iter().copied())
            .collect();
        assert_eq!(joined, db.payload());
    }

    #[test]
    fn preload_capacity_error_names_dpu() {
        let db = Arc::new(Database::generate(1000, 32, [1; 32]).unwrap());
        let mut cluster = Cluster::new(4, 1, 4096, DEFAULT_WRAM_BYTES).unwrap();
        let err = cluster.preload(&db).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        assert!(err.to_string().contains("DPU 0"), "{err}");
        assert!(matches!(
            cluster.scatter_shares(&ShareVector::zeros(DomainParams::new(1000).unwrap())),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn wram_budget_enforced() {
        let db = Arc::new(Database::generate(100, 1024, [1; 32]).unwrap());
        // 24 * (1024 + 2048) = 73728 > 65536
        let mut cluster = Cluster::new(2, 24, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        assert!(matches!(
            cluster.preload(&db),
            Err(Error::WramBudget { needed: 73728, .. })
        ));
        let mut ok = Cluster::new(2, 16, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        assert!(ok.preload(&db).is_ok());
    }

    #[test]
    fn scatter_small_example() {
        let db = Arc::new(Database::from_records(&[[0u8], [2], [1], [3]]).unwrap());
        let mut cluster = Cluster::new(2, 1, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        cluster.preload(&db).unwrap();
        let v = ShareVector::from_bits(DomainParams::new(4).unwrap(), [true, false, true, true]).unwrap();
        let bytes = cluster.scatter_shares(&v).unwrap();
        assert_eq!(bytes, 2);
        assert_eq!(cluster.dpus()[0].share_chunk(), &[0b01]);
        assert_eq!(cluster.dpus()[1].share_chunk(), &[0b11]);
        assert_eq!(run(&mut cluster, &v).as_bytes(), &[0b01 ^ 0b11]);
    }

    #[test]
    fn scatter_bytes_for_large_blocks() {
        // 2^21 share bits per DPU = 256 KiB.
        let n = 4u64 << 21;
        let db = Arc::new(Database::generate(n, 1, [0; 32]).unwrap());
        let mut cluster = Cluster::new(4, 16, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        cluster.preload(&db).unwrap();
        let bytes = cluster
            .scatter_shares(&ShareVector::zeros(DomainParams::new(n).unwrap()))
            .unwrap();
        assert_eq!(bytes, 4 * (256 << 10));
        assert_eq!(bytes, n.div_ceil(8));
    }

    #[test]
    fn reassembled_chunks_match() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let n = 10_001;
        let db = Arc::new(Database::generate(n, 3, [2; 32]).unwrap());
        let mut cluster = Cluster::new(7, 4, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        cluster.preload(&db).unwrap();
        let v = random_shares(n, &mut rng);
        cluster.scatter_shares(&v).unwrap();
        let mut j = 0;
        for dpu in cluster.dpus() {
            for local in 0..dpu.partition.len() {
                let bit = dpu.share_chunk()[(local / 64) as usize] >> (local % 64) & 1 == 1;
                assert_eq!(bit, v.get(j));
                j += 1;
            }
        }
        assert_eq!(j, n);
    }

    #[test]
    fn lifecycle_errors() {
        let db = Arc::new(Database::generate(64, 4, [2; 32]).unwrap());
        let mut cluster = Cluster::new(4, 2, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        assert!(matches!(cluster.dpu_execute(), Err(Error::State(_))));
        assert!(matches!(cluster.gather_subresults(), Err(Error::State(_))));
        cluster.preload(&db).unwrap();
        assert!(matches!(cluster.dpu_execute(), Err(Error::State(_))));
        assert!(matches!(cluster.gather_subresults(), Err(Error::State(_))));
        let wrong = ShareVector::zeros(DomainParams::new(65).unwrap());
        assert!(matches!(cluster.scatter_shares(&wrong), Err(Error::Domain(_))));
    }

    #[test]
    fn tasklet_count_independent() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let n = 5000;
        let db = Arc::new(Database::generate(n, 8, [5; 32]).unwrap());
        let v = random_shares(n, &mut rng);
        let mut per_t = Vec::new();
        for t in [1, 2, 4, 8, 16, 24] {
            let mut cluster = Cluster::new(3, t, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
            cluster.preload(&db).unwrap();
            cluster.scatter_shares(&v).unwrap();
            per_t.push(cluster.dpu_execute().unwrap());
        }
        assert!(per_t.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn dpu_subresults_match_partition_oracle() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(10);
        for _ in 0..100 {
            let n = rng.gen_range(2..3000);
            let len = rng.gen_range(1..40);
            let p = rng.gen_range(1..64);
            let db = Arc::new(Database::generate(n, len, rng.gen()).unwrap());
            let v = random_shares(n, &mut rng);
            let mut cluster = Cluster::new(p, rng.gen_range(1..=24), DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES)
                .unwrap()
                .with_host_threads(rng.gen_range(1..5));
            cluster.preload(&db).unwrap();
            cluster.scatter_shares(&v).unwrap();
            let subs = cluster.dpu_execute().unwrap();
            let (gathered, bytes) = cluster.gather_subresults().unwrap();
            assert_eq!(gathered, subs);
            assert_eq!(bytes, (p * len) as u64);
            for (dpu, s) in cluster.dpus().iter().zip(&subs) {
                let mut expected = vec![0u8; len];
                for j in dpu.partition.range() {
                    if v.get(j) {
                        crate::database::xor_into(&mut expected, db.record(j).unwrap());
                    }
                }
                assert_eq!(s.as_bytes(), &expected[..]);
            }
            assert_eq!(run(&mut cluster, &v), naive_scan(&db, &v).unwrap());
        }
    }

    #[test]
    fn zero_shares_give_zero() {
        let db = Arc::new(Database::generate(300, 16, [3; 32]).unwrap());
        let mut cluster = Cluster::new(5, 4, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        cluster.preload(&db).unwrap();
        cluster
            .scatter_shares(&ShareVector::zeros(DomainParams::new(300).unwrap()))
            .unwrap();
        assert!(cluster.dpu_execute().unwrap().iter().all(Subresult::is_zero));
    }

    #[test]
    fn range_preload_covers_slice() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(12);
        let n = 1000;
        let db = Arc::new(Database::generate(n, 4, [6; 32]).unwrap());
        let v = random_shares(n, &mut rng);
        let mut cluster = Cluster::new(3, 4, DEFAULT_MRAM_BYTES, DEFAULT_WRAM_BYTES).unwrap();
        let mut total = Subresult::zero(4);
        for range in [0..400, 400..999, 999..1000] {
            cluster.preload_range(&db, range).unwrap();
            total.xor_assign(&run(&mut cluster, &v)).unwrap();
        }
        assert_eq!(total, naive_scan(&db, &v).unwrap());
    }

    #[test]
    fn capacity_arithmetic() {
        let cluster = Cluster::new(8, 16, 1 << 20, DEFAULT_WRAM_BYTES).unwrap();
        let items = cluster.max_block_items(32);
        assert!(mram_needed(items, 32) <= 1 << 20);
        assert!(mram_needed(items + 1, 32) > 1 << 20);
        assert_eq!(cluster.capacity_items(32), 8 * items);
    }
}
