//! One PIR database server.
//!
//! A [`Server`] owns a persistent engine: `dpf_workers` threads expand
//! incoming keys with [`eval_full`](crate::dpf::eval_full), a bounded task
//! queue (capacity twice the cluster count) hands the share vectors to
//! scheduler threads, and each scheduler binds a task to a free cluster
//! for scatter, dpXOR, gather and aggregation.
//!
//! In [`ExecMode::Single`] one cluster spans every DPU and queries run one
//! after another on it; if the database exceeds its MRAM the cluster is
//! swept in several passes. In [`ExecMode::Multi`] each of the topology's
//! clusters holds a full copy and serves queries independently.

mod engine;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Sender};

use crate::database::Database;
use crate::dpf::{DomainParams, DpfKey, ShareVector};
use crate::error::{Error, Result};
use crate::pimsim::{estimate_cost, Cluster, CostModel, CostReport, DbShape, MeasuredPhases, Phase, PimTopology};
use crate::subresult::Subresult;
use engine::{Job, Shared, Slot};

/// Completed-query timings kept for [`Server::phase_timings`].
pub const DEFAULT_TIMING_HISTORY: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Single,
    Multi,
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ExecMode::Single),
            "multi" => Ok(ExecMode::Multi),
            _ => Err(Error::Config(format!("unknown mode {s:?}, expected single or multi"))),
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::Single => "single",
            ExecMode::Multi => "multi",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Threads per full-domain evaluation. Must be a power of two.
    pub eval_workers: usize,
    /// Threads turning keys into task-queue entries.
    pub dpf_workers: usize,
    pub topology: PimTopology,
    pub mode: ExecMode,
    /// Defaults to one per cluster.
    pub scheduler_threads: Option<usize>,
    /// Host threads each cluster multiplexes its simulated DPUs over.
    pub dpu_host_threads: usize,
    pub cost_model: CostModel,
    pub timing_history: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            eval_workers: 1,
            dpf_workers: 1,
            topology: PimTopology::default(),
            mode: ExecMode::Single,
            scheduler_threads: None,
            dpu_host_threads: thread::available_parallelism().map_or(1, |n| n.get()),
            cost_model: CostModel::default(),
            timing_history: DEFAULT_TIMING_HISTORY,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eval_workers.is_power_of_two() {
            return Err(Error::Config(format!(
                "eval workers must be a power of two, got {}",
                self.eval_workers
            )));
        }
        if self.dpf_workers == 0 {
            return Err(Error::Config("at least one dpf worker is required".into()));
        }
        if self.scheduler_threads == Some(0) {
            return Err(Error::Config("at least one scheduler thread is required".into()));
        }
        self.topology.validate()
    }

    /// Number of clusters the engine runs with under this mode.
    pub fn cluster_count(&self) -> usize {
        match self.mode {
            ExecMode::Single => 1,
            ExecMode::Multi => self.topology.clusters,
        }
    }

    /// The topology one query is served by.
    pub fn query_topology(&self) -> PimTopology {
        match self.mode {
            ExecMode::Single => PimTopology {
                clusters: 1,
                ..self.topology
            },
            ExecMode::Multi => self.topology,
        }
    }
}

/// One evaluated query waiting for a cluster.
#[derive(Clone, Debug)]
pub struct QueryTask {
    pub query_id: u64,
    pub shares: ShareVector,
}

/// What a caller asks the engine to answer.
#[derive(Clone, Debug)]
pub enum Request {
    Key(DpfKey),
    /// Already-evaluated shares; skips DPF evaluation.
    Shares(ShareVector),
}

/// Delivered on the reply channel passed to [`Server::submit`].
#[derive(Debug)]
pub struct Completion {
    /// The caller's tag, returned untouched.
    pub tag: u64,
    pub query_id: u64,
    pub result: Result<Subresult>,
}

/// Wall-clock phase times for one completed query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryTiming {
    pub dpf_eval: Duration,
    pub scatter: Duration,
    pub dpxor: Duration,
    pub gather: Duration,
    pub aggregation: Duration,
    pub scatter_bytes: u64,
    pub gather_bytes: u64,
    pub passes: u32,
    pub cluster: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub submitted: u64,
    /// Tasks pushed onto the queue by dpf workers.
    pub produced: u64,
    /// Tasks popped by schedulers.
    pub consumed: u64,
    pub completed: u64,
    pub failed: u64,
    /// Times a scheduler found its cluster already marked busy. Always
    /// zero unless the pool is broken.
    pub exclusivity_violations: u64,
    pub served_per_cluster: Vec<u64>,
}

pub(crate) struct TimingLog {
    cap: usize,
    map: HashMap<u64, QueryTiming>,
    order: VecDeque<u64>,
}

impl TimingLog {
    fn new(cap: usize) -> Self {
        TimingLog {
            cap,
            map: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    fn insert(&mut self, id: u64, t: QueryTiming) {
        if self.cap == 0 {
            return;
        }
        while self.order.len() >= self.cap {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
        self.map.insert(id, t);
        self.order.push_back(id);
    }
}

/// XOR of `subresults`. Rejects an empty list and mixed lengths.
pub fn aggregate(subresults: &[Subresult]) -> Result<Subresult> {
    let (first, rest) = subresults
        .split_first()
        .ok_or_else(|| Error::Domain("cannot aggregate an empty list of subresults".into()))?;
    let mut r = first.clone();
    for s in rest {
        r.xor_assign(s)?;
    }
    Ok(r)
}

/// A query answer with the id its timings are filed under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Answer {
    pub query_id: u64,
    pub subresult: Subresult,
}

pub struct Server {
    config: ServerConfig,
    domain: DomainParams,
    shared: Arc<Shared>,
    jobs: Option<Sender<Job>>,
    threads: Vec<JoinHandle<()>>,
    next_id: AtomicU64,
}

fn build_slots(db: &Arc<Database>, config: &ServerConfig) -> Result<Vec<Slot>> {
    let topo = config.topology;
    let host = config.dpu_host_threads;
    match config.mode {
        ExecMode::Single => {
            let mut cluster =
                Cluster::new(topo.p_dpus, topo.tasklets, topo.mram_bytes, topo.wram_bytes)?.with_host_threads(host);
            let capacity = cluster.capacity_items(db.record_len());
            if capacity == 0 {
                return Err(Error::Capacity(format!(
                    "a {}-byte record does not fit in {} bytes of MRAM",
                    db.record_len(),
                    topo.mram_bytes
                )));
            }
            let n = db.n_items();
            let ranges: Vec<_> = (0..n.div_ceil(capacity))
                .map(|i| i * capacity..((i + 1) * capacity).min(n))
                .collect();
            cluster.preload_range(db, ranges[0].clone())?;
            Ok(vec![Slot {
                index: 0,
                cluster,
                ranges,
            }])
        }
        ExecMode::Multi => (0..topo.clusters)
            .map(|index| {
                let mut cluster = Cluster::from_topology(&topo)?.with_host_threads(host);
                cluster.preload(db).map_err(|e| match e {
                    Error::Capacity(msg) => Error::Config(format!(
                        "a cluster of {} DPUs cannot hold the database ({msg}); use single-cluster mode",
                        topo.dpus_per_cluster()
                    )),
                    other => other,
                })?;
                Ok(Slot {
                    index,
                    cluster,
                    ranges: std::iter::once(0..db.n_items()).collect(),
                })
            })
            .collect(),
    }
}

impl Server {
    pub fn new(db: impl Into<Arc<Database>>, config: ServerConfig) -> Result<Self> {
        config.validate()?;
        let db = db.into();
        let domain = DomainParams::new(db.n_items())?;
        let slots = build_slots(&db, &config)?;
        let clusters = slots.len();

        let shared = Arc::new(Shared {
            db,
            eval_workers: config.eval_workers,
            submitted: AtomicU64::new(0),
            produced: AtomicU64::new(0),
            consumed: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            busy: (0..clusters).map(|_| AtomicBool::new(false)).collect(),
            served: (0..clusters).map(|_| AtomicU64::new(0)).collect(),
            timings: Mutex::new(TimingLog::new(config.timing_history)),
        });

        let (job_tx, job_rx) = unbounded::<Job>();
        let (task_tx, task_rx) = bounded(2 * clusters);
        let (pool_tx, pool_rx) = bounded(clusters);
        for slot in slots {
            pool_tx.send(slot).expect("pool has room for every cluster");
        }

        let mut threads = Vec::new();
        for i in 0..config.dpf_workers {
            let (shared, jobs, tasks) = (Arc::clone(&shared), job_rx.clone(), task_tx.clone());
            threads.push(
                thread::Builder::new()
                    .name(format!("dpf-{i}"))
                    .spawn(move || engine::dpf_worker(shared, jobs, tasks))?,
            );
        }
        drop(task_tx);
        for i in 0..config.scheduler_threads.unwrap_or(clusters) {
            let (shared, tasks) = (Arc::clone(&shared), task_rx.clone());
            let pool = (pool_tx.clone(), pool_rx.clone());
            threads.push(
                thread::Builder::new()
                    .name(format!("sched-{i}"))
                    .spawn(move || engine::scheduler(shared, tasks, pool))?,
            );
        }

        Ok(Server {
            config,
            domain,
            shared,
            jobs: Some(job_tx),
            threads,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn db(&self) -> &Arc<Database> {
        &self.shared.db
    }

    pub fn domain(&self) -> DomainParams {
        self.domain
    }

    pub fn stats(&self) -> EngineStats {
        self.shared.stats()
    }

    /// Rejects keys and share vectors for a different domain.
    pub fn check_request(&self, request: &Request) -> Result<()> {
        let n = match request {
            Request::Key(k) => k.domain().n_items(),
            Request::Shares(s) => s.len(),
        };
        if n != self.domain.n_items() {
            return Err(Error::Protocol(format!(
                "query is for {n} items but this server holds {}",
                self.domain.n_items()
            )));
        }
        Ok(())
    }

    /// Queues `request` without waiting. The answer arrives on `reply`
    /// carrying `tag`; answers to concurrent submissions may arrive in any
    /// order. Returns the server-side query id.
    pub fn submit(&self, request: Request, tag: u64, reply: &Sender<Completion>) -> Result<u64> {
        self.check_request(&request)?;
        let query_id = self.next_id.fetch_add(1, Ordering::SeqCst);
        self.shared.submitted.fetch_add(1, Ordering::SeqCst);
        let job = Job {
            query_id,
            tag,
            request,
            reply: reply.clone(),
        };
        self.jobs
            .as_ref()
            .expect("engine running")
            .send(job)
            .map_err(|_| Error::Internal("server engine has shut down".into()))?;
        Ok(query_id)
    }

    fn run_all(&self, requests: Vec<Request>) -> Result<Vec<Answer>> {
        for r in &requests {
            self.check_request(r)?;
        }
        let n = requests.len();
        let (tx, rx) = unbounded();
        for (i, r) in requests.into_iter().enumerate() {
            self.submit(r, i as u64, &tx)?;
        }
        drop(tx);
        let mut out: Vec<Option<Result<Answer>>> = (0..n).map(|_| None).collect();
        for c in rx.iter().take(n) {
            out[c.tag as usize] = Some(c.result.map(|subresult| Answer {
                query_id: c.query_id,
                subresult,
            }));
        }
        out.into_iter()
            .map(|r| r.unwrap_or_else(|| Err(Error::Internal("query was dropped".into()))))
            .collect()
    }

    /// Answers one key: DPF evaluation then the PIM pipeline.
    pub fn handle_query(&self, key: &DpfKey) -> Result<Subresult> {
        self.handle_query_timed(key).map(|a| a.subresult)
    }

    pub fn handle_query_timed(&self, key: &DpfKey) -> Result<Answer> {
        self.run_all(vec![Request::Key(key.clone())]).map(|mut v| v.remove(0))
    }

    /// Runs the PIM pipeline on an already-evaluated share vector.
    pub fn answer_shares(&self, shares: &ShareVector) -> Result<Subresult> {
        self.run_all(vec![Request::Shares(shares.clone())])
            .map(|mut v| v.remove(0).subresult)
    }

    /// Answers every key under the configured mode. Output `i` answers
    /// `keys[i]` whatever order the engine finished in.
    pub fn run_batch(&self, keys: &[DpfKey]) -> Result<Vec<Subresult>> {
        Ok(self.run_batch_timed(keys)?.into_iter().map(|a| a.subresult).collect())
    }

    pub fn run_batch_timed(&self, keys: &[DpfKey]) -> Result<Vec<Answer>> {
        self.run_all(keys.iter().cloned().map(Request::Key).collect())
    }

    pub fn timing(&self, query_id: u64) -> Result<QueryTiming> {
        self.shared
            .timings
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .map
            .get(&query_id)
            .copied()
            .ok_or(Error::Lookup(query_id))
    }

    /// Retained timings of queries with ids above `after`, in id order.
    pub fn timings_after(&self, after: u64) -> Vec<(u64, QueryTiming)> {
        let log = self.shared.timings.lock().unwrap_or_else(|e| e.into_inner());
        let mut out: Vec<_> = log
            .map
            .iter()
            .filter(|(&id, _)| id > after)
            .map(|(&id, &t)| (id, t))
            .collect();
        out.sort_unstable_by_key(|&(id, _)| id);
        out
    }

    /// Measured wall-clock breakdown of a completed query.
    pub fn phase_timings(&self, query_id: u64) -> Result<CostReport> {
        Ok(self.measured_report(&self.timing(query_id)?))
    }

    pub fn measured_report(&self, t: &QueryTiming) -> CostReport {
        let db = &self.shared.db;
        CostReport::new(
            vec![
                (Phase::DpfEval, t.dpf_eval, 0, false),
                (Phase::CpuToDpuCopy, t.scatter, t.scatter_bytes, false),
                (Phase::DpXor, t.dpxor, db.size_bytes(), false),
                (Phase::DpuToCpuCopy, t.gather, t.gather_bytes, false),
                (Phase::Aggregation, t.aggregation, t.gather_bytes, false),
            ],
            vec![format!(
                "all phases measured on the host simulator ({} pass(es), cluster {})",
                t.passes, t.cluster
            )],
        )
    }

    /// Breakdown with measured host phases and modeled copy and dpXOR
    /// phases.
    pub fn modeled_cost(&self, query_id: u64) -> Result<CostReport> {
        let t = self.timing(query_id)?;
        let db = &self.shared.db;
        Ok(estimate_cost(
            &self.config.query_topology(),
            DbShape {
                n_items: db.n_items(),
                record_len: db.record_len(),
            },
            MeasuredPhases {
                dpf_eval: t.dpf_eval,
                aggregation: t.aggregation,
            },
            &self.config.cost_model,
        ))
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        // Closing the job channel drains the pipeline stage by stage.
        self.jobs = None;
        engine::join_all(&mut self.threads);
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::database::naive_scan;
    use crate::dpf::{eval_full, gen, PointFunction};

    fn small_topology(p: usize, clusters: usize) -> PimTopology {
        PimTopology {
            p_dpus: p,
            tasklets: 4,
            clusters,
            ..Default::default()
        }
    }

    fn config(p: usize, clusters: usize, mode: ExecMode) -> ServerConfig {
        ServerConfig {
            topology: small_topology(p, clusters),
            mode,
            dpu_host_threads: 2,
            ..Default::default()
        }
    }

    fn keys(n: u64, count: usize, rng: &mut impl Rng) -> Vec<DpfKey> {
        let d = DomainParams::new(n).unwrap();
        (0..count)
            .map(|_| {
                let (k1, k2) = gen(d, PointFunction::indicator(rng.gen_range(0..n)), rng.gen()).unwrap();
                if rng.gen() {
                    k1
                } else {
                    k2
                }
            })
            .collect()
    }

    #[test]
    fn aggregate_rules() {
        assert!(matches!(aggregate(&[]), Err(Error::Domain(_))));
        let a = Subresult::new(vec![0b01]);
        let b = Subresult::new(vec![0b11]);
        assert_eq!(aggregate(&[a.clone(), b.clone()]).unwrap().as_bytes(), &[0b10]);
        assert_eq!(aggregate(std::slice::from_ref(&a)).unwrap(), a);
        assert!(matches!(
            aggregate(&[a, Subresult::new(vec![1, 2])]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn aggregate_order_independent() {
        use rand::seq::SliceRandom;
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut subs: Vec<Subresult> = (0..50)
            .map(|_| Subresult::new((0..16).map(|_| rng.gen()).collect()))
            .collect();
        let ordered = aggregate(&subs).unwrap();
        subs.shuffle(&mut rng);
        assert_eq!(aggregate(&subs).unwrap(), ordered);
    }

    #[test]
    fn config_validation() {
        let mut c = ServerConfig::default();
        assert!(c.validate().is_ok());
        c.eval_workers = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.eval_workers = 1;
        c.dpf_workers = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!("multi".parse::<ExecMode>().unwrap(), ExecMode::Multi);
        assert!("both".parse::<ExecMode>().is_err());
    }

    #[test]
    fn small_shares_example() {
        let db = Database::from_records(&[[0b00u8], [0b10], [0b01], [0b11]]).unwrap();
        let server = Server::new(db, config(2, 1, ExecMode::Single)).unwrap();
        let d = DomainParams::new(4).unwrap();
        let v1 = ShareVector::from_bits(d, [true, false, true, false]).unwrap();
        assert_eq!(server.answer_shares(&v1).unwrap().as_bytes(), &[0b01]);
        assert!(server.answer_shares(&ShareVector::zeros(d)).unwrap().is_zero());
    }

    #[test]
    fn handle_query_matches_oracle() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let n = 3000;
        let db = Database::generate(n, 16, rng.gen()).unwrap();
        let server = Server::new(db.clone(), config(16, 1, ExecMode::Single)).unwrap();
        for k in keys(n, 50, &mut rng) {
            let expected = naive_scan(&db, &eval_full(&k, 1).unwrap()).unwrap();
            assert_eq!(server.handle_query(&k).unwrap(), expected);
        }
    }

    #[test]
    fn domain_mismatch_is_protocol_error() {
        let db = Database::generate(64, 4, [0; 32]).unwrap();
        let server = Server::new(db, config(4, 1, ExecMode::Single)).unwrap();
        let (k, _) = gen(DomainParams::new(128).unwrap(), PointFunction::indicator(0), [0; 32]).unwrap();
        assert!(matches!(server.handle_query(&k), Err(Error::Protocol(_))));
        assert!(matches!(server.run_batch(&[k]), Err(Error::Protocol(_))));
    }

    #[test]
    fn modes_agree_and_preserve_order() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let n = 4096;
        let db = Arc::new(Database::generate(n, 8, rng.gen()).unwrap());
        let batch = keys(n, 32, &mut rng);
        let single = Server::new(Arc::clone(&db), config(16, 4, ExecMode::Single)).unwrap();
        let multi = Server::new(
            Arc::clone(&db),
            ServerConfig {
                dpf_workers: 3,
                ..config(16, 4, ExecMode::Multi)
            },
        )
        .unwrap();
        let a = single.run_batch(&batch).unwrap();
        let b = multi.run_batch(&batch).unwrap();
        assert_eq!(a, b);
        for (k, r) in batch.iter().zip(&a) {
            assert_eq!(r, &naive_scan(&db, &eval_full(k, 1).unwrap()).unwrap());
        }
        assert_eq!(
            single.run_batch(&batch[..1]).unwrap()[0],
            single.handle_query(&batch[0]).unwrap()
        );
    }

    #[test]
    fn stress_counters() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let n = 2048;
        let db = Database::generate(n, 4, rng.gen()).unwrap();
        let server = Server::new(
            db,
            ServerConfig {
                dpf_workers: 4,
                ..config(8, 4, ExecMode::Multi)
            },
        )
        .unwrap();
        let batch = keys(n, 128, &mut rng);
        assert_eq!(server.run_batch(&batch).unwrap().len(), 128);
        let s = server.stats();
        assert_eq!(
            (s.submitted, s.produced, s.consumed, s.completed, s.failed),
            (128, 128, 128, 128, 0)
        );
        assert_eq!(s.exclusivity_violations, 0);
        assert_eq!(s.served_per_cluster.iter().sum::<u64>(), 128);
    }

    #[test]
    fn multi_mode_rejects_oversized_db() {
        let db = Database::generate(1000, 32, [0; 32]).unwrap();
        let cfg = ServerConfig {
            topology: PimTopology {
                mram_bytes: 4096,
                ..small_topology(8, 4)
            },
            mode: ExecMode::Multi,
            ..Default::default()
        };
        let err = Server::new(db, cfg).err().unwrap();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("single-cluster")),
            "{err}"
        );
    }

    #[test]
    fn single_mode_multi_pass() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let n = 1000;
        let db = Database::generate(n, 32, rng.gen()).unwrap();
        let cfg = ServerConfig {
            topology: PimTopology {
                mram_bytes: 4096,
                ..small_topology(4, 1)
            },
            ..Default::default()
        };
        let server = Server::new(db.clone(), cfg).unwrap();
        for k in keys(n, 10, &mut rng) {
            let a = server.handle_query_timed(&k).unwrap();
            assert_eq!(a.subresult, naive_scan(&db, &eval_full(&k, 1).unwrap()).unwrap());
            let t = server.timing(a.query_id).unwrap();
            assert!(t.passes > 1);
            assert!(t.scatter_bytes >= n / 8);
            assert_eq!(t.gather_bytes, 4 * 32 * t.passes as u64);
        }
    }

    #[test]
    fn timings_and_reports() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let n = 1 << 12;
        let db = Database::generate(n, 32, rng.gen()).unwrap();
        let server = Server::new(db, config(64, 1, ExecMode::Single)).unwrap();
        let a = server.handle_query_timed(&keys(n, 1, &mut rng)[0]).unwrap();
        let measured = server.phase_timings(a.query_id).unwrap();
        let sum: f64 = measured.phases().iter().map(|p| p.percent).sum();
        assert!((sum - 100.0).abs() < 0.1);
        assert_eq!(measured.get(Phase::CpuToDpuCopy).unwrap().bytes_moved, n / 8);
        assert_eq!(measured.get(Phase::DpuToCpuCopy).unwrap().bytes_moved, 64 * 32);
        let modeled = server.modeled_cost(a.query_id).unwrap();
        assert_eq!(modeled.get(Phase::CpuToDpuCopy).unwrap().bytes_moved, n / 8);
        assert!(matches!(server.phase_timings(999_999), Err(Error::Lookup(999_999))));
    }

    #[test]
    fn timing_history_is_bounded() {
        let mut log = TimingLog::new(2);
        for id in 0..5 {
            log.insert(id, QueryTiming::default());
        }
        assert_eq!(log.map.len(), 2);
        assert!(log.map.contains_key(&4) && log.map.contains_key(&3));
    }
}
