//! Benchmark harness: database-size, batch-size and cluster-count sweeps
//! plus single-query phase breakdowns, for two engines.
//!
//! * `cpu-naive` evaluates each key on the host and scans the whole
//!   database there.
//! * `pim-sim` runs the [`Server`] pipeline on the simulated PIM backend.
//!
//! Every answer is checked against the naive scan before a row is
//! returned; a mismatch is an error, never a row.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::database::{naive_scan, naive_scan_parallel, Database};
use crate::dpf::{eval_full, gen, DomainParams, DpfKey, PointFunction};
use crate::error::{Error, Result};
use crate::pimsim::{CostReport, Phase};
use crate::server::{ExecMode, Server, ServerConfig};
use crate::subresult::Subresult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Engine {
    PimSim,
    CpuNaive,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::PimSim => "pim-sim",
            Engine::CpuNaive => "cpu-naive",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pim-sim" => Ok(Engine::PimSim),
            "cpu-naive" => Ok(Engine::CpuNaive),
            _ => Err(Error::Config(format!(
                "unknown engine {s:?}, expected pim-sim or cpu-naive"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchParams {
    /// Server settings for `pim-sim`; `eval_workers` also drives `cpu-naive`.
    pub server: ServerConfig,
    pub record_len: usize,
    /// Seeds database contents, query indices and key randomness.
    pub seed: [u8; 32],
    /// Threads for the `cpu-naive` scan.
    pub scan_threads: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            server: ServerConfig::default(),
            record_len: crate::database::DEFAULT_RECORD_LEN,
            seed: [0; 32],
            scan_threads: thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Per-phase time summed over a batch's queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseTotals {
    pub dpf_eval: Duration,
    pub cpu_to_dpu_copy: Duration,
    pub dpxor: Duration,
    pub dpu_to_cpu_copy: Duration,
    pub aggregation: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub engine: Engine,
    pub db_bytes: u64,
    pub n_items: u64,
    pub batch: usize,
    pub clusters: usize,
    /// Wall-clock time to answer the whole batch.
    pub total: Duration,
    pub phases: PhaseTotals,
}

pub const BENCH_CSV_HEADER: &str = "engine,db_bytes,n_items,batch,clusters,throughput_qps,total_latency_s,\
dpf_eval_s,cpu_to_dpu_copy_s,dpxor_s,dpu_to_cpu_copy_s,aggregation_s";

impl BenchRow {
    pub fn throughput_qps(&self) -> f64 {
        self.batch as f64 / self.total.as_secs_f64()
    }

    pub fn to_csv(&self) -> String {
        let p = &self.phases;
        format!(
            "{},{},{},{},{},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.engine,
            self.db_bytes,
            self.n_items,
            self.batch,
            self.clusters,
            self.throughput_qps(),
            self.total.as_secs_f64(),
            p.dpf_eval.as_secs_f64(),
            p.cpu_to_dpu_copy.as_secs_f64(),
            p.dpxor.as_secs_f64(),
            p.dpu_to_cpu_copy.as_secs_f64(),
            p.aggregation.as_secs_f64(),
        )
    }
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Bytes of memory the kernel reports as available, if it says.
pub fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    info.lines()
        .find_map(|l| l.strip_prefix("MemAvailable:"))
        .and_then(|v| v.trim().strip_suffix("kB"))
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|kb| kb * 1024)
}

/// Host memory one benchmark database of `db_bytes` needs: the payload
/// plus share vectors and working slack.
pub fn memory_needed(db_bytes: u64) -> u64 {
    db_bytes + db_bytes / 4 + (256 << 20)
}

/// Fails if the largest size cannot fit in available memory, so a sweep
/// never produces partial output.
pub fn check_capacity(db_sizes: &[u64]) -> Result<()> {
    let Some(largest) = db_sizes.iter().copied().max() else {
        return Ok(());
    };
    if let Some(avail) = available_memory() {
        let need = memory_needed(largest);
        if need > avail {
            return Err(Error::Capacity(format!(
                "a {largest}-byte database needs about {need} bytes of memory, {avail} available"
            )));
        }
    }
    Ok(())
}

fn items_for(db_bytes: u64, record_len: usize) -> Result<u64> {
    let n = db_bytes / record_len as u64;
    if n < 2 {
        return Err(Error::Config(format!(
            "{db_bytes} bytes hold fewer than two {record_len}-byte records"
        )));
    }
    Ok(n)
}

fn sub_seed(seed: [u8; 32], label: u64) -> [u8; 32] {
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(label);
    let mut out = [0u8; 32];
    rng.fill_bytes(&mut out);
    out
}

/// The database a sweep uses for `db_bytes`; identical across runs with
/// the same seed.
pub fn bench_database(db_bytes: u64, params: &BenchParams) -> Result<Database> {
    let n = items_for(db_bytes, params.record_len)?;
    Database::generate(n, params.record_len, sub_seed(params.seed, 1))
}

/// `batch` server-1 keys for random target indices.
pub fn bench_keys(domain: DomainParams, batch: usize, seed: [u8; 32]) -> Result<Vec<DpfKey>> {
    let mut rng = ChaCha20Rng::from_seed(sub_seed(seed, 2));
    (0..batch)
        .map(|_| {
            let i = rng.next_u64() % domain.n_items();
            let mut key_seed = [0u8; 32];
            rng.fill_bytes(&mut key_seed);
            gen(domain, PointFunction::indicator(i), key_seed).map(|(k1, _)| k1)
        })
        .collect()
}

/// Naive-scan answers for `keys`, the reference every engine must match.
pub fn oracle_answers(db: &Database, keys: &[DpfKey], eval_workers: usize) -> Result<Vec<Subresult>> {
    keys.iter()
        .map(|k| naive_scan(db, &eval_full(k, clamp_workers(k, eval_workers))?))
        .collect()
}

fn clamp_workers(key: &DpfKey, workers: usize) -> usize {
    workers.min(1 << (key.domain().depth() - 1).min(20))
}

fn validate(engine: Engine, answers: &[Subresult], oracle: &[Subresult]) -> Result<()> {
    for (i, (a, o)) in answers.iter().zip(oracle).enumerate() {
        if a != o {
            return Err(Error::Consistency(format!(
                "{engine} answer {i} differs from the naive scan"
            )));
        }
    }
    Ok(())
}

/// `cpu-naive` over one batch. Each answer is checked against a serial
/// scan of the same share vector, outside the timed region.
pub fn run_cpu_naive(db: &Database, keys: &[DpfKey], params: &BenchParams) -> Result<(BenchRow, Vec<Subresult>)> {
    let mut phases = PhaseTotals::default();
    let mut answers = Vec::with_capacity(keys.len());
    let mut total = Duration::ZERO;
    for k in keys {
        let t = Instant::now();
        let shares = eval_full(k, clamp_workers(k, params.server.eval_workers))?;
        let eval = t.elapsed();
        let t = Instant::now();
        let r = naive_scan_parallel(db, &shares, params.scan_threads)?;
        let scan = t.elapsed();
        phases.dpf_eval += eval;
        phases.dpxor += scan;
        total += eval + scan;
        if r != naive_scan(db, &shares)? {
            return Err(Error::Consistency(
                "parallel scan disagrees with the serial scan".into(),
            ));
        }
        answers.push(r);
    }
    Ok((
        BenchRow {
            engine: Engine::CpuNaive,
            db_bytes: db.size_bytes(),
            n_items: db.n_items(),
            batch: keys.len(),
            clusters: 0,
            total,
            phases,
        },
        answers,
    ))
}

/// `pim-sim` over one batch on an already-built server.
pub fn run_pim_sim(server: &Server, keys: &[DpfKey]) -> Result<(BenchRow, Vec<Subresult>)> {
    let t = Instant::now();
    let answers = server.run_batch_timed(keys)?;
    let total = t.elapsed();
    let mut phases = PhaseTotals::default();
    for a in &answers {
        // Timings may have been evicted for very large batches.
        if let Ok(q) = server.timing(a.query_id) {
            phases.dpf_eval += q.dpf_eval;
            phases.cpu_to_dpu_copy += q.scatter;
            phases.dpxor += q.dpxor;
            phases.dpu_to_cpu_copy += q.gather;
            phases.aggregation += q.aggregation;
        }
    }
    let db = server.db();
    Ok((
        BenchRow {
            engine: Engine::PimSim,
            db_bytes: db.size_bytes(),
            n_items: db.n_items(),
            batch: keys.len(),
            clusters: server.config().cluster_count(),
            total,
            phases,
        },
        answers.into_iter().map(|a| a.subresult).collect(),
    ))
}

/// Runs `engines` on one batch, cpu-naive first so its answers double as
/// the oracle.
fn run_engines(db: &Arc<Database>, keys: &[DpfKey], engines: &[Engine], params: &BenchParams) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut oracle: Option<Vec<Subresult>> = None;
    if engines.contains(&Engine::CpuNaive) {
        let (row, answers) = run_cpu_naive(db, keys, params)?;
        rows.push(row);
        oracle = Some(answers);
    }
    if engines.contains(&Engine::PimSim) {
        let server = Server::new(Arc::clone(db), params.server.clone())?;
        let (row, answers) = run_pim_sim(&server, keys)?;
        let oracle = match oracle.take() {
            Some(o) => o,
            None => oracle_answers(db, keys, params.server.eval_workers)?,
        };
        validate(Engine::PimSim, &answers, &oracle)?;
        rows.push(row);
    }
    Ok(rows)
}

/// One row per engine per database size, batch fixed.
pub fn bench_dbsize(db_sizes: &[u64], batch: usize, engines: &[Engine], params: &BenchParams) -> Result<Vec<BenchRow>> {
    check_capacity(db_sizes)?;
    for &s in db_sizes {
        items_for(s, params.record_len)?;
    }
    let mut rows = Vec::new();
    for &size in db_sizes {
        let db = Arc::new(bench_database(size, params)?);
        let keys = bench_keys(DomainParams::new(db.n_items())?, batch, params.seed)?;
        rows.extend(run_engines(&db, &keys, engines, params)?);
    }
    Ok(rows)
}

/// One row per engine per batch size, database fixed.
pub fn bench_batch(
    batches: &[usize],
    db_bytes: u64,
    engines: &[Engine],
    params: &BenchParams,
) -> Result<Vec<BenchRow>> {
    check_capacity(&[db_bytes])?;
    let db = Arc::new(bench_database(db_bytes, params)?);
    let domain = DomainParams::new(db.n_items())?;
    let mut rows = Vec::new();
    for &b in batches {
        let keys = bench_keys(domain, b, params.seed)?;
        rows.extend(run_engines(&db, &keys, engines, params)?);
    }
    Ok(rows)
}

/// `pim-sim` in multi-cluster mode for each cluster count. Answers must be
/// identical across counts and equal to the naive scan.
pub fn bench_clusters(counts: &[usize], db_bytes: u64, batch: usize, params: &BenchParams) -> Result<Vec<BenchRow>> {
    check_capacity(&[db_bytes])?;
    let db = Arc::new(bench_database(db_bytes, params)?);
    let keys = bench_keys(DomainParams::new(db.n_items())?, batch, params.seed)?;
    // Build every server first so a configuration error precedes any row.
    let servers = counts
        .iter()
        .map(|&c| {
            let mut config = params.server.clone();
            config.mode = ExecMode::Multi;
            config.topology.clusters = c;
            Server::new(Arc::clone(&db), config)
        })
        .collect::<Result<Vec<_>>>()?;
    let oracle = oracle_answers(&db, &keys, params.server.eval_workers)?;
    let mut rows = Vec::new();
    for server in &servers {
        let (row, answers) = run_pim_sim(server, &keys)?;
        validate(Engine::PimSim, &answers, &oracle)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Phase breakdowns of one query.
#[derive(Clone, Debug)]
pub struct Breakdown {
    pub cpu_naive: CostReport,
    /// Everything measured on the simulator.
    pub pim_measured: CostReport,
    /// Host phases measured, copies and dpXOR from the cost model.
    pub pim_model: CostReport,
}

pub const BREAKDOWN_CSV_HEADER: &str = "engine,phase,duration_us,percent,bytes_moved";

impl Breakdown {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{BREAKDOWN_CSV_HEADER}\n");
        let sections = [
            ("cpu-naive", &self.cpu_naive),
            ("pim-sim", &self.pim_measured),
            ("pim-sim-model", &self.pim_model),
        ];
        for (name, report) in sections {
            for p in report.phases() {
                let _ = writeln!(
                    out,
                    "{name},{},{:.3},{:.2},{}",
                    p.phase.name(),
                    p.duration.as_secs_f64() * 1e6,
                    p.percent,
                    p.bytes_moved
                );
            }
        }
        for (name, report) in sections {
            for a in report.assumptions() {
                let _ = writeln!(out, "# {name}: {a}");
            }
        }
        out
    }
}

/// Breakdown of a query for `index` under both engines. The pim-sim side
/// runs in single-cluster mode.
pub fn breakdown(db: &Arc<Database>, index: u64, params: &BenchParams) -> Result<Breakdown> {
    let domain = DomainParams::new(db.n_items())?;
    let (key, _) = gen(domain, PointFunction::indicator(index), sub_seed(params.seed, 3))?;

    let t = Instant::now();
    let shares = eval_full(&key, clamp_workers(&key, params.server.eval_workers))?;
    let eval = t.elapsed();
    let t = Instant::now();
    let cpu_answer = naive_scan_parallel(db, &shares, params.scan_threads)?;
    let scan = t.elapsed();
    let cpu_naive = CostReport::new(
        vec![
            (Phase::DpfEval, eval, 0, false),
            (Phase::CpuToDpuCopy, Duration::ZERO, 0, false),
            (Phase::DpXor, scan, db.size_bytes(), false),
            (Phase::DpuToCpuCopy, Duration::ZERO, 0, false),
            (Phase::Aggregation, Duration::ZERO, 0, false),
        ],
        vec![format!("host scan with {} thread(s)", params.scan_threads)],
    );

    let mut config = params.server.clone();
    config.mode = ExecMode::Single;
    let server = Server::new(Arc::clone(db), config)?;
    let answer = server.handle_query_timed(&key)?;
    validate(Engine::PimSim, std::slice::from_ref(&answer.subresult), &[cpu_answer])?;
    Ok(Breakdown {
        cpu_naive,
        pim_measured: server.phase_timings(answer.query_id)?,
        pim_model: server.modeled_cost(answer.query_id)?,
    })
}

/// Coefficient of determination of a least-squares line through the
/// points.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pimsim::PimTopology;

    fn params() -> BenchParams {
        BenchParams {
            server: ServerConfig {
                topology: PimTopology {
                    p_dpus: 64,
                    clusters: 4,
                    ..Default::default()
                },
                dpu_host_threads: 1,
                ..Default::default()
            },
            record_len: 32,
            seed: [7; 32],
            scan_threads: 2,
        }
    }

    #[test]
    fn dbsize_rows_and_throughput() {
        let rows = bench_dbsize(&[1 << 16, 1 << 17], 4, &[Engine::CpuNaive, Engine::PimSim], &params()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!((r.throughput_qps() - r.batch as f64 / r.total.as_secs_f64()).abs() < 1e-9);
        }
        assert_eq!(rows[0].n_items, 2048);
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with(BENCH_CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().split(',').count() == BENCH_CSV_HEADER.split(',').count());
    }

    #[test]
    fn keys_are_reproducible() {
        let d = DomainParams::new(1000).unwrap();
        assert_eq!(bench_keys(d, 5, [1; 32]).unwrap(), bench_keys(d, 5, [1; 32]).unwrap());
        assert_ne!(bench_keys(d, 5, [1; 32]).unwrap(), bench_keys(d, 5, [2; 32]).unwrap());
        let p = params();
        assert_eq!(bench_database(4096, &p).unwrap(), bench_database(4096, &p).unwrap());
    }

    #[test]
    fn clusters_agree() {
        let rows = bench_clusters(&[1, 2, 4], 1 << 16, 8, &params()).unwrap();
        assert_eq!(rows.iter().map(|r| r.clusters).collect::<Vec<_>>(), [1, 2, 4]);
    }

    #[test]
    fn clusters_reject_oversized() {
        let mut p = params();
        p.server.topology.mram_bytes = 1024;
        let err = bench_clusters(&[4], 1 << 16, 2, &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn infeasible_size_fails_first() {
        assert!(matches!(check_capacity(&[1 << 62]), Err(Error::Capacity(_))));
        assert!(check_capacity(&[]).is_ok());
        assert!(matches!(
            bench_dbsize(&[1 << 62], 1, &[Engine::CpuNaive], &params()),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn breakdown_reports() {
        let p = params();
        let db = Arc::new(bench_database(1 << 18, &p).unwrap());
        let b = breakdown(&db, 17, &p).unwrap();
        for r in [&b.cpu_naive, &b.pim_measured, &b.pim_model] {
            let sum: f64 = r.phases().iter().map(|x| x.percent).sum();
            assert!((sum - 100.0).abs() < 0.1);
        }
        let csv = b.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 16);
    }

    #[test]
    fn r_squared_on_lines() {
        assert!((r_squared(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!(r_squared(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 1.0, 3.0]) < 0.5);
    }

    #[test]
    fn engine_names() {
        for e in [Engine::PimSim, Engine::CpuNaive] {
            assert_eq!(e.name().parse::<Engine>().unwrap(), e);
        }
    }
}
