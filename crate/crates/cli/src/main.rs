use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use impir::bench::{self, BenchParams, Engine};
use impir::client::PirClient;
use impir::database::Database;
use impir::netproto::serve;
use impir::pimsim::{CostModel, PimTopology, DEFAULT_DPUS, DEFAULT_TASKLETS};
use impir::server::{ExecMode, Server, ServerConfig};
use impir::{Error, Result};

const MIB: u64 = 1 << 20;

#[derive(Parser)]
#[command(
    name = "impir",
    version,
    about = "Two-server PIR over a simulated processing-in-memory backend"
)]
struct Cli {
    /// Hex seed (up to 32 bytes) for database contents and key randomness.
    #[arg(long, global = true, value_parser = parse_seed)]
    seed: Option<[u8; 32]>,

    /// Write CSV output here instead of stdout.
    #[arg(long, global = true)]
    csv_out: Option<PathBuf>,

    #[command(flatten)]
    engine: EngineArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, global = true, env = "IMPIR_DPUS", default_value_t = DEFAULT_DPUS)]
    dpus: usize,
    #[arg(long, global = true, env = "IMPIR_TASKLETS", default_value_t = DEFAULT_TASKLETS)]
    tasklets: usize,
    #[arg(long, global = true, env = "IMPIR_CLUSTERS", default_value_t = 1)]
    clusters: usize,
    #[arg(long, global = true, env = "IMPIR_MRAM_MB", default_value_t = 64)]
    mram_mb: u64,
    #[arg(long, global = true, env = "IMPIR_WRAM_KB", default_value_t = 64)]
    wram_kb: u64,
    /// Per-DPU scan bandwidth for the cost model.
    #[arg(long, global = true, env = "IMPIR_DPU_BW_MBPS", default_value_t = 700.0)]
    dpu_bw_mbps: f64,
    /// Host/DPU copy bandwidth for the cost model (an assumed figure).
    #[arg(long, global = true, env = "IMPIR_COPY_BW_MBPS", default_value_t = 8000.0)]
    copy_bw_mbps: f64,
    /// Threads per full-domain evaluation (power of two).
    #[arg(long, global = true, env = "IMPIR_EVAL_WORKERS", default_value_t = 1)]
    eval_workers: usize,
    /// Threads producing task-queue entries.
    #[arg(long, global = true, env = "IMPIR_DPF_WORKERS", default_value_t = 1)]
    dpf_workers: usize,
    #[arg(long, global = true, env = "IMPIR_MODE", value_enum, default_value_t = Mode::Single)]
    mode: Mode,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Multi,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    PimSim,
    CpuNaive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random database file.
    DbGen {
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 32)]
        record_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a database over TCP.
    Serve {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Write per-query phase timings to this CSV file as queries complete.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Retrieve records from two servers; prints each as lowercase hex.
    Query {
        /// Two comma-separated addresses.
        #[arg(long, value_delimiter = ',', required = true)]
        servers: Vec<String>,
        #[arg(long, required_unless_present = "batch_file")]
        index: Option<u64>,
        /// File of whitespace-separated indices, fetched as one pipelined batch.
        #[arg(long, conflicts_with = "index")]
        batch_file: Option<PathBuf>,
    },
    /// Throughput and latency across database sizes.
    BenchDbsize {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
        sizes_mb: Vec<u64>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "pim-sim,cpu-naive")]
        engines: Vec<EngineArg>,
        #[arg(long, default_value_t = 32)]
        record_len: usize,
    },
    /// Throughput and latency across batch sizes on a fixed database.
    BenchBatch {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 1024)]
        db_mb: u64,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "pim-sim,cpu-naive")]
        engines: Vec<EngineArg>,
        #[arg(long, default_value_t = 32)]
        record_len: usize,
    },
    /// Multi-cluster throughput across cluster counts.
    BenchClusters {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        db_mb: u64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        record_len: usize,
    },
    /// Per-phase cost of one query under both engines.
    Breakdown {
        /// Database file; a random one of --db-mb is generated when absent.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        db_mb: u64,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, default_value_t = 32)]
        record_len: usize,
    },
}

fn parse_seed(s: &str) -> std::result::Result<[u8; 32], String> {
    let bytes = hex::decode(s).map_err(|e| format!("seed is not hex: {e}"))?;
    if bytes.is_empty() || bytes.len() > 32 {
        return Err(format!("seed must be 1 to 32 bytes, got {}", bytes.len()));
    }
    let mut seed = [0u8; 32];
    seed[..bytes.len()].copy_from_slice(&bytes);
    Ok(seed)
}

impl EngineArgs {
    fn server_config(&self) -> ServerConfig {
        ServerConfig {
            eval_workers: self.eval_workers,
            dpf_workers: self.dpf_workers,
            topology: PimTopology {
                p_dpus: self.dpus,
                tasklets: self.tasklets,
                mram_bytes: self.mram_mb * MIB,
                wram_bytes: self.wram_kb << 10,
                clusters: self.clusters,
            },
            mode: match self.mode {
                Mode::Single => ExecMode::Single,
                Mode::Multi => ExecMode::Multi,
            },
            cost_model: CostModel {
                dpu_bandwidth: self.dpu_bw_mbps * 1e6,
                copy_bandwidth: self.copy_bw_mbps * 1e6,
            },
            ..Default::default()
        }
    }
}

fn engines(args: &[EngineArg]) -> Vec<Engine> {
    args.iter()
        .map(|e| match e {
            EngineArg::PimSim => Engine::PimSim,
            EngineArg::CpuNaive => Engine::CpuNaive,
        })
        .collect()
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(path: &Option<PathBuf>, text: &str) -> Result<()> {
    let mut out = output(path)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_indices(path: &Path) -> Result<Vec<u64>> {
    fs::read_to_string(path)?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("{t:?} in {} is not an index", path.display())))
        })
        .collect()
}

fn write_timings(server: Arc<Server>, path: PathBuf) -> Result<()> {
    let mut out = BufWriter::new(File::create(&path)?);
    writeln!(out, "query_id,phase,duration_us,percent,bytes_moved")?;
    out.flush()?;
    thread::spawn(move || {
        let mut written = HashSet::new();
        loop {
            thread::sleep(Duration::from_millis(500));
            let retained = server.timings_after(0);
            for (id, t) in &retained {
                if !written.insert(*id) {
                    continue;
                }
                for p in server.measured_report(t).phases() {
                    let _ = writeln!(
                        out,
                        "{id},{},{:.3},{:.2},{}",
                        p.phase.name(),
                        p.duration.as_secs_f64() * 1e6,
                        p.percent,
                        p.bytes_moved
                    );
                }
            }
            written.retain(|id| retained.iter().any(|(r, _)| r == id));
            if out.flush().is_err() {
                return;
            }
        }
    });
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or([0; 32]);
    let params = |record_len: usize| BenchParams {
        server: cli.engine.server_config(),
        record_len,
        seed,
        ..Default::default()
    };
    match cli.command {
        Command::DbGen { n, record_len, out } => {
            let db = Database::generate(n, record_len, seed)?;
            db.save(&out)?;
            eprintln!("wrote {} records of {record_len} bytes to {}", n, out.display());
        }
        Command::Serve { db, listen, timings } => {
            let db = Database::load(&db)?;
            let server = Arc::new(Server::new(db, cli.engine.server_config())?);
            if let Some(path) = timings {
                write_timings(Arc::clone(&server), path)?;
            }
            let handle = serve(server, listen.as_str())?;
            eprintln!("serving on {}", handle.local_addr());
            handle.join();
        }
        Command::Query {
            servers,
            index,
            batch_file,
        } => {
            let [a, b] = servers.as_slice() else {
                return Err(Error::Config(format!(
                    "--servers needs exactly two addresses, got {}",
                    servers.len()
                )));
            };
            let addrs = [a.as_str(), b.as_str()];
            let mut client = match cli.seed {
                Some(s) => PirClient::connect_seeded(addrs, s)?,
                None => PirClient::connect(addrs)?,
            };
            let indices = match (index, batch_file) {
                (Some(i), _) => vec![i],
                (None, Some(path)) => read_indices(&path)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let records = client.fetch_batch(&indices)?;
            let mut out = output(&cli.csv_out)?;
            for r in records {
                writeln!(out, "{}", hex::encode(r))?;
            }
            out.flush()?;
        }
        Command::BenchDbsize {
            sizes_mb,
            batch,
            engines: e,
            record_len,
        } => {
            let sizes: Vec<u64> = sizes_mb.iter().map(|m| m * MIB).collect();
            let rows = bench::bench_dbsize(&sizes, batch, &engines(&e), &params(record_len))?;
            emit(&cli.csv_out, &bench::rows_to_csv(&rows))?;
        }
        Command::BenchBatch {
            batches,
            db_mb,
            engines: e,
            record_len,
        } => {
            let rows = bench::bench_batch(&batches, db_mb * MIB, &engines(&e), &params(record_len))?;
            emit(&cli.csv_out, &bench::rows_to_csv(&rows))?;
        }
        Command::BenchClusters {
            counts,
            db_mb,
            batch,
            record_len,
        } => {
            let rows = bench::bench_clusters(&counts, db_mb * MIB, batch, &params(record_len))?;
            emit(&cli.csv_out, &bench::rows_to_csv(&rows))?;
        }
        Command::Breakdown {
            db,
            db_mb,
            index,
            record_len,
        } => {
            let p = params(record_len);
            let db = match db {
                Some(path) => Database::load(&path)?,
                None => {
                    bench::check_capacity(&[db_mb * MIB])?;
                    bench::bench_database(db_mb * MIB, &p)?
                }
            };
            let report = bench::breakdown(&Arc::new(db), index, &p)?;
            emit(&cli.csv_out, &report.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("impir: {e}");
            ExitCode::FAILURE
        }
    }
}
