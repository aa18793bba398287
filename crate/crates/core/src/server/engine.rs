//! Worker threads behind [`Server`](super::Server).
//!
//! Submitted jobs go to `dpf_workers` threads that expand keys into share
//! vectors and push [`QueryTask`]s onto a bounded queue. Scheduler threads
//! pop tasks, take a free cluster from the pool, run scatter, dpXOR,
//! gather and aggregation on it and hand the cluster back. A cluster is
//! owned by exactly one scheduler while it serves a query.

use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use super::{aggregate, Completion, EngineStats, QueryTask, QueryTiming, Request, TimingLog};
use crate::database::Database;
use crate::dpf::{eval_full, DpfKey, ShareVector};
use crate::error::{Error, Result};
use crate::pimsim::Cluster;
use crate::subresult::Subresult;

pub(super) struct Job {
    pub query_id: u64,
    pub tag: u64,
    pub request: Request,
    pub reply: Sender<Completion>,
}

pub(super) struct Task {
    query: QueryTask,
    tag: u64,
    dpf_eval: Duration,
    reply: Sender<Completion>,
}

/// A cluster plus the database ranges it must sweep per query. More than
/// one range means the database does not fit and each query reloads the
/// cluster range by range.
pub(super) struct Slot {
    pub index: usize,
    pub cluster: Cluster,
    pub ranges: Vec<Range<u64>>,
}

pub(super) struct Shared {
    pub db: Arc<Database>,
    pub eval_workers: usize,
    pub submitted: AtomicU64,
    pub produced: AtomicU64,
    pub consumed: AtomicU64,
    pub completed: AtomicU64,
    pub failed: AtomicU64,
    pub violations: AtomicU64,
    pub busy: Vec<AtomicBool>,
    pub served: Vec<AtomicU64>,
    pub timings: Mutex<TimingLog>,
}

impl Shared {
    pub fn stats(&self) -> EngineStats {
        let load = |a: &AtomicU64| a.load(Ordering::SeqCst);
        EngineStats {
            submitted: load(&self.submitted),
            produced: load(&self.produced),
            consumed: load(&self.consumed),
            completed: load(&self.completed),
            failed: load(&self.failed),
            exclusivity_violations: load(&self.violations),
            served_per_cluster: self.served.iter().map(load).collect(),
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}

fn expand(key: &DpfKey, workers: usize) -> Result<ShareVector> {
    // Small domains have fewer subtrees than configured workers.
    let limit = 1u64 << (key.domain().depth() - 1);
    eval_full(key, workers.min(limit.min(1 << 20) as usize))
}

pub(super) fn dpf_worker(shared: Arc<Shared>, jobs: Receiver<Job>, tasks: Sender<Task>) {
    for job in jobs {
        let start = Instant::now();
        let shares = match job.request {
            Request::Shares(s) => Ok(s),
            Request::Key(key) => catch_unwind(AssertUnwindSafe(|| expand(&key, shared.eval_workers)))
                .unwrap_or_else(|p| Err(Error::Internal(panic_message(p)))),
        };
        let dpf_eval = start.elapsed();
        match shares {
            Ok(shares) => {
                let task = Task {
                    query: QueryTask {
                        query_id: job.query_id,
                        shares,
                    },
                    tag: job.tag,
                    dpf_eval,
                    reply: job.reply,
                };
                shared.produced.fetch_add(1, Ordering::SeqCst);
                if tasks.send(task).is_err() {
                    return;
                }
            }
            Err(e) => {
                shared.failed.fetch_add(1, Ordering::SeqCst);
                let _ = job.reply.send(Completion {
                    tag: job.tag,
                    query_id: job.query_id,
                    result: Err(e),
                });
            }
        }
    }
}

fn run_on_slot(
    db: &Arc<Database>,
    slot: &mut Slot,
    shares: &ShareVector,
    timing: &mut QueryTiming,
) -> Result<Subresult> {
    let mut subresults = Vec::new();
    let multi_pass = slot.ranges.len() > 1;
    for range in &slot.ranges {
        if multi_pass {
            // Reloading is preload work and stays out of the phase timings.
            slot.cluster.preload_range(db, range.clone())?;
        }
        let t = Instant::now();
        timing.scatter_bytes += slot.cluster.scatter_shares(shares)?;
        timing.scatter += t.elapsed();

        let t = Instant::now();
        slot.cluster.dpu_execute()?;
        timing.dpxor += t.elapsed();

        let t = Instant::now();
        let (subs, bytes) = slot.cluster.gather_subresults()?;
        timing.gather += t.elapsed();
        timing.gather_bytes += bytes;
        subresults.extend(subs);
    }
    let t = Instant::now();
    let r = aggregate(&subresults)?;
    timing.aggregation = t.elapsed();
    timing.passes = slot.ranges.len() as u32;
    Ok(r)
}

pub(super) fn scheduler(shared: Arc<Shared>, tasks: Receiver<Task>, pool: (Sender<Slot>, Receiver<Slot>)) {
    let (pool_tx, pool_rx) = pool;
    for task in tasks {
        shared.consumed.fetch_add(1, Ordering::SeqCst);
        let Ok(mut slot) = pool_rx.recv() else { return };
        if shared.busy[slot.index].swap(true, Ordering::SeqCst) {
            shared.violations.fetch_add(1, Ordering::SeqCst);
        }
        let mut timing = QueryTiming {
            dpf_eval: task.dpf_eval,
            cluster: slot.index,
            ..Default::default()
        };
        let result = catch_unwind(AssertUnwindSafe(|| {
            run_on_slot(&shared.db, &mut slot, &task.query.shares, &mut timing)
        }))
        .unwrap_or_else(|p| Err(Error::Internal(panic_message(p))));
        shared.busy[slot.index].store(false, Ordering::SeqCst);
        shared.served[slot.index].fetch_add(1, Ordering::SeqCst);
        let _ = pool_tx.send(slot);

        if result.is_ok() {
            shared.completed.fetch_add(1, Ordering::SeqCst);
            shared
                .timings
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(task.query.query_id, timing);
        } else {
            shared.failed.fetch_add(1, Ordering::SeqCst);
        }
        let _ = task.reply.send(Completion {
            tag: task.tag,
            query_id: task.query.query_id,
            result,
        });
    }
}

pub(super) fn join_all(handles: &mut Vec<JoinHandle<()>>) {
    for h in handles.drain(..) {
        let _ = h.join();
    }
}
