use std::sync::Arc;

use impir::client::{make_query, reconstruct};
use impir::database::{naive_scan, Database};
use impir::dpf::{eval_full, DomainParams, ShareVector};
use impir::pimsim::{Cluster, PimTopology};
use impir::server::{aggregate, ExecMode, Server, ServerConfig};
use proptest::prelude::*;

fn config(p_dpus: usize, tasklets: usize, clusters: usize, mode: ExecMode) -> ServerConfig {
    ServerConfig {
        topology: PimTopology {
            p_dpus,
            tasklets,
            clusters,
            ..Default::default()
        },
        mode,
        dpu_host_threads: 1,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn both_servers_reconstruct_the_record(
        n in 2u64..5000,
        l in 1usize..40,
        p_pow in 0u32..7,
        t in 1usize..=24,
        seed in any::<[u8; 32]>(),
        idx_frac in 0.0f64..1.0,
    ) {
        let db = Arc::new(Database::generate(n, l, seed).unwrap());
        let p = 1usize << p_pow;
        let s1 = Server::new(Arc::clone(&db), config(p, t, 1, ExecMode::Single)).unwrap();
        let s2 = Server::new(Arc::clone(&db), config(p, t, p.min(2), ExecMode::Multi)).unwrap();
        let index = ((n as f64 * idx_frac) as u64).min(n - 1);
        let (k1, k2) = make_query(index, s1.domain(), seed).unwrap();
        let r1 = s1.handle_query(&k1).unwrap();
        let r2 = s2.handle_query(&k2).unwrap();
        prop_assert_eq!(&r1, &naive_scan(&db, &eval_full(&k1, 1).unwrap()).unwrap());
        prop_assert_eq!(reconstruct(&r1, &r2).unwrap(), db.record(index).unwrap());
    }

    #[test]
    fn batches_answer_in_order(n in 2u64..2000, batch in 1usize..12, seed in any::<[u8; 32]>()) {
        let db = Arc::new(Database::generate(n, 8, seed).unwrap());
        let server = Server::new(Arc::clone(&db), config(8, 4, 4, ExecMode::Multi)).unwrap();
        let keys: Vec<_> = (0..batch as u64)
            .map(|i| make_query(i % n, server.domain(), [i as u8; 32]).unwrap().0)
            .collect();
        let got = server.run_batch(&keys).unwrap();
        for (k, r) in keys.iter().zip(got) {
            prop_assert_eq!(r, naive_scan(&db, &eval_full(k, 1).unwrap()).unwrap());
        }
    }
}

#[test]
fn one_hot_reduction_is_exhaustive() {
    let n = 4096;
    let db = Arc::new(Database::generate(n, 4, [7; 32]).unwrap());
    let d = DomainParams::new(n).unwrap();
    let mut cluster = Cluster::new(64, 11, 1 << 20, 64 << 10).unwrap().with_host_threads(1);
    cluster.preload(&db).unwrap();
    for i in 0..n {
        cluster.scatter_shares(&ShareVector::one_hot(d, i).unwrap()).unwrap();
        let subs = cluster.dpu_execute().unwrap();
        assert_eq!(aggregate(&subs).unwrap().as_bytes(), db.record(i).unwrap(), "index {i}");
    }
}
