//! Browser bindings. Every export returns plain text (bit strings or CSV)
//! that the page renders; errors come back as strings.

use std::time::Duration;

use impir::database::{block_size, partition_plan};
use impir::dpf::{eval_full, gen, DomainParams, PointFunction, ShareVector};
use impir::pimsim::{estimate_cost, tasklet_ranges, CostModel, DbShape, MeasuredPhases, PimTopology, MAX_TASKLETS};
use wasm_bindgen::prelude::*;

const MAX_SHOWN_ITEMS: u64 = 4096;
const MAX_SHOWN_DPUS: usize = 4096;

fn bits(v: &ShareVector) -> String {
    v.iter().map(|b| if b { '1' } else { '0' }).collect()
}

/// Both parties' share vectors for `index` and their XOR, one bit string per line.
#[wasm_bindgen]
pub fn share_vectors(n_items: u32, index: u32, seed: u32) -> Result<String, String> {
    let n = u64::from(n_items);
    if n > MAX_SHOWN_ITEMS {
        return Err(format!("at most {MAX_SHOWN_ITEMS} items can be shown"));
    }
    let domain = DomainParams::new(n).map_err(|e| e.to_string())?;
    let mut rng_seed = [0u8; 32];
    rng_seed[..4].copy_from_slice(&seed.to_le_bytes());
    let (k1, k2) = gen(domain, PointFunction::indicator(u64::from(index)), rng_seed).map_err(|e| e.to_string())?;
    let v1 = eval_full(&k1, 1).map_err(|e| e.to_string())?;
    let v2 = eval_full(&k2, 1).map_err(|e| e.to_string())?;
    let sum = v1.xor(&v2).map_err(|e| e.to_string())?;
    Ok(format!("{}\n{}\n{}", bits(&v1), bits(&v2), bits(&sum)))
}

/// CSV of the DPU blocks, with the tasklet split of each block.
#[wasm_bindgen]
pub fn partition_layout(n_items: u32, dpus: u32, tasklets: u32) -> Result<String, String> {
    let (n, p, t) = (u64::from(n_items), dpus as usize, tasklets as usize);
    if n == 0 || p == 0 || p > MAX_SHOWN_DPUS {
        return Err(format!("need at least one item and 1..={MAX_SHOWN_DPUS} DPUs"));
    }
    if !(1..=MAX_TASKLETS).contains(&t) {
        return Err(format!("tasklets must be in 1..={MAX_TASKLETS}"));
    }
    let bd = block_size(n, p);
    let bt = bd.div_ceil(t as u64);
    let mut out = format!("# B_d={bd} B_t={bt}\ndpu,dstart,dend_exclusive,len,busy_tasklets\n");
    for part in partition_plan(n, p) {
        let busy = tasklet_ranges(part.len(), bt, t)
            .iter()
            .filter(|r| !r.is_empty())
            .count();
        out.push_str(&format!(
            "{},{},{},{},{busy}\n",
            part.dpu_index,
            part.dstart,
            part.dend_exclusive,
            part.len()
        ));
    }
    Ok(out)
}

/// Modeled phase breakdown for one query, given a DPF evaluation time.
#[wasm_bindgen]
pub fn cost_breakdown(
    db_mb: f64,
    record_len: u32,
    dpus: u32,
    dpf_eval_ms: f64,
    dpu_bw_mbps: f64,
    copy_bw_mbps: f64,
) -> Result<String, String> {
    if !(db_mb > 0.0 && record_len > 0 && dpu_bw_mbps > 0.0 && copy_bw_mbps > 0.0 && dpf_eval_ms >= 0.0) {
        return Err("sizes, bandwidths and times must be positive".into());
    }
    let topology = PimTopology {
        p_dpus: dpus as usize,
        ..Default::default()
    };
    topology.validate().map_err(|e| e.to_string())?;
    let n_items = ((db_mb * 1048576.0) as u64 / u64::from(record_len)).max(2);
    let shape = DbShape {
        n_items,
        record_len: record_len as usize,
    };
    let measured = MeasuredPhases {
        dpf_eval: Duration::from_secs_f64(dpf_eval_ms / 1e3),
        aggregation: Duration::ZERO,
    };
    let model = CostModel {
        dpu_bandwidth: dpu_bw_mbps * 1e6,
        copy_bandwidth: copy_bw_mbps * 1e6,
    };
    Ok(estimate_cost(&topology, shape, measured, &model).to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shares_xor_to_one_hot() {
        let text = share_vectors(16, 5, 9).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "0000010000000000");
        assert_ne!(lines[0], lines[1]);
        assert!(share_vectors(16, 16, 0).is_err());
        assert!(share_vectors(8192, 0, 0).is_err());
    }

    #[test]
    fn layout_rows_tile_the_domain() {
        let csv = partition_layout(10, 4, 2).unwrap();
        assert!(csv.starts_with("# B_d=3 B_t=2\n"));
        let rows: Vec<&str> = csv.lines().skip(2).collect();
        assert_eq!(rows, ["0,0,3,3,2", "1,3,6,3,2", "2,6,9,3,2", "3,9,10,1,1"]);
        assert!(partition_layout(10, 4, 25).is_err());
    }

    #[test]
    fn breakdown_reports_five_phases() {
        let csv = cost_breakdown(8192.0, 32, 2048, 100.0, 700.0, 8000.0).unwrap();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 5);
        let dpxor: f64 = rows[2].split(',').nth(1).unwrap().parse().unwrap();
        assert!((dpxor / 1e3 - 5.99).abs() < 0.01, "{dpxor}");
        assert!(cost_breakdown(1.0, 32, 0, 1.0, 1.0, 1.0).is_err());
    }
}
