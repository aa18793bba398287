//! Per-query phase costs.
//!
//! DPF evaluation and aggregation run on the host and are measured. The
//! host/DPU copies and the in-DPU scan are estimated from byte counts and
//! configured bandwidths, since no PIM hardware is present.

use std::fmt::Write as _;
use std::time::Duration;

use super::PimTopology;
use crate::database::partition_plan;

/// Sustained MRAM scan bandwidth of one DPU at 350 MHz, bytes/s. Published
/// aggregate figures for full systems vary (about 1.8 to 2 TB/s), so this
/// is a knob rather than a constant.
pub const DEFAULT_DPU_BANDWIDTH: f64 = 700e6;
/// Host to DPU and DPU to host copy bandwidth, bytes/s. An assumed figure,
/// not a measured one.
pub const DEFAULT_COPY_BANDWIDTH: f64 = 8e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    DpfEval,
    CpuToDpuCopy,
    DpXor,
    DpuToCpuCopy,
    Aggregation,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::DpfEval,
        Phase::CpuToDpuCopy,
        Phase::DpXor,
        Phase::DpuToCpuCopy,
        Phase::Aggregation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::DpfEval => "dpf_eval",
            Phase::CpuToDpuCopy => "cpu_to_dpu_copy",
            Phase::DpXor => "dpxor",
            Phase::DpuToCpuCopy => "dpu_to_cpu_copy",
            Phase::Aggregation => "aggregation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub dpu_bandwidth: f64,
    pub copy_bandwidth: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            dpu_bandwidth: DEFAULT_DPU_BANDWIDTH,
            copy_bandwidth: DEFAULT_COPY_BANDWIDTH,
        }
    }
}

impl CostModel {
    /// Seconds for one DPU to scan `bytes` of MRAM.
    pub fn dpxor_secs(&self, bytes: u64) -> f64 {
        bytes as f64 / self.dpu_bandwidth
    }

    pub fn copy_secs(&self, bytes: u64) -> f64 {
        bytes as f64 / self.copy_bandwidth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DbShape {
    pub n_items: u64,
    pub record_len: usize,
}

/// Host-side phases timed for real.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeasuredPhases {
    pub dpf_eval: Duration,
    pub aggregation: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseCost {
    pub phase: Phase,
    pub duration: Duration,
    pub percent: f64,
    pub bytes_moved: u64,
    /// True when the duration comes from the cost model.
    pub estimated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    phases: Vec<PhaseCost>,
    assumptions: Vec<String>,
}

impl CostReport {
    /// Builds a report from `(phase, duration, bytes, estimated)` rows and
    /// fills in each phase's share of the total.
    pub fn new(rows: Vec<(Phase, Duration, u64, bool)>, assumptions: Vec<String>) -> Self {
        let total: f64 = rows.iter().map(|r| r.1.as_secs_f64()).sum();
        let n = rows.len() as f64;
        let phases = rows
            .into_iter()
            .map(|(phase, duration, bytes_moved, estimated)| PhaseCost {
                phase,
                duration,
                // An all-zero report splits evenly so percentages still sum to 100.
                percent: if total > 0.0 {
                    100.0 * duration.as_secs_f64() / total
                } else {
                    100.0 / n
                },
                bytes_moved,
                estimated,
            })
            .collect();
        CostReport { phases, assumptions }
    }

    pub fn phases(&self) -> &[PhaseCost] {
        &self.phases
    }

    pub fn assumptions(&self) -> &[String] {
        &self.assumptions
    }

    pub fn get(&self, phase: Phase) -> Option<&PhaseCost> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn percent(&self, phase: Phase) -> f64 {
        self.get(phase).map_or(0.0, |p| p.percent)
    }

    pub fn total(&self) -> Duration {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// `phase,duration_us,percent,bytes_moved` rows, then one `#` comment
    /// line per assumption.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,duration_us,percent,bytes_moved\n");
        for p in &self.phases {
            let _ = writeln!(
                out,
                "{},{:.3},{:.2},{}",
                p.phase.name(),
                p.duration.as_secs_f64() * 1e6,
                p.percent,
                p.bytes_moved
            );
        }
        for a in &self.assumptions {
            let _ = writeln!(out, "# {a}");
        }
        out
    }
}

/// Combines measured host phases with modeled copy and scan phases for a
/// query served by one cluster of `topology`.
pub fn estimate_cost(
    topology: &PimTopology,
    shape: DbShape,
    measured: MeasuredPhases,
    model: &CostModel,
) -> CostReport {
    let dpus = topology.dpus_per_cluster();
    let plan = partition_plan(shape.n_items, dpus);
    let scatter_bytes: u64 = plan.iter().map(|p| p.len().div_ceil(8)).sum();
    let largest_block = plan.iter().map(|p| p.len()).max().unwrap_or(0) * shape.record_len as u64;
    let gather_bytes = (dpus * shape.record_len) as u64;
    let secs = Duration::from_secs_f64;
    CostReport::new(
        vec![
            (Phase::DpfEval, measured.dpf_eval, 0, false),
            (
                Phase::CpuToDpuCopy,
                secs(model.copy_secs(scatter_bytes)),
                scatter_bytes,
                true,
            ),
            (
                Phase::DpXor,
                secs(model.dpxor_secs(largest_block)),
                shape.n_items * shape.record_len as u64,
                true,
            ),
            (
                Phase::DpuToCpuCopy,
                secs(model.copy_secs(gather_bytes)),
                gather_bytes,
                true,
            ),
            (Phase::Aggregation, measured.aggregation, gather_bytes, false),
        ],
        vec![
            format!(
                "cpu/dpu copy bandwidth {:.0} MB/s is assumed, not measured",
                model.copy_bandwidth / 1e6
            ),
            format!(
                "dpxor modeled at {:.0} MB/s per DPU over {dpus} DPUs",
                model.dpu_bandwidth / 1e6
            ),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(p: usize) -> PimTopology {
        PimTopology {
            p_dpus: p,
            ..Default::default()
        }
    }

    #[test]
    fn dpxor_for_8gib_over_2048_dpus() {
        let shape = DbShape {
            n_items: 1 << 28,
            record_len: 32,
        };
        let r = estimate_cost(&topo(2048), shape, MeasuredPhases::default(), &CostModel::default());
        let ms = r.get(Phase::DpXor).unwrap().duration.as_secs_f64() * 1e3;
        assert!((ms - 5.99).abs() < 0.01, "{ms}");
    }

    #[test]
    fn percentages_sum_to_100() {
        let shape = DbShape {
            n_items: 1 << 20,
            record_len: 32,
        };
        let measured = MeasuredPhases {
            dpf_eval: Duration::from_millis(40),
            aggregation: Duration::from_micros(30),
        };
        let r = estimate_cost(&topo(2048), shape, measured, &CostModel::default());
        let sum: f64 = r.phases().iter().map(|p| p.percent).sum();
        assert!((sum - 100.0).abs() < 1e-9);
        assert_eq!(r.phases().len(), 5);
        assert_eq!(r.get(Phase::CpuToDpuCopy).unwrap().bytes_moved, 1 << 17);
        assert_eq!(r.get(Phase::DpuToCpuCopy).unwrap().bytes_moved, 2048 * 32);
        assert!(!r.get(Phase::DpfEval).unwrap().estimated);
        assert!(r.get(Phase::DpXor).unwrap().estimated);
    }

    #[test]
    fn all_zero_report_still_sums() {
        let r = CostReport::new(
            Phase::ALL.iter().map(|&p| (p, Duration::ZERO, 0, true)).collect(),
            vec![],
        );
        let sum: f64 = r.phases().iter().map(|p| p.percent).sum();
        assert!((sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn csv_layout() {
        let shape = DbShape {
            n_items: 1000,
            record_len: 8,
        };
        let r = estimate_cost(&topo(4), shape, MeasuredPhases::default(), &CostModel::default());
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("phase,duration_us,percent,bytes_moved"));
        let names: Vec<&str> = lines.clone().take(5).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(
            names,
            ["dpf_eval", "cpu_to_dpu_copy", "dpxor", "dpu_to_cpu_copy", "aggregation"]
        );
        assert!(csv.contains("assumed"));
    }

    #[test]
    fn dpxor_scales_with_cluster_size() {
        let shape = DbShape {
            n_items: 1 << 22,
            record_len: 32,
        };
        let model = CostModel::default();
        let one = estimate_cost(&topo(2048), shape, MeasuredPhases::default(), &model);
        let quarter = estimate_cost(
            &PimTopology {
                clusters: 4,
                ..topo(2048)
            },
            shape,
            MeasuredPhases::default(),
            &model,
        );
        let a = one.get(Phase::DpXor).unwrap().duration.as_secs_f64();
        let b = quarter.get(Phase::DpXor).unwrap().duration.as_secs_f64();
        assert!((b / a - 4.0).abs() < 1e-3, "{}", b / a);
    }
}
