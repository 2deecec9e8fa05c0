//! Per-run metrics and their CSV schema.

use serde::Serialize;

pub const CSV_HEADER: &str = "run_id,kernel,n_procs,cp_int,log_size,fail_rank,fail_iter,fail_phase,mode_taken,recompute_iters_total,recompute_iters_failed_rank,replayed_msgs,payload_bytes_peak,final_metric_hex";

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct Metrics {
    pub run_id: String,
    pub kernel: String,
    pub n_procs: usize,
    pub cp_int: u64,
    pub log_size: u64,
    /// Semicolon-joined when a run injects several failures.
    pub fail_rank: String,
    pub fail_iter: String,
    pub fail_phase: String,
    /// `none` for fault-free runs; semicolon-joined per recovery otherwise.
    pub mode_taken: String,
    pub recompute_iters_total: u64,
    pub recompute_iters_failed_rank: u64,
    pub replayed_msgs: u64,
    pub payload_bytes_peak: u64,
    /// Bit pattern of the final verification value.
    pub final_metric_hex: String,
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.kernel,
            self.n_procs,
            self.cp_int,
            self.log_size,
            self.fail_rank,
            self.fail_iter,
            self.fail_phase,
            self.mode_taken,
            self.recompute_iters_total,
            self.recompute_iters_failed_rank,
            self.replayed_msgs,
            self.payload_bytes_peak,
            self.final_metric_hex
        )
    }

    pub fn final_metric(&self) -> f64 {
        f64::from_bits(
            u64::from_str_radix(&self.final_metric_hex, 16).expect("hex metric parses"),
        )
    }
}

pub fn metric_hex(value: f64) -> String {
    format!("{:016x}", value.to_bits())
}
