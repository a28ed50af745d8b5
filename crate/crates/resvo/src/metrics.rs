//! Metrics rows, CSV serialization, and atomic file writes.
//!
//! Runs write their outputs through `write_atomic` (temp file + rename) so an
//! interrupted run never leaves a truncated file behind.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// One metrics record per (iteration, seed, agent).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub seed: u64,
    pub agent_id: usize,
    pub extrinsic_reward_mean: f64,
    pub shaped_reward_mean: f64,
    pub reward_given_mean: f64,
    pub reward_received_mean: f64,
    pub svo_rank_mean: f64,
    pub mi_loss: f64,
    pub steps_per_episode: f64,
    pub levers_pulled: f64,
    pub waste_cleaned: f64,
    pub apples_collected: f64,
}

pub const METRICS_HEADER: &str = "iteration,seed,agent_id,extrinsic_reward_mean,shaped_reward_mean,reward_given_mean,reward_received_mean,svo_rank_mean,mi_loss,steps_per_episode,levers_pulled,waste_cleaned,apples_collected";

/// Fixed-width float formatting with 9 significant digits, so equal runs
/// produce byte-identical files.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        // Canonical zero (covers -0.0 as well).
        return "0.00000000e0".to_string();
    }
    format!("{:.8e}", v)
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.seed,
            self.agent_id,
            format_float(self.extrinsic_reward_mean),
            format_float(self.shaped_reward_mean),
            format_float(self.reward_given_mean),
            format_float(self.reward_received_mean),
            format_float(self.svo_rank_mean),
            format_float(self.mi_loss),
            format_float(self.steps_per_episode),
            format_float(self.levers_pulled),
            format_float(self.waste_cleaned),
            format_float(self.apples_collected),
        )
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "bad path"))?;
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
