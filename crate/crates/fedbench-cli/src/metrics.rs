//! Per-round metrics as CSV and the end-of-run JSON summary.
//!
//! Numbers are written with Rust's default formatting: a `.` decimal point,
//! no grouping separators, and the shortest digits that round-trip, so the
//! files are locale-independent and byte-stable across reruns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use fedbench::orchestrator::RoundMetrics;

pub const METRICS_HEADER: &str =
    "round,algo,skew,epochs_per_round,global_top1,mean_local_loss,bytes_up,bytes_down,wall_ms,seed";

/// Per-run constants repeated on every metrics row.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub algo: &'a str,
    pub skew: &'a str,
    pub epochs_per_round: usize,
    pub seed: u64,
}

/// Renders one run's evaluated rounds. `wall_ms` is always written as zero:
/// it is the only nondeterministic metric, and zeroing it keeps reruns of
/// the same experiment byte-identical.
pub fn render_metrics_csv(rows: &[RoundMetrics], ctx: RowContext) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},0,{}",
            m.round,
            ctx.algo,
            ctx.skew,
            ctx.epochs_per_round,
            m.global_top1,
            m.mean_local_loss,
            m.bytes_up,
            m.bytes_down,
            ctx.seed
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algo: String,
    pub skew: String,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub seed: u64,
    pub final_round: usize,
    pub final_top1: f64,
    /// Highest evaluated accuracy and the round it occurred (earliest on ties).
    pub best_round: usize,
    pub best_top1: f64,
    pub final_mean_local_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

pub fn summarize(rows: &[RoundMetrics], ctx: RowContext, rounds: usize) -> Option<RunSummary> {
    let last = rows.last()?;
    let best = rows
        .iter()
        .fold(None::<&RoundMetrics>, |acc, m| match acc {
            Some(b) if b.global_top1 >= m.global_top1 => Some(b),
            _ => Some(m),
        })
        .expect("rows is nonempty");
    Some(RunSummary {
        algo: ctx.algo.to_string(),
        skew: ctx.skew.to_string(),
        rounds,
        epochs_per_round: ctx.epochs_per_round,
        seed: ctx.seed,
        final_round: last.round,
        final_top1: last.global_top1,
        best_round: best.round,
        best_top1: best.global_top1,
        final_mean_local_loss: last.mean_local_loss,
        bytes_up: last.bytes_up,
        bytes_down: last.bytes_down,
    })
}

pub fn render_summary_json(summary: &RunSummary) -> String {
    let mut text =
        serde_json::to_string_pretty(summary).expect("summary serialization cannot fail");
    text.push('\n');
    text
}
