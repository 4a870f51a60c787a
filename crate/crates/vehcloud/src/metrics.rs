//! Per-message delivery records, the four comparison metrics computed from
//! them, and seed/vehicle-count sweep aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::protocols::DisseminationMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryOutcome {
    Delivered,
    Undelivered,
}

/// One (message, target) delivery record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub message_id: u64,
    pub source: String,
    pub target: String,
    pub outcome: DeliveryOutcome,
    pub created_at: f64,
    pub delivered_at: Option<f64>,
    pub hops: u32,
    pub mode_used: DisseminationMode,
}

/// Receiver-side outcome counts for data frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelTallies {
    pub delivered: u64,
    pub collided: u64,
    pub shadow_blocked: u64,
}

impl ChannelTallies {
    pub fn opportunities(&self) -> u64 {
        self.delivered + self.collided + self.shadow_blocked
    }
}

/// Mean end-to-end delay over delivered records; None when nothing was
/// delivered (explicitly not zero).
pub fn end_to_end_delay(records: &[MetricsRecord]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for r in records {
        if let Some(d) = r.delivered_at {
            sum += d - r.created_at;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Delivered (message, target) pairs over intended pairs; None when no
/// pairs were intended.
pub fn delivery_probability(records: &[MetricsRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let delivered = records
        .iter()
        .filter(|r| r.outcome == DeliveryOutcome::Delivered)
        .count();
    Some(delivered as f64 / records.len() as f64)
}

/// Collided receptions over reception opportunities
/// (delivered + collided + shadow-blocked); zero on an empty channel.
pub fn collision_ratio(tallies: &ChannelTallies) -> f64 {
    let denom = tallies.opportunities();
    if denom == 0 {
        0.0
    } else {
        tallies.collided as f64 / denom as f64
    }
}

/// Successfully delivered payload bits per second of simulated time.
pub fn avg_throughput(records: &[MetricsRecord], msg_size_bytes: u32, duration: f64) -> f64 {
    assert!(duration > 0.0);
    let delivered = records
        .iter()
        .filter(|r| r.outcome == DeliveryOutcome::Delivered)
        .count();
    delivered as f64 * f64::from(msg_size_bytes) * 8.0 / duration
}

/// Per-run metric summary, one row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_vehicles: usize,
    pub protocol: String,
    pub seed: u64,
    pub mean_e2e_delay_s: Option<f64>,
    pub delivery_probability: Option<f64>,
    pub collision_ratio: f64,
    pub avg_throughput_bps: f64,
    pub n_messages: u64,
    pub n_pairs: u64,
    pub n_delivered: u64,
    pub mode_cloud: u64,
    pub mode_v2v: u64,
    pub mode_v2i: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    /// Number of seeds contributing (may be reduced for the delay metric
    /// when a seed had no deliveries).
    pub n: usize,
    pub mean: f64,
    /// Half-width of the 95% confidence interval; zero when degenerate.
    pub ci95: f64,
    pub std_err: f64,
}

fn cell_stats(values: &[f64]) -> Option<CellStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(CellStats {
            n,
            mean,
            ci95: 0.0,
            std_err: 0.0,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    Some(CellStats {
        n,
        mean,
        ci95: 1.96 * se,
        std_err: se,
    })
}

pub type Cell = (String, usize);

/// Mean and 95% CI per (protocol, n_vehicles) cell for each metric.
#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub protocols: Vec<String>,
    pub counts: Vec<usize>,
    pub delay: BTreeMap<Cell, CellStats>,
    pub delivery: BTreeMap<Cell, CellStats>,
    pub collision: BTreeMap<Cell, CellStats>,
    pub throughput: BTreeMap<Cell, CellStats>,
    /// Cells with fewer seeds than the fullest cell.
    pub ragged: Vec<Cell>,
}

pub fn aggregate_sweep(summaries: &[RunSummary]) -> SweepTable {
    let mut table = SweepTable::default();
    let mut grouped: BTreeMap<Cell, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        grouped
            .entry((s.protocol.clone(), s.n_vehicles))
            .or_default()
            .push(s);
    }
    let max_seeds = grouped.values().map(Vec::len).max().unwrap_or(0);
    for (cell, runs) in &grouped {
        if !table.protocols.contains(&cell.0) {
            table.protocols.push(cell.0.clone());
        }
        if !table.counts.contains(&cell.1) {
            table.counts.push(cell.1);
        }
        if runs.len() < max_seeds {
            table.ragged.push(cell.clone());
        }
        let delays: Vec<f64> = runs.iter().filter_map(|r| r.mean_e2e_delay_s).collect();
        if let Some(st) = cell_stats(&delays) {
            table.delay.insert(cell.clone(), st);
        }
        let deliveries: Vec<f64> = runs.iter().filter_map(|r| r.delivery_probability).collect();
        if let Some(st) = cell_stats(&deliveries) {
            table.delivery.insert(cell.clone(), st);
        }
        let collisions: Vec<f64> = runs.iter().map(|r| r.collision_ratio).collect();
        if let Some(st) = cell_stats(&collisions) {
            table.collision.insert(cell.clone(), st);
        }
        let throughputs: Vec<f64> = runs.iter().map(|r| r.avg_throughput_bps).collect();
        if let Some(st) = cell_stats(&throughputs) {
            table.throughput.insert(cell.clone(), st);
        }
    }
    table.counts.sort_unstable();
    table.protocols.sort();
    table
}

/// Spearman rank correlation of y against x. Used by trend checks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(x);
    let ry = rank(y);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        0.0
    } else {
        num / (dx * dy).sqrt()
    }
}
