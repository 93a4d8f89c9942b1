use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u32,
    pub client: u32,
    pub direction: Direction,
    pub bytes: u64,
}

/// Append-only record of every simulated transfer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: u32, client: u32, direction: Direction, bytes: u64) {
        self.entries.push(LedgerEntry { round, client, direction, bytes });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn total_in(&self, direction: Direction) -> u64 {
        self.entries.iter().filter(|e| e.direction == direction).map(|e| e.bytes).sum()
    }

    /// Bytes per `(round, direction)`.
    pub fn per_round(&self) -> BTreeMap<(u32, Direction), u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((e.round, e.direction)).or_default() += e.bytes;
        }
        out
    }

    /// One JSON object per line, in recording order.
    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("plain struct") + "\n").collect()
    }

    pub fn extend(&mut self, other: &CommLedger) {
        self.entries.extend(other.entries.iter().cloned());
    }
}

/// `part / full × 100`, rounded to three decimals.
pub fn percent_of_full(part: f64, full: f64) -> f64 {
    (part / full * 100.0 * 1000.0).round() / 1000.0
}

/// One row of the communication table: what a method fine-tunes and ships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub method: String,
    /// Size of the fine-tuned parameter set, in whatever unit `full_size` uses.
    pub model_size: f64,
    pub full_size: f64,
    /// Unrounded `model_size / full_size`.
    pub fraction: f64,
    /// Percent of full fine-tuning, three decimals.
    pub percent: f64,
    /// Total simulated traffic when the row comes from a run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_bytes: Option<u64>,
}

impl CommRow {
    pub fn new(method: impl Into<String>, model_size: f64, full_size: f64) -> Self {
        Self {
            method: method.into(),
            model_size,
            full_size,
            fraction: model_size / full_size,
            percent: percent_of_full(model_size, full_size),
            total_bytes: None,
        }
    }

    pub fn from_ledger(method: impl Into<String>, adapter_bytes: u64, full_bytes: u64, ledger: &CommLedger) -> Self {
        let mut row = Self::new(method, adapter_bytes as f64, full_bytes as f64);
        row.total_bytes = Some(ledger.total());
        row
    }

    pub fn percent_str(&self) -> String {
        format!("{:.3}", self.percent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_and_jsonl() {
        let mut l = CommLedger::new();
        l.record(0, 1, Direction::Uplink, 10);
        l.record(0, 1, Direction::Downlink, 5);
        l.record(1, 2, Direction::Uplink, 7);
        assert_eq!(l.total(), 22);
        assert_eq!(l.total_in(Direction::Uplink), 17);
        assert_eq!(l.per_round()[&(0, Direction::Uplink)], 10);
        let first = l.to_jsonl().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"round":0,"client":1,"direction":"uplink","bytes":10}"#);
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(CommRow::new("full", 5.0, 5.0).percent_str(), "100.000");
        assert_eq!(percent_of_full(1.0, 3.0), 33.333);
    }
}
