//! Results tables for a finished run: one metric table with one column per
//! arm and one communication table with one row per method.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fedllm_core::fed::CommRow;

use crate::error::{HarnessError, Result};
use crate::experiment::{read_metrics, ArmReport, COMM_FILE};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_hash: String,
    pub arms: Vec<ArmReport>,
    pub comm: Vec<CommRow>,
}

/// Sizes in MB of the full model and the two adapter kinds at 6B scale,
/// used to check the percent formatting against published figures.
pub fn paper_rows() -> Vec<CommRow> {
    const FULL_MB: f64 = 6173.0;
    vec![
        CommRow::new("Full fine-tune", FULL_MB, FULL_MB),
        CommRow::new("LoRA", 3.6, FULL_MB),
        CommRow::new("P-Tuning-v2", 29.3, FULL_MB),
    ]
}

/// Loads a run directory. The manifest must exist; the metrics and comm
/// files are optional so a partial run still renders.
pub fn load_report(dir: &Path) -> Result<Report> {
    let manifest = RunManifest::load(dir)?;
    let arms = if dir.join(crate::experiment::METRICS_FILE).exists() { read_metrics(dir)? } else { Vec::new() };
    let comm_path = dir.join(COMM_FILE);
    let comm = if comm_path.exists() {
        let text = std::fs::read_to_string(&comm_path).map_err(|e| HarnessError::io(&comm_path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::json(comm_path.display().to_string(), e))?
    } else {
        Vec::new()
    };
    Ok(Report { name: manifest.name, config_hash: manifest.config_hash, arms, comm })
}

type Column = (&'static str, fn(&ArmReport) -> f64);

const METRICS: [Column; 5] = [
    ("ROUGE-1", |a| a.report.rouge1),
    ("ROUGE-2", |a| a.report.rouge2),
    ("ROUGE-L", |a| a.report.rouge_l),
    ("BLEU-4", |a| a.report.bleu4),
    ("Perplexity", |a| a.report.perplexity),
];

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    out.push_str(&line(header));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in rows {
        out.push_str(&line(r));
    }
}

/// Metric rows by arm columns.
pub fn render_metrics(arms: &[ArmReport]) -> String {
    let mut header = vec!["Metric".to_string()];
    header.extend(arms.iter().map(|a| a.arm.clone()));
    let rows: Vec<Vec<String>> = if arms.is_empty() {
        Vec::new()
    } else {
        METRICS
            .iter()
            .map(|(name, f)| std::iter::once(name.to_string()).chain(arms.iter().map(|a| format!("{:.4}", f(a)))).collect())
            .collect()
    };
    let mut out = String::new();
    table(&mut out, &header, &rows);
    out
}

/// One row per method; percent of full fine-tuning at three decimals.
pub fn render_comm(rows: &[CommRow]) -> String {
    let header = ["Method", "Size", "Percent (%)", "Traffic (bytes)"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                format!("{}", r.model_size),
                r.percent_str(),
                r.total_bytes.map_or_else(|| "-".into(), |b| b.to_string()),
            ]
        })
        .collect();
    let mut out = String::new();
    table(&mut out, &header, &body);
    out
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {} (config {})\n", self.name, &self.config_hash[..self.config_hash.len().min(12)]);
        out.push_str(&render_metrics(&self.arms));
        out.push('\n');
        out.push_str(&render_comm(&self.comm));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }
}
