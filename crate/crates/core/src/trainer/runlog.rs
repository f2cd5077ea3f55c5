use serde::{Deserialize, Serialize};

use crate::error::{MgcotError, Result};
use crate::evaluation::Metrics;

pub const RUNLOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: u32,
    pub crate_version: String,
    /// The training config exactly as used, in TOML.
    pub config: String,
    pub ablation: String,
    pub items: usize,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss_main: f64,
    pub loss_contrastive: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub validation: Option<Metrics>,
    pub improved: bool,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Epoch(EpochRecord),
}

/// Append-only training log: a header followed by one record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn new(header: RunHeader) -> Self {
        RunLog {
            header,
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.epochs.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone())).expect("serializable");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&Line::Epoch(e.clone())).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut epochs = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| MgcotError::parse(format!("run log line {}", n + 1), e.to_string()))?;
            match parsed {
                Line::Header(h) if header.is_none() => header = Some(h),
                Line::Header(_) => return Err(MgcotError::parse("run log", "second header record")),
                Line::Epoch(e) => epochs.push(e),
            }
        }
        let header = header.ok_or_else(|| MgcotError::parse("run log", "missing header record"))?;
        Ok(RunLog { header, epochs })
    }

    /// `(main, contrastive, total)` per epoch.
    pub fn losses(&self) -> Vec<(f64, f64, f64)> {
        self.epochs
            .iter()
            .map(|e| (e.loss_main, e.loss_contrastive, e.loss_total))
            .collect()
    }

    /// Equality of everything except wall-clock times.
    pub fn same_run(&self, other: &RunLog) -> bool {
        let strip = |l: &RunLog| {
            let mut l = l.clone();
            for e in &mut l.epochs {
                e.wall_clock_secs = 0.0;
            }
            l
        };
        strip(self) == strip(other)
    }

    /// Largest absolute difference between recorded losses of the common
    /// epochs, or `None` when the epoch counts differ.
    pub fn max_loss_gap(&self, other: &RunLog) -> Option<f64> {
        if self.epochs.len() != other.epochs.len() {
            return None;
        }
        Some(
            self.losses()
                .iter()
                .zip(other.losses())
                .flat_map(|(a, b)| [(a.0 - b.0).abs(), (a.1 - b.1).abs(), (a.2 - b.2).abs()])
                .fold(0.0, f64::max),
        )
    }
}
