use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{MgcotError, Result};

/// Fraction of malformed lines above which loading fails.
const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFormat {
    /// Integer seconds since the epoch.
    Epoch,
    /// Integer milliseconds since the epoch, truncated to seconds.
    EpochMillis,
    /// `YYYY-MM-DD`, midnight UTC.
    Date,
}

/// Column layout of a delimited interaction log (0-based columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub delimiter: char,
    pub session_col: usize,
    pub item_col: usize,
    pub time_col: usize,
    pub time_format: TimeFormat,
    pub has_header: bool,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            delimiter: ',',
            session_col: 0,
            item_col: 1,
            time_col: 2,
            time_format: TimeFormat::Epoch,
            has_header: false,
        }
    }
}

impl ColumnSchema {
    /// CIKM Cup 2016 `train-item-views.csv`:
    /// `sessionId;userId;itemId;timeframe;eventdate`.
    pub fn diginetica() -> Self {
        ColumnSchema {
            delimiter: ';',
            session_col: 0,
            item_col: 2,
            time_col: 4,
            time_format: TimeFormat::Date,
            has_header: true,
        }
    }

    fn parse_line(&self, line: &str) -> Option<Interaction> {
        let fields: Vec<&str> = line.split(self.delimiter).map(str::trim).collect();
        let session_id = *fields.get(self.session_col)?;
        let item_id = *fields.get(self.item_col)?;
        let raw_time = *fields.get(self.time_col)?;
        if session_id.is_empty() || item_id.is_empty() {
            return None;
        }
        let timestamp = match self.time_format {
            TimeFormat::Epoch => raw_time.parse::<i64>().ok()?,
            TimeFormat::EpochMillis => raw_time.parse::<i64>().ok()? / 1000,
            TimeFormat::Date => NaiveDate::parse_from_str(raw_time, "%Y-%m-%d")
                .ok()?
                .and_hms_opt(0, 0, 0)?
                .and_utc()
                .timestamp(),
        };
        if timestamp < 0 {
            return None;
        }
        Some(Interaction {
            session_id: session_id.to_string(),
            item_id: item_id.to_string(),
            timestamp,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInteractions {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    pub lines: usize,
}

pub fn load_interactions(path: &Path, schema: &ColumnSchema) -> Result<LoadedInteractions> {
    let file = File::open(path).map_err(|e| MgcotError::io(path, e))?;
    let mut interactions = Vec::new();
    let mut malformed = 0;
    let mut lines = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MgcotError::io(path, e))?;
        if n == 0 && schema.has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match schema.parse_line(&line) {
            Some(i) => interactions.push(i),
            None => malformed += 1,
        }
    }
    if lines == 0 {
        warn!("{} contains no interactions", path.display());
    }
    if malformed > 0 {
        warn!("{}: {malformed} of {lines} lines malformed", path.display());
    }
    if lines > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        return Err(MgcotError::Schema(format!(
            "{}: {malformed} of {lines} lines do not match the declared schema",
            path.display()
        )));
    }
    Ok(LoadedInteractions {
        interactions,
        malformed,
        lines,
    })
}
