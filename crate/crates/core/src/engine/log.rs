//! Append-only JSON-lines training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFingerprint {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub deterministic: bool,
}

impl EnvFingerprint {
    pub fn current(deterministic: bool) -> Self {
        EnvFingerprint {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Header {
        run_id: String,
        config_hash: String,
        mode: String,
        family: String,
        seed: u64,
        env: EnvFingerprint,
    },
    Step {
        stage: usize,
        epoch: usize,
        step: u64,
        loss: f64,
        lr: f64,
        wall_ms: u64,
    },
    StageSummary {
        stage: usize,
        level: u8,
        steps: u64,
        /// Mean loss over the first and the last epoch.
        first_epoch_loss: f64,
        last_epoch_loss: f64,
        checkpoint: Option<String>,
    },
}

impl LogRecord {
    pub fn stage(&self) -> Option<usize> {
        match self {
            LogRecord::Header { .. } => None,
            LogRecord::Step { stage, .. } | LogRecord::StageSummary { stage, .. } => Some(*stage),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::format("train log record", e.to_string()))
    }
}

/// In-memory record list, optionally mirrored line by line to a file.
#[derive(Debug, Default)]
pub struct TrainLog {
    records: Vec<LogRecord>,
    sink: Option<(PathBuf, File)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        TrainLog::default()
    }

    /// Creates (truncating) a log file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), file)),
        })
    }

    /// Reopens an existing log for a resumed run, dropping every record of
    /// stages after `keep_through`.
    pub fn resume(path: &Path, keep_through: usize) -> Result<Self> {
        let kept: Vec<LogRecord> = read_log(path)?
            .into_iter()
            .filter(|r| r.stage().is_none_or(|s| s <= keep_through))
            .collect();
        let mut log = TrainLog::create(path)?;
        for r in kept {
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, file)) = self.sink.as_mut() {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, file)) = self.sink.as_mut() {
            file.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LogRecord> {
        self.records
    }

    pub fn has_header(&self) -> bool {
        matches!(self.records.first(), Some(LogRecord::Header { .. }))
    }

    /// Loss of every step record, in order.
    pub fn losses(&self) -> Vec<f64> {
        step_losses(&self.records)
    }
}

pub fn step_losses(records: &[LogRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = OpenOptions::new().read(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(LogRecord::parse_line(&line)?);
    }
    Ok(out)
}

/// Checks that stage indices never go backwards.
pub fn check_stage_order(records: &[LogRecord]) -> Result<()> {
    let mut current = 0;
    for r in records {
        if let Some(s) = r.stage() {
            if s < current {
                return Err(Error::format("train log", format!("stage {s} after stage {current}")));
            }
            current = s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(stage: usize, step: u64) -> LogRecord {
        LogRecord::Step {
            stage,
            epoch: 0,
            step,
            loss: 1.5,
            lr: 0.01,
            wall_ms: 0,
        }
    }

    #[test]
    fn records_round_trip_through_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = TrainLog::create(&path).unwrap();
        log.push(LogRecord::Header {
            run_id: "r".into(),
            config_hash: "abc".into(),
            mode: "PSL".into(),
            family: "rotation".into(),
            seed: 1,
            env: EnvFingerprint::current(true),
        })
        .unwrap();
        log.push(step(1, 0)).unwrap();
        log.push(step(2, 1)).unwrap();
        log.flush().unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back, log.records());
        check_stage_order(&back).unwrap();

        let resumed = TrainLog::resume(&path, 1).unwrap();
        assert_eq!(resumed.records().len(), 2);
        assert_eq!(read_log(&path).unwrap().len(), 2);
    }

    #[test]
    fn interleaving_is_detected_and_junk_rejected() {
        assert!(check_stage_order(&[step(2, 0), step(1, 1)]).is_err());
        assert!(LogRecord::parse_line("{\"type\":\"step\"}").is_err());
        assert!(LogRecord::parse_line("not json").is_err());
    }
}
