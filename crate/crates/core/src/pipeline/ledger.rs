use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Result;

/// One line of the run ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEntry {
    Run {
        run_id: String,
        seed: u64,
        config: serde_json::Value,
    },
    StageStart {
        stage_index: usize,
        stage: String,
        init_from: String,
        label: Option<String>,
        resumed_at: u64,
        seed: u64,
    },
    Step {
        stage_index: usize,
        step: u64,
        loss: f64,
        lr: f64,
        bucket_id: usize,
        grad_norm: f64,
        clipped: bool,
        wall_ms: u64,
    },
    Checkpoint {
        stage_index: usize,
        step: u64,
        path: PathBuf,
    },
    StageEnd {
        stage_index: usize,
        steps: u64,
        checkpoint: PathBuf,
    },
    Abort {
        stage_index: usize,
        step: u64,
        reason: String,
        last_good: Option<PathBuf>,
    },
    Notice {
        message: String,
    },
    Autolabel {
        sample_id: String,
        retries: u32,
        outcome: String,
    },
}

/// Append-only JSON-lines ledger, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct RunLedger {
    entries: Vec<LedgerEntry>,
    sink: Option<File>,
}

impl RunLedger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Append to `path`, keeping earlier entries already in the file.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let entries = if path.exists() {
            Self::read(path)?
        } else {
            Vec::new()
        };
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries,
            sink: Some(sink),
        })
    }

    pub fn read(path: &Path) -> Result<Vec<LedgerEntry>> {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| {
                super::PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1))
            })?);
        }
        Ok(out)
    }

    pub fn push(&mut self, entry: LedgerEntry) -> Result<()> {
        if let Some(f) = &mut self.sink {
            let line = serde_json::to_string(&entry).expect("ledger entry serializes");
            writeln!(f, "{line}")?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn steps(&self, stage_index: usize) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.entries.iter().filter_map(move |e| match e {
            LedgerEntry::Step {
                stage_index: s,
                step,
                loss,
                ..
            } if *s == stage_index => Some((*step, *loss)),
            _ => None,
        })
    }

    pub fn notices(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter_map(|e| match e {
            LedgerEntry::Notice { message } => Some(message.as_str()),
            _ => None,
        })
    }

    /// Entries with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Vec<LedgerEntry> {
        self.entries
            .iter()
            .cloned()
            .map(|mut e| {
                if let LedgerEntry::Step { wall_ms, .. } = &mut e {
                    *wall_ms = 0;
                }
                e
            })
            .collect()
    }
}
