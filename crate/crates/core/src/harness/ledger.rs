//! Append-only JSON-lines log of run state transitions.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::harness::run::RunRecord;
use crate::harness::spec::{run_key, RunDescriptor};

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub state: RunState,
    pub descriptor: RunDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The latest entry of every run wins; earlier lines are history.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    lock: Mutex<()>,
}

impl Ledger {
    pub fn open(output_dir: &Path) -> Result<Self> {
        fs::create_dir_all(output_dir).at(output_dir)?;
        Ok(Self {
            path: output_dir.join(LEDGER_FILE),
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path).at(&self.path)?;
        file.write_all(line.as_bytes()).at(&self.path)?;
        file.sync_data().at(&self.path)
    }

    pub fn mark(&self, descriptor: &RunDescriptor, state: RunState) -> Result<()> {
        self.append(&LedgerEntry {
            state,
            descriptor: descriptor.clone(),
            record: None,
            error: None,
        })
    }

    pub fn latest(&self) -> Result<BTreeMap<String, LedgerEntry>> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        read_latest(&self.path)
    }
}

/// Latest entry per `label#rep`. A torn final line from a crash is skipped.
pub fn read_latest(path: &Path) -> Result<BTreeMap<String, LedgerEntry>> {
    let mut latest = BTreeMap::new();
    if !path.exists() {
        return Ok(latest);
    }
    let text = fs::read_to_string(path).at(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<LedgerEntry>(line) {
            Ok(entry) => {
                latest.insert(run_key(&entry.descriptor.label, entry.descriptor.rep), entry);
            }
            Err(e) if i + 1 == lines.len() => warn!("ignoring torn last ledger line: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(latest)
}

/// Completed records in the ledger under `output_dir`, ordered by run key.
pub fn load_records(output_dir: &Path) -> Result<Vec<RunRecord>> {
    Ok(read_latest(&output_dir.join(LEDGER_FILE))?
        .into_values()
        .filter(|e| e.state == RunState::Done)
        .filter_map(|e| e.record)
        .collect())
}

/// Number of runs per state.
pub fn state_counts(entries: &BTreeMap<String, LedgerEntry>) -> BTreeMap<RunState, usize> {
    let mut counts = BTreeMap::new();
    for e in entries.values() {
        *counts.entry(e.state).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::SamplingKind;
    use crate::harness::spec::Condition;

    fn desc(rep: usize) -> RunDescriptor {
        RunDescriptor {
            condition: Condition::Baseline {
                sampling: SamplingKind::TumorSampled,
            },
            label: "baseline:tumor_sampled".into(),
            rep,
            seed: 3,
        }
    }

    #[test]
    fn latest_state_wins_and_states_are_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = Ledger::open(dir.path()).unwrap();
        for rep in 0..3 {
            ledger.mark(&desc(rep), RunState::Pending).unwrap();
        }
        ledger.mark(&desc(0), RunState::Running).unwrap();
        ledger.mark(&desc(1), RunState::Running).unwrap();
        ledger.mark(&desc(1), RunState::Failed).unwrap();
        let latest = ledger.latest().unwrap();
        assert_eq!(latest.len(), 3);
        let counts = state_counts(&latest);
        assert_eq!(counts[&RunState::Running], 1);
        assert_eq!(counts[&RunState::Failed], 1);
        assert_eq!(counts[&RunState::Pending], 1);
    }

    #[test]
    fn torn_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = Ledger::open(dir.path()).unwrap();
        ledger.mark(&desc(0), RunState::Running).unwrap();
        let mut f = OpenOptions::new().append(true).open(ledger.path()).unwrap();
        f.write_all(b"{\"state\":\"do").unwrap();
        let latest = ledger.latest().unwrap();
        assert_eq!(latest["baseline:tumor_sampled#0"].state, RunState::Running);
    }
}
