//! Append-only log of reviewer verdicts. Each line is one JSON record and is
//! synced before the write is acknowledged. Replaying the log in order, last
//! write wins, rebuilds the state; a torn or garbled tail (a crash mid-write)
//! is cut off when the log is opened.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use objctx::retrieval::Verdict;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub run: String,
    pub rank: usize,
    pub verdict: Verdict,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    file: File,
    state: HashMap<(String, usize), Verdict>,
    /// Records dropped from the tail when the log was opened.
    pub discarded_tail: bool,
}

/// Parses the complete, well-formed prefix of a log. Returns the records and
/// the byte length of that prefix.
pub fn replay(bytes: &[u8]) -> (Vec<LabelRecord>, usize) {
    let mut records = Vec::new();
    let mut good = 0;
    while let Some(end) = bytes[good..].iter().position(|&b| b == b'\n') {
        let line = &bytes[good..good + end];
        match serde_json::from_slice::<LabelRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        good += end + 1;
    }
    (records, good)
}

impl LabelStore {
    pub fn open(path: &Path) -> CliResult<Self> {
        let io = |e| CliError::io(path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;
        let (records, good) = replay(&bytes);
        let discarded_tail = good < bytes.len();
        if discarded_tail {
            log::warn!(
                "{}: dropping {} bytes of unreadable log tail",
                path.display(),
                bytes.len() - good
            );
            file.set_len(good as u64).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        let mut state = HashMap::new();
        for r in records {
            state.insert((r.run, r.rank), r.verdict);
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            state,
            discarded_tail,
        })
    }

    pub fn record(&mut self, run: &str, rank: usize, verdict: Verdict) -> CliResult<LabelRecord> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let rec = LabelRecord {
            run: run.to_string(),
            rank,
            verdict,
            timestamp,
        };
        let mut line = serde_json::to_vec(&rec).map_err(|e| CliError::Runtime(e.to_string()))?;
        line.push(b'\n');
        let io = |e| CliError::io(&self.path, e);
        self.file.write_all(&line).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.state.insert((rec.run.clone(), rank), verdict);
        Ok(rec)
    }

    pub fn verdict(&self, run: &str, rank: usize) -> Verdict {
        self.state
            .get(&(run.to_string(), rank))
            .copied()
            .unwrap_or_default()
    }

    /// Current verdicts of one run, keyed by rank; unlabeled regions omitted.
    pub fn verdicts(&self, run: &str) -> HashMap<usize, Verdict> {
        self.state
            .iter()
            .filter(|((r, _), v)| r == run && **v != Verdict::Unlabeled)
            .map(|((_, rank), v)| (*rank, *v))
            .collect()
    }
}
