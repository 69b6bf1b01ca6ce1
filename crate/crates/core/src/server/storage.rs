//! Per-topic persistence: an append-only JSON-lines log plus generation
//! snapshots, with recovery that tolerates torn log tails and corrupt
//! snapshot files.
//!
//! Layout, one directory per topic:
//!   snapshot-{generation}.jsonl   one Experience JSON object per line
//!   log.jsonl                     one LogRecord per line
//!
//! Log sequence numbers start at 1 and are strictly increasing and gapless;
//! the first record that breaks parsing or ordering marks a torn tail and
//! everything from it on is truncated. Recovery loads the newest swap record
//! whose snapshot reads cleanly and replays the puts logged after it; if a
//! snapshot is damaged, recovery falls back to an older swap (ultimately to
//! empty) and a longer replay, which loses condensed forms but never an
//! acked put.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::Experience;
use crate::refine::RefineReport;

pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogPayload {
    Put { experience: Experience },
    RefineSwap { generation: u64, report: RefineReport },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub lsn: u64,
    #[serde(flatten)]
    pub payload: LogPayload,
}

pub fn snapshot_path(dir: &Path, generation: u64) -> PathBuf {
    dir.join(format!("snapshot-{generation}.jsonl"))
}

/// Writes a snapshot atomically: temp file in the same directory, fsync,
/// rename. A crash leaves either the old file or the new one, never a blend.
pub fn write_snapshot(dir: &Path, generation: u64, experiences: &[Experience]) -> io::Result<()> {
    let final_path = snapshot_path(dir, generation);
    let tmp_path = dir.join(format!(".snapshot-{generation}.tmp"));
    {
        let mut f = File::create(&tmp_path)?;
        for x in experiences {
            serde_json::to_writer(&mut f, x)?;
            f.write_all(b"\n")?;
        }
        f.sync_data()?;
    }
    std::fs::rename(&tmp_path, &final_path)?;
    Ok(())
}

fn read_snapshot(path: &Path) -> Result<Vec<Experience>, String> {
    let raw = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in raw.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let x: Experience = serde_json::from_slice(line)
            .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
        out.push(x);
    }
    Ok(out)
}

/// Append handle for one topic's log. Each append assigns the next lsn and
/// is flushed and synced before it returns, so an acked operation is on disk.
pub struct LogWriter {
    file: File,
    next_lsn: u64,
}

impl LogWriter {
    pub fn append(&mut self, payload: LogPayload) -> io::Result<u64> {
        let lsn = self.next_lsn;
        let record = LogRecord { lsn, payload };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.next_lsn += 1;
        Ok(lsn)
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }
}

/// Everything recovery reconstructs for one topic.
pub struct Recovered {
    pub experiences: Vec<Experience>,
    /// Generation of the snapshot the live state was loaded from (0 when no
    /// usable snapshot existed).
    pub generation: u64,
    /// Next generation a refinement may write. Tracks the newest swap record
    /// even when its snapshot was unreadable, so generations never collide.
    pub next_generation: u64,
    pub log: LogWriter,
    pub warnings: Vec<String>,
}

/// Scans the log, keeping the longest valid gapless prefix. Returns the
/// records, the byte length of that prefix, and whether the tail was torn.
fn scan_log(raw: &[u8]) -> (Vec<LogRecord>, usize, bool) {
    let mut records = Vec::new();
    let mut valid_end = 0usize;
    let mut offset = 0usize;
    let mut expected_lsn = 1u64;

    while offset < raw.len() {
        let line_end = raw[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| offset + i)
            .unwrap_or(raw.len());
        let line = &raw[offset..line_end];
        let has_newline = line_end < raw.len();
        if line.is_empty() {
            if has_newline {
                // Stray blank line: treat as corruption from here on.
                return (records, valid_end, true);
            }
            break;
        }
        match serde_json::from_slice::<LogRecord>(line) {
            Ok(rec) if rec.lsn == expected_lsn => {
                expected_lsn += 1;
                records.push(rec);
                valid_end = if has_newline { line_end + 1 } else { line_end };
                offset = valid_end;
            }
            _ => return (records, valid_end, true),
        }
    }
    (records, valid_end, false)
}

/// Opens a topic directory and rebuilds its state. Creates the directory and
/// an empty log when absent.
pub fn recover(dir: &Path) -> io::Result<Recovered> {
    std::fs::create_dir_all(dir)?;
    let log_path = dir.join(LOG_FILE);
    let mut warnings = Vec::new();

    let raw = match File::open(&log_path) {
        Ok(mut f) => {
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            buf
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };

    let (records, valid_end, torn) = scan_log(&raw);
    if torn {
        warnings.push(format!(
            "log {} has a torn tail: truncating {} bytes to the last valid record",
            log_path.display(),
            raw.len() - valid_end
        ));
        log::warn!("{}", warnings.last().expect("just pushed"));
    }

    // Newest swap whose snapshot loads wins; damaged snapshots fall through
    // to older swaps and a longer replay.
    let mut base: Option<(usize, u64, Vec<Experience>)> = None;
    let swaps: Vec<(usize, u64)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match &r.payload {
            LogPayload::RefineSwap { generation, .. } => Some((i, *generation)),
            LogPayload::Put { .. } => None,
        })
        .collect();
    let newest_generation = swaps.iter().map(|&(_, g)| g).max().unwrap_or(0);
    for &(i, generation) in swaps.iter().rev() {
        match read_snapshot(&snapshot_path(dir, generation)) {
            Ok(xs) => {
                base = Some((i, generation, xs));
                break;
            }
            Err(e) => {
                let w = format!("snapshot for generation {generation} unreadable ({e}); falling back");
                log::warn!("{w}");
                warnings.push(w);
            }
        }
    }

    let (replay_from, generation, mut experiences) = match base {
        Some((i, g, xs)) => (i + 1, g, xs),
        None => (0, 0, Vec::new()),
    };
    for record in &records[replay_from..] {
        if let LogPayload::Put { experience } = &record.payload {
            experiences.push(experience.clone());
        }
    }

    let next_lsn = records.last().map(|r| r.lsn + 1).unwrap_or(1);

    // Reopen for append, truncating any torn tail first so the next record
    // starts on a clean line boundary.
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(&log_path)?;
    if torn || valid_end < raw.len() {
        file.set_len(valid_end as u64)?;
        file.sync_data()?;
    }
    if valid_end > 0 && raw[valid_end - 1] != b'\n' {
        // Last valid record lost its newline to the crash; restore it.
        file.seek(SeekFrom::End(0))?;
        file.write_all(b"\n")?;
        file.sync_data()?;
    }

    Ok(Recovered {
        experiences,
        generation,
        next_generation: newest_generation + 1,
        log: LogWriter { file, next_lsn },
        warnings,
    })
}
