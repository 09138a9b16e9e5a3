//! Expert-labeled examples, optionally persisted as a directory of raw f32
//! blobs plus an `index.jsonl`.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::classifier::TrainingExample;
use crate::error::{Error, Result};
use crate::preprocess::{FusedInput, FusionGroup};

use super::DefectClass;

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainingEntry {
    pub decision_id: u64,
    pub label: DefectClass,
    pub input: FusedInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexLine {
    file: String,
    decision_id: u64,
    group_id: FusionGroup,
    label: DefectClass,
    channels: usize,
    height: usize,
    width: usize,
    window_index: u64,
    track_start_m: f64,
    track_end_m: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RetrainingSet {
    dir: Option<PathBuf>,
    entries: Vec<RetrainingEntry>,
}

impl RetrainingSet {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a persistent set, loading existing records.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let index = dir.join(INDEX_FILE);
        let mut entries = Vec::new();
        if index.exists() {
            for (n, line) in BufReader::new(fs::File::open(&index)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: IndexLine = serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", index.display(), n + 1)))?;
                let bytes = fs::read(dir.join(&rec.file))?;
                let len = rec.channels * rec.height * rec.width;
                if bytes.len() != len * 4 {
                    return Err(Error::TruncatedBlob {
                        path: dir.join(&rec.file).display().to_string(),
                        expected: (len * 4) as u64,
                        actual: bytes.len() as u64,
                    });
                }
                let mut planes = vec![0.0f32; len];
                LittleEndian::read_f32_into(&bytes, &mut planes);
                entries.push(RetrainingEntry {
                    decision_id: rec.decision_id,
                    label: rec.label,
                    input: FusedInput {
                        group: rec.group_id,
                        window_index: rec.window_index,
                        track_start_m: rec.track_start_m,
                        track_end_m: rec.track_end_m,
                        channels: rec.channels,
                        height: rec.height,
                        width: rec.width,
                        planes,
                    },
                });
            }
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            entries,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RetrainingEntry] {
        &self.entries
    }

    pub fn append(&mut self, entries: &[RetrainingEntry]) -> Result<()> {
        if let Some(dir) = &self.dir {
            let mut index = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(INDEX_FILE))?;
            for (k, e) in entries.iter().enumerate() {
                let file = format!(
                    "{:06}-{}-{}.f32",
                    self.entries.len() + k,
                    e.decision_id,
                    e.input.group
                );
                let mut bytes = vec![0u8; e.input.planes.len() * 4];
                LittleEndian::write_f32_into(&e.input.planes, &mut bytes);
                fs::write(dir.join(&file), bytes)?;
                let line = IndexLine {
                    file,
                    decision_id: e.decision_id,
                    group_id: e.input.group,
                    label: e.label,
                    channels: e.input.channels,
                    height: e.input.height,
                    width: e.input.width,
                    window_index: e.input.window_index,
                    track_start_m: e.input.track_start_m,
                    track_end_m: e.input.track_end_m,
                };
                writeln!(index, "{}", serde_json::to_string(&line)?)?;
            }
        }
        self.entries.extend_from_slice(entries);
        Ok(())
    }

    /// Training examples for one group.
    pub fn examples(&self, group: FusionGroup) -> Vec<TrainingExample> {
        self.entries
            .iter()
            .filter(|e| e.input.group == group)
            .map(|e| TrainingExample {
                input: e.input.clone(),
                label: e.label,
            })
            .collect()
    }
}
