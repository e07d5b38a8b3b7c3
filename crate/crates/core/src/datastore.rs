//! JSON Lines stores, index sidecars, SFT export and dataset statistics.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StoreError;
use crate::model::Example;
use crate::prompts::{format_reason_action, render_act};
use crate::retrieval::{DenseIndex, SparseIndex};

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const SPARSE_INDEX_FILE: &str = "sparse.json";
pub const DENSE_INDEX_FILE: &str = "dense.json";

/// Reasoning text used in exported targets; backward-constructed
/// trajectories carry actions only.
pub const REASON_PLACEHOLDER: &str = "(from trajectory)";

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| StoreError::Line {
            path: path.to_path_buf(),
            line: n + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

fn create_parent(path: &Path) -> Result<(), StoreError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| StoreError::io(p, e)),
        _ => Ok(()),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_all(b"\n").map_err(|e| StoreError::io(path, e))?;
    }
    w.flush().map_err(|e| StoreError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| StoreError::io(path, e))
}

/// Number of non-blank lines.
pub fn count_records(path: &Path) -> Result<usize, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        if !line.map_err(|e| StoreError::io(path, e))?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

/// Writes the examples and both indexes into `dir`.
pub fn save_index(
    dir: &Path,
    examples: &[Example],
    sparse: &SparseIndex,
    dense: &DenseIndex,
) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    write_jsonl(&dir.join(EXAMPLES_FILE), examples)?;
    write_json(&dir.join(SPARSE_INDEX_FILE), sparse)?;
    write_json(&dir.join(DENSE_INDEX_FILE), dense)
}

pub fn load_index(dir: &Path) -> Result<(Vec<Example>, SparseIndex, DenseIndex), StoreError> {
    Ok((
        read_jsonl(&dir.join(EXAMPLES_FILE))?,
        read_json(&dir.join(SPARSE_INDEX_FILE))?,
        read_json(&dir.join(DENSE_INDEX_FILE))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SftExport {
    pub pairs: Vec<SftPair>,
    /// Examples without actions.
    pub skipped: usize,
}

/// One prompt/target pair per action: the prompt holds the instruction, the
/// history so far and the current observation; the target is that action.
pub fn export_sft(examples: &[Example], system_message: &str) -> SftExport {
    let mut out = SftExport::default();
    for ex in examples {
        let traj = &ex.trajectory;
        if traj.action_count() == 0 {
            out.skipped += 1;
            continue;
        }
        let obs = traj.observations();
        let history: Vec<(&str, &str)> = obs
            .iter()
            .zip(traj.actions())
            .map(|(o, a)| (o.text.as_str(), a.raw.as_str()))
            .collect();
        for (k, action) in traj.actions().iter().enumerate() {
            out.pairs.push(SftPair {
                input: render_act(system_message, &ex.instruction, &history[..k], &obs[k].text, &[]),
                output: format_reason_action(REASON_PLACEHOLDER, action),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub documents: usize,
    pub raw_trajectories: usize,
    pub examples: usize,
    pub filtered_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: DatasetCounts,
    /// SHA-256 of the canonical pipeline configuration.
    pub config_fingerprint: String,
    pub created_at: String,
}

/// Store locations; a `None` stage counts as zero.
#[derive(Debug, Clone, Default)]
pub struct StorePaths {
    pub documents: Option<PathBuf>,
    pub raw_trajectories: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub filtered_examples: Option<PathBuf>,
}

pub fn count_stores(paths: &StorePaths) -> Result<DatasetCounts, StoreError> {
    let count = |p: &Option<PathBuf>| p.as_deref().map(count_records).transpose().map(Option::unwrap_or_default);
    Ok(DatasetCounts {
        documents: count(&paths.documents)?,
        raw_trajectories: count(&paths.raw_trajectories)?,
        examples: count(&paths.examples)?,
        filtered_examples: count(&paths.filtered_examples)?,
    })
}

pub fn config_fingerprint(canonical_config: &str) -> String {
    hex::encode(Sha256::digest(canonical_config.as_bytes()))
}

/// RFC 3339 UTC timestamp. `SOURCE_DATE_EPOCH` overrides the clock so
/// repeated runs produce identical files.
pub fn creation_timestamp() -> String {
    let from_env = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    from_env
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn manifest(paths: &StorePaths, canonical_config: &str) -> Result<DatasetManifest, StoreError> {
    Ok(DatasetManifest {
        counts: count_stores(paths)?,
        config_fingerprint: config_fingerprint(canonical_config),
        created_at: creation_timestamp(),
    })
}

/// `1234567` -> `"1,234,567"`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (k, c) in digits.chars().enumerate() {
        if k > 0 && (digits.len() - k).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Markdown table of per-dataset counts.
pub fn render_stats_table(rows: &[(String, DatasetCounts)]) -> String {
    let mut s = String::from(
        "| Dataset | Documents | Raw trajectories | Examples | Filtered examples |\n\
         |---|---:|---:|---:|---:|\n",
    );
    for (name, c) in rows {
        s.push_str(&format!(
            "| {name} | {} | {} | {} | {} |\n",
            group_thousands(c.documents),
            group_thousands(c.raw_trajectories),
            group_thousands(c.examples),
            group_thousands(c.filtered_examples),
        ));
    }
    s
}
