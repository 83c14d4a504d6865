//! Synthetic dataset splits on disk: `labeled/`, `unlabeled/`, `test/` and a
//! `dataset.json` manifest listing the scan ids of each split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SplitCounts;
use crate::error::{Error, Result};
use crate::volume::{generate_scan, read_scan, scan_paths, write_scan, GenConfig, LabeledScan};

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Labeled, Split::Unlabeled, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    /// Generator index of scan `i`; splits never share a scan.
    pub fn scan_index(self, i: usize) -> u64 {
        let base: u64 = match self {
            Split::Labeled => 0,
            Split::Unlabeled => 1 << 32,
            Split::Test => 2 << 32,
        };
        base + i as u64
    }

    pub fn scan_id(self, i: usize) -> String {
        format!("{}_{i:04}", self.dir_name())
    }
}

/// Scan `i` of `split`. Unlabeled scans carry no boxes.
pub fn generate_split_scan(cfg: &GenConfig, split: Split, i: usize) -> Result<LabeledScan<f32>> {
    let mut scan = generate_scan(cfg, split.scan_index(i))?;
    scan.id = split.scan_id(i);
    if split == Split::Unlabeled {
        scan.boxes.clear();
    }
    Ok(scan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator: GenConfig,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Test => &self.test,
        }
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))
    }
}

/// All three splits in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub labeled: Vec<LabeledScan<f32>>,
    pub unlabeled: Vec<LabeledScan<f32>>,
    pub test: Vec<LabeledScan<f32>>,
}

impl Dataset {
    pub fn generate(cfg: &GenConfig, counts: SplitCounts) -> Result<Self> {
        let make = |split: Split, n: usize| (0..n).map(|i| generate_split_scan(cfg, split, i)).collect::<Result<Vec<_>>>();
        Ok(Self {
            labeled: make(Split::Labeled, counts.labeled)?,
            unlabeled: make(Split::Unlabeled, counts.unlabeled)?,
            test: make(Split::Test, counts.test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[LabeledScan<f32>] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Test => &self.test,
        }
    }
}

/// Write one split directory (created if needed) and return its scan ids.
pub fn write_split(root: &Path, split: Split, scans: &[LabeledScan<f32>]) -> Result<Vec<String>> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    scans
        .iter()
        .map(|s| write_scan(s, &dir).map(|_| s.id.clone()))
        .collect()
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read the scans of `split` listed in the manifest, in manifest order.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LabeledScan<f32>>> {
    let dir = root.join(split.dir_name());
    manifest
        .ids(split)
        .iter()
        .map(|id| read_scan(&scan_paths(&dir, id).1))
        .collect()
}

/// Read every scan of a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<LabeledScan<f32>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| read_scan(p)).collect()
}
