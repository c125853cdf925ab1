use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::atrc::{read_header, read_labels, read_trace_matrix};
use super::{argmax_rows, LabelVector, TraceMatrix};
use crate::error::{Error, Result};

/// One evaluation unit: the traces (and optionally logits and true labels)
/// of all inputs belonging to a single class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub class_index: i64,
    pub trace_path: PathBuf,
    #[serde(default)]
    pub logits_path: Option<PathBuf>,
    #[serde(default)]
    pub true_labels_path: Option<PathBuf>,
    pub count: u64,
}

/// JSON index of per-label trace files. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest { name: name.into(), entries, base_dir: base_dir.into() }
    }

    /// Parses a manifest and checks every referenced file.
    ///
    /// Only headers are read: each trace, logits and label file must exist,
    /// be a well-formed ATRC file, and have exactly `count` rows.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.verify()?;
        Ok(manifest)
    }

    pub fn verify(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.entries {
            let fail = |reason: String| Error::Manifest { entry: entry.label.clone(), reason };
            if !seen.insert(entry.class_index) {
                return Err(fail(format!("duplicate class_index {}", entry.class_index)));
            }
            let mut files = vec![("trace", &entry.trace_path)];
            files.extend(entry.logits_path.as_ref().map(|p| ("logits", p)));
            files.extend(entry.true_labels_path.as_ref().map(|p| ("true_labels", p)));
            for (what, rel) in files {
                let resolved = self.resolve(rel);
                let header = read_header(&resolved).map_err(|e| fail(format!("{what} file {}: {e}", resolved.display())))?;
                if header.rows != entry.count {
                    return Err(fail(format!(
                        "{what} file {} has {} rows but count is {}",
                        resolved.display(),
                        header.rows,
                        entry.count
                    )));
                }
                if what == "true_labels" && header.cols != 1 {
                    return Err(fail(format!("true_labels file has {} columns, expected 1", header.cols)));
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest JSON to `path`. Entry paths are written as stored.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.base_dir.join(rel)
        }
    }

    pub fn entry(&self, label: &str) -> Result<&ManifestEntry> {
        self.entries.iter().find(|e| e.label == label).ok_or_else(|| Error::Manifest {
            entry: label.to_string(),
            reason: format!("label not present in manifest {:?}", self.name),
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    pub fn traces(&self, entry: &ManifestEntry) -> Result<TraceMatrix> {
        read_trace_matrix(self.resolve(&entry.trace_path))
    }

    pub fn logits(&self, entry: &ManifestEntry) -> Result<Option<TraceMatrix>> {
        entry.logits_path.as_ref().map(|p| read_trace_matrix(self.resolve(p))).transpose()
    }

    pub fn true_labels(&self, entry: &ManifestEntry) -> Result<Option<LabelVector>> {
        let num_classes = match &entry.logits_path {
            Some(p) => Some(read_header(self.resolve(p))?.cols as usize),
            None => None,
        };
        entry.true_labels_path.as_ref().map(|p| read_labels(self.resolve(p), num_classes)).transpose()
    }

    /// Predicted classes (argmax of the logits), when logits are present.
    pub fn predicted_labels(&self, entry: &ManifestEntry) -> Result<Option<Vec<usize>>> {
        Ok(self.logits(entry)?.map(|l| argmax_rows(&l)))
    }

    /// Per-input correctness, when both logits and true labels are present.
    pub fn correctness(&self, entry: &ManifestEntry) -> Result<Option<Vec<bool>>> {
        match (self.predicted_labels(entry)?, self.true_labels(entry)?) {
            (Some(pred), Some(truth)) => Ok(Some(pred.iter().zip(truth.values()).map(|(p, t)| p == t).collect())),
            _ => Ok(None),
        }
    }
}
