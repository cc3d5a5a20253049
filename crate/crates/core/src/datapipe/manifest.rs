//! Dataset manifests: one JSON document per domain.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netarch::{write_atomic, DomainSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Half-open voxel box `[start, end)` inside a volume of extent `original`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub start: [usize; 3],
    pub end: [usize; 3],
    pub original: [usize; 3],
}

impl CropBox {
    pub fn full(extent: [usize; 3]) -> Self {
        CropBox {
            start: [0; 3],
            end: extent,
            original: extent,
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.end[a] - self.start[a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    /// Native spacing before preprocessing.
    pub spacing: [f64; 3],
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropBox>,
    /// Set once intensities have been clipped and z-scored.
    #[serde(default)]
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: DomainSpec,
    pub cases: Vec<Case>,
    /// Declared fraction of training cases.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Spacing every case was resampled to, once preprocessed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_spacing: Option<[f64; 3]>,
    #[serde(skip)]
    root: PathBuf,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl DatasetManifest {
    pub fn new(domain: DomainSpec, cases: Vec<Case>) -> Self {
        DatasetManifest {
            domain,
            cases,
            train_fraction: default_train_fraction(),
            target_spacing: None,
            root: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    /// Writes pretty JSON atomically and rebases relative paths on `path`'s directory.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        self.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    /// SHA-256 over the manifest JSON followed by every referenced file.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for c in &self.cases {
            for p in std::iter::once(&c.image).chain(c.label.as_ref()) {
                let path = self.resolve(p);
                h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        for c in &self.cases {
            if c.split == Split::Train && c.label.is_none() {
                return Err(Error::Config(format!("training case `{}` has no label", c.id)));
            }
            if c.spacing.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("case `{}`: spacing must be positive", c.id)));
            }
        }
        let n = self.cases.len() as f64;
        let train = self.split(Split::Train).count() as f64;
        if (train - self.train_fraction * n).abs() > 1.0 {
            return Err(Error::Config(format!(
                "{train} of {n} cases are training cases, declared fraction {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}
