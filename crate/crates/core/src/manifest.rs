//! Declarative listing of the volumes backing each stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Sidecar};
use crate::volume::{LabelMap, Modality, Volume};

/// Which pool a record belongs to. `TranslatorTrain` holds the unpaired,
/// unlabelled images used only to fit the translator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TranslatorTrain,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub case_id: String,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub modality: Modality,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            root: root.into(),
        }
    }

    pub fn select(&self, split: Split, modality: Modality) -> impl Iterator<Item = &Record> {
        self.records
            .iter()
            .filter(move |r| r.split == split && r.modality == modality)
    }

    pub fn count(&self, split: Split, modality: Modality) -> usize {
        self.select(split, modality).count()
    }

    pub fn image_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.image)
    }

    pub fn label_path(&self, r: &Record) -> Option<PathBuf> {
        r.label.as_ref().map(|l| self.root.join(l))
    }

    pub fn load_image(&self, r: &Record) -> Result<Volume> {
        io::load_volume(&self.image_path(r))
    }

    pub fn load_label(&self, r: &Record) -> Result<LabelMap> {
        let path = self
            .label_path(r)
            .ok_or_else(|| Error::Validation(format!("case {} has no label", r.case_id)))?;
        io::load_labelmap(&path)
    }

    /// Loads image and label of a labelled record, checking their extents agree.
    pub fn load_pair(&self, r: &Record) -> Result<(Volume, LabelMap)> {
        let v = self.load_image(r)?;
        let l = self.load_label(r)?;
        l.check_matches(&v)?;
        Ok((v, l))
    }

    pub fn find(&self, case_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.case_id == case_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and checks that every path resolves and that
    /// labelled records have label extents equal to their image extents.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.case_id) {
                return Err(Error::Validation(format!("duplicate case id {}", r.case_id)));
            }
            let img = read_sidecar(&self.image_path(r))?;
            if let Some(lp) = self.label_path(r) {
                let lab = read_sidecar(&lp)?;
                if lab.dims != img.dims {
                    return Err(Error::Shape(format!(
                        "case {}: image dims {:?}, label dims {:?}",
                        r.case_id, img.dims, lab.dims
                    )));
                }
            }
        }
        Ok(())
    }
}

fn read_sidecar(payload: &Path) -> Result<Sidecar> {
    if !payload.exists() {
        return Err(Error::io(
            payload,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest path does not resolve"),
        ));
    }
    let side = io::sidecar_path(payload);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(&side, e.to_string()))
}
