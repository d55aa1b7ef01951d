//! Dataset manifest: one `path,label,split,source` record per line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Pneumonia,
    #[serde(rename = "COVID19")]
    Covid19,
    SyntheticA,
    SyntheticB,
    SyntheticUnknown,
}

impl Label {
    pub const ALL: [Label; 6] = [
        Label::Normal,
        Label::Pneumonia,
        Label::Covid19,
        Label::SyntheticA,
        Label::SyntheticB,
        Label::SyntheticUnknown,
    ];

    /// Classes that are held out from training by construction.
    pub fn is_held_out(self) -> bool {
        matches!(self, Label::Covid19 | Label::SyntheticUnknown)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Pneumonia => "Pneumonia",
            Label::Covid19 => "COVID19",
            Label::SyntheticA => "SyntheticA",
            Label::SyntheticB => "SyntheticB",
            Label::SyntheticUnknown => "SyntheticUnknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "normal" => Label::Normal,
            "pneumonia" => Label::Pneumonia,
            "covid19" | "covid" => Label::Covid19,
            "synthetica" => Label::SyntheticA,
            "syntheticb" => Label::SyntheticB,
            "syntheticunknown" => Label::SyntheticUnknown,
            _ => return Err(Error::UnknownLabel(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record counts per (label, split).
    pub fn counts(&self) -> BTreeMap<(Label, Split), usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry((r.label, r.split)).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, label: Label, split: Split) -> usize {
        self.records
            .iter()
            .filter(|r| r.label == label && r.split == split)
            .count()
    }

    /// Serialises back to the text format, paths written as stored.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# path,label,split,source\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.path.display(),
                r.label,
                r.split,
                r.source
            ));
        }
        s
    }
}

/// Parses manifest text. `origin` is only used in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!(
                "expected 4 comma-separated fields, found {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() {
            return Err(bad("empty path".into()));
        }
        let label: Label = fields[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let split: Split = fields[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        if label.is_held_out() && split == Split::Train {
            return Err(Error::UnknownClassInTrain {
                path: fields[0].to_string(),
                label: label.to_string(),
            });
        }
        records.push(ImageRecord {
            path: PathBuf::from(fields[0]),
            label,
            split,
            source: fields[3].to_string(),
        });
    }
    Ok(DatasetManifest { records })
}

/// Reads a manifest file, resolving relative image paths against its
/// directory and checking that every image exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text, path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for r in &mut m.records {
        if r.path.is_relative() {
            r.path = base.join(&r.path);
        }
    }
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(i, _)| i + 1)
        .collect();
    for (r, line) in m.records.iter().zip(lines) {
        if !r.path.is_file() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line,
                msg: format!("image {} not found", r.path.display()),
            });
        }
    }
    Ok(m)
}
