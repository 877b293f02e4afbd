//! JSON-lines dataset manifests.
//!
//! One record per line:
//!
//! ```text
//! {"frame_id": "...", "video_id": "...", "split": "train", "method": "DF", "label": 1,
//!  "image_path": "img/a.png", "landmarks": [[x, y], ...68], "box": [x0, y0, x1, y1],
//!  "paired_real_frame_id": "..."}
//! ```
//!
//! An optional first line `{"provenance": {...}}` records the source name,
//! sampling seed and the declared method set. Relative image paths resolve
//! against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::LandmarkSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split `{other}`"))),
        }
    }
}

/// Manipulation method tag. Unknown names are kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Method {
    Real,
    Deepfakes,
    Face2Face,
    FaceSwap,
    NeuralTextures,
    Other(String),
}

impl Method {
    pub fn is_real(&self) -> bool {
        *self == Method::Real
    }

    pub fn as_str(&self) -> &str {
        match self {
            Method::Real => "real",
            Method::Deepfakes => "DF",
            Method::Face2Face => "F2F",
            Method::FaceSwap => "FS",
            Method::NeuralTextures => "NT",
            Method::Other(s) => s,
        }
    }
}

impl From<String> for Method {
    fn from(s: String) -> Self {
        match s.as_str() {
            "real" => Method::Real,
            "DF" => Method::Deepfakes,
            "F2F" => Method::Face2Face,
            "FS" => Method::FaceSwap,
            "NT" => Method::NeuralTextures,
            _ => Method::Other(s),
        }
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.as_str().to_string()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: String,
    pub video_id: String,
    pub split: Split,
    pub method: Method,
    pub label: u8,
    pub image_path: PathBuf,
    pub landmarks: LandmarkSet,
    #[serde(rename = "box")]
    pub face_box: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_real_frame_id: Option<String>,
}

impl FrameRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.frame_id.is_empty() || self.video_id.is_empty() {
            return Err("frame_id and video_id must be non-empty".into());
        }
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.method.is_real() != (self.label == 0) {
            return Err(format!(
                "label {} is inconsistent with method `{}`",
                self.label, self.method
            ));
        }
        if self.face_box.iter().any(|v| !v.is_finite()) {
            return Err("box must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    /// Declared fake methods; empty means unrestricted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub provenance: Option<Provenance>,
    pub records: Vec<FrameRecord>,
    /// Directory relative image paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(provenance: Option<Provenance>, records: Vec<FrameRecord>, root: PathBuf) -> Result<Self> {
        let m = Self {
            provenance,
            records,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let offset = usize::from(self.provenance.is_some()) + 1;
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + offset;
            r.validate().map_err(|message| Error::Manifest { line, message })?;
            if !seen.insert(r.frame_id.as_str()) {
                return Err(Error::Manifest {
                    line,
                    message: format!("duplicate frame_id `{}`", r.frame_id),
                });
            }
            if let Some(p) = &self.provenance {
                if !r.method.is_real() && !p.methods.is_empty() && !p.methods.contains(&r.method) {
                    return Err(Error::Manifest {
                        line,
                        message: format!("method `{}` is not declared in the provenance header", r.method),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &FrameRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.root.join(&record.image_path)
        }
    }

    pub fn find(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.records.iter().find(|r| r.frame_id == frame_id)
    }

    /// Records whose split and method pass the filters, in manifest order.
    pub fn select(&self, split: Option<Split>, methods: Option<&[Method]>) -> Vec<&FrameRecord> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .filter(|r| methods.is_none_or(|m| r.method.is_real() || m.contains(&r.method)))
            .collect()
    }

    /// Frame ids grouped by video, videos in first-appearance order.
    pub fn videos(&self) -> Vec<(String, Vec<String>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for r in &self.records {
            let e = map.entry(r.video_id.as_str()).or_default();
            if e.is_empty() {
                order.push(r.video_id.clone());
            }
            e.push(r.frame_id.clone());
        }
        order
            .into_iter()
            .map(|v| {
                let frames = map.remove(v.as_str()).unwrap_or_default();
                (v, frames)
            })
            .collect()
    }
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut provenance = None;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| Error::Manifest { line, message: e.to_string() })?;
        if value.get("provenance").is_some() {
            if !records.is_empty() || provenance.is_some() {
                return Err(Error::Manifest {
                    line,
                    message: "provenance header must be the first line".into(),
                });
            }
            let h: HeaderLine =
                serde_json::from_value(value).map_err(|e| Error::Manifest { line, message: e.to_string() })?;
            provenance = Some(h.provenance);
            continue;
        }
        let record: FrameRecord =
            serde_json::from_value(value).map_err(|e| Error::Manifest { line, message: e.to_string() })?;
        record.validate().map_err(|message| Error::Manifest { line, message })?;
        records.push((line, record));
    }
    let mut seen = HashSet::new();
    for (line, r) in &records {
        if !seen.insert(r.frame_id.clone()) {
            return Err(Error::Manifest {
                line: *line,
                message: format!("duplicate frame_id `{}`", r.frame_id),
            });
        }
    }
    let m = DatasetManifest {
        provenance,
        records: records.into_iter().map(|(_, r)| r).collect(),
        root: root.to_path_buf(),
    };
    m.validate()?;
    Ok(m)
}

pub fn ingest_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &root)
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    let mut out = String::new();
    if let Some(p) = &manifest.provenance {
        out.push_str(&serde_json::to_string(&HeaderLine { provenance: p.clone() })?);
        out.push('\n');
    }
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    crate::util::write_atomic(path, manifest_to_string(manifest)?.as_bytes())
}
