use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::EntitySet;
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, write_json_pretty, write_jsonl};
use crate::rule::FrameAnnotation;

/// One image, its article, and the gold caption. Stored one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub article: String,
    pub caption: String,
    pub image_feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FrameAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<EntitySet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub count: usize,
}

/// Sidecar describing the JSONL files of a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub d_img: usize,
    pub splits: Vec<SplitInfo>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "rulecap-dataset";

impl Manifest {
    pub fn split(&self, name: &str) -> Option<&SplitInfo> {
        self.splits.iter().find(|s| s.name == name)
    }
}

/// Checks unique ids and a uniform, finite feature dimension.
pub fn validate_samples(samples: &[Sample], d_img: Option<usize>) -> Result<Option<usize>> {
    let mut ids = HashSet::new();
    let mut dim = d_img;
    for s in samples {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate sample id {}", s.id)));
        }
        match dim {
            None => dim = Some(s.image_feature.len()),
            Some(d) if d != s.image_feature.len() => {
                return Err(Error::Dimension(format!(
                    "sample {} has feature dimension {}, expected {d}",
                    s.id,
                    s.image_feature.len()
                )))
            }
            _ => {}
        }
        if s.image_feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sample {} has a non-finite feature",
                s.id
            )));
        }
    }
    Ok(dim)
}

/// Writes `<split>.jsonl` for every split plus `manifest.json`.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    d_img: usize,
    splits: &[(&str, &[Sample])],
) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut infos = Vec::new();
    for (name, samples) in splits {
        validate_samples(samples, Some(d_img))?;
        let file = format!("{name}.jsonl");
        write_jsonl(dir.join(&file), samples)?;
        infos.push(SplitInfo {
            name: name.to_string(),
            file,
            count: samples.len(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        d_img,
        splits: infos,
    };
    write_json_pretty(dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads one split. `path` is either a JSONL file or a dataset directory,
/// in which case the manifest is consulted.
pub fn load_dataset(path: impl AsRef<Path>, split: &str) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    if path.is_dir() {
        let manifest: Manifest = read_json(path.join(MANIFEST_FILE))?;
        if manifest.format != FORMAT {
            return Err(Error::InvalidInput(format!(
                "unknown dataset format {}",
                manifest.format
            )));
        }
        let info = manifest
            .split(split)
            .ok_or_else(|| Error::InvalidInput(format!("dataset has no split named {split}")))?;
        let samples: Vec<Sample> = read_jsonl(path.join(&info.file))?;
        if samples.len() != info.count {
            return Err(Error::InvalidInput(format!(
                "split {split} has {} samples, manifest says {}",
                samples.len(),
                info.count
            )));
        }
        validate_samples(&samples, Some(manifest.d_img))?;
        Ok(samples)
    } else {
        let samples: Vec<Sample> = read_jsonl(path)?;
        validate_samples(&samples, None)?;
        Ok(samples)
    }
}
