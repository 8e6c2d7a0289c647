//! On-disk case layout: `<id>_img.nii[.gz]` images, `<id>_seg.nii[.gz]`
//! ground truth and `<id>_pred.nii[.gz]` predictions in flat directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use myoseg::nifti::{read_label_map, read_volume};
use myoseg::Case;
use serde::{Deserialize, Serialize};

pub const IMAGE: &str = "img";
pub const SEGMENTATION: &str = "seg";
pub const PREDICTION: &str = "pred";

pub fn case_name(index: usize) -> String {
    format!("case_{index:04}")
}

pub fn file_name(id: &str, role: &str) -> String {
    format!("{id}_{role}.nii.gz")
}

/// Split `case_0001_img.nii.gz` into `("case_0001", "img")`.
pub fn parse_name(path: &Path) -> Option<(String, String)> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    let (id, role) = stem.rsplit_once('_')?;
    Some((id.to_string(), role.to_string()))
}

/// Files in `dir` with the given role, keyed by case id.
pub fn scan(dir: &Path, role: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut found = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        if let Some((id, r)) = parse_name(&path) {
            if r == role {
                if let Some(previous) = found.insert(id.clone(), path.clone()) {
                    bail!("case {id} has two {role} files: {} and {}", previous.display(), path.display());
                }
            }
        }
    }
    Ok(found)
}

/// Every image/ground-truth pair in `dir`, ordered by case id.
pub fn load_cases(dir: &Path, only: Option<&[String]>) -> Result<Vec<Case>> {
    let images = scan(dir, IMAGE)?;
    let labels = scan(dir, SEGMENTATION)?;
    let ids: Vec<String> = match only {
        Some(ids) => ids.to_vec(),
        None => images.keys().cloned().collect(),
    };
    if ids.is_empty() {
        bail!("no *_{IMAGE}.nii[.gz] files in {}", dir.display());
    }
    ids.iter()
        .map(|id| {
            let img = images
                .get(id)
                .with_context(|| format!("case {id}: no image in {}", dir.display()))?;
            let seg = labels
                .get(id)
                .with_context(|| format!("case {id}: no ground truth in {}", dir.display()))?;
            let image = read_volume(img).with_context(|| format!("reading {}", img.display()))?;
            let gt = read_label_map(seg).with_context(|| format!("reading {}", seg.display()))?;
            Ok(Case::new(id.clone(), image, gt)?)
        })
        .collect()
}

/// Train/test case ids as written by `split`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub seed: u64,
    pub train_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading split {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing split {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(file_name(&case_name(7), IMAGE), "case_0007_img.nii.gz");
        assert_eq!(
            parse_name(Path::new("/x/case_0007_seg.nii.gz")),
            Some(("case_0007".into(), "seg".into()))
        );
        assert_eq!(parse_name(Path::new("a_pred.nii")), Some(("a".into(), "pred".into())));
        assert_eq!(parse_name(Path::new("notes.txt")), None);
    }
}
