//! On-disk stereo datasets.
//!
//! ```text
//! <root>/left/<id>.png     8-bit RGB
//! <root>/right/<id>.png
//! <root>/disp/<id>.pfm     or <id>.png (16-bit, value/256)
//! <root>/manifest.txt      optional, one "<id> left/<id>.png right/<id>.png disp/<id>.<ext>" per line
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::formats::{read_disparity_pfm, read_image, read_kitti_disparity, write_disparity_pfm, write_image, write_kitti_disparity};
use crate::stereo::DisparityMap;
use crate::tensor::Tensor;

/// A rectified pair with full-resolution ground truth (positive disparities,
/// match in the right image at `x − d`).
#[derive(Debug, Clone)]
pub struct StereoSample {
    pub id: String,
    pub left: Tensor,
    pub right: Tensor,
    pub gt: DisparityMap,
}

impl StereoSample {
    pub fn check(&self) -> Result<()> {
        let [_, _, h, w] = self.left.shape();
        if self.right.shape() != self.left.shape() || self.gt.shape() != [1, 1, h, w] {
            return Err(Error::dim(format!(
                "sample {}: left {:?}, right {:?}, disparity {:?}",
                self.id,
                self.left.shape(),
                self.right.shape(),
                self.gt.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispFormat {
    Pfm,
    Png,
}

impl DispFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DispFormat::Pfm => "pfm",
            DispFormat::Png => "png",
        }
    }

    pub fn from_extension(path: &Path) -> Option<DispFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pfm" => Some(DispFormat::Pfm),
            "png" => Some(DispFormat::Png),
            _ => None,
        }
    }

    pub fn parse(tag: &str) -> Option<DispFormat> {
        match tag {
            "pfm" => Some(DispFormat::Pfm),
            "png" | "kitti" => Some(DispFormat::Png),
            _ => None,
        }
    }
}

/// Reads a disparity file, choosing the decoder from the extension.
pub fn read_disparity(path: &Path) -> Result<DisparityMap> {
    match DispFormat::from_extension(path) {
        Some(DispFormat::Pfm) => read_disparity_pfm(path),
        Some(DispFormat::Png) => read_kitti_disparity(path),
        None => Err(Error::usage(format!(
            "{}: disparity files end in .pfm or .png",
            path.display()
        ))),
    }
}

pub fn write_disparity(path: &Path, map: &DisparityMap) -> Result<()> {
    match DispFormat::from_extension(path) {
        Some(DispFormat::Pfm) => write_disparity_pfm(path, map),
        Some(DispFormat::Png) => write_kitti_disparity(path, map),
        None => Err(Error::usage(format!(
            "{}: disparity files end in .pfm or .png",
            path.display()
        ))),
    }
}

fn paths(root: &Path, id: &str, format: DispFormat) -> [PathBuf; 3] {
    [
        root.join("left").join(format!("{id}.png")),
        root.join("right").join(format!("{id}.png")),
        root.join("disp").join(format!("{id}.{}", format.extension())),
    ]
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one sample into the layout, creating directories as needed.
pub fn write_sample(root: &Path, sample: &StereoSample, format: DispFormat) -> Result<()> {
    sample.check()?;
    for dir in ["left", "right", "disp"] {
        create_dir(&root.join(dir))?;
    }
    let [l, r, d] = paths(root, &sample.id, format);
    write_image(&l, &sample.left)?;
    write_image(&r, &sample.right)?;
    write_disparity(&d, &sample.gt)
}

pub fn write_manifest(root: &Path, ids: &[String], format: DispFormat) -> Result<()> {
    create_dir(root)?;
    let mut text = String::new();
    for id in ids {
        text.push_str(&format!(
            "{id} left/{id}.png right/{id}.png disp/{id}.{}\n",
            format.extension()
        ));
    }
    let path = root.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Ids listed in `<root>/manifest.txt`, if present.
pub fn read_manifest(root: &Path) -> Result<Option<Vec<String>>> {
    let path = root.join("manifest.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(
        text.lines()
            .filter_map(|l| l.split_whitespace().next())
            .filter(|id| !id.starts_with('#'))
            .map(str::to_string)
            .collect(),
    ))
}

/// File stems under `dir` carrying `ext`; empty if `dir` is absent.
fn stems(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Every complete sample under `root`, ordered by id. Any id present in one
/// directory but missing from another is reported, all at once.
pub fn load_dataset(root: &Path, format: DispFormat) -> Result<Vec<StereoSample>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let left = stems(&root.join("left"), "png")?;
    let right = stems(&root.join("right"), "png")?;
    let disp = stems(&root.join("disp"), format.extension())?;
    let mut ids: BTreeSet<String> = left.union(&right).chain(disp.iter()).cloned().collect();
    if let Some(listed) = read_manifest(root)? {
        ids.extend(listed);
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !(left.contains(*id) && right.contains(*id) && disp.contains(*id)))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSamples(missing));
    }
    ids.into_iter()
        .map(|id| {
            let [l, r, d] = paths(root, &id, format);
            let sample = StereoSample {
                left: read_image(&l)?,
                right: read_image(&r)?,
                gt: read_disparity(&d)?,
                id,
            };
            sample.check()?;
            Ok(sample)
        })
        .collect()
}
