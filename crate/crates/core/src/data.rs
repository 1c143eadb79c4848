//! Samples, dataset manifests and loading.
//!
//! A manifest is a JSON document
//! `{"version": 1, "root": "...", "entries": [{"path", "split", "label", "mask"?, "group"?}]}`.
//! Relative roots are resolved against the manifest's directory, entry paths
//! against the root.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Image,
    pub label: Label,
    pub mask: Option<Mask>,
    pub group: Option<u32>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Image, label: Label, mask: Option<Mask>) -> Result<Self> {
        let id = id.into();
        if !pixels.is_unit_range() {
            return Err(Error::Data(format!("sample {id}: pixels must be finite and within [0, 1]")));
        }
        if let Some(m) = &mask {
            if m.height() != pixels.height() || m.width() != pixels.width() {
                return Err(Error::Shape(format!(
                    "sample {id}: mask {}x{} vs image {}x{}",
                    m.height(),
                    m.width(),
                    pixels.height(),
                    pixels.width()
                )));
            }
        }
        Ok(Self { id, pixels, label, mask, group: None })
    }

    pub fn with_group(mut self, group: Option<u32>) -> Self {
        self.group = group;
        self
    }

    pub fn is_abnormal(&self) -> bool {
        self.label == Label::Abnormal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub root: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory the manifest was read from; anchors a relative `root`.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<String>, entries: Vec<ManifestEntry>) -> Self {
        Self { version: MANIFEST_VERSION, root: root.into(), entries, base_dir: PathBuf::new() }
    }

    pub fn root_dir(&self) -> PathBuf {
        let root = Path::new(&self.root);
        if root.is_absolute() {
            root.to_path_buf()
        } else {
            self.base_dir.join(root)
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root_dir().join(rel)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// `(train, test)` entry counts.
    pub fn split_sizes(&self) -> (usize, usize) {
        let train = self.entries_in(Split::Train).count();
        (train, self.entries.len() - train)
    }

    /// Checks schema version, the normal-only training contract, and that
    /// every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.path.is_empty() {
                return Err(Error::Manifest(format!("entry {i} has an empty path")));
            }
            if e.split == Split::Train && e.label != Label::Normal {
                return Err(Error::Manifest(format!(
                    "entry {i} ({}) is in the training split with label {:?}; training data must be normal",
                    e.path, e.label
                )));
            }
            let p = self.resolve(&e.path);
            if !p.is_file() {
                return Err(Error::Manifest(format!("entry {i}: missing file {}", p.display())));
            }
            if let Some(m) = &e.mask {
                let mp = self.resolve(m);
                if !mp.is_file() {
                    return Err(Error::Manifest(format!("entry {i}: missing mask {}", mp.display())));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Images are resized to `image_size x image_size`.
    pub image_size: usize,
    pub channels: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { image_size: 256, channels: 3 }
    }
}

/// Decodes every entry of `split`: bilinear resize for images, nearest for masks.
pub fn load_split(manifest: &DatasetManifest, split: Split, opts: LoadOptions) -> Result<Vec<ImageSample>> {
    manifest
        .entries_in(split)
        .map(|e| {
            let path = manifest.resolve(&e.path);
            let pixels = io::read_image(&path, opts.channels)?.resize_bilinear(opts.image_size, opts.image_size);
            let mask = match &e.mask {
                Some(m) => Some(io::read_mask(&manifest.resolve(m))?.resize_nearest(opts.image_size, opts.image_size)),
                None => None,
            };
            let id = Path::new(&e.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.path.clone());
            Ok(ImageSample::new(id, pixels, e.label, mask)?.with_group(e.group))
        })
        .collect()
}

/// Writes samples as PNGs under `dir` (`train/`, `test/`, `masks/`) together
/// with `manifest.json`, and returns the manifest.
pub fn export_dataset(dir: &Path, train: &[ImageSample], test: &[ImageSample]) -> Result<DatasetManifest> {
    for sub in ["train", "test", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for (split, samples) in [(Split::Train, train), (Split::Test, test)] {
        for s in samples {
            if split == Split::Train && s.label != Label::Normal {
                return Err(Error::Data(format!("training sample {} is not normal", s.id)));
            }
            let sub = if split == Split::Train { "train" } else { "test" };
            let rel = format!("{sub}/{}.png", s.id);
            io::write_image(&dir.join(&rel), &s.pixels)?;
            let mask = match &s.mask {
                Some(m) => {
                    let mrel = format!("masks/{}.png", s.id);
                    io::write_mask(&dir.join(&mrel), m)?;
                    Some(mrel)
                }
                None => None,
            };
            entries.push(ManifestEntry { path: rel, split, label: s.label, mask, group: s.group });
        }
    }
    let mut manifest = DatasetManifest::new(".", entries);
    write_manifest(&manifest, &dir.join("manifest.json"))?;
    manifest.base_dir = dir.to_path_buf();
    Ok(manifest)
}
