//! Dataset manifests: CSV with an `image,mask` header. Relative paths
//! resolve against the manifest's directory; the mask column may be empty.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{load_image, load_mask, to_rgb, BinaryMask, ImageU8, DEFAULT_MASK_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// File stem of the image.
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn new(image: impl Into<PathBuf>, mask: Option<PathBuf>) -> Self {
        let image = image.into();
        let id = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        ManifestEntry { id, image, mask }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(file, base).map_err(|e| match e {
            Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(reader: impl Read, base_dir: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["image", "mask"] && cols != ["image"] {
            return Err(Error::Manifest(format!(
                "expected header `image,mask`, found `{}`",
                cols.join(",")
            )));
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut entries = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
            let image = row.get(0).unwrap_or("");
            if image.is_empty() {
                return Err(Error::Manifest(format!("row {}: empty image path", i + 1)));
            }
            let mask = row.get(1).filter(|m| !m.is_empty()).map(resolve);
            entries.push(ManifestEntry::new(resolve(image), mask));
        }
        Ok(Manifest { entries })
    }

    /// Writes the manifest, storing paths relative to its directory where
    /// possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::Manifest(e.to_string());
        w.write_record(["image", "mask"]).map_err(wrap)?;
        for e in &self.entries {
            let mask = e.mask.as_deref().map(rel).unwrap_or_default();
            w.write_record([rel(&e.image), mask]).map_err(wrap)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.entries.iter().all(|e| e.mask.is_some())
    }
}

/// An RGB image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageU8,
    pub mask: BinaryMask,
}

fn wrap(path: &Path, e: Error) -> Error {
    Error::Sample {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

impl Sample {
    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let mask_path = entry.mask.as_ref().ok_or_else(|| {
            Error::Manifest(format!("{}: no ground-truth mask listed", entry.image.display()))
        })?;
        let image = to_rgb(&load_image(&entry.image).map_err(|e| wrap(&entry.image, e))?);
        let mask = load_mask(mask_path, DEFAULT_MASK_THRESHOLD).map_err(|e| wrap(mask_path, e))?;
        if image.dimensions() != mask.dimensions() {
            return Err(wrap(
                mask_path,
                Error::DimensionMismatch(format!(
                    "mask is {:?}, image is {:?}",
                    mask.dimensions(),
                    image.dimensions()
                )),
            ));
        }
        Ok(Sample {
            id: entry.id.clone(),
            image,
            mask,
        })
    }
}

/// Loads every entry; all must have masks.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest.entries.iter().map(Sample::load).collect()
}
