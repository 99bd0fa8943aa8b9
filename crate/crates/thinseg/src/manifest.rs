//! Dataset manifests: one `id<TAB>image_path<TAB>mask_path` line per
//! sample. Blank lines and lines starting with `#` are skipped.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Entries in file order, with relative paths resolved against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: String| Error::Manifest {
            path: path.into(),
            line,
            reason,
        };
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let [id, image, mask] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate id {id:?}")));
        }
        let image = base.join(image);
        let mask = base.join(mask);
        for (what, p) in [("image", &image), ("mask", &mask)] {
            if !p.is_file() {
                return Err(err(format!("{what} file {} not found", p.display())));
            }
        }
        out.push(ManifestEntry {
            id: id.into(),
            image,
            mask,
        });
    }
    Ok(out)
}
