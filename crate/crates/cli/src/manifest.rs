//! Content manifests: SHA-256 of every file a command wrote.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use jointwatch::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentManifest {
    pub command: String,
    /// Relative path (forward slashes) to hex digest.
    pub files: BTreeMap<String, String>,
}

impl ContentManifest {
    /// Hashes the files and directory trees under `root` named in `entries`;
    /// missing entries are skipped.
    pub fn collect(command: &str, root: &Path, entries: &[&str]) -> Result<Self> {
        let mut files = BTreeMap::new();
        for entry in entries {
            let start = root.join(entry);
            if !start.exists() {
                continue;
            }
            for item in WalkDir::new(&start).sort_by_file_name() {
                let item = item.map_err(|e| Error::Data(format!("{}: {e}", start.display())))?;
                if !item.file_type().is_file() {
                    continue;
                }
                let rel = item
                    .path()
                    .strip_prefix(root)
                    .map_err(|e| Error::Internal(e.to_string()))?;
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                files.insert(key, file_digest(item.path())?);
            }
        }
        Ok(Self {
            command: command.to_string(),
            files,
        })
    }

    /// Writes `manifest.json` and returns the digest of its bytes.
    pub fn write(&self, root: &Path) -> Result<String> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        Ok(bytes_digest(text.as_bytes()))
    }
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digest of a dataset directory's annotations, keypoints, scene and frames.
pub fn dataset_digest(root: &Path) -> Result<String> {
    use jointwatch::synthgen::{ANNOTATION_FILE, FRAME_DIR, KEYPOINT_DIR, SCENE_FILE};
    let m = ContentManifest::collect("dataset", root, &[ANNOTATION_FILE, SCENE_FILE, KEYPOINT_DIR, FRAME_DIR])?;
    if m.files.is_empty() {
        return Err(Error::Data(format!("{}: not a dataset directory", root.display())));
    }
    Ok(bytes_digest(serde_json::to_string(&m.files)?.as_bytes()))
}
