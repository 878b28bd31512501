//! Line-delimited JSON dataset manifests.
//!
//! The first line is a header record `{"format":"cofsep-manifest","version":1}`;
//! each following line is one entry. Relative paths are resolved against the
//! manifest's directory on load.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "cofsep-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// One video: a frames source (PNG directory or packed tensor), its audio
/// track, an optional flow stack, a category label and a split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: PathBuf,
    pub audio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<PathBuf>,
    pub category: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::invalid(format!("duplicate manifest id '{}'", e.id)));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Entries of a split, erroring when the split is empty.
    pub fn require_split(&self, split: Split) -> Result<Vec<&ManifestEntry>> {
        let v = self.split(split);
        if v.is_empty() {
            return Err(Error::invalid(format!("manifest has no '{split}' entries")));
        }
        Ok(v)
    }

    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.category.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        cats.sort();
        cats
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Load and validate: header, unique ids, and existence of every
    /// referenced path (relative paths resolve against the manifest dir).
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest"))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::format(
                path,
                format!("unexpected format '{}'", header.format),
            ));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", header.version),
            ));
        }
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut entries = Vec::new();
        for (lineno, line) in lines {
            let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| {
                Error::format(path, format!("line {}: {err}", lineno + 1))
            })?;
            e.frames = resolve(&e.frames);
            e.audio = resolve(&e.audio);
            e.flows = e.flows.as_deref().map(resolve);
            for (field, p) in [("frames", &e.frames), ("audio", &e.audio)] {
                if !p.exists() {
                    return Err(Error::format(
                        path,
                        format!("entry '{}': {field} path {} does not exist", e.id, p.display()),
                    ));
                }
            }
            if let Some(f) = &e.flows {
                if !f.exists() {
                    return Err(Error::format(
                        path,
                        format!("entry '{}': flows path {} does not exist", e.id, f.display()),
                    ));
                }
            }
            entries.push(e);
        }
        Manifest::new(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::write(path, b"x").unwrap();
    }

    fn sample_manifest(dir: &Path, n: usize) -> Manifest {
        let entries = (0..n)
            .map(|i| {
                let frames = dir.join(format!("frames_{i}"));
                std::fs::create_dir_all(&frames).unwrap();
                let audio = dir.join(format!("audio_{i}.wav"));
                touch(&audio);
                ManifestEntry {
                    id: format!("vid_{i:03}"),
                    frames,
                    audio,
                    flows: None,
                    category: format!("cat{}", i % 2),
                    split: if i % 4 == 3 { Split::Test } else { Split::Train },
                }
            })
            .collect();
        Manifest::new(entries).unwrap()
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 6);
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split(Split::Train).len(), 5);
        assert_eq!(back.categories(), vec!["cat0".to_string(), "cat1".into()]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 2);
        let mut entries = m.entries().to_vec();
        entries[1].id = entries[0].id.clone();
        assert!(Manifest::new(entries).is_err());
    }

    #[test]
    fn missing_path_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 2);
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        std::fs::remove_file(dir.path().join("audio_1.wav")).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vid_001") && msg.contains("audio"), "{msg}");
    }

    #[test]
    fn schema_violations_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            "{\"format\":\"cofsep-manifest\",\"version\":1}\n{\"id\":\"x\"}\n",
        )
        .unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn empty_required_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 2); // only train entries
        assert!(m.require_split(Split::Train).is_ok());
        assert!(m.require_split(Split::Val).is_err());
    }
}
