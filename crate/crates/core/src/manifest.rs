//! Utterance manifests: one `utterance-id speaker-id path` line per utterance.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [utt, spk, path] = fields[..] else {
            return Err(Error::format(
                origin,
                format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
            ));
        };
        let p = Path::new(path);
        out.push(ManifestEntry {
            utt_id: utt.to_string(),
            speaker_id: spk.to_string(),
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, path)
}

/// Writes entries with paths made relative to `dir` where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut s = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        writeln!(s, "{} {} {}", e.utt_id, e.speaker_id, p.display()).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Dense labels `0..K` for speaker ids, in sorted id order.
pub fn speaker_labels(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut ids: Vec<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}
