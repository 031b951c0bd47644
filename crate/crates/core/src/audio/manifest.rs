//! Line-oriented dataset manifests.
//!
//! ```text
//! #classes:yes;no;up
//! #sample_rate:16000
//! clips/0001.wav,0
//! clips/0002.wav,2
//! ```
//!
//! The `#sample_rate:` line is optional. Blank lines are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CLASSES_PREFIX: &str = "#classes:";
const RATE_PREFIX: &str = "#sample_rate:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub sample_rate_hint: Option<u32>,
    /// Directory that relative entry paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

/// A manifest read without touching its label column, for unsupervised use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureManifest {
    pub paths: Vec<String>,
    pub class_names: Vec<String>,
    pub sample_rate_hint: Option<u32>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CLASSES_PREFIX}{}\n", self.class_names.join(";"));
        if let Some(rate) = self.sample_rate_hint {
            out.push_str(&format!("{RATE_PREFIX}{rate}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.path, e.label));
        }
        out
    }
}

impl FeatureManifest {
    pub fn resolve(&self, path: &str) -> PathBuf {
        self.root.join(path)
    }
}

struct Header {
    class_names: Vec<String>,
    sample_rate_hint: Option<u32>,
}

/// Splits the text into its header and the (line number, body) pairs that follow.
fn parse_header(text: &str) -> Result<(Header, Vec<(usize, &str)>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, first) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::ManifestFormat("empty manifest".into()))?;
    let names = first
        .strip_prefix(CLASSES_PREFIX)
        .ok_or_else(|| Error::ManifestFormat(format!("first line must start with `{CLASSES_PREFIX}`")))?;
    let class_names: Vec<String> = names.split(';').map(|s| s.trim().to_string()).collect();
    if class_names.len() < 2 || class_names.iter().any(String::is_empty) {
        return Err(Error::ManifestFormat("need at least two non-empty class names".into()));
    }

    let mut sample_rate_hint = None;
    let mut body = Vec::new();
    for (n, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with(CLASSES_PREFIX) {
            return Err(Error::ManifestFormat(format!("duplicate class header at line {n}")));
        }
        if let Some(rate) = trimmed.strip_prefix(RATE_PREFIX) {
            if !body.is_empty() || sample_rate_hint.is_some() {
                return Err(Error::Manifest { line: n, reason: "sample-rate header must directly follow the class header".into() });
            }
            let rate: u32 = rate
                .trim()
                .parse()
                .ok()
                .filter(|&r| r > 0)
                .ok_or_else(|| Error::Manifest { line: n, reason: format!("bad sample rate `{rate}`") })?;
            sample_rate_hint = Some(rate);
            continue;
        }
        body.push((n, trimmed));
    }
    if body.is_empty() {
        return Err(Error::ManifestFormat("manifest has no entries".into()));
    }
    Ok((Header { class_names, sample_rate_hint }, body))
}

fn split_entry(n: usize, line: &str) -> Result<(&str, &str)> {
    let (path, label) = line
        .rsplit_once(',')
        .ok_or_else(|| Error::Manifest { line: n, reason: "expected `path,label_index`".into() })?;
    if path.trim().is_empty() {
        return Err(Error::Manifest { line: n, reason: "empty path".into() });
    }
    Ok((path.trim(), label))
}

pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let (header, body) = parse_header(text)?;
    let n_classes = header.class_names.len();
    let entries = body
        .into_iter()
        .map(|(n, line)| {
            let (path, label) = split_entry(n, line)?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| Error::Manifest { line: n, reason: format!("label `{}` is not an index", label.trim()) })?;
            if label >= n_classes {
                return Err(Error::Manifest {
                    line: n,
                    reason: format!("label {label} out of range for {n_classes} classes"),
                });
            }
            Ok(ManifestEntry { path: path.to_string(), label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        entries,
        class_names: header.class_names,
        sample_rate_hint: header.sample_rate_hint,
        root: root.into(),
    })
}

/// Parses only the path column; the label column is never inspected.
pub fn parse_manifest_features(text: &str, root: impl Into<PathBuf>) -> Result<FeatureManifest> {
    let (header, body) = parse_header(text)?;
    let paths = body
        .into_iter()
        .map(|(n, line)| split_entry(n, line).map(|(p, _)| p.to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureManifest {
        paths,
        class_names: header.class_names,
        sample_rate_hint: header.sample_rate_hint,
        root: root.into(),
    })
}

fn read_text(path: &Path) -> Result<(String, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((text, root))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let (text, root) = read_text(path.as_ref())?;
    parse_manifest(&text, root)
}

pub fn load_manifest_features(path: impl AsRef<Path>) -> Result<FeatureManifest> {
    let (text, root) = read_text(path.as_ref())?;
    parse_manifest_features(&text, root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_entries() {
        let m = parse_manifest("#classes:a;b\nx.wav,0\ny.wav,1\n", "").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.n_classes(), 2);
        assert_eq!(m.entries[1], ManifestEntry { path: "y.wav".into(), label: 1 });
        assert_eq!(m.sample_rate_hint, None);
    }

    #[test]
    fn label_out_of_range_reports_line() {
        let err = parse_manifest("#classes:a;b\nx.wav,0\ny.wav,2\n", "").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_header_is_format_error() {
        let err = parse_manifest("#classes:a;b\n#classes:a;b\nx.wav,0\n", "").unwrap_err();
        assert!(matches!(err, Error::ManifestFormat(_)));
    }

    #[test]
    fn rate_hint_and_round_trip() {
        let text = "#classes:a;b;c\n#sample_rate:48000\nd/x.wav,2\nd/y.wav,0\n";
        let m = parse_manifest(text, "/data").unwrap();
        assert_eq!(m.sample_rate_hint, Some(48000));
        assert_eq!(m.to_text(), text);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/d/x.wav"));
    }

    #[test]
    fn feature_mode_ignores_label_column() {
        let text = "#classes:a;b\nx.wav,TRIPWIRE\ny.wav,99\n";
        assert!(parse_manifest(text, "").is_err());
        let f = parse_manifest_features(text, "").unwrap();
        assert_eq!(f.paths, vec!["x.wav", "y.wav"]);
    }

    #[test]
    fn missing_or_empty() {
        assert!(parse_manifest("", "").is_err());
        assert!(parse_manifest("#classes:a;b\n", "").is_err());
        assert!(parse_manifest("#classes:a\nx,0\n", "").is_err());
        assert!(parse_manifest("x.wav,0\n", "").is_err());
    }

    #[test]
    fn thirty_thousand_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("am.csv");
        let mut text = String::from("#classes:0;1;2;3;4;5;6;7;8;9\n#sample_rate:48000\n");
        for i in 0..30_000 {
            text.push_str(&format!("audio/{i:05}.wav,{}\n", i % 10));
        }
        std::fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 30_000);
        assert_eq!(m.entries[29_999].path, "audio/29999.wav");
        assert_eq!(m.root, dir.path());
    }
}
