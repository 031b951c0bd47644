use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a metrics stream. Wall-clock time is kept out of it so that
/// reruns with the same seed produce identical files; see [`TimingRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub epoch: Option<usize>,
    pub split: String,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub run: String,
    pub epoch: Option<usize>,
    pub wall_clock_s: f64,
}

/// Appends JSON records to a file, one per line.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::file(&path, e))?;
        Ok(JsonLines { path, out: BufWriter::new(file) })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::file(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::file(&self.path, e))
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = MetricsRecord {
            run: "train-1".into(),
            epoch: Some(2),
            split: "val".into(),
            loss: None,
            accuracy: Some(0.5),
            seed: 1,
        };
        let mut w = JsonLines::create(&path).unwrap();
        w.write(&rec).unwrap();
        w.write(&rec).unwrap();
        w.finish().unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![rec.clone(), rec]);
    }
}
