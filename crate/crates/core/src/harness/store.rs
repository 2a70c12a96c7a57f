use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::run::ResultRecord;
use crate::error::{Error, Result};

/// Append-only newline-delimited JSON store with one record per `(digest, seed)`.
pub struct ResultsStore {
    path: PathBuf,
    done: Mutex<HashSet<(String, u64)>>,
}

impl ResultsStore {
    pub const FILE_NAME: &'static str = "results.ndjson";

    /// Opens (or creates) `dir/results.ndjson`.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE_NAME);
        let done = read_records(&path)?.into_iter().map(|r| (r.digest, r.seed)).collect();
        Ok(Self {
            path,
            done: Mutex::new(done),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, digest: &str, seed: u64) -> bool {
        self.done
            .lock()
            .expect("store lock")
            .contains(&(digest.to_string(), seed))
    }

    /// Appends `record` unless its `(digest, seed)` is already stored.
    /// Returns whether it was written.
    pub fn append(&self, record: &ResultRecord) -> Result<bool> {
        let mut done = self.done.lock().expect("store lock");
        if !done.insert((record.digest.clone(), record.seed)) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(record).map_err(|e| Error::Serde(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(true)
    }

    pub fn records(&self) -> Result<Vec<ResultRecord>> {
        read_records(&self.path)
    }
}

/// Reads every complete record. A torn final line from an interrupted write
/// is skipped with a warning; corruption elsewhere is an error.
pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    let mut offset = 0u64;
    for (i, line) in lines.iter().enumerate() {
        if !line.trim().is_empty() {
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(e) if i + 1 == lines.len() => {
                    log::warn!("{}: ignoring incomplete final record ({e})", path.display());
                }
                Err(e) => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        offset,
                        message: e.to_string(),
                    })
                }
            }
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
