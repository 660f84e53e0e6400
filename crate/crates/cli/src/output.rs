//! File emission with content hashes and the run manifest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunErrorRecord {
    pub stage: String,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub threads: usize,
    pub files: Vec<FileRecord>,
    pub summary: Value,
    pub timings: Vec<Timing>,
    pub partial: bool,
    pub errors: Vec<RunErrorRecord>,
    pub exit_code: i32,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes files under one directory and remembers what it wrote.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileRecord>,
    timings: Vec<Timing>,
}

/// Formats an f64 with the shortest representation that round-trips.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

impl OutputDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord {
            path: name.to_string(),
            sha256: hex(&Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn write_csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> io::Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.into_iter().collect::<Vec<String>>())?;
        }
        let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    /// Writes manifest.json; it lists every other file but not itself.
    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        self,
        command: &str,
        config: Value,
        threads: usize,
        summary: Value,
        errors: Vec<RunErrorRecord>,
        exit_code: i32,
    ) -> io::Result<Manifest> {
        let mut files = self.files;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            threads,
            files,
            summary,
            timings: self.timings,
            partial: !errors.is_empty(),
            errors,
            exit_code,
        };
        let mut bytes = serde_json::to_vec_pretty(&m).map_err(io::Error::other)?;
        bytes.push(b'\n');
        fs::write(self.root.join(MANIFEST), bytes)?;
        Ok(m)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_and_rewrites() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write_csv("a.csv", &["x"], [vec![num(0.1)], vec![opt_num(None)]]).unwrap();
        out.write_csv("a.csv", &["x"], [vec![num(1.0)]]).unwrap();
        assert_eq!(out.files().len(), 1);
        assert_eq!(fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x\n1\n");
        // sha256("x\n1\n")
        let expect = hex(&Sha256::digest(b"x\n1\n"));
        assert_eq!(out.files()[0].sha256, expect);
        let m = out.finish("t", Value::Null, 1, Value::Null, Vec::new(), 0).unwrap();
        assert!(!m.partial);
        assert!(dir.path().join(MANIFEST).exists());
    }
}
