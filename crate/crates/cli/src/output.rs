//! CSV persistence and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mfsc_core::paths::fmt_f64;
use mfsc_core::{Path, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical config together with its tables.
pub fn config_hash(text: &str, tables: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for (name, body) in tables {
        h.update(b"\0");
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(body.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub particles: usize,
    pub steps: usize,
    pub horizon: f64,
    pub model: String,
    /// Objective estimate `mean±se`, when the kind has one.
    pub value: Option<String>,
    /// `(ξ index, θ index)` of the certified saddle cell.
    pub equilibrium_cell: Option<[usize; 2]>,
    pub checks: Vec<CheckVerdict>,
    pub verdict: bool,
    pub files: Vec<FileEntry>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn load(dir: &FsPath) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            bail!("incomplete run: {} has no {MANIFEST}", dir.display());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("corrupt {}", path.display()))
    }
}

/// Collects output files of one run and their hashes.
pub struct RunWriter {
    pub dir: PathBuf,
    files: Vec<FileEntry>,
}

impl RunWriter {
    /// Create the directory and drop any previous manifest, so an
    /// interrupted rerun is recognisably incomplete.
    pub fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let manifest = dir.join(MANIFEST);
        if manifest.exists() {
            fs::remove_file(&manifest).with_context(|| format!("cannot remove {}", manifest.display()))?;
        }
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.files.push(FileEntry { name: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.files = self.files;
        let text = serde_json::to_string_pretty(&manifest)?;
        let tmp = self.dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text.as_bytes())?;
        fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(())
    }
}

/// `t,<names...>` with one column per series.
pub fn columns_csv(grid: TimeGrid, names: &[String], series: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::new();
    write!(out, "t").unwrap();
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    writeln!(out).unwrap();
    for k in 0..grid.len() {
        write!(out, "{}", fmt_f64(grid.time(k))).unwrap();
        for s in series {
            write!(out, ",{}", fmt_f64(s[k])).unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

/// Wide CSV `t,p0,p1,...`, one column per particle.
pub fn paths_csv(grid: TimeGrid, paths: &[Path]) -> Vec<u8> {
    let names: Vec<String> = (0..paths.len()).map(|i| format!("p{i}")).collect();
    let series: Vec<&[f64]> = paths.iter().map(Path::values).collect();
    columns_csv(grid, &names, &series)
}

/// Column table read back from a CSV written by [`columns_csv`].
#[derive(Debug, Clone)]
pub struct Columns {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub series: Vec<Vec<f64>>,
}

impl Columns {
    pub fn read(dir: &FsPath, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).with_context(|| format!("missing or unreadable {name}"))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().with_context(|| format!("{name}: unreadable header"))?.clone();
        if headers.is_empty() || &headers[0] != "t" {
            bail!("{name}: first column must be `t`");
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut series = vec![Vec::new(); names.len()];
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.with_context(|| format!("{name}:{}: malformed row", i + 2))?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| anyhow!("{name}:{}: `{s}` is not a number", i + 2))
            };
            times.push(parse(&rec[0])?);
            for (j, col) in series.iter_mut().enumerate() {
                col.push(parse(&rec[j + 1])?);
            }
        }
        Ok(Self { names, times, series })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.series[j].as_slice())
            .ok_or_else(|| anyhow!("column `{name}` not found"))
    }

    /// Check the time column against the grid, bit for bit.
    pub fn expect_grid(&self, grid: TimeGrid, file: &str) -> Result<()> {
        if self.times.len() != grid.len() || self.times.iter().zip(grid.times()).any(|(a, b)| *a != b) {
            bail!("{file}: time column does not match the configured grid");
        }
        Ok(())
    }

    pub fn into_paths(self, grid: TimeGrid, file: &str) -> Result<Vec<Path>> {
        self.expect_grid(grid, file)?;
        self.series
            .into_iter()
            .map(|v| Path::new(grid, v).with_context(|| format!("{file}: non-finite entry")))
            .collect()
    }

    /// Two-column file `m,d` indexed by iteration.
    pub fn read_indexed(dir: &FsPath, name: &str) -> Result<Vec<f64>> {
        let text = fs::read_to_string(dir.join(name)).with_context(|| format!("missing or unreadable {name}"))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        reader
            .records()
            .enumerate()
            .map(|(i, rec)| {
                let rec = rec.with_context(|| format!("{name}:{}: malformed row", i + 2))?;
                let s = rec.get(1).ok_or_else(|| anyhow!("{name}:{}: missing column", i + 2))?;
                s.parse::<f64>().map_err(|_| anyhow!("{name}:{}: `{s}` is not a number", i + 2))
            })
            .collect()
    }
}
