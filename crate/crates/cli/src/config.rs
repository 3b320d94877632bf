//! Flat `key = value` scenario files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment (also allowed after a value)
//! key = 1.5            # number, `inf` and `-inf` accepted
//! key = "text"         # string
//! key = [0, 0.5, 1]    # list of numbers
//! model.b.table = "b.csv"
//! ```
//!
//! Keys are dotted identifiers. A `<key>.table` entry names a CSV file with
//! a `t,value` header, read relative to the config file; the coefficient is
//! the right-continuous step function through its rows.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use mfsc_core::meanfield::TimeFn;
use mfsc_core::{Path, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Str(String),
    List(Vec<f64>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "\"{s}\""),
            Value::List(v) => {
                let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "[{}]", items.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: Value,
    line: usize,
}

/// Right-continuous step table, rows sorted by strictly increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: Vec<(f64, f64)>,
}

impl Table {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().with_context(|| format!("{origin}: unreadable header"))?;
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "value" {
            bail!("{origin}: expected header `t,value`");
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.with_context(|| format!("{origin}:{line}: malformed row"))?;
            let num = |j: usize| -> Result<f64> {
                let s = rec.get(j).ok_or_else(|| anyhow!("{origin}:{line}: missing column"))?;
                let v: f64 = s.parse().map_err(|_| anyhow!("{origin}:{line}: `{s}` is not a number"))?;
                if !v.is_finite() {
                    bail!("{origin}:{line}: value must be finite");
                }
                Ok(v)
            };
            let (t, v) = (num(0)?, num(1)?);
            if let Some(&(prev, _)) = rows.last() {
                if t <= prev {
                    bail!("{origin}:{line}: times must be strictly increasing");
                }
            }
            rows.push((t, v));
        }
        if rows.is_empty() {
            bail!("{origin}: table has no rows");
        }
        Ok(Self { rows })
    }

    /// Value of the last row with `t_row ≤ t`; before the first row, the first value.
    pub fn eval(&self, t: f64) -> f64 {
        let slack = 1e-12 * t.abs().max(1.0);
        let idx = self.rows.partition_point(|&(tr, _)| tr <= t + slack);
        self.rows[idx.saturating_sub(1)].1
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,value\n");
        for (t, v) in &self.rows {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Time-dependent coefficient: a constant or a step table.
#[derive(Debug, Clone, PartialEq)]
pub enum Coef {
    Const(f64),
    Table(Arc<Table>),
}

impl Coef {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Coef::Const(c) => *c,
            Coef::Table(tab) => tab.eval(t),
        }
    }

    pub fn to_fn(&self) -> TimeFn {
        let c = self.clone();
        Arc::new(move |t| c.eval(t))
    }

    pub fn to_path(&self, grid: TimeGrid) -> Result<Path> {
        Ok(Path::new(grid, grid.times().iter().map(|&t| self.eval(t)).collect())?)
    }

    pub fn is_const(&self, c: f64) -> bool {
        matches!(self, Coef::Const(v) if *v == c)
    }
}

/// Parsed config with usage tracking, so leftover keys can be reported.
#[derive(Debug)]
pub struct Config {
    origin: String,
    base: PathBuf,
    entries: BTreeMap<String, Entry>,
    tables: BTreeMap<String, Arc<Table>>,
    used: RefCell<BTreeSet<String>>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_number(s: &str) -> Option<f64> {
    match s {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}

fn parse_value(raw: &str) -> std::result::Result<Value, String> {
    if let Some(rest) = raw.strip_prefix('"') {
        let inner = rest.strip_suffix('"').ok_or("unterminated string")?;
        if inner.contains('"') {
            return Err("stray quote inside string".into());
        }
        return Ok(Value::Str(inner.to_string()));
    }
    if let Some(rest) = raw.strip_prefix('[') {
        let inner = rest.strip_suffix(']').ok_or("unterminated list")?;
        if inner.trim().is_empty() {
            return Ok(Value::List(Vec::new()));
        }
        return inner
            .split(',')
            .map(|item| parse_number(item.trim()).ok_or_else(|| format!("`{}` is not a number", item.trim())))
            .collect::<std::result::Result<_, _>>()
            .map(Value::List);
    }
    parse_number(raw).map(Value::Num).ok_or_else(|| format!("`{raw}` is not a number, string or list"))
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| {
            !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

impl Config {
    pub fn load(path: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().map(FsPath::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    pub fn parse(text: &str, origin: &str, base: &FsPath) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{line}: expected `key = value`"))?;
            let key = key.trim();
            if !valid_key(key) {
                bail!("{origin}:{line}: invalid key `{key}`");
            }
            let value = parse_value(value.trim()).map_err(|e| anyhow!("{origin}:{line}: {e}"))?;
            if let Some(prev) = entries.get(key) {
                bail!("{origin}:{line}: duplicate key `{key}` (first set on line {})", prev.line);
            }
            entries.insert(key.to_string(), Entry { value, line });
        }
        let mut tables = BTreeMap::new();
        for (key, entry) in &entries {
            if let Some(coef) = key.strip_suffix(".table") {
                let Value::Str(file) = &entry.value else {
                    bail!("{origin}:{}: `{key}` must be a quoted file name", entry.line);
                };
                if entries.contains_key(coef) {
                    bail!("{origin}:{}: `{coef}` is given both as a constant and as a table", entry.line);
                }
                let path = base.join(file);
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("{origin}:{}: cannot read table {}", entry.line, path.display()))?;
                tables.insert(coef.to_string(), Arc::new(Table::parse(&text, &path.display().to_string())?));
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            base: base.to_path_buf(),
            entries,
            tables,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn base(&self) -> &FsPath {
        &self.base
    }

    fn at(&self, key: &str) -> String {
        match self.entries.get(key) {
            Some(e) => format!("{}:{}", self.origin, e.line),
            None => self.origin.clone(),
        }
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|e| &e.value)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key) || self.tables.contains_key(key)
    }

    fn missing(&self, key: &str) -> anyhow::Error {
        anyhow!("{}: missing required key `{key}`", self.origin)
    }

    pub fn num_opt(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Num(v)) => Ok(Some(*v)),
            Some(_) => bail!("{}: `{key}` must be a number", self.at(key)),
        }
    }

    pub fn num(&self, key: &str) -> Result<f64> {
        self.num_opt(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn num_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.num_opt(key)?.unwrap_or(default))
    }

    fn to_count(&self, key: &str, v: f64, min: u64) -> Result<u64> {
        if v.fract() != 0.0 || v < min as f64 || v > 2f64.powi(53) {
            bail!("{}: `{key}` must be an integer ≥ {min}, got {v}", self.at(key));
        }
        Ok(v as u64)
    }

    /// Integer ≥ `min`.
    pub fn count(&self, key: &str, min: u64) -> Result<u64> {
        let v = self.num(key)?;
        self.to_count(key, v, min)
    }

    pub fn count_or(&self, key: &str, min: u64, default: u64) -> Result<u64> {
        match self.num_opt(key)? {
            Some(v) => self.to_count(key, v, min),
            None => Ok(default),
        }
    }

    pub fn string_opt(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s.clone())),
            Some(_) => bail!("{}: `{key}` must be a quoted string", self.at(key)),
        }
    }

    pub fn string(&self, key: &str) -> Result<String> {
        self.string_opt(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Err(self.missing(key)),
            Some(Value::List(v)) if !v.is_empty() => Ok(v.clone()),
            Some(Value::Num(v)) => Ok(vec![*v]),
            Some(_) => bail!("{}: `{key}` must be a nonempty list of numbers", self.at(key)),
        }
    }

    pub fn list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        if self.entries.contains_key(key) {
            self.list(key)
        } else {
            self.used.borrow_mut().insert(key.to_string());
            Ok(default.to_vec())
        }
    }

    pub fn coef_opt(&self, key: &str) -> Result<Option<Coef>> {
        let table_key = format!("{key}.table");
        self.used.borrow_mut().insert(table_key);
        if let Some(t) = self.tables.get(key) {
            return Ok(Some(Coef::Table(t.clone())));
        }
        Ok(self.num_opt(key)?.map(Coef::Const))
    }

    /// A constant `key = c` or a table `key.table = "file.csv"`.
    pub fn coef(&self, key: &str) -> Result<Coef> {
        self.coef_opt(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn coef_or(&self, key: &str, default: f64) -> Result<Coef> {
        Ok(self.coef_opt(key)?.unwrap_or(Coef::Const(default)))
    }

    /// Reject keys no accessor has asked for.
    pub fn finish(&self, kind: &str) -> Result<()> {
        let used = self.used.borrow();
        for (key, e) in &self.entries {
            if !used.contains(key) {
                bail!("{}:{}: unknown key `{key}` for kind {kind}", self.origin, e.line);
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) {
        let line = self.entries.get(key).map_or(0, |e| e.line);
        self.entries.insert(key.to_string(), Entry { value, line });
    }

    /// Canonical text: sorted keys, tables redirected to `tables/<key>.csv`.
    /// Returns the text and the table files to write next to it.
    pub fn canonical(&self) -> (String, Vec<(String, String)>) {
        let mut lines: BTreeMap<String, String> = BTreeMap::new();
        for (key, e) in &self.entries {
            if key.ends_with(".table") {
                continue;
            }
            lines.insert(key.clone(), format!("{key} = {}", e.value));
        }
        let mut files = Vec::new();
        for (key, table) in &self.tables {
            let name = format!("tables/{key}.csv");
            lines.insert(format!("{key}.table"), format!("{key}.table = \"{name}\""));
            files.push((name, table.to_csv()));
        }
        let mut text = String::new();
        for line in lines.values() {
            text.push_str(line);
            text.push('\n');
        }
        (text, files)
    }
}
