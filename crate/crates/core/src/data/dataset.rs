//! Tab-separated dataset files.
//!
//! ```text
//! #relctr-dataset v1 config_hash=<16 hex digits> fields=user_id,query_id,...
//! 0\t3\t17\t1\tw12 w15\tw12 w19 w60\t3\t1\t0\t0.25,-1.5,0.125
//! ```
//!
//! Token lists are space-joined, dense features comma-joined in shortest
//! round-trip decimal form, so reloading is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::SearchSample;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const DATASET_FIELDS: [&str; 10] = [
    "user_id",
    "query_id",
    "item_id",
    "category",
    "query_tokens",
    "item_tokens",
    "rsl",
    "exposed",
    "click",
    "dense",
];
const MAGIC: &str = "#relctr-dataset";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub config_hash: String,
}

impl DatasetHeader {
    pub fn new(config_hash: impl Into<String>) -> Self {
        DatasetHeader {
            version: DATASET_VERSION,
            config_hash: config_hash.into(),
        }
    }
}

/// FNV-1a over the canonical JSON form of `config`, as 16 hex digits.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    // through Value so object keys come out sorted
    let value = serde_json::to_value(config).expect("config serialises");
    let json = serde_json::to_string(&value).expect("value serialises");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn join_tokens(tokens: &[String], path: &Path) -> Result<String> {
    if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
        return Err(Error::format(path, format!("token {t:?} cannot be written")));
    }
    Ok(tokens.join(" "))
}

pub fn emit_dataset(samples: &[SearchSample], header: &DatasetHeader, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "{MAGIC} v{} config_hash={} fields={}",
        header.version,
        header.config_hash,
        DATASET_FIELDS.join(",")
    )
    .map_err(io)?;
    for s in samples {
        if let Some(v) = s.dense.iter().find(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("non-finite dense feature {v}")));
        }
        let dense: Vec<String> = s.dense.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.user_id,
            s.query_id,
            s.item_id,
            s.category,
            join_tokens(&s.query_text, path)?,
            join_tokens(&s.item_text, path)?,
            s.rsl,
            s.exposed as u8,
            s.click as u8,
            dense.join(",")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_header(line: &str, path: &Path) -> Result<DatasetHeader> {
    let mut parts = line.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::format(path, "missing dataset header"));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::format(path, "bad version in header"))?;
    if version != DATASET_VERSION {
        return Err(Error::format(path, format!("unsupported dataset version {version}")));
    }
    let hash = parts
        .next()
        .and_then(|v| v.strip_prefix("config_hash="))
        .ok_or_else(|| Error::format(path, "missing config_hash"))?;
    let fields = parts
        .next()
        .and_then(|v| v.strip_prefix("fields="))
        .ok_or_else(|| Error::format(path, "missing field list"))?;
    if fields != DATASET_FIELDS.join(",") {
        return Err(Error::format(path, format!("unexpected field list {fields}")));
    }
    Ok(DatasetHeader::new(hash))
}

fn parse_flag(v: &str, what: &str, path: &Path, line: usize) -> Result<bool> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::format(path, format!("line {line}: {what} must be 0 or 1"))),
    }
}

fn parse_line(text: &str, path: &Path, line: usize) -> Result<SearchSample> {
    let f: Vec<&str> = text.split('\t').collect();
    if f.len() != DATASET_FIELDS.len() {
        return Err(Error::format(
            path,
            format!("line {line}: expected {} fields, found {}", DATASET_FIELDS.len(), f.len()),
        ));
    }
    let bad = |what: &str| Error::format(path, format!("line {line}: bad {what}"));
    let id = |i: usize| f[i].parse::<u32>().map_err(|_| bad(DATASET_FIELDS[i]));
    let tokens = |s: &str| -> Vec<String> { s.split(' ').filter(|t| !t.is_empty()).map(String::from).collect() };
    let rsl: u8 = f[6].parse().map_err(|_| bad("rsl"))?;
    if !(1..=4).contains(&rsl) {
        return Err(bad("rsl"));
    }
    let exposed = parse_flag(f[7], "exposed", path, line)?;
    let click = parse_flag(f[8], "click", path, line)?;
    if click && !exposed {
        return Err(Error::format(path, format!("line {line}: click on an unexposed sample")));
    }
    let dense = if f[9].is_empty() {
        Vec::new()
    } else {
        f[9].split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad("dense")))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(SearchSample {
        user_id: id(0)?,
        query_id: id(1)?,
        item_id: id(2)?,
        category: id(3)?,
        query_text: tokens(f[4]),
        item_text: tokens(f[5]),
        rsl,
        exposed,
        click,
        dense,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<SearchSample>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty file")),
    };
    let header = parse_header(&first, path)?;
    let mut samples = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.is_empty() {
            continue;
        }
        samples.push(parse_line(&l, path, i + 2)?);
    }
    Ok((header, samples))
}
