//! Session service: persistence, the `/v1` REST API and file helpers shared
//! with the command-line tool.

pub mod api;
pub mod store;

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use curata::session::PoolRecord;

/// Reads a JSONL record file, failing on the first bad line.
pub fn read_records(path: &Path) -> anyhow::Result<Vec<PoolRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (records, rejected) = api::parse_records(&text);
    if let Some(r) = rejected.first() {
        bail!("{}:{}: {}", path.display(), r.line, r.reason);
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

pub fn write_records(path: &Path, records: &[PoolRecord]) -> anyhow::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
