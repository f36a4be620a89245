//! Transcript integrity and privacy-boundary audit.
//!
//! Integrity: recompute the SHA-256 content hash and compare it to the final
//! hash line. Privacy: every float inside a message record is checked for an
//! exact bit match against the private floats recorded in the sidecar ledger.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sim::{self, PrivateRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptFile {
    pub lines: Vec<String>,
    pub stated_hash: Option<String>,
}

pub fn parse_transcript(text: &str) -> Result<TranscriptFile> {
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    let mut stated_hash = None;
    if let Some(last) = lines.last() {
        if let Ok(v) = serde_json::from_str::<Value>(last) {
            if v["kind"] == "hash" {
                stated_hash = v["content_hash"].as_str().map(str::to_owned);
                lines.pop();
            }
        }
    }
    Ok(TranscriptFile { lines, stated_hash })
}

pub fn read_transcript(path: &Path) -> Result<TranscriptFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_transcript(&String::from_utf8_lossy(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HashVerdict {
    pub ok: bool,
    pub computed: String,
    pub stated: Option<String>,
}

pub fn verify_hash(t: &TranscriptFile) -> HashVerdict {
    let computed = sim::hash_lines(&t.lines);
    HashVerdict {
        ok: t.stated_hash.as_deref() == Some(computed.as_str()),
        computed,
        stated: t.stated_hash.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Leak {
    pub round: u64,
    pub line: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub messages_scanned: usize,
    pub floats_scanned: usize,
    pub leaks: Vec<Leak>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.leaks.is_empty()
    }

    pub fn offending_rounds(&self) -> BTreeSet<u64> {
        self.leaks.iter().map(|l| l.round).collect()
    }
}

fn collect_floats(v: &Value, out: &mut Vec<f64>) {
    match v {
        Value::Number(n) if n.is_f64() => out.extend(n.as_f64()),
        Value::Array(xs) => xs.iter().for_each(|x| collect_floats(x, out)),
        Value::Object(m) => m.values().for_each(|x| collect_floats(x, out)),
        _ => {}
    }
}

/// Exact-match scan of message floats against private floats. Zero is
/// excluded: it is the shared initial value of every pattern.
pub fn audit_lines(lines: &[String], private: &[PrivateRecord]) -> Result<AuditReport> {
    let secret: BTreeSet<u64> = private
        .iter()
        .flat_map(|r| r.floats.iter())
        .filter(|x| **x != 0.0)
        .map(|x| x.to_bits())
        .collect();
    let mut report = AuditReport {
        messages_scanned: 0,
        floats_scanned: 0,
        leaks: Vec::new(),
    };
    for (i, line) in lines.iter().enumerate() {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::Transcript(format!("line {}: {e}", i + 1)))?;
        if v["kind"] != "message" {
            continue;
        }
        report.messages_scanned += 1;
        let round = v["round"].as_u64().unwrap_or(0);
        let mut floats = Vec::new();
        collect_floats(&v["body"], &mut floats);
        report.floats_scanned += floats.len();
        for x in floats {
            if secret.contains(&x.to_bits()) {
                report.leaks.push(Leak { round, line: i + 1, value: x });
            }
        }
    }
    Ok(report)
}

pub fn parse_private_ledger(text: &str) -> Result<Vec<PrivateRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub transcript: PathBuf,
    pub hash: HashVerdict,
    pub audit: Option<AuditReport>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.hash.ok && self.audit.as_ref().is_none_or(AuditReport::clean)
    }
}

/// Verifies the hash of `path` and audits it against the private ledger
/// stored next to it, when present.
pub fn replay(path: &Path) -> Result<ReplayReport> {
    let t = read_transcript(path)?;
    let hash = verify_hash(&t);
    let ledger_path = path.with_file_name(sim::PRIVATE_LEDGER_FILE);
    let audit = if ledger_path.exists() {
        let text = std::fs::read_to_string(&ledger_path).map_err(|e| Error::io(&ledger_path, e))?;
        Some(audit_lines(&t.lines, &parse_private_ledger(&text)?)?)
    } else {
        None
    };
    Ok(ReplayReport {
        transcript: path.to_path_buf(),
        hash,
        audit,
    })
}
