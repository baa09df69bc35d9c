//! Line-delimited JSON results files shared by `eval`, `profile`,
//! `codec-sweep`, `bd` and `plot`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RDCurve, RDPoint};
use crate::error::{Error, Result};
use crate::profiler::ProfileReport;

pub const RESULTS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    /// Truncated SHA-256 of the producing configuration.
    pub config_hash: String,
    pub commit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdRecord {
    pub schema: u32,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub point: RDPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub schema: u32,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub report: ProfileReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResultRecord {
    Rd(RdRecord),
    Profile(ProfileRecord),
}

impl ResultRecord {
    pub fn rd(provenance: Provenance, point: RDPoint) -> Self {
        ResultRecord::Rd(RdRecord { schema: RESULTS_SCHEMA, provenance, point })
    }

    pub fn profile(provenance: Provenance, report: ProfileReport) -> Self {
        ResultRecord::Profile(ProfileRecord { schema: RESULTS_SCHEMA, provenance, report })
    }

    pub fn provenance(&self) -> &Provenance {
        match self {
            ResultRecord::Rd(r) => &r.provenance,
            ResultRecord::Profile(r) => &r.provenance,
        }
    }

    fn schema(&self) -> u32 {
        match self {
            ResultRecord::Rd(r) => r.schema,
            ResultRecord::Profile(r) => r.schema,
        }
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(json))[..16].to_string())
}

fn encode(records: &[ResultRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Replaces `path` with the given records.
pub fn write_results(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(records)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn append_results(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    f.write_all(encode(records)?.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses every non-blank line; errors carry the 1-based line number.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ResultRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if record.schema() != RESULTS_SCHEMA {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("schema {} (expected {RESULTS_SCHEMA})", record.schema()),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Groups RD records into curves by model id, in first-appearance order.
pub fn curves(records: &[ResultRecord]) -> Vec<RDCurve> {
    let mut out: Vec<RDCurve> = Vec::new();
    for r in records {
        if let ResultRecord::Rd(rd) = r {
            match out.iter_mut().find(|c| c.model_id == rd.provenance.model_id) {
                Some(c) => c.points.push(rd.point.clone()),
                None => out.push(RDCurve::new(rd.provenance.model_id.clone(), vec![rd.point.clone()])),
            }
        }
    }
    out
}

pub fn profiles(records: &[ResultRecord]) -> Vec<&ProfileReport> {
    records
        .iter()
        .filter_map(|r| match r {
            ResultRecord::Profile(p) => Some(&p.report),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov(id: &str) -> Provenance {
        Provenance { model_id: id.into(), config_hash: "00".into(), commit: "abc".into() }
    }

    fn point(bpp: f64) -> RDPoint {
        RDPoint { bpp, psnr: 30.0 + bpp, msssim: Some(0.9), label: format!("q{bpp}") }
    }

    #[test]
    fn round_trip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = vec![
            ResultRecord::rd(prov("a"), point(0.1)),
            ResultRecord::rd(prov("b"), point(0.2)),
            ResultRecord::rd(prov("a"), point(0.3)),
        ];
        write_results(&path, &recs[..2]).unwrap();
        append_results(&path, &recs[2..]).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back, recs);
        let c = curves(&back);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].points.len(), 2);
        assert_eq!(c[1].model_id, "b");
    }

    #[test]
    fn bad_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let good = encode(&[ResultRecord::rd(prov("a"), point(0.1))]).unwrap();
        fs::write(&path, format!("{good}\n{{\"kind\": \"rd\"\n")).unwrap();
        match read_results(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&("x", 1)).unwrap();
        assert_eq!(a, config_hash(&("x", 1)).unwrap());
        assert_ne!(a, config_hash(&("x", 2)).unwrap());
        assert_eq!(a.len(), 16);
    }
}
