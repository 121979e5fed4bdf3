use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binarisation threshold for 1-5 explicit ratings.
pub const DEFAULT_RATING_THRESHOLD: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub feedback: u8,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrustEdge {
    pub truster: usize,
    pub trustee: usize,
    pub timestamp: i64,
}

/// Dense id assignment: original ids sorted ascending map to `0..n`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    originals: Vec<i64>,
    #[serde(skip)]
    index: BTreeMap<i64, usize>,
}

impl IdMap {
    pub fn from_originals(mut originals: Vec<i64>) -> Self {
        originals.sort_unstable();
        originals.dedup();
        let index = originals.iter().enumerate().map(|(i, &o)| (o, i)).collect();
        Self { originals, index }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_originals((0..n as i64).collect())
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn dense(&self, original: i64) -> Option<usize> {
        self.index.get(&original).copied()
    }

    pub fn original(&self, dense: usize) -> Option<i64> {
        self.originals.get(dense).copied()
    }

    pub fn originals(&self) -> &[i64] {
        &self.originals
    }
}

#[derive(Debug, Deserialize)]
struct RawInteraction {
    user: String,
    item: String,
    rating: String,
    timestamp: String,
}

#[derive(Debug, Deserialize)]
struct RawTrust {
    truster: String,
    trustee: String,
    #[serde(default)]
    timestamp: Option<String>,
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {name} {raw:?}"),
    })
}

fn parse_id(path: &Path, line: usize, name: &str, raw: &str) -> Result<i64> {
    let id: i64 = parse_field(path, line, name, raw)?;
    if id < 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("negative {name} {id}"),
        });
    }
    Ok(id)
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?)
}

fn row_line(path: &Path, rec: &csv::StringRecord, fallback: usize) -> usize {
    let _ = path;
    rec.position().map_or(fallback, |p| p.line() as usize)
}

/// Parsed interaction log with its id maps.
#[derive(Clone, Debug)]
pub struct ParsedInteractions {
    pub records: Vec<InteractionRecord>,
    pub users: IdMap,
    pub items: IdMap,
}

/// Reads `user,item,rating,timestamp`; ratings `>= threshold` become feedback 1.
pub fn parse_interactions(path: impl AsRef<Path>, threshold: f64) -> Result<ParsedInteractions> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    for col in ["user", "item", "rating", "timestamp"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column {col}"),
            });
        }
    }
    let mut raw_rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let line = row_line(path, &rec, i + 2);
        let row: RawInteraction = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let user = parse_id(path, line, "user", &row.user)?;
        let item = parse_id(path, line, "item", &row.item)?;
        let rating: f64 = parse_field(path, line, "rating", &row.rating)?;
        let ts: i64 = parse_field(path, line, "timestamp", &row.timestamp)?;
        raw_rows.push((user, item, rating, ts));
    }
    let users = IdMap::from_originals(raw_rows.iter().map(|r| r.0).collect());
    let items = IdMap::from_originals(raw_rows.iter().map(|r| r.1).collect());
    let records = raw_rows
        .into_iter()
        .map(|(u, i, rating, ts)| InteractionRecord {
            user: users.dense(u).expect("mapped"),
            item: items.dense(i).expect("mapped"),
            feedback: u8::from(rating >= threshold),
            timestamp: ts,
        })
        .collect();
    Ok(ParsedInteractions { records, users, items })
}

/// Reads `truster,trustee[,timestamp]`. Users missing from `users` and
/// self-loops are dropped; a missing timestamp means 0 (static graph).
pub fn parse_trust(path: impl AsRef<Path>, users: &IdMap) -> Result<Vec<TrustEdge>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    for col in ["truster", "trustee"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column {col}"),
            });
        }
    }
    let mut edges = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let line = row_line(path, &rec, i + 2);
        let row: RawTrust = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let a = parse_id(path, line, "truster", &row.truster)?;
        let b = parse_id(path, line, "trustee", &row.trustee)?;
        let ts = match row.timestamp.as_deref().map(str::trim) {
            None | Some("") => 0,
            Some(t) => parse_field(path, line, "timestamp", t)?,
        };
        if let (Some(truster), Some(trustee)) = (users.dense(a), users.dense(b)) {
            if truster != trustee {
                edges.push(TrustEdge { truster, trustee, timestamp: ts });
            }
        }
    }
    Ok(edges)
}
