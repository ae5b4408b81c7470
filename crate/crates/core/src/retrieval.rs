//! Gallery index, deterministic ranking and recall metrics.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("empty gallery index")]
    EmptyIndex,
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("gallery row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("duplicate gallery id {0}")]
    DuplicateId(usize),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("query {query}: truth id {truth} absent from ranking")]
    TruthAbsent { query: usize, truth: usize },
    #[error("query {query}: subset group has {size} member(s), need at least 2")]
    SingletonGroup { query: usize, size: usize },
    #[error("{rankings} rankings but {truths} truths")]
    Length { rankings: usize, truths: usize },
    #[error("malformed report: {0}")]
    Report(String),
}

/// Unit-normalized gallery embeddings keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<usize>,
    dim: usize,
    matrix: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if ids.len() != rows.len() {
            return Err(RetrievalError::Length {
                rankings: rows.len(),
                truths: ids.len(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(&dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(RetrievalError::DuplicateId(dup));
        }
        let dim = rows[0].len();
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(RetrievalError::Dimension {
                    got: row.len(),
                    expected: dim,
                });
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(RetrievalError::NotNormalized { row: r, norm });
            }
            matrix.extend_from_slice(row);
        }
        Ok(Self { ids, dim, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Gallery ids by descending dot product; ties go to the lower id.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::Dimension {
                got: query.len(),
                expected: self.dim,
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .matrix
            .chunks(self.dim)
            .zip(&self.ids)
            .map(|(row, &id)| (row.iter().zip(query).map(|(a, b)| a * b).sum(), id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }
}

pub fn rank(query: &[f64], index: &EmbeddingIndex) -> Result<Vec<usize>, RetrievalError> {
    index.rank(query)
}

fn check_lengths(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<(), RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if rankings.len() != truths.len() {
        return Err(RetrievalError::Length {
            rankings: rankings.len(),
            truths: truths.len(),
        });
    }
    Ok(())
}

/// Fraction of queries whose truth appears in the top `k`.
pub fn recall_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64, RetrievalError> {
    check_lengths(rankings, truths, k)?;
    if truths.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, (ranking, &truth)) in rankings.iter().zip(truths).enumerate() {
        let pos = ranking
            .iter()
            .position(|&id| id == truth)
            .ok_or(RetrievalError::TruthAbsent { query: q, truth })?;
        if pos < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

/// Recall@K after filtering each ranking down to the query's subset group.
pub fn subset_recall_at_k(
    rankings: &[Vec<usize>],
    truths: &[usize],
    groups: &[Vec<usize>],
    k: usize,
) -> Result<f64, RetrievalError> {
    check_lengths(rankings, truths, k)?;
    if groups.len() != truths.len() {
        return Err(RetrievalError::Length {
            rankings: groups.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, ((ranking, &truth), group)) in rankings.iter().zip(truths).zip(groups).enumerate() {
        if group.len() < 2 {
            return Err(RetrievalError::SingletonGroup {
                query: q,
                size: group.len(),
            });
        }
        let members: HashSet<usize> = group.iter().copied().collect();
        if !members.contains(&truth) {
            return Err(RetrievalError::TruthAbsent { query: q, truth });
        }
        let pos = ranking
            .iter()
            .filter(|id| members.contains(id))
            .position(|&id| id == truth)
            .ok_or(RetrievalError::TruthAbsent { query: q, truth })?;
        if pos < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_RECALL_KS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub subset_recall_at: BTreeMap<usize, f64>,
    /// `(R@5 + R_subset@1) / 2`.
    pub avg: f64,
}

impl RecallReport {
    pub fn compute(rankings: &[Vec<usize>], truths: &[usize], groups: &[Vec<usize>]) -> Result<Self, RetrievalError> {
        let mut recall_at = BTreeMap::new();
        for k in RECALL_KS {
            recall_at.insert(k, recall_at_k(rankings, truths, k)?);
        }
        let mut subset_recall_at = BTreeMap::new();
        for k in SUBSET_RECALL_KS {
            subset_recall_at.insert(k, subset_recall_at_k(rankings, truths, groups, k)?);
        }
        let avg = (recall_at[&5] + subset_recall_at[&1]) / 2.0;
        Ok(Self {
            recall_at,
            subset_recall_at,
            avg,
        })
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at[&k]
    }

    pub fn subset_recall(&self, k: usize) -> f64 {
        self.subset_recall_at[&k]
    }

    /// One-line JSON object with fixed key order.
    pub fn to_json(&self) -> String {
        let mut fields: Vec<String> = self
            .recall_at
            .iter()
            .map(|(k, v)| format!("\"recall@{k}\":{}", json_number(*v)))
            .collect();
        fields.extend(
            self.subset_recall_at
                .iter()
                .map(|(k, v)| format!("\"subset_recall@{k}\":{}", json_number(*v))),
        );
        fields.push(format!("\"avg\":{}", json_number(self.avg)));
        format!("{{{}}}", fields.join(","))
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| RetrievalError::Report(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| RetrievalError::Report("not an object".into()))?;
        let mut recall_at = BTreeMap::new();
        let mut subset_recall_at = BTreeMap::new();
        let mut avg = None;
        for (key, v) in obj {
            let x = v
                .as_f64()
                .ok_or_else(|| RetrievalError::Report(format!("{key} is not a number")))?;
            let parse_k = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| RetrievalError::Report(format!("bad key {key}")))
            };
            if key == "avg" {
                avg = Some(x);
            } else if let Some(k) = key.strip_prefix("subset_recall@") {
                subset_recall_at.insert(parse_k(k)?, x);
            } else if let Some(k) = key.strip_prefix("recall@") {
                recall_at.insert(parse_k(k)?, x);
            } else {
                return Err(RetrievalError::Report(format!("unknown key {key}")));
            }
        }
        Ok(Self {
            recall_at,
            subset_recall_at,
            avg: avg.ok_or_else(|| RetrievalError::Report("missing avg".into()))?,
        })
    }
}

fn json_number(v: f64) -> String {
    // `{:?}` keeps a trailing `.0` and round-trips exactly
    format!("{v:?}")
}
