//! Hamming-ranked retrieval over instance codes, and MAP@K in two variants:
//! the standard one, which divides by `min(total relevant, K)`, and the
//! legacy one that divides by the number of relevant items actually
//! retrieved (kept for comparison with older published numbers).

use serde::{Deserialize, Serialize};

use crate::bitcode::BitCode;
use crate::error::{Error, Result};

/// Immutable database of `(code, label)` entries.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    k: usize,
    codes: Vec<BitCode>,
    labels: Vec<usize>,
    label_counts: Vec<usize>,
}

/// Top of a ranking: database ids by ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedResult {
    pub ids: Vec<usize>,
    pub distances: Vec<u32>,
    /// 1 where the entry shares the query's label.
    pub relevance: Vec<u8>,
}

impl RetrievalIndex {
    pub fn new(codes: Vec<BitCode>, labels: Vec<usize>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::len("retrieval codes/labels", codes.len(), labels.len()));
        }
        let k = codes.first().map_or(0, BitCode::len);
        if let Some(bad) = codes.iter().find(|c| c.len() != k) {
            return Err(Error::len("retrieval code length", k, bad.len()));
        }
        let mut label_counts = vec![0; labels.iter().max().map_or(0, |m| m + 1)];
        for &y in &labels {
            label_counts[y] += 1;
        }
        Ok(Self {
            k,
            codes,
            labels,
            label_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Database entries carrying `label`.
    pub fn relevant_count(&self, label: usize) -> usize {
        self.label_counts.get(label).copied().unwrap_or(0)
    }

    pub fn query(&self, code: &BitCode, label: usize, topk: usize) -> Result<RankedResult> {
        if self.is_empty() {
            return Err(Error::Validation("retrieval database is empty".into()));
        }
        if code.len() != self.k {
            return Err(Error::len("query code length", self.k, code.len()));
        }
        if topk > self.len() {
            return Err(Error::Validation(format!(
                "requested top-{topk} from a database of {}",
                self.len()
            )));
        }
        // Counting sort on distance keeps ids ascending inside each bucket.
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); self.k + 1];
        for (id, c) in self.codes.iter().enumerate() {
            buckets[c.hamming_unchecked(code) as usize].push(id);
        }
        let mut out = RankedResult {
            ids: Vec::with_capacity(topk),
            distances: Vec::with_capacity(topk),
            relevance: Vec::with_capacity(topk),
        };
        'fill: for (d, bucket) in buckets.iter().enumerate() {
            for &id in bucket {
                if out.ids.len() == topk {
                    break 'fill;
                }
                out.ids.push(id);
                out.distances.push(d as u32);
                out.relevance.push(u8::from(self.labels[id] == label));
            }
        }
        Ok(out)
    }
}

fn precision_sum(rels: &[u8], total_relevant: usize) -> Result<(f64, usize)> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rels.iter().enumerate() {
        match r {
            0 => {}
            1 => {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
            other => {
                return Err(Error::Validation(format!(
                    "relevance at rank {} is {other}, expected 0 or 1",
                    i + 1
                )))
            }
        }
    }
    if total_relevant < hits {
        return Err(Error::Validation(format!(
            "total relevant {total_relevant} is below the {hits} relevant items retrieved"
        )));
    }
    Ok((sum, hits))
}

/// `sum_k P@k rel(k) / min(total_relevant, K)` with `K = rels.len()`.
pub fn average_precision_corrected(rels: &[u8], total_relevant: usize) -> Result<f64> {
    let (sum, hits) = precision_sum(rels, total_relevant)?;
    if hits == 0 {
        return Ok(0.0);
    }
    Ok(sum / total_relevant.min(rels.len()) as f64)
}

/// `sum_k P@k rel(k) / sum_k rel(k)`; 0 when nothing relevant was retrieved.
pub fn average_precision_reported(rels: &[u8], total_relevant: usize) -> Result<f64> {
    let (sum, hits) = precision_sum(rels, total_relevant)?;
    if hits == 0 {
        return Ok(0.0);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApVariant {
    Corrected,
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub query_id: usize,
    pub ap_corrected: f64,
    pub ap_reported: f64,
    #[serde(skip)]
    pub relevant_retrieved: usize,
    #[serde(skip)]
    pub total_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSummary {
    pub k: usize,
    pub queries: usize,
    pub map_corrected: f64,
    pub map_reported: f64,
    /// Queries with no relevant item in their top `k` (they contribute AP 0 above).
    pub queries_without_relevant: usize,
    /// Legacy convention: reported MAP over only the queries that retrieved something relevant.
    pub map_reported_skip_empty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub per_query: Vec<QueryAp>,
    pub summary: MapSummary,
}

impl MapReport {
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "lowercase")]
        enum Line<'a> {
            Query(&'a QueryAp),
            Summary(&'a MapSummary),
        }
        let mut out = String::new();
        let lines = self
            .per_query
            .iter()
            .map(Line::Query)
            .chain(std::iter::once(Line::Summary(&self.summary)));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Both AP variants for every query, in query order.
pub fn evaluate_map(index: &RetrievalIndex, queries: &[(BitCode, usize)], k: usize) -> Result<MapReport> {
    let mut per_query = Vec::with_capacity(queries.len());
    for (query_id, (code, label)) in queries.iter().enumerate() {
        let ranked = index.query(code, *label, k)?;
        let total = index.relevant_count(*label);
        per_query.push(QueryAp {
            query_id,
            ap_corrected: average_precision_corrected(&ranked.relevance, total)?,
            ap_reported: average_precision_reported(&ranked.relevance, total)?,
            relevant_retrieved: ranked.relevance.iter().map(|&r| r as usize).sum(),
            total_relevant: total,
        });
    }
    let n = per_query.len().max(1) as f64;
    let nonempty: Vec<&QueryAp> = per_query.iter().filter(|q| q.relevant_retrieved > 0).collect();
    let summary = MapSummary {
        k,
        queries: per_query.len(),
        map_corrected: per_query.iter().map(|q| q.ap_corrected).sum::<f64>() / n,
        map_reported: per_query.iter().map(|q| q.ap_reported).sum::<f64>() / n,
        queries_without_relevant: per_query.len() - nonempty.len(),
        map_reported_skip_empty: if nonempty.is_empty() {
            0.0
        } else {
            nonempty.iter().map(|q| q.ap_reported).sum::<f64>() / nonempty.len() as f64
        },
    };
    Ok(MapReport { per_query, summary })
}

/// Mean AP of one variant, plus the per-query values.
pub fn map_at_k(
    index: &RetrievalIndex,
    queries: &[(BitCode, usize)],
    k: usize,
    variant: ApVariant,
) -> Result<(f64, Vec<f64>)> {
    let report = evaluate_map(index, queries, k)?;
    let per_query: Vec<f64> = report
        .per_query
        .iter()
        .map(|q| match variant {
            ApVariant::Corrected => q.ap_corrected,
            ApVariant::Reported => q.ap_reported,
        })
        .collect();
    let map = match variant {
        ApVariant::Corrected => report.summary.map_corrected,
        ApVariant::Reported => report.summary.map_reported,
    };
    Ok((map, per_query))
}
