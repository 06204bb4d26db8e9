//! Exhaustive similarity search over embeddings for demonstration retrieval.

use serde::{Deserialize, Serialize};

use crate::demo_pool::{DemoEntry, DemoPool};
use crate::error::{EngineError, Result};

/// Neighbors ordered by descending similarity, ties broken by ascending id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborResult {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// dot(a,b) / (|a||b|). Zero vectors are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EngineError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EngineError::DegenerateEmbedding(
            "zero vector in cosine similarity".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Top-min(m, |pool|) pool entries by cosine similarity to the query.
pub fn nearest_neighbors(query: &[f64], pool: &[(&str, &[f64])], m: usize) -> Result<NeighborResult> {
    if pool.is_empty() {
        return Err(EngineError::Data("nearest_neighbors: empty pool".into()));
    }
    if m == 0 {
        return Err(EngineError::Data("nearest_neighbors: m must be >= 1".into()));
    }
    let mut scored: Vec<(&str, f64)> = pool
        .iter()
        .map(|(id, emb)| cosine_similarity(query, emb).map(|s| (*id, s)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
    scored.truncate(m);
    Ok(NeighborResult {
        ids: scored.iter().map(|(id, _)| id.to_string()).collect(),
        scores: scored.iter().map(|(_, s)| *s).collect(),
    })
}

/// Class-balanced retrieval: each class gets floor(m/C) slots, the remainder
/// goes to classes in order of best similarity, and slots a class cannot fill
/// are reallocated to the classes with the strongest remaining candidates.
/// The final list interleaves classes by similarity rank.
pub fn class_wise_retrieve<'a>(
    query: &[f64],
    pool: &'a DemoPool,
    m: usize,
) -> Result<Vec<&'a DemoEntry>> {
    if m == 0 {
        return Err(EngineError::Data("class_wise_retrieve: m must be >= 1".into()));
    }
    let classes: Vec<usize> = pool.by_class.keys().copied().collect();
    let total_members: usize = pool.by_class.values().map(|v| v.len()).sum();
    if classes.is_empty() || total_members == 0 {
        return Err(EngineError::EmptyDemoPool);
    }

    // Rank members within each class.
    let mut ranked: Vec<Vec<(&DemoEntry, f64)>> = Vec::with_capacity(classes.len());
    for c in &classes {
        let mut members: Vec<(&DemoEntry, f64)> = pool.by_class[c]
            .iter()
            .map(|e| cosine_similarity(query, &e.retrieval_vec).map(|s| (e, s)))
            .collect::<Result<_>>()?;
        members.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.id.cmp(&b.0.id))
        });
        ranked.push(members);
    }

    let c_count = classes.len();
    let base = m / c_count;
    let mut target = vec![base; c_count];

    // Remainder slots go to classes with the best top candidate.
    let mut best: Vec<(usize, f64, &str)> = ranked
        .iter()
        .enumerate()
        .filter_map(|(ci, members)| members.first().map(|(e, s)| (ci, *s, e.id.as_str())))
        .collect();
    best.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.2.cmp(b.2)));
    for (ci, _, _) in best.iter().take(m - base * c_count) {
        target[*ci] += 1;
    }

    let mut take: Vec<usize> = (0..c_count).map(|ci| target[ci].min(ranked[ci].len())).collect();

    // Reallocate slots undersized classes could not use.
    let mut leftover = m.min(total_members) - take.iter().sum::<usize>();
    while leftover > 0 {
        let next = (0..c_count)
            .filter(|&ci| take[ci] < ranked[ci].len())
            .max_by(|&a, &b| {
                let (ea, sa) = ranked[a][take[a]];
                let (eb, sb) = ranked[b][take[b]];
                sa.partial_cmp(&sb).unwrap().then_with(|| eb.id.cmp(&ea.id))
            });
        match next {
            Some(ci) => take[ci] += 1,
            None => break,
        }
        leftover -= 1;
    }

    // Interleave by class then similarity rank.
    let max_take = take.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    for rank in 0..max_take {
        for ci in 0..c_count {
            if rank < take[ci] {
                out.push(ranked[ci][rank].0);
            }
        }
    }
    Ok(out)
}
