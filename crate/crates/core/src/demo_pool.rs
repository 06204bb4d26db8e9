//! Feedback artifacts for the annotator: class-wise clean subsets condensed
//! by k-medoids into a demonstration pool, and the noisy residual queued for
//! re-annotation.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{EngineError, Result};
use crate::slm::SmallModel;

/// One demonstration: a sample with its pseudo-label and the vector used
/// for retrieval (input embedding in round 1, SLM hidden representation in
/// later rounds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub id: String,
    pub text: String,
    pub class: usize,
    pub retrieval_vec: Vec<f64>,
}

/// Class-partitioned demonstration pool. Every class of the label space has
/// a bucket; buckets of classes without clean samples are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoPool {
    pub by_class: BTreeMap<usize, Vec<DemoEntry>>,
    pub round: u32,
}

impl DemoPool {
    pub fn empty(num_classes: usize, round: u32) -> Self {
        Self {
            by_class: (0..num_classes).map(|c| (c, Vec::new())).collect(),
            round,
        }
    }

    pub fn total(&self) -> usize {
        self.by_class.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Alternating k-medoids with seeded greedy farthest-point initialization.
/// Ties in assignment and medoid updates break by ascending id, so the
/// result is a pure function of (points, k, seed).
pub fn k_medoids(
    points: &[(String, Vec<f64>)],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(EngineError::Data(format!(
            "k_medoids: k = {k} out of range for {n} points"
        )));
    }
    if k == n {
        let mut ids: Vec<String> = points.iter().map(|(id, _)| id.clone()).collect();
        ids.sort();
        return Ok(ids);
    }

    // Sorted view for deterministic tie-breaking.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].0.cmp(&points[b].0));

    let dist = |a: usize, b: usize| euclidean(&points[a].1, &points[b].1);
    let total_cost = |medoids: &[usize]| -> f64 {
        order
            .iter()
            .map(|&i| medoids.iter().map(|&m| dist(i, m)).fold(f64::INFINITY, f64::min))
            .sum()
    };

    // Restarts from distinct seeded first medoids; the local search below can
    // stall in basin-dependent optima, and restarting is cheap at pool sizes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<usize> = Vec::new();
    while starts.len() < 8.min(n) {
        let cand = order[rng.random_range(0..n)];
        if !starts.contains(&cand) {
            starts.push(cand);
        }
    }
    let mut best_run: Option<(f64, Vec<usize>)> = None;
    for start in starts {
        let medoids = k_medoids_from(start, points, k, max_iters, &order, &dist, &total_cost);
        let cost = total_cost(&medoids);
        let better = match &best_run {
            None => true,
            Some((bc, bm)) => {
                cost + 1e-12 < *bc
                    || ((cost - bc).abs() <= 1e-12
                        && medoids.iter().map(|&i| &points[i].0).collect::<Vec<_>>()
                            < bm.iter().map(|&i| &points[i].0).collect::<Vec<_>>())
            }
        };
        if better {
            best_run = Some((cost, medoids));
        }
    }
    let medoids = best_run.expect("at least one restart").1;
    Ok(medoids.into_iter().map(|i| points[i].0.clone()).collect())
}

/// One seeded-start run: greedy farthest-point completion, alternating
/// medoid updates, then greedy single-swap refinement.
#[allow(clippy::too_many_arguments)]
fn k_medoids_from(
    start: usize,
    points: &[(String, Vec<f64>)],
    k: usize,
    max_iters: usize,
    order: &[usize],
    dist: &dyn Fn(usize, usize) -> f64,
    total_cost: &dyn Fn(&[usize]) -> f64,
) -> Vec<usize> {
    let mut medoids: Vec<usize> = vec![start];
    while medoids.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for &i in order {
            if medoids.contains(&i) {
                continue;
            }
            let d = medoids.iter().map(|&m| dist(i, m)).fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((bd, _)) => d > bd,
            };
            if better {
                best = Some((d, i));
            }
        }
        medoids.push(best.expect("k < n leaves candidates").1);
    }
    medoids.sort_by(|&a, &b| points[a].0.cmp(&points[b].0));

    let assign = |medoids: &[usize]| -> Vec<usize> {
        order
            .iter()
            .map(|&i| {
                let mut best = medoids[0];
                let mut best_d = dist(i, best);
                for &m in &medoids[1..] {
                    let d = dist(i, m);
                    if d < best_d {
                        best_d = d;
                        best = m;
                    }
                }
                best
            })
            .collect()
    };

    for _ in 0..max_iters {
        let assignment = assign(&medoids);
        let mut next = Vec::with_capacity(k);
        for &m in &medoids {
            let members: Vec<usize> = order
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == m)
                .map(|(i, _)| *i)
                .collect();
            // New medoid: the member minimizing the within-cluster distance sum.
            let mut best = m;
            let mut best_cost = f64::INFINITY;
            for &cand in &members {
                let cost: f64 = members.iter().map(|&j| dist(cand, j)).sum();
                if cost < best_cost {
                    best_cost = cost;
                    best = cand;
                }
            }
            next.push(best);
        }
        next.sort_by(|&a, &b| points[a].0.cmp(&points[b].0));
        next.dedup();
        if next == medoids {
            break;
        }
        medoids = next;
    }

    // Swap refinement: the alternating phase only moves medoids within their
    // own cluster and can stall in a poor local optimum. Greedily apply the
    // best strictly-improving (medoid, non-medoid) swap until none remains;
    // total cost is non-increasing and ties resolve by ascending id.
    let mut cost = total_cost(&medoids);
    for _ in 0..max_iters {
        let mut best_swap: Option<(f64, usize, usize)> = None;
        for slot in 0..medoids.len() {
            for &cand in order {
                if medoids.contains(&cand) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let c = total_cost(&trial);
                if c + 1e-12 < cost {
                    let better = match best_swap {
                        None => true,
                        Some((bc, _, _)) => c < bc,
                    };
                    if better {
                        best_swap = Some((c, slot, cand));
                    }
                }
            }
        }
        match best_swap {
            Some((c, slot, cand)) => {
                medoids[slot] = cand;
                medoids.sort_by(|&a, &b| points[a].0.cmp(&points[b].0));
                cost = c;
            }
            None => break,
        }
    }

    medoids
}

/// Total within-cluster cost of a medoid set (sum of distances from each
/// point to its nearest medoid). Exposed for the brute-force comparison.
pub fn medoid_cost(points: &[(String, Vec<f64>)], medoid_ids: &[String]) -> f64 {
    let medoids: Vec<&Vec<f64>> = medoid_ids
        .iter()
        .map(|id| &points.iter().find(|(pid, _)| pid == id).expect("medoid id in points").1)
        .collect();
    points
        .iter()
        .map(|(_, p)| {
            medoids
                .iter()
                .map(|m| euclidean(p, m))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Per class: every member if the clean subset is no larger than k, else the
/// medoids of k clusters over SLM hidden representations.
pub fn build_demo_pool(
    clean_subsets: &BTreeMap<usize, Vec<&Sample>>,
    k: usize,
    model: &SmallModel,
    round: u32,
    seed: u64,
) -> Result<DemoPool> {
    if clean_subsets.values().all(|v| v.is_empty()) {
        return Err(EngineError::Data("no clean samples".into()));
    }
    let mut by_class = BTreeMap::new();
    for (&class, members) in clean_subsets {
        let mut points = Vec::with_capacity(members.len());
        for s in members {
            points.push((s.id.clone(), model.hidden_repr(&s.embedding)?));
        }
        let chosen: BTreeSet<String> = if members.len() <= k {
            points.iter().map(|(id, _)| id.clone()).collect()
        } else {
            k_medoids(&points, k, 100, seed ^ class as u64)?
                .into_iter()
                .collect()
        };
        let mut entries = Vec::new();
        for (s, (id, vec)) in members.iter().zip(points) {
            if chosen.contains(&id) {
                entries.push(DemoEntry {
                    id,
                    text: s.text.clone(),
                    class,
                    retrieval_vec: vec,
                });
            }
        }
        by_class.insert(class, entries);
    }
    Ok(DemoPool { by_class, round })
}

/// D_noisy = D_train minus the union of the class-wise clean subsets.
pub fn noisy_residual(dataset: &Dataset, clean_subsets: &BTreeMap<usize, Vec<&Sample>>) -> Vec<String> {
    let clean_ids: BTreeSet<&str> = clean_subsets
        .values()
        .flatten()
        .map(|s| s.id.as_str())
        .collect();
    dataset
        .samples
        .iter()
        .filter(|s| !clean_ids.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect()
}
