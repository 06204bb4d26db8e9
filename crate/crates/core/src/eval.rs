//! Evaluation against held-out gold labels and the selection baselines used
//! for ablations. Gold labels live in a sealed store: nothing outside this
//! module can read an individual label, only aggregate metrics come out.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Sample};
use crate::error::{EngineError, Result};
use crate::slm::{shuffle, SmallModel};

/// Holds gold labels stripped out of a dataset at load time. The training
/// pipeline passes this around opaquely; only the metric functions below
/// look inside.
#[derive(Debug, Clone, Default)]
pub struct GoldStore {
    labels: BTreeMap<String, usize>,
}

impl GoldStore {
    pub fn new(labels: BTreeMap<String, usize>) -> Self {
        Self { labels }
    }

    pub fn insert(&mut self, id: &str, label: usize) {
        self.labels.insert(id.to_string(), label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.labels.contains_key(id)
    }

    /// Merges another store in; ids present in both take the other's label.
    pub fn absorb(&mut self, other: &GoldStore) {
        for (id, label) in &other.labels {
            self.labels.insert(id.clone(), *label);
        }
    }

    fn gold(&self, id: &str) -> Option<usize> {
        self.labels.get(id).copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub correct: f64,
    pub total: usize,
    /// How many predictions were ambiguous and received partial credit.
    pub ambiguous: usize,
}

/// Accuracy of pseudo-labels on the training pool itself. An ambiguous
/// annotation earns the random-guess credit 1/C.
pub fn transductive_accuracy(
    gold: &GoldStore,
    annotations: &BTreeMap<String, Annotation>,
    num_classes: usize,
) -> Result<MetricsReport> {
    if num_classes < 2 {
        return Err(EngineError::Config("num_classes must be >= 2".into()));
    }
    let mut correct = 0.0;
    let mut total = 0;
    let mut ambiguous = 0;
    for (id, ann) in annotations {
        let Some(g) = gold.gold(id) else { continue };
        total += 1;
        match ann {
            Annotation::Class(c) if *c == g => correct += 1.0,
            Annotation::Class(_) => {}
            Annotation::Ambiguous => {
                ambiguous += 1;
                correct += 1.0 / num_classes as f64;
            }
        }
    }
    if total == 0 {
        return Err(EngineError::Data(
            "no annotated samples have gold labels".into(),
        ));
    }
    Ok(MetricsReport {
        accuracy: correct / total as f64,
        correct,
        total,
        ambiguous,
    })
}

/// Accuracy of the model's argmax predictions on a held-out set.
pub fn inductive_accuracy(
    gold: &GoldStore,
    model: &SmallModel,
    samples: &[Sample],
) -> Result<MetricsReport> {
    let mut correct = 0.0;
    let mut total = 0;
    for s in samples {
        let Some(g) = gold.gold(&s.id) else { continue };
        total += 1;
        if model.predict(&s.embedding)? == g {
            correct += 1.0;
        }
    }
    if total == 0 {
        return Err(EngineError::Data("no test samples have gold labels".into()));
    }
    Ok(MetricsReport {
        accuracy: correct / total as f64,
        correct,
        total,
        ambiguous: 0,
    })
}

/// Shannon entropy of a distribution, natural log.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Pick the `budget` samples the model is least sure about (highest
/// predictive entropy), ties by ascending id.
pub fn entropy_acquire(
    model: &SmallModel,
    samples: &[Sample],
    budget: usize,
) -> Result<Vec<String>> {
    let mut scored: Vec<(f64, &str)> = samples
        .iter()
        .map(|s| Ok((entropy(&model.predict_proba(&s.embedding)?), s.id.as_str())))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(budget)
        .map(|(_, id)| id.to_string())
        .collect())
}

/// Seeded uniform subset of `budget` sample ids.
pub fn random_acquire(samples: &[Sample], budget: usize, seed: u64) -> Vec<String> {
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut ids, &mut rng);
    ids.into_iter().take(budget).map(str::to_string).collect()
}

/// Per-sample statistics a demo-selection strategy can rank by.
#[derive(Debug, Clone)]
pub struct CandidateStat {
    pub id: String,
    pub loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSelectStrategy {
    SmallLoss,
    Entropy,
    Random,
}

impl std::str::FromStr for DemoSelectStrategy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_loss" => Ok(Self::SmallLoss),
            "entropy" => Ok(Self::Entropy),
            "random" => Ok(Self::Random),
            other => Err(EngineError::Config(format!(
                "unknown demo selection strategy: {other}"
            ))),
        }
    }
}

/// Choose ceil(r% of the class) demo candidates per class under the given
/// strategy: ascending loss, ascending predictive entropy, or a seeded
/// random subset. Ties break by ascending id.
pub fn select_demo_subsets(
    strategy: DemoSelectStrategy,
    per_class: &BTreeMap<usize, Vec<CandidateStat>>,
    r_percent: f64,
    seed: u64,
) -> BTreeMap<usize, Vec<String>> {
    let mut out = BTreeMap::new();
    for (&class, stats) in per_class {
        let take = ((r_percent / 100.0) * stats.len() as f64).ceil() as usize;
        let mut ranked: Vec<&CandidateStat> = stats.iter().collect();
        match strategy {
            DemoSelectStrategy::SmallLoss => {
                ranked.sort_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.id.cmp(&b.id)));
            }
            DemoSelectStrategy::Entropy => {
                ranked.sort_by(|a, b| {
                    a.entropy.total_cmp(&b.entropy).then_with(|| a.id.cmp(&b.id))
                });
            }
            DemoSelectStrategy::Random => {
                ranked.sort_by(|a, b| a.id.cmp(&b.id));
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ class as u64);
                shuffle(&mut ranked, &mut rng);
            }
        }
        out.insert(
            class,
            ranked.into_iter().take(take).map(|s| s.id.clone()).collect(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gold_fixture() -> GoldStore {
        let mut g = GoldStore::default();
        g.insert("a", 0);
        g.insert("b", 1);
        g.insert("c", 0);
        g.insert("d", 1);
        g
    }

    #[test]
    fn transductive_with_partial_credit() {
        let gold = gold_fixture();
        let mut ann = BTreeMap::new();
        ann.insert("a".to_string(), Annotation::Class(0)); // right
        ann.insert("b".to_string(), Annotation::Class(0)); // wrong
        ann.insert("c".to_string(), Annotation::Ambiguous); // 1/2 credit
        ann.insert("d".to_string(), Annotation::Class(1)); // right
        let report = transductive_accuracy(&gold, &ann, 2).unwrap();
        assert_eq!(report.total, 4);
        assert_eq!(report.ambiguous, 1);
        assert_abs_diff_eq!(report.accuracy, 2.5 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn ids_without_gold_are_skipped() {
        let gold = gold_fixture();
        let mut ann = BTreeMap::new();
        ann.insert("a".to_string(), Annotation::Class(0));
        ann.insert("zz".to_string(), Annotation::Class(1));
        let report = transductive_accuracy(&gold, &ann, 2).unwrap();
        assert_eq!(report.total, 1);
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let gold = gold_fixture();
        let mut ann = BTreeMap::new();
        ann.insert("zz".to_string(), Annotation::Class(1));
        assert!(transductive_accuracy(&gold, &ann, 2).is_err());
    }

    fn sample(id: &str, x: Vec<f64>) -> Sample {
        Sample::new(id, id, x)
    }

    #[test]
    fn inductive_accuracy_counts_argmax_matches() {
        let mut model = SmallModel::zeros(1, 1, 2);
        model.w1 = vec![1.0];
        model.w2 = vec![1.0, -1.0];
        // positive x -> class 0, otherwise uniform -> argmax 0
        let gold = gold_fixture();
        let samples = vec![sample("a", vec![1.0]), sample("b", vec![1.0])];
        let report = inductive_accuracy(&gold, &model, &samples).unwrap();
        assert_eq!(report.total, 2);
        assert_abs_diff_eq!(report.accuracy, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        assert_abs_diff_eq!(entropy(&[0.5, 0.5]), 2.0f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn entropy_acquire_prefers_uncertain_samples() {
        let mut model = SmallModel::zeros(1, 1, 2);
        model.w1 = vec![1.0];
        model.w2 = vec![5.0, -5.0];
        // x = 0 -> uniform (max entropy); large x -> confident.
        let samples = vec![
            sample("far", vec![3.0]),
            sample("mid", vec![0.5]),
            sample("near", vec![0.0]),
        ];
        let picked = entropy_acquire(&model, &samples, 2).unwrap();
        assert_eq!(picked, vec!["near".to_string(), "mid".to_string()]);
    }

    #[test]
    fn random_acquire_is_seeded_and_budgeted() {
        let samples: Vec<Sample> = (0..20)
            .map(|i| sample(&format!("s{i:02}"), vec![i as f64]))
            .collect();
        let a = random_acquire(&samples, 5, 7);
        let b = random_acquire(&samples, 5, 7);
        let c = random_acquire(&samples, 5, 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_ne!(a, c);
    }

    #[test]
    fn demo_strategies_rank_as_expected() {
        let stats = vec![
            CandidateStat { id: "a".into(), loss: 0.9, entropy: 0.1 },
            CandidateStat { id: "b".into(), loss: 0.1, entropy: 0.9 },
            CandidateStat { id: "c".into(), loss: 0.5, entropy: 0.5 },
            CandidateStat { id: "d".into(), loss: 0.2, entropy: 0.2 },
        ];
        let mut per_class = BTreeMap::new();
        per_class.insert(0usize, stats);
        let small = select_demo_subsets(DemoSelectStrategy::SmallLoss, &per_class, 50.0, 0);
        assert_eq!(small[&0], vec!["b".to_string(), "d".to_string()]);
        let ent = select_demo_subsets(DemoSelectStrategy::Entropy, &per_class, 50.0, 0);
        assert_eq!(ent[&0], vec!["a".to_string(), "d".to_string()]);
        let r1 = select_demo_subsets(DemoSelectStrategy::Random, &per_class, 50.0, 3);
        let r2 = select_demo_subsets(DemoSelectStrategy::Random, &per_class, 50.0, 3);
        assert_eq!(r1, r2);
        assert_eq!(r1[&0].len(), 2);
    }
}
