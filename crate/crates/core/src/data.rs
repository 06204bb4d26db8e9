//! Shared data model: samples, label spaces, datasets and run configuration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// The C classes of a task and their bidirectional mapping to the surface
/// tokens the annotator emits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<String>,
    tokens: Vec<String>,
}

impl LabelSpace {
    /// Classes are identified by position; `tokens[i]` is the surface form
    /// of `classes[i]`.
    pub fn new(classes: Vec<String>, tokens: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(EngineError::Config(format!(
                "label space needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        if classes.len() != tokens.len() {
            return Err(EngineError::Config(format!(
                "{} classes but {} verbalizer tokens",
                classes.len(),
                tokens.len()
            )));
        }
        let distinct: BTreeSet<&String> = tokens.iter().collect();
        if distinct.len() != tokens.len() {
            return Err(EngineError::Config(
                "verbalizer tokens must be pairwise distinct".into(),
            ));
        }
        let distinct_cls: BTreeSet<&String> = classes.iter().collect();
        if distinct_cls.len() != classes.len() {
            return Err(EngineError::Config("class names must be distinct".into()));
        }
        Ok(Self { classes, tokens })
    }

    /// Binary sentiment space used by fixtures and defaults.
    pub fn binary_sentiment() -> Self {
        Self::new(
            vec!["0".into(), "1".into()],
            vec!["positive".into(), "negative".into()],
        )
        .expect("static label space")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// V(c): the surface token for a class.
    pub fn token(&self, class: usize) -> &str {
        &self.tokens[class]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Inverse verbalizer lookup; exact (case-sensitive) match.
    pub fn class_for_token(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

/// Where a pseudo-label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    None,
    LlmInitial,
    LlmRefined,
    Slm,
    Generated,
}

/// An annotator verdict for one sample: a class, or a response that could
/// not be mapped to exactly one verbalizer token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Annotation {
    Class(usize),
    Ambiguous,
}

impl Annotation {
    pub fn class(self) -> Option<usize> {
        match self {
            Annotation::Class(c) => Some(c),
            Annotation::Ambiguous => None,
        }
    }
}

/// One training or test item. Gold labels never live here: they are stripped
/// at load time into the sealed evaluation channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub embedding: Vec<f64>,
    pub pseudo_label: Option<usize>,
    pub annotation_source: AnnotationSource,
    pub ambiguous: bool,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, embedding: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            embedding,
            pseudo_label: None,
            annotation_source: AnnotationSource::None,
            ambiguous: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// An ordered collection of samples sharing a label space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub label_space: LabelSpace,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, label_space: LabelSpace, split: Split) -> Self {
        Self {
            samples,
            label_space,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.samples.first().map(|s| s.embedding.len()).unwrap_or(0)
    }

    pub fn sample_by_id(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Run configuration. Field names mirror the knobs of the annotation loop;
/// defaults are the fixed values of the method where it states them and
/// desk-scale choices elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Demonstrations per ICL prompt.
    pub m: usize,
    /// Unlabeled prototypes embedded in the generation prompt.
    pub q_prototypes: usize,
    /// GMM clean-probability threshold.
    pub tau: f64,
    /// Small-loss percentile for demonstration candidates.
    pub r_percent: f64,
    /// Medoids per class when condensing the demonstration pool.
    pub k_medoids: usize,
    /// Beta shape for mixup interpolation.
    pub varsigma: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub alpha_ramp_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    /// Annotate/distill loops; rounds run 1..=2*num_loops.
    pub num_loops: usize,
    pub annotator_parallelism: usize,
    /// Fraction of label changes between LLM rounds below which the loop stops.
    pub convergence_threshold: f64,
    /// Enable the mixup regularizer.
    pub mixup: bool,
    /// Std-dev of the default Gaussian-jitter augmentation provider.
    pub augment_sigma: f64,
    /// Budgeted variant: percentage of samples annotated per LLM round.
    pub budget_fraction_p: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 10,
            q_prototypes: 10,
            tau: 0.7,
            r_percent: 20.0,
            k_medoids: 20,
            varsigma: 4.0,
            warmup_epochs: 5,
            total_epochs: 30,
            alpha_ramp_epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
            hidden_dim: 64,
            seed: 0,
            num_loops: 2,
            annotator_parallelism: 4,
            convergence_threshold: 0.005,
            mixup: true,
            augment_sigma: 0.1,
            budget_fraction_p: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(EngineError::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if !(self.r_percent > 0.0 && self.r_percent <= 100.0) {
            return Err(EngineError::Config(format!(
                "r_percent must be in (0,100], got {}",
                self.r_percent
            )));
        }
        if self.m < 1 {
            return Err(EngineError::Config("m must be >= 1".into()));
        }
        if self.k_medoids < 1 {
            return Err(EngineError::Config("k_medoids must be >= 1".into()));
        }
        if self.varsigma <= 0.0 {
            return Err(EngineError::Config("varsigma must be > 0".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(EngineError::Config(
                "warmup_epochs cannot exceed total_epochs".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be >= 1".into()));
        }
        if let Some(p) = self.budget_fraction_p {
            if !(p > 0.0 && p <= 100.0) {
                return Err(EngineError::Config(format!(
                    "budget_fraction_p must be in (0,100], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of dataset validation; empty `violations` means the dataset is ok.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks id uniqueness, embedding dimensions and label-space membership.
/// Report-based: never fails, only lists violations.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    if dataset.samples.is_empty() {
        report.violations.push("dataset is empty".into());
        return report;
    }
    let mut seen = BTreeSet::new();
    for s in &dataset.samples {
        if !seen.insert(s.id.as_str()) {
            report.violations.push(format!("duplicate id {}", s.id));
        }
    }
    let dim = dataset.samples[0].embedding.len();
    for s in &dataset.samples {
        if s.embedding.len() != dim {
            report.violations.push(format!(
                "dimension mismatch: sample {} has dim {}, expected {}",
                s.id,
                s.embedding.len(),
                dim
            ));
        }
        if s.embedding.iter().any(|v| !v.is_finite()) {
            report
                .violations
                .push(format!("non-finite embedding entry in sample {}", s.id));
        }
        if let Some(l) = s.pseudo_label {
            if l >= dataset.label_space.num_classes() {
                report.violations.push(format!(
                    "sample {} has pseudo_label {} outside label space",
                    s.id, l
                ));
            }
        }
        if s.ambiguous
            && !matches!(
                s.annotation_source,
                AnnotationSource::LlmInitial | AnnotationSource::LlmRefined
            )
        {
            report.violations.push(format!(
                "sample {} marked ambiguous but source is {:?}",
                s.id, s.annotation_source
            ));
        }
    }
    report
}

/// Partitions samples by pseudo-label. Every class of the label space is a
/// key, empty classes map to empty lists. Order inside a class follows the
/// dataset order; the result is keyed by class index.
pub fn split_by_pseudo_class(dataset: &Dataset) -> Result<BTreeMap<usize, Vec<String>>> {
    let mut by_class: BTreeMap<usize, Vec<String>> = (0..dataset.label_space.num_classes())
        .map(|c| (c, Vec::new()))
        .collect();
    for s in &dataset.samples {
        match s.pseudo_label {
            Some(l) => by_class
                .get_mut(&l)
                .ok_or_else(|| {
                    EngineError::Data(format!("sample {} has label {} outside label space", s.id, l))
                })?
                .push(s.id.clone()),
            None => return Err(EngineError::UnlabeledSample(s.id.clone())),
        }
    }
    for ids in by_class.values_mut() {
        ids.sort();
    }
    Ok(by_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, emb: Vec<f64>) -> Sample {
        Sample::new(id, format!("text {id}"), emb)
    }

    fn space() -> LabelSpace {
        LabelSpace::binary_sentiment()
    }

    #[test]
    fn duplicate_ids_reported() {
        let ds = Dataset::new(
            vec![sample("a", vec![1.0]), sample("a", vec![2.0])],
            space(),
            Split::Train,
        );
        let report = validate_dataset(&ds);
        assert!(report.violations.iter().any(|v| v.contains("duplicate id a")));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let ds = Dataset::new(
            vec![sample("a", vec![1.0; 4]), sample("b", vec![1.0; 5])],
            space(),
            Split::Train,
        );
        let report = validate_dataset(&ds);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("dimension mismatch")));
    }

    #[test]
    fn well_formed_dataset_is_ok() {
        let ds = Dataset::new(
            vec![
                sample("a", vec![1.0, 0.0]),
                sample("b", vec![0.0, 1.0]),
                sample("c", vec![1.0, 1.0]),
            ],
            space(),
            Split::Train,
        );
        assert!(validate_dataset(&ds).is_ok());
    }

    #[test]
    fn validation_is_idempotent() {
        let ds = Dataset::new(
            vec![sample("a", vec![1.0]), sample("a", vec![1.0])],
            space(),
            Split::Train,
        );
        let first = validate_dataset(&ds);
        let second = validate_dataset(&ds);
        assert_eq!(first.violations, second.violations);
    }

    #[test]
    fn split_partitions_by_label() {
        let mut s1 = sample("s1", vec![1.0]);
        let mut s2 = sample("s2", vec![1.0]);
        let mut s3 = sample("s3", vec![1.0]);
        s1.pseudo_label = Some(0);
        s2.pseudo_label = Some(1);
        s3.pseudo_label = Some(0);
        let ds = Dataset::new(vec![s1, s2, s3], space(), Split::Train);
        let parts = split_by_pseudo_class(&ds).unwrap();
        assert_eq!(parts[&0], vec!["s1".to_string(), "s3".to_string()]);
        assert_eq!(parts[&1], vec!["s2".to_string()]);
    }

    #[test]
    fn empty_class_is_present_not_absent() {
        let mut s1 = sample("s1", vec![1.0]);
        let mut s2 = sample("s2", vec![1.0]);
        s1.pseudo_label = Some(1);
        s2.pseudo_label = Some(1);
        let ds = Dataset::new(vec![s1, s2], space(), Split::Train);
        let parts = split_by_pseudo_class(&ds).unwrap();
        assert_eq!(parts[&0], Vec::<String>::new());
        assert_eq!(parts[&1].len(), 2);
    }

    #[test]
    fn unlabeled_sample_is_an_error() {
        let mut s1 = sample("s1", vec![1.0]);
        s1.pseudo_label = Some(0);
        let s2 = sample("s2", vec![1.0]);
        let ds = Dataset::new(vec![s1, s2], space(), Split::Train);
        let err = split_by_pseudo_class(&ds).unwrap_err();
        assert!(err.to_string().contains("s2"));
    }

    #[test]
    fn label_space_rejects_duplicate_tokens() {
        assert!(LabelSpace::new(
            vec!["0".into(), "1".into()],
            vec!["same".into(), "same".into()]
        )
        .is_err());
    }

    #[test]
    fn config_bounds_checked() {
        let mut cfg = RunConfig::default();
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.r_percent = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.budget_fraction_p = Some(120.0);
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
