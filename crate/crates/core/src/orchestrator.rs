//! The collaborative loop: odd rounds ask the annotator for labels, even
//! rounds distill them into the small model and send a condensed pool of
//! reliable demonstrations back. State checkpoints after every round so a
//! run can resume mid-loop with identical results.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{
    annotate_batch, build_generation_prompt, complete_with_retry, parse_generated_examples,
    AnnotationQuery, AnnotatorBackend, BatchAnnotations, CompletionRequest, PromptTemplate,
};
use crate::data::{Annotation, AnnotationSource, Dataset, RunConfig, Sample};
use crate::demo_pool::{build_demo_pool, noisy_residual, DemoEntry, DemoPool};
use crate::error::{EngineError, Result};
use crate::eval::{inductive_accuracy, transductive_accuracy, GoldStore};
use crate::io::{
    annotations_of, load_model, read_manifest, record_file, save_model, verify_manifest,
    write_jsonl_dataset, write_manifest, Manifest,
};
use crate::selection::small_loss_class_subset;
use crate::selftrain::{
    robust_train_round, GaussianJitterProvider, LabeledItem, UnlabeledItem,
};
use crate::sim::hashed_embedding;
use crate::slm::{shuffle, SmallModel};

const GENERATION_MAX_TOKENS: usize = 4096;

const SALT_PROTO: u64 = 0x01;
const SALT_INIT: u64 = 0x02;
const SALT_TRAIN: u64 = 0x03;
const SALT_POOL: u64 = 0x04;
const SALT_BUDGET: u64 = 0x05;

/// Per-round seed derivation: every source of randomness is a pure function
/// of (config seed, round, role), so a resumed run replays identically.
fn derive_seed(base: u64, round: u32, salt: u64) -> u64 {
    base ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    LlmAnnotation,
    SlmDistillation,
}

pub fn round_kind(round: u32) -> RoundKind {
    if round % 2 == 1 {
        RoundKind::LlmAnnotation
    } else {
        RoundKind::SlmDistillation
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub kind: RoundKind,
    pub labeled: usize,
    pub ambiguous: usize,
    pub clean: usize,
    pub noisy: usize,
    pub annotator_calls: u64,
    pub changed_fraction: Option<f64>,
    pub transductive_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Serializable loop state; the model itself lives in a separate binary
/// checkpoint next to the state file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopState {
    pub round: u32,
    pub dataset: Dataset,
    pub demo_pool: DemoPool,
    pub noisy_ids: Vec<String>,
    pub converged: bool,
    pub records: Vec<RoundRecord>,
    pub has_model: bool,
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub state: LoopState,
    pub model: Option<SmallModel>,
}

pub struct LoopOptions<'a> {
    pub backend: &'a dyn AnnotatorBackend,
    pub config: &'a RunConfig,
    /// Checkpoint directory; no checkpoints are written when absent.
    pub out_dir: Option<&'a Path>,
    pub resume: bool,
    /// Resume from this round instead of the latest checkpointed one.
    pub resume_round: Option<u32>,
    /// Stop after this many rounds even if the loop is not finished.
    pub stop_after: Option<u32>,
    /// Optional scoring hooks; never influence the loop itself.
    pub gold: Option<&'a GoldStore>,
    pub test: Option<&'a Dataset>,
}

fn label_fingerprint(dataset: &Dataset) -> Vec<(Option<usize>, bool)> {
    dataset
        .samples
        .iter()
        .map(|s| (s.pseudo_label, s.ambiguous))
        .collect()
}

/// Annotation queries for the given ids; retrieval vectors are input
/// embeddings before the first distillation and hidden representations of
/// the current model afterwards.
fn queries_for(
    dataset: &Dataset,
    ids: &[String],
    model: Option<&SmallModel>,
) -> Result<Vec<AnnotationQuery>> {
    ids.iter()
        .map(|id| {
            let s = dataset
                .sample_by_id(id)
                .ok_or_else(|| EngineError::Data(format!("unknown sample id {id}")))?;
            let retrieval_vec = match model {
                Some(m) => m.hidden_repr(&s.embedding)?,
                None => s.embedding.clone(),
            };
            Ok(AnnotationQuery {
                id: s.id.clone(),
                text: s.text.clone(),
                retrieval_vec,
            })
        })
        .collect()
}

fn apply_annotations(dataset: &mut Dataset, batch: &BatchAnnotations, source: AnnotationSource) {
    for s in &mut dataset.samples {
        match batch.by_id.get(&s.id) {
            Some(Annotation::Class(c)) => {
                s.pseudo_label = Some(*c);
                s.annotation_source = source;
                s.ambiguous = false;
            }
            Some(Annotation::Ambiguous) => {
                // Keep any previous label; the distillation side decides what
                // to do with the sample.
                s.annotation_source = source;
                s.ambiguous = true;
            }
            None => {}
        }
    }
}

/// Exactly `k` ids for a budgeted annotation round: seeded draws from the
/// priority groups in order, without replacement.
fn budget_subset(groups: &[Vec<String>], k: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut seen: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for group in groups {
        if chosen.len() >= k {
            break;
        }
        let mut ids: Vec<&String> = group.iter().filter(|id| !seen.contains(id.as_str())).collect();
        ids.sort();
        shuffle(&mut ids, &mut rng);
        for id in ids {
            if chosen.len() >= k {
                break;
            }
            seen.insert(id);
            chosen.push(id.clone());
        }
    }
    chosen
}

fn budget_k(config: &RunConfig, n: usize, num_classes: usize) -> Result<Option<usize>> {
    match config.budget_fraction_p {
        None => Ok(None),
        Some(p) => {
            let k = ((p / 100.0) * n as f64).ceil() as usize;
            if k < num_classes {
                return Err(EngineError::Config(format!(
                    "budget of {k} annotations cannot cover {num_classes} classes"
                )));
            }
            Ok(Some(k.min(n)))
        }
    }
}

/// Round 1: self-generate demonstrations from unlabeled prototypes, then
/// annotate the training pool in context. A generation that yields nothing
/// parseable degrades to zero-shot annotation.
pub fn run_initial_annotation(
    dataset: &mut Dataset,
    backend: &dyn AnnotatorBackend,
    config: &RunConfig,
) -> Result<DemoPool> {
    let space = dataset.label_space.clone();
    let dim = dataset.embedding_dim();

    let mut proto_ids: Vec<&str> = dataset.samples.iter().map(|s| s.id.as_str()).collect();
    proto_ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, SALT_PROTO));
    shuffle(&mut proto_ids, &mut rng);
    proto_ids.truncate(config.q_prototypes.min(dataset.len()));
    let prototypes: Vec<&Sample> = proto_ids
        .iter()
        .map(|id| dataset.sample_by_id(id).expect("own id"))
        .collect();

    let gen_template = PromptTemplate::generation_default(&space);
    let prompt = build_generation_prompt(&gen_template, &prototypes, &space)?;
    let request = CompletionRequest {
        instruction: gen_template.instruction.clone(),
        prompt,
        max_tokens: GENERATION_MAX_TOKENS,
    };
    let response = complete_with_retry(backend, &request)?;

    let pool = match parse_generated_examples(&response, &space) {
        Ok((pairs, _skipped)) => {
            let mut by_class: BTreeMap<usize, Vec<DemoEntry>> =
                (0..space.num_classes()).map(|c| (c, Vec::new())).collect();
            for (i, (text, class)) in pairs.into_iter().enumerate() {
                let retrieval_vec = dataset
                    .samples
                    .iter()
                    .find(|s| s.text == text)
                    .map(|s| s.embedding.clone())
                    .unwrap_or_else(|| hashed_embedding(&text, dim));
                by_class.entry(class).or_default().push(DemoEntry {
                    id: format!("gen-{i:04}"),
                    text,
                    class,
                    retrieval_vec,
                });
            }
            DemoPool { by_class, round: 1 }
        }
        Err(EngineError::EmptyGeneration) => DemoPool::empty(space.num_classes(), 1),
        Err(e) => return Err(e),
    };

    let target_ids: Vec<String> = match budget_k(config, dataset.len(), space.num_classes())? {
        None => dataset.samples.iter().map(|s| s.id.clone()).collect(),
        Some(k) => {
            let all: Vec<String> = dataset.samples.iter().map(|s| s.id.clone()).collect();
            budget_subset(&[all], k, derive_seed(config.seed, 1, SALT_BUDGET))
        }
    };
    let queries = queries_for(dataset, &target_ids, None)?;
    let template = PromptTemplate::annotation_default(&space);
    let batch = annotate_batch(
        &queries,
        Some(&pool),
        &template,
        &space,
        backend,
        config,
    )?;
    apply_annotations(dataset, &batch, AnnotationSource::LlmInitial);
    Ok(pool)
}

pub struct SlmRoundOutcome {
    pub model: SmallModel,
    pub demo_pool: DemoPool,
    pub noisy_ids: Vec<String>,
    pub clean_count: usize,
}

/// Even rounds: distill the current pseudo-labels into a freshly initialized
/// small model, then condense the class-wise small-loss subsets into the next
/// demonstration pool. Ambiguous or unlabeled samples take the previous
/// model's predictions when one exists, otherwise they sit in the unlabeled
/// consistency set.
pub fn run_slm_round(
    dataset: &mut Dataset,
    prev_model: Option<&SmallModel>,
    config: &RunConfig,
    round: u32,
) -> Result<SlmRoundOutcome> {
    debug_assert_eq!(round_kind(round), RoundKind::SlmDistillation);
    if let Some(prev) = prev_model {
        for s in &mut dataset.samples {
            if s.pseudo_label.is_none() || s.ambiguous {
                s.pseudo_label = Some(prev.predict(&s.embedding)?);
                s.annotation_source = AnnotationSource::Slm;
                s.ambiguous = false;
            }
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for s in &dataset.samples {
        match s.pseudo_label {
            Some(l) if !s.ambiguous => labeled.push(LabeledItem {
                id: s.id.clone(),
                x: s.embedding.clone(),
                label: l,
            }),
            _ => unlabeled.push(UnlabeledItem {
                id: s.id.clone(),
                x: s.embedding.clone(),
            }),
        }
    }
    if labeled.is_empty() {
        return Err(EngineError::Data("no trainable labels".into()));
    }

    let mut model = SmallModel::new(
        dataset.embedding_dim(),
        config.hidden_dim,
        dataset.label_space.num_classes(),
        derive_seed(config.seed, round, SALT_INIT),
    );
    let provider = GaussianJitterProvider {
        sigma: config.augment_sigma,
        seed: derive_seed(config.seed, round, SALT_TRAIN),
    };
    let outcome = robust_train_round(
        &mut model,
        &labeled,
        &unlabeled,
        config,
        &provider,
        derive_seed(config.seed, round, SALT_TRAIN),
    )?;

    // Class-wise small-loss candidates from the final per-sample losses.
    let mut per_class: BTreeMap<usize, Vec<(String, f64)>> = (0..dataset
        .label_space
        .num_classes())
        .map(|c| (c, Vec::new()))
        .collect();
    for (item, &loss) in labeled.iter().zip(&outcome.snapshot.losses) {
        per_class
            .get_mut(&item.label)
            .expect("class in label space")
            .push((item.id.clone(), loss));
    }
    let mut clean_subsets: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for (&class, members) in &per_class {
        let ids = small_loss_class_subset(members, config.r_percent)?;
        let subset = ids
            .iter()
            .map(|id| dataset.sample_by_id(id).expect("own id"))
            .collect();
        clean_subsets.insert(class, subset);
    }

    let demo_pool = build_demo_pool(
        &clean_subsets,
        config.k_medoids,
        &model,
        round,
        derive_seed(config.seed, round, SALT_POOL),
    )?;
    let noisy_ids = noisy_residual(dataset, &clean_subsets);
    let clean_count = clean_subsets.values().map(|v| v.len()).sum();

    Ok(SlmRoundOutcome {
        model,
        demo_pool,
        noisy_ids,
        clean_count,
    })
}

/// Odd rounds after the first: re-annotate the noisy residual with
/// demonstrations retrieved from the current pool in the model's hidden
/// space. Labels of clean samples are never touched.
pub fn run_refinement_round(
    dataset: &mut Dataset,
    model: &SmallModel,
    demo_pool: &DemoPool,
    noisy_ids: &[String],
    backend: &dyn AnnotatorBackend,
    config: &RunConfig,
    round: u32,
) -> Result<usize> {
    debug_assert_eq!(round_kind(round), RoundKind::LlmAnnotation);
    let space = dataset.label_space.clone();
    let target_ids: Vec<String> = match budget_k(config, dataset.len(), space.num_classes())? {
        None => noisy_ids.to_vec(),
        Some(k) => {
            let rest: Vec<String> = {
                let noisy: std::collections::BTreeSet<&str> =
                    noisy_ids.iter().map(String::as_str).collect();
                dataset
                    .samples
                    .iter()
                    .filter(|s| !noisy.contains(s.id.as_str()))
                    .map(|s| s.id.clone())
                    .collect()
            };
            budget_subset(
                &[noisy_ids.to_vec(), rest],
                k,
                derive_seed(config.seed, round, SALT_BUDGET),
            )
        }
    };
    if target_ids.is_empty() {
        return Ok(0);
    }
    let queries = queries_for(dataset, &target_ids, Some(model))?;
    let template = PromptTemplate::annotation_default(&space);
    let batch = annotate_batch(&queries, Some(demo_pool), &template, &space, backend, config)?;
    let annotated = batch.by_id.len();
    apply_annotations(dataset, &batch, AnnotationSource::LlmRefined);
    Ok(annotated)
}

/// LLM rounds are scored on the pseudo-labels themselves; SLM rounds on the
/// model's predictions over the training pool, which is what that round
/// contributes.
fn score_round(
    dataset: &Dataset,
    model: Option<&SmallModel>,
    kind: RoundKind,
    opts: &LoopOptions,
) -> (Option<f64>, Option<f64>) {
    let transductive = opts.gold.and_then(|gold| match (kind, model) {
        (RoundKind::SlmDistillation, Some(model)) => {
            inductive_accuracy(gold, model, &dataset.samples)
                .ok()
                .map(|r| r.accuracy)
        }
        _ => transductive_accuracy(
            gold,
            &annotations_of(dataset),
            dataset.label_space.num_classes(),
        )
        .ok()
        .map(|r| r.accuracy),
    });
    let test = match (opts.gold, opts.test, model) {
        (Some(gold), Some(test), Some(model)) => {
            inductive_accuracy(gold, model, &test.samples).ok().map(|r| r.accuracy)
        }
        _ => None,
    };
    (transductive, test)
}

fn checkpoint(
    dir: &Path,
    manifest: &mut Manifest,
    state: &LoopState,
    model: Option<&SmallModel>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let state_name = format!("round_{:02}.json", state.round);
    crate::io::atomic_write(&dir.join(&state_name), &serde_json::to_vec_pretty(state)?)?;
    record_file(manifest, dir, &state_name)?;
    if let Some(model) = model {
        let model_name = format!("model_round_{:02}.bin", state.round);
        save_model(&dir.join(&model_name), model)?;
        record_file(manifest, dir, &model_name)?;
    }
    if let Some(record) = state.records.last() {
        let metrics_name = format!("metrics_round_{:02}.txt", state.round);
        crate::io::atomic_write(&dir.join(&metrics_name), render_record(record).as_bytes())?;
        record_file(manifest, dir, &metrics_name)?;
    }
    manifest.rounds_completed = state.round;
    manifest.converged = state.converged;
    write_manifest(dir, manifest)
}

fn render_record(r: &RoundRecord) -> String {
    format!(
        "round {:02} {:?}: labeled {} ambiguous {} clean {} noisy {} calls {}{}{}{}\n",
        r.round,
        r.kind,
        r.labeled,
        r.ambiguous,
        r.clean,
        r.noisy,
        r.annotator_calls,
        r.changed_fraction
            .map(|f| format!(" changed {f:.4}"))
            .unwrap_or_default(),
        r.transductive_accuracy
            .map(|a| format!(" train-acc {a:.4}"))
            .unwrap_or_default(),
        r.test_accuracy
            .map(|a| format!(" test-acc {a:.4}"))
            .unwrap_or_default(),
    )
}

fn write_final_outputs(dir: &Path, state: &LoopState, model: Option<&SmallModel>) -> Result<()> {
    write_jsonl_dataset(&dir.join("labels.jsonl"), &state.dataset)?;
    if let Some(model) = model {
        save_model(&dir.join("model.bin"), model)?;
    }
    crate::io::atomic_write(
        &dir.join("summary.json"),
        &serde_json::to_vec_pretty(&state.records)?,
    )?;
    let mut text = String::new();
    for r in &state.records {
        text.push_str(&render_record(r));
    }
    crate::io::atomic_write(&dir.join("metrics.txt"), text.as_bytes())
}

struct CallCounter<'a> {
    inner: &'a dyn AnnotatorBackend,
    calls: std::sync::atomic::AtomicU64,
}

impl AnnotatorBackend for CallCounter<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Runs rounds 1..=2*num_loops, or resumes a checkpointed run. Stops early
/// when an annotation round changes fewer than `convergence_threshold` of
/// the labels.
pub fn run_loop(train: &Dataset, opts: &LoopOptions) -> Result<LoopOutcome> {
    opts.config.validate()?;
    let total_rounds = 2 * opts.config.num_loops as u32;
    let last_round = opts
        .stop_after
        .map(|s| s.min(total_rounds))
        .unwrap_or(total_rounds);

    let mut state;
    let mut model: Option<SmallModel> = None;
    let mut manifest;
    let mut start_round;

    if opts.resume {
        let dir = opts.out_dir.ok_or_else(|| {
            EngineError::Config("resume requires a checkpoint directory".into())
        })?;
        manifest = read_manifest(dir)?;
        verify_manifest(dir, &manifest)?;
        if manifest.config != *opts.config {
            return Err(EngineError::Config(
                "checkpoint was created with a different configuration".into(),
            ));
        }
        let from_round = opts.resume_round.unwrap_or(manifest.rounds_completed);
        if from_round == 0 || from_round > manifest.rounds_completed {
            return Err(EngineError::Config(format!(
                "cannot resume from round {from_round}: checkpoint has {} rounds",
                manifest.rounds_completed
            )));
        }
        let state_name = format!("round_{from_round:02}.json");
        let text = std::fs::read_to_string(dir.join(&state_name))?;
        state = serde_json::from_str::<LoopState>(&text)?;
        if state.has_model {
            model = Some(load_model(
                &dir.join(format!("model_round_{:02}.bin", latest_model_round(&state)?)),
            )?);
        }
        start_round = state.round + 1;
    } else {
        state = LoopState {
            round: 0,
            dataset: train.clone(),
            demo_pool: DemoPool::empty(train.label_space.num_classes(), 0),
            noisy_ids: Vec::new(),
            converged: false,
            records: Vec::new(),
            has_model: false,
        };
        manifest = Manifest::new(opts.config);
        start_round = 1;
    }

    if state.converged {
        start_round = last_round + 1; // nothing left to do
    }

    for round in start_round..=last_round {
        match round_kind(round) {
            RoundKind::LlmAnnotation => {
                let counter = CallCounter {
                    inner: opts.backend,
                    calls: std::sync::atomic::AtomicU64::new(0),
                };
                let before = label_fingerprint(&state.dataset);
                if round == 1 {
                    state.demo_pool = run_initial_annotation(
                        &mut state.dataset,
                        &counter,
                        opts.config,
                    )?;
                } else {
                    let m = model.as_ref().ok_or_else(|| {
                        EngineError::Data("refinement round without a trained model".into())
                    })?;
                    run_refinement_round(
                        &mut state.dataset,
                        m,
                        &state.demo_pool,
                        &state.noisy_ids.clone(),
                        &counter,
                        opts.config,
                        round,
                    )?;
                }
                let after = label_fingerprint(&state.dataset);
                let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
                let changed_fraction = changed as f64 / state.dataset.len() as f64;
                if round > 1 && changed_fraction < opts.config.convergence_threshold {
                    state.converged = true;
                }
                let (transductive, test) = score_round(&state.dataset, model.as_ref(), RoundKind::LlmAnnotation, opts);
                state.records.push(RoundRecord {
                    round,
                    kind: RoundKind::LlmAnnotation,
                    labeled: state
                        .dataset
                        .samples
                        .iter()
                        .filter(|s| s.pseudo_label.is_some() && !s.ambiguous)
                        .count(),
                    ambiguous: state.dataset.samples.iter().filter(|s| s.ambiguous).count(),
                    clean: 0,
                    noisy: state.noisy_ids.len(),
                    annotator_calls: counter.calls.load(std::sync::atomic::Ordering::SeqCst),
                    changed_fraction: Some(changed_fraction),
                    transductive_accuracy: transductive,
                    test_accuracy: test,
                });
            }
            RoundKind::SlmDistillation => {
                let outcome =
                    run_slm_round(&mut state.dataset, model.as_ref(), opts.config, round)?;
                state.demo_pool = outcome.demo_pool;
                state.noisy_ids = outcome.noisy_ids;
                model = Some(outcome.model);
                state.has_model = true;
                let (transductive, test) = score_round(&state.dataset, model.as_ref(), RoundKind::SlmDistillation, opts);
                state.records.push(RoundRecord {
                    round,
                    kind: RoundKind::SlmDistillation,
                    labeled: state
                        .dataset
                        .samples
                        .iter()
                        .filter(|s| s.pseudo_label.is_some() && !s.ambiguous)
                        .count(),
                    ambiguous: state.dataset.samples.iter().filter(|s| s.ambiguous).count(),
                    clean: outcome.clean_count,
                    noisy: state.noisy_ids.len(),
                    annotator_calls: 0,
                    changed_fraction: None,
                    transductive_accuracy: transductive,
                    test_accuracy: test,
                });
            }
        }
        state.round = round;
        if let Some(dir) = opts.out_dir {
            let model_for_round = if round_kind(round) == RoundKind::SlmDistillation {
                model.as_ref()
            } else {
                None
            };
            checkpoint(dir, &mut manifest, &state, model_for_round)?;
        }
        if state.converged {
            break;
        }
    }

    if let Some(dir) = opts.out_dir {
        if state.round == last_round || state.converged {
            write_final_outputs(dir, &state, model.as_ref())?;
        }
    }
    Ok(LoopOutcome { state, model })
}

fn latest_model_round(state: &LoopState) -> Result<u32> {
    state
        .records
        .iter()
        .rev()
        .find(|r| r.kind == RoundKind::SlmDistillation)
        .map(|r| r.round)
        .ok_or_else(|| EngineError::Data("checkpoint claims a model but has no SLM round".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gaussian_fixture, mock_backend};
    use tempfile::tempdir;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.hidden_dim = 16;
        cfg.warmup_epochs = 3;
        cfg.total_epochs = 15;
        cfg.alpha_ramp_epochs = 5;
        cfg.batch_size = 16;
        cfg.q_prototypes = 6;
        cfg.k_medoids = 8;
        cfg.m = 4;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn initial_annotation_with_identity_noise_recovers_gold() {
        let fixture = gaussian_fixture(40, 0, 11);
        let backend = mock_backend(&fixture, 0.0, 0.0, 11).unwrap();
        let cfg = small_config();
        let mut dataset = fixture.train.clone();
        let pool = run_initial_annotation(&mut dataset, &backend, &cfg).unwrap();
        assert!(!pool.is_empty());
        let anns = annotations_of(&dataset);
        let report = transductive_accuracy(&fixture.gold, &anns, 2).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.total, 40);
        for s in &dataset.samples {
            assert_eq!(s.annotation_source, AnnotationSource::LlmInitial);
        }
    }

    #[test]
    fn slm_round_builds_pool_and_residual_partition() {
        let fixture = gaussian_fixture(60, 0, 5);
        let backend = mock_backend(&fixture, 0.2, 0.0, 5).unwrap();
        let cfg = small_config();
        let mut dataset = fixture.train.clone();
        run_initial_annotation(&mut dataset, &backend, &cfg).unwrap();
        let outcome = run_slm_round(&mut dataset, None, &cfg, 2).unwrap();
        assert!(!outcome.demo_pool.is_empty());
        // Pool entries and noisy residual partition the id space.
        let pool_ids: std::collections::BTreeSet<&str> = outcome
            .demo_pool
            .by_class
            .values()
            .flatten()
            .map(|e| e.id.as_str())
            .collect();
        for id in &outcome.noisy_ids {
            assert!(!pool_ids.contains(id.as_str()));
        }
        assert_eq!(outcome.demo_pool.round, 2);
        // Demo entries carry hidden representations of the new model.
        let entry = outcome.demo_pool.by_class.values().flatten().next().unwrap();
        let sample = dataset.sample_by_id(&entry.id).unwrap();
        assert_eq!(
            entry.retrieval_vec,
            outcome.model.hidden_repr(&sample.embedding).unwrap()
        );
    }

    #[test]
    fn full_loop_runs_all_rounds_with_correct_parity() {
        let fixture = gaussian_fixture(60, 20, 3);
        let backend = mock_backend(&fixture, 0.25, 0.05, 3).unwrap();
        let cfg = small_config();
        let outcome = run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &cfg,
                out_dir: None,
                resume: false,
                resume_round: None,
                stop_after: None,
                gold: Some(&fixture.gold),
                test: Some(&fixture.test),
            },
        )
        .unwrap();
        assert!(outcome.model.is_some());
        for r in &outcome.state.records {
            assert_eq!(r.kind, round_kind(r.round));
        }
        let last = outcome.state.records.last().unwrap();
        assert!(outcome.state.converged || last.round == 4);
        assert!(last.transductive_accuracy.unwrap() > 0.8);
    }

    #[test]
    fn loop_converges_early_with_noise_free_annotator() {
        let fixture = gaussian_fixture(40, 0, 9);
        let backend = mock_backend(&fixture, 0.0, 0.0, 9).unwrap();
        let mut cfg = small_config();
        cfg.num_loops = 3;
        let outcome = run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &cfg,
                out_dir: None,
                resume: false,
                resume_round: None,
                stop_after: None,
                gold: None,
                test: None,
            },
        )
        .unwrap();
        // Round 3 re-annotates the residual with good demos and changes
        // nothing, so the loop stops before round 6.
        assert!(outcome.state.converged);
        assert!(outcome.state.round < 6);
    }

    #[test]
    fn checkpoint_resume_reproduces_final_outputs_byte_identical() {
        let fixture = gaussian_fixture(50, 10, 13);
        let backend = mock_backend(&fixture, 0.2, 0.0, 13).unwrap();
        let cfg = small_config();

        let full_dir = tempdir().unwrap();
        run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &cfg,
                out_dir: Some(full_dir.path()),
                resume: false,
                resume_round: None,
                stop_after: None,
                gold: None,
                test: None,
            },
        )
        .unwrap();

        let split_dir = tempdir().unwrap();
        run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &cfg,
                out_dir: Some(split_dir.path()),
                resume: false,
                resume_round: None,
                stop_after: Some(2),
                gold: None,
                test: None,
            },
        )
        .unwrap();
        run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &cfg,
                out_dir: Some(split_dir.path()),
                resume: true,
                resume_round: None,
                stop_after: None,
                gold: None,
                test: None,
            },
        )
        .unwrap();

        for name in ["labels.jsonl", "model.bin", "summary.json", "metrics.txt"] {
            let a = std::fs::read(full_dir.path().join(name)).unwrap();
            let b = std::fs::read(split_dir.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after resume");
        }
    }

    #[test]
    fn resume_with_different_config_is_rejected() {
        let fixture = gaussian_fixture(40, 0, 2);
        let backend = mock_backend(&fixture, 0.1, 0.0, 2).unwrap();
        let cfg = small_config();
        let dir = tempdir().unwrap();
        run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &cfg,
                out_dir: Some(dir.path()),
                resume: false,
                resume_round: None,
                stop_after: Some(2),
                gold: None,
                test: None,
            },
        )
        .unwrap();
        let mut other = cfg.clone();
        other.tau = 0.9;
        let err = run_loop(
            &fixture.train,
            &LoopOptions {
                backend: &backend,
                config: &other,
                out_dir: Some(dir.path()),
                resume: true,
                resume_round: None,
                stop_after: None,
                gold: None,
                test: None,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("configuration"));
    }

    #[test]
    fn budget_too_small_for_classes_is_rejected() {
        let fixture = gaussian_fixture(10, 0, 4);
        let backend = mock_backend(&fixture, 0.1, 0.0, 4).unwrap();
        let mut cfg = small_config();
        cfg.budget_fraction_p = Some(5.0); // ceil(0.5) = 1 < 2 classes
        let mut dataset = fixture.train.clone();
        assert!(run_initial_annotation(&mut dataset, &backend, &cfg).is_err());
    }

    #[test]
    fn budgeted_round_annotates_exactly_the_budget() {
        let fixture = gaussian_fixture(50, 0, 6);
        let backend = mock_backend(&fixture, 0.1, 0.0, 6).unwrap();
        let mut cfg = small_config();
        cfg.budget_fraction_p = Some(10.0);
        let mut dataset = fixture.train.clone();
        backend.reset_calls();
        run_initial_annotation(&mut dataset, &backend, &cfg).unwrap();
        // One generation call plus exactly ceil(10% of 50) = 5 annotations.
        assert_eq!(backend.calls(), 6);
        let labeled = dataset.samples.iter().filter(|s| s.pseudo_label.is_some()).count();
        assert_eq!(labeled, 5);
    }
}
