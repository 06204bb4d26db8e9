//! Everything between the engine and the annotating language model: prompt
//! construction for generation and in-context labeling, response parsing via
//! the verbalizer, and the backend abstraction with a deterministic mock and
//! a minimal remote protocol.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Annotation, LabelSpace, RunConfig, Sample};
use crate::demo_pool::DemoPool;
use crate::error::{EngineError, Result};
use crate::retrieval::class_wise_retrieve;

pub const TEXT_SLOT: &str = "{text}";
pub const LABEL_SLOT: &str = "{label}";

/// Task instruction plus the example and query render formats. The example
/// format must contain both slots exactly once, the query format the text
/// slot exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub example_format: String,
    pub query_format: String,
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

impl PromptTemplate {
    pub fn new(instruction: String, example_format: String, query_format: String) -> Result<Self> {
        if count_occurrences(&example_format, TEXT_SLOT) != 1
            || count_occurrences(&example_format, LABEL_SLOT) != 1
        {
            return Err(EngineError::Config(
                "example_format must contain {text} and {label} exactly once".into(),
            ));
        }
        if count_occurrences(&query_format, TEXT_SLOT) != 1 {
            return Err(EngineError::Config(
                "query_format must contain {text} exactly once".into(),
            ));
        }
        Ok(Self {
            instruction,
            example_format,
            query_format,
        })
    }

    /// Default annotation template for a classification task.
    pub fn annotation_default(label_space: &LabelSpace) -> Self {
        let tokens = label_space.tokens().join("', '");
        Self {
            instruction: format!(
                "You are a helpful assistant for a text classification task. \
                 Classify the given text into one of the categories: '{tokens}'. \
                 Answer in a single line with exactly one category."
            ),
            example_format: "Text: {text}\nLabel: {label}\n\n".into(),
            query_format: "Text: {text}\nLabel:".into(),
        }
    }

    /// Default generation template asking for one JSON object per line.
    pub fn generation_default(label_space: &LabelSpace) -> Self {
        let tokens = label_space.tokens().join("', '");
        Self {
            instruction: format!(
                "You are required to produce labeled examples for a text \
                 classification task with categories '{tokens}'. Mimic the style \
                 of the unlabeled samples below. Reply with one JSON object per \
                 line of the form {{\"text\": \"...\", \"label\": \"...\"}}."
            ),
            example_format: "{\"text\": {text}, \"label\": {label}}".into(),
            query_format: "{\"text\": {text}}".into(),
        }
    }
}

/// Wire request of the remote annotator protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub instruction: String,
    pub prompt: String,
    pub max_tokens: usize,
}

/// Wire response of the remote annotator protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

pub trait AnnotatorBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

/// Generation prompt: instruction, the verbalized labels, and the Q
/// prototype texts in order. Prototype texts are JSON-fenced so any
/// delimiter they contain survives the round trip through the response
/// parser.
pub fn build_generation_prompt(
    template: &PromptTemplate,
    prototypes: &[&Sample],
    label_space: &LabelSpace,
) -> Result<String> {
    if prototypes.is_empty() {
        return Err(EngineError::Data(
            "build_generation_prompt: no prototypes given".into(),
        ));
    }
    let mut out = String::new();
    out.push_str(&template.instruction);
    out.push_str("\n\nCategories: ");
    out.push_str(&label_space.tokens().join(", "));
    out.push_str("\n\nUnlabeled samples:\n");
    for p in prototypes {
        let fenced = serde_json::to_string(&p.text)?;
        out.push_str(&template.query_format.replace(TEXT_SLOT, &fenced));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct GeneratedLine {
    text: String,
    label: String,
}

/// Parses the generation response into (text, class) pairs. Malformed lines
/// are skipped and counted; zero parseable pairs is an error.
pub fn parse_generated_examples(
    response: &str,
    label_space: &LabelSpace,
) -> Result<(Vec<(String, usize)>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for line in response.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<GeneratedLine>(line) {
            Ok(gen) => match token_class(&gen.label, label_space) {
                Some(class) => pairs.push((gen.text, class)),
                None => skipped += 1,
            },
            Err(_) => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(EngineError::EmptyGeneration);
    }
    Ok((pairs, skipped))
}

/// Demonstrations in the given order, each rendered with its verbalized
/// label, followed by the query. Zero demonstrations yields a zero-shot
/// prompt of instruction plus query.
pub fn build_icl_prompt(
    query_text: &str,
    demos: &[(&str, usize)],
    template: &PromptTemplate,
    label_space: &LabelSpace,
) -> String {
    let mut out = String::new();
    for (text, class) in demos {
        out.push_str(
            &template
                .example_format
                .replace(TEXT_SLOT, text)
                .replace(LABEL_SLOT, label_space.token(*class)),
        );
    }
    out.push_str(&template.query_format.replace(TEXT_SLOT, query_text));
    out
}

fn normalize(response: &str) -> String {
    response
        .trim()
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim()
        .to_lowercase()
}

fn token_class(token: &str, label_space: &LabelSpace) -> Option<usize> {
    let norm = normalize(token);
    label_space
        .tokens()
        .iter()
        .position(|t| t.to_lowercase() == norm)
}

fn contains_whole_word(haystack: &str, needle: &str) -> bool {
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(needle) {
        let abs = start + pos;
        let before_ok = abs == 0
            || !haystack[..abs]
                .chars()
                .next_back()
                .map(|c| c.is_alphanumeric())
                .unwrap_or(false);
        let end = abs + needle.len();
        let after_ok = end == haystack.len()
            || !haystack[end..]
                .chars()
                .next()
                .map(|c| c.is_alphanumeric())
                .unwrap_or(false);
        if before_ok && after_ok {
            return true;
        }
        start = abs + needle.len().max(1);
        if start >= haystack.len() {
            break;
        }
    }
    false
}

/// Maps a free-text response onto a class: normalization plus exact match
/// first, then the whole-word rule. Anything that matches zero or more than
/// one verbalizer token is AMBIGUOUS.
pub fn parse_label_response(response: &str, label_space: &LabelSpace) -> Annotation {
    let norm = normalize(response);
    if let Some(class) = label_space
        .tokens()
        .iter()
        .position(|t| t.to_lowercase() == norm)
    {
        return Annotation::Class(class);
    }
    let present: Vec<usize> = label_space
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| contains_whole_word(&norm, &t.to_lowercase()))
        .map(|(i, _)| i)
        .collect();
    match present.as_slice() {
        [single] => Annotation::Class(*single),
        _ => Annotation::Ambiguous,
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

/// Row-stochastic confusion matrix plus an ambiguity rate; drives the mock
/// annotator so the loop is runnable and testable offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockNoiseModel {
    pub confusion: Vec<Vec<f64>>,
    pub ambiguity_rate: f64,
    pub seed: u64,
}

impl MockNoiseModel {
    pub fn validate(&self) -> Result<()> {
        let c = self.confusion.len();
        for row in &self.confusion {
            if row.len() != c {
                return Err(EngineError::Config("confusion matrix must be square".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(EngineError::Config(format!(
                    "confusion matrix rows must be stochastic, row sums to {sum}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.ambiguity_rate) {
            return Err(EngineError::Config(
                "ambiguity_rate must be in [0,1)".into(),
            ));
        }
        Ok(())
    }

    pub fn identity(num_classes: usize, seed: u64) -> Self {
        let confusion = (0..num_classes)
            .map(|i| (0..num_classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            confusion,
            ambiguity_rate: 0.0,
            seed,
        }
    }

    /// Correct with probability 1 - noise, uniform over the other classes
    /// otherwise.
    pub fn symmetric(num_classes: usize, noise: f64, seed: u64) -> Self {
        let off = noise / (num_classes - 1) as f64;
        let confusion = (0..num_classes)
            .map(|i| {
                (0..num_classes)
                    .map(|j| if i == j { 1.0 - noise } else { off })
                    .collect()
            })
            .collect();
        Self {
            confusion,
            ambiguity_rate: 0.0,
            seed,
        }
    }

    fn sample_label(&self, true_class: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.confusion[true_class];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    }

    fn scaled(&self, scale: f64) -> Self {
        // Interpolate toward the identity: row' = scale * row + (1-scale) * e_i.
        let confusion = self
            .confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, p)| scale * p + if i == j { 1.0 - scale } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            confusion,
            ambiguity_rate: self.ambiguity_rate * scale,
            seed: self.seed,
        }
    }
}

/// When enabled, annotation noise drops once the demonstrations shown in the
/// prompt are mostly correct, modeling an annotator that benefits from good
/// in-context examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSensitivity {
    /// Fraction of correct demonstrations required to trigger the boost.
    pub min_correct_fraction: f64,
    /// Multiplier on the off-diagonal confusion mass when triggered (0 = perfect).
    pub boosted_noise_scale: f64,
}

/// Deterministic offline annotator. It knows the true label of every text it
/// was configured with and corrupts it through the noise model; per-sample
/// randomness is keyed by (seed, query text), so results are independent of
/// request order.
pub struct MockBackend {
    label_space: LabelSpace,
    truth_by_text: BTreeMap<String, usize>,
    noise: MockNoiseModel,
    demo_sensitivity: Option<DemoSensitivity>,
    generation_instruction: String,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(
        label_space: LabelSpace,
        truth_by_text: BTreeMap<String, usize>,
        noise: MockNoiseModel,
        demo_sensitivity: Option<DemoSensitivity>,
        generation_instruction: String,
    ) -> Result<Self> {
        noise.validate()?;
        Ok(Self {
            label_space,
            truth_by_text,
            noise,
            demo_sensitivity,
            generation_instruction,
            calls: AtomicU64::new(0),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    fn rng_for(&self, tag: &str, text: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.noise.seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed))
    }

    /// Known texts occurring in the prompt, ordered by byte offset.
    fn known_texts_in<'a>(&'a self, prompt: &str) -> Vec<(usize, &'a str, usize)> {
        let mut found: Vec<(usize, &str, usize)> = self
            .truth_by_text
            .iter()
            .filter_map(|(text, class)| prompt.rfind(text.as_str()).map(|off| (off, text.as_str(), *class)))
            .collect();
        found.sort_by_key(|(off, _, _)| *off);
        found
    }

    fn generate(&self, prompt: &str) -> String {
        let mut lines = Vec::new();
        for (_, text, class) in self.known_texts_in(prompt) {
            let mut rng = self.rng_for("gen", text);
            let label = self.noise.sample_label(class, &mut rng);
            lines.push(format!(
                "{{\"text\": {}, \"label\": {}}}",
                serde_json::to_string(text).unwrap(),
                serde_json::to_string(self.label_space.token(label)).unwrap()
            ));
        }
        lines.join("\n")
    }

    fn annotate(&self, prompt: &str) -> String {
        let found = self.known_texts_in(prompt);
        let Some(&(query_off, query_text, query_class)) = found.last() else {
            return "unclear".into();
        };
        let mut noise = self.noise.clone();
        if let Some(sens) = &self.demo_sensitivity {
            let demos: Vec<(usize, &str, usize)> = found
                .iter()
                .filter(|(off, _, _)| *off < query_off)
                .copied()
                .collect();
            if !demos.is_empty() {
                let mut correct = 0usize;
                for (i, (off, text, class)) in demos.iter().enumerate() {
                    let start = off + text.len();
                    let end = demos
                        .get(i + 1)
                        .map(|(next_off, _, _)| *next_off)
                        .unwrap_or(query_off);
                    let window = &prompt[start..end.min(prompt.len())].to_lowercase();
                    let rendered: Option<usize> = self
                        .label_space
                        .tokens()
                        .iter()
                        .filter_map(|t| window.find(&t.to_lowercase()).map(|p| (p, t)))
                        .min_by_key(|(p, _)| *p)
                        .and_then(|(_, t)| self.label_space.class_for_token(t));
                    if rendered == Some(*class) {
                        correct += 1;
                    }
                }
                if correct as f64 / demos.len() as f64 >= sens.min_correct_fraction {
                    noise = noise.scaled(sens.boosted_noise_scale);
                }
            }
        }
        let mut rng = self.rng_for("ann", query_text);
        let u: f64 = rng.random();
        if u < noise.ambiguity_rate {
            let other = (query_class + 1) % self.label_space.num_classes();
            return format!(
                "it could be {} or {}",
                self.label_space.token(query_class),
                self.label_space.token(other)
            );
        }
        self.label_space
            .token(noise.sample_label(query_class, &mut rng))
            .to_string()
    }
}

impl AnnotatorBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if request.instruction == self.generation_instruction {
            Ok(self.generate(&request.prompt))
        } else {
            Ok(self.annotate(&request.prompt))
        }
    }
}

/// Replays a fixed list of responses; for tests that need exact control.
pub struct ScriptedBackend {
    responses: Mutex<std::collections::VecDeque<String>>,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses: Mutex::new(responses.into()),
        }
    }
}

impl AnnotatorBackend for ScriptedBackend {
    fn complete(&self, _request: &CompletionRequest) -> Result<String> {
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| EngineError::Backend("scripted backend exhausted".into()))
    }
}

/// Minimal HTTP backend: POST the request JSON, read `{"text": ...}` back.
pub struct RemoteBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(url: String, api_key: Option<String>) -> Self {
        Self {
            url,
            api_key,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl AnnotatorBackend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let mut req = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EngineError::Backend(e.to_string()))?
            .error_for_status()
            .map_err(|e| EngineError::Backend(e.to_string()))?;
        let body: CompletionResponse = resp
            .json()
            .map_err(|e| EngineError::Backend(e.to_string()))?;
        Ok(body.text)
    }
}

// ---------------------------------------------------------------------------
// Batch annotation
// ---------------------------------------------------------------------------

/// One sample to annotate, with the vector used to retrieve demonstrations.
#[derive(Debug, Clone)]
pub struct AnnotationQuery {
    pub id: String,
    pub text: String,
    pub retrieval_vec: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BatchAnnotations {
    pub by_id: BTreeMap<String, Annotation>,
    pub failed: Vec<String>,
}

const MAX_ATTEMPTS: usize = 3;
const LABEL_MAX_TOKENS: usize = 16;

pub fn complete_with_retry(
    backend: &dyn AnnotatorBackend,
    request: &CompletionRequest,
) -> Result<String> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        match backend.complete(request) {
            Ok(text) => return Ok(text),
            Err(e) => {
                last = Some(e);
                if attempt + 1 < MAX_ATTEMPTS {
                    std::thread::sleep(std::time::Duration::from_millis(50 << attempt));
                }
            }
        }
    }
    Err(last.unwrap())
}

/// Annotates every query: per-sample class-wise retrieval, prompt assembly,
/// backend call with retries, response parsing. Requests are issued by up to
/// `annotator_parallelism` worker threads; results are keyed by id, so the
/// outcome is order-independent. Individual failures mark the sample and the
/// run continues unless more than half the batch fails.
pub fn annotate_batch(
    queries: &[AnnotationQuery],
    demo_pool: Option<&DemoPool>,
    template: &PromptTemplate,
    label_space: &LabelSpace,
    backend: &dyn AnnotatorBackend,
    config: &RunConfig,
) -> Result<BatchAnnotations> {
    let results: Mutex<Vec<(String, std::result::Result<Annotation, String>)>> =
        Mutex::new(Vec::with_capacity(queries.len()));
    let next = AtomicUsize::new(0);
    let workers = config.annotator_parallelism.max(1).min(queries.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= queries.len() {
                    break;
                }
                let q = &queries[i];
                let outcome = annotate_one(q, demo_pool, template, label_space, backend, config);
                results
                    .lock()
                    .unwrap()
                    .push((q.id.clone(), outcome.map_err(|e| e.to_string())));
            });
        }
    });

    let mut out = BatchAnnotations::default();
    for (id, res) in results.into_inner().unwrap() {
        match res {
            Ok(ann) => {
                out.by_id.insert(id, ann);
            }
            Err(_) => out.failed.push(id),
        }
    }
    out.failed.sort();
    if !queries.is_empty() && out.failed.len() * 2 > queries.len() {
        return Err(EngineError::Backend(format!(
            "{} of {} annotation requests failed",
            out.failed.len(),
            queries.len()
        )));
    }
    Ok(out)
}

fn annotate_one(
    query: &AnnotationQuery,
    demo_pool: Option<&DemoPool>,
    template: &PromptTemplate,
    label_space: &LabelSpace,
    backend: &dyn AnnotatorBackend,
    config: &RunConfig,
) -> Result<Annotation> {
    let demos: Vec<(&str, usize)> = match demo_pool {
        Some(pool) if !pool.is_empty() => class_wise_retrieve(&query.retrieval_vec, pool, config.m)?
            .into_iter()
            .map(|e| (e.text.as_str(), e.class))
            .collect(),
        _ => Vec::new(),
    };
    let prompt = build_icl_prompt(&query.text, &demos, template, label_space);
    let request = CompletionRequest {
        instruction: template.instruction.clone(),
        prompt,
        max_tokens: LABEL_MAX_TOKENS,
    };
    let response = complete_with_retry(backend, &request)?;
    Ok(parse_label_response(&response, label_space))
}
