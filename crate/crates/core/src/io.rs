//! On-disk formats: JSONL datasets, key=value run configs, binary model
//! checkpoints and the checkpoint directory manifest. All writes go through
//! a temp-file-then-rename step so a crash never leaves a half-written file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Annotation, Dataset, LabelSpace, RunConfig, Sample, Split};
use crate::error::{EngineError, Result};
use crate::eval::GoldStore;
use crate::slm::SmallModel;

const MODEL_MAGIC: &[u8] = b"freeal-model v1\n";

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    embedding: Vec<f64>,
    #[serde(default)]
    gold: Option<serde_json::Value>,
    #[serde(default)]
    pseudo_label: Option<usize>,
    #[serde(default)]
    ambiguous: Option<bool>,
}

#[derive(Debug, Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    text: &'a str,
    embedding: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    pseudo_label: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    ambiguous: bool,
}

/// Reads one sample per line. Gold labels are split off into the sealed
/// store and never enter the dataset. Errors carry the 1-based line number.
pub fn load_jsonl_dataset(
    path: &Path,
    label_space: &LabelSpace,
    split: Split,
) -> Result<(Dataset, GoldStore)> {
    let file = fs::File::open(path)
        .map_err(|e| EngineError::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut gold = GoldStore::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| {
            EngineError::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        if let Some(raw) = &rec.gold {
            let class = parse_gold(raw, label_space).ok_or_else(|| {
                EngineError::Data(format!(
                    "{} line {}: gold label {raw} outside label space",
                    path.display(),
                    lineno + 1
                ))
            })?;
            gold.insert(&rec.id, class);
        }
        let mut sample = Sample::new(rec.id, rec.text, rec.embedding);
        sample.pseudo_label = rec.pseudo_label;
        sample.ambiguous = rec.ambiguous.unwrap_or(false);
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(EngineError::Data(format!("{}: no samples", path.display())));
    }
    Ok((Dataset::new(samples, label_space.clone(), split), gold))
}

/// Gold labels may be a class index, a class name, or a verbalizer token.
fn parse_gold(raw: &serde_json::Value, label_space: &LabelSpace) -> Option<usize> {
    match raw {
        serde_json::Value::Number(n) => {
            let idx = n.as_u64()? as usize;
            (idx < label_space.num_classes()).then_some(idx)
        }
        serde_json::Value::String(s) => label_space
            .class_index(s)
            .or_else(|| label_space.class_for_token(s)),
        _ => None,
    }
}

/// Text-to-class truth table from a dataset file's gold column, used only to
/// configure the offline annotator as a stand-in oracle. Lines without gold
/// are errors here, since the mock cannot answer for them.
pub fn load_text_truth(
    path: &Path,
    label_space: &LabelSpace,
) -> Result<BTreeMap<String, usize>> {
    let file = fs::File::open(path)
        .map_err(|e| EngineError::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut truth = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| {
            EngineError::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        let raw = rec.gold.as_ref().ok_or_else(|| {
            EngineError::Data(format!(
                "{} line {}: mock backend needs a gold label for every sample",
                path.display(),
                lineno + 1
            ))
        })?;
        let class = parse_gold(raw, label_space).ok_or_else(|| {
            EngineError::Data(format!(
                "{} line {}: gold label {raw} outside label space",
                path.display(),
                lineno + 1
            ))
        })?;
        truth.insert(rec.text, class);
    }
    Ok(truth)
}

/// Writes a dataset back out, carrying pseudo-labels and ambiguity flags.
/// Gold labels are not in the dataset and therefore never written.
pub fn write_jsonl_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    for s in &dataset.samples {
        let rec = OutRecord {
            id: &s.id,
            text: &s.text,
            embedding: &s.embedding,
            pseudo_label: s.pseudo_label,
            ambiguous: s.ambiguous,
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

/// The pseudo-labels of a dataset as annotation verdicts, for scoring.
pub fn annotations_of(dataset: &Dataset) -> BTreeMap<String, Annotation> {
    dataset
        .samples
        .iter()
        .filter_map(|s| {
            if s.ambiguous {
                Some((s.id.clone(), Annotation::Ambiguous))
            } else {
                s.pseudo_label.map(|l| (s.id.clone(), Annotation::Class(l)))
            }
        })
        .collect()
}

/// key=value per line; '#' starts a comment; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            EngineError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn std::fmt::Display| {
            EngineError::Config(format!("line {}: {key}: {e}", lineno + 1))
        };
        match key {
            "m" => cfg.m = value.parse().map_err(|e| bad(&e))?,
            "q_prototypes" => cfg.q_prototypes = value.parse().map_err(|e| bad(&e))?,
            "tau" => cfg.tau = value.parse().map_err(|e| bad(&e))?,
            "r_percent" => cfg.r_percent = value.parse().map_err(|e| bad(&e))?,
            "k_medoids" => cfg.k_medoids = value.parse().map_err(|e| bad(&e))?,
            "varsigma" => cfg.varsigma = value.parse().map_err(|e| bad(&e))?,
            "warmup_epochs" => cfg.warmup_epochs = value.parse().map_err(|e| bad(&e))?,
            "total_epochs" => cfg.total_epochs = value.parse().map_err(|e| bad(&e))?,
            "alpha_ramp_epochs" => cfg.alpha_ramp_epochs = value.parse().map_err(|e| bad(&e))?,
            "learning_rate" => cfg.learning_rate = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
            "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
            "num_loops" => cfg.num_loops = value.parse().map_err(|e| bad(&e))?,
            "annotator_parallelism" => {
                cfg.annotator_parallelism = value.parse().map_err(|e| bad(&e))?
            }
            "convergence_threshold" => {
                cfg.convergence_threshold = value.parse().map_err(|e| bad(&e))?
            }
            "mixup" => cfg.mixup = value.parse().map_err(|e| bad(&e))?,
            "augment_sigma" => cfg.augment_sigma = value.parse().map_err(|e| bad(&e))?,
            "budget_fraction_p" => {
                cfg.budget_fraction_p = Some(value.parse().map_err(|e| bad(&e))?)
            }
            other => {
                return Err(EngineError::Config(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Binary model checkpoint: a one-line text header, the three dimensions as
/// little-endian u64, then all parameters as little-endian f64 in w1, b1,
/// w2, b2 order.
pub fn save_model(path: &Path, model: &SmallModel) -> Result<()> {
    let mut buf = Vec::with_capacity(MODEL_MAGIC.len() + 24 + model.num_params() * 8);
    buf.extend_from_slice(MODEL_MAGIC);
    for dim in [model.d_in, model.d_h, model.num_classes] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for block in [&model.w1, &model.b1, &model.w2, &model.b2] {
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_model(path: &Path) -> Result<SmallModel> {
    let mut file = fs::File::open(path)
        .map_err(|e| EngineError::Data(format!("{}: {e}", path.display())))?;
    let mut magic = vec![0u8; MODEL_MAGIC.len()];
    file.read_exact(&mut magic)
        .map_err(|_| EngineError::Data(format!("{}: truncated header", path.display())))?;
    if magic != MODEL_MAGIC {
        return Err(EngineError::Data(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let read_u64 = |f: &mut fs::File| -> Result<u64> {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)
            .map_err(|_| EngineError::Data(format!("{}: truncated", path.display())))?;
        Ok(u64::from_le_bytes(b))
    };
    let d_in = read_u64(&mut file)? as usize;
    let d_h = read_u64(&mut file)? as usize;
    let num_classes = read_u64(&mut file)? as usize;
    let mut model = SmallModel::zeros(d_in, d_h, num_classes);
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() != model.num_params() * 8 {
        return Err(EngineError::Data(format!(
            "{}: expected {} parameter bytes, found {}",
            path.display(),
            model.num_params() * 8,
            rest.len()
        )));
    }
    let mut chunks = rest.chunks_exact(8);
    for block in [&mut model.w1, &mut model.b1, &mut model.w2, &mut model.b2] {
        for v in block.iter_mut() {
            let c = chunks.next().unwrap();
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(model)
}

/// Write to `<path>.tmp` in the same directory, then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(
        path.extension()
            .map(|e| format!("{}.tmp", e.to_string_lossy()))
            .unwrap_or_else(|| "tmp".to_string()),
    );
    {
        let mut f = fs::File::create(&tmp)
            .map_err(|e| EngineError::Io(std::io::Error::other(format!("{}: {e}", tmp.display()))))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Index of a checkpoint directory. File hashes let a resumed run verify it
/// is continuing from exactly the state it thinks it is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub rounds_completed: u32,
    pub converged: bool,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            version: 1,
            seed: config.seed,
            config: config.clone(),
            rounds_completed: 0,
            converged: false,
            files: BTreeMap::new(),
        }
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let body = serde_json::to_vec_pretty(manifest)?;
    atomic_write(&manifest_path(dir), &body)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path)
        .map_err(|e| EngineError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Record a file in the manifest under its directory-relative name.
pub fn record_file(manifest: &mut Manifest, dir: &Path, name: &str) -> Result<()> {
    let hash = hash_file(&dir.join(name))?;
    manifest.files.insert(name.to_string(), hash);
    Ok(())
}

/// Verify every file in the manifest is present with the recorded hash.
pub fn verify_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    for (name, expect) in &manifest.files {
        let got = hash_file(&dir.join(name))
            .map_err(|_| EngineError::Data(format!("checkpoint file missing: {name}")))?;
        if &got != expect {
            return Err(EngineError::Data(format!(
                "checkpoint file corrupted: {name}"
            )));
        }
    }
    Ok(())
}
