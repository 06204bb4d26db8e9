//! Synthetic task fixture: two well-separated Gaussian blobs with unique
//! surface texts, plus the offline annotator wired to their true labels.
//! The CLI `simulate` subcommand and the integration suite share this setup.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::annotator::{DemoSensitivity, MockBackend, MockNoiseModel, PromptTemplate};
use crate::data::{Dataset, LabelSpace, Sample, Split};
use crate::error::Result;
use crate::eval::GoldStore;

const CLASS_WORDS: [&str; 2] = ["encouraging", "dismal"];

/// Everything needed to run the loop offline and score it afterwards.
pub struct SimFixture {
    pub train: Dataset,
    pub test: Dataset,
    /// Gold labels for train and test ids.
    pub gold: GoldStore,
    /// True class per surface text, for configuring the mock annotator.
    pub truth_by_text: BTreeMap<String, usize>,
}

fn make_samples(
    n: usize,
    offset: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> (Vec<Sample>, Vec<usize>) {
    // Center distance 2*sqrt(2) with sigma = sqrt(2)/2: the blobs sit 4
    // sigma apart, so a few percent of points fall on the wrong side.
    let normal = Normal::new(0.0, std::f64::consts::SQRT_2 / 2.0).unwrap();
    let mut samples = Vec::with_capacity(n);
    let mut gold = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let center = if class == 0 { -1.0 } else { 1.0 };
        let embedding = vec![
            center + normal.sample(rng),
            -center + normal.sample(rng),
        ];
        let idx = offset + i;
        let id = format!("{prefix}{idx:05}");
        // Fixed-width numbering keeps any text from being a substring of
        // another, which the offline annotator's prompt scan relies on.
        let text = format!(
            "case {idx:05}: the quarterly report reads {}",
            CLASS_WORDS[class]
        );
        samples.push(Sample::new(id, text, embedding));
        gold.push(class);
    }
    (samples, gold)
}

/// Two-class blob data with `n_train` + `n_test` points whose class centers
/// sit 4 sigma apart, deterministic in `seed`.
pub fn gaussian_fixture(n_train: usize, n_test: usize, seed: u64) -> SimFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = LabelSpace::binary_sentiment();
    let (train_samples, train_gold) = make_samples(n_train, 0, "tr", &mut rng);
    let (test_samples, test_gold) = make_samples(n_test, n_train, "te", &mut rng);

    let mut gold = GoldStore::default();
    let mut truth_by_text = BTreeMap::new();
    for (s, g) in train_samples.iter().zip(&train_gold) {
        gold.insert(&s.id, *g);
        truth_by_text.insert(s.text.clone(), *g);
    }
    for (s, g) in test_samples.iter().zip(&test_gold) {
        gold.insert(&s.id, *g);
        truth_by_text.insert(s.text.clone(), *g);
    }

    SimFixture {
        train: Dataset::new(train_samples, space.clone(), Split::Train),
        test: Dataset::new(test_samples, space, Split::Test),
        gold,
        truth_by_text,
    }
}

/// The default offline annotator for a fixture: symmetric label noise that
/// drops sharply once the in-context demonstrations are mostly correct.
pub fn mock_backend(
    fixture: &SimFixture,
    noise: f64,
    ambiguity_rate: f64,
    seed: u64,
) -> Result<MockBackend> {
    let space = fixture.train.label_space.clone();
    let mut noise_model = MockNoiseModel::symmetric(space.num_classes(), noise, seed);
    noise_model.ambiguity_rate = ambiguity_rate;
    let generation_instruction = PromptTemplate::generation_default(&space).instruction;
    MockBackend::new(
        space,
        fixture.truth_by_text.clone(),
        noise_model,
        Some(DemoSensitivity {
            min_correct_fraction: 0.8,
            boosted_noise_scale: 0.1,
        }),
        generation_instruction,
    )
}

/// Deterministic unit-norm stand-in embedding for a text that has no
/// precomputed vector (e.g. freshly generated examples).
pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    let mut v: Vec<f64> = (0..dim)
        .map(|i| {
            let b = digest[i % digest.len()];
            (b as f64 / 255.0) * 2.0 - 1.0
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}
