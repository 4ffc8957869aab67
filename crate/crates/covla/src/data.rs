//! Synthetic multimodal posts with controllable contextual ambiguity,
//! modality dominance, and cross-modal conflict.
//!
//! The vocabulary is laid out as [UNK | background | per-class pools |
//! per-class-pair pools]. Clean samples draw signature tokens from their
//! class pool; ambiguous samples draw from a pool shared by two classes,
//! so their text alone cannot decide the label; vision-dominant samples
//! carry background-only text. Conflict samples put one class in the text
//! and a different one in the image (the image is the truthful side).
//!
//! Visual regions are raw descriptors around a per-class centroid; each
//! sample mixes a few informative regions with isotropic distractors, so
//! region selection genuinely matters.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;
use crate::seeds;

/// Reserved token id for unknown / dropped tokens.
pub const UNK_TOKEN: usize = 0;

/// Norm of every class centroid in raw descriptor space.
const CENTROID_NORM: f64 = 2.0;
/// Spread of uninformative distractor regions around the origin. Louder
/// than the centroid signal share an unweighted region mean retains, so
/// region selection carries real information.
const DISTRACTOR_SIGMA: f64 = 0.8;
/// Probability that a token carries class signal rather than background.
const SIGNAL_TOKEN_P: f64 = 0.8;

pub const DEFAULT_CATEGORIES: [&str; 5] = ["home", "office", "café", "gym", "park"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("post {id}: {msg}")]
    InvalidPost { id: String, msg: String },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One multimodal post: a token sequence, raw visual region descriptors,
/// and a category label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalPost {
    pub id: String,
    pub tokens: Vec<usize>,
    pub regions: Vec<Vec<f64>>,
    pub label: usize,
}

impl MultimodalPost {
    pub fn validate(&self, n_classes: usize, d_raw: usize) -> Result<(), DataError> {
        let fail = |msg: String| DataError::InvalidPost {
            id: self.id.clone(),
            msg,
        };
        if self.tokens.is_empty() {
            return Err(fail("empty token sequence".into()));
        }
        if self.regions.is_empty() {
            return Err(fail("no visual regions".into()));
        }
        if self.label >= n_classes {
            return Err(fail(format!(
                "label {} out of range for {} categories",
                self.label, n_classes
            )));
        }
        for r in &self.regions {
            if r.len() != d_raw {
                return Err(fail(format!(
                    "descriptor dimension {} does not match d_raw {}",
                    r.len(),
                    d_raw
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_categories: usize,
    pub vocab_size: usize,
    pub d_raw: usize,
    /// Inclusive token-count range per post.
    pub n_tokens_range: (usize, usize),
    /// Inclusive region-count range per post.
    pub n_regions_range: (usize, usize),
    /// Fraction of samples whose text is consistent with at least two labels.
    pub ambiguity_rate: f64,
    /// Probability the informative signal sits in the visual modality only.
    pub dominance: f64,
    /// Fraction of samples with deliberately contradictory modalities.
    pub conflict_rate: f64,
    /// Descriptor noise around class centroids.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 2000,
            n_categories: 5,
            vocab_size: 120,
            d_raw: 16,
            n_tokens_range: (4, 10),
            n_regions_range: (3, 6),
            ambiguity_rate: 0.5,
            dominance: 0.5,
            conflict_rate: 0.1,
            noise_sigma: 0.75,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    /// Smallest vocabulary holding UNK plus one token per class pool and
    /// per class-pair pool.
    pub fn min_vocab(n_categories: usize) -> usize {
        1 + n_categories + n_categories * (n_categories - 1) / 2
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_categories < 2 {
            return err(format!("need at least 2 categories, got {}", self.n_categories));
        }
        if self.n_samples < self.n_categories {
            return err(format!(
                "n_samples {} below n_categories {}",
                self.n_samples, self.n_categories
            ));
        }
        for (name, v) in [
            ("ambiguity_rate", self.ambiguity_rate),
            ("dominance", self.dominance),
            ("conflict_rate", self.conflict_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.noise_sigma < 0.0 {
            return err(format!("noise_sigma {} negative", self.noise_sigma));
        }
        if self.d_raw == 0 {
            return err("d_raw must be positive".into());
        }
        let (tl, th) = self.n_tokens_range;
        let (rl, rh) = self.n_regions_range;
        if tl < 1 || tl > th {
            return err(format!("bad token range ({tl}, {th})"));
        }
        if rl < 1 || rl > rh {
            return err(format!("bad region range ({rl}, {rh})"));
        }
        if self.vocab_size < Self::min_vocab(self.n_categories) {
            return err(format!(
                "vocab_size {} below minimum {} for {} categories",
                self.vocab_size,
                Self::min_vocab(self.n_categories),
                self.n_categories
            ));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        if self.n_categories == DEFAULT_CATEGORIES.len() {
            DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.n_categories)
                .map(|i| format!("category-{i}"))
                .collect()
        }
    }
}

/// Token-id layout derived from a spec: UNK, background, class pools,
/// class-pair pools.
pub struct VocabLayout {
    pool_size: usize,
    background: usize,
    n_categories: usize,
}

impl VocabLayout {
    pub fn new(spec: &DatasetSpec) -> Self {
        let c = spec.n_categories;
        let n_pools = c + c * (c - 1) / 2;
        let avail = spec.vocab_size - 1;
        // leave roughly two pools' worth of ids for background words
        let mut pool_size = (avail / (n_pools + 2)).max(1);
        if pool_size * n_pools > avail {
            pool_size = avail / n_pools;
        }
        let background = avail - pool_size * n_pools;
        VocabLayout {
            pool_size,
            background,
            n_categories: c,
        }
    }

    pub fn background_range(&self) -> std::ops::Range<usize> {
        1..1 + self.background
    }

    pub fn class_pool(&self, c: usize) -> std::ops::Range<usize> {
        let start = 1 + self.background + c * self.pool_size;
        start..start + self.pool_size
    }

    /// Pool of tokens shared by the unordered class pair {a, b}.
    pub fn pair_pool(&self, a: usize, b: usize) -> std::ops::Range<usize> {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        // index of (lo, hi) in the row-major upper-triangle enumeration
        let idx = lo * self.n_categories - lo * (lo + 1) / 2 + (hi - lo - 1);
        let start = 1 + self.background + (self.n_categories + idx) * self.pool_size;
        start..start + self.pool_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStyle {
    Clean,
    Ambiguous,
    VisionOnly,
    Conflict,
}

/// A generated post plus its split assignment and conflict flag (the
/// only generation metadata that survives the dataset file format).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub post: MultimodalPost,
    pub split: Split,
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub categories: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Per-sample construction record, available only from the generator.
#[derive(Debug, Clone)]
pub struct GenerationDetail {
    pub style: SampleStyle,
    /// Label the text signals, when the text carries signal at all.
    pub text_label: Option<usize>,
    /// Label the visual regions signal (always the truthful one).
    pub vision_label: usize,
}

pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub details: Vec<GenerationDetail>,
}

fn draw_from(rng: &mut impl Rng, range: std::ops::Range<usize>) -> usize {
    rng.gen_range(range)
}

fn gaussian_vec(rng: &mut impl Rng, d: usize, sigma: f64) -> Vec<f64> {
    (0..d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Class centroids in raw descriptor space, deterministic in the seed.
pub fn class_centroids(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(seeds::derive(spec.seed, "datagen/centroids"));
    (0..spec.n_categories)
        .map(|_| {
            let v = gaussian_vec(&mut rng, spec.d_raw, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * CENTROID_NORM / norm).collect()
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<GeneratedDataset, DataError> {
    spec.validate()?;
    let vocab = VocabLayout::new(spec);
    let centroids = class_centroids(spec);
    let mut rng = seeds::rng(seeds::derive(spec.seed, "datagen/samples"));
    let c = spec.n_categories;

    let mut posts = Vec::with_capacity(spec.n_samples);
    let mut details = Vec::with_capacity(spec.n_samples);

    for i in 0..spec.n_samples {
        let label = i % c;
        let style = {
            if rng.gen_range(0.0..1.0) < spec.conflict_rate {
                SampleStyle::Conflict
            } else if rng.gen_range(0.0..1.0) < spec.dominance {
                SampleStyle::VisionOnly
            } else if rng.gen_range(0.0..1.0) < spec.ambiguity_rate {
                SampleStyle::Ambiguous
            } else {
                SampleStyle::Clean
            }
        };

        let other = |rng: &mut rand_chacha::ChaCha8Rng, avoid: usize| -> usize {
            let pick = rng.gen_range(0..c - 1);
            if pick >= avoid {
                pick + 1
            } else {
                pick
            }
        };

        let (text_label, text_pool, partner) = match style {
            SampleStyle::Clean => (Some(label), Some(vocab.class_pool(label)), None),
            SampleStyle::Ambiguous => {
                let p = other(&mut rng, label);
                (Some(label), Some(vocab.pair_pool(label, p)), Some(p))
            }
            SampleStyle::VisionOnly => (None, None, None),
            SampleStyle::Conflict => {
                let t = other(&mut rng, label);
                (Some(t), Some(vocab.class_pool(t)), None)
            }
        };
        let _ = partner;

        let n_tokens = rng.gen_range(spec.n_tokens_range.0..=spec.n_tokens_range.1);
        let background = vocab.background_range();
        let tokens: Vec<usize> = (0..n_tokens)
            .map(|_| match &text_pool {
                Some(pool) => {
                    if background.is_empty() || rng.gen_range(0.0..1.0) < SIGNAL_TOKEN_P {
                        draw_from(&mut rng, pool.clone())
                    } else {
                        draw_from(&mut rng, background.clone())
                    }
                }
                None => {
                    if background.is_empty() {
                        UNK_TOKEN
                    } else {
                        draw_from(&mut rng, background.clone())
                    }
                }
            })
            .collect();

        // exactly one informative region per post; the rest distract
        let n_regions = rng.gen_range(spec.n_regions_range.0..=spec.n_regions_range.1);
        let mut informative = vec![false; n_regions];
        informative[0] = true;
        informative.shuffle(&mut rng);

        let centroid = &centroids[label];
        let regions: Vec<Vec<f64>> = informative
            .iter()
            .map(|&inf| {
                if inf {
                    let noise = gaussian_vec(&mut rng, spec.d_raw, spec.noise_sigma);
                    centroid.iter().zip(noise).map(|(&m, n)| m + n).collect()
                } else {
                    gaussian_vec(&mut rng, spec.d_raw, DISTRACTOR_SIGMA)
                }
            })
            .collect();

        posts.push(MultimodalPost {
            id: format!("post-{i:06}"),
            tokens,
            regions,
            label,
        });
        details.push(GenerationDetail {
            style,
            text_label,
            vision_label: label,
        });
    }

    // 70/15/15 split, rounded down, remainder to train
    let n = spec.n_samples;
    let n_val = (n as f64 * 0.15).floor() as usize;
    let n_test = (n as f64 * 0.15).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(spec.seed, "datagen/split")));
    let mut split_of = vec![Split::Train; n];
    for (pos, &idx) in order.iter().enumerate() {
        split_of[idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let samples = posts
        .into_iter()
        .zip(&details)
        .zip(split_of)
        .map(|((post, detail), split)| Sample {
            post,
            split,
            conflict: detail.style == SampleStyle::Conflict,
        })
        .collect();

    Ok(GeneratedDataset {
        dataset: Dataset {
            spec: spec.clone(),
            categories: spec.category_names(),
            samples,
        },
        details,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s: Split| self.samples.iter().filter(|x| x.split == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

// ── dataset files ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct PostRecord {
    id: String,
    tokens: Vec<usize>,
    regions: Vec<Vec<f64>>,
    label: usize,
    split: Split,
    conflict: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    categories: Vec<String>,
    spec: DatasetSpec,
}

impl Dataset {
    pub fn to_jsonl(&self) -> Result<String, DataError> {
        let mut out = String::new();
        for s in &self.samples {
            let record = PostRecord {
                id: s.post.id.clone(),
                tokens: s.post.tokens.clone(),
                regions: s.post.regions.clone(),
                label: s.post.label,
                split: s.split,
                conflict: s.conflict,
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn header_json(&self) -> Result<String, DataError> {
        let header = DatasetHeader {
            categories: self.categories.clone(),
            spec: self.spec.clone(),
        };
        let mut s = serde_json::to_string_pretty(&header)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_files(&self, jsonl: &Path, header: &Path) -> Result<(), DataError> {
        fsutil::atomic_write(jsonl, self.to_jsonl()?.as_bytes())?;
        fsutil::atomic_write(header, self.header_json()?.as_bytes())?;
        Ok(())
    }

    pub fn read_files(jsonl: &Path, header: &Path) -> Result<Dataset, DataError> {
        let header_text = std::fs::read_to_string(header)?;
        let header: DatasetHeader = serde_json::from_str(&header_text)?;
        let file = std::fs::File::open(jsonl)?;
        let mut samples = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PostRecord = serde_json::from_str(&line)?;
            let post = MultimodalPost {
                id: record.id,
                tokens: record.tokens,
                regions: record.regions,
                label: record.label,
            };
            post.validate(header.spec.n_categories, header.spec.d_raw)?;
            samples.push(Sample {
                post,
                split: record.split,
                conflict: record.conflict,
            });
        }
        Ok(Dataset {
            spec: header.spec,
            categories: header.categories,
            samples,
        })
    }
}

// ── perturbations ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "level")]
pub enum Perturbation {
    /// Add i.i.d. gaussian noise to every raw visual descriptor entry.
    GaussianVisual(f64),
    /// Replace each token by UNK independently with probability p.
    TokenDropout(f64),
}

impl Perturbation {
    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            Perturbation::GaussianVisual(sigma) if sigma < 0.0 => Err(
                DataError::InvalidPerturbation(format!("sigma {sigma} negative")),
            ),
            Perturbation::TokenDropout(p) if !(0.0..1.0).contains(&p) => Err(
                DataError::InvalidPerturbation(format!("dropout p {p} outside [0, 1)")),
            ),
            _ => Ok(()),
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Perturbation::GaussianVisual(s) => s,
            Perturbation::TokenDropout(p) => p,
        }
    }
}

pub fn perturb(
    post: &MultimodalPost,
    kind: &Perturbation,
    seed: u64,
) -> Result<MultimodalPost, DataError> {
    kind.validate()?;
    let mut rng = seeds::rng(seed);
    let mut out = post.clone();
    match *kind {
        Perturbation::GaussianVisual(sigma) => {
            for region in out.regions.iter_mut() {
                for v in region.iter_mut() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Perturbation::TokenDropout(p) => {
            for t in out.tokens.iter_mut() {
                if rng.gen_range(0.0..1.0) < p {
                    *t = UNK_TOKEN;
                }
            }
        }
    }
    Ok(out)
}

/// Euclidean nearest-centroid on token histograms; the independent
/// separability oracle used by tests. Returns accuracy on `eval`.
pub fn nearest_centroid_accuracy(
    train: &[&Sample],
    eval: &[&Sample],
    vocab_size: usize,
    n_classes: usize,
) -> f64 {
    let histogram = |s: &Sample| -> Vec<f64> {
        let mut h = vec![0.0; vocab_size];
        for &t in &s.post.tokens {
            h[t] += 1.0;
        }
        let norm = s.post.tokens.len() as f64;
        h.iter_mut().for_each(|v| *v /= norm);
        h
    };
    let mut centroids = vec![vec![0.0; vocab_size]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for s in train {
        let h = histogram(s);
        counts[s.post.label] += 1;
        for (c, v) in centroids[s.post.label].iter_mut().zip(h) {
            *c += v;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            centroid.iter_mut().for_each(|v| *v /= count as f64);
        }
    }
    let mut correct = 0usize;
    for s in eval {
        let h = histogram(s);
        let mut best = (f64::INFINITY, 0usize);
        for (c, centroid) in centroids.iter().enumerate() {
            let d: f64 = centroid.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == s.post.label {
            correct += 1;
        }
    }
    correct as f64 / eval.len() as f64
}
