//! Image-text similarity for entity ranking: a seeded hashed bag-of-words
//! text embedding, a cosine stub scorer, and a bilinear scorer trained with
//! a symmetric in-batch contrastive loss.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::optim::{AdamW, AdamWConfig};
use crate::text::tokenize;

/// An image identified by id with a precomputed feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub feature: Vec<f64>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, feature: Vec<f64>) -> Result<Self> {
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "image feature has non-finite entries".into(),
            ));
        }
        Ok(ImageRef {
            id: id.into(),
            feature,
        })
    }
}

/// Scores how well `text` describes `image`; higher is more relevant.
pub trait SimilarityScorer {
    fn score(&self, image: &ImageRef, text: &str) -> f64;
}

/// 64-bit FNV-1a over the seed bytes followed by the token bytes.
fn bucket_hash(seed: u64, token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tokens fed to the hashed embedding: lowercased, punctuation-only tokens
/// dropped.
pub fn hash_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn token_bucket(token: &str, dim: usize, seed: u64) -> usize {
    (bucket_hash(seed, token) % dim as u64) as usize
}

/// Sum of one-hot hash buckets of the text's tokens, L2-normalized unless
/// all zero.
pub fn embed_text_hashed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be >= 1");
    let mut v = vec![0.0; dim];
    for tok in hash_tokens(text) {
        v[token_bucket(&tok, dim, seed)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Deterministic stand-in scorer: cosine between the image feature and the
/// hashed embedding of the text in the same dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubScorer {
    pub seed: u64,
}

impl StubScorer {
    pub fn new(seed: u64) -> Self {
        StubScorer { seed }
    }
}

/// Stub similarity in [-1, 1]; zero-norm vectors score 0.
pub fn stub_score(image: &ImageRef, text: &str, seed: u64) -> f64 {
    if image.feature.is_empty() {
        return 0.0;
    }
    cosine(
        &image.feature,
        &embed_text_hashed(text, image.feature.len(), seed),
    )
}

impl SimilarityScorer for StubScorer {
    fn score(&self, image: &ImageRef, text: &str) -> f64 {
        stub_score(image, text, self.seed)
    }
}

/// `featureᵀ · W · embed(text) / temperature`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearScorer {
    pub w: Array2<f64>,
    pub log_temperature: f64,
    pub text_seed: u64,
}

const MIN_LOG_TEMP: f64 = -4.605_170_185_988_091; // ln 0.01
const MAX_LOG_TEMP: f64 = 4.605_170_185_988_091; // ln 100

impl BilinearScorer {
    pub fn new(w: Array2<f64>, temperature: f64, text_seed: u64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("scorer weights must be finite".into()));
        }
        Ok(BilinearScorer {
            w,
            log_temperature: temperature.ln(),
            text_seed,
        })
    }

    pub fn d_img(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_txt(&self) -> usize {
        self.w.ncols()
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        embed_text_hashed(text, self.d_txt(), self.text_seed)
    }

    pub fn try_score(&self, image: &ImageRef, text: &str) -> Result<f64> {
        if image.feature.len() != self.d_img() {
            return Err(Error::Dimension(format!(
                "image feature has {} entries, scorer expects {}",
                image.feature.len(),
                self.d_img()
            )));
        }
        let f = Array1::from(image.feature.clone());
        let t = Array1::from(self.embed_text(text));
        let s = f.dot(&self.w.dot(&t)) / self.temperature();
        if !s.is_finite() {
            return Err(Error::Scorer {
                entity: text.to_string(),
                score: s,
            });
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = ScorerCheckpoint {
            format: SCORER_FORMAT.into(),
            version: 1,
            d_img: self.d_img(),
            d_txt: self.d_txt(),
            temperature: self.temperature(),
            text_seed: self.text_seed,
            weights: self.w.iter().copied().collect(),
        };
        crate::io::write_atomic(path, serde_json::to_string(&ckpt)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: ScorerCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format != SCORER_FORMAT || ckpt.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported scorer checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.weights.len() != ckpt.d_img * ckpt.d_txt {
            return Err(Error::Checkpoint(format!(
                "scorer weights have {} entries, header says {}x{}",
                ckpt.weights.len(),
                ckpt.d_img,
                ckpt.d_txt
            )));
        }
        let w = Array2::from_shape_vec((ckpt.d_img, ckpt.d_txt), ckpt.weights)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        BilinearScorer::new(w, ckpt.temperature, ckpt.text_seed)
    }
}

impl SimilarityScorer for BilinearScorer {
    fn score(&self, image: &ImageRef, text: &str) -> f64 {
        self.try_score(image, text).unwrap_or(f64::NAN)
    }
}

const SCORER_FORMAT: &str = "rulecap-scorer";

#[derive(Debug, Serialize, Deserialize)]
struct ScorerCheckpoint {
    format: String,
    version: u32,
    d_img: usize,
    d_txt: usize,
    temperature: f64,
    text_seed: u64,
    weights: Vec<f64>,
}

/// Symmetric in-batch contrastive loss for a batch whose row `i` of
/// `images` matches row `i` of `texts`. Returns the loss and its gradients
/// with respect to `w` and the log-temperature.
pub fn contrastive_loss_and_grad(
    w: &Array2<f64>,
    log_temperature: f64,
    images: &Array2<f64>,
    texts: &Array2<f64>,
) -> (f64, Array2<f64>, f64) {
    let b = images.nrows();
    let tau = log_temperature.exp();
    let logits = images.dot(w).dot(&texts.t()) / tau;
    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((b, b));
    let inv = 0.5 / b as f64;
    // Image-to-text (rows) and text-to-image (columns).
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += inv * (max + z.ln() - row[i]);
        for j in 0..b {
            g[[i, j]] += inv * ((row[j] - max).exp() / z - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..b {
        let col = logits.column(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
        loss += inv * (max + z.ln() - col[j]);
        for i in 0..b {
            g[[i, j]] += inv * ((col[i] - max).exp() / z - if i == j { 1.0 } else { 0.0 });
        }
    }
    let dw = images.t().dot(&g).dot(texts) / tau;
    let dlog_t = -(&g * &logits).sum();
    (loss, dw, dlog_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub d_txt: usize,
    pub text_seed: u64,
    pub seed: u64,
    pub init_std: f64,
    pub init_temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            epochs: 20,
            lr: 5e-3,
            batch_size: 16,
            d_txt: 64,
            text_seed: 0,
            seed: 0,
            init_std: 0.01,
            init_temperature: 0.07,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveFit {
    pub scorer: BilinearScorer,
    pub epoch_losses: Vec<f64>,
}

/// Fits a [`BilinearScorer`] on matched (image, caption) pairs using other
/// captions in the same batch as negatives. Batches are drawn from a seeded
/// shuffle; a trailing batch with a single pair is skipped.
pub fn train_scorer_contrastive(
    pairs: &[(ImageRef, String)],
    config: &ContrastiveConfig,
) -> Result<ContrastiveFit> {
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(
            "contrastive training needs at least 2 pairs".into(),
        ));
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidInput(
            "contrastive batches need at least 2 pairs for negatives".into(),
        ));
    }
    let d_img = pairs[0].0.feature.len();
    if pairs.iter().any(|(im, _)| im.feature.len() != d_img) {
        return Err(Error::Dimension("image features differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal =
        Normal::new(0.0, config.init_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let w = Array2::from_shape_fn((d_img, config.d_txt), |_| normal.sample(&mut rng));
    let mut scorer = BilinearScorer::new(w, config.init_temperature, config.text_seed)?;

    let text_emb: Vec<Vec<f64>> = pairs.iter().map(|(_, c)| scorer.embed_text(c)).collect();
    let mut params = vec![
        scorer.w.clone(),
        Array2::from_elem((1, 1), scorer.log_temperature),
    ];
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images =
                Array2::from_shape_fn((chunk.len(), d_img), |(r, c)| pairs[chunk[r]].0.feature[c]);
            let texts =
                Array2::from_shape_fn((chunk.len(), config.d_txt), |(r, c)| text_emb[chunk[r]][c]);
            let (loss, dw, dt) =
                contrastive_loss_and_grad(&params[0], params[1][[0, 0]], &images, &texts);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batches });
            }
            let grads = [dw, Array2::from_elem((1, 1), dt)];
            let mut refs: Vec<&mut Array2<f64>> = params.iter_mut().collect();
            opt.update(&mut refs, &grads, &[false, false], config.lr);
            params[1][[0, 0]] = params[1][[0, 0]].clamp(MIN_LOG_TEMP, MAX_LOG_TEMP);
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("contrastive epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    scorer.w = params[0].clone();
    scorer.log_temperature = params[1][[0, 0]];
    Ok(ContrastiveFit {
        scorer,
        epoch_losses,
    })
}
