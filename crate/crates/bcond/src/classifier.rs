//! Patch-level condition classification: a multinomial logistic regression
//! trained with mini-batch SGD, plus patch augmentation and model files.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ConditionClass;
use crate::descriptor::{describe, PatchRecord, DESCRIPTOR_LEN};
use crate::error::{Error, Result};
use crate::imaging::{compute_gradients, GrayImage, PatchSpec};

/// Side of the downsampled patch used in pixel feature mode (16 x 16 = 256
/// features).
pub const PIXEL_FEATURE_SIDE: usize = 16;

/// Patch side below which augmentation refuses to operate.
pub const MIN_AUGMENT_SIDE: usize = 8;

/// Fraction of the patch side kept by the random-crop augmentation.
pub const CROP_FRACTION: f64 = 0.9;

const MODEL_MAGIC: [u8; 4] = *b"BCND";
const MODEL_VERSION: u16 = 1;
const NO_TARGET_CLASS: u8 = 0xFF;

/// What a patch is turned into before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// The 128-value normalized orientation histogram.
    Descriptor,
    /// The patch downsampled to 16 x 16 raw luminances.
    Pixels,
}

impl FeatureMode {
    pub fn feature_len(self) -> usize {
        match self {
            FeatureMode::Descriptor => DESCRIPTOR_LEN,
            FeatureMode::Pixels => PIXEL_FEATURE_SIDE * PIXEL_FEATURE_SIDE,
        }
    }

    fn as_byte(self) -> u8 {
        match self {
            FeatureMode::Descriptor => 0,
            FeatureMode::Pixels => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(FeatureMode::Descriptor),
            1 => Some(FeatureMode::Pixels),
            _ => None,
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descriptor" => Ok(FeatureMode::Descriptor),
            "pixels" => Ok(FeatureMode::Pixels),
            _ => Err(Error::InvalidArgument(format!(
                "unknown feature mode '{s}' (expected descriptor or pixels)"
            ))),
        }
    }
}

/// Hyperparameters for SGD training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.0001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A probability over the three condition classes (non-negative, sums to 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLikelihoods([f64; 3]);

impl ClassLikelihoods {
    pub fn new(probs: [f64; 3]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "likelihoods must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "likelihoods sum to {sum}, expected 1"
            )));
        }
        Ok(ClassLikelihoods(probs))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn get(&self, class: ConditionClass) -> f64 {
        self.0[class.index()]
    }

    /// Highest-probability class; exact ties resolve to the worse class.
    pub fn argmax_worse_tie(&self) -> ConditionClass {
        let mut best = ConditionClass::C;
        for class in [ConditionClass::B, ConditionClass::A] {
            if self.0[class.index()] > self.0[best.index()] {
                best = class;
            }
        }
        best
    }

    /// Gap between the largest and second-largest probability.
    pub fn top_two_margin(&self) -> f64 {
        let mut s = self.0;
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s[0] - s[1]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }
}

impl Serialize for ClassLikelihoods {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassLikelihoods {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = <[f64; 3]>::deserialize(d)?;
        ClassLikelihoods::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Multinomial logistic regression over dense feature vectors.
///
/// Parameters are stored flat: `n_classes * n_features` weights (class-major)
/// followed by `n_classes` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    n_classes: usize,
    n_features: usize,
    params: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn zeroed(n_classes: usize, n_features: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(
                "a classifier needs at least 2 classes".into(),
            ));
        }
        if n_features == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be positive".into(),
            ));
        }
        Ok(SoftmaxRegression {
            n_classes,
            n_features,
            params: vec![0.0; n_classes * n_features + n_classes],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn from_parts(n_classes: usize, n_features: usize, params: Vec<f64>) -> Result<Self> {
        let expected = n_classes * n_features + n_classes;
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                context: "softmax parameter vector",
                expected,
                got: params.len(),
            });
        }
        Ok(SoftmaxRegression {
            n_classes,
            n_features,
            params,
        })
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let nf = self.n_features;
        let bias_at = self.n_classes * nf;
        (0..self.n_classes)
            .map(|c| {
                let w = &self.params[c * nf..(c + 1) * nf];
                let dot: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
                dot + self.params[bias_at + c]
            })
            .collect()
    }

    /// Class probabilities for one feature vector (numerically stable
    /// softmax, renormalized so the sum is 1 up to rounding).
    pub fn predict_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::LengthMismatch {
                context: "feature vector",
                expected: self.n_features,
                got: x.len(),
            });
        }
        let z = self.logits(x);
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        for v in &mut e {
            *v /= sum;
        }
        Ok(e)
    }

    /// Average cross-entropy over a dataset (no weight-decay term).
    pub fn average_loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        self.check_dataset(xs, ys)?;
        let idx: Vec<usize> = (0..xs.len()).collect();
        Ok(self.subset_loss_grad(xs, ys, &idx).0)
    }

    /// Average cross-entropy and its gradient with respect to the flat
    /// parameter vector (no weight-decay term).
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(xs, ys)?;
        let idx: Vec<usize> = (0..xs.len()).collect();
        Ok(self.subset_loss_grad(xs, ys, &idx))
    }

    fn check_dataset(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("training samples"));
        }
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch {
                context: "label vector",
                expected: xs.len(),
                got: ys.len(),
            });
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.n_features) {
            return Err(Error::LengthMismatch {
                context: "feature vector",
                expected: self.n_features,
                got: x.len(),
            });
        }
        if let Some(y) = ys.iter().find(|y| **y >= self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range 0..{}",
                self.n_classes
            )));
        }
        Ok(())
    }

    fn subset_loss_grad(&self, xs: &[Vec<f64>], ys: &[usize], idx: &[usize]) -> (f64, Vec<f64>) {
        let nf = self.n_features;
        let bias_at = self.n_classes * nf;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let scale = 1.0 / idx.len() as f64;
        for &i in idx {
            let x = &xs[i];
            let z = self.logits(x);
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum_exp: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let log_sum = m + sum_exp.ln();
            loss += (log_sum - z[ys[i]]) * scale;
            for c in 0..self.n_classes {
                let p = (z[c] - log_sum).exp();
                let g = (p - if c == ys[i] { 1.0 } else { 0.0 }) * scale;
                let row = &mut grad[c * nf..(c + 1) * nf];
                for (gw, xv) in row.iter_mut().zip(x) {
                    *gw += g * xv;
                }
                grad[bias_at + c] += g;
            }
        }
        (loss, grad)
    }

    /// Mini-batch SGD with momentum and weight decay (decay applies to
    /// weights, not biases). Returns the per-epoch average of the batch
    /// losses. The shuffle order is fully determined by `cfg.seed`.
    pub fn train_sgd(&mut self, xs: &[Vec<f64>], ys: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.check_dataset(xs, ys)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut velocity = vec![0.0; self.params.len()];
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        let n_weights = self.n_classes * self.n_features;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
                let (loss, grad) = self.subset_loss_grad(xs, ys, batch);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                epoch_loss += loss;
                batches += 1;
                for (j, v) in velocity.iter_mut().enumerate() {
                    let decay = if j < n_weights {
                        cfg.weight_decay * self.params[j]
                    } else {
                        0.0
                    };
                    *v = cfg.momentum * *v - cfg.learning_rate * (grad[j] + decay);
                    self.params[j] += *v;
                }
            }
            trace.push(epoch_loss / batches as f64);
        }
        Ok(trace)
    }

    /// Euclidean norm of the weight block (biases excluded).
    pub fn weight_norm(&self) -> f64 {
        self.params[..self.n_classes * self.n_features]
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sampled augmentation choices; `None` / `false` means "leave unchanged".
///
/// Crop offsets are stored as fractions of the available slack so one set of
/// parameters applies to any patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub crop: Option<(f64, f64)>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            crop: None,
            brightness: None,
            contrast: None,
        }
    }

    /// Draws each transform independently with probability 1/2, in the fixed
    /// order flip, crop, brightness, contrast.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.random::<f64>() < 0.5;
        let crop = if rng.random::<f64>() < 0.5 {
            Some((rng.random::<f64>(), rng.random::<f64>()))
        } else {
            None
        };
        let brightness = if rng.random::<f64>() < 0.5 {
            Some(rng.random::<f64>() * 0.2 - 0.1)
        } else {
            None
        };
        let contrast = if rng.random::<f64>() < 0.5 {
            Some(0.9 + rng.random::<f64>() * 0.2)
        } else {
            None
        };
        AugmentParams {
            flip,
            crop,
            brightness,
            contrast,
        }
    }
}

/// Applies augmentation with explicit parameters, in the order flip, crop
/// (with rescale back to the original size), brightness, contrast.
/// Brightness and contrast results are clamped to `[0, 1]`.
pub fn augment_with(patch: &GrayImage, params: &AugmentParams) -> Result<GrayImage> {
    if patch.width().min(patch.height()) < MIN_AUGMENT_SIDE {
        return Err(Error::PatchTooSmall {
            side: patch.width().min(patch.height()),
            min: MIN_AUGMENT_SIDE,
        });
    }
    let mut img = if params.flip {
        patch.flip_horizontal()
    } else {
        patch.clone()
    };
    if let Some((fx, fy)) = params.crop {
        let (w, h) = (img.width(), img.height());
        let cw = ((w as f64 * CROP_FRACTION).round() as usize).max(1);
        let ch = ((h as f64 * CROP_FRACTION).round() as usize).max(1);
        let ox = (fx.clamp(0.0, 1.0) * (w - cw) as f64).round() as usize;
        let oy = (fy.clamp(0.0, 1.0) * (h - ch) as f64).round() as usize;
        let mut pixels = Vec::with_capacity(cw * ch);
        for y in oy..oy + ch {
            for x in ox..ox + cw {
                pixels.push(img.get(x, y));
            }
        }
        img = GrayImage::new(cw, ch, pixels)?.resize_bilinear(w, h)?;
    }
    if let Some(b) = params.brightness {
        img = GrayImage::from_fn(img.width(), img.height(), |x, y| img.get(x, y) + b)?;
    }
    if let Some(c) = params.contrast {
        let mean = img.mean();
        img = GrayImage::from_fn(img.width(), img.height(), |x, y| {
            mean + c * (img.get(x, y) - mean)
        })?;
    }
    Ok(img)
}

/// Samples augmentation parameters from `rng` and applies them.
pub fn augment(patch: &GrayImage, rng: &mut impl Rng) -> Result<GrayImage> {
    augment_with(patch, &AugmentParams::sample(rng))
}

/// A trained three-class condition classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionModel {
    mode: FeatureMode,
    softmax: SoftmaxRegression,
    seed: u64,
    config_hash: u64,
}

impl ConditionModel {
    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn softmax(&self) -> &SoftmaxRegression {
        &self.softmax
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    /// Stamps the configuration hash recorded in the model file.
    pub fn set_config_hash(&mut self, hash: u64) {
        self.config_hash = hash;
    }

    /// Builds a model from explicit parts (used by tests and model loading).
    pub fn from_parts(mode: FeatureMode, softmax: SoftmaxRegression) -> Result<Self> {
        if softmax.n_classes() != 3 {
            return Err(Error::InvalidArgument(format!(
                "condition model needs 3 classes, got {}",
                softmax.n_classes()
            )));
        }
        if softmax.n_features() != mode.feature_len() {
            return Err(Error::LengthMismatch {
                context: "condition model features",
                expected: mode.feature_len(),
                got: softmax.n_features(),
            });
        }
        Ok(ConditionModel {
            mode,
            softmax,
            seed: 0,
            config_hash: 0,
        })
    }

    /// Likelihoods for one patch.
    pub fn predict(&self, patch: &PatchRecord) -> Result<ClassLikelihoods> {
        let features = features_for(self.mode, patch)?;
        let probs = self.softmax.predict_probs(&features)?;
        ClassLikelihoods::new([probs[0], probs[1], probs[2]])
    }
}

/// Model plus the training loss trace.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: ConditionModel,
    pub loss_trace: Vec<f64>,
}

/// Feature vector for a patch under the given mode.
pub fn features_for(mode: FeatureMode, patch: &PatchRecord) -> Result<Vec<f64>> {
    match mode {
        FeatureMode::Descriptor => Ok(patch.descriptor.values().to_vec()),
        FeatureMode::Pixels => {
            let px = patch.pixels.as_ref().ok_or(Error::MissingPixels)?;
            Ok(px
                .resize_bilinear(PIXEL_FEATURE_SIDE, PIXEL_FEATURE_SIDE)?
                .pixels()
                .to_vec())
        }
    }
}

/// Trains a condition classifier on labeled patches.
///
/// With `augment_factor > 1` every patch contributes `augment_factor - 1`
/// additional augmented copies (this requires pixel data; in descriptor mode
/// the descriptor of each augmented copy is recomputed from its pixels). All
/// randomness derives from `config.seed`.
pub fn train(
    samples: &[(PatchRecord, ConditionClass)],
    config: &TrainConfig,
    augment_factor: usize,
    mode: FeatureMode,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if augment_factor == 0 {
        return Err(Error::InvalidArgument("augment_factor must be >= 1".into()));
    }
    for class in ConditionClass::ALL {
        if !samples.iter().any(|(_, c)| *c == class) {
            return Err(Error::MissingClass(class.to_string()));
        }
    }
    let mut xs = Vec::with_capacity(samples.len() * augment_factor);
    let mut ys = Vec::with_capacity(samples.len() * augment_factor);
    // Separate stream from the SGD shuffle so adding augmentation does not
    // silently change the shuffle order.
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4155_474d_454e_54u64);
    for (patch, class) in samples {
        xs.push(features_for(mode, patch)?);
        ys.push(class.index());
        for _ in 1..augment_factor {
            let px = patch.pixels.as_ref().ok_or(Error::MissingPixels)?;
            let augmented = augment(px, &mut aug_rng)?;
            let features = match mode {
                FeatureMode::Pixels => augmented
                    .resize_bilinear(PIXEL_FEATURE_SIDE, PIXEL_FEATURE_SIDE)?
                    .pixels()
                    .to_vec(),
                FeatureMode::Descriptor => {
                    let grad = compute_gradients(&augmented)?;
                    let spec = PatchSpec {
                        image_id: patch.spec.image_id.clone(),
                        x: 0,
                        y: 0,
                        side: augmented.width().min(augmented.height()),
                    };
                    describe(&grad, &spec)?.values().to_vec()
                }
            };
            xs.push(features);
            ys.push(class.index());
        }
    }
    let mut softmax = SoftmaxRegression::zeroed(3, mode.feature_len())?;
    let loss_trace = softmax.train_sgd(&xs, &ys, config)?;
    Ok(TrainingOutcome {
        model: ConditionModel {
            mode,
            softmax,
            seed: config.seed,
            config_hash: 0,
        },
        loss_trace,
    })
}

/// Writes a condition model to the binary model format.
pub fn save_model(model: &ConditionModel, path: &Path) -> Result<()> {
    write_softmax_file(
        path,
        model.mode.as_byte(),
        NO_TARGET_CLASS,
        &model.softmax,
        model.seed,
        model.config_hash,
    )
}

/// Reads a condition model written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ConditionModel> {
    let raw = read_softmax_file(path)?;
    if raw.target_class != NO_TARGET_CLASS {
        return Err(Error::model_format(
            path,
            format!(
                "file is a relevance model (building class {})",
                raw.target_class
            ),
        ));
    }
    if raw.softmax.n_classes() != 3 {
        return Err(Error::model_format(
            path,
            format!(
                "condition model needs 3 classes, file has {}",
                raw.softmax.n_classes()
            ),
        ));
    }
    let mode = FeatureMode::from_byte(raw.mode_byte)
        .ok_or_else(|| Error::model_format(path, format!("unknown feature mode {}", raw.mode_byte)))?;
    if raw.softmax.n_features() != mode.feature_len() {
        return Err(Error::model_format(
            path,
            format!(
                "feature count {} does not match mode (expected {})",
                raw.softmax.n_features(),
                mode.feature_len()
            ),
        ));
    }
    Ok(ConditionModel {
        mode,
        softmax: raw.softmax,
        seed: raw.seed,
        config_hash: raw.config_hash,
    })
}

pub(crate) struct RawModelFile {
    pub mode_byte: u8,
    pub target_class: u8,
    pub softmax: SoftmaxRegression,
    pub seed: u64,
    pub config_hash: u64,
}

/// Binary layout (little-endian): magic `BCND`, version u16, feature-mode
/// byte, class-count u8, target-class u8 (0xFF when absent), feature-count
/// u32, seed u64, config-hash u64, then all parameters as f64.
pub(crate) fn write_softmax_file(
    path: &Path,
    mode_byte: u8,
    target_class: u8,
    softmax: &SoftmaxRegression,
    seed: u64,
    config_hash: u64,
) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    f.write_all(&MODEL_MAGIC).map_err(io_err)?;
    f.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io_err)?;
    f.write_all(&[mode_byte]).map_err(io_err)?;
    f.write_all(&[softmax.n_classes() as u8]).map_err(io_err)?;
    f.write_all(&[target_class]).map_err(io_err)?;
    f.write_all(&(softmax.n_features() as u32).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(&seed.to_le_bytes()).map_err(io_err)?;
    f.write_all(&config_hash.to_le_bytes()).map_err(io_err)?;
    for p in softmax.params() {
        f.write_all(&p.to_le_bytes()).map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

pub(crate) fn read_softmax_file(path: &Path) -> Result<RawModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(Error::model_format(path, "unexpected end of file"));
        }
        let slice = &bytes[at..at + n];
        at += n;
        Ok(slice)
    };
    if take(4)? != MODEL_MAGIC {
        return Err(Error::model_format(path, "bad magic, not a model file"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::ModelVersion {
            path: path.into(),
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let mode_byte = take(1)?[0];
    let n_classes = take(1)?[0] as usize;
    let target_class = take(1)?[0];
    let n_features = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let config_hash = u64::from_le_bytes(take(8)?.try_into().unwrap());
    if n_classes < 2 {
        return Err(Error::model_format(
            path,
            format!("class count {n_classes} below 2"),
        ));
    }
    if n_features == 0 {
        return Err(Error::model_format(path, "feature count is zero"));
    }
    let n_params = n_classes * n_features + n_classes;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
    }
    if at != bytes.len() {
        return Err(Error::model_format(
            path,
            format!("{} trailing byte(s) after parameters", bytes.len() - at),
        ));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::model_format(path, "non-finite parameter"));
    }
    Ok(RawModelFile {
        mode_byte,
        target_class,
        softmax: SoftmaxRegression::from_parts(n_classes, n_features, params)?,
        seed,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn blob_data(n_per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        // Three well-separated Gaussian blobs in 2-d.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..n_per {
                let dx: f64 = rng.random::<f64>() - 0.5;
                let dy: f64 = rng.random::<f64>() - 0.5;
                xs.push(vec![c[0] + dx, c[1] + dy]);
                ys.push(label);
            }
        }
        (xs, ys)
    }

    fn patch_from_image(img: &GrayImage) -> PatchRecord {
        let grad = compute_gradients(img).unwrap();
        let spec = PatchSpec {
            image_id: "p".into(),
            x: 0,
            y: 0,
            side: img.width(),
        };
        PatchRecord {
            descriptor: describe(&grad, &spec).unwrap(),
            spec,
            pixels: Some(img.clone()),
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_at_ln3() {
        let (xs, ys) = blob_data(10, 1);
        let mut m = SoftmaxRegression::zeroed(3, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let trace = m.train_sgd(&xs, &ys, &cfg).unwrap();
        assert_eq!(trace.len(), 5);
        for l in trace {
            assert_relative_eq!(l, 3.0f64.ln(), epsilon = 1e-9);
        }
        assert!(m.params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn zero_epochs_returns_zero_model_and_empty_trace() {
        let (xs, ys) = blob_data(5, 2);
        let mut m = SoftmaxRegression::zeroed(3, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let trace = m.train_sgd(&xs, &ys, &cfg).unwrap();
        assert!(trace.is_empty());
        assert!(m.params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn blobs_reach_high_accuracy_with_decreasing_loss() {
        let (xs, ys) = blob_data(60, 3);
        let mut m = SoftmaxRegression::zeroed(3, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            seed: 9,
            ..TrainConfig::default()
        };
        let trace = m.train_sgd(&xs, &ys, &cfg).unwrap();
        assert!(trace[trace.len() - 1] < trace[0], "{trace:?}");
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| {
                let p = m.predict_probs(x).unwrap();
                let argmax = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                argmax == y
            })
            .count();
        assert!(correct as f64 / xs.len() as f64 >= 0.99);
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let (xs, ys) = blob_data(20, 4);
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 0.05,
            seed: 77,
            ..TrainConfig::default()
        };
        let mut a = SoftmaxRegression::zeroed(3, 2).unwrap();
        let mut b = SoftmaxRegression::zeroed(3, 2).unwrap();
        let ta = a.train_sgd(&xs, &ys, &cfg).unwrap();
        let tb = b.train_sgd(&xs, &ys, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ta, tb);
        let mut c = SoftmaxRegression::zeroed(3, 2).unwrap();
        let cfg2 = TrainConfig { seed: 78, ..cfg };
        c.train_sgd(&xs, &ys, &cfg2).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn weight_decay_shrinks_weight_norm() {
        let (xs, ys) = blob_data(30, 5);
        let base = TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut plain = SoftmaxRegression::zeroed(3, 2).unwrap();
        plain.train_sgd(&xs, &ys, &base).unwrap();
        let mut decayed = SoftmaxRegression::zeroed(3, 2).unwrap();
        decayed
            .train_sgd(
                &xs,
                &ys,
                &TrainConfig {
                    weight_decay: 0.01,
                    ..base
                },
            )
            .unwrap();
        assert!(decayed.weight_norm() < plain.weight_norm());
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let (xs, ys) = blob_data(20, 6);
        let mut m = SoftmaxRegression::zeroed(3, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e308,
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            m.train_sgd(&xs, &ys, &cfg),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (xs, ys) = blob_data(4, 7);
        let mut m = SoftmaxRegression::zeroed(3, 2).unwrap();
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            *p = (i as f64 * 0.37).sin() * 0.5;
        }
        let (_, grad) = m.loss_and_gradient(&xs, &ys).unwrap();
        let h = 1e-6;
        for j in 0..m.params().len() {
            let orig = m.params()[j];
            m.params_mut()[j] = orig + h;
            let up = m.average_loss(&xs, &ys).unwrap();
            m.params_mut()[j] = orig - h;
            let down = m.average_loss(&xs, &ys).unwrap();
            m.params_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            assert_relative_eq!(grad[j], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let m = SoftmaxRegression::zeroed(3, 4).unwrap();
        let p = m.predict_probs(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        for v in p {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn likelihood_argmax_prefers_worse_on_tie() {
        let l = ClassLikelihoods::new([0.4, 0.4, 0.2]).unwrap();
        assert_eq!(l.argmax_worse_tie(), ConditionClass::B);
        let l = ClassLikelihoods::new([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_eq!(l.argmax_worse_tie(), ConditionClass::C);
        let l = ClassLikelihoods::new([0.5, 0.3, 0.2]).unwrap();
        assert_eq!(l.argmax_worse_tie(), ConditionClass::A);
        assert_relative_eq!(l.top_two_margin(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn likelihoods_validate_sum_and_sign() {
        assert!(ClassLikelihoods::new([0.5, 0.5, 0.5]).is_err());
        assert!(ClassLikelihoods::new([-0.1, 0.6, 0.5]).is_err());
        assert!(ClassLikelihoods::new([0.2, 0.3, 0.5]).is_ok());
    }

    #[test]
    fn flip_only_augmentation_reverses_columns() {
        let img = GrayImage::from_fn(8, 8, |x, y| ((x * 5 + y) % 9) as f64 / 9.0).unwrap();
        let params = AugmentParams {
            flip: true,
            ..AugmentParams::identity()
        };
        let out = augment_with(&img, &params).unwrap();
        assert_eq!(out, img.flip_horizontal());
        let back = augment_with(&out, &params).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn brightness_shift_is_exact_and_clamped() {
        let img = GrayImage::from_fn(8, 8, |_, _| 0.5).unwrap();
        let params = AugmentParams {
            brightness: Some(0.1),
            ..AugmentParams::identity()
        };
        let out = augment_with(&img, &params).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.6));
        let bright = GrayImage::from_fn(8, 8, |_, _| 0.95).unwrap();
        let out = augment_with(&bright, &params).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn contrast_pivots_on_patch_mean() {
        let img = GrayImage::from_fn(8, 8, |x, _| if x < 4 { 0.4 } else { 0.6 }).unwrap();
        let params = AugmentParams {
            contrast: Some(1.1),
            ..AugmentParams::identity()
        };
        let out = augment_with(&img, &params).unwrap();
        assert_relative_eq!(out.mean(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(out.get(0, 0), 0.5 + 1.1 * (0.4 - 0.5), epsilon = 1e-12);
    }

    #[test]
    fn crop_augmentation_keeps_dimensions() {
        let img = GrayImage::from_fn(16, 16, |x, y| ((x + y) % 5) as f64 / 5.0).unwrap();
        let params = AugmentParams {
            crop: Some((0.5, 0.5)),
            ..AugmentParams::identity()
        };
        let out = augment_with(&img, &params).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
        assert_ne!(out, img);
    }

    #[test]
    fn augmentation_rejects_tiny_patches() {
        let img = GrayImage::from_fn(4, 4, |_, _| 0.5).unwrap();
        assert!(matches!(
            augment_with(&img, &AugmentParams::identity()),
            Err(Error::PatchTooSmall { .. })
        ));
    }

    #[test]
    fn augmented_values_stay_in_range() {
        let img = GrayImage::from_fn(12, 12, |x, y| ((x * 3 + y * 7) % 12) as f64 / 11.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let out = augment(&img, &mut rng).unwrap();
            assert!(out.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!((out.width(), out.height()), (12, 12));
        }
    }

    #[test]
    fn train_requires_all_three_classes() {
        let img = GrayImage::from_fn(16, 16, |x, _| (x % 4) as f64 / 4.0).unwrap();
        let p = patch_from_image(&img);
        let samples = vec![
            (p.clone(), ConditionClass::A),
            (p.clone(), ConditionClass::B),
        ];
        let err = train(&samples, &TrainConfig::default(), 1, FeatureMode::Descriptor).unwrap_err();
        assert!(matches!(err, Error::MissingClass(_)));
    }

    #[test]
    fn train_with_augmentation_multiplies_samples_deterministically() {
        let mut patches = Vec::new();
        for (i, class) in [ConditionClass::A, ConditionClass::B, ConditionClass::C]
            .iter()
            .enumerate()
        {
            let img = GrayImage::from_fn(16, 16, |x, y| {
                (((x + i * 3) * (y + 1)) % 7) as f64 / 7.0
            })
            .unwrap();
            patches.push((patch_from_image(&img), *class));
        }
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.01,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&patches, &cfg, 3, FeatureMode::Descriptor).unwrap();
        let b = train(&patches, &cfg, 3, FeatureMode::Descriptor).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn pixel_mode_without_pixels_is_an_error() {
        let img = GrayImage::from_fn(16, 16, |x, _| (x % 4) as f64 / 4.0).unwrap();
        let mut p = patch_from_image(&img);
        p.pixels = None;
        let samples = vec![
            (p.clone(), ConditionClass::A),
            (p.clone(), ConditionClass::B),
            (p, ConditionClass::C),
        ];
        let err = train(&samples, &TrainConfig::default(), 1, FeatureMode::Pixels).unwrap_err();
        assert!(matches!(err, Error::MissingPixels));
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let mut softmax = SoftmaxRegression::zeroed(3, DESCRIPTOR_LEN).unwrap();
        for (i, p) in softmax.params_mut().iter_mut().enumerate() {
            *p = (i as f64 * 0.123).cos() / 3.0;
        }
        let mut model = ConditionModel::from_parts(FeatureMode::Descriptor, softmax).unwrap();
        model.seed = 42;
        model.set_config_hash(0xDEAD_BEEF);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bcnd");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn from_parts_rejects_wrong_feature_count() {
        let softmax = SoftmaxRegression::zeroed(3, 8).unwrap();
        assert!(ConditionModel::from_parts(FeatureMode::Descriptor, softmax).is_err());
    }

    #[test]
    fn truncated_model_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bcnd");
        let softmax = SoftmaxRegression::zeroed(3, DESCRIPTOR_LEN).unwrap();
        write_softmax_file(&path, 0, NO_TARGET_CLASS, &softmax, 0, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ModelFormat { .. })));
        std::fs::write(&path, [bytes.clone(), vec![0u8; 3]].concat()).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ModelFormat { .. })));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_model(&path), Err(Error::ModelFormat { .. })));
        let mut vbytes = bytes.clone();
        vbytes[4] = 9; // version low byte
        std::fs::write(&path, &vbytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ModelVersion { .. })));
    }
}
