//! EfficientNet-B0 backbone plus the binary classification head.
//!
//! Head: global average pool → linear(1280→128) → ReLU → dropout(0.4) →
//! linear(128→1) → sigmoid. The pooling lives in the backbone; [`Head`]
//! starts from pooled features and returns logits.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use fundus_nn::{io, EfficientNetB0, Mode, Module, Param, Tensor, B0_FEATURE_DIM};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "efficientnet_b0.safetensors";
pub const CACHE_ENV: &str = "FUNDUSBENCH_CACHE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    EfficientnetB0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Load ImageNet weights from the cache.
    pub pretrained: bool,
    /// Permit a random backbone when cached weights are absent.
    pub offline: bool,
    pub head_hidden: usize,
    pub dropout_rate: f64,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::EfficientnetB0,
            pretrained: true,
            offline: false,
            head_hidden: 128,
            dropout_rate: 0.4,
            feature_dim: B0_FEATURE_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("model.dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("model.head_hidden must be at least 1".into()));
        }
        if self.backbone == Backbone::EfficientnetB0 && self.feature_dim != B0_FEATURE_DIM {
            return Err(Error::Config(format!(
                "model.feature_dim must be {B0_FEATURE_DIM} for efficientnet_b0, got {}",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Fields that change the parameter layout, and differ from `other`.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.backbone != other.backbone {
            out.push("backbone".to_string());
        }
        if self.head_hidden != other.head_hidden {
            out.push("head_hidden".to_string());
        }
        if self.dropout_rate != other.dropout_rate {
            out.push("dropout_rate".to_string());
        }
        if self.feature_dim != other.feature_dim {
            out.push("feature_dim".to_string());
        }
        out
    }
}

pub fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of a probability, clamped away from 0 and 1.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `bce(sigmoid(z), y)` computed stably from the logit.
pub fn bce_with_logits<T: Float>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

/// Mean BCE over a batch and its gradient with respect to each logit.
pub fn bce_loss_and_grad<T: Float>(logits: &[T], labels: &[T]) -> (T, Vec<T>) {
    let n = T::from(logits.len()).expect("batch size fits");
    let mut loss = T::zero();
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            loss = loss + bce_with_logits(z, y);
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

struct HeadCache<T> {
    x: Vec<T>,
    hidden: Vec<T>,
    mask: Vec<T>,
    n: usize,
}

/// Two-layer perceptron over pooled features. Generic over the float type so
/// gradient checks can run in `f64`.
pub struct Head<T: Float + Default = f32> {
    pub fc1_weight: Param<T>,
    pub fc1_bias: Param<T>,
    pub fc2_weight: Param<T>,
    pub fc2_bias: Param<T>,
    pub dropout_rate: f64,
    cache: Option<HeadCache<T>>,
}

impl<T: Float + Default> Head<T> {
    /// Default linear initialisation, `U(±1/√fan_in)` for weights and biases.
    pub fn new(prefix: &str, input: usize, hidden: usize, dropout_rate: f64, rng: &mut impl Rng) -> Self {
        let mut uniform = |name: &str, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let value = (0..n).map(|_| T::from(rng.random_range(-bound..bound)).expect("finite")).collect();
            Param::new(format!("{prefix}.{name}"), shape, value)
        };
        Self {
            fc1_weight: uniform("fc1.weight", &[hidden, input], input),
            fc1_bias: uniform("fc1.bias", &[hidden], input),
            fc2_weight: uniform("fc2.weight", &[1, hidden], hidden),
            fc2_bias: uniform("fc2.bias", &[1], hidden),
            dropout_rate,
            cache: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1_weight.shape[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1_weight.shape[0]
    }

    pub fn param_count(&self) -> usize {
        self.fc1_weight.len() + self.fc1_bias.len() + self.fc2_weight.len() + self.fc2_bias.len()
    }

    pub fn params_generic(&self) -> [&Param<T>; 4] {
        [&self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias]
    }

    pub fn params_generic_mut(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.fc1_weight, &mut self.fc1_bias, &mut self.fc2_weight, &mut self.fc2_bias]
    }

    /// Logits for `n` rows of features. With an RNG the pass is a training
    /// pass: dropout is active and activations are kept for [`Head::backward`].
    pub fn forward(&mut self, x: &[T], rng: Option<&mut ChaCha8Rng>) -> Vec<T> {
        let (d, h) = (self.input_dim(), self.hidden_dim());
        assert_eq!(x.len() % d, 0, "feature length not a multiple of {d}");
        let n = x.len() / d;
        let mut hidden = vec![T::zero(); n * h];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            for j in 0..h {
                let w = &self.fc1_weight.value[j * d..(j + 1) * d];
                let s = w.iter().zip(row).fold(self.fc1_bias.value[j], |acc, (&a, &b)| acc + a * b);
                hidden[i * h + j] = s.max(T::zero());
            }
        }
        let train = rng.is_some();
        let mask: Vec<T> = match rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = T::from(1.0 / (1.0 - self.dropout_rate)).expect("finite");
                (0..n * h)
                    .map(|_| if rng.random::<f64>() < self.dropout_rate { T::zero() } else { keep })
                    .collect()
            }
            _ => Vec::new(),
        };
        let dropped: Vec<T> = if mask.is_empty() {
            hidden.clone()
        } else {
            hidden.iter().zip(&mask).map(|(&a, &m)| a * m).collect()
        };
        let logits = (0..n)
            .map(|i| {
                dropped[i * h..(i + 1) * h]
                    .iter()
                    .zip(&self.fc2_weight.value)
                    .fold(self.fc2_bias.value[0], |acc, (&a, &w)| acc + a * w)
            })
            .collect();
        self.cache = train.then(|| HeadCache { x: x.to_vec(), hidden, mask, n });
        logits
    }

    /// Accumulates parameter gradients and returns the feature gradient.
    pub fn backward(&mut self, dlogits: &[T]) -> Vec<T> {
        let HeadCache { x, hidden, mask, n } = self.cache.take().expect("backward without a training forward");
        assert_eq!(dlogits.len(), n);
        let (d, h) = (self.input_dim(), self.hidden_dim());
        let mut dx = vec![T::zero(); n * d];
        for i in 0..n {
            let g = dlogits[i];
            self.fc2_bias.grad[0] = self.fc2_bias.grad[0] + g;
            for j in 0..h {
                let m = if mask.is_empty() { T::one() } else { mask[i * h + j] };
                let a = hidden[i * h + j];
                self.fc2_weight.grad[j] = self.fc2_weight.grad[j] + g * a * m;
                if a <= T::zero() {
                    continue;
                }
                let dh = g * self.fc2_weight.value[j] * m;
                if dh == T::zero() {
                    continue;
                }
                self.fc1_bias.grad[j] = self.fc1_bias.grad[j] + dh;
                let row = &x[i * d..(i + 1) * d];
                let wrow = &self.fc1_weight.value[j * d..(j + 1) * d];
                let grow = &mut self.fc1_weight.grad[j * d..(j + 1) * d];
                let dxrow = &mut dx[i * d..(i + 1) * d];
                for k in 0..d {
                    grow[k] = grow[k] + dh * row[k];
                    dxrow[k] = dxrow[k] + dh * wrow[k];
                }
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_generic_mut() {
            p.zero_grad();
        }
    }
}

impl Module for Head<f32> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend(self.params_generic());
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend(self.params_generic_mut());
    }
}

/// Names of trainable parameters in each group, with learning-rate multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGroups {
    pub backbone_params: Vec<String>,
    pub head_params: Vec<String>,
    pub backbone_lr_scale: f32,
    pub head_lr_scale: f32,
}

impl ParameterGroups {
    pub fn scale_for(&self, name: &str) -> Option<f32> {
        if self.head_params.iter().any(|n| n == name) {
            Some(self.head_lr_scale)
        } else if self.backbone_params.iter().any(|n| n == name) {
            Some(self.backbone_lr_scale)
        } else {
            None
        }
    }
}

/// Where cached backbone weights are looked up: `$FUNDUSBENCH_CACHE`, else
/// `~/.cache/fundusbench`.
pub fn weights_cache_path() -> PathBuf {
    let dir = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| {
        let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        home.join(".cache").join("fundusbench")
    });
    dir.join(WEIGHTS_FILE)
}

pub struct Classifier {
    pub config: ModelConfig,
    pub backbone: EfficientNetB0,
    pub head: Head<f32>,
}

/// How a forward pass treats each part of the model.
pub enum Pass<'a> {
    Eval,
    /// Training pass. The backbone runs in eval mode, and receives no
    /// gradient, when `backbone_trainable` is false.
    Train { rng: &'a mut ChaCha8Rng, backbone_trainable: bool },
}

impl Classifier {
    /// Random initialisation only; see [`build_model`] for weight loading.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = EfficientNetB0::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let head = Head::new("head", config.feature_dim, config.head_hidden, config.dropout_rate, &mut rng);
        Ok(Self { config, backbone, head })
    }

    pub fn forward_logits(&mut self, x: Tensor, pass: Pass) -> Vec<f32> {
        match pass {
            Pass::Eval => {
                let f = self.backbone.forward(x, &mut Mode::Eval);
                self.head.forward(&f, None)
            }
            Pass::Train { rng, backbone_trainable } => {
                let f = if backbone_trainable {
                    self.backbone.forward(x, &mut Mode::Train(rng))
                } else {
                    self.backbone.forward(x, &mut Mode::Eval)
                };
                self.head.forward(&f, Some(rng))
            }
        }
    }

    /// Eval-mode probabilities.
    pub fn predict_proba(&mut self, x: Tensor) -> Vec<f32> {
        self.forward_logits(x, Pass::Eval).into_iter().map(sigmoid).collect()
    }

    /// Backpropagates logit gradients from the last training pass.
    pub fn backward(&mut self, dlogits: &[f32], backbone_trainable: bool) {
        let dfeat = self.head.backward(dlogits);
        if backbone_trainable {
            self.backbone.backward(&dfeat);
        }
    }

    pub fn clear_cache(&mut self) {
        self.backbone.clear_cache();
        self.head.clear_cache();
    }

    pub fn parameter_groups(&self, backbone_lr_scale: f32) -> ParameterGroups {
        let names = |ps: Vec<&Param>| ps.into_iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
        ParameterGroups {
            backbone_params: names(self.backbone.params()),
            head_params: names(self.head.params()),
            backbone_lr_scale,
            head_lr_scale: 1.0,
        }
    }

    pub fn save_checkpoint(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        meta.insert("model_config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        meta.insert("schema_version".into(), CHECKPOINT_SCHEMA_VERSION.to_string());
        io::save(&self.params(), meta, path)?;
        Ok(())
    }

    /// Restores a checkpoint. With `expected`, any architecture field that
    /// differs from the saved config is an error naming that field.
    pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let meta = io::read_metadata(path)?;
        let version = meta.get("schema_version").map(String::as_str).unwrap_or("missing");
        if version != CHECKPOINT_SCHEMA_VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "{}: schema_version {version}, expected {CHECKPOINT_SCHEMA_VERSION}",
                path.display()
            )));
        }
        let raw = meta
            .get("model_config")
            .ok_or_else(|| Error::Checkpoint(format!("{}: no embedded model_config", path.display())))?;
        let saved: ModelConfig = serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("{}: bad model_config: {e}", path.display())))?;
        if let Some(exp) = expected {
            let fields = saved.architecture_diff(exp);
            if !fields.is_empty() {
                return Err(Error::CheckpointMismatch {
                    fields,
                    saved: raw.clone(),
                    expected: serde_json::to_string(exp).expect("config serializes"),
                });
            }
        }
        let mut model = Self::random(saved, 0)?;
        let report = io::load_into(&mut model.params_mut(), path)?;
        if !report.unexpected.is_empty() {
            log::warn!("{}: ignored tensors {:?}", path.display(), report.unexpected);
        }
        Ok(model)
    }

    /// Metadata stored alongside the weights.
    pub fn checkpoint_metadata(path: &Path) -> Result<HashMap<String, String>> {
        Ok(io::read_metadata(path)?)
    }
}

impl Module for Classifier {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.backbone.collect(out);
        self.head.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.backbone.collect_mut(out);
        self.head.collect_mut(out);
    }
}

/// Builds the classifier. A pretrained backbone is read from
/// [`weights_cache_path`]; when that file is missing, `offline` falls back
/// to random initialisation with a warning and is otherwise an error.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Classifier> {
    let mut model = Classifier::random(config.clone(), seed)?;
    if config.pretrained {
        let path = weights_cache_path();
        if path.is_file() {
            let report = io::load_into(&mut model.backbone.params_mut(), &path)?;
            log::info!("loaded {} backbone tensors from {}", report.loaded, path.display());
        } else if config.offline {
            log::warn!(
                "pretrained weights not found at {}; offline mode, using a randomly initialised backbone",
                path.display()
            );
        } else {
            return Err(Error::Weights(format!(
                "{} not found. Export it with `python scripts/export_torchvision_b0.py {} --pretrained`, \
                 or set model.offline = true to train from random initialisation",
                path.display(),
                path.display()
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig { pretrained: false, ..ModelConfig::default() }
    }

    #[test]
    fn head_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head: Head<f32> = Head::new("head", 1280, 128, 0.4, &mut rng);
        assert_eq!(head.param_count(), 1280 * 128 + 128 + 128 + 1);
        assert_eq!(head.param_count(), 164_097);
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(1.0, 1.0) < 1e-9 && bce(0.0, 0.0) < 1e-9);
        for z in [-12.0f64, -2.0, 0.0, 0.7, 12.0] {
            for y in [0.0, 1.0] {
                assert!((bce_with_logits(z, y) - bce(sigmoid(z), y)).abs() < 1e-6);
            }
        }
        assert!((bce_with_logits(30.0f64, 0.0) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn eval_head_is_deterministic_and_train_head_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head: Head<f64> = Head::new("h", 6, 32, 0.4, &mut rng);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(head.forward(&x, None), head.forward(&x, None));
        let a = head.forward(&x, Some(&mut ChaCha8Rng::seed_from_u64(3)));
        let b = head.forward(&x, Some(&mut ChaCha8Rng::seed_from_u64(4)));
        assert_ne!(a, b);
    }

    #[test]
    fn config_validation_and_diff() {
        assert!(ModelConfig { dropout_rate: 1.0, ..small_config() }.validate().is_err());
        assert!(ModelConfig { head_hidden: 0, ..small_config() }.validate().is_err());
        let other = ModelConfig { head_hidden: 64, offline: true, ..small_config() };
        assert_eq!(small_config().architecture_diff(&other), vec!["head_hidden"]);
    }

    #[test]
    fn missing_weights_without_offline_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var(CACHE_ENV, dir.path());
        let cfg = ModelConfig { pretrained: true, offline: false, ..ModelConfig::default() };
        assert!(matches!(build_model(&cfg, 0), Err(Error::Weights(_))));
        let cfg = ModelConfig { offline: true, ..cfg };
        assert!(build_model(&cfg, 0).is_ok());
    }

    #[test]
    fn parameter_groups_partition_trainables() {
        let m = Classifier::random(small_config(), 0).unwrap();
        let g = m.parameter_groups(0.1);
        let total: usize = m.params().iter().filter(|p| p.trainable).count();
        assert_eq!(g.backbone_params.len() + g.head_params.len(), total);
        assert!(g.backbone_params.iter().all(|n| !g.head_params.contains(n)));
        assert_eq!(g.scale_for("head.fc1.weight"), Some(1.0));
        assert_eq!(g.scale_for("features.0.0.weight"), Some(0.1));
        assert_eq!(g.scale_for("features.0.1.running_mean"), None);
    }
}
