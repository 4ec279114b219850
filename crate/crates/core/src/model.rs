//! Toy-scale supervised-learning substrate: synthetic Gaussian-blob
//! datasets, an MLP classifier over flat parameter vectors, and the local
//! mini-batch SGD-with-momentum optimizer run by every device.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::rng::{self, RngStream};

/// Fully connected network shape: ReLU hidden layers, linear output into
/// softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
}

impl MlpArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("hidden_dims must be positive".into()));
        }
        Ok(())
    }

    /// Layer dimensions as (fan_in, fan_out) pairs.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.n_classes));
        dims
    }

    /// Total parameter count: sum over layers of fan_in*fan_out + fan_out.
    pub fn n_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(m, n)| m * n + n)
            .sum()
    }

    /// Glorot-uniform initialization from a dedicated stream. All devices
    /// share the same round-0 model, so callers pass the same stream once.
    pub fn init_params(&self, rng: &mut RngStream) -> ParameterVector {
        let mut values = Vec::with_capacity(self.n_params());
        for (m, n) in self.layer_dims() {
            let bound = libm::sqrt(6.0 / (m + n) as f64);
            for _ in 0..m * n {
                values.push((2.0 * rng::next_f64(rng) - 1.0) * bound);
            }
            values.extend(core::iter::repeat(0.0).take(n));
        }
        ParameterVector::new(values).expect("finite init")
    }
}

/// A labeled sample set. `features` is row-major with `input_dim` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let start = i * self.input_dim;
        (&self.features[start..start + self.input_dim], self.labels[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len() * self.input_dim,
                actual: self.features.len(),
            });
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {l} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// The shard of training data owned by one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    pub owner: usize,
    pub data: Dataset,
}

/// Local optimizer settings (SGD with momentum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
}

fn default_local_epochs() -> usize {
    1
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidConfig("local_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Generates a Gaussian-blob classification set and splits it 80/20 into
/// train and held-out validation, per class so both splits stay balanced.
///
/// Class means are drawn once from the seeded stream (entries scaled by
/// `class_separation`), then each sample adds isotropic noise of scale
/// `noise_sigma`.
pub fn generate_synthetic_dataset(
    n_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    noise_sigma: f64,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
    }
    if input_dim == 0 || samples_per_class == 0 {
        return Err(Error::InvalidConfig("counts must be positive".into()));
    }
    if !(noise_sigma > 0.0) {
        return Err(Error::InvalidConfig("noise_sigma must be > 0".into()));
    }

    let means: Vec<f64> = (0..n_classes * input_dim)
        .map(|_| class_separation * rng::next_gaussian(rng))
        .collect();

    let n_train_per_class = ((samples_per_class * 8) / 10).max(1).min(samples_per_class);
    let mut train = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        input_dim,
        n_classes,
    };
    let mut val = train.clone();
    for c in 0..n_classes {
        for s in 0..samples_per_class {
            let target = if s < n_train_per_class { &mut train } else { &mut val };
            for d in 0..input_dim {
                target
                    .features
                    .push(means[c * input_dim + d] + noise_sigma * rng::next_gaussian(rng));
            }
            target.labels.push(c);
        }
    }
    if val.n_samples() == 0 {
        // samples_per_class == 1 leaves nothing for validation; reuse train.
        val = train.clone();
    }
    Ok((train, val))
}

/// Splits a dataset into `k` disjoint IID shards whose sizes differ by at
/// most one, by dealing a seeded shuffle round-robin.
pub fn partition_iid(dataset: &Dataset, k: usize, rng: &mut RngStream) -> Result<Vec<DatasetPartition>> {
    if k == 0 {
        return Err(Error::InvalidConfig("device count must be at least 1".into()));
    }
    if dataset.n_samples() < k {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} samples, fewer than {k} devices",
            dataset.n_samples()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.n_samples()).collect();
    rng::shuffle(rng, &mut order);

    let mut shards: Vec<DatasetPartition> = (0..k)
        .map(|owner| DatasetPartition {
            owner,
            data: Dataset {
                features: Vec::new(),
                labels: Vec::new(),
                input_dim: dataset.input_dim,
                n_classes: dataset.n_classes,
            },
        })
        .collect();
    for (pos, &idx) in order.iter().enumerate() {
        let shard = &mut shards[pos % k].data;
        let (x, y) = dataset.sample(idx);
        shard.features.extend_from_slice(x);
        shard.labels.push(y);
    }
    Ok(shards)
}

/// Per-layer views into a flat parameter slice.
struct LayerView<'a> {
    weights: &'a [f64],
    biases: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

fn layer_views<'a>(arch: &MlpArchitecture, params: &'a [f64]) -> Vec<LayerView<'a>> {
    let mut views = Vec::new();
    let mut offset = 0;
    for (m, n) in arch.layer_dims() {
        let weights = &params[offset..offset + m * n];
        offset += m * n;
        let biases = &params[offset..offset + n];
        offset += n;
        views.push(LayerView { weights, biases, fan_in: m, fan_out: n });
    }
    views
}

/// Forward pass storing post-activation values of every layer.
fn forward(arch: &MlpArchitecture, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
    let views = layer_views(arch, params);
    let n_layers = views.len();
    let mut activations = Vec::with_capacity(n_layers);
    let mut current = input.to_vec();
    for (l, view) in views.iter().enumerate() {
        let mut out = vec![0.0; view.fan_out];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = view.biases[j];
            for i in 0..view.fan_in {
                acc += current[i] * view.weights[i * view.fan_out + j];
            }
            *o = acc;
        }
        if l + 1 < n_layers {
            for o in out.iter_mut() {
                *o = o.max(0.0);
            }
        }
        activations.push(out.clone());
        current = out;
    }
    activations
}

/// Softmax probabilities computed stably from logits.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy loss and its gradient over the given sample indices.
///
/// Returns `(loss, gradient)` with the gradient laid out like the flat
/// parameter vector.
pub fn loss_and_gradient(
    arch: &MlpArchitecture,
    params: &ParameterVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    debug_assert!(!indices.is_empty());
    let p = params.values();
    let views = layer_views(arch, p);
    let n_layers = views.len();
    let mut grad = vec![0.0; p.len()];
    let mut total_loss = 0.0;
    let scale = 1.0 / indices.len() as f64;

    for &si in indices {
        let (x, y) = data.sample(si);
        let activations = forward(arch, p, x);
        let probs = softmax(&activations[n_layers - 1]);
        total_loss -= libm::log(probs[y].max(f64::MIN_POSITIVE)) * scale;

        // delta of the output layer: softmax CE derivative.
        let mut delta: Vec<f64> = probs;
        delta[y] -= 1.0;

        let mut grad_offset = p.len();
        for l in (0..n_layers).rev() {
            let view = &views[l];
            let input: &[f64] = if l == 0 { x } else { &activations[l - 1] };
            grad_offset -= view.fan_in * view.fan_out + view.fan_out;
            let (gw, gb) = grad[grad_offset..grad_offset + view.fan_in * view.fan_out + view.fan_out]
                .split_at_mut(view.fan_in * view.fan_out);
            for i in 0..view.fan_in {
                for j in 0..view.fan_out {
                    gw[i * view.fan_out + j] += scale * input[i] * delta[j];
                }
            }
            for j in 0..view.fan_out {
                gb[j] += scale * delta[j];
            }
            if l > 0 {
                let mut prev = vec![0.0; view.fan_in];
                for i in 0..view.fan_in {
                    if activations[l - 1][i] > 0.0 {
                        let mut acc = 0.0;
                        for j in 0..view.fan_out {
                            acc += view.weights[i * view.fan_out + j] * delta[j];
                        }
                        prev[i] = acc;
                    }
                }
                delta = prev;
            }
        }
    }
    Ok((total_loss, grad))
}

/// Runs `local_epochs` passes of mini-batch SGD with momentum on the shard,
/// returning the updated parameters. The velocity starts at zero each call
/// and the input parameters are left untouched.
pub fn local_optimize(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    partition: &DatasetPartition,
    cfg: &OptimizerConfig,
    rng: &mut RngStream,
) -> Result<ParameterVector> {
    cfg.validate()?;
    if params.n_params() != arch.n_params() {
        return Err(Error::DimensionMismatch {
            expected: arch.n_params(),
            actual: params.n_params(),
        });
    }
    let data = &partition.data;
    if data.n_samples() == 0 {
        return Err(Error::InvalidConfig("empty partition".into()));
    }
    let batch_size = cfg.batch_size.min(data.n_samples());

    let mut w = params.clone();
    let mut velocity = vec![0.0; w.n_params()];
    let mut order: Vec<usize> = (0..data.n_samples()).collect();

    for _ in 0..cfg.local_epochs {
        rng::shuffle(rng, &mut order);
        for batch in order.chunks(batch_size) {
            let (loss, grad) = loss_and_gradient(arch, &w, data, batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { device: partition.owner, round: 0 });
            }
            let values = w.values_mut();
            for ((v, g), wv) in velocity.iter_mut().zip(&grad).zip(values.iter_mut()) {
                *v = cfg.momentum * *v + g;
                *wv -= cfg.learning_rate * *v;
            }
        }
    }
    if !w.is_finite() {
        return Err(Error::Diverged { device: partition.owner, round: 0 });
    }
    Ok(w)
}

/// Mean cross-entropy and top-1 accuracy over a dataset. Argmax ties break
/// toward the lowest class index.
pub fn evaluate(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    data: &Dataset,
) -> Result<(f64, f64)> {
    if data.n_samples() == 0 {
        return Err(Error::InvalidConfig("cannot evaluate on an empty dataset".into()));
    }
    if params.n_params() != arch.n_params() {
        return Err(Error::DimensionMismatch {
            expected: arch.n_params(),
            actual: params.n_params(),
        });
    }
    let p = params.values();
    let n_layers = arch.layer_dims().len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.n_samples() {
        let (x, y) = data.sample(i);
        let activations = forward(arch, p, x);
        let probs = softmax(&activations[n_layers - 1]);
        loss -= libm::log(probs[y].max(f64::MIN_POSITIVE));
        let mut best = 0;
        for (c, &v) in probs.iter().enumerate() {
            if v > probs[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = data.n_samples() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Shared helper for the harness: one seeded shuffle stream drives both the
/// mini-batch order of every device on a round.
pub fn optimizer_stream(seed: u64, device: usize, round: usize) -> RngStream {
    rng::stream(seed, rng::StreamKind::Optimizer, device as u64, round as u64)
}
