//! A self-contained multi-layer perceptron: ReLU hidden layers, softmax
//! output, cross-entropy loss, analytic gradients, minibatch SGD, macro-F1
//! evaluation, and the canonical parameter byte layout used on the wire.
//!
//! Parameters live in one flat `f64` vector, layer-major: `W1` row-major
//! (one row per output neuron), then `b1`, then `W2`, `b2`, and so on.
//! All math is 64-bit and sequential, so results are bit-deterministic
//! given a seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::scenario::{InitScheme, ModelSpec};
use crate::seeds::fnv1a64;

/// Flat parameter vector plus its architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ModelSpec,
    pub values: Vec<f64>,
    pub arch_digest: u64,
}

/// Outcome of one local training call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean cross-entropy over the final epoch, measured at
    /// the parameters each batch was trained from.
    pub mean_loss: f64,
    pub samples_seen: usize,
    pub epoch_wall_ms: u64,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("incompatible architecture: digest {got:#018x} does not match expected {expected:#018x}")]
    IncompatibleArchitecture { expected: u64, got: u64 },
    #[error("parameter payload truncated: {0}")]
    Truncated(String),
    #[error("non-finite parameter value at index {0}")]
    NonFinite(usize),
    #[error("empty shard")]
    EmptyShard,
}

/// `(fan_in, fan_out)` per layer.
fn layer_dims(arch: &ModelSpec) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(arch.hidden_dims.len() + 1);
    let mut fan_in = arch.input_dim;
    for &h in &arch.hidden_dims {
        dims.push((fan_in, h));
        fan_in = h;
    }
    dims.push((fan_in, arch.output_dim));
    dims
}

/// Total parameter count: sum over layers of `fan_in * fan_out + fan_out`.
pub fn param_count(arch: &ModelSpec) -> usize {
    layer_dims(arch)
        .iter()
        .map(|&(i, o)| i * o + o)
        .sum()
}

/// Stable 64-bit digest of an architecture; embedded in the wire format so
/// incompatible parameter vectors are rejected on receipt.
pub fn arch_digest(arch: &ModelSpec) -> u64 {
    let mut bytes = Vec::with_capacity(8 * (3 + arch.hidden_dims.len()) + 1);
    bytes.extend_from_slice(&(arch.input_dim as u64).to_le_bytes());
    bytes.extend_from_slice(&(arch.hidden_dims.len() as u64).to_le_bytes());
    for &h in &arch.hidden_dims {
        bytes.extend_from_slice(&(h as u64).to_le_bytes());
    }
    bytes.extend_from_slice(&(arch.output_dim as u64).to_le_bytes());
    bytes.push(match arch.init_scheme {
        InitScheme::UniformHe => 0x01,
    });
    fnv1a64(&bytes)
}

/// Seeded initialization: weights uniform in +-sqrt(6 / fan_in), biases 0.
pub fn init_model(arch: &ModelSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(param_count(arch));
    for (fan_in, fan_out) in layer_dims(arch) {
        let bound = (6.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-bound..bound));
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ModelParams {
        arch_digest: arch_digest(arch),
        arch: arch.clone(),
        values,
    }
}

fn check_batch(p: &ModelParams, batch: &[f64]) -> Result<usize, ModelError> {
    let d = p.arch.input_dim;
    if d == 0 || batch.len() % d != 0 {
        return Err(ModelError::DimensionMismatch(format!(
            "batch of {} values is not a multiple of input_dim {}",
            batch.len(),
            d
        )));
    }
    Ok(batch.len() / d)
}

/// Forward pass over a row-major batch; returns class probabilities,
/// one row per sample, each row summing to 1.
pub fn forward(p: &ModelParams, batch: &[f64]) -> Result<Vec<f64>, ModelError> {
    let n = check_batch(p, batch)?;
    let (activations, _) = forward_internal(p, batch, n);
    Ok(activations.into_iter().last().unwrap())
}

/// Runs the network, returning per-layer post-activations (input included
/// as layer 0, softmax probabilities last) and the pre-softmax logits.
fn forward_internal(p: &ModelParams, batch: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dims = layer_dims(&p.arch);
    let n_layers = dims.len();
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    activations.push(batch.to_vec());
    let mut offset = 0usize;
    let mut logits = Vec::new();
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let weights = &p.values[offset..offset + fan_in * fan_out];
        let biases = &p.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;

        let input = activations.last().unwrap();
        let mut out = vec![0.0f64; n * fan_out];
        for s in 0..n {
            let x = &input[s * fan_in..(s + 1) * fan_in];
            let y = &mut out[s * fan_out..(s + 1) * fan_out];
            for (o, y_o) in y.iter_mut().enumerate() {
                let w = &weights[o * fan_in..(o + 1) * fan_in];
                let mut acc = biases[o];
                for i in 0..fan_in {
                    acc += w[i] * x[i];
                }
                *y_o = acc;
            }
        }
        if l + 1 < n_layers {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(out);
        } else {
            logits = out.clone();
            softmax_rows(&mut out, n, fan_out);
            activations.push(out);
        }
    }
    (activations, logits)
}

fn softmax_rows(values: &mut [f64], n: usize, width: usize) {
    for s in 0..n {
        let row = &mut values[s * width..(s + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Mean cross-entropy of the batch, computed from logits via log-sum-exp.
pub fn mean_loss(p: &ModelParams, batch: &[f64], labels: &[usize]) -> Result<f64, ModelError> {
    let n = check_batch(p, batch)?;
    if labels.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let k = p.arch.output_dim;
    let (_, logits) = forward_internal(p, batch, n);
    let mut total = 0.0;
    for s in 0..n {
        let row = &logits[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[s]];
    }
    Ok(total / n as f64)
}

/// Analytic gradient of the mean cross-entropy over the batch; same layout
/// and length as `p.values`.
pub fn gradient(p: &ModelParams, batch: &[f64], labels: &[usize]) -> Result<Vec<f64>, ModelError> {
    let n = check_batch(p, batch)?;
    if labels.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let dims = layer_dims(&p.arch);
    let (activations, _) = forward_internal(p, batch, n);

    let mut grad = vec![0.0f64; p.values.len()];
    let layer_offsets: Vec<usize> = dims
        .iter()
        .scan(0usize, |acc, &(i, o)| {
            let cur = *acc;
            *acc += i * o + o;
            Some(cur)
        })
        .collect();

    // Output delta: (softmax - onehot) / n.
    let k = p.arch.output_dim;
    let probs = activations.last().unwrap();
    let mut delta: Vec<f64> = probs.clone();
    for s in 0..n {
        delta[s * k + labels[s]] -= 1.0;
    }
    for v in delta.iter_mut() {
        *v /= n as f64;
    }

    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let offset = layer_offsets[l];
        let input = &activations[l];
        {
            let (w_grad, b_grad) = grad[offset..offset + fan_in * fan_out + fan_out]
                .split_at_mut(fan_in * fan_out);
            for s in 0..n {
                let x = &input[s * fan_in..(s + 1) * fan_in];
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                for o in 0..fan_out {
                    let row = &mut w_grad[o * fan_in..(o + 1) * fan_in];
                    let d_o = d[o];
                    for i in 0..fan_in {
                        row[i] += d_o * x[i];
                    }
                    b_grad[o] += d_o;
                }
            }
        }
        if l > 0 {
            // Propagate through W_l and the ReLU of layer l-1.
            let weights = &p.values[offset..offset + fan_in * fan_out];
            let mut prev = vec![0.0f64; n * fan_in];
            for s in 0..n {
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                let act = &input[s * fan_in..(s + 1) * fan_in];
                let out = &mut prev[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let w = &weights[o * fan_in..(o + 1) * fan_in];
                    let d_o = d[o];
                    for i in 0..fan_in {
                        out[i] += d_o * w[i];
                    }
                }
                for i in 0..fan_in {
                    if act[i] <= 0.0 {
                        out[i] = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    Ok(grad)
}

/// Minibatch SGD over the shard selected by `indices`: a seeded shuffle per
/// epoch, every batch included (the trailing short one too), parameters
/// updated in place on a copy. Deterministic in `(p, data, indices, seed)`.
pub fn train_epochs(
    p: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    epochs: u32,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(ModelParams, TrainReport), ModelError> {
    if indices.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    if data.n_features != p.arch.input_dim {
        return Err(ModelError::DimensionMismatch(format!(
            "dataset has {} features, model expects {}",
            data.n_features, p.arch.input_dim
        )));
    }
    let started = std::time::Instant::now();
    let batch_size = batch_size.max(1);
    let mut params = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = indices.to_vec();
    let mut batch = Vec::with_capacity(batch_size * data.n_features);
    let mut labels = Vec::with_capacity(batch_size);
    let mut last_epoch_loss = 0.0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            labels.clear();
            for &i in chunk {
                batch.extend_from_slice(data.row(i));
                labels.push(data.labels[i]);
            }
            epoch_loss += mean_loss(&params, &batch, &labels)? * chunk.len() as f64;
            let grad = gradient(&params, &batch, &labels)?;
            for (v, g) in params.values.iter_mut().zip(&grad) {
                *v -= learning_rate * g;
            }
        }
        last_epoch_loss = epoch_loss / order.len() as f64;
    }
    let report = TrainReport {
        mean_loss: last_epoch_loss,
        samples_seen: indices.len() * epochs as usize,
        epoch_wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok((params, report))
}

/// Macro-F1 on a test set: argmax prediction (ties to the lowest class
/// index), per-class F1 = 2PR/(P+R) with 0 when P+R = 0, unweighted mean
/// over classes.
pub fn evaluate(p: &ModelParams, test: &Dataset) -> Result<(f64, Vec<f64>), ModelError> {
    if test.n_samples() == 0 {
        return Err(ModelError::EmptyShard);
    }
    if test.n_features != p.arch.input_dim {
        return Err(ModelError::DimensionMismatch(format!(
            "dataset has {} features, model expects {}",
            test.n_features, p.arch.input_dim
        )));
    }
    let k = p.arch.output_dim;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    const CHUNK: usize = 512;
    let mut start = 0;
    while start < test.n_samples() {
        let end = (start + CHUNK).min(test.n_samples());
        let batch = &test.features[start * test.n_features..end * test.n_features];
        let probs = forward(p, batch)?;
        for s in 0..end - start {
            let row = &probs[s * k..(s + 1) * k];
            let mut best = 0usize;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            let truth = test.labels[start + s];
            if best == truth {
                tp[truth] += 1;
            } else {
                fp[best] += 1;
                fn_[truth] += 1;
            }
        }
        start = end;
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let precision = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let recall = if tp[c] + fn_[c] > 0 {
            tp[c] as f64 / (tp[c] + fn_[c]) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(f1);
    }
    let macro_f1 = per_class.iter().sum::<f64>() / k as f64;
    Ok((macro_f1, per_class))
}

/// Wire layout: `arch_digest` (8 bytes) || value count (u32) || IEEE-754
/// f64 values, all little-endian. Round-trips bit-exactly.
pub fn serialize_params(p: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * p.values.len());
    out.extend_from_slice(&p.arch_digest.to_le_bytes());
    out.extend_from_slice(&(p.values.len() as u32).to_le_bytes());
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`serialize_params`] against an expected architecture.
pub fn deserialize_params(arch: &ModelSpec, bytes: &[u8]) -> Result<ModelParams, ModelError> {
    if bytes.len() < 12 {
        return Err(ModelError::Truncated(format!(
            "{} bytes is shorter than the 12-byte header",
            bytes.len()
        )));
    }
    let expected = arch_digest(arch);
    let got = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if got != expected {
        return Err(ModelError::IncompatibleArchitecture { expected, got });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if count != param_count(arch) {
        return Err(ModelError::Truncated(format!(
            "header declares {count} values, architecture has {}",
            param_count(arch)
        )));
    }
    if bytes.len() != 12 + 8 * count {
        return Err(ModelError::Truncated(format!(
            "expected {} bytes, got {}",
            12 + 8 * count,
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let off = 12 + 8 * i;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(ModelError::NonFinite(i));
        }
        values.push(v);
    }
    Ok(ModelParams {
        arch: arch.clone(),
        values,
        arch_digest: expected,
    })
}
