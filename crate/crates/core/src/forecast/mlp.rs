//! Multi-task MLP: ReLU hidden layers, linear output, weighted square loss,
//! inverted dropout, global-norm clipping, AdaDelta and patience-based
//! early stopping on validation MSE.

use log::debug;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adadelta::AdaDelta;
use super::{loss_weights, PredictorConfig, SplitPlan};
use crate::error::{Error, Result};
use crate::features::{fit_standardizer, Sample, Standardizer, TargetVector, N_INPUTS};
use crate::types::N_FUNDAMENTALS;

/// Fully connected layer; `weights` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn he_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
        Dense {
            weights,
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

struct ForwardCache {
    /// Input to each layer (after dropout for hidden activations).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Array2<f64>>,
    /// Scaled dropout masks applied to each hidden layer's output.
    masks: Vec<Option<Array2<f64>>>,
}

struct Dropout<'a, R> {
    rng: &'a mut R,
    input_keep: f64,
    hidden_keep: f64,
}

fn dropout_mask<R: Rng>(shape: (usize, usize), keep: f64, rng: &mut R) -> Option<Array2<f64>> {
    if keep >= 1.0 {
        return None;
    }
    let scale = 1.0 / keep;
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    }))
}

impl Network {
    /// `input → hidden_units × hidden_layers → output`. Hidden layers use
    /// He-uniform weights; the output layer starts at zero so the initial
    /// prediction is the standardized mean.
    pub fn new<R: Rng>(
        input: usize,
        hidden_units: usize,
        hidden_layers: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input;
        for _ in 0..hidden_layers {
            layers.push(Dense::he_uniform(fan_in, hidden_units, rng));
            fan_in = hidden_units;
        }
        layers.push(Dense::zeros(fan_in, output));
        Network { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Contract("network has no layers".into()));
        }
        if self.input_dim() != N_INPUTS || self.output_dim() != N_FUNDAMENTALS {
            return Err(Error::Contract(format!(
                "network maps {} → {}, expected {N_INPUTS} → {N_FUNDAMENTALS}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weights.ncols() != pair[1].weights.nrows() {
                return Err(Error::Contract(format!(
                    "layer {i} output does not feed layer {}",
                    i + 1
                )));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weights.ncols() {
                return Err(Error::Contract(
                    "bias length differs from layer width".into(),
                ));
            }
            if l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::Contract("non-finite network parameter".into()));
            }
        }
        Ok(())
    }

    /// Deterministic forward pass (no dropout).
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    fn forward_cached<R: Rng>(
        &self,
        x: ArrayView2<f64>,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> (Array2<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        if let Some(d) = dropout.as_mut() {
            if let Some(mask) = dropout_mask(a.dim(), d.input_keep, d.rng) {
                a *= &mask;
            }
        }
        let mut cache = ForwardCache {
            layer_inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            cache.layer_inputs.push(a);
            if i == last {
                return (z, cache);
            }
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = dropout
                .as_mut()
                .and_then(|d| dropout_mask(h.dim(), d.hidden_keep, d.rng));
            if let Some(m) = &mask {
                h *= m;
            }
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            a = h;
        }
        unreachable!("network has at least one layer")
    }

    fn backward(&self, cache: &ForwardCache, d_out: Array2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for l in (0..self.layers.len()).rev() {
            let weights_grad = cache.layer_inputs[l].t().dot(&delta);
            let bias_grad = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut d_prev = delta.dot(&self.layers[l].weights.t());
                if let Some(mask) = &cache.masks[l - 1] {
                    d_prev *= mask;
                }
                Zip::from(&mut d_prev)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = d_prev;
            }
            grads.push(Dense {
                weights: weights_grad,
                bias: bias_grad,
            });
        }
        grads.reverse();
        grads
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        param_slices_mut(&mut self.layers)
    }

    /// Flat parameter `i`, ordered layer by layer, weights (row-major) then bias.
    pub fn param(&self, i: usize) -> f64 {
        let mut i = i;
        for l in &self.layers {
            for part in [l.weights.as_slice().unwrap(), l.bias.as_slice().unwrap()] {
                if i < part.len() {
                    return part[i];
                }
                i -= part.len();
            }
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        let mut i = i;
        for slice in self.param_slices_mut() {
            if i < slice.len() {
                slice[i] = value;
                return;
            }
            i -= slice.len();
        }
        panic!("parameter index out of range")
    }
}

fn param_slices_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| {
            [
                l.weights.as_slice_mut().unwrap(),
                l.bias.as_slice_mut().unwrap(),
            ]
        })
        .collect()
}

fn param_slices(layers: &[Dense]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| [l.weights.as_slice().unwrap(), l.bias.as_slice().unwrap()])
        .collect()
}

/// Flat gradient `i` in [`Network::param`] order.
pub fn gradient_entry(grads: &[Dense], i: usize) -> f64 {
    let mut i = i;
    for slice in param_slices(grads) {
        if i < slice.len() {
            return slice[i];
        }
        i -= slice.len();
    }
    panic!("gradient index out of range")
}

/// Mean over rows of the weighted square loss, and its gradient w.r.t. the outputs.
fn loss_and_output_grad(
    out: &Array2<f64>,
    y: ArrayView2<f64>,
    weights: &[f64; N_FUNDAMENTALS],
) -> (f64, Array2<f64>) {
    let b = out.nrows() as f64;
    let mut grad = out - &y;
    let mut loss = 0.0;
    for mut row in grad.rows_mut() {
        for (g, w) in row.iter_mut().zip(weights) {
            loss += w * *g * *g;
            *g *= 2.0 * w / b;
        }
    }
    (loss / b, grad)
}

/// Loss and analytic gradients of the weighted square loss with dropout off.
pub fn mlp_gradient(
    network: &Network,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    alpha1: f64,
) -> (f64, Vec<Dense>) {
    let (out, cache) = network.forward_cached::<ChaCha8Rng>(x, None);
    let (loss, d_out) = loss_and_output_grad(&out, y, &loss_weights(alpha1));
    (loss, network.backward(&cache, d_out))
}

/// Batch-mean weighted loss with dropout off.
pub fn mlp_loss(network: &Network, x: ArrayView2<f64>, y: ArrayView2<f64>, alpha1: f64) -> f64 {
    let out = network.forward(x);
    loss_and_output_grad(&out, y, &loss_weights(alpha1)).0
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Dense], max_norm: f64) -> f64 {
    let norm = param_slices(grads)
        .iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for s in param_slices_mut(grads) {
            s.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

fn unweighted_mse_matrix(pred: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    Zip::from(pred)
        .and(y)
        .fold(0.0, |acc, p, t| acc + (p - t) * (p - t))
        / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the epoch's batches (dropout on).
    pub train_loss: f64,
    /// Unweighted MSE on the validation partition (dropout off).
    pub validation_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_mse: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub network: Network,
    pub standardizer: Standardizer,
    pub config: PredictorConfig,
    pub log: TrainingLog,
}

const PREDICT_CHUNK: usize = 4096;

impl MlpModel {
    pub fn predict_batch(&self, samples: &[Sample]) -> Vec<TargetVector> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let x = input_matrix(chunk.iter(), &self.standardizer);
            let pred = self.network.forward(x.view());
            out.extend(pred.rows().into_iter().map(|r| {
                let mut v = [0.0; N_FUNDAMENTALS];
                v.iter_mut().zip(r.iter()).for_each(|(d, s)| *d = *s);
                v
            }));
        }
        out
    }
}

fn input_matrix<'a>(
    samples: impl ExactSizeIterator<Item = &'a Sample>,
    z: &Standardizer,
) -> Array2<f64> {
    let mut x = Array2::zeros((samples.len(), N_INPUTS));
    for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
        row.iter_mut()
            .zip(s.standardized_inputs(z))
            .for_each(|(d, v)| *d = v);
    }
    x
}

fn target_matrix(samples: &[&Sample], z: &Standardizer) -> Array2<f64> {
    let mut y = Array2::zeros((samples.len(), N_FUNDAMENTALS));
    for (mut row, s) in y.rows_mut().into_iter().zip(samples) {
        let t = s
            .standardized_target(z)
            .expect("training samples carry targets");
        row.iter_mut().zip(t).for_each(|(d, v)| *d = v);
    }
    y
}

/// Trains on the split's training partition and early-stops on its
/// validation partition. The returned network is the best-validation
/// snapshot. Identical inputs and seed give bitwise-identical parameters.
pub fn train_mlp(samples: &[Sample], split: &SplitPlan, cfg: &PredictorConfig) -> Result<MlpModel> {
    cfg.validate()?;
    let (train, val) = split.partition(samples);
    let train: Vec<&Sample> = train.into_iter().filter(|s| s.target.is_some()).collect();
    let val: Vec<&Sample> = val.into_iter().filter(|s| s.target.is_some()).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Domain(format!(
            "training needs non-empty partitions (train {}, validation {})",
            train.len(),
            val.len()
        )));
    }
    let owned: Vec<Sample> = train.iter().map(|s| (*s).clone()).collect();
    let standardizer = fit_standardizer(&owned)?;
    drop(owned);

    let x_train = input_matrix(train.iter().copied(), &standardizer);
    let y_train = target_matrix(&train, &standardizer);
    let x_val = input_matrix(val.iter().copied(), &standardizer);
    let y_val = target_matrix(&val, &standardizer);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut network = Network::new(
        N_INPUTS,
        cfg.hidden_units,
        cfg.hidden_layers,
        N_FUNDAMENTALS,
        &mut rng,
    );
    let mut optimizer = AdaDelta::new(
        network
            .param_slices_mut()
            .iter()
            .map(|s| s.len())
            .collect::<Vec<_>>(),
    );
    let weights = loss_weights(cfg.alpha1);

    let mut log = TrainingLog {
        best_validation_mse: f64::INFINITY,
        ..TrainingLog::default()
    };
    let mut best = network.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x_train.select(Axis(0), idx);
            let yb = y_train.select(Axis(0), idx);
            let dropout = Dropout {
                rng: &mut rng,
                input_keep: cfg.input_keep_prob,
                hidden_keep: cfg.hidden_keep_prob,
            };
            let (out, cache) = network.forward_cached(xb.view(), Some(dropout));
            let (loss, d_out) = loss_and_output_grad(&out, yb.view(), &weights);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            let mut grads = network.backward(&cache, d_out);
            clip_global_norm(&mut grads, cfg.max_grad_norm);
            optimizer.step(&mut network.param_slices_mut(), &param_slices(&grads));
            loss_sum += loss;
            n_batches += 1;
        }
        let validation_mse = unweighted_mse_matrix(&network.forward(x_val.view()), &y_val);
        if !validation_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: n_batches,
            });
        }
        let train_loss = loss_sum / n_batches as f64;
        debug!("epoch {epoch}: train {train_loss:.5} validation {validation_mse:.5}");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_mse,
        });
        if validation_mse < log.best_validation_mse {
            log.best_validation_mse = validation_mse;
            log.best_epoch = epoch;
            best.clone_from(&network);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience_epochs {
                log.stopped_early = true;
                break;
            }
        }
    }

    Ok(MlpModel {
        network: best,
        standardizer,
        config: cfg.clone(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn random_network(rng: &mut ChaCha8Rng) -> Network {
        let mut net = Network::new(N_INPUTS, 12, 2, N_FUNDAMENTALS, rng);
        for i in 0..net.n_params() {
            let v = net.param(i)
                + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            net.set_param(i, v);
        }
        net
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(N_INPUTS, 8, 2, N_FUNDAMENTALS, &mut rng);
        let x = random_matrix(5, N_INPUTS, &mut rng);
        assert!(net.forward(x.view()).iter().all(|v| *v == 0.0));
        net.validate().unwrap();
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = random_network(&mut rng);
        let x = random_matrix(16, N_INPUTS, &mut rng);
        let y = random_matrix(16, N_FUNDAMENTALS, &mut rng);
        let (_, grads) = mlp_gradient(&net, x.view(), y.view(), 0.75);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let i = rng.random_range(0..net.n_params());
            let orig = net.param(i);
            net.set_param(i, orig + h);
            let up = mlp_loss(&net, x.view(), y.view(), 0.75);
            net.set_param(i, orig - h);
            let down = mlp_loss(&net, x.view(), y.view(), 0.75);
            net.set_param(i, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = gradient_entry(&grads, i);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_network(&mut rng);
        let x = random_matrix(8, N_INPUTS, &mut rng);
        let y = net.forward(x.view());
        let (loss, grads) = mlp_gradient(&net, x.view(), y.view(), 0.75);
        assert_eq!(loss, 0.0);
        let out = grads.last().unwrap();
        assert!(out.bias.iter().all(|g| *g == 0.0));
        assert!(out.weights.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn clipping_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_network(&mut rng);
        let x = random_matrix(8, N_INPUTS, &mut rng);
        let y = random_matrix(8, N_FUNDAMENTALS, &mut rng) * 10.0;
        let (_, mut grads) = mlp_gradient(&net, x.view(), y.view(), 0.75);
        let before = clip_global_norm(&mut grads, 1.0);
        assert!(before > 1.0);
        let after = clip_global_norm(&mut grads, 1.0);
        assert!((after - 1.0).abs() < 1e-9);

        let mut small = vec![Dense {
            weights: Array2::from_elem((1, 1), 0.3),
            bias: Array1::from_elem(1, 0.4),
        }];
        assert!((clip_global_norm(&mut small, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(small[0].weights[[0, 0]], 0.3);
    }

    #[test]
    fn param_indexing_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::new(N_INPUTS, 4, 1, N_FUNDAMENTALS, &mut rng);
        let n = net.n_params();
        assert_eq!(n, N_INPUTS * 4 + 4 + 4 * N_FUNDAMENTALS + N_FUNDAMENTALS);
        net.set_param(n - 1, 9.0);
        assert_eq!(net.layers[1].bias[N_FUNDAMENTALS - 1], 9.0);
        assert_eq!(net.param(n - 1), 9.0);
    }
}
