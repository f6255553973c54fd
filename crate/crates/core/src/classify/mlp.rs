//! Small feed-forward classifiers trained with Adam on softmax cross-entropy.
//!
//! Batches are `n x d` matrices with one sample per row.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_OUTPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// dense 8→8, dense 8→4, no activation in between
    Au8Net,
    /// dense 136→16, batch-norm, ReLU, dropout 0.8, dense 16→4
    Fp68Net,
    Custom,
}

impl Architecture {
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Architecture::Au8Net => Some(8),
            Architecture::Fp68Net => Some(136),
            Architecture::Custom => None,
        }
    }

    /// Untrained network with He-uniform weights and zero biases.
    pub fn build(&self, seed: u64) -> Result<MlpModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match self {
            Architecture::Au8Net => vec![Layer::dense_he(8, 8, &mut rng), Layer::dense_he(8, N_OUTPUTS, &mut rng)],
            Architecture::Fp68Net => vec![
                Layer::dense_he(136, 16, &mut rng),
                Layer::batch_norm(16),
                Layer::Relu,
                Layer::Dropout { rate: 0.8 },
                Layer::dense_he(16, N_OUTPUTS, &mut rng),
            ],
            Architecture::Custom => {
                return Err(Error::InvalidInput("custom architectures are built from explicit layers".into()))
            }
        };
        MlpModel::from_layers(*self, layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x W^T + b`, `W` is `out x in`.
    Dense { w: DMatrix<f64>, b: DVector<f64> },
    BatchNorm {
        gamma: DVector<f64>,
        beta: DVector<f64>,
        running_mean: DVector<f64>,
        running_var: DVector<f64>,
        momentum: f64,
        eps: f64,
    },
    Relu,
    /// Inverted dropout; `rate` is the fraction of units dropped.
    Dropout { rate: f64 },
}

impl Layer {
    pub fn dense_he(input: usize, output: usize, rng: &mut impl Rng) -> Layer {
        let limit = (6.0 / input as f64).sqrt();
        Layer::Dense {
            w: DMatrix::from_fn(output, input, |_, _| rng.random_range(-limit..limit)),
            b: DVector::zeros(output),
        }
    }

    pub fn batch_norm(dim: usize) -> Layer {
        Layer::BatchNorm {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
            running_mean: DVector::zeros(dim),
            running_var: DVector::from_element(dim, 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    fn n_params(&self) -> usize {
        match self {
            Layer::Dense { w, b } => w.len() + b.len(),
            Layer::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
            _ => 0,
        }
    }
}

enum LayerCache {
    Dense { input: DMatrix<f64> },
    BatchNorm { xhat: DMatrix<f64>, inv_std: DVector<f64>, mean: DVector<f64>, var: DVector<f64> },
    Relu { input: DMatrix<f64> },
    Dropout { mask: DMatrix<f64> },
}

/// Intermediate values of a train-mode forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    pub logits: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[(i, y)] -= 1.0;
    }
    (loss / n as f64, grad / n as f64)
}

pub fn to_batch(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

impl MlpModel {
    /// Checks that consecutive layer widths agree.
    pub fn from_layers(architecture: Architecture, layers: Vec<Layer>) -> Result<MlpModel> {
        let mut width: Option<usize> = None;
        for (k, layer) in layers.iter().enumerate() {
            let bad = |msg: String| Error::InvalidInput(format!("layer {k}: {msg}"));
            match layer {
                Layer::Dense { w, b } => {
                    if b.len() != w.nrows() {
                        return Err(bad(format!("bias length {} for {} outputs", b.len(), w.nrows())));
                    }
                    if let Some(d) = width {
                        if d != w.ncols() {
                            return Err(bad(format!("expects {} inputs, previous width {d}", w.ncols())));
                        }
                    }
                    width = Some(w.nrows());
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    let d = gamma.len();
                    if beta.len() != d || running_mean.len() != d || running_var.len() != d {
                        return Err(bad("batch-norm vectors differ in length".into()));
                    }
                    if width.is_some_and(|w| w != d) {
                        return Err(bad(format!("batch-norm width {d} does not match input")));
                    }
                    width = Some(d);
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                    }
                }
                Layer::Relu => {}
            }
        }
        if !layers.iter().any(|l| matches!(l, Layer::Dense { .. })) {
            return Err(Error::InvalidInput("network has no dense layer".into()));
        }
        let model = MlpModel { architecture, layers };
        if let Some(d) = architecture.input_dim() {
            if model.input_dim() != d || model.output_dim() != N_OUTPUTS {
                return Err(Error::InvalidInput(format!("layer shapes do not match {architecture:?}")));
            }
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense { w, .. } => Some(w.ncols()),
                Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { w, .. } => Some(w.nrows()),
                Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        Ok(())
    }

    /// Inference logits: running batch-norm statistics, no dropout.
    pub fn logits_eval(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { w, b } => dense_forward(&h, w, b),
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => {
                    let mut out = h;
                    for j in 0..out.ncols() {
                        let scale = gamma[j] / (running_var[j] + eps).sqrt();
                        out.column_mut(j).apply(|v| *v = (*v - running_mean[j]) * scale + beta[j]);
                    }
                    out
                }
                Layer::Relu => h.map(|v| v.max(0.0)),
                Layer::Dropout { .. } => h,
            };
        }
        Ok(h)
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(softmax_rows(&self.logits_eval(x)?))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let p = self.logits_eval(x)?;
        Ok(p.row_iter().map(|r| r.transpose().argmax().0).collect())
    }

    /// Draws one inverted-dropout mask per dropout layer for a batch of `n`.
    pub fn sample_masks(&self, n: usize, rng: &mut impl Rng) -> Vec<Option<DMatrix<f64>>> {
        let mut width = self.input_dim();
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, .. } => {
                    width = w.nrows();
                    masks.push(None);
                }
                Layer::Dropout { rate } => {
                    let keep = 1.0 - rate;
                    masks.push(Some(DMatrix::from_fn(n, width, |_, _| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })));
                }
                _ => masks.push(None),
            }
        }
        masks
    }

    /// Train-mode forward pass with batch statistics and the given dropout
    /// masks (one entry per layer, `Some` for dropout layers).
    pub fn forward_train(&self, x: &DMatrix<f64>, masks: &[Option<DMatrix<f64>>]) -> Result<ForwardCache> {
        self.check_input(x)?;
        if masks.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                what: "dropout masks",
                expected: self.layers.len(),
                got: masks.len(),
            });
        }
        let n = x.nrows() as f64;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, mask) in self.layers.iter().zip(masks) {
            match layer {
                Layer::Dense { w, b } => {
                    let out = dense_forward(&h, w, b);
                    caches.push(LayerCache::Dense { input: h });
                    h = out;
                }
                Layer::BatchNorm { gamma, beta, eps, .. } => {
                    let d = h.ncols();
                    let mean = DVector::from_fn(d, |j, _| h.column(j).sum() / n);
                    let var = DVector::from_fn(d, |j, _| h.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n);
                    let inv_std = var.map(|v| 1.0 / (v + eps).sqrt());
                    let xhat = DMatrix::from_fn(h.nrows(), d, |i, j| (h[(i, j)] - mean[j]) * inv_std[j]);
                    h = DMatrix::from_fn(h.nrows(), d, |i, j| xhat[(i, j)] * gamma[j] + beta[j]);
                    caches.push(LayerCache::BatchNorm { xhat, inv_std, mean, var });
                }
                Layer::Relu => {
                    let out = h.map(|v| v.max(0.0));
                    caches.push(LayerCache::Relu { input: h });
                    h = out;
                }
                Layer::Dropout { .. } => {
                    let mask = mask
                        .as_ref()
                        .filter(|m| m.shape() == h.shape())
                        .ok_or_else(|| Error::InvalidInput("dropout mask missing or misshapen".into()))?
                        .clone();
                    h.component_mul_assign(&mask);
                    caches.push(LayerCache::Dropout { mask });
                }
            }
        }
        Ok(ForwardCache { layers: caches, logits: h })
    }

    /// Backpropagates `d_logits`; returns the gradient in [`Self::flat_params`] order.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &DMatrix<f64>) -> Vec<f64> {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut g = d_logits.clone();
        for (k, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            g = match (layer, c) {
                (Layer::Dense { w, .. }, LayerCache::Dense { input }) => {
                    let dw = g.transpose() * input;
                    let db: Vec<f64> = (0..g.ncols()).map(|j| g.column(j).sum()).collect();
                    let mut flat: Vec<f64> = dw.as_slice().to_vec();
                    flat.extend(db);
                    grads[k] = flat;
                    &g * w
                }
                (Layer::BatchNorm { gamma, .. }, LayerCache::BatchNorm { xhat, inv_std, .. }) => {
                    let n = g.nrows() as f64;
                    let d = g.ncols();
                    let dbeta: Vec<f64> = (0..d).map(|j| g.column(j).sum()).collect();
                    let dgamma: Vec<f64> = (0..d).map(|j| g.column(j).dot(&xhat.column(j))).collect();
                    let dx = DMatrix::from_fn(g.nrows(), d, |i, j| {
                        gamma[j] * inv_std[j] / n * (n * g[(i, j)] - dbeta[j] - xhat[(i, j)] * dgamma[j])
                    });
                    let mut flat = dgamma;
                    flat.extend(dbeta);
                    grads[k] = flat;
                    dx
                }
                (Layer::Relu, LayerCache::Relu { input }) => g.zip_map(input, |gv, x| if x > 0.0 { gv } else { 0.0 }),
                (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => g.component_mul(mask),
                _ => unreachable!("cache built by forward_train for this model"),
            };
        }
        grads.concat()
    }

    /// Loss and gradient on one batch with fixed dropout masks.
    pub fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        labels: &[usize],
        masks: &[Option<DMatrix<f64>>],
    ) -> Result<(f64, Vec<f64>)> {
        if labels.len() != x.nrows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: x.nrows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.output_dim()) {
            return Err(Error::InvalidInput(format!("label {bad} out of range")));
        }
        let cache = self.forward_train(x, masks)?;
        let (loss, d) = softmax_cross_entropy(&cache.logits, labels);
        Ok((loss, self.backward(&cache, &d)))
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Trainable parameters: dense weights (column-major) then bias, batch-norm
    /// gamma then beta, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b } => {
                    out.extend_from_slice(w.as_slice());
                    out.extend_from_slice(b.as_slice());
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.extend_from_slice(gamma.as_slice());
                    out.extend_from_slice(beta.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::LengthMismatch {
                what: "parameter vector",
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + dst.len()]);
            off += dst.len();
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b } => {
                    take(w.as_mut_slice());
                    take(b.as_mut_slice());
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    take(gamma.as_mut_slice());
                    take(beta.as_mut_slice());
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (
                Layer::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                },
                LayerCache::BatchNorm { mean, var, .. },
            ) = (layer, c)
            {
                *running_mean = &*running_mean * *momentum + mean * (1.0 - *momentum);
                *running_var = &*running_var * *momentum + var * (1.0 - *momentum);
            }
        }
    }
}

fn dense_forward(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut y = x * w.transpose();
    for mut row in y.row_iter_mut() {
        row += b.transpose();
    }
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            plateau_patience: 10,
            lr_factor: 0.5,
            min_lr: 1e-5,
            batch_size: 32,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.plateau_patience > 0
            && self.lr_factor > 0.0
            && self.lr_factor < 1.0
            && self.min_lr > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid training config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Eval-mode accuracy of the returned weights on the rows they were fitted to.
    pub fit_accuracy: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub fn accuracy_of(model: &MlpModel, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let pred = model.predict(x)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Mini-batch Adam with plateau learning-rate decay; returns the weights from
/// the epoch with the best validation accuracy (latest on ties).
pub fn mlp_train(
    architecture: Architecture,
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainingLog)> {
    let model = architecture.build(config.seed)?;
    train_model(model, train_x, train_y, val_x, val_y, config)
}

/// Like [`mlp_train`] but starting from an existing network.
pub fn train_model(
    mut model: MlpModel,
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainingLog)> {
    config.validate()?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::InvalidInput("empty training or validation split".into()));
    }
    for (what, x, y) in [("train labels", train_x, train_y), ("validation labels", val_x, val_y)] {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: x.len(),
                got: y.len(),
            });
        }
    }
    let xt = to_batch(train_x);
    let xv = to_batch(val_x);
    model.check_input(&xt)?;
    model.check_input(&xv)?;

    // Shuffling and dropout draw from a stream separate from initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(model.n_params());
    let mut lr = config.learning_rate;
    let mut best = (model.clone(), f64::NEG_INFINITY, 0usize);
    let mut prev_best = f64::NEG_INFINITY;
    let mut since_improved = 0;
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let bs = config.batch_size;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut starts: Vec<usize> = (0..order.len()).step_by(bs).collect();
        // a lone trailing sample has no batch statistics; fold it into the previous batch
        if starts.len() > 1 && order.len() - starts[starts.len() - 1] == 1 {
            starts.pop();
        }
        let mut loss_sum = 0.0;
        for (b, &start) in starts.iter().enumerate() {
            let end = starts.get(b + 1).copied().unwrap_or(order.len());
            let idx = &order[start..end];
            let xb = DMatrix::from_fn(idx.len(), xt.ncols(), |i, j| xt[(idx[i], j)]);
            let yb: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let masks = model.sample_masks(idx.len(), &mut rng);
            let cache = model.forward_train(&xb, &masks)?;
            let (loss, d) = softmax_cross_entropy(&cache.logits, &yb);
            let grad = model.backward(&cache, &d);
            model.update_running_stats(&cache);
            let mut p = model.flat_params();
            adam.step(&mut p, &grad, lr);
            model.set_flat_params(&p)?;
            loss_sum += loss * idx.len() as f64;
        }
        if !loss_sum.is_finite() {
            return Err(Error::Diverged(format!("training loss not finite at epoch {epoch}")));
        }

        let val_acc = accuracy_of(&model, &xv, val_y)?;
        epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / order.len() as f64,
            val_accuracy: val_acc,
        });
        // Ties refresh the snapshot but do not reset the plateau counter.
        if val_acc >= best.1 {
            best = (model.clone(), val_acc, epoch);
        }
        if val_acc > prev_best {
            prev_best = val_acc;
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved >= config.plateau_patience {
                lr = (lr * config.lr_factor).max(config.min_lr);
                since_improved = 0;
            }
        }
    }

    let (model, best_val_accuracy, best_epoch) = best;
    let fit_accuracy = accuracy_of(&model, &xt, train_y)?;
    Ok((
        model,
        TrainingLog {
            epochs,
            best_epoch,
            best_val_accuracy,
            fit_accuracy,
        },
    ))
}

/// Flat, serializable form of a layer. Dense weights are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerRecord {
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
        eps: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub architecture: Architecture,
    pub layers: Vec<LayerRecord>,
}

impl From<&MlpModel> for MlpRecord {
    fn from(m: &MlpModel) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { w, b } => LayerRecord::Dense {
                    inputs: w.ncols(),
                    outputs: w.nrows(),
                    weights: w.transpose().as_slice().to_vec(),
                    bias: b.as_slice().to_vec(),
                },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum,
                    eps,
                } => LayerRecord::BatchNorm {
                    gamma: gamma.as_slice().to_vec(),
                    beta: beta.as_slice().to_vec(),
                    running_mean: running_mean.as_slice().to_vec(),
                    running_var: running_var.as_slice().to_vec(),
                    momentum: *momentum,
                    eps: *eps,
                },
                Layer::Relu => LayerRecord::Relu,
                Layer::Dropout { rate } => LayerRecord::Dropout { rate: *rate },
            })
            .collect();
        MlpRecord {
            architecture: m.architecture,
            layers,
        }
    }
}

impl TryFrom<MlpRecord> for MlpModel {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        let mut layers = Vec::with_capacity(r.layers.len());
        for l in r.layers {
            layers.push(match l {
                LayerRecord::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => {
                    if weights.len() != inputs * outputs {
                        return Err(Error::LengthMismatch {
                            what: "dense weights",
                            expected: inputs * outputs,
                            got: weights.len(),
                        });
                    }
                    Layer::Dense {
                        w: DMatrix::from_row_slice(outputs, inputs, &weights),
                        b: DVector::from_vec(bias),
                    }
                }
                LayerRecord::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum,
                    eps,
                } => Layer::BatchNorm {
                    gamma: DVector::from_vec(gamma),
                    beta: DVector::from_vec(beta),
                    running_mean: DVector::from_vec(running_mean),
                    running_var: DVector::from_vec(running_var),
                    momentum,
                    eps,
                },
                LayerRecord::Relu => Layer::Relu,
                LayerRecord::Dropout { rate } => Layer::Dropout { rate },
            });
        }
        MlpModel::from_layers(r.architecture, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of the loss over every parameter.
    fn grad_check(model: &MlpModel, x: &DMatrix<f64>, y: &[usize], masks: &[Option<DMatrix<f64>>]) -> f64 {
        let (_, analytic) = model.loss_and_gradient(x, y, masks).unwrap();
        let p0 = model.flat_params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p0.len() {
            let mut m = model.clone();
            let mut p = p0.clone();
            p[i] += h;
            m.set_flat_params(&p).unwrap();
            let lp = m.loss_and_gradient(x, y, masks).unwrap().0;
            p[i] -= 2.0 * h;
            m.set_flat_params(&p).unwrap();
            let lm = m.loss_and_gradient(x, y, masks).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut m = Architecture::Au8Net.build(0).unwrap();
        let n = m.n_params();
        m.set_flat_params(&vec![0.0; n]).unwrap();
        let p = m.predict_proba(&random_batch(3, 8, 1)).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_eval_is_repeatable() {
        let m = Architecture::Fp68Net.build(3).unwrap();
        let x = random_batch(5, 136, 2);
        let p = m.predict_proba(&x).unwrap();
        for r in p.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(p, m.predict_proba(&x).unwrap());
        assert!(m.predict_proba(&random_batch(2, 8, 0)).is_err());
    }

    #[test]
    fn shapes_follow_architecture() {
        let a = Architecture::Au8Net.build(0).unwrap();
        assert_eq!((a.input_dim(), a.output_dim(), a.n_params()), (8, 4, 8 * 8 + 8 + 8 * 4 + 4));
        let f = Architecture::Fp68Net.build(0).unwrap();
        assert_eq!((f.input_dim(), f.output_dim()), (136, 4));
        assert_eq!(f.n_params(), 136 * 16 + 16 + 32 + 16 * 4 + 4);
        let bad = vec![Layer::dense_he(3, 4, &mut ChaCha8Rng::seed_from_u64(0)), Layer::batch_norm(5)];
        assert!(MlpModel::from_layers(Architecture::Custom, bad).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let y = [0, 1, 2, 3, 1, 2];
        let au = Architecture::Au8Net.build(11).unwrap();
        let x = random_batch(6, 8, 4);
        let masks = au.sample_masks(6, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(grad_check(&au, &x, &y, &masks) < 1e-4);

        // A small network with every layer kind; the fixed dropout mask
        // makes the loss a deterministic function of the parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layers = vec![
            Layer::dense_he(5, 6, &mut rng),
            Layer::batch_norm(6),
            Layer::Relu,
            Layer::Dropout { rate: 0.5 },
            Layer::dense_he(6, 4, &mut rng),
        ];
        if let Layer::BatchNorm { gamma, beta, .. } = &mut layers[1] {
            gamma.apply(|g| *g = 1.0 + rng.random_range(-0.3..0.3));
            beta.apply(|b| *b = rng.random_range(-0.3..0.3));
        }
        let net = MlpModel::from_layers(Architecture::Custom, layers).unwrap();
        let x = random_batch(6, 5, 5);
        let masks = net.sample_masks(6, &mut rng);
        assert!(grad_check(&net, &x, &y, &masks) < 1e-4);
    }

    #[test]
    fn dropout_eval_is_expectation_of_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = MlpModel::from_layers(
            Architecture::Custom,
            vec![Layer::Dropout { rate: 0.8 }, Layer::dense_he(3, 2, &mut rng)],
        )
        .unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 0.25]);
        let eval = net.logits_eval(&x).unwrap();
        let mut mean = DMatrix::zeros(1, 2);
        let n = 100_000;
        for _ in 0..n {
            let masks = net.sample_masks(1, &mut rng);
            mean += net.forward_train(&x, &masks).unwrap().logits;
        }
        mean /= n as f64;
        assert!((mean - eval).amax() < 1e-2);
    }

    #[test]
    fn separable_toy_reaches_high_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..120 {
            let c = i % 2;
            let mut v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            v[0] = if c == 0 { -1.5 } else { 1.5 } + rng.random_range(-0.4..0.4);
            x.push(v);
            y.push(c);
        }
        let config = TrainConfig {
            max_epochs: 200,
            seed: 5,
            ..TrainConfig::default()
        };
        let (m, log) = mlp_train(Architecture::Au8Net, &x[..100], &y[..100], &x[100..], &y[100..], &config).unwrap();
        assert!(log.fit_accuracy >= 0.99, "{}", log.fit_accuracy);
        assert_eq!(accuracy_of(&m, &to_batch(&x[..100]), &y[..100]).unwrap(), log.fit_accuracy);
        assert_eq!(log.epochs.len(), 200);
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..136).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let config = TrainConfig {
            max_epochs: 15,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || mlp_train(Architecture::Fp68Net, &x[..30], &y[..30], &x[30..], &y[30..], &config).unwrap();
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(serde_json::to_string(&l1).unwrap(), serde_json::to_string(&l2).unwrap());
        assert_eq!(m1, m2);
        let json = serde_json::to_string(&MlpRecord::from(&m1)).unwrap();
        let back = MlpModel::try_from(serde_json::from_str::<MlpRecord>(&json).unwrap()).unwrap();
        assert_eq!(back, m1);
    }

    #[test]
    fn plateau_halves_learning_rate() {
        // Constant validation accuracy: no improvement after the first epoch.
        let x = vec![vec![0.0; 8]; 4];
        let y = vec![0, 1, 2, 3];
        let config = TrainConfig {
            max_epochs: 25,
            ..TrainConfig::default()
        };
        let (_, log) = mlp_train(Architecture::Au8Net, &x, &y, &x, &y, &config).unwrap();
        assert_eq!(log.epochs[10].learning_rate, 1e-3);
        assert_eq!(log.epochs[11].learning_rate, 5e-4);
        assert_eq!(log.epochs[21].learning_rate, 2.5e-4);
        assert_eq!(log.best_epoch, 25);
    }

    #[test]
    fn empty_split_rejected() {
        let x = vec![vec![0.0; 8]];
        assert!(mlp_train(Architecture::Au8Net, &[], &[], &x, &[0], &TrainConfig::default()).is_err());
    }
}
