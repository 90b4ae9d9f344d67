//! Feed-forward regression network: sigmoid hidden layers, identity output,
//! trained with mini-batch Adam on squared error with inverted dropout.
//!
//! Everything is single-threaded and driven by one seeded ChaCha stream, so
//! training is bitwise reproducible for a given seed and dataset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credibility::CredibilityCalibration;
use crate::dataset::SplitInfo;
use crate::domain::{GroundClass, N_COP, N_CXP, N_FEATURES, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::ingest::FeatureStats;
use crate::stats::sigmoid;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Drop probability on hidden activations during training.
    pub dropout: f64,
    /// Widths of the hidden layers; the output layer is always one unit.
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 200,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            dropout: 0.2,
            hidden_layers: vec![50, 50, 50],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return bad("need at least one hidden layer of non-zero width");
        }
        Ok(())
    }

    /// `[input, hidden..., 1]`.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden_layers);
        sizes.push(1);
        sizes
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Fully connected layer, `weights` row-major `[outputs x inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::DimensionMismatch {
                expected: self.inputs * self.outputs,
                actual: self.weights.len(),
            });
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Stack of dense layers; every layer but the last is followed by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    pub fn xavier<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        Network {
            layers: sizes.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Network {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        for l in &self.layers {
            l.check()?;
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: w[0].outputs,
                    actual: w[1].inputs,
                });
            }
        }
        if self.layers.last().unwrap().outputs != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: self.layers.last().unwrap().outputs,
            });
        }
        Ok(())
    }

    /// Activations of every layer for one input (index 0 is the input).
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let out: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let z = layer.bias[o] + dot(layer.row(o), input);
                    if l == last {
                        z
                    } else {
                        sigmoid(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.activations(x).last().unwrap()[0]
    }

    /// Exact d(output)/d(input) by reverse-mode differentiation.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let acts = self.activations(x);
        let last = self.layers.len() - 1;
        // d output / d (activations of the current layer)
        let mut upstream = vec![1.0];
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let dz: Vec<f64> = if l == last {
                upstream.clone()
            } else {
                acts[l + 1]
                    .iter()
                    .zip(&upstream)
                    .map(|(s, g)| g * s * (1.0 - s))
                    .collect()
            };
            let mut down = vec![0.0; layer.inputs];
            for (o, g) in dz.iter().enumerate() {
                for (d, w) in down.iter_mut().zip(layer.row(o)) {
                    *d += g * w;
                }
            }
            upstream = down;
        }
        upstream
    }
}

/// Inverted-dropout mask: zero with probability `p`, `1/(1-p)` otherwise.
pub fn dropout_mask<R: Rng>(rng: &mut R, p: f64, n: usize) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Row-major design matrix with scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Dataset {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        self.x.extend_from_slice(x);
        self.y.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &i in idx {
            out.x.extend_from_slice(self.row(i));
            out.y.push(self.y[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean mini-batch loss (with dropout) per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean squared error over the training set without dropout.
    pub final_mse: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

/// Forward and backward pass over one mini-batch (`x` row-major). Hidden
/// activations of layer `l` are multiplied by `masks[l]` when it is non-empty.
/// Fills `grads` with d(mean squared error)/d(parameters), per layer weights
/// then biases, and returns the batch loss.
fn batch_pass(
    net: &Network,
    x: &[f64],
    y: &[f64],
    masks: &[Vec<f64>],
    acts: &mut [Vec<f64>],
    grads: &mut [Vec<f64>],
) -> f64 {
    let n_layers = net.layers.len();
    let b = y.len();
    acts[0].clear();
    acts[0].extend_from_slice(x);
    for l in 0..n_layers {
        let layer = &net.layers[l];
        let (prev, rest) = acts.split_at_mut(l + 1);
        let input = &prev[l];
        let out = &mut rest[0];
        out.clear();
        out.resize(b * layer.outputs, 0.0);
        let hidden = l + 1 < n_layers;
        for s in 0..b {
            let a_in = &input[s * layer.inputs..(s + 1) * layer.inputs];
            for o in 0..layer.outputs {
                let z = layer.bias[o] + dot(layer.row(o), a_in);
                out[s * layer.outputs + o] = if hidden { sigmoid(z) } else { z };
            }
        }
        if hidden && !masks[l + 1].is_empty() {
            for (a, m) in out.iter_mut().zip(&masks[l + 1]) {
                *a *= m;
            }
        }
    }

    let pred = &acts[n_layers];
    let mut delta: Vec<f64> = Vec::with_capacity(b);
    let mut loss = 0.0;
    for s in 0..b {
        let r = pred[s] - y[s];
        loss += r * r;
        delta.push(2.0 * r / b as f64);
    }
    loss /= b as f64;

    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        let input = &acts[l];
        let g = &mut grads[l];
        g.iter_mut().for_each(|v| *v = 0.0);
        let (gw, gb) = g.split_at_mut(layer.weights.len());
        for s in 0..b {
            let a_in = &input[s * layer.inputs..(s + 1) * layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[s * layer.outputs + o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (gwi, ai) in row.iter_mut().zip(a_in) {
                    *gwi += d * ai;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut next = vec![0.0; b * layer.inputs];
        for s in 0..b {
            let nd = &mut next[s * layer.inputs..(s + 1) * layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[s * layer.outputs + o];
                if d == 0.0 {
                    continue;
                }
                for (n, w) in nd.iter_mut().zip(layer.row(o)) {
                    *n += d * w;
                }
            }
        }
        // `input` holds sigmoid output times mask; undo the mask to get σ.
        let mask = &masks[l];
        for (k, n) in next.iter_mut().enumerate() {
            let m = if mask.is_empty() { 1.0 } else { mask[k] };
            if m == 0.0 {
                *n = 0.0;
            } else {
                let sig = input[k] / m;
                *n *= m * sig * (1.0 - sig);
            }
        }
        delta = next;
    }
    loss
}

/// Trains a fresh network on `data` and returns it with its loss history.
pub fn train_network(data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if data.x.len() != data.len() * data.dim {
        return Err(Error::DimensionMismatch {
            expected: data.len() * data.dim,
            actual: data.x.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes = cfg.layer_sizes(data.dim);
    let mut net = Network::xavier(&sizes, &mut rng);
    let n_layers = net.layers.len();

    // Parameter vectors per layer: weights followed by biases.
    let param_len: Vec<usize> = net.layers.iter().map(|l| l.weights.len() + l.bias.len()).collect();
    let mut adam = Adam {
        m: param_len.iter().map(|&n| vec![0.0; n]).collect(),
        v: param_len.iter().map(|&n| vec![0.0; n]).collect(),
        step: 0,
    };
    let mut grads: Vec<Vec<f64>> = param_len.iter().map(|&n| vec![0.0; n]).collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut acts: Vec<Vec<f64>> = sizes.iter().map(|_| Vec::new()).collect();
    let mut masks: Vec<Vec<f64>> = sizes.iter().map(|_| Vec::new()).collect();
    let mut bx: Vec<f64> = Vec::new();
    let mut by: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in batch {
                bx.extend_from_slice(data.row(i));
                by.push(data.y[i]);
            }
            if cfg.dropout > 0.0 {
                for l in 1..n_layers {
                    masks[l] = dropout_mask(&mut rng, cfg.dropout, batch.len() * sizes[l]);
                }
            }
            let loss = batch_pass(&net, &bx, &by, &masks, &mut acts, &mut grads);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += loss;
            batches += 1;

            // Adam update.
            adam.step += 1;
            let bc1 = 1.0 - cfg.adam_beta1.powi(adam.step);
            let bc2 = 1.0 - cfg.adam_beta2.powi(adam.step);
            for l in 0..n_layers {
                let layer = &mut net.layers[l];
                let nw = layer.weights.len();
                let (m, v, g) = (&mut adam.m[l], &mut adam.v[l], &grads[l]);
                for k in 0..g.len() {
                    m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g[k];
                    v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
                    let update = cfg.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.adam_epsilon);
                    if k < nw {
                        layer.weights[k] -= update;
                    } else {
                        layer.bias[k - nw] -= update;
                    }
                }
            }
        }
        epoch_losses.push(loss_sum / batches as f64);
    }

    let final_mse = mse(&net, data);
    if !final_mse.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok((
        net,
        TrainReport {
            epoch_losses,
            final_mse,
        },
    ))
}

/// Mean squared error of the network on a dataset (inference mode).
pub fn mse(net: &Network, data: &Dataset) -> f64 {
    let mut s = 0.0;
    for i in 0..data.len() {
        let r = net.forward(data.row(i)) - data.y[i];
        s += r * r;
    }
    s / data.len() as f64
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub hidden: String,
    pub output: String,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        ActivationSpec {
            hidden: "sigmoid".into(),
            output: "identity".into(),
        }
    }
}

/// A trained per-ground-class model with everything needed at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub schema_version: u32,
    pub ground_class: GroundClass,
    pub arch: Vec<usize>,
    pub activation: ActivationSpec,
    pub feature_scaler: FeatureStats,
    /// How the feature scaler was fitted.
    pub standardization: String,
    pub weights: Network,
    pub train_config: TrainConfig,
    pub training: TrainReport,
    /// Fingerprint of the training corpus (also the neighbour corpus).
    pub corpus_fingerprint: String,
    pub calibration: Option<CredibilityCalibration>,
    pub split: Option<SplitInfo>,
}

impl MlpModel {
    pub fn new(
        ground_class: GroundClass,
        network: Network,
        feature_scaler: FeatureStats,
        train_config: TrainConfig,
        training: TrainReport,
        corpus_fingerprint: String,
    ) -> Result<Self> {
        network.check()?;
        if network.input_dim() != N_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: N_FEATURES,
                actual: network.input_dim(),
            });
        }
        Ok(MlpModel {
            schema_version: SCHEMA_VERSION,
            ground_class,
            arch: network.sizes(),
            activation: ActivationSpec::default(),
            feature_scaler,
            standardization: "per_ground_class".into(),
            weights: network,
            train_config,
            training,
            corpus_fingerprint,
            calibration: None,
            split: None,
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.weights.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Raw optimality for a standardized input.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.weights.forward(x))
    }

    /// Gradient of [`predict`](Self::predict) with respect to the standardized input.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.weights.input_gradient(x))
    }

    pub fn standardize(&self, cop: &[f64; N_COP], cxp: &[f64; N_CXP]) -> [f64; N_FEATURES] {
        let mut x = [0.0; N_FEATURES];
        x[..N_COP].copy_from_slice(cop);
        x[N_COP..].copy_from_slice(cxp);
        self.feature_scaler.apply(&x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: MlpModel = serde_json::from_str(s)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model schema_version {}",
                m.schema_version
            )));
        }
        m.weights.check()?;
        if m.arch != m.weights.sizes() {
            return Err(Error::InvalidConfig("arch does not match weights".into()));
        }
        Ok(m)
    }
}

/// Trains a per-class model on standardized inputs.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    ground_class: GroundClass,
    feature_scaler: FeatureStats,
    corpus_fingerprint: String,
) -> Result<MlpModel> {
    if data.dim != N_FEATURES {
        return Err(Error::DimensionMismatch {
            expected: N_FEATURES,
            actual: data.dim,
        });
    }
    let (net, report) = train_network(data, cfg)?;
    MlpModel::new(ground_class, net, feature_scaler, cfg.clone(), report, corpus_fingerprint)
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub hidden_layers: usize,
    pub neurons: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

/// Cartesian hyper-parameter grid evaluated by k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub hidden_layers: Vec<usize>,
    pub neurons: Vec<usize>,
    pub dropout: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Overrides the base epoch count for every cell.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Cells whose mean loss is within this of the best are treated as tied.
    #[serde(default)]
    pub tie_tolerance: f64,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_folds() -> usize {
    10
}

impl Default for Grid {
    /// Small desk-scale grid.
    fn default() -> Self {
        Grid {
            schema_version: SCHEMA_VERSION,
            hidden_layers: vec![2, 3],
            neurons: vec![30, 50],
            dropout: vec![0.0, 0.2],
            learning_rate: vec![0.01],
            epochs: Some(100),
            folds: 10,
            tie_tolerance: 0.0,
        }
    }
}

impl Grid {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &hidden_layers in &self.hidden_layers {
            for &neurons in &self.neurons {
                for &dropout in &self.dropout {
                    for &learning_rate in &self.learning_rate {
                        cells.push(GridCell {
                            hidden_layers,
                            neurons,
                            dropout,
                            learning_rate,
                        });
                    }
                }
            }
        }
        cells
    }

    fn config_for(&self, cell: &GridCell, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            hidden_layers: vec![cell.neurons; cell.hidden_layers],
            dropout: cell.dropout,
            learning_rate: cell.learning_rate,
            epochs: self.epochs.unwrap_or(base.epochs),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub cell: GridCell,
    pub fold_losses: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: TrainConfig,
    pub best_index: usize,
    pub scores: Vec<CellScore>,
}

/// Index ranges of `k` contiguous folds over a seeded permutation.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    folds
}

/// Picks the cell with the lowest mean validation loss; near-ties (within
/// `tie_tolerance`) go to fewer layers, then fewer neurons, then lower rate.
pub fn select_best(scores: &[CellScore], tie_tolerance: f64) -> Option<usize> {
    let best = scores.iter().map(|s| s.mean_loss).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.mean_loss <= best + tie_tolerance)
        .min_by(|(_, a), (_, b)| {
            a.cell
                .hidden_layers
                .cmp(&b.cell.hidden_layers)
                .then(a.cell.neurons.cmp(&b.cell.neurons))
                .then(a.cell.learning_rate.total_cmp(&b.cell.learning_rate))
                .then(a.mean_loss.total_cmp(&b.mean_loss))
        })
        .map(|(i, _)| i)
}

pub fn kfold_grid_search(data: &Dataset, grid: &Grid, base: &TrainConfig) -> Result<GridSearchResult> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let k = grid.folds;
    if k < 2 || data.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot form {k} folds",
            data.len()
        )));
    }
    let folds = kfold_indices(data.len(), k, base.seed);
    let mut scores = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = grid.config_for(&cell, base);
        let mut fold_losses = Vec::with_capacity(k);
        for (f, held_out) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            let (net, _) = train_network(&data.subset(&train_idx), &cfg)?;
            fold_losses.push(mse(&net, &data.subset(held_out)));
        }
        let mean_loss = fold_losses.iter().sum::<f64>() / k as f64;
        log::info!("grid cell {cell:?}: mean validation MSE {mean_loss:.6}");
        scores.push(CellScore {
            cell,
            fold_losses,
            mean_loss,
        });
    }
    let best_index = select_best(&scores, grid.tie_tolerance).ok_or(Error::NonFiniteLoss { epoch: 0 })?;
    Ok(GridSearchResult {
        best: grid.config_for(&scores[best_index].cell, base),
        best_index,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn one_unit_network(w1: [f64; 2], b1: f64, w2: f64, b2: f64) -> Network {
        Network {
            layers: vec![
                Dense {
                    inputs: 2,
                    outputs: 1,
                    weights: w1.to_vec(),
                    bias: vec![b1],
                },
                Dense {
                    inputs: 1,
                    outputs: 1,
                    weights: vec![w2],
                    bias: vec![b2],
                },
            ],
        }
    }

    #[test]
    fn zero_network_outputs_zero_with_zero_gradient() {
        let net = Network::zeros(&[24, 50, 50, 50, 1]);
        let x: Vec<f64> = (0..24).map(|i| i as f64 * 0.1 - 1.0).collect();
        assert_eq!(net.forward(&x), 0.0);
        assert!(net.input_gradient(&x).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn hand_built_forward_and_gradient() {
        let net = one_unit_network([0.7, -1.3], 0.25, 2.0, -0.5);
        let x = [0.4, 0.9];
        let z = 0.7 * 0.4 - 1.3 * 0.9 + 0.25;
        let s = 1.0 / (1.0 + (-z as f64).exp());
        assert!((net.forward(&x) - (2.0 * s - 0.5)).abs() < 1e-12);
        let ds = s * (1.0 - s);
        let g = net.input_gradient(&x);
        assert!((g[0] - 2.0 * ds * 0.7).abs() < 1e-12);
        assert!((g[1] - 2.0 * ds * -1.3).abs() < 1e-12);
    }

    #[test]
    fn predict_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::xavier(&[6, 8, 1], &mut rng);
        let x = [0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        assert_eq!(net.forward(&x).to_bits(), net.forward(&x).to_bits());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let net = Network::xavier(&[7, 9, 5, 1], &mut rng);
            let x: Vec<f64> = (0..7).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = net.input_gradient(&x);
            let h = 1e-5;
            for i in 0..7 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "coordinate {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sizes = [4, 6, 5, 1];
        let net = Network::xavier(&sizes, &mut rng);
        let b = 7;
        let x: Vec<f64> = (0..b * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..b).map(|_| StandardNormal.sample(&mut rng)).collect();
        for p in [0.0, 0.3] {
            let masks: Vec<Vec<f64>> = (0..sizes.len())
                .map(|l| {
                    if p > 0.0 && l > 0 && l + 1 < sizes.len() {
                        dropout_mask(&mut rng, p, b * sizes[l])
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            let mut acts = vec![Vec::new(); sizes.len()];
            let mut grads: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.weights.len() + l.bias.len()]).collect();
            batch_pass(&net, &x, &y, &masks, &mut acts, &mut grads);
            let loss_at = |n: &Network| {
                let mut a = vec![Vec::new(); sizes.len()];
                let mut g: Vec<Vec<f64>> = n.layers.iter().map(|l| vec![0.0; l.weights.len() + l.bias.len()]).collect();
                batch_pass(n, &x, &y, &masks, &mut a, &mut g)
            };
            let h = 1e-6;
            for l in 0..net.layers.len() {
                let nw = net.layers[l].weights.len();
                for k in 0..grads[l].len() {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    if k < nw {
                        plus.layers[l].weights[k] += h;
                        minus.layers[l].weights[k] -= h;
                    } else {
                        plus.layers[l].bias[k - nw] += h;
                        minus.layers[l].bias[k - nw] -= h;
                    }
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    assert!((fd - grads[l][k]).abs() < 1e-7 * (1.0 + fd.abs()), "p={p} layer {l} param {k}: {fd} vs {}", grads[l][k]);
                }
            }
        }
    }

    #[test]
    fn inverted_dropout_preserves_expected_preactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..50).map(|i| sigmoid(i as f64 * 0.1 - 2.5)).collect();
        let w: Vec<f64> = (0..50).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let inference = dot(&w, &a);
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let m = dropout_mask(&mut rng, 0.2, 50);
                let dropped: Vec<f64> = a.iter().zip(&m).map(|(x, k)| x * k).collect();
                dot(&w, &dropped)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - inference).abs() < 3.0 * se, "{mean} vs {inference} (se {se})");
    }

    fn linear_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::new(N_FEATURES);
        for _ in 0..n {
            let x: Vec<f64> = (0..N_FEATURES).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = 0.3 * x[0] - 0.7 * x[6];
            d.push(&x, y).unwrap();
        }
        d
    }

    #[test]
    fn constant_target_is_fitted() {
        let mut d = linear_dataset(400, 5);
        d.y.iter_mut().for_each(|y| *y = 1.75);
        let cfg = TrainConfig {
            epochs: 60,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let (net, _) = train_network(&d, &cfg).unwrap();
        for i in 0..d.len() {
            assert!((net.forward(d.row(i)) - 1.75).abs() < 1e-2);
        }
    }

    #[test]
    fn linear_target_reaches_low_training_error() {
        let d = linear_dataset(2000, 6);
        // Dropout regularises away the last digits of the fit; the bound is
        // about representability, so train without it.
        let cfg = TrainConfig {
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let (_, report) = train_network(&d, &cfg).unwrap();
        assert!(report.final_mse < 1e-3, "training MSE {}", report.final_mse);
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert_eq!(report.epoch_losses.len(), 200);
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let d = linear_dataset(300, 7);
        let cfg = TrainConfig {
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, _) = train_network(&d, &cfg).unwrap();
        let (b, _) = train_network(&d, &cfg).unwrap();
        let bits = |n: &Network| -> Vec<u64> {
            n.layers
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let (c, _) = train_network(&d, &TrainConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn dimension_errors() {
        let mut d = Dataset::new(3);
        assert!(matches!(d.push(&[1.0, 2.0], 0.0), Err(Error::DimensionMismatch { .. })));
        let stats = FeatureStats {
            schema_version: SCHEMA_VERSION,
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        };
        let model = MlpModel::new(
            GroundClass::Gc1,
            Network::zeros(&[N_FEATURES, 4, 1]),
            stats,
            TrainConfig::default(),
            TrainReport {
                epoch_losses: vec![],
                final_mse: 0.0,
            },
            String::new(),
        )
        .unwrap();
        assert!(matches!(model.predict(&[0.0; 5]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(model.input_gradient(&[0.0; 25]), Err(Error::DimensionMismatch { .. })));
        assert!(train(&d, &TrainConfig::default(), GroundClass::Gc1, model.feature_scaler.clone(), String::new()).is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { hidden_layers: vec![], ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn model_json_round_trip_predicts_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = FeatureStats {
            schema_version: SCHEMA_VERSION,
            mean: std::array::from_fn(|i| i as f64),
            std: std::array::from_fn(|i| 1.0 + i as f64 / 10.0),
        };
        let model = MlpModel::new(
            GroundClass::Gc2,
            Network::xavier(&[N_FEATURES, 50, 50, 50, 1], &mut rng),
            stats,
            TrainConfig::default(),
            TrainReport {
                epoch_losses: vec![0.5, 0.25],
                final_mse: 0.125,
            },
            "abc".into(),
        )
        .unwrap();
        let back = MlpModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let x: Vec<f64> = (0..N_FEATURES).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(back.predict(&x).unwrap().to_bits(), model.predict(&x).unwrap().to_bits());
    }

    #[test]
    fn folds_partition_the_data() {
        let folds = kfold_indices(23, 10, 4);
        assert_eq!(folds.len(), 10);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 2 || f.len() == 3));
    }

    fn small_grid(hidden_layers: Vec<usize>, learning_rate: Vec<f64>) -> Grid {
        Grid {
            hidden_layers,
            neurons: vec![8],
            dropout: vec![0.0],
            learning_rate,
            epochs: Some(40),
            folds: 3,
            ..Grid::default()
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let d = linear_dataset(30, 1);
        let grid = small_grid(vec![], vec![0.01]);
        assert!(matches!(kfold_grid_search(&d, &grid, &TrainConfig::default()), Err(Error::EmptyGrid)));
    }

    #[test]
    fn single_cell_grid_returns_that_cell() {
        let d = linear_dataset(60, 1);
        let grid = small_grid(vec![2], vec![0.01]);
        let res = kfold_grid_search(&d, &grid, &TrainConfig::default()).unwrap();
        assert_eq!(res.best_index, 0);
        assert_eq!(res.best.hidden_layers, vec![8, 8]);
        assert_eq!(res.scores[0].fold_losses.len(), 3);
    }

    #[test]
    fn dominant_cell_wins() {
        let d = linear_dataset(150, 2);
        // A vanishing learning rate leaves the network at its initialization.
        let grid = small_grid(vec![1], vec![1e-7, 0.01]);
        let res = kfold_grid_search(&d, &grid, &TrainConfig::default()).unwrap();
        let (slow, fast) = (&res.scores[0], &res.scores[1]);
        assert!(fast.fold_losses.iter().zip(&slow.fold_losses).all(|(f, s)| f < s));
        assert_eq!(res.best_index, 1);
    }

    #[test]
    fn near_ties_prefer_fewer_layers() {
        let d = linear_dataset(1200, 3);
        let grid = Grid {
            hidden_layers: vec![3, 1],
            neurons: vec![20],
            dropout: vec![0.0],
            learning_rate: vec![0.01],
            epochs: Some(200),
            folds: 3,
            tie_tolerance: 1e-2,
            ..Grid::default()
        };
        let res = kfold_grid_search(&d, &grid, &TrainConfig::default()).unwrap();
        assert!(res.scores.iter().all(|s| s.mean_loss < 1e-2), "{:?}", res.scores);
        assert_eq!(res.best.hidden_layers.len(), 1);
    }

    #[test]
    fn selection_tie_break_order() {
        let score = |hidden_layers, neurons, learning_rate, mean_loss| CellScore {
            cell: GridCell {
                hidden_layers,
                neurons,
                dropout: 0.0,
                learning_rate,
            },
            fold_losses: vec![],
            mean_loss,
        };
        let scores = vec![
            score(3, 30, 0.01, 0.1),
            score(2, 50, 0.01, 0.1),
            score(2, 30, 0.1, 0.1),
            score(2, 30, 0.01, 0.1),
            score(1, 10, 0.01, 0.5),
        ];
        assert_eq!(select_best(&scores, 0.0), Some(3));
        assert_eq!(select_best(&scores, 1.0), Some(4));
    }
}
