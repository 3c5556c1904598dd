//! Dense feed-forward network with shift-dropout, softmax cross-entropy and RMSProp.
//!
//! Every hidden layer computes `z = x·W + b`, applies its activation and, in
//! training mode, shift-dropout. The output layer is affine only; softmax lives
//! in the loss. `W` is `fan_in × fan_out`, so column `j` holds the incoming
//! weights of unit `j`.
//!
//! The layer-wise moment analysis assumes no bias; the bias here is
//! zero-initialized and trained like any other parameter.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::{apply_mask, ActivationSpec, DropoutConfig, ShiftDropout};
use crate::data::{batches, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};

/// RMSProp accumulator decay.
pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `None` for the affine output layer.
    pub activation: Option<ActivationSpec>,
    pub dropout: Option<DropoutConfig>,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.fan_out == 0 {
            return Err(Error::Config(format!("layer sizes must be positive, got {}x{}", self.fan_in, self.fan_out)));
        }
        if let Some(a) = &self.activation {
            a.validate()?;
        }
        if let Some(d) = &self.dropout {
            d.validate()?;
            if self.activation.is_none() {
                return Err(Error::Config("dropout requires an activation layer".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Option<ActivationSpec>,
    dropout: Option<ShiftDropout>,
    sq_weights: Array2<f64>,
    sq_bias: Array1<f64>,
}

/// Weights drawn i.i.d. from `N(0, 1/fan_in)`, zero bias.
pub fn init_layer(cfg: &LayerConfig, seed: u64) -> Result<DenseLayer> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cfg.fan_in as f64).sqrt();
    let weights = Array2::from_shape_simple_fn((cfg.fan_in, cfg.fan_out), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    DenseLayer::from_parts(weights, Array1::zeros(cfg.fan_out), cfg.activation, cfg.dropout)
}

impl DenseLayer {
    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>, activation: Option<ActivationSpec>, dropout: Option<DropoutConfig>) -> Result<Self> {
        if bias.len() != weights.ncols() {
            return Err(Error::shape(format!("bias of length {}", weights.ncols()), format!("length {}", bias.len())));
        }
        let cfg = LayerConfig {
            fan_in: weights.nrows(),
            fan_out: weights.ncols(),
            activation,
            dropout,
        };
        cfg.validate()?;
        let dropout = dropout.map(ShiftDropout::new).transpose()?;
        Ok(DenseLayer {
            sq_weights: Array2::zeros(weights.raw_dim()),
            sq_bias: Array1::zeros(bias.len()),
            weights,
            bias,
            activation,
            dropout,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dropout(&self) -> Option<&DropoutConfig> {
        self.dropout.as_ref().map(|d| d.config())
    }

    pub fn config(&self) -> LayerConfig {
        LayerConfig {
            fan_in: self.fan_in(),
            fan_out: self.fan_out(),
            activation: self.activation,
            dropout: self.dropout().copied(),
        }
    }

    /// One RMSProp update with step index `t` (0 for the first update):
    /// `s ← ρs + (1−ρ)g²`, `θ ← θ − lr_t·g/(√s + ε)`, `lr_t = lr/(1 + decay·t)`.
    pub fn rmsprop_step(&mut self, grads: &LayerGrads, cfg: &TrainConfig, t: u64) -> Result<()> {
        if grads.weights.raw_dim() != self.weights.raw_dim() || grads.bias.len() != self.bias.len() {
            return Err(Error::shape(
                format!("{:?} / {}", self.weights.dim(), self.bias.len()),
                format!("{:?} / {}", grads.weights.dim(), grads.bias.len()),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient in rmsprop update".into()));
        }
        let lr = cfg.learning_rate / (1.0 + cfg.decay * t as f64);
        if !lr.is_finite() {
            return Err(Error::Numeric(format!("non-finite learning rate {lr}")));
        }
        let update = |p: &mut f64, s: &mut f64, g: &f64| {
            *s = RMSPROP_RHO * *s + (1.0 - RMSPROP_RHO) * g * g;
            *p -= lr * g / (s.sqrt() + RMSPROP_EPS);
        };
        ndarray::Zip::from(&mut self.weights)
            .and(&mut self.sq_weights)
            .and(&grads.weights)
            .for_each(update);
        ndarray::Zip::from(&mut self.bias)
            .and(&mut self.sq_bias)
            .and(&grads.bias)
            .for_each(update);
        Ok(())
    }
}

/// Gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrads {
    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &LayerGrads) {
        self.weights += &other.weights;
        self.bias += &other.bias;
    }
}

/// Dropout masks for one batch: per layer, row-major `batch × fan_out`, `None`
/// where the layer has no dropout.
pub type Masks = Vec<Option<Vec<bool>>>;

/// Everything [`Network::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Masks,
}

impl Cache {
    pub fn masks(&self) -> &Masks {
        &self.masks
    }
}

/// Stack of dense layers; the last one is the affine output layer.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
    /// Bumped on every parameter update; caches from older versions are rejected.
    version: u64,
    /// Number of optimizer steps taken.
    steps: u64,
}

/// Network shape and per-run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Layer widths including input and output, e.g. `[784, 200, 200, 200, 200, 10]`.
    pub sizes: Vec<usize>,
    pub activation: ActivationSpec,
    /// Keep probability for hidden-layer dropout; `None` disables it.
    pub keep_prob: Option<f64>,
    pub seed: u64,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Network {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        if cfg.sizes.len() < 2 {
            return Err(Error::Config("a network needs at least an input and an output size".into()));
        }
        let n = cfg.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in cfg.sizes.windows(2).enumerate() {
            let hidden = i + 1 < n;
            let dropout = match (hidden, cfg.keep_prob) {
                (true, Some(q)) => Some(DropoutConfig::for_activation(&cfg.activation, q, mix_seed(cfg.seed, 2 * i as u64 + 1))?),
                _ => None,
            };
            let lc = LayerConfig {
                fan_in: w[0],
                fan_out: w[1],
                activation: hidden.then_some(cfg.activation),
                dropout,
            };
            layers.push(init_layer(&lc, mix_seed(cfg.seed, 2 * i as u64))?);
        }
        Ok(Network {
            layers,
            version: 0,
            steps: 0,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::shape(format!("fan_in {}", w[0].fan_out()), format!("fan_in {}", w[1].fan_in())));
            }
        }
        Ok(Network {
            layers,
            version: 0,
            steps: 0,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out()).unwrap_or(0)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Draw fresh dropout masks for a batch of `rows` samples.
    pub fn sample_masks(&mut self, rows: usize) -> Masks {
        self.layers
            .iter_mut()
            .map(|l| {
                let width = l.fan_out();
                l.dropout.as_mut().map(|d| d.sample_mask(rows * width))
            })
            .collect()
    }

    /// Forward pass. In training mode each dropout layer draws a new mask.
    pub fn forward(&mut self, x: &Array2<f64>, training: bool) -> Result<(Array2<f64>, Cache)> {
        let masks = if training {
            self.sample_masks(x.nrows())
        } else {
            vec![None; self.layers.len()]
        };
        self.forward_with_masks(x.view(), masks)
    }

    /// Forward pass with frozen dropout masks (`None` entries mean no dropout).
    pub fn forward_with_masks(&self, x: ArrayView2<f64>, masks: Masks) -> Result<(Array2<f64>, Cache)> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape(format!("input width {}", self.input_width()), format!("width {}", x.ncols())));
        }
        if masks.len() != self.layers.len() {
            return Err(Error::shape(format!("{} masks", self.layers.len()), format!("{} masks", masks.len())));
        }
        let rows = x.nrows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for (li, (layer, mask)) in self.layers.iter().zip(&masks).enumerate() {
            let mut z = current.dot(&layer.weights);
            z += &layer.bias;
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite pre-activation in layer {li}")));
            }
            let next = match &layer.activation {
                Some(act) => {
                    let mut a = z.mapv(|v| act.value(v));
                    if let (Some(m), Some(d)) = (mask, layer.dropout()) {
                        if m.len() != rows * layer.fan_out() {
                            return Err(Error::shape(format!("mask of length {}", rows * layer.fan_out()), format!("length {}", m.len())));
                        }
                        let flat = a.as_slice_mut().expect("fresh arrays are contiguous");
                        apply_mask(flat, m, d);
                    }
                    a
                }
                None => z.clone(),
            };
            inputs.push(current);
            pre.push(z);
            current = next;
        }
        Ok((
            current,
            Cache {
                version: self.version,
                inputs,
                pre,
                masks,
            },
        ))
    }

    /// Gradients of the loss with respect to every parameter, given `∂L/∂logits`.
    pub fn backward(&self, cache: &Cache, grad_logits: &Array2<f64>) -> Result<Vec<LayerGrads>> {
        if cache.version != self.version {
            return Err(Error::Contract(format!(
                "cache from parameter version {} used with version {}",
                cache.version, self.version
            )));
        }
        let rows = cache.inputs[0].nrows();
        if grad_logits.dim() != (rows, self.output_width()) {
            return Err(Error::shape(format!("({rows}, {})", self.output_width()), format!("{:?}", grad_logits.dim())));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let gw = cache.inputs[li].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(LayerGrads { weights: gw, bias: gb });
            if li == 0 {
                break;
            }
            let mut upstream = delta.dot(&layer.weights.t());
            let below = &self.layers[li - 1];
            let act = below.activation.as_ref().expect("hidden layers carry an activation");
            if let (Some(mask), Some(d)) = (&cache.masks[li - 1], below.dropout()) {
                let flat = upstream.as_slice_mut().expect("fresh arrays are contiguous");
                for (g, &keep) in flat.iter_mut().zip(mask) {
                    *g = if keep { *g / d.q } else { 0.0 };
                }
            }
            ndarray::Zip::from(&mut upstream)
                .and(&cache.pre[li - 1])
                .for_each(|g, &z| *g *= act.derivative(z));
            delta = upstream;
        }
        grads.reverse();
        Ok(grads)
    }

    /// Apply one RMSProp step to every layer.
    pub fn apply_rmsprop(&mut self, grads: &[LayerGrads], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape(format!("{} layer gradients", self.layers.len()), grads.len()));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in layer {bad}")));
        }
        let t = self.steps;
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.rmsprop_step(g, cfg, t)?;
        }
        self.steps += 1;
        self.version += 1;
        Ok(())
    }

    /// Serialize parameters (shapes plus row-major values).
    pub fn to_model(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| StoredLayer {
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                    activation: l.activation,
                    dropout: l.dropout().copied(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_model(model: &ModelFile) -> Result<Self> {
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported model format version {}", model.format_version)));
        }
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let w = Array2::from_shape_vec((l.fan_in, l.fan_out), l.weights.clone())
                    .map_err(|e| Error::Data(format!("bad weight shape: {e}")))?;
                DenseLayer::from_parts(w, Array1::from(l.bias.clone()), l.activation, l.dropout)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_model())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_model(&model)
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk model: JSON with shapes and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub layers: Vec<StoredLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Option<ActivationSpec>,
    pub dropout: Option<DropoutConfig>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Summed softmax cross-entropy over the batch divided by `normalizer`, and its
/// gradient with respect to the logits (same scaling).
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[u8], normalizer: f64) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::shape(format!("{} labels", logits.nrows()), labels.len()));
    }
    let classes = logits.ncols();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (row, &label)) in logits.outer_iter().zip(labels).enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - row[label];
        let mut g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - log_sum).exp() / normalizer;
        }
        g[label] -= 1.0 / normalizer;
    }
    Ok((total / normalizer, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Threads sharing each minibatch.
    pub workers: usize,
}

impl Default for TrainConfig {
    /// RMSProp with learning rate 1e-4 and decay 1e-6, batches of 128, 20 epochs.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decay: 1e-6,
            batch_size: 128,
            epochs: 20,
            seed: 1,
            loss: Loss::SoftmaxCrossEntropy,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed so training can be run as a pure no-op check
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be non-negative, got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch history with CSV/JSON export.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        if self.epochs.is_empty() {
            w.write_record(["epoch", "train_loss", "val_loss", "val_acc"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let n = ds.len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let chunk = 1000;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let x = ds.images.slice(s![start..end, ..]);
        let labels = &ds.labels[start..end];
        let (logits, _) = net.forward_with_masks(x, vec![None; net.layers.len()])?;
        let (l, _) = softmax_cross_entropy(&logits, labels, 1.0)?;
        loss += l;
        correct += logits
            .outer_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous row")) == y as usize)
            .count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Loss and summed gradients for one minibatch with frozen masks, split across
/// `workers` contiguous row chunks. Chunk results are summed in chunk order.
pub fn batch_gradients(net: &Network, x: &Array2<f64>, labels: &[u8], masks: &Masks, workers: usize) -> Result<(f64, Vec<LayerGrads>)> {
    let rows = x.nrows();
    let normalizer = rows as f64;
    let run = |r0: usize, r1: usize| -> Result<(f64, Vec<LayerGrads>)> {
        let sub_masks: Masks = masks
            .iter()
            .zip(&net.layers)
            .map(|(m, l)| m.as_ref().map(|m| m[r0 * l.fan_out()..r1 * l.fan_out()].to_vec()))
            .collect();
        let (logits, cache) = net.forward_with_masks(x.slice(s![r0..r1, ..]), sub_masks)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels[r0..r1], normalizer)?;
        Ok((loss, net.backward(&cache, &grad)?))
    };
    let workers = workers.clamp(1, rows.max(1));
    if workers == 1 {
        return run(0, rows);
    }
    let bounds: Vec<(usize, usize)> = (0..workers).map(|i| (i * rows / workers, (i + 1) * rows / workers)).collect();
    let parts: Vec<Result<(f64, Vec<LayerGrads>)>> = std::thread::scope(|sc| {
        let handles: Vec<_> = bounds.iter().map(|&(a, b)| sc.spawn(move || run(a, b))).collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one worker")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    Ok((loss, grads))
}

/// Train with shuffled minibatches and RMSProp; returns one entry per epoch.
pub fn train(net: &mut Network, train_set: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<History> {
    train_with(net, train_set, validation, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(net: &mut Network, train_set: &Dataset, validation: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if net.output_width() != NUM_CLASSES {
        return Err(Error::shape(format!("{NUM_CLASSES} outputs"), net.output_width()));
    }
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for idx in batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let (x, labels) = train_set.gather(&idx);
            let masks = net.sample_masks(x.nrows());
            let (loss, grads) = batch_gradients(net, &x, &labels, &masks, cfg.workers)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {}", epoch + 1)));
            }
            loss_sum += loss * x.nrows() as f64;
            net.apply_rmsprop(&grads, cfg)?;
        }
        let (val_loss, val_acc) = evaluate(net, validation)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(layer, is_bias, flat index)` of the worst element.
    pub worst: (usize, bool, usize),
    pub checked: usize,
}

fn param_mut(n: &mut Network, li: usize, is_bias: bool, k: usize) -> &mut f64 {
    let layer = &mut n.layers[li];
    if is_bias {
        &mut layer.bias[k]
    } else {
        let cols = layer.weights.ncols();
        &mut layer.weights[[k / cols, k % cols]]
    }
}

/// Compare backprop gradients of the mean softmax cross-entropy with central
/// differences of step `h`, holding `masks` fixed.
///
/// Relative error is `|a − n| / max(|a|, |n|)`; elements where both are below
/// `floor` are compared as `|a − n| / floor` instead.
pub fn gradient_check(net: &Network, x: &Array2<f64>, labels: &[u8], masks: &Masks, h: f64, floor: f64) -> Result<GradCheck> {
    let normalizer = x.nrows() as f64;
    let loss_of = |n: &Network| -> Result<f64> {
        let (logits, _) = n.forward_with_masks(x.view(), masks.clone())?;
        Ok(softmax_cross_entropy(&logits, labels, normalizer)?.0)
    };
    let (logits, cache) = net.forward_with_masks(x.view(), masks.clone())?;
    let (_, grad) = softmax_cross_entropy(&logits, labels, normalizer)?;
    let analytic = net.backward(&cache, &grad)?;
    let mut probe = net.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, false, 0),
        checked: 0,
    };
    for li in 0..net.layers.len() {
        for is_bias in [false, true] {
            let count = if is_bias { net.layers[li].bias.len() } else { net.layers[li].weights.len() };
            for k in 0..count {
                let original = *param_mut(&mut probe, li, is_bias, k);
                *param_mut(&mut probe, li, is_bias, k) = original + h;
                let up = loss_of(&probe)?;
                *param_mut(&mut probe, li, is_bias, k) = original - h;
                let down = loss_of(&probe)?;
                *param_mut(&mut probe, li, is_bias, k) = original;
                let numeric = (up - down) / (2.0 * h);
                let a = if is_bias {
                    analytic[li].bias[k]
                } else {
                    analytic[li].weights.as_slice().expect("contiguous gradient")[k]
                };
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = rel;
                    report.worst = (li, is_bias, k);
                }
            }
        }
    }
    Ok(report)
}
