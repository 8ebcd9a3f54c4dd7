//! Built-in target models: logistic regression and a ReLU multi-layer
//! perceptron over encoded feature vectors, trained with plain mini-batch
//! gradient descent. Both expose analytic input and parameter gradients
//! (finite-difference checked in the tests) and a query-counted black-box
//! wrapper for the attacks.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Example, Masker};
use crate::encoding::Encoder;
use crate::error::{Error, Result};

/// Model architecture: logistic regression, or an MLP with the given hidden
/// layer widths and rectifier activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Lr,
    Mlp { hidden: Vec<usize> },
}

/// Parses the compact arch syntax used by config files and the CLI:
/// `lr`, or `mlp:16,8` for hidden layer widths.
pub fn parse_arch(s: &str) -> Result<Arch> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("lr") {
        return Ok(Arch::Lr);
    }
    if let Some(widths) = s.strip_prefix("mlp:") {
        let hidden: Vec<usize> = widths
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&h| h > 0)
                    .ok_or_else(|| {
                        Error::config(format!("bad hidden width '{p}' in arch '{s}'"))
                    })
            })
            .collect::<Result<_>>()?;
        if hidden.is_empty() {
            return Err(Error::config("mlp needs at least one hidden width"));
        }
        return Ok(Arch::Mlp { hidden });
    }
    Err(Error::config(format!(
        "unknown arch '{s}', expected 'lr' or 'mlp:W1,W2,...'"
    )))
}

impl Arch {
    pub fn label(&self) -> String {
        match self {
            Arch::Lr => "lr".to_string(),
            Arch::Mlp { hidden } => {
                let widths: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp:{}", widths.join(","))
            }
        }
    }

    fn layer_dims(&self, input: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = input;
        if let Arch::Mlp { hidden } = self {
            for &h in hidden {
                dims.push((h, prev));
                prev = h;
            }
        }
        dims.push((1, prev));
        dims
    }
}

/// One dense layer, weights stored (outputs, inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// A trained model: layers, the L2 penalty it was trained with, and the
/// seed that initialized it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub layers: Vec<Layer>,
    pub lambda: f64,
    pub seed: u64,
}

/// Optimizer settings for [`train`] and the adversarial training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lambda: 1e-4,
            lr: 0.3,
            epochs: 60,
            batch: 64,
            seed: 0,
        }
    }
}

/// Per-epoch training record, written as JSON lines by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub clean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv_loss: Option<f64>,
    pub clean_acc: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy from the logit.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

struct Forward {
    /// Activations entering each layer; `acts[0]` is the input.
    acts: Vec<Array1<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array1<f64>>,
    logit: f64,
}

impl ModelParams {
    /// Fresh parameters with seeded uniform(-1/sqrt(fan_in), ..) weights and
    /// zero biases.
    pub fn init(arch: Arch, input_dim: usize, lambda: f64, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims(input_dim)
            .into_iter()
            .map(|(out, inp)| {
                let r = 1.0 / (inp as f64).sqrt();
                let w = Array2::from_shape_fn((out, inp), |_| rng.gen_range(-r..r));
                Layer {
                    w,
                    b: Array1::zeros(out),
                }
            })
            .collect();
        ModelParams {
            arch,
            layers,
            lambda,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    fn forward(&self, v: &ArrayView1<f64>) -> Forward {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n.saturating_sub(1));
        acts.push(v.to_owned());
        for layer in &self.layers[..n - 1] {
            let z = layer.w.dot(acts.last().unwrap()) + &layer.b;
            let a = z.mapv(|x| x.max(0.0));
            pre.push(z);
            acts.push(a);
        }
        let last = &self.layers[n - 1];
        let logit = last.w.row(0).dot(acts.last().unwrap()) + last.b[0];
        Forward { acts, pre, logit }
    }

    /// Raw pre-sigmoid output.
    pub fn logit(&self, v: &ArrayView1<f64>) -> f64 {
        self.forward(v).logit
    }

    /// f(v) in (0, 1).
    pub fn predict_score(&self, v: &ArrayView1<f64>) -> f64 {
        sigmoid(self.logit(v))
    }

    /// 1 iff the score strictly exceeds 1/2.
    pub fn predict_label(&self, v: &ArrayView1<f64>) -> u8 {
        u8::from(self.predict_score(v) > 0.5)
    }

    /// Binary cross-entropy of (v, y) and its gradient with respect to the
    /// input coordinates. No regularization term: that depends only on the
    /// parameters.
    pub fn loss_and_grad_input(&self, v: &ArrayView1<f64>, y: f64) -> (f64, Array1<f64>) {
        let fwd = self.forward(v);
        let loss = bce_from_logit(fwd.logit, y);
        let mut delta: Array1<f64> = self.layers.last().unwrap().w.row(0).to_owned();
        delta *= sigmoid(fwd.logit) - y;
        for l in (0..self.layers.len() - 1).rev() {
            let gated: Array1<f64> = ndarray::Zip::from(&delta)
                .and(&fwd.pre[l])
                .map_collect(|&d, &z| if z > 0.0 { d } else { 0.0 });
            delta = self.layers[l].w.t().dot(&gated);
        }
        (loss, delta)
    }

    /// Mean binary cross-entropy over a batch (no regularizer).
    pub fn batch_loss(&self, xs: &[Array1<f64>], ys: &[f64]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(v, &y)| bce_from_logit(self.logit(&v.view()), y))
            .sum();
        total / xs.len() as f64
    }

    /// Mean batch loss plus the `lambda * sum ||W||^2` penalty (weights
    /// only, biases unpenalized). This is the exact objective whose gradient
    /// [`ModelParams::loss_and_grad_params`] returns.
    pub fn regularized_loss(&self, xs: &[Array1<f64>], ys: &[f64]) -> f64 {
        let reg: f64 = self
            .layers
            .iter()
            .map(|l| l.w.iter().map(|w| w * w).sum::<f64>())
            .sum();
        self.batch_loss(xs, ys) + self.lambda * reg
    }

    /// Gradient of [`ModelParams::regularized_loss`] with respect to every
    /// parameter, as one pseudo-layer per real layer. The regularizer
    /// contributes exactly `2 * lambda * w` to each weight.
    pub fn loss_and_grad_params(&self, xs: &[Array1<f64>], ys: &[f64]) -> (f64, Vec<Layer>) {
        let n = self.layers.len();
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                w: Array2::zeros(l.w.dim()),
                b: Array1::zeros(l.b.len()),
            })
            .collect();
        let mut loss_sum = 0.0;
        for (v, &y) in xs.iter().zip(ys) {
            let fwd = self.forward(&v.view());
            loss_sum += bce_from_logit(fwd.logit, y);
            // output layer: scalar delta
            let mut delta = Array1::from_elem(1, sigmoid(fwd.logit) - y);
            for l in (0..n).rev() {
                let a = &fwd.acts[l];
                for (r, &d) in delta.iter().enumerate() {
                    let mut row = grads[l].w.row_mut(r);
                    row.scaled_add(d, a);
                }
                grads[l].b += &delta;
                if l > 0 {
                    let back = self.layers[l].w.t().dot(&delta);
                    delta = ndarray::Zip::from(&back)
                        .and(&fwd.pre[l - 1])
                        .map_collect(|&d, &z| if z > 0.0 { d } else { 0.0 });
                }
            }
        }
        let scale = 1.0 / xs.len() as f64;
        for (g, l) in grads.iter_mut().zip(&self.layers) {
            g.w.mapv_inplace(|x| x * scale);
            g.b.mapv_inplace(|x| x * scale);
            g.w.scaled_add(2.0 * self.lambda, &l.w);
        }
        (loss_sum * scale, grads)
    }

    fn step(&mut self, grads: &[Layer], lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            l.w.scaled_add(-lr, &g.w);
            l.b.scaled_add(-lr, &g.b);
        }
    }

    /// Fraction of examples whose predicted label matches.
    pub fn accuracy(&self, xs: &[Array1<f64>], ys: &[f64]) -> f64 {
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(v, &y)| f64::from(self.predict_label(&v.view())) == y)
            .count();
        hits as f64 / xs.len() as f64
    }
}

/// Hook that replaces each training input right before the gradient step.
/// Receives the current parameters, the sample's index in the original
/// dataset, its encoded features, and its label.
pub type PerturbFn<'p> = dyn FnMut(&ModelParams, usize, &Array1<f64>, f64) -> Array1<f64> + 'p;

/// Shared mini-batch gradient descent loop. `perturb` is `None` for clean
/// training; adversarial training passes the PGD inner maximization. With a
/// perturbation that returns its input unchanged this is bit-identical to
/// clean training under the same hyperparameters.
pub fn fit(
    xs: &[Array1<f64>],
    ys: &[f64],
    arch: Arch,
    hyper: &TrainHyper,
    mut perturb: Option<&mut PerturbFn<'_>>,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    if xs.is_empty() {
        return Err(Error::model("empty training set"));
    }
    if xs.len() != ys.len() {
        return Err(Error::model("inputs and labels differ in length"));
    }
    if hyper.batch == 0 || hyper.epochs == 0 || hyper.lr <= 0.0 {
        return Err(Error::model("batch, epochs, and learning rate must be positive"));
    }
    let dim = xs[0].len();
    let mut params = ModelParams::init(arch, dim, hyper.lambda, hyper.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut logs = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut adv_loss_sum = 0.0;
        let mut adv_n = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let batch_ys: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let batch_xs: Vec<Array1<f64>> = match perturb.as_deref_mut() {
                Some(p) => chunk.iter().map(|&i| p(&params, i, &xs[i], ys[i])).collect(),
                None => chunk.iter().map(|&i| xs[i].clone()).collect(),
            };
            let (batch_loss, grads) = params.loss_and_grad_params(&batch_xs, &batch_ys);
            adv_loss_sum += batch_loss * chunk.len() as f64;
            adv_n += chunk.len();
            params.step(&grads, hyper.lr);
        }
        let clean_loss = params.batch_loss(xs, ys);
        if !clean_loss.is_finite() {
            return Err(Error::model(format!("non-finite loss at epoch {epoch}")));
        }
        logs.push(EpochLog {
            epoch,
            clean_loss,
            adv_loss: perturb.as_ref().map(|_| adv_loss_sum / adv_n as f64),
            clean_acc: params.accuracy(xs, ys),
        });
    }
    Ok((params, logs))
}

/// Encodes a dataset and fits a model on it.
pub fn train(
    dataset: &Dataset,
    encoder: &Encoder,
    arch: Arch,
    hyper: &TrainHyper,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let xs: Vec<Array1<f64>> = dataset.rows.iter().map(|r| encoder.encode(r)).collect();
    let ys: Vec<f64> = dataset.rows.iter().map(|r| f64::from(r.label)).collect();
    if ys.iter().all(|&y| y == 0.0) || ys.iter().all(|&y| y == 1.0) {
        return Err(Error::model("training set contains a single class"));
    }
    fit(&xs, &ys, arch, hyper, None)
}

/// Scoring oracle over raw examples. Implementations may count queries.
pub trait Oracle: Sync {
    fn score(&self, x: &Example) -> f64;

    /// Queries issued so far; oracles without a counter report 0.
    fn queries(&self) -> u64 {
        0
    }

    fn label(&self, x: &Example) -> u8 {
        u8::from(self.score(x) > 0.5)
    }
}

/// Black-box view of a model: scores examples, exposes no gradients, and
/// counts every score call exactly once (atomically, so attacks may be
/// evaluated in parallel).
pub struct BlackBox<'a> {
    model: &'a ModelParams,
    encoder: &'a Encoder,
    count: AtomicU64,
}

impl<'a> BlackBox<'a> {
    pub fn new(model: &'a ModelParams, encoder: &'a Encoder) -> Self {
        BlackBox {
            model,
            encoder,
            count: AtomicU64::new(0),
        }
    }
}

impl Oracle for BlackBox<'_> {
    fn score(&self, x: &Example) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.model.predict_score(&self.encoder.encode(x).view())
    }

    fn queries(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

/// Inference-time masking wrapper: every query replaces mutable features
/// with their sentinels before scoring, so no mutable edit can move the
/// score. This is the mutability-robust baseline.
pub struct MaskedModel {
    pub model: ModelParams,
    pub encoder: Encoder,
    pub masker: Masker,
    count: AtomicU64,
}

impl MaskedModel {
    /// `model` must have been trained on the masked schema's encoding;
    /// `encoder` is that schema's encoder.
    pub fn new(model: ModelParams, encoder: Encoder, masker: Masker) -> Self {
        MaskedModel {
            model,
            encoder,
            masker,
            count: AtomicU64::new(0),
        }
    }
}

impl Oracle for MaskedModel {
    fn score(&self, x: &Example) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        let masked = self.masker.mask_example(x);
        self.model.predict_score(&self.encoder.encode(&masked).view())
    }

    fn queries(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    arch: String,
    #[serde(default)]
    hidden: Vec<usize>,
    layers: Vec<LayerFile>,
    lambda: f64,
    seed: u64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    defense: serde_json::Value,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    train: serde_json::Value,
}

/// Serializes a model (plus optional opaque metadata sections) as JSON.
/// `f64` values round-trip exactly.
pub fn model_to_json(
    model: &ModelParams,
    defense: serde_json::Value,
    train: serde_json::Value,
) -> serde_json::Value {
    let (arch, hidden) = match &model.arch {
        Arch::Lr => ("lr".to_string(), Vec::new()),
        Arch::Mlp { hidden } => ("mlp".to_string(), hidden.clone()),
    };
    let layers = model
        .layers
        .iter()
        .map(|l| LayerFile {
            rows: l.w.nrows(),
            cols: l.w.ncols(),
            w: l.w.iter().copied().collect(),
            b: l.b.to_vec(),
        })
        .collect();
    serde_json::to_value(ModelFile {
        arch,
        hidden,
        layers,
        lambda: model.lambda,
        seed: model.seed,
        defense,
        train,
    })
    .expect("model serialization cannot fail")
}

/// Reverse of [`model_to_json`]; returns the model and the two metadata
/// sections (null when absent).
pub fn model_from_json(v: &serde_json::Value) -> Result<(ModelParams, serde_json::Value, serde_json::Value)> {
    let file: ModelFile = serde_json::from_value(v.clone()).map_err(|e| Error::Json {
        path: "<model>".into(),
        source: e,
    })?;
    let arch = match file.arch.as_str() {
        "lr" => Arch::Lr,
        "mlp" => Arch::Mlp {
            hidden: file.hidden.clone(),
        },
        other => return Err(Error::model(format!("unknown architecture '{other}'"))),
    };
    let mut layers = Vec::with_capacity(file.layers.len());
    for lf in &file.layers {
        if lf.w.len() != lf.rows * lf.cols || lf.b.len() != lf.rows {
            return Err(Error::model("layer shape does not match parameter count"));
        }
        layers.push(Layer {
            w: Array2::from_shape_vec((lf.rows, lf.cols), lf.w.clone())
                .map_err(|e| Error::model(e.to_string()))?,
            b: Array1::from_vec(lf.b.clone()),
        });
    }
    if layers.is_empty() {
        return Err(Error::model("model has no layers"));
    }
    Ok((
        ModelParams {
            arch,
            layers,
            lambda: file.lambda,
            seed: file.seed,
        },
        file.defense,
        file.train,
    ))
}

pub fn save_model(
    model: &ModelParams,
    defense: serde_json::Value,
    train: serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let text = serde_json::to_string_pretty(&model_to_json(model, defense, train)).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &std::path::Path) -> Result<(ModelParams, serde_json::Value, serde_json::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    model_from_json(&v)
}
