//! Small dense networks with hand-written backpropagation.
//!
//! Every learned component (feature extractor, label predictor, domain
//! discriminator) is an [`Mlp`]. Matrices are row-per-sample; weights are
//! stored `out × in`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Everything the backward pass needs: the input of every layer and the
/// pre-activations.
#[derive(Debug, Clone)]
pub struct Activations {
    /// `values[0]` is the network input, `values[l + 1]` the output of layer `l`.
    pub values: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
}

impl Activations {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("at least the input is stored")
    }

    /// Output of the last hidden layer, or the input for a single-layer net.
    pub fn last_hidden(&self) -> &Array2<f64> {
        &self.values[self.values.len().saturating_sub(2)]
    }

    /// Sign pattern of every rectified pre-activation. Two evaluations with
    /// the same pattern lie on the same linear piece of the network.
    pub fn relu_pattern(&self, mlp: &Mlp) -> Vec<bool> {
        mlp.layers
            .iter()
            .zip(&self.pre)
            .filter(|(layer, _)| layer.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    /// All entries, layer by layer, weights before biases, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

impl Mlp {
    /// He-initialised network with layer widths `sizes` (input first).
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs an input and an output size");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    std * z
                });
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if l == last { output } else { hidden },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {l} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    l + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape(format!("layer {l}: bias length does not match weight rows")));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("layer {l} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Activations> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite network input".into()));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: ArrayView2<'_, f64>) -> Activations {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        values.push(x.to_owned());
        for layer in &self.layers {
            let input = values.last().unwrap();
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            let a = z.mapv(|v| layer.activation.apply(v));
            pre.push(z);
            values.push(a);
        }
        Activations { values, pre }
    }

    /// Output only.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut acts = self.forward(x)?;
        Ok(acts.values.pop().unwrap())
    }

    /// Parameter gradients and the gradient with respect to the input, given
    /// the gradient of the loss with respect to the output.
    pub fn backward(&self, acts: &Activations, grad_output: &Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                Zip::from(&mut g).and(&acts.pre[l]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let weight = g.t().dot(&acts.values[l]);
            let bias = g.sum_axis(Axis(0));
            g = g.dot(&layer.weight);
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        (MlpGrads { layers: grads }, g)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable access to the `index`-th scalar parameter in [`MlpGrads::flatten`] order.
    pub fn parameter_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let (w, b) = (layer.weight.len(), layer.bias.len());
            if index < w {
                return layer.weight.iter_mut().nth(index).unwrap();
            }
            index -= w;
            if index < b {
                return &mut layer.bias[index];
            }
            index -= b;
        }
        panic!("parameter index out of range");
    }
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`) and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let m = logits.ncols();
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Invalid(format!("label {y} outside [0, {m})")));
    }
    let mut grad = Array2::zeros((n, m));
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let log_total = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_total - (row[y] - max);
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - max - log_total).exp();
        }
        g[y] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    grad *= scale;
    Ok((loss * scale, grad))
}

/// Binary cross-entropy on single-logit outputs against targets in [0, 1],
/// averaged over rows.
pub fn binary_cross_entropy(logits: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    debug_assert_eq!(logits.ncols(), 1);
    debug_assert_eq!(logits.nrows(), targets.len());
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((z, g), &t) in logits.column(0).iter().zip(grad.column_mut(0)).zip(targets) {
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(*z) - t) / n;
    }
    (loss / n, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Class probabilities, one row per sample.
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_scores(scores: Array2<f64>) -> Self {
        let labels = scores.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        Prediction { scores, labels }
    }

    /// Probability of class 1, for binary tasks.
    pub fn positive_scores(&self) -> Vec<f64> {
        self.scores.column(1.min(self.scores.ncols() - 1)).to_vec()
    }
}

/// Softmax scores and argmax labels of `head(extractor(x))`.
pub fn predict(extractor: &Mlp, head: &Mlp, x: ArrayView2<'_, f64>) -> Result<Prediction> {
    let features = extractor.apply(x)?;
    let logits = head.apply(features.view())?;
    Ok(Prediction::from_scores(softmax(&logits)))
}

/// SGD with heavy-ball momentum for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub name: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: u64,
    #[serde(skip)]
    velocity: Vec<(Array2<f64>, Array1<f64>)>,
}

impl OptimizerState {
    pub fn new(name: impl Into<String>, params: &Mlp, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            name: name.into(),
            learning_rate,
            momentum,
            steps: 0,
            velocity: params
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        })
    }

    pub fn velocity(&self) -> &[(Array2<f64>, Array1<f64>)] {
        &self.velocity
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`. Nothing is modified when any
/// gradient entry is non-finite.
pub fn sgd_step(params: &mut Mlp, grads: &MlpGrads, opt: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != params.layers.len() || opt.velocity.len() != params.layers.len() {
        return Err(Error::Shape(format!("gradient for `{}` does not match its parameters", opt.name)));
    }
    for (l, (g, p)) in grads.layers.iter().zip(&params.layers).enumerate() {
        if g.weight.raw_dim() != p.weight.raw_dim() || g.bias.raw_dim() != p.bias.raw_dim() {
            return Err(Error::Shape(format!("{}.layer{l}: gradient shape mismatch", opt.name)));
        }
        if g.weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: format!("{}.layer{l}.weight", opt.name),
            });
        }
        if g.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: format!("{}.layer{l}.bias", opt.name),
            });
        }
    }
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for ((layer, g), (vw, vb)) in params.layers.iter_mut().zip(&grads.layers).zip(&mut opt.velocity) {
        Zip::from(&mut *vw).and(&g.weight).for_each(|v, &g| *v = mu * *v + g);
        Zip::from(&mut *vb).and(&g.bias).for_each(|v, &g| *v = mu * *v + g);
        layer.weight.scaled_add(-lr, vw);
        layer.bias.scaled_add(-lr, vb);
    }
    opt.steps += 1;
    Ok(())
}
