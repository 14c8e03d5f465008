//! Dense feed-forward network with exact backpropagation.
//!
//! Weights are stored `(out_neurons, in_features)` so that one row plus its
//! bias is one neuron. Sub-model extraction and invariance scoring both rely
//! on that layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::rng::{rng_for, Stream};

/// Row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FluidError::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(FluidError::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `(out_neurons, in_features)`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(FluidError::Dimension(format!(
                "bias length {} does not match {} output neurons",
                biases.len(),
                weights.rows()
            )));
        }
        Ok(DenseLayer {
            weights,
            biases,
            activation,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_neurons(&self) -> usize {
        self.weights.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.data().len() + self.biases.len()
    }
}

/// An ordered stack of dense layers. This is the server's global model and
/// also the container for client sub-models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<DenseLayer>,
}

impl Model {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FluidError::EmptyInput("model has no layers".into()));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].out_neurons() != pair[1].in_features() {
                return Err(FluidError::Dimension(format!(
                    "layer {j} emits {} values but layer {} expects {}",
                    pair[0].out_neurons(),
                    j + 1,
                    pair[1].in_features()
                )));
            }
        }
        Ok(Model { layers })
    }

    /// Builds a ReLU network with a softmax head. `layout` lists the input
    /// width, every hidden width and the class count, e.g. `[16, 64, 32, 10]`.
    ///
    /// Weights and biases are drawn from `U(-s, s)` with
    /// `s = sqrt(6 / (fan_in + fan_out))`. Non-zero biases keep relative
    /// update scores finite from the first round.
    pub fn init(layout: &[usize], seed: u64) -> Result<Self> {
        if layout.len() < 2 || layout.contains(&0) {
            return Err(FluidError::Config(format!(
                "model layout {layout:?} needs at least input and output widths, all non-zero"
            )));
        }
        let mut rng = rng_for(seed, Stream::Init, &[]);
        let depth = layout.len() - 1;
        let layers = layout
            .windows(2)
            .enumerate()
            .map(|(j, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-s..s))
                    .collect();
                let activation = if j + 1 == depth {
                    Activation::Softmax
                } else {
                    Activation::Relu
                };
                DenseLayer {
                    weights: Matrix {
                        rows: fan_out,
                        cols: fan_in,
                        data,
                    },
                    biases: (0..fan_out).map(|_| rng.random_range(-s..s)).collect(),
                    activation,
                }
            })
            .collect();
        Model::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_neurons()
    }

    /// Number of hidden layers, i.e. all but the output layer.
    pub fn hidden_layer_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Neuron counts of the hidden layers.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.hidden_layer_count()]
            .iter()
            .map(DenseLayer::out_neurons)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    /// Runs inference and returns the final layer's activations, one row per
    /// example.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_batch(batch)?;
        let mut a = batch.clone();
        for layer in &self.layers {
            a = layer_forward(layer, &a)?;
        }
        Ok(a)
    }

    /// Mean cross-entropy loss and its exact gradient.
    ///
    /// Requires a softmax output layer and ReLU or identity hidden layers.
    pub fn backward(&self, batch: &Matrix, labels: &[usize]) -> Result<(GradientSet, f64)> {
        if batch.rows() == 0 {
            return Err(FluidError::EmptyInput("backward called on empty batch".into()));
        }
        self.check_batch(batch)?;
        if labels.len() != batch.rows() {
            return Err(FluidError::Dimension(format!(
                "{} labels for {} examples",
                labels.len(),
                batch.rows()
            )));
        }
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FluidError::Data(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        let last = self.layers.len() - 1;
        if self.layers[last].activation != Activation::Softmax {
            return Err(FluidError::Unsupported(
                "backward requires a softmax output layer".into(),
            ));
        }
        if self.layers[..last]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(FluidError::Unsupported(
                "softmax is only supported on the output layer".into(),
            ));
        }

        // activations[0] is the input; activations[j + 1] is layer j's output.
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for layer in &self.layers {
            let next = layer_forward(layer, activations.last().unwrap())?;
            activations.push(next);
        }

        let n = batch.rows() as f64;
        let probs = &activations[last + 1];
        let mut loss = 0.0;
        let mut delta = probs.clone();
        for (s, &label) in labels.iter().enumerate() {
            loss -= probs.get(s, label).max(f64::MIN_POSITIVE).ln();
            let row = delta.row_mut(s);
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n);
        }
        loss /= n;

        let mut grads = GradientSet::zeros_like(self);
        for j in (0..self.layers.len()).rev() {
            let layer = &self.layers[j];
            let input = &activations[j];
            let gw = &mut grads.weights[j];
            let gb = &mut grads.biases[j];
            for s in 0..delta.rows() {
                let d = delta.row(s);
                let x = input.row(s);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (g, &xv) in gw.row_mut(o).iter_mut().zip(x) {
                        *g += dv * xv;
                    }
                }
            }
            if j == 0 {
                break;
            }
            // propagate through W, then through the previous layer's activation
            let prev_act = self.layers[j - 1].activation;
            let prev_out = &activations[j];
            let mut next = Matrix::zeros(delta.rows(), layer.in_features());
            for s in 0..delta.rows() {
                let d = delta.row(s);
                let out = next.row_mut(s);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (acc, &w) in out.iter_mut().zip(layer.weights.row(o)) {
                        *acc += dv * w;
                    }
                }
                if prev_act == Activation::Relu {
                    for (acc, &a) in out.iter_mut().zip(prev_out.row(s)) {
                        if a <= 0.0 {
                            *acc = 0.0;
                        }
                    }
                }
            }
            delta = next;
        }
        Ok((grads, loss))
    }

    /// Applies `p <- p - lr * g` to every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(FluidError::Config(format!("learning rate {lr} must be >= 0")));
        }
        grads.check_shape(self)?;
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            for (p, g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                *p -= lr * g;
            }
            for (p, g) in layer.biases.iter_mut().zip(gb) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    /// Mean cross-entropy loss and accuracy on a labelled set.
    pub fn evaluate(&self, features: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
        if features.rows() == 0 {
            return Err(FluidError::EmptyInput("evaluation set is empty".into()));
        }
        let probs = self.forward(features)?;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (s, &label) in labels.iter().enumerate() {
            let row = probs.row(s);
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
            if argmax(row) == label {
                correct += 1;
            }
        }
        let n = features.rows() as f64;
        Ok((correct as f64 / n, loss / n))
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(FluidError::Dimension(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn layer_forward(layer: &DenseLayer, input: &Matrix) -> Result<Matrix> {
    if input.cols() != layer.in_features() {
        return Err(FluidError::Dimension(format!(
            "layer expects {} inputs, got {}",
            layer.in_features(),
            input.cols()
        )));
    }
    let mut out = Matrix::zeros(input.rows(), layer.out_neurons());
    for s in 0..input.rows() {
        let x = input.row(s);
        let row = out.row_mut(s);
        for (o, z) in row.iter_mut().enumerate() {
            let w = layer.weights.row(o);
            *z = layer.biases[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        match layer.activation {
            Activation::Identity => {}
            Activation::Relu => row.iter_mut().for_each(|z| *z = z.max(0.0)),
            Activation::Softmax => softmax_in_place(row),
        }
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    row.iter_mut().for_each(|z| *z /= sum);
}

/// Per-layer gradients mirroring a [`Model`]'s shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        GradientSet {
            weights: model
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.out_neurons(), l.in_features()))
                .collect(),
            biases: model
                .layers()
                .iter()
                .map(|l| vec![0.0; l.out_neurons()])
                .collect(),
        }
    }

    pub fn check_shape(&self, model: &Model) -> Result<()> {
        let ok = self.weights.len() == model.layers().len()
            && self.biases.len() == model.layers().len()
            && model
                .layers()
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| {
                    w.rows() == l.out_neurons()
                        && w.cols() == l.in_features()
                        && b.len() == l.out_neurons()
                });
        if ok {
            Ok(())
        } else {
            Err(FluidError::Shape("gradient set does not mirror model".into()))
        }
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.data().iter())
            .chain(self.biases.iter().flatten())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
