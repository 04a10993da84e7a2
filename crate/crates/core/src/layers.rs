//! Feedforward building blocks with analytic backward passes.
//!
//! Every layer works on a batch: inputs are `B x K` matrices with one
//! instance per row. A single instance is a one-row batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    matmul_into, mul_transpose, sigmoid_scalar, softmax_in_place, transpose_mul, Activation, Matrix, Rng, Vector,
};

/// Highway gate bias at initialization; gates start near 0.12.
pub const HIGHWAY_GATE_BIAS_INIT: f64 = -2.0;

fn check_width(x: &Matrix, expected: usize, what: &str) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::Config(format!(
            "{what} expects input width {expected}, got {}",
            x.cols()
        )));
    }
    Ok(())
}

fn check_cache(dy: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if dy.shape() != (rows, cols) {
        return Err(Error::Usage(format!(
            "{what} backward: upstream gradient is {}x{}, cache is for {rows}x{cols}",
            dy.rows(),
            dy.cols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptronLayer {
    /// `K_out x K_in`.
    pub weights: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct PerceptronCache {
    pub input: Matrix,
    pub pre: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptronGrads {
    pub weights: Matrix,
    pub bias: Vector,
}

impl PerceptronGrads {
    pub fn zeros(out: usize, inp: usize) -> Self {
        PerceptronGrads {
            weights: Matrix::zeros(out, inp),
            bias: Vector::zeros(out),
        }
    }

    pub fn accumulate(&mut self, other: &PerceptronGrads) {
        self.weights.add_assign(&other.weights);
        for (a, b) in self.bias.iter_mut().zip(other.bias.iter()) {
            *a += b;
        }
    }
}

impl PerceptronLayer {
    pub fn new(weights: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::Config(format!(
                "bias has {} entries for {} output units",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(PerceptronLayer {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        PerceptronLayer {
            weights: rng.glorot(outputs, inputs),
            bias: Vector::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, PerceptronCache)> {
        check_width(x, self.inputs(), "perceptron layer")?;
        let mut pre = mul_transpose(x, &self.weights);
        for r in 0..pre.rows() {
            for (z, b) in pre.row_mut(r).iter_mut().zip(self.bias.iter()) {
                *z += b;
            }
        }
        let act = self.activation;
        let output = pre.map(|z| act.apply(z));
        Ok((
            output.clone(),
            PerceptronCache {
                input: x.clone(),
                pre,
                output,
            },
        ))
    }

    /// Backward given the gradient w.r.t. this layer's output.
    pub fn backward(&self, cache: &PerceptronCache, dy: &Matrix) -> Result<(Matrix, PerceptronGrads)> {
        check_cache(dy, cache.pre.rows(), self.outputs(), "perceptron")?;
        let dz = self.pre_activation_grad(cache, dy);
        Ok(self.backward_from_pre(&cache.input, &dz))
    }

    pub(crate) fn pre_activation_grad(&self, cache: &PerceptronCache, dy: &Matrix) -> Matrix {
        let act = self.activation;
        let mut dz = dy.clone();
        let (z, h) = (cache.pre.as_slice(), cache.output.as_slice());
        for (i, d) in dz.as_mut_slice().iter_mut().enumerate() {
            *d *= act.derivative(z[i], h[i]);
        }
        dz
    }

    /// Given `dL/dz`, returns `dL/dx` and the parameter gradients.
    pub(crate) fn backward_from_pre(&self, x: &Matrix, dz: &Matrix) -> (Matrix, PerceptronGrads) {
        let weights = transpose_mul(dz, x);
        let bias = dz.column_sums();
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        matmul_into(dz, &self.weights, &mut dx);
        (dx, PerceptronGrads { weights, bias })
    }
}

/// Linear map from the input space to the hidden width, no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLayer {
    /// `K x D`.
    pub weights: Matrix,
}

impl ProjectionLayer {
    pub fn glorot(inputs: usize, width: usize, rng: &mut Rng) -> Self {
        ProjectionLayer {
            weights: rng.glorot(width, inputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn width(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_width(x, self.inputs(), "projection layer")?;
        Ok(mul_transpose(x, &self.weights))
    }

    /// Weight gradient only; nothing sits below the projection.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        check_cache(dy, x.rows(), self.width(), "projection")?;
        Ok(transpose_mul(dy, x))
    }
}

/// A square perceptron layer whose units are blended with the identity
/// through constant per-unit gates: `y = g*σ(Wx+b) + (1-g)*x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunnelLayer {
    pub inner: PerceptronLayer,
    pub gates: Vector,
}

#[derive(Debug, Clone)]
pub struct TunnelCache {
    inner: PerceptronCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelGrads {
    pub inner: PerceptronGrads,
    pub gates: Vector,
}

impl TunnelLayer {
    pub fn new(inner: PerceptronLayer, gates: Vector) -> Result<Self> {
        let k = inner.outputs();
        if inner.inputs() != k {
            return Err(Error::Config(format!(
                "tunnel layer must be square, got {}x{}",
                k,
                inner.inputs()
            )));
        }
        if gates.len() != k {
            return Err(Error::Config(format!("{} gates for {k} units", gates.len())));
        }
        if gates.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config("tunnel gates must lie in [0, 1]".into()));
        }
        Ok(TunnelLayer { inner, gates })
    }

    /// Fresh layer: Glorot inner weights, every gate closed (`g = 0`).
    pub fn init(width: usize, activation: Activation, rng: &mut Rng) -> Self {
        TunnelLayer {
            inner: PerceptronLayer::glorot(width, width, activation, rng),
            gates: Vector::zeros(width),
        }
    }

    pub fn width(&self) -> usize {
        self.gates.len()
    }

    /// `K² + 2K`: weights, biases and one gate per unit.
    pub fn num_params(&self) -> usize {
        self.inner.num_params() + self.gates.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, TunnelCache)> {
        let (h, inner) = self.inner.forward(x)?;
        let mut y = h;
        for r in 0..y.rows() {
            let xr = x.row(r);
            for ((yk, &g), &xk) in y.row_mut(r).iter_mut().zip(self.gates.iter()).zip(xr) {
                *yk = g * *yk + (1.0 - g) * xk;
            }
        }
        Ok((y, TunnelCache { inner }))
    }

    pub fn backward(&self, cache: &TunnelCache, dy: &Matrix) -> Result<(Matrix, TunnelGrads)> {
        let x = &cache.inner.input;
        let h = &cache.inner.output;
        check_cache(dy, x.rows(), self.width(), "tunnel")?;
        let mut dgates = Vector::zeros(self.width());
        let mut dh = dy.clone();
        for r in 0..dy.rows() {
            let (dyr, hr, xr) = (dy.row(r), h.row(r), x.row(r));
            for k in 0..self.width() {
                dgates[k] += dyr[k] * (hr[k] - xr[k]);
            }
            for (d, &g) in dh.row_mut(r).iter_mut().zip(self.gates.iter()) {
                *d *= g;
            }
        }
        let dz = self.inner.pre_activation_grad(&cache.inner, &dh);
        let (mut dx, inner) = self.inner.backward_from_pre(x, &dz);
        for r in 0..dx.rows() {
            let dyr = dy.row(r);
            for ((d, &g), &dyk) in dx.row_mut(r).iter_mut().zip(self.gates.iter()).zip(dyr) {
                *d += (1.0 - g) * dyk;
            }
        }
        Ok((dx, TunnelGrads { inner, gates: dgates }))
    }
}

/// Like a tunnel layer, but the gate is an input-dependent sigmoid unit:
/// `t = sigmoid(Wg x + bg)`, `y = t*σ(Wx+b) + (1-t)*x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayLayer {
    pub inner: PerceptronLayer,
    pub gate_weights: Matrix,
    pub gate_bias: Vector,
}

#[derive(Debug, Clone)]
pub struct HighwayCache {
    inner: PerceptronCache,
    gate: Matrix,
}

impl HighwayCache {
    /// Gate activations, one row per instance.
    pub fn gate(&self) -> &Matrix {
        &self.gate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighwayGrads {
    pub inner: PerceptronGrads,
    pub gate_weights: Matrix,
    pub gate_bias: Vector,
}

impl HighwayLayer {
    pub fn new(inner: PerceptronLayer, gate_weights: Matrix, gate_bias: Vector) -> Result<Self> {
        let k = inner.outputs();
        if inner.inputs() != k || gate_weights.shape() != (k, k) || gate_bias.len() != k {
            return Err(Error::Config(format!(
                "highway layer of width {k} needs square {k}x{k} inner and gate weights"
            )));
        }
        Ok(HighwayLayer {
            inner,
            gate_weights,
            gate_bias,
        })
    }

    /// Glorot inner and gate weights; gate bias at `gate_bias`.
    pub fn init(width: usize, activation: Activation, gate_bias: f64, rng: &mut Rng) -> Self {
        HighwayLayer {
            inner: PerceptronLayer::glorot(width, width, activation, rng),
            gate_weights: rng.glorot(width, width),
            gate_bias: Vector::filled(width, gate_bias),
        }
    }

    pub fn width(&self) -> usize {
        self.gate_bias.len()
    }

    /// `2K² + 2K`.
    pub fn num_params(&self) -> usize {
        self.inner.num_params() + self.gate_weights.rows() * self.gate_weights.cols() + self.gate_bias.len()
    }

    pub fn gate_activations(&self, x: &Matrix) -> Result<Matrix> {
        check_width(x, self.width(), "highway gate")?;
        let mut a = mul_transpose(x, &self.gate_weights);
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(self.gate_bias.iter()) {
                *v = sigmoid_scalar(*v + b);
            }
        }
        Ok(a)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, HighwayCache)> {
        let (h, inner) = self.inner.forward(x)?;
        let gate = self.gate_activations(x)?;
        let mut y = h;
        for r in 0..y.rows() {
            let (xr, tr) = (x.row(r), gate.row(r));
            for ((yk, &t), &xk) in y.row_mut(r).iter_mut().zip(tr).zip(xr) {
                *yk = t * *yk + (1.0 - t) * xk;
            }
        }
        Ok((y, HighwayCache { inner, gate }))
    }

    pub fn backward(&self, cache: &HighwayCache, dy: &Matrix) -> Result<(Matrix, HighwayGrads)> {
        let x = &cache.inner.input;
        let h = &cache.inner.output;
        let t = &cache.gate;
        check_cache(dy, x.rows(), self.width(), "highway")?;
        let mut dh = dy.clone();
        let mut da = Matrix::zeros(dy.rows(), dy.cols());
        for r in 0..dy.rows() {
            let (dyr, hr, xr, tr) = (dy.row(r), h.row(r), x.row(r), t.row(r));
            let dar = da.row_mut(r);
            for k in 0..dyr.len() {
                dar[k] = dyr[k] * (hr[k] - xr[k]) * tr[k] * (1.0 - tr[k]);
            }
            for (d, &tk) in dh.row_mut(r).iter_mut().zip(tr) {
                *d *= tk;
            }
        }
        let dz = self.inner.pre_activation_grad(&cache.inner, &dh);
        let (mut dx, inner) = self.inner.backward_from_pre(x, &dz);
        let mut dx_gate = Matrix::zeros(x.rows(), x.cols());
        matmul_into(&da, &self.gate_weights, &mut dx_gate);
        dx.add_assign(&dx_gate);
        for r in 0..dx.rows() {
            let (dyr, tr) = (dy.row(r), t.row(r));
            for ((d, &tk), &dyk) in dx.row_mut(r).iter_mut().zip(tr).zip(dyr) {
                *d += (1.0 - tk) * dyk;
            }
        }
        Ok((
            dx,
            HighwayGrads {
                inner,
                gate_weights: transpose_mul(&da, x),
                gate_bias: da.column_sums(),
            },
        ))
    }
}

/// Inverted dropout: kept entries are scaled by `1/keep_probability` so
/// evaluation needs no rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep_probability: f64,
    pub mask: Matrix,
}

impl DropoutMask {
    /// Samples a mask for a `rows x cols` batch.
    pub fn sample(rows: usize, cols: usize, keep_probability: f64, rng: &mut Rng) -> Result<Self> {
        if !(keep_probability > 0.0 && keep_probability <= 1.0) {
            return Err(Error::Config(format!(
                "keep probability must be in (0, 1], got {keep_probability}"
            )));
        }
        let scale = 1.0 / keep_probability;
        let mut mask = Matrix::zeros(rows, cols);
        for v in mask.as_mut_slice() {
            *v = if rng.next_f64() < keep_probability { scale } else { 0.0 };
        }
        Ok(DropoutMask { keep_probability, mask })
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.clone();
        for (v, m) in y.as_mut_slice().iter_mut().zip(self.mask.as_slice()) {
            *v *= m;
        }
        y
    }
}

/// Applies input dropout in training mode; evaluation is the identity.
pub fn input_dropout(x: &Matrix, drop_probability: f64, training: bool, rng: &mut Rng) -> Result<Matrix> {
    if !training || drop_probability == 0.0 {
        return Ok(x.clone());
    }
    let mask = DropoutMask::sample(x.rows(), x.cols(), 1.0 - drop_probability, rng)?;
    Ok(mask.apply(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    BinarySigmoid,
    Softmax,
    MultilabelSigmoid,
}

/// Maps logits to probabilities row by row.
pub fn output_head_forward(kind: HeadKind, logits: &Matrix) -> Matrix {
    match kind {
        HeadKind::BinarySigmoid | HeadKind::MultilabelSigmoid => logits.map(sigmoid_scalar),
        HeadKind::Softmax => {
            let mut p = logits.clone();
            for r in 0..p.rows() {
                softmax_in_place(p.row_mut(r));
            }
            p
        }
    }
}
