//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`: layer by layer, the weight matrix
//! (row-major, `outputs x inputs`) followed by the bias vector. That flat
//! index is what saliency masks, optimizer moments and checkpoints address,
//! so it must never change for a given architecture.
//!
//! Batches are row-major matrices with one sample per row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, LabError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure(data.len() == rows * cols, || {
            LabError::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ))
        })?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure(r.len() == cols, || {
                LabError::Shape(format!("row {i} has {} columns, expected {cols}", r.len()))
            })?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps the rows whose index is listed, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            ensure(p.cols == cols, || {
                LabError::Shape(format!("vstack: {} vs {cols} columns", p.cols))
            })?;
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = f(x)`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Fully connected network with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Per-layer inputs and post-activation outputs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("cache holds at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Gradient with the same flat indexing as [`DenseNet`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer(pub Vec<f64>);

impl GradBuffer {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    /// `self += w * other`
    pub fn add_scaled(&mut self, other: &GradBuffer, w: f64) -> Result<()> {
        ensure(self.len() == other.len(), || {
            LabError::Shape(format!("gradient lengths {} vs {}", self.len(), other.len()))
        })?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += w * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Builds a network from `layer_sizes` (input size first) with one activation
/// per layer. Weights are He-scaled normal draws, N(0, 2 / fan_in); biases are zero.
pub fn init_net(layer_sizes: &[usize], activations: &[Activation], seed: u64) -> Result<DenseNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseNet::init_with_rng(layer_sizes, activations, &mut rng)
}

impl DenseNet {
    pub fn init_with_rng<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        ensure(layer_sizes.len() >= 2, || {
            LabError::Shape("a network needs an input size and at least one layer".into())
        })?;
        ensure(activations.len() + 1 == layer_sizes.len(), || {
            LabError::Shape(format!(
                "{} layer sizes need {} activations, got {}",
                layer_sizes.len(),
                layer_sizes.len() - 1,
                activations.len()
            ))
        })?;
        ensure(layer_sizes.iter().all(|&s| s > 0), || {
            LabError::Shape("layer sizes must be positive".into())
        })?;

        let layers: Vec<LayerShape> = layer_sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation,
            })
            .collect();
        let total = layers.iter().map(LayerShape::param_count).sum();
        let mut params = Vec::with_capacity(total);
        for l in &layers {
            let std = (2.0 / l.inputs as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..l.inputs * l.outputs).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, l.outputs));
        }
        Ok(Self { layers, params })
    }

    /// Rebuilds a network from its shapes and a flat parameter vector.
    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self> {
        ensure(!layers.is_empty(), || LabError::Shape("no layers".into()))?;
        for w in layers.windows(2) {
            ensure(w[0].outputs == w[1].inputs, || {
                LabError::Shape(format!(
                    "layer chain mismatch: {} outputs feed {} inputs",
                    w[0].outputs, w[1].inputs
                ))
            })?;
        }
        let expected: usize = layers.iter().map(LayerShape::param_count).sum();
        ensure(params.len() == expected, || {
            LabError::Shape(format!("expected {expected} parameters, got {}", params.len()))
        })?;
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat-index range `[start, end)` of each layer's parameters.
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.param_count();
                start = r.end;
                r
            })
            .collect()
    }

    /// Weight slice (`outputs x inputs`, row-major) and bias slice of layer `i`.
    pub fn layer_params(&self, i: usize) -> (&[f64], &[f64]) {
        let range = &self.layer_ranges()[i];
        let l = &self.layers[i];
        let slab = &self.params[range.clone()];
        slab.split_at(l.inputs * l.outputs)
    }

    pub fn layer_params_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let range = self.layer_ranges()[i].clone();
        let l = self.layers[i];
        self.params[range].split_at_mut(l.inputs * l.outputs)
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        ensure(input.cols() == self.input_size(), || {
            LabError::Shape(format!(
                "input has {} features, network expects {}",
                input.cols(),
                self.input_size()
            ))
        })?;
        ensure(input.is_finite(), || LabError::NonFinite("network input".into()))
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut offset = 0;
        for l in &self.layers {
            let (w, b) = self.params[offset..offset + l.param_count()].split_at(l.inputs * l.outputs);
            x = affine_activate(&x, w, b, l);
            offset += l.param_count();
        }
        Ok(x)
    }

    /// Forward pass that keeps what [`DenseNet::backward`] needs.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let mut offset = 0;
        for l in &self.layers {
            let (w, b) = self.params[offset..offset + l.param_count()].split_at(l.inputs * l.outputs);
            let y = affine_activate(&x, w, b, l);
            inputs.push(x);
            outputs.push(y.clone());
            x = y;
            offset += l.param_count();
        }
        Ok((x, ForwardCache { inputs, outputs }))
    }

    /// Reverse accumulation of `upstream = dL/d(output)` through the cached pass.
    /// Gradients are summed over the batch rows; returns the parameter gradient
    /// and `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(GradBuffer, Matrix)> {
        ensure(cache.inputs.len() == self.layers.len(), || {
            LabError::Shape("stale cache: layer count differs".into())
        })?;
        for (l, (inp, out)) in self.layers.iter().zip(cache.inputs.iter().zip(&cache.outputs)) {
            ensure(inp.cols() == l.inputs && out.cols() == l.outputs, || {
                LabError::Shape("stale cache: layer widths differ".into())
            })?;
        }
        let out = cache.output();
        ensure(upstream.rows() == out.rows() && upstream.cols() == out.cols(), || {
            LabError::Shape(format!(
                "upstream gradient {}x{} does not match output {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            ))
        })?;

        let ranges = self.layer_ranges();
        let mut grads = GradBuffer::zeros(self.parameter_count());
        let mut delta = upstream.clone();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let y = &cache.outputs[li];
            let x = &cache.inputs[li];
            if l.activation != Activation::Identity {
                for (d, &yv) in delta.data_mut().iter_mut().zip(y.data()) {
                    *d *= l.activation.derivative_from_output(yv);
                }
            }
            let n = x.rows();
            let (gw, gb) = grads.0[ranges[li].clone()].split_at_mut(l.inputs * l.outputs);
            // dW = delta^T x
            unsafe {
                matrixmultiply::dgemm(
                    l.outputs,
                    n,
                    l.inputs,
                    1.0,
                    delta.data().as_ptr(),
                    1,
                    l.outputs as isize,
                    x.data().as_ptr(),
                    l.inputs as isize,
                    1,
                    0.0,
                    gw.as_mut_ptr(),
                    l.inputs as isize,
                    1,
                );
            }
            for row in delta.iter_rows() {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dX = delta W
            let (w, _) = self.params[ranges[li].clone()].split_at(l.inputs * l.outputs);
            let mut dx = Matrix::zeros(n, l.inputs);
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    l.outputs,
                    l.inputs,
                    1.0,
                    delta.data().as_ptr(),
                    l.outputs as isize,
                    1,
                    w.as_ptr(),
                    l.inputs as isize,
                    1,
                    0.0,
                    dx.data_mut().as_mut_ptr(),
                    l.inputs as isize,
                    1,
                );
            }
            delta = dx;
        }
        Ok((grads, delta))
    }
}

/// `act(x W^T + b)` for one layer.
fn affine_activate(x: &Matrix, w: &[f64], b: &[f64], l: &LayerShape) -> Matrix {
    let n = x.rows();
    let mut y = Matrix::zeros(n, l.outputs);
    for row in y.data_mut().chunks_exact_mut(l.outputs) {
        row.copy_from_slice(b);
    }
    if n > 0 {
        // SAFETY: dimensions and strides describe the live buffers exactly.
        unsafe {
            matrixmultiply::dgemm(
                n,
                l.inputs,
                l.outputs,
                1.0,
                x.data().as_ptr(),
                l.inputs as isize,
                1,
                w.as_ptr(),
                1,
                l.inputs as isize,
                1.0,
                y.data_mut().as_mut_ptr(),
                l.outputs as isize,
                1,
            );
        }
    }
    if l.activation != Activation::Identity {
        for v in y.data_mut() {
            *v = l.activation.apply(*v);
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, parameter_count: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
///
/// With a mask, only entries whose flag is `true` are touched (parameters and
/// moments alike). Non-finite gradients reject the step and leave both the
/// network and the state untouched.
pub fn adamw_step(
    net: &mut DenseNet,
    grads: &GradBuffer,
    state: &mut AdamWState,
    mask: Option<&[bool]>,
) -> Result<()> {
    let n = net.parameter_count();
    ensure(grads.len() == n && state.m.len() == n && state.v.len() == n, || {
        LabError::Shape(format!(
            "adamw: {n} parameters, {} gradients, {} moments",
            grads.len(),
            state.m.len()
        ))
    })?;
    if let Some(m) = mask {
        ensure(m.len() == n, || {
            LabError::Shape(format!("mask has {} entries for {n} parameters", m.len()))
        })?;
    }
    ensure(grads.is_finite(), || {
        LabError::NonFinite(format!("gradient at optimizer step {}", state.step + 1))
    })?;

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let params = net.params_mut();
    for i in 0..n {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let g = grads.0[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
    }
    Ok(())
}

/// Floor on the denominator of the relative gradient error.
pub const FINITE_DIFF_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `loss_fn` at `net` against
/// central differences with step `h`, returning the maximum over parameters
/// of `|analytic - numeric| / max(|analytic|, |numeric|, FINITE_DIFF_FLOOR)`.
pub fn finite_diff_check<F>(net: &DenseNet, h: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&DenseNet) -> Result<(f64, GradBuffer)>,
{
    let (base, analytic) = loss_fn(net)?;
    ensure(base.is_finite(), || LabError::NonFinite("loss at base point".into()))?;
    ensure(analytic.len() == net.parameter_count(), || {
        LabError::Shape("analytic gradient length".into())
    })?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.parameter_count() {
        let w = net.params[i];
        probe.params[i] = w + h;
        let (plus, _) = loss_fn(&probe)?;
        probe.params[i] = w - h;
        let (minus, _) = loss_fn(&probe)?;
        probe.params[i] = w;
        ensure(plus.is_finite() && minus.is_finite(), || {
            LabError::NonFinite(format!("loss while perturbing parameter {i}"))
        })?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.0[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FINITE_DIFF_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_net(seed: u64) -> DenseNet {
        init_net(&[3, 5, 4, 2], &[Activation::Tanh, Activation::Sigmoid, Activation::Identity], seed).unwrap()
    }

    fn half_sq_loss(net: &DenseNet, x: &Matrix) -> Result<(f64, GradBuffer)> {
        let (y, cache) = net.forward(x)?;
        let loss = 0.5 * y.data().iter().map(|v| v * v).sum::<f64>();
        let (g, _) = net.backward(&cache, &y)?;
        Ok((loss, g))
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = tiny_net(7);
        let b = tiny_net(7);
        assert_eq!(a.params().len(), b.params().len());
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, tiny_net(8));
    }

    #[test]
    fn biases_start_at_zero() {
        let net = tiny_net(1);
        for i in 0..net.layers().len() {
            assert!(net.layer_params(i).1.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn he_init_variance_of_wide_layer() {
        let net = init_net(&[64, 64], &[Activation::Tanh], 3).unwrap();
        let w = net.layer_params(0).0;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 64.0;
        assert!((var - target).abs() / target < 0.2, "variance {var}");
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        assert!(init_net(&[2, 3], &[Activation::Tanh, Activation::Tanh], 0).is_err());
        assert!(init_net(&[2, 0, 1], &[Activation::Tanh, Activation::Tanh], 0).is_err());
        assert!(init_net(&[2], &[], 0).is_err());
        let net = tiny_net(0);
        let bad = LayerShape { inputs: 7, ..net.layers()[1] };
        let mut shapes = net.layers().to_vec();
        shapes[1] = bad;
        assert!(DenseNet::from_parts(shapes, net.params().to_vec()).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = init_net(&[3, 3], &[Activation::Identity], 0).unwrap();
        let (w, b) = net.layer_params_mut(0);
        w.copy_from_slice(Matrix::identity(3).data());
        b.fill(0.0);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 4.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_leave_only_the_bias_path() {
        let mut net = init_net(&[2, 4, 1], &[Activation::Tanh, Activation::Identity], 0).unwrap();
        net.params_mut().fill(0.0);
        net.layer_params_mut(1).1[0] = 0.75;
        let x = Matrix::from_rows(&[vec![10.0, -3.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        assert!(cache.outputs[0].data().iter().all(|&h| h == 0.0));
        assert_eq!(cache.output().data(), &[0.75]);
    }

    #[test]
    fn two_layer_forward_matches_hand_evaluation() {
        // 2 -> 2 (tanh) -> 1 (identity), weights chosen by hand.
        let shapes = vec![
            LayerShape { inputs: 2, outputs: 2, activation: Activation::Tanh },
            LayerShape { inputs: 2, outputs: 1, activation: Activation::Identity },
        ];
        let params = vec![0.5, -1.0, 0.25, 2.0, 0.1, -0.2, 1.5, -0.5, 0.3];
        let net = DenseNet::from_parts(shapes, params).unwrap();
        let x = Matrix::from_rows(&[vec![0.4, -0.6]]).unwrap();
        let h0 = (0.5 * 0.4 + -1.0 * -0.6 + 0.1_f64).tanh();
        let h1 = (0.25 * 0.4 + 2.0 * -0.6 - 0.2_f64).tanh();
        let expected = 1.5 * h0 - 0.5 * h1 + 0.3;
        assert_relative_eq!(net.predict(&x).unwrap().get(0, 0), expected, epsilon = 1e-15);
    }

    #[test]
    fn linear_layer_gradients_are_outer_products() {
        let net = init_net(&[3, 2], &[Activation::Identity], 5).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, -1.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let delta = Matrix::from_rows(&[vec![0.5, -2.0]]).unwrap();
        let (g, dx) = net.backward(&cache, &delta).unwrap();
        let expected_w = [0.5, 1.0, -0.5, -2.0, -4.0, 2.0];
        assert_eq!(&g.0[..6], &expected_w);
        assert_eq!(&g.0[6..], &[0.5, -2.0]);
        let (w, _) = net.layer_params(0);
        for j in 0..3 {
            assert_relative_eq!(dx.get(0, j), 0.5 * w[j] - 2.0 * w[3 + j], epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = tiny_net(2);
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 1.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_and_bad_inputs_are_rejected() {
        let net = tiny_net(2);
        let other = init_net(&[3, 6, 2], &[Activation::Tanh, Activation::Identity], 0).unwrap();
        let x = Matrix::zeros(1, 3);
        let (_, cache) = other.forward(&x).unwrap();
        assert!(net.backward(&cache, &Matrix::zeros(1, 2)).is_err());
        assert!(net.predict(&Matrix::zeros(1, 2)).is_err());
        let nan = Matrix::from_rows(&[vec![f64::NAN, 0.0, 0.0]]).unwrap();
        assert!(matches!(net.predict(&nan), Err(LabError::NonFinite(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = tiny_net(11);
        let x = Matrix::from_rows(&[vec![0.3, -0.7, 1.1], vec![-0.2, 0.5, 0.9], vec![1.0, 1.0, -1.0]]).unwrap();
        let err = finite_diff_check(&net, 1e-5, |n| half_sq_loss(n, &x)).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn finite_diff_on_closed_form_losses() {
        let net = tiny_net(4);
        let quad = finite_diff_check(&net, 1e-5, |n| {
            let l = 0.5 * n.params().iter().map(|w| w * w).sum::<f64>();
            Ok((l, GradBuffer(n.params().to_vec())))
        })
        .unwrap();
        assert!(quad < 1e-8, "{quad}");
        let lin = finite_diff_check(&net, 1e-5, |n| {
            Ok((n.params().iter().sum(), GradBuffer(vec![1.0; n.parameter_count()])))
        })
        .unwrap();
        assert!(lin < 1e-8, "{lin}");
        let nan = finite_diff_check(&net, 1e-5, |n| Ok((f64::NAN, GradBuffer::zeros(n.parameter_count()))));
        assert!(nan.is_err());
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_a_no_op() {
        let mut net = tiny_net(3);
        let before = net.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = AdamWState::new(cfg, net.parameter_count());
        let g = GradBuffer::zeros(net.parameter_count());
        adamw_step(&mut net, &g, &mut st, None).unwrap();
        assert_eq!(net, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_all_false_mask_freezes_everything() {
        let mut net = tiny_net(3);
        let before = net.clone();
        let mut st = AdamWState::new(AdamWConfig::default(), net.parameter_count());
        let g = GradBuffer(vec![3.0; net.parameter_count()]);
        let mask = vec![false; net.parameter_count()];
        for _ in 0..5 {
            adamw_step(&mut net, &g, &mut st, Some(&mask)).unwrap();
        }
        assert!(net.params().iter().zip(before.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adamw_first_step_is_lr_times_sign() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut net = tiny_net(9);
        let before = net.clone();
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = AdamWState::new(cfg, net.parameter_count());
        let g: Vec<f64> = (0..net.parameter_count()).map(|i| if i % 3 == 0 { -0.7 } else { 2.5 }).collect();
        adamw_step(&mut net, &GradBuffer(g.clone()), &mut st, None).unwrap();
        for i in 0..net.parameter_count() {
            let expected = before.params()[i] - 1e-2 * g[i] / (g[i].abs() + 1e-8);
            assert_relative_eq!(net.params()[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn adamw_rejects_non_finite_gradients_without_mutation() {
        let mut net = tiny_net(3);
        let before = net.clone();
        let mut st = AdamWState::new(AdamWConfig::default(), net.parameter_count());
        let mut g = GradBuffer::zeros(net.parameter_count());
        g.0[4] = f64::INFINITY;
        assert!(adamw_step(&mut net, &g, &mut st, None).is_err());
        assert_eq!(net, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn forward_is_pure() {
        let net = tiny_net(6);
        let x = Matrix::from_rows(&[vec![0.3, 0.2, 0.1]]).unwrap();
        let a = net.forward(&x).unwrap().0;
        let b = net.forward(&x).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }
}
