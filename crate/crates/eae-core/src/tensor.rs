//! Dense row-major tensors, multilayer-perceptron descriptions, and the
//! differentiation primitives the rest of the crate is built on: forward
//! evaluation, reverse-mode parameter/input gradients (`vjp`), forward-mode
//! directional derivatives (`jvp`), and a combined dual-number pass
//! (`forward_dual` / `vjp_dual`) that differentiates *through* a directional
//! derivative, which the latent-dynamics loss needs.

use crate::{EaeError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense tensor of `f64` in row-major order. The last axis is the feature
/// width; all leading axes together index rows, so a `[n]` tensor is one row
/// of width `n` and a `[b, n]` tensor is a batch of `b` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the element count matches the shape and
    /// that every element is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(EaeError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EaeError::Shape(format!("non-finite element at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            data: vec![0.0; numel],
            shape,
        }
    }

    /// Build a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(EaeError::Shape("no rows".into()));
        }
        let width = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(EaeError::Shape(format!(
                    "row {i} has width {}, expected {width}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Feature width: the size of the last axis.
    pub fn width(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows: total elements divided by the feature width.
    pub fn rows(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    /// Same leading axes as `self` but a different feature width.
    fn with_width(&self, width: usize) -> Tensor {
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Tensor {
            data: vec![0.0; self.rows() * width],
            shape,
        }
    }

    fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EaeError::NonFinite {
                context: context.into(),
                step: 0,
            })
        }
    }
}

/// Elementwise nonlinearity of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    /// Exponential linear unit with unit scale: `x` for `x > 0`,
    /// `exp(x) - 1` otherwise.
    Elu,
    Sigmoid,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Sigmoid => stable_sigmoid(x),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Sigmoid => {
                let s = stable_sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Second derivative; for the relu kink the almost-everywhere value 0 is
    /// used.
    pub fn second_deriv(self, x: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Relu => 0.0,
            Activation::Elu => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
            Activation::Sigmoid => {
                let s = stable_sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture of a fully-connected network: layer widths
/// `[n_0, n_1, ..., n_L]` and one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = NetworkSpec {
            layer_widths,
            activations,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(EaeError::InvalidNetwork(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(EaeError::InvalidNetwork("zero layer width".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(EaeError::InvalidNetwork(format!(
                "{} widths require {} activations, got {}",
                self.layer_widths.len(),
                self.layer_widths.len() - 1,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Total parameter count: each layer holds an `n_out x n_in` weight
    /// matrix followed by an `n_out` bias vector.
    pub fn n_params(&self) -> usize {
        self.layer_pairs()
            .map(|(n_in, n_out)| (n_in + 1) * n_out)
            .sum()
    }

    fn layer_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0], w[1]))
    }

    /// Flat offsets `(weights, biases)` of each layer inside a parameter
    /// vector.
    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut pos = 0;
        for (n_in, n_out) in self.layer_pairs() {
            offsets.push((pos, pos + n_in * n_out));
            pos += (n_in + 1) * n_out;
        }
        offsets
    }
}

/// Flat parameter vector for one network, laid out layer by layer as
/// row-major `n_out x n_in` weights followed by `n_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn zeros(n: usize) -> Self {
        ParamVector {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, spec: &NetworkSpec) -> Result<()> {
        if self.len() != spec.n_params() {
            return Err(EaeError::Shape(format!(
                "parameter vector has {} entries, network needs {}",
                self.len(),
                spec.n_params()
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform initialization: weights drawn from
/// `U(-sqrt(6/(n_in+n_out)), +sqrt(6/(n_in+n_out)))` per layer, biases zero.
/// Deterministic for a fixed seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.n_params());
    for (n_in, n_out) in spec.layer_pairs() {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        for _ in 0..n_in * n_out {
            values.push(rng.random_range(-limit..limit));
        }
        values.extend(std::iter::repeat_n(0.0, n_out));
    }
    ParamVector::new(values)
}

fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    if x.width() != spec.input_width() {
        return Err(EaeError::DimensionMismatch {
            layer: 0,
            expected: spec.input_width(),
            got: x.width(),
        });
    }
    Ok(())
}

/// Affine map of one layer: `out[b,r] = sum_c W[r,c] a[b,c] + bias[r]`.
/// With `bias = None` the translation is dropped, which is the tangent rule.
fn affine(weights: &[f64], bias: Option<&[f64]>, a: &Tensor, n_in: usize, n_out: usize) -> Tensor {
    let mut out = a.with_width(n_out);
    let rows = a.rows();
    for b in 0..rows {
        let ain = a.row(b);
        let orow = &mut out.data[b * n_out..(b + 1) * n_out];
        for r in 0..n_out {
            let wrow = &weights[r * n_in..(r + 1) * n_in];
            let mut acc = match bias {
                Some(bias) => bias[r],
                None => 0.0,
            };
            for c in 0..n_in {
                acc += wrow[c] * ain[c];
            }
            orow[r] = acc;
        }
    }
    out
}

/// `out[b,c] = sum_r delta[b,r] W[r,c]` -- the transpose-weight product used
/// when pulling cotangents back through a layer.
fn affine_transpose(weights: &[f64], delta: &Tensor, n_in: usize, n_out: usize) -> Tensor {
    let mut out = delta.with_width(n_in);
    for b in 0..delta.rows() {
        let drow = delta.row(b);
        let orow = &mut out.data[b * n_in..(b + 1) * n_in];
        for r in 0..n_out {
            let d = drow[r];
            if d == 0.0 {
                continue;
            }
            let wrow = &weights[r * n_in..(r + 1) * n_in];
            for c in 0..n_in {
                orow[c] += d * wrow[c];
            }
        }
    }
    out
}

struct LayerView<'a> {
    weights: &'a [f64],
    biases: &'a [f64],
    n_in: usize,
    n_out: usize,
    act: Activation,
}

fn layer_views<'a>(spec: &NetworkSpec, params: &'a ParamVector) -> Vec<LayerView<'a>> {
    let offsets = spec.layer_offsets();
    spec.layer_pairs()
        .zip(offsets)
        .zip(&spec.activations)
        .map(|(((n_in, n_out), (w_off, b_off)), &act)| LayerView {
            weights: &params.as_slice()[w_off..w_off + n_in * n_out],
            biases: &params.as_slice()[b_off..b_off + n_out],
            n_in,
            n_out,
            act,
        })
        .collect()
}

/// Evaluate the network on a batch. Output has the same leading axes as the
/// input with the feature width replaced by the network's output width.
pub fn forward(spec: &NetworkSpec, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    Ok(forward_trace(spec, params, x)?.output)
}

/// Forward pass that retains per-layer inputs and pre-activations so a
/// reverse sweep can follow.
pub struct ForwardTrace {
    /// `a[0] = x`, `a[l]` the activation output of layer `l`.
    activations: Vec<Tensor>,
    /// `pre[l]` the affine output of layer `l+1` before its nonlinearity.
    pre_activations: Vec<Tensor>,
    pub output: Tensor,
}

pub fn forward_trace(spec: &NetworkSpec, params: &ParamVector, x: &Tensor) -> Result<ForwardTrace> {
    spec.validate()?;
    params.check_len(spec)?;
    check_input(spec, x)?;
    let layers = layer_views(spec, params);
    let mut activations = vec![x.clone()];
    let mut pre_activations = Vec::with_capacity(layers.len());
    for layer in &layers {
        let s = affine(
            layer.weights,
            Some(layer.biases),
            activations.last().unwrap(),
            layer.n_in,
            layer.n_out,
        );
        let mut a = s.clone();
        for v in a.data.iter_mut() {
            *v = layer.act.eval(*v);
        }
        pre_activations.push(s);
        activations.push(a);
    }
    let output = activations.last().unwrap().clone();
    output.check_finite("network forward pass")?;
    Ok(ForwardTrace {
        activations,
        pre_activations,
        output,
    })
}

/// Reverse-mode pass: given an upstream cotangent of the output, return the
/// gradient with respect to every parameter and to the input batch.
pub fn vjp(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<(ParamVector, Tensor)> {
    let trace = forward_trace(spec, params, x)?;
    vjp_from_trace(spec, params, &trace, upstream)
}

/// Reverse sweep over an existing forward trace (lets callers reuse the
/// primal output).
pub fn vjp_from_trace(
    spec: &NetworkSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    upstream: &Tensor,
) -> Result<(ParamVector, Tensor)> {
    if upstream.shape() != trace.output.shape() {
        return Err(EaeError::Shape(format!(
            "upstream shape {:?} does not match output shape {:?}",
            upstream.shape(),
            trace.output.shape()
        )));
    }
    let layers = layer_views(spec, params);
    let offsets = spec.layer_offsets();
    let mut grad = ParamVector::zeros(spec.n_params());
    let mut delta = upstream.clone();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let pre = &trace.pre_activations[l];
        let below = &trace.activations[l];
        // Cotangent of the pre-activation.
        let mut sbar = delta;
        for (v, &s) in sbar.data.iter_mut().zip(pre.data()) {
            *v *= layer.act.deriv(s);
        }
        let (w_off, b_off) = offsets[l];
        accumulate_layer_grads(
            &mut grad.as_mut_slice()[w_off..w_off + layer.n_in * layer.n_out],
            &sbar,
            below,
            layer.n_in,
            layer.n_out,
        );
        {
            let gb = &mut grad.as_mut_slice()[b_off..b_off + layer.n_out];
            for b in 0..sbar.rows() {
                let row = sbar.row(b);
                for r in 0..layer.n_out {
                    gb[r] += row[r];
                }
            }
        }
        delta = affine_transpose(layer.weights, &sbar, layer.n_in, layer.n_out);
    }
    delta.check_finite("network reverse pass")?;
    if !grad.is_finite() {
        return Err(EaeError::NonFinite {
            context: "network reverse pass".into(),
            step: 0,
        });
    }
    Ok((grad, delta))
}

fn accumulate_layer_grads(
    gw: &mut [f64],
    sbar: &Tensor,
    below: &Tensor,
    n_in: usize,
    n_out: usize,
) {
    for b in 0..sbar.rows() {
        let srow = sbar.row(b);
        let arow = below.row(b);
        for r in 0..n_out {
            let s = srow[r];
            if s == 0.0 {
                continue;
            }
            let grow = &mut gw[r * n_in..(r + 1) * n_in];
            for c in 0..n_in {
                grow[c] += s * arow[c];
            }
        }
    }
}

/// Forward-mode pass: directional derivative of the output along an input
/// tangent, `J_f(x) . tangent`, batched row by row.
pub fn jvp(spec: &NetworkSpec, params: &ParamVector, x: &Tensor, tangent: &Tensor) -> Result<Tensor> {
    Ok(forward_dual(spec, params, x, tangent)?.tangent_out)
}

/// Joint primal/tangent forward pass retaining everything the reverse sweep
/// of the pair needs.
pub struct DualTrace {
    activations: Vec<Tensor>,
    tangents: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    pre_tangents: Vec<Tensor>,
    pub primal_out: Tensor,
    pub tangent_out: Tensor,
}

pub fn forward_dual(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &Tensor,
    tangent: &Tensor,
) -> Result<DualTrace> {
    spec.validate()?;
    params.check_len(spec)?;
    check_input(spec, x)?;
    if tangent.shape() != x.shape() {
        return Err(EaeError::Shape(format!(
            "tangent shape {:?} does not match input shape {:?}",
            tangent.shape(),
            x.shape()
        )));
    }
    let layers = layer_views(spec, params);
    let mut activations = vec![x.clone()];
    let mut tangents = vec![tangent.clone()];
    let mut pre_activations = Vec::with_capacity(layers.len());
    let mut pre_tangents = Vec::with_capacity(layers.len());
    for layer in &layers {
        let s = affine(
            layer.weights,
            Some(layer.biases),
            activations.last().unwrap(),
            layer.n_in,
            layer.n_out,
        );
        let st = affine(
            layer.weights,
            None,
            tangents.last().unwrap(),
            layer.n_in,
            layer.n_out,
        );
        let mut a = s.clone();
        let mut t = st.clone();
        for ((av, tv), &sv) in a.data.iter_mut().zip(t.data.iter_mut()).zip(s.data()) {
            *av = layer.act.eval(sv);
            *tv *= layer.act.deriv(sv);
        }
        pre_activations.push(s);
        pre_tangents.push(st);
        activations.push(a);
        tangents.push(t);
    }
    let primal_out = activations.last().unwrap().clone();
    let tangent_out = tangents.last().unwrap().clone();
    primal_out.check_finite("dual forward pass")?;
    tangent_out.check_finite("dual forward pass")?;
    Ok(DualTrace {
        activations,
        tangents,
        pre_activations,
        pre_tangents,
        primal_out,
        tangent_out,
    })
}

/// Reverse sweep through the joint primal/tangent computation: given
/// cotangents `u` of the primal output and `v` of the directional-derivative
/// output, return gradients with respect to the parameters, the input, and
/// the input tangent. This is what differentiating an expression that
/// *contains* a `jvp` requires, and it needs activation second derivatives.
pub fn vjp_dual(
    spec: &NetworkSpec,
    params: &ParamVector,
    trace: &DualTrace,
    u: &Tensor,
    v: &Tensor,
) -> Result<(ParamVector, Tensor, Tensor)> {
    if u.shape() != trace.primal_out.shape() || v.shape() != trace.tangent_out.shape() {
        return Err(EaeError::Shape(
            "cotangent shapes do not match dual outputs".into(),
        ));
    }
    let layers = layer_views(spec, params);
    let offsets = spec.layer_offsets();
    let mut grad = ParamVector::zeros(spec.n_params());
    let mut u = u.clone();
    let mut v = v.clone();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let pre = &trace.pre_activations[l];
        let pre_t = &trace.pre_tangents[l];
        let below = &trace.activations[l];
        let below_t = &trace.tangents[l];
        let mut sbar = u;
        let mut stbar = v;
        for i in 0..sbar.data.len() {
            let s = pre.data()[i];
            let st = pre_t.data()[i];
            let d1 = layer.act.deriv(s);
            let d2 = layer.act.second_deriv(s);
            let ub = sbar.data[i];
            let vb = stbar.data[i];
            sbar.data[i] = d1 * ub + d2 * st * vb;
            stbar.data[i] = d1 * vb;
        }
        let (w_off, b_off) = offsets[l];
        {
            let gw = &mut grad.as_mut_slice()[w_off..w_off + layer.n_in * layer.n_out];
            for b in 0..sbar.rows() {
                let srow = sbar.row(b);
                let strow = stbar.row(b);
                let arow = below.row(b);
                let trow = below_t.row(b);
                for r in 0..layer.n_out {
                    let grow = &mut gw[r * layer.n_in..(r + 1) * layer.n_in];
                    let s = srow[r];
                    let st = strow[r];
                    for c in 0..layer.n_in {
                        grow[c] += s * arow[c] + st * trow[c];
                    }
                }
            }
        }
        {
            let gb = &mut grad.as_mut_slice()[b_off..b_off + layer.n_out];
            for b in 0..sbar.rows() {
                let srow = sbar.row(b);
                for r in 0..layer.n_out {
                    gb[r] += srow[r];
                }
            }
        }
        u = affine_transpose(layer.weights, &sbar, layer.n_in, layer.n_out);
        v = affine_transpose(layer.weights, &stbar, layer.n_in, layer.n_out);
    }
    if !grad.is_finite() {
        return Err(EaeError::NonFinite {
            context: "dual reverse pass".into(),
            step: 0,
        });
    }
    Ok((grad, u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(acts: [Activation; 2]) -> NetworkSpec {
        NetworkSpec::new(vec![3, 5, 2], acts.to_vec()).unwrap()
    }

    /// Independent slow forward pass used as the oracle for gradients:
    /// evaluates the network one scalar at a time.
    fn forward_oracle(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
        let offsets = spec.layer_offsets();
        let mut a = x.to_vec();
        for (l, (w_off, b_off)) in offsets.into_iter().enumerate() {
            let n_in = spec.layer_widths[l];
            let n_out = spec.layer_widths[l + 1];
            let mut next = vec![0.0; n_out];
            for r in 0..n_out {
                let mut acc = params[b_off + r];
                for c in 0..n_in {
                    acc += params[w_off + r * n_in + c] * a[c];
                }
                next[r] = spec.activations[l].eval(acc);
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_identity_linear_net_reproduces_input() {
        let spec = NetworkSpec::new(
            vec![2, 2, 2],
            vec![Activation::Linear, Activation::Linear],
        )
        .unwrap();
        // Identity weights, zero biases, twice.
        let mut values = vec![0.0; spec.n_params()];
        for (w_off, _) in spec.layer_offsets() {
            values[w_off] = 1.0;
            values[w_off + 3] = 1.0;
        }
        let params = ParamVector::new(values);
        let x = Tensor::from_rows(&[vec![1.5, -2.25], vec![0.0, 3.0]]).unwrap();
        let y = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn forward_relu_zeroes_negative_preactivations() {
        let spec = NetworkSpec::new(vec![1, 1], vec![Activation::Relu]).unwrap();
        let params = ParamVector::new(vec![1.0, -2.0]); // weight 1, bias -2
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn forward_rejects_mismatched_input_width() {
        let spec = small_spec([Activation::Relu, Activation::Linear]);
        let params = init_params(&spec, 1);
        let x = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let err = forward(&spec, &params, &x).unwrap_err();
        match err {
            EaeError::DimensionMismatch {
                layer,
                expected,
                got,
            } => {
                assert_eq!((layer, expected, got), (0, 3, 4));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn init_params_is_seed_deterministic_and_bounded() {
        let spec = small_spec([Activation::Elu, Activation::Linear]);
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        let c = init_params(&spec, 43);
        assert_ne!(a, c);
        let offsets = spec.layer_offsets();
        for (l, (w_off, b_off)) in offsets.iter().enumerate() {
            let n_in = spec.layer_widths[l];
            let n_out = spec.layer_widths[l + 1];
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for &w in &a.as_slice()[*w_off..*w_off + n_in * n_out] {
                assert!(w.abs() <= limit);
            }
            for &b in &a.as_slice()[*b_off..*b_off + n_out] {
                assert_eq!(b, 0.0);
            }
        }
    }

    #[test]
    fn single_layer_vjp_matches_analytic_outer_product() {
        // y = W x + b, upstream u: dW = u x^T, db = u, dx = W^T u.
        let spec = NetworkSpec::new(vec![2, 2], vec![Activation::Linear]).unwrap();
        let params = ParamVector::new(vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        let x = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap();
        let u = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let (g, gx) = vjp(&spec, &params, &x, &u).unwrap();
        assert_eq!(
            g.as_slice(),
            &[2.0, -1.0, -4.0, 2.0, 1.0, -2.0] // [u1*x, u2*x, u]
        );
        // W^T u = [1*1+3*(-2), 2*1+4*(-2)]
        assert_eq!(gx.data(), &[-5.0, -6.0]);
    }

    fn fd_param_grad(
        spec: &NetworkSpec,
        params: &ParamVector,
        x: &Tensor,
        upstream: &Tensor,
        h: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let yp = forward(spec, &plus, x).unwrap();
            let ym = forward(spec, &minus, x).unwrap();
            let mut acc = 0.0;
            for ((p, m), u) in yp.data().iter().zip(ym.data()).zip(upstream.data()) {
                acc += u * (p - m) / (2.0 * h);
            }
            grad[i] = acc;
        }
        grad
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    #[test]
    fn vjp_matches_central_differences_on_all_activations() {
        for (i, acts) in [
            [Activation::Relu, Activation::Linear],
            [Activation::Elu, Activation::Sigmoid],
            [Activation::Sigmoid, Activation::Elu],
            [Activation::Linear, Activation::Relu],
        ]
        .iter()
        .enumerate()
        {
            let spec = small_spec(*acts);
            let params = init_params(&spec, 7 + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let x = Tensor::from_rows(&[
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ])
            .unwrap();
            let u = Tensor::from_rows(&[
                (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ])
            .unwrap();
            let (g, _) = vjp(&spec, &params, &x, &u).unwrap();
            let fd = fd_param_grad(&spec, &params, &x, &u, 1e-5);
            assert!(
                rel_err(g.as_slice(), &fd) <= 1e-6,
                "activation set {i}: rel err {}",
                rel_err(g.as_slice(), &fd)
            );
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let spec = small_spec([Activation::Elu, Activation::Sigmoid]);
        let params = init_params(&spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xv: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tv: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![3], xv.clone()).unwrap();
        let t = Tensor::new(vec![3], tv.clone()).unwrap();
        let j = jvp(&spec, &params, &x, &t).unwrap();
        let h = 1e-5;
        let xp = Tensor::new(vec![3], xv.iter().zip(&tv).map(|(a, b)| a + h * b).collect()).unwrap();
        let xm = Tensor::new(vec![3], xv.iter().zip(&tv).map(|(a, b)| a - h * b).collect()).unwrap();
        let yp = forward(&spec, &params, &xp).unwrap();
        let ym = forward(&spec, &params, &xm).unwrap();
        let fd: Vec<f64> = yp
            .data()
            .iter()
            .zip(ym.data())
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect();
        assert!(rel_err(j.data(), &fd) <= 1e-6);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let spec = small_spec([Activation::Sigmoid, Activation::Elu]);
        let params = init_params(&spec, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(vec![3], xv.clone()).unwrap();
        let y = forward(&spec, &params, &x).unwrap();
        let oracle = forward_oracle(&spec, params.as_slice(), &xv);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_rows_match_individual_evaluation_exactly() {
        let spec = small_spec([Activation::Elu, Activation::Sigmoid]);
        let params = init_params(&spec, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let batch = Tensor::from_rows(&rows).unwrap();
        let by = forward(&spec, &params, &batch).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = Tensor::new(vec![3], row.clone()).unwrap();
            let sy = forward(&spec, &params, &single).unwrap();
            assert_eq!(by.row(i), sy.data(), "row {i} differs from batch");
        }
    }

    /// Gradient of `u . f(x) + v . (J_f(x) w)` with respect to parameters,
    /// computed by central differences on the dual forward pass.
    fn fd_dual_param_grad(
        spec: &NetworkSpec,
        params: &ParamVector,
        x: &Tensor,
        w: &Tensor,
        u: &Tensor,
        v: &Tensor,
        h: f64,
    ) -> Vec<f64> {
        let scalar = |p: &ParamVector| {
            let tr = forward_dual(spec, p, x, w).unwrap();
            let mut acc = 0.0;
            for (y, uu) in tr.primal_out.data().iter().zip(u.data()) {
                acc += y * uu;
            }
            for (t, vv) in tr.tangent_out.data().iter().zip(v.data()) {
                acc += t * vv;
            }
            acc
        };
        let mut grad = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            grad[i] = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn dual_reverse_pass_matches_central_differences() {
        // Smooth activations only: the dual reverse pass needs second
        // derivatives, which the relu kink would contaminate near zero.
        let spec = NetworkSpec::new(
            vec![3, 4, 2],
            vec![Activation::Elu, Activation::Sigmoid],
        )
        .unwrap();
        let params = init_params(&spec, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut mk = |n: usize, w: usize| {
            Tensor::from_rows(
                &(0..n)
                    .map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let x = mk(3, 3);
        let w = mk(3, 3);
        let u = mk(3, 2);
        let v = mk(3, 2);
        let trace = forward_dual(&spec, &params, &x, &w).unwrap();
        let (g, _, gv) = vjp_dual(&spec, &params, &trace, &u, &v).unwrap();
        let fd = fd_dual_param_grad(&spec, &params, &x, &w, &u, &v, 1e-5);
        assert!(
            rel_err(g.as_slice(), &fd) <= 1e-6,
            "param grad rel err {}",
            rel_err(g.as_slice(), &fd)
        );
        // Gradient w.r.t. the tangent input is linear: J^T v exactly.
        let (_, gx_linear) = vjp(&spec, &params, &x, &v).unwrap();
        assert!(rel_err(gv.data(), gx_linear.data()) <= 1e-10);
    }

    #[test]
    fn tensor_construction_rejects_bad_shapes_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::NAN, 0.0]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn spec_validation_rejects_degenerate_architectures() {
        assert!(NetworkSpec::new(vec![3], vec![]).is_err());
        assert!(NetworkSpec::new(vec![3, 0], vec![Activation::Relu]).is_err());
        assert!(NetworkSpec::new(vec![3, 2], vec![]).is_err());
    }

    proptest! {
        /// Duality of the two differentiation modes:
        /// u . (J v) == (J^T u) . v for random networks and probes.
        #[test]
        fn jvp_vjp_duality(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let widths = vec![
                rng.random_range(1..5usize),
                rng.random_range(1..6usize),
                rng.random_range(1..4usize),
            ];
            let acts = vec![
                [Activation::Relu, Activation::Elu, Activation::Sigmoid, Activation::Linear]
                    [rng.random_range(0..4usize)],
                [Activation::Relu, Activation::Elu, Activation::Sigmoid, Activation::Linear]
                    [rng.random_range(0..4usize)],
            ];
            let spec = NetworkSpec::new(widths.clone(), acts).unwrap();
            let params = init_params(&spec, seed.wrapping_mul(31).wrapping_add(7));
            let x = Tensor::new(
                vec![widths[0]],
                (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ).unwrap();
            let v = Tensor::new(
                vec![widths[0]],
                (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ).unwrap();
            let u = Tensor::new(
                vec![widths[2]],
                (0..widths[2]).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ).unwrap();
            let ju = jvp(&spec, &params, &x, &v).unwrap();
            let (_, jtu) = vjp(&spec, &params, &x, &u).unwrap();
            let lhs: f64 = ju.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = jtu.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }
}
