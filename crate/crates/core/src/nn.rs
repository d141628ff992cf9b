//! Small dense networks trained with plain SGD, plus the model file format.
//!
//! Model files are a UTF-8 header of `key=value` lines terminated by a line
//! reading `end`, followed by the parameters as little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &str = "diffjscc-model v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::ModelFormat(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected layer, weights stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Multi-layer perceptron: hidden layers share one activation, the output
/// layer has its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden: Activation,
    output: Activation,
}

/// Per-layer outputs from a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[k+1]` the output of layer `k`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Gradient buffer with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= c);
            l.bias.iter_mut().for_each(|b| *b *= c);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`, weights uniform in
    /// `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Ok(Mlp { layers, hidden, output })
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Mlp { layers, hidden, output })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_dim];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).acts.pop().unwrap_or_default()
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.input_dim(), "network input width");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (k, l) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; l.out_dim];
            l.affine(&acts[k], &mut out);
            let act = self.activation(k);
            out.iter_mut().for_each(|v| *v = act.apply(*v));
            acts.push(out);
        }
        Trace { acts }
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`, and returns
    /// `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut delta: Vec<f64> = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let act = self.activation(k);
            let y = &trace.acts[k + 1];
            delta
                .iter_mut()
                .zip(y)
                .for_each(|(d, y)| *d *= act.grad_from_output(*y));
            let x = &trace.acts[k];
            let g = &mut grads.layers[k];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * l.in_dim..(o + 1) * l.in_dim];
                row.iter_mut().zip(x).for_each(|(gw, xv)| *gw += d * xv);
            }
            let mut prev = vec![0.0; l.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            delta = prev;
        }
        delta
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
        }
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ModelFormat(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Adds `delta` to the `i`-th flattened parameter.
    pub fn nudge_param(&mut self, mut i: usize, delta: f64) {
        for l in &mut self.layers {
            if i < l.weights.len() {
                l.weights[i] += delta;
                return;
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                l.bias[i] += delta;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Header entries describing the architecture, under `prefix`.
    pub fn describe(&self, prefix: &str, header: &mut ModelHeader) {
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        header.set(&format!("{prefix}layers"), sizes.join(","));
        header.set(&format!("{prefix}hidden_activation"), self.hidden.name());
        header.set(&format!("{prefix}output_activation"), self.output.name());
    }

    /// Zero network with the architecture described under `prefix`.
    pub fn from_header(prefix: &str, header: &ModelHeader) -> Result<Self> {
        let sizes = header
            .get(&format!("{prefix}layers"))?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::ModelFormat(format!("bad layer size `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = Activation::parse(header.get(&format!("{prefix}hidden_activation"))?)?;
        let output = Activation::parse(header.get(&format!("{prefix}output_activation"))?)?;
        Mlp::zeros(&sizes, hidden, output).map_err(|e| Error::ModelFormat(e.to_string()))
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidShape(format!("bad layer sizes {sizes:?}")));
    }
    Ok(())
}

/// Shared per-element network, mean pooling over elements, then a dense head.
///
/// Parameter count does not depend on how many elements are pooled, which
/// keeps signal-level and phase regressors small for long latents.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledNet {
    pub element: Mlp,
    pub head: Mlp,
}

impl PooledNet {
    pub fn element_width(&self) -> usize {
        self.element.input_dim()
    }

    /// `extra` is appended to the pooled features before the head.
    pub fn forward(&self, elements: &[Vec<f64>], extra: &[f64]) -> Vec<f64> {
        let pooled = self.pool(elements.iter().map(|e| self.element.forward(e)));
        let mut h = pooled;
        h.extend_from_slice(extra);
        self.head.forward(&h)
    }

    fn pool(&self, outs: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
        let mut acc = vec![0.0; self.element.output_dim()];
        let mut n = 0usize;
        for o in outs {
            acc.iter_mut().zip(&o).for_each(|(a, v)| *a += v);
            n += 1;
        }
        let inv = 1.0 / n.max(1) as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }

    /// One-sample loss gradient. `loss_grad` maps the head output to
    /// `(loss, ∂loss/∂output)`.
    pub fn accumulate(
        &self,
        elements: &[Vec<f64>],
        extra: &[f64],
        grads: &mut PooledGradients,
        loss_grad: impl Fn(&[f64]) -> (f64, Vec<f64>),
    ) -> f64 {
        let traces: Vec<Trace> = elements.iter().map(|e| self.element.trace(e)).collect();
        let mut h = self.pool(traces.iter().map(|t| t.output().to_vec()));
        h.extend_from_slice(extra);
        let head_trace = self.head.trace(&h);
        let (loss, g_out) = loss_grad(head_trace.output());
        let g_in = self.head.backward(&head_trace, &g_out, &mut grads.head);
        let inv = 1.0 / elements.len().max(1) as f64;
        let g_pool: Vec<f64> = g_in[..self.element.output_dim()].iter().map(|g| g * inv).collect();
        for t in &traces {
            self.element.backward(t, &g_pool, &mut grads.element);
        }
        loss
    }

    pub fn zero_grads(&self) -> PooledGradients {
        PooledGradients {
            element: self.element.zero_grads(),
            head: self.head.zero_grads(),
        }
    }

    pub fn sgd_step(&mut self, grads: &PooledGradients, lr: f64) {
        self.element.sgd_step(&grads.element, lr);
        self.head.sgd_step(&grads.head, lr);
    }

    pub fn is_finite(&self) -> bool {
        self.element.is_finite() && self.head.is_finite()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.element.params();
        p.extend(self.head.params());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.element.num_params();
        if params.len() != n + self.head.num_params() {
            return Err(Error::ModelFormat("parameter count mismatch".into()));
        }
        self.element.set_params(&params[..n])?;
        self.head.set_params(&params[n..])
    }
}

#[derive(Debug, Clone)]
pub struct PooledGradients {
    pub element: Gradients,
    pub head: Gradients,
}

impl PooledGradients {
    pub fn zero(&mut self) {
        self.element.zero();
        self.head.zero();
    }

    pub fn scale(&mut self, c: f64) {
        self.element.scale(c);
        self.head.scale(c);
    }

    pub fn add(&mut self, other: &PooledGradients) {
        self.element.add(&other.element);
        self.head.add(&other.head);
    }
}

/// Ordered `key=value` header of a model file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelHeader {
    entries: BTreeMap<String, String>,
}

impl ModelHeader {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::ModelFormat(format!("missing header key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::ModelFormat(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

pub fn write_model(path: &Path, header: &ModelHeader, params: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(256 + params.len() * 8);
    writeln!(buf, "{MODEL_MAGIC}").expect("write to vec");
    for (k, v) in &header.entries {
        writeln!(buf, "{k}={v}").expect("write to vec");
    }
    writeln!(buf, "params={}", params.len()).expect("write to vec");
    writeln!(buf, "end").expect("write to vec");
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<(ModelHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_model(&bytes)
}

pub fn parse_model(bytes: &[u8]) -> Result<(ModelHeader, Vec<f64>)> {
    let mut header = ModelHeader::default();
    let mut pos = 0;
    let mut first = true;
    let mut count: Option<usize> = None;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFormat("header is not terminated".into()))?;
        let line =
            std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| Error::ModelFormat("header is not UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != MODEL_MAGIC {
                return Err(Error::ModelFormat(format!("unrecognized magic `{line}`")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ModelFormat(format!("malformed header line `{line}`")))?;
        if k == "params" {
            count = Some(
                v.parse()
                    .map_err(|_| Error::ModelFormat(format!("bad parameter count `{v}`")))?,
            );
        } else {
            header.set(k, v);
        }
    }
    let count = count.ok_or_else(|| Error::ModelFormat("missing parameter count".into()))?;
    let body = &bytes[pos..];
    if body.len() != count * 8 {
        return Err(Error::ModelFormat(format!(
            "expected {} parameter bytes, found {}",
            count * 8,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, params))
}
