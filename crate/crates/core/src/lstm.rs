//! Stacked LSTM regressor trained with backpropagation through time.
//!
//! Cell recurrences, per layer and timestep:
//!
//! ```text
//! a   = W x_t + U h_{t-1} + b          gate order (i, f, g, o)
//! i,f,o = sigmoid(a_i, a_f, a_o)       g = relu(a_g)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * relu(c_t)
//! ```
//!
//! Every layer after the first adds its input sequence to its output
//! (identity residual) when `residual` is set, and is followed by inverted
//! dropout in training mode. A dense head reads the final timestep of the top
//! layer. Everything is `f64`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Sample, LAT, LON};

pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Trainable parameter count of one LSTM layer: `4 * ((d_in + h) * h + h)`.
pub fn count_params(d_in: usize, hidden: usize) -> usize {
    4 * ((d_in + hidden) * hidden + hidden)
}

/// Parameter count of a fully connected head.
pub fn count_dense_params(d_in: usize, out_dim: usize) -> usize {
    out_dim * d_in + out_dim
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub d_in: usize,
    pub hidden: usize,
    /// Input weights, `4h x d_in`, row-major.
    pub w: Vec<f64>,
    /// Recurrent weights, `4h x h`, row-major.
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        LstmLayer {
            d_in,
            hidden,
            w: vec![0.0; 4 * hidden * d_in],
            u: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    pub fn count_params(&self) -> usize {
        count_params(self.d_in, self.hidden)
    }

    pub fn stored_params(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub d_in: usize,
    pub out_dim: usize,
    /// `out_dim x d_in`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub out_dim: usize,
    pub dropout: f64,
    pub residual: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            input_dim: crate::preprocess::K,
            hidden: 32,
            layers: 3,
            out_dim: 2,
            dropout: 0.2,
            residual: true,
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.out_dim == 0 {
            return bad("topology dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmNetwork {
    pub layers: Vec<LstmLayer>,
    pub dense: Dense,
    pub dropout: f64,
    pub residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl LstmNetwork {
    /// All-zero parameters with the given shape.
    pub fn zeros(topo: &Topology) -> Self {
        let layers = (0..topo.layers)
            .map(|l| {
                LstmLayer::zeros(
                    if l == 0 { topo.input_dim } else { topo.hidden },
                    topo.hidden,
                )
            })
            .collect();
        LstmNetwork {
            layers,
            dense: Dense {
                d_in: topo.hidden,
                out_dim: topo.out_dim,
                w: vec![0.0; topo.out_dim * topo.hidden],
                b: vec![0.0; topo.out_dim],
            },
            dropout: topo.dropout,
            residual: topo.residual,
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate.
    pub fn init<R: Rng + ?Sized>(topo: &Topology, rng: &mut R) -> Self {
        let mut net = Self::zeros(topo);
        let mut fill = |v: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in v {
                *x = rng.random_range(-limit..limit);
            }
        };
        for layer in &mut net.layers {
            let (d, h) = (layer.d_in, layer.hidden);
            fill(&mut layer.w, d, 4 * h);
            fill(&mut layer.u, h, 4 * h);
            layer.b[h..2 * h].fill(FORGET_BIAS_INIT);
        }
        fill(&mut net.dense.w, net.dense.d_in, net.dense.out_dim);
        net
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_dim: self.layers[0].d_in,
            hidden: self.layers[0].hidden,
            layers: self.layers.len(),
            out_dim: self.dense.out_dim,
            dropout: self.dropout,
            residual: self.residual,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn out_dim(&self) -> usize {
        self.dense.out_dim
    }

    pub fn count_params(&self) -> usize {
        self.layers
            .iter()
            .map(LstmLayer::count_params)
            .sum::<usize>()
            + count_dense_params(self.dense.d_in, self.dense.out_dim)
    }

    /// Checks that stored arrays match the declared shapes and chain correctly.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers.is_empty() {
            return bad("network has no layers".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.hidden;
            if l > 0 && layer.d_in != self.layers[l - 1].hidden {
                return bad(format!(
                    "layer {l} input width {} does not chain",
                    layer.d_in
                ));
            }
            if l > 0 && self.residual && layer.d_in != h {
                return bad(format!("layer {l} residual needs d_in == hidden"));
            }
            if layer.w.len() != 4 * h * layer.d_in
                || layer.u.len() != 4 * h * h
                || layer.b.len() != 4 * h
            {
                return bad(format!("layer {l} parameter arrays have wrong length"));
            }
        }
        let top = self.layers.last().unwrap().hidden;
        let d = &self.dense;
        if d.d_in != top || d.w.len() != d.out_dim * d.d_in || d.b.len() != d.out_dim {
            return bad("dense head shape mismatch".into());
        }
        if self
            .param_slices()
            .iter()
            .any(|s| s.iter().any(|v| !v.is_finite()))
        {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    /// Parameter blocks in a fixed order: per layer (w, u, b), then dense (w, b).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.extend([l.w.as_slice(), l.u.as_slice(), l.b.as_slice()]);
        }
        out.extend([self.dense.w.as_slice(), self.dense.b.as_slice()]);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.extend([l.w.as_mut_slice(), l.u.as_mut_slice(), l.b.as_mut_slice()]);
        }
        out.extend([self.dense.w.as_mut_slice(), self.dense.b.as_mut_slice()]);
        out
    }

    /// Samples inverted-dropout masks for every layer after the first.
    pub fn sample_masks<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> Masks {
        let keep = 1.0 - self.dropout;
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (l > 0 && self.dropout > 0.0).then(|| {
                    (0..steps * layer.hidden)
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
            })
            .collect()
    }
}

/// Per-layer dropout multipliers (`steps x hidden`), `None` where no dropout applies.
pub type Masks = Vec<Option<Vec<f64>>>;

#[derive(Debug, Clone)]
struct LayerCache {
    steps: usize,
    inputs: Vec<f64>,
    /// Post-activation gates (i, f, g, o) per step.
    gates: Vec<f64>,
    /// Candidate pre-activations per step.
    cand_pre: Vec<f64>,
    cells: Vec<f64>,
    hiddens: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Activations recorded by a forward pass for use by [`backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    layers: Vec<LayerCache>,
    top: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl Cache {
    /// Every value fed through a ReLU, in a fixed order.
    /// Candidate and cell pre-activations (`steps x hidden` each) of one layer.
    pub fn layer_relu_inputs(&self, layer: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[layer];
        (&l.cand_pre, &l.cells)
    }

    pub fn relu_inputs(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.cand_pre.iter().chain(l.cells.iter()).copied())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `out += M v` for row-major `M` with `v.len()` columns.
#[inline]
fn gemv_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += M^T v` for row-major `M` with `out.len()` columns.
#[inline]
fn gemv_t_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, &s) in m.chunks_exact(cols).zip(v) {
        if s != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
    }
}

/// `m += u v^T`.
#[inline]
fn ger_acc(m: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (row, &s) in m.chunks_exact_mut(cols).zip(u) {
        if s != 0.0 {
            for (a, b) in row.iter_mut().zip(v) {
                *a += s * b;
            }
        }
    }
}

fn run_layer(
    layer: &LstmLayer,
    inputs: Vec<f64>,
    steps: usize,
    index: usize,
) -> Result<LayerCache> {
    let (d, h) = (layer.d_in, layer.hidden);
    let mut gates = vec![0.0; steps * 4 * h];
    let mut cand_pre = vec![0.0; steps * h];
    let mut cells = vec![0.0; steps * h];
    let mut hiddens = vec![0.0; steps * h];
    let mut a = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for t in 0..steps {
        let x = &inputs[t * d..(t + 1) * d];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&hiddens[(t - 1) * h..t * h], &cells[(t - 1) * h..t * h])
        };
        a.copy_from_slice(&layer.b);
        gemv_acc(&layer.w, x, &mut a);
        gemv_acc(&layer.u, h_prev, &mut a);

        let mut c_t = vec![0.0; h];
        let mut h_t = vec![0.0; h];
        let g_t = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let i = sigmoid(a[j]);
            let f = sigmoid(a[h + j]);
            let g = relu(a[2 * h + j]);
            let o = sigmoid(a[3 * h + j]);
            g_t[j] = i;
            g_t[h + j] = f;
            g_t[2 * h + j] = g;
            g_t[3 * h + j] = o;
            cand_pre[t * h + j] = a[2 * h + j];
            c_t[j] = f * c_prev[j] + i * g;
            h_t[j] = o * relu(c_t[j]);
        }
        if c_t.iter().chain(&h_t).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: index,
                step: t,
            });
        }
        cells[t * h..(t + 1) * h].copy_from_slice(&c_t);
        hiddens[t * h..(t + 1) * h].copy_from_slice(&h_t);
    }
    Ok(LayerCache {
        steps,
        inputs,
        gates,
        cand_pre,
        cells,
        hiddens,
        mask: None,
    })
}

fn check_window<W: AsRef<[f64]>>(net: &LstmNetwork, window: &[W]) -> Result<()> {
    let d = net.input_dim();
    if window.is_empty() {
        return Err(Error::CacheMismatch("empty input window".into()));
    }
    for row in window {
        let row = row.as_ref();
        if row.len() != d {
            return Err(Error::CacheMismatch(format!(
                "window row width {} does not match input dimension {d}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: 0, step: 0 });
        }
    }
    Ok(())
}

/// Forward pass with explicit dropout masks (`None` disables dropout everywhere).
pub fn forward_with_masks<W: AsRef<[f64]>>(
    net: &LstmNetwork,
    window: &[W],
    masks: Option<&Masks>,
) -> Result<(Vec<f64>, Cache)> {
    check_window(net, window)?;
    let steps = window.len();
    let mut seq: Vec<f64> = window
        .iter()
        .flat_map(|r| r.as_ref().iter().copied())
        .collect();
    let mut caches = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let mut cache = run_layer(layer, seq, steps, l)?;
        let mut out = cache.hiddens.clone();
        if l > 0 && net.residual {
            for (o, x) in out.iter_mut().zip(&cache.inputs) {
                *o += x;
            }
        }
        if let Some(Some(mask)) = masks.and_then(|m| m.get(l)) {
            for (o, k) in out.iter_mut().zip(mask) {
                *o *= k;
            }
            cache.mask = Some(mask.clone());
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: l,
                step: steps - 1,
            });
        }
        seq = out;
        caches.push(cache);
    }
    let h = net.dense.d_in;
    let top = seq[(steps - 1) * h..steps * h].to_vec();
    let mut pred = net.dense.b.clone();
    gemv_acc(&net.dense.w, &top, &mut pred);
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: net.layers.len(),
            step: steps - 1,
        });
    }
    Ok((
        pred.clone(),
        Cache {
            layers: caches,
            top,
            prediction: pred,
        },
    ))
}

/// Runs the network on one `m x d_in` window. Dropout is active only in [`Mode::Train`].
pub fn forward<W: AsRef<[f64]>, R: Rng + ?Sized>(
    net: &LstmNetwork,
    window: &[W],
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Cache)> {
    match mode {
        Mode::Train if net.dropout > 0.0 => {
            let masks = net.sample_masks(window.len(), rng);
            forward_with_masks(net, window, Some(&masks))
        }
        _ => forward_with_masks(net, window, None),
    }
}

pub fn predict<W: AsRef<[f64]>>(net: &LstmNetwork, window: &[W]) -> Result<Vec<f64>> {
    forward_with_masks(net, window, None).map(|(p, _)| p)
}

/// Mean over output dimensions of the squared residual.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

/// Loss gradients shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &LstmNetwork) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w: vec![0.0; l.w.len()],
                    u: vec![0.0; l.u.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            dense_w: vec![0.0; net.dense.w.len()],
            dense_b: vec![0.0; net.dense.b.len()],
        }
    }

    /// Same block order as [`LstmNetwork::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.extend([l.w.as_slice(), l.u.as_slice(), l.b.as_slice()]);
        }
        out.extend([self.dense_w.as_slice(), self.dense_b.as_slice()]);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.extend([l.w.as_mut_slice(), l.u.as_mut_slice(), l.b.as_mut_slice()]);
        }
        out.extend([self.dense_w.as_mut_slice(), self.dense_b.as_mut_slice()]);
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for x in s {
                *x *= k;
            }
        }
    }
}

/// Exact gradient of [`mse`] for the forward pass recorded in `cache`.
pub fn backward(net: &LstmNetwork, cache: &Cache, target: &[f64]) -> Result<Gradients> {
    if cache.layers.len() != net.layers.len()
        || cache.prediction.len() != net.out_dim()
        || target.len() != net.out_dim()
        || cache.top.len() != net.dense.d_in
    {
        return Err(Error::CacheMismatch(
            "layer count or output width differs".into(),
        ));
    }
    for (lc, layer) in cache.layers.iter().zip(&net.layers) {
        if lc.inputs.len() != lc.steps * layer.d_in || lc.cells.len() != lc.steps * layer.hidden {
            return Err(Error::CacheMismatch(
                "layer activation shape differs".into(),
            ));
        }
    }

    let mut grads = Gradients::zeros_like(net);
    let out_dim = net.out_dim() as f64;
    let dpred: Vec<f64> = cache
        .prediction
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / out_dim)
        .collect();
    ger_acc(&mut grads.dense_w, &dpred, &cache.top);
    grads.dense_b.copy_from_slice(&dpred);

    let steps = cache.layers[0].steps;
    // Gradient w.r.t. the output sequence of the current layer.
    let h_top = net.dense.d_in;
    let mut d_out = vec![0.0; steps * h_top];
    gemv_t_acc(&net.dense.w, &dpred, &mut d_out[(steps - 1) * h_top..]);

    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let lc = &cache.layers[l];
        let g = &mut grads.layers[l];
        let (d, h) = (layer.d_in, layer.hidden);

        if let Some(mask) = &lc.mask {
            for (x, k) in d_out.iter_mut().zip(mask) {
                *x *= k;
            }
        }
        let mut d_in = vec![0.0; steps * d];
        if l > 0 && net.residual {
            d_in.copy_from_slice(&d_out);
        }

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        let zeros = vec![0.0; h];
        for t in (0..steps).rev() {
            let gates = &lc.gates[t * 4 * h..(t + 1) * 4 * h];
            let c = &lc.cells[t * h..(t + 1) * h];
            let c_prev = if t == 0 {
                &zeros[..]
            } else {
                &lc.cells[(t - 1) * h..t * h]
            };
            let h_prev = if t == 0 {
                &zeros[..]
            } else {
                &lc.hiddens[(t - 1) * h..t * h]
            };
            for j in 0..h {
                let (i, f, gg, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let dh = d_out[t * h + j] + dh_next[j];
                let s = relu(c[j]);
                let d_o = dh * s;
                let ds = dh * o;
                let dc = if c[j] > 0.0 { ds } else { 0.0 } + dc_next[j];
                let di = dc * gg;
                let dg = dc * i;
                let df = dc * c_prev[j];
                dc_next[j] = dc * f;
                da[j] = di * i * (1.0 - i);
                da[h + j] = df * f * (1.0 - f);
                da[2 * h + j] = if lc.cand_pre[t * h + j] > 0.0 {
                    dg
                } else {
                    0.0
                };
                da[3 * h + j] = d_o * o * (1.0 - o);
            }
            let x = &lc.inputs[t * d..(t + 1) * d];
            ger_acc(&mut g.w, &da, x);
            ger_acc(&mut g.u, &da, h_prev);
            for (b, a) in g.b.iter_mut().zip(&da) {
                *b += a;
            }
            gemv_t_acc(&layer.w, &da, &mut d_in[t * d..(t + 1) * d]);
            dh_next.fill(0.0);
            gemv_t_acc(&layer.u, &da, &mut dh_next);
        }
        d_out = d_in;
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch size and epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment estimates, one buffer per parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(net: &LstmNetwork) -> Self {
        let shapes: Vec<Vec<f64>> = net
            .param_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Adam {
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut LstmNetwork, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in net
            .param_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Mini-batch trainer holding optimizer state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: Adam,
}

impl Trainer {
    pub fn new(net: &LstmNetwork, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            adam: Adam::new(net),
        })
    }

    /// One pass over the shuffled windows; returns the mean per-window loss.
    pub fn train_epoch<W, R>(
        &mut self,
        net: &mut LstmNetwork,
        inputs: &[Vec<W>],
        targets: &[[f64; 2]],
        rng: &mut R,
    ) -> Result<f64>
    where
        W: AsRef<[f64]>,
        R: Rng + ?Sized,
    {
        assert_eq!(inputs.len(), targets.len());
        if inputs.is_empty() {
            return Err(Error::TrackTooShort {
                vessel_id: String::new(),
                len: 0,
                needed: 1,
            });
        }
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc = Gradients::zeros_like(net);
            for &i in batch {
                let (pred, cache) = forward(net, &inputs[i], Mode::Train, rng)?;
                total += mse(&pred, &targets[i]);
                acc.add_assign(&backward(net, &cache, &targets[i])?);
            }
            acc.scale(1.0 / batch.len() as f64);
            self.adam.step(net, &acc, &self.cfg);
        }
        Ok(total / inputs.len() as f64)
    }

    /// Runs `cfg.epochs` epochs and returns the per-epoch loss history.
    pub fn fit<W, R>(
        &mut self,
        net: &mut LstmNetwork,
        inputs: &[Vec<W>],
        targets: &[[f64; 2]],
        rng: &mut R,
    ) -> Result<Vec<f64>>
    where
        W: AsRef<[f64]>,
        R: Rng + ?Sized,
    {
        (0..self.cfg.epochs)
            .map(|_| self.train_epoch(net, inputs, targets, rng))
            .collect()
    }
}

/// Mean loss without dropout or parameter updates.
pub fn evaluate<W: AsRef<[f64]>>(
    net: &LstmNetwork,
    inputs: &[Vec<W>],
    targets: &[[f64; 2]],
) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        total += mse(&predict(net, x)?, y);
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// How the non-predicted columns of a fed-back row are filled during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Repeat the speed and course of the newest row in the window.
    #[default]
    HoldLast,
    /// Use fixed scaled speed and course values.
    Fixed { speed: f64, course: f64 },
}

/// Incremental recursive rollout from a seed window.
#[derive(Debug, Clone)]
pub struct Rollout {
    window: Vec<Sample>,
    policy: FillPolicy,
    steps: usize,
    last: Option<[f64; 2]>,
}

impl Rollout {
    pub fn new(seed_window: &[Sample], policy: FillPolicy) -> Self {
        Rollout {
            window: seed_window.to_vec(),
            policy,
            steps: 0,
            last: None,
        }
    }

    pub fn policy(&self) -> FillPolicy {
        self.policy
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn last(&self) -> Option<[f64; 2]> {
        self.last
    }

    /// Predicts the next row and pushes it into the window.
    pub fn step(&mut self, net: &LstmNetwork) -> Result<[f64; 2]> {
        let out = predict(net, &self.window)?;
        let pred = [out[0], out[1]];
        let newest = *self.window.last().expect("non-empty window");
        let mut row = newest;
        row[LAT] = pred[0];
        row[LON] = pred[1];
        if let FillPolicy::Fixed { speed, course } = self.policy {
            row[crate::preprocess::SPEED] = speed;
            row[crate::preprocess::COURSE] = course;
        }
        self.window.remove(0);
        self.window.push(row);
        self.steps += 1;
        self.last = Some(pred);
        Ok(pred)
    }

    /// Advances until `steps` predictions have been made in total.
    pub fn advance_to(&mut self, net: &LstmNetwork, steps: usize) -> Result<Option<[f64; 2]>> {
        while self.steps < steps {
            self.step(net)?;
        }
        Ok(self.last)
    }
}

/// Recursive multi-step prediction; returns the scaled (lat, lon) of every step.
pub fn predict_sequence(
    net: &LstmNetwork,
    seed_window: &[Sample],
    steps: usize,
    policy: FillPolicy,
) -> Result<Vec<[f64; 2]>> {
    assert!(steps >= 1, "rollout needs at least one step");
    let mut roll = Rollout::new(seed_window, policy);
    (0..steps).map(|_| roll.step(net)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_window(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(count_params(32, 32), 8320);
        assert_eq!(count_params(4, 32), 4736);
        assert_eq!(count_params(5, 32), 4864);
        assert_eq!(count_dense_params(32, 1), 33);
        assert_eq!(count_dense_params(32, 2), 66);
        let net = LstmNetwork::init(&Topology::default(), &mut rng(1));
        for l in &net.layers {
            assert_eq!(l.count_params(), l.stored_params());
        }
        let stored: usize = net.param_slices().iter().map(|s| s.len()).sum();
        assert_eq!(stored, net.count_params());
        assert_eq!(net.count_params(), 4736 + 8320 + 8320 + 66);
    }

    #[test]
    fn zero_network_predicts_origin() {
        let net = LstmNetwork::zeros(&Topology::default());
        let w = random_window(&mut rng(2), 10, 4);
        assert_eq!(predict(&net, &w).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_cell_hand_evaluation() {
        let topo = Topology {
            input_dim: 1,
            hidden: 1,
            layers: 1,
            out_dim: 1,
            dropout: 0.0,
            residual: false,
        };
        let mut net = LstmNetwork::zeros(&topo);
        net.layers[0].b = vec![0.0, 0.0, 3f64.ln(), 0.0];
        net.dense.w = vec![1.0];
        let out = predict(&net, &[[1.0]]).unwrap();
        // c = 0.5 * 0 + 0.5 * ln 3, h = 0.5 * c
        let c = 0.5 * 3f64.ln();
        assert!((c - 0.549306).abs() < 1e-6);
        assert!((out[0] - 0.274653).abs() < 1e-6);
        assert_eq!(out[0], 0.5 * c);
    }

    #[test]
    fn infer_is_deterministic_and_matches_train_without_dropout() {
        let topo = Topology {
            dropout: 0.0,
            ..Topology::default()
        };
        let net = LstmNetwork::init(&topo, &mut rng(3));
        let w = random_window(&mut rng(4), 10, 4);
        let a = forward(&net, &w, Mode::Infer, &mut rng(5)).unwrap().0;
        let b = forward(&net, &w, Mode::Infer, &mut rng(6)).unwrap().0;
        let c = forward(&net, &w, Mode::Train, &mut rng(7)).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let net = LstmNetwork::init(
            &Topology {
                dropout: 0.5,
                ..Topology::default()
            },
            &mut rng(3),
        );
        let w = random_window(&mut rng(4), 10, 4);
        let infer = forward(&net, &w, Mode::Infer, &mut rng(5)).unwrap().0;
        let train = forward(&net, &w, Mode::Train, &mut rng(5)).unwrap().0;
        assert_ne!(infer, train);
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let net = LstmNetwork::init(&Topology::default(), &mut rng(8));
        let w = random_window(&mut rng(9), 10, 4);
        let (pred, cache) = forward_with_masks(&net, &w, None).unwrap();
        let g = backward(&net, &cache, &pred).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dense_bias_gradient_is_linear_in_residual() {
        let net = LstmNetwork::init(&Topology::default(), &mut rng(10));
        let w = random_window(&mut rng(11), 10, 4);
        let (pred, cache) = forward_with_masks(&net, &w, None).unwrap();
        let t1 = [pred[0] - 0.25, pred[1] + 0.5];
        let t2 = [pred[0] - 0.5, pred[1] + 1.0];
        let g1 = backward(&net, &cache, &t1).unwrap();
        let g2 = backward(&net, &cache, &t2).unwrap();
        for (a, b) in g1.dense_b.iter().zip(&g2.dense_b) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let net = LstmNetwork::init(&Topology::default(), &mut rng(12));
        let small = LstmNetwork::init(
            &Topology {
                layers: 2,
                ..Topology::default()
            },
            &mut rng(12),
        );
        let w = random_window(&mut rng(13), 10, 4);
        let (_, cache) = forward_with_masks(&small, &w, None).unwrap();
        assert!(matches!(
            backward(&net, &cache, &[0.0, 0.0]),
            Err(Error::CacheMismatch(_))
        ));
        assert!(matches!(
            backward(&small, &cache, &[0.0]),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let mut net = LstmNetwork::zeros(&Topology {
            dropout: 0.0,
            ..Topology::default()
        });
        for l in &mut net.layers {
            l.w.fill(1e200);
            l.b.fill(1e200);
        }
        let w = vec![vec![1e200; 4]; 3];
        assert!(matches!(
            predict(&net, &w),
            Err(Error::NonFiniteActivation { .. })
        ));
    }

    /// Central finite differences on a small network; the acceptance suite runs the full-size check.
    #[test]
    fn gradients_match_finite_differences_on_small_net() {
        let topo = Topology {
            hidden: 5,
            ..Topology::default()
        };
        let mut net = LstmNetwork::init(&topo, &mut rng(14));
        let mut r = rng(15);
        let w = random_window(&mut r, 6, 4);
        let masks = net.sample_masks(6, &mut r);
        let target = [1.5, -0.5];
        let (_, cache) = forward_with_masks(&net, &w, Some(&masks)).unwrap();
        let grads = backward(&net, &cache, &target).unwrap();
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let eps = 1e-5;
        let mut checked = 0;
        for (block, grads) in analytic.iter().enumerate() {
            for (k, &a) in grads.iter().enumerate() {
                let orig = net.param_slices()[block][k];
                net.param_slices_mut()[block][k] = orig + eps;
                let (p_plus, c_plus) = forward_with_masks(&net, &w, Some(&masks)).unwrap();
                net.param_slices_mut()[block][k] = orig - eps;
                let (p_minus, c_minus) = forward_with_masks(&net, &w, Some(&masks)).unwrap();
                net.param_slices_mut()[block][k] = orig;
                let pattern = |c: &Cache| c.relu_inputs().map(|v| v > 0.0).collect::<Vec<_>>();
                if pattern(&c_plus) != pattern(&cache) || pattern(&c_minus) != pattern(&cache) {
                    continue;
                }
                let numeric = (mse(&p_plus, &target) - mse(&p_minus, &target)) / (2.0 * eps);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < 1e-4 || (a - numeric).abs() < 1e-9,
                    "block {block} coord {k}: analytic {a} numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let topo = Topology {
            dropout: 0.0,
            ..Topology::default()
        };
        let mut net = LstmNetwork::init(&topo, &mut rng(16));
        let before = net.clone();
        let mut r = rng(17);
        let inputs: Vec<Vec<Vec<f64>>> = (0..7).map(|_| random_window(&mut r, 10, 4)).collect();
        let targets: Vec<[f64; 2]> = (0..7).map(|i| [i as f64 * 0.1, 0.3]).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&net, cfg).unwrap();
        let loss = trainer
            .train_epoch(&mut net, &inputs, &targets, &mut r)
            .unwrap();
        assert_eq!(net, before);
        let eval = evaluate(&net, &inputs, &targets).unwrap();
        assert!((loss - eval).abs() < 1e-12 * eval.max(1.0));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut r = rng(18);
            let mut net = LstmNetwork::init(&Topology::default(), &mut r);
            let inputs: Vec<Vec<Vec<f64>>> =
                (0..13).map(|_| random_window(&mut r, 10, 4)).collect();
            let targets: Vec<[f64; 2]> = (0..13).map(|i| [0.05 * i as f64, 0.5]).collect();
            let cfg = TrainConfig {
                epochs: 3,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            };
            let hist = Trainer::new(&net, cfg)
                .unwrap()
                .fit(&mut net, &inputs, &targets, &mut r)
                .unwrap();
            (net, hist)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rollout_matches_manual_unrolling() {
        let net = LstmNetwork::init(&Topology::default(), &mut rng(19));
        let seed: Vec<Sample> = (0..10)
            .map(|i| [0.1 * i as f64, 0.05 * i as f64, 0.3, 0.7])
            .collect();
        let seq = predict_sequence(&net, &seed, 3, FillPolicy::HoldLast).unwrap();

        let mut window = seed.clone();
        for expected in &seq {
            let out = predict(&net, &window).unwrap();
            assert_eq!([out[0], out[1]], *expected);
            window.remove(0);
            window.push([out[0], out[1], 0.3, 0.7]);
        }
        assert_eq!(
            predict_sequence(&net, &seed, 1, FillPolicy::HoldLast).unwrap()[0],
            seq[0]
        );

        let zero = LstmNetwork::zeros(&Topology::default());
        assert!(predict_sequence(&zero, &seed, 4, FillPolicy::HoldLast)
            .unwrap()
            .iter()
            .all(|p| *p == [0.0, 0.0]));
    }

    #[test]
    fn fixed_fill_policy_overrides_speed_and_course() {
        let mut roll = Rollout::new(
            &[[0.0, 0.0, 0.9, 0.9]; 3],
            FillPolicy::Fixed {
                speed: 0.1,
                course: 0.2,
            },
        );
        let net = LstmNetwork::init(&Topology::default(), &mut rng(20));
        roll.advance_to(&net, 2).unwrap();
        assert_eq!(roll.steps_taken(), 2);
        assert_eq!(roll.window[2][2..], [0.1, 0.2]);
        assert_eq!(roll.window[0][2..], [0.9, 0.9]);
    }
}
