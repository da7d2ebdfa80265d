//! Dense ReLU network with dropout, exact backprop and SGD.
//!
//! Weights are stored per layer as `in_dim x out_dim` row-major matrices, so a
//! batch forward pass is a sequence of contiguous axpy updates. All arithmetic
//! is `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub n_classes: usize,
    pub dropout_p: f64,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        n_classes: usize,
        dropout_p: f64,
    ) -> Result<Self> {
        let arch = Architecture {
            input_dim,
            hidden_widths,
            n_classes,
            dropout_p,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            return Err(Error::input("input_dim and n_classes must be >= 1"));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::input("hidden widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::input(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// `(in, out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.n_classes));
        dims
    }

    /// Column label used in heatmap files, e.g. `w128x64`.
    pub fn width_label(&self) -> String {
        let widths: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        format!("w{}", widths.join("x"))
    }

    /// Submodel order for permutation-invariant dense nets: same depth and
    /// element-wise smaller or equal hidden widths.
    pub fn is_submodel_of(&self, other: &Architecture) -> bool {
        self.input_dim == other.input_dim
            && self.n_classes == other.n_classes
            && self.hidden_widths.len() == other.hidden_widths.len()
            && self
                .hidden_widths
                .iter()
                .zip(&other.hidden_widths)
                .all(|(a, b)| a <= b)
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One affine layer; also used as the shape of gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    /// `out[b] = bias + input[b] * W` for every row of the batch.
    fn affine(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.in_dim, self.out_dim);
        let mut out = Vec::with_capacity(batch * n_out);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        for b in 0..batch {
            let row = &input[b * n_in..(b + 1) * n_in];
            let dst = &mut out[b * n_out..(b + 1) * n_out];
            for (k, &xk) in row.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let w = &self.weights[k * n_out..(k + 1) * n_out];
                for (d, &wkj) in dst.iter_mut().zip(w) {
                    *d += xk * wkj;
                }
            }
        }
        out
    }
}

/// Parameters of a dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub layers: Vec<DenseLayer>,
    /// Seed used by [`mlp_init`].
    pub seed: u64,
}

/// Gradients, shaped like [`MlpParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; used while fitting.
    Train,
    /// Dropout off.
    Eval,
    /// Dropout active at inference (MC-dropout passes).
    McSample,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Everything backprop needs from a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub inputs: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Vec<f64>>,
    /// Hidden outputs after ReLU and dropout.
    pub acts: Vec<Vec<f64>>,
    /// Dropout scale factors (`0` or `1/(1-p)`); empty when dropout was off.
    pub masks: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs_row(&self, b: usize, n_classes: usize) -> &[f64] {
        &self.probs[b * n_classes..(b + 1) * n_classes]
    }

    pub fn logits_row(&self, b: usize, n_classes: usize) -> &[f64] {
        &self.logits[b * n_classes..(b + 1) * n_classes]
    }
}

/// He-normal initialization: weights ~ N(0, 2/fan_in), biases zero.
pub fn mlp_init(arch: &Architecture, seed: u64) -> MlpParams {
    let mut rng = seed::rng(seed);
    let layers = arch
        .layer_dims()
        .into_iter()
        .map(|(n_in, n_out)| {
            let std = (2.0 / n_in as f64).sqrt();
            let weights = (0..n_in * n_out)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            DenseLayer {
                in_dim: n_in,
                out_dim: n_out,
                weights,
                bias: vec![0.0; n_out],
            }
        })
        .collect();
    MlpParams {
        arch: arch.clone(),
        layers,
        seed,
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl MlpParams {
    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.values_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Forward a batch stored row-major in `x` (`batch x input_dim`).
    ///
    /// `rng` is only drawn from when dropout is active and `dropout_p > 0`.
    pub fn forward_batch(&self, x: &[f64], batch: usize, mode: Mode, rng: &mut Rng) -> Result<ForwardCache> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::input(format!(
                "input length {} does not match batch {} x input_dim {}",
                x.len(),
                batch,
                self.input_dim()
            )));
        }
        let p = self.arch.dropout_p;
        let use_dropout = mode.dropout_active() && p > 0.0;
        let keep_scale = 1.0 / (1.0 - p);
        let n_hidden = self.layers.len() - 1;

        let mut pre = Vec::with_capacity(n_hidden);
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        let mut masks = Vec::new();
        for (li, layer) in self.layers[..n_hidden].iter().enumerate() {
            let input = if li == 0 { x } else { &acts[li - 1] };
            let z = layer.affine(input, batch);
            let mut h: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            if use_dropout {
                let mask: Vec<f64> = (0..h.len())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                    .collect();
                for (hv, m) in h.iter_mut().zip(&mask) {
                    *hv *= m;
                }
                masks.push(mask);
            }
            pre.push(z);
            acts.push(h);
        }
        let last_in = if n_hidden == 0 { x } else { &acts[n_hidden - 1] };
        let logits = self.layers[n_hidden].affine(last_in, batch);
        let c = self.n_classes();
        let mut probs = logits.clone();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(ForwardCache {
            batch,
            inputs: x.to_vec(),
            pre,
            acts,
            masks,
            logits,
            probs,
        })
    }

    /// Single-input forward; returns the class probabilities and the cache.
    pub fn forward(&self, x: &[f64], mode: Mode, rng: &mut Rng) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = self.forward_batch(x, 1, mode, rng)?;
        Ok((cache.probs.clone(), cache))
    }

    /// Exact gradients of `sum_b loss_b` given `d loss_b / d logits_b` for
    /// every row of the cached batch.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        let batch = cache.batch;
        let c = self.n_classes();
        if grad_logits.len() != batch * c {
            return Err(Error::input(format!(
                "grad_logits length {} does not match batch {} x classes {}",
                grad_logits.len(),
                batch,
                c
            )));
        }
        let n_hidden = self.layers.len() - 1;
        if cache.pre.len() != n_hidden || cache.inputs.len() != batch * self.input_dim() {
            return Err(Error::input("forward cache does not match these parameters"));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.to_vec();
        for li in (0..=n_hidden).rev() {
            let layer = &self.layers[li];
            let input: &[f64] = if li == 0 { &cache.inputs } else { &cache.acts[li - 1] };
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let g = &mut grads.layers[li];
            for b in 0..batch {
                let d = &delta[b * n_out..(b + 1) * n_out];
                for (gb, &dv) in g.bias.iter_mut().zip(d) {
                    *gb += dv;
                }
                let row = &input[b * n_in..(b + 1) * n_in];
                for (k, &xk) in row.iter().enumerate() {
                    if xk == 0.0 {
                        continue;
                    }
                    let gw = &mut g.weights[k * n_out..(k + 1) * n_out];
                    for (gv, &dv) in gw.iter_mut().zip(d) {
                        *gv += xk * dv;
                    }
                }
            }
            if li == 0 {
                break;
            }
            // Propagate into the previous hidden layer.
            let mut next = vec![0.0; batch * n_in];
            for b in 0..batch {
                let d = &delta[b * n_out..(b + 1) * n_out];
                let dst = &mut next[b * n_in..(b + 1) * n_in];
                for (k, dk) in dst.iter_mut().enumerate() {
                    let w = &layer.weights[k * n_out..(k + 1) * n_out];
                    *dk = w.iter().zip(d).map(|(a, b)| a * b).sum();
                }
            }
            let z = &cache.pre[li - 1];
            let mask = cache.masks.get(li - 1);
            for (i, v) in next.iter_mut().enumerate() {
                if z[i] <= 0.0 {
                    *v = 0.0;
                } else if let Some(m) = mask {
                    *v *= m[i];
                }
            }
            delta = next;
        }
        Ok(grads)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<DenseLayer>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::input(format!(
                "bad optimizer hyperparameters: lr={learning_rate}, momentum={momentum}, weight_decay={weight_decay}"
            )));
        }
        Ok(OptimizerState {
            velocity: Gradients::zeros_like(params).layers,
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
pub fn sgd_step(params: &mut MlpParams, grads: &Gradients, state: &mut OptimizerState) {
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((layer, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.iter_mut())
    {
        for ((p, gv), vv) in layer.values_mut().zip(g.values()).zip(v.values_mut()) {
            *vv = mu * *vv + gv + wd * *p;
            *p -= lr * *vv;
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EBNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a little-endian checkpoint: magic `EBNN`, version, architecture ints
/// (input_dim, hidden count, widths..., n_classes), dropout as f32, init seed
/// as u64, then per layer the row-major f32 weight matrix followed by the bias.
pub fn write_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let arch = &params.arch;
    let mut buf = Vec::with_capacity(32 + 4 * arch.n_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut ints = vec![arch.input_dim as u32, arch.hidden_widths.len() as u32];
    ints.extend(arch.hidden_widths.iter().map(|&w| w as u32));
    ints.push(arch.n_classes as u32);
    for i in ints {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    buf.extend_from_slice(&(arch.dropout_p as f32).to_le_bytes());
    buf.extend_from_slice(&params.seed.to_le_bytes());
    for layer in &params.layers {
        for &v in layer.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<MlpParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = ByteCursor { bytes: &bytes, pos: 0, path };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "checkpoint magic mismatch"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let input_dim = cur.u32()? as usize;
    let n_hidden = cur.u32()? as usize;
    if n_hidden > 1024 {
        return Err(Error::format(path, format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden_widths = (0..n_hidden)
        .map(|_| cur.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_classes = cur.u32()? as usize;
    let dropout_p = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
    let seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let arch = Architecture::new(input_dim, hidden_widths, n_classes, dropout_p)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let expected = 4 * arch.n_params();
    if bytes.len() - cur.pos != expected {
        return Err(Error::format(
            path,
            format!("expected {} parameter bytes, found {}", expected, bytes.len() - cur.pos),
        ));
    }
    let mut layers = Vec::new();
    for (n_in, n_out) in arch.layer_dims() {
        let mut layer = DenseLayer::zeros(n_in, n_out);
        for v in layer.values_mut() {
            *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
        }
        layers.push(layer);
    }
    Ok(MlpParams { arch, layers, seed })
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
