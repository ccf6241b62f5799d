//! Small fully convolutional per-pixel classifier with a hand-written backward
//! pass, SGD with momentum, a poly learning-rate schedule and checkpoint I/O.
//!
//! Layout: `hidden.len()` 3×3 convolutions (padding 1, ReLU) followed by a 1×1
//! convolution to `num_classes` logits. All tensors are single images (`C×H×W`);
//! batches are handled by accumulating [`Gradients`] across images.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridTensor, LabelMap};
use crate::rng::{seeded, stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Widths of the 3×3 ReLU layers.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: vec![16, 16],
            num_classes: 4,
            kernel: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::invalid(
                "network needs at least one input channel and two classes",
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let mut prev = self.in_channels;
        let mut total = 0;
        for &w in &self.hidden {
            total += w * prev * self.kernel * self.kernel + w;
            prev = w;
        }
        total + self.num_classes * prev + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    /// `out × in × k × k`
    weight: GridTensor,
    bias: GridTensor,
}

#[derive(Debug, Clone)]
struct Cache {
    height: usize,
    width: usize,
    /// im2col of each layer's input.
    cols: Vec<Vec<f64>>,
    /// Post-ReLU output of each hidden layer.
    activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SegNetwork {
    config: NetworkConfig,
    init_seed: u64,
    layers: Vec<Conv>,
    cache: Option<Cache>,
}

/// Gradients aligned with [`SegNetwork::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<GridTensor>,
}

impl Gradients {
    pub fn zeros_like(net: &SegNetwork) -> Self {
        Self {
            tensors: net
                .params()
                .iter()
                .map(|p| GridTensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::invalid("gradient sets have different lengths"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl SegNetwork {
    /// Uniform fan-in initialization: He-uniform bound for ReLU layers,
    /// `1/sqrt(fan_in)` for the classifier; zero biases.
    pub fn new(config: NetworkConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(init_seed, stream::NET_INIT);
        let mut layers = Vec::with_capacity(config.hidden.len() + 1);
        let mut prev = config.in_channels;
        let widths = config
            .hidden
            .iter()
            .map(|&w| (w, config.kernel))
            .chain(std::iter::once((config.num_classes, 1)));
        let n_hidden = config.hidden.len();
        for (i, (out_ch, k)) in widths.enumerate() {
            let fan_in = (prev * k * k) as f64;
            let bound = if i < n_hidden {
                (6.0 / fan_in).sqrt()
            } else {
                1.0 / fan_in.sqrt()
            };
            let n = out_ch * prev * k * k;
            let weight = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Conv {
                in_ch: prev,
                out_ch,
                k,
                weight: GridTensor::new(vec![out_ch, prev, k, k], weight)?,
                bias: GridTensor::zeros(&[out_ch]),
            });
            prev = out_ch;
        }
        Ok(Self {
            config,
            init_seed,
            layers,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameters in a fixed order: weight then bias for each layer.
    pub fn params(&self) -> Vec<&GridTensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut GridTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        self.cache = None;
        Ok(())
    }

    /// Sets the final 1×1 layer to zero, so logits are identically zero.
    pub fn zero_classifier(&mut self) {
        let last = self.layers.last_mut().expect("network has a classifier");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    /// Logits for `x`, retaining activations for [`SegNetwork::backward`].
    pub fn forward(&mut self, x: &GridTensor) -> Result<GridTensor> {
        let (logits, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(logits)
    }

    /// Logits for `x` without touching the activation cache.
    pub fn predict_logits(&self, x: &GridTensor) -> Result<GridTensor> {
        Ok(self.run(x, false)?.0)
    }

    fn run(&self, x: &GridTensor, keep: bool) -> Result<(GridTensor, Option<Cache>)> {
        let (c, h, w) = x.chw()?;
        if c != self.config.in_channels {
            return Err(Error::invalid(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let hw = h * w;
        let mut cols_cache = Vec::new();
        let mut act_cache = Vec::new();
        let mut input = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let cols = if layer.k == 1 {
                input
            } else {
                im2col(&input, layer.in_ch, h, w, layer.k)
            };
            let mut out = vec![0.0; layer.out_ch * hw];
            for (o, row) in out.chunks_mut(hw).enumerate() {
                row.fill(layer.bias.data()[o]);
            }
            let kk = layer.in_ch * layer.k * layer.k;
            gemm(
                layer.out_ch,
                kk,
                hw,
                layer.weight.data(),
                (kk, 1),
                &cols,
                (hw, 1),
                &mut out,
                1.0,
            );
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                if keep {
                    act_cache.push(out.clone());
                }
            }
            if keep {
                cols_cache.push(cols);
            }
            input = out;
        }
        let logits = GridTensor::new(vec![self.config.num_classes, h, w], input)?;
        let cache = keep.then(|| Cache {
            height: h,
            width: w,
            cols: cols_cache,
            activations: act_cache,
        });
        Ok((logits, cache))
    }

    /// Parameter gradients given the loss gradient on the logits of the last
    /// [`SegNetwork::forward`] call.
    pub fn backward(&self, grad_logits: &GridTensor) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        if grad_logits.shape() != [self.config.num_classes, h, w] {
            return Err(Error::invalid(format!(
                "upstream gradient shape {:?} does not match logits {:?}",
                grad_logits.shape(),
                [self.config.num_classes, h, w]
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let kk = layer.in_ch * layer.k * layer.k;
            let cols = &cache.cols[i];
            let mut dw = vec![0.0; layer.out_ch * kk];
            // dW = delta · colsᵀ
            gemm(
                layer.out_ch,
                hw,
                kk,
                &delta,
                (hw, 1),
                cols,
                (1, hw),
                &mut dw,
                0.0,
            );
            let db: Vec<f64> = delta.chunks(hw).map(|row| row.iter().sum()).collect();
            grads.push((
                GridTensor::new(layer.weight.shape().to_vec(), dw)?,
                GridTensor::new(vec![layer.out_ch], db)?,
            ));
            if i == 0 {
                break;
            }
            // dcols = Wᵀ · delta
            let mut dcols = vec![0.0; kk * hw];
            gemm(
                kk,
                layer.out_ch,
                hw,
                layer.weight.data(),
                (1, kk),
                &delta,
                (hw, 1),
                &mut dcols,
                0.0,
            );
            let mut dinput = if layer.k == 1 {
                dcols
            } else {
                col2im(&dcols, layer.in_ch, h, w, layer.k)
            };
            for (d, &a) in dinput.iter_mut().zip(&cache.activations[i - 1]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = dinput;
        }
        grads.reverse();
        Ok(Gradients {
            tensors: grads.into_iter().flat_map(|(w, b)| [w, b]).collect(),
        })
    }

    pub fn save_checkpoint(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob_name = format!("{name}.f64");
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            network: self.config.clone(),
            init_seed: self.init_seed,
            tensors: self
                .param_names()
                .into_iter()
                .zip(self.params())
                .map(|(name, p)| TensorEntry {
                    name,
                    shape: p.shape().to_vec(),
                })
                .collect(),
            blob: blob_name.clone(),
            num_values: self.num_parameters(),
        };
        let blob: Vec<u8> = self
            .flat_params()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let blob_path = dir.join(&blob_name);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path, name: &str) -> Result<Self> {
        let manifest_path = dir.join(format!("{name}.json"));
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "unsupported checkpoint format {} v{}",
                    manifest.format, manifest.version
                ),
            ));
        }
        let mut net = SegNetwork::new(manifest.network.clone(), manifest.init_seed)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let expected: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
        let listed: Vec<Vec<usize>> = manifest.tensors.iter().map(|t| t.shape.clone()).collect();
        if expected != listed || manifest.num_values != net.num_parameters() {
            return Err(Error::format(
                &manifest_path,
                "tensor shapes do not match the declared architecture",
            ));
        }
        let blob_path = dir.join(&manifest.blob);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if bytes.len() != 8 * manifest.num_values {
            return Err(Error::format(
                &blob_path,
                format!(
                    "expected {} bytes, found {}",
                    8 * manifest.num_values,
                    bytes.len()
                ),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.set_flat_params(&values)
            .map_err(|e| Error::format(&blob_path, e.to_string()))?;
        Ok(net)
    }
}

const CHECKPOINT_FORMAT: &str = "cpcl-segnet";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    network: NetworkConfig,
    init_seed: u64,
    tensors: Vec<TensorEntry>,
    blob: String,
    num_values: usize,
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with `(row, col)` strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `ch×h×w` input into `(ch·k·k)×(h·w)` patches with zero padding `k/2`.
fn im2col(input: &[f64], ch: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; ch * k * k * hw];
    for c in 0..ch {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], ch: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; ch * hw];
    for c in 0..ch {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for x in x0..x1 {
                        plane[sy as usize * w + (x as isize + dx) as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel softmax over the leading class dimension, max-shifted for stability.
pub fn softmax_probs(logits: &GridTensor) -> Result<GridTensor> {
    let (c, h, w) = logits.chw()?;
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..hw {
        let max = (0..c).map(|k| src[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (src[k * hw + p] - max).exp();
            out[k * hw + p] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * hw + p] /= sum;
        }
    }
    GridTensor::new(vec![c, h, w], out)
}

/// Most probable class per pixel; ties go to the lowest class index.
pub fn predict_argmax(probs: &GridTensor) -> Result<LabelMap> {
    let (c, h, w) = probs.chw()?;
    if c > u8::MAX as usize {
        return Err(Error::invalid(format!("{c} classes do not fit a label map")));
    }
    let hw = h * w;
    let src = probs.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if src[k * hw + p] > src[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Maximum class probability per pixel (`H×W`).
pub fn confidence_map(probs: &GridTensor) -> Result<GridTensor> {
    let (c, h, w) = probs.chw()?;
    let hw = h * w;
    let src = probs.data();
    let conf = (0..hw)
        .map(|p| (0..c).map(|k| src[k * hw + p]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    GridTensor::new(vec![h, w], conf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iter: usize,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: OptimizerHyper,
    velocity: Vec<GridTensor>,
}

impl OptimizerState {
    pub fn new(net: &SegNetwork, hyper: OptimizerHyper) -> Result<Self> {
        if hyper.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        if !(hyper.lr0 >= 0.0 && hyper.momentum >= 0.0 && hyper.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "lr0, momentum and weight_decay must be nonnegative",
            ));
        }
        Ok(Self {
            hyper,
            velocity: net
                .params()
                .iter()
                .map(|p| GridTensor::zeros(p.shape()))
                .collect(),
        })
    }

    pub fn velocity(&self) -> &[GridTensor] {
        &self.velocity
    }

    /// `lr0 · (1 − iter/max_iter)^power`.
    pub fn poly_lr(&self, iter: usize) -> Result<f64> {
        let max = self.hyper.max_iter;
        if iter > max {
            return Err(Error::invalid(format!(
                "iteration {iter} exceeds max_iter {max}"
            )));
        }
        let frac = 1.0 - iter as f64 / max as f64;
        Ok(self.hyper.lr0 * frac.powf(self.hyper.poly_power))
    }
}

/// `v ← μ·v + (g + λ·θ)`, then `θ ← θ − lr(iter)·v`.
pub fn sgd_step(
    net: &mut SegNetwork,
    grads: &Gradients,
    state: &mut OptimizerState,
    iter: usize,
) -> Result<()> {
    let lr = state.poly_lr(iter)?;
    let shapes_ok = grads.tensors.len() == state.velocity.len()
        && grads
            .tensors
            .iter()
            .zip(net.params())
            .all(|(g, p)| g.shape() == p.shape());
    if !shapes_ok {
        return Err(Error::invalid(
            "gradients do not match the network's parameters",
        ));
    }
    let momentum = state.hyper.momentum;
    let decay = state.hyper.weight_decay;
    for ((param, grad), vel) in net
        .params_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(state.velocity.iter_mut())
    {
        for ((p, &g), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(vel.data_mut())
        {
            *v = momentum * *v + (g + decay * *p);
            *p -= lr * *v;
        }
    }
    net.cache = None;
    Ok(())
}
