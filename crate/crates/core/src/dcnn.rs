//! Ten-layer dilated segmentation network: two input channels (ED, ES
//! slices), eight output channels (four classes per phase).
//!
//! Each layer but the last is conv → batch norm → ReLU → dropout; the last
//! layer emits raw logits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::activation::GROUPED_CHANNELS;
use crate::ops::{
    batch_norm, batch_norm_grad, conv2d_dilated, conv2d_dilated_grad, dropout, dropout_grad, relu, relu_grad,
    BatchNormState, ConvSpec, DropoutMask, Mode,
};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor, NUM_CLASSES};
use crate::uqt;

pub const NUM_LAYERS: usize = 10;
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub layer_kernels: Vec<usize>,
    pub layer_dilations: Vec<usize>,
    /// Width of every hidden layer.
    pub channels: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub num_phases: usize,
    /// Receptive field the layer plan must produce.
    pub declared_receptive_field: usize,
}

impl Default for NetworkConfig {
    /// Eight 3×3 layers dilated `[1,1,2,4,8,16,32,1]`, two 1×1 heads, 32
    /// channels: a 131×131 receptive field.
    fn default() -> Self {
        Self {
            layer_kernels: vec![3, 3, 3, 3, 3, 3, 3, 3, 1, 1],
            layer_dilations: vec![1, 1, 2, 4, 8, 16, 32, 1, 1, 1],
            channels: 32,
            dropout_rate: 0.1,
            num_classes: NUM_CLASSES,
            num_phases: 2,
            declared_receptive_field: 131,
        }
    }
}

impl NetworkConfig {
    /// Reduced plan for single-core experiments on 96×96 phantoms:
    /// dilations `[1,1,2,4,8,16,1,1]`, 69×69 receptive field, 12 channels.
    pub fn desk() -> Self {
        Self {
            layer_kernels: vec![3, 3, 3, 3, 3, 3, 3, 3, 1, 1],
            layer_dilations: vec![1, 1, 2, 4, 8, 16, 1, 1, 1, 1],
            channels: 12,
            dropout_rate: 0.1,
            num_classes: NUM_CLASSES,
            num_phases: 2,
            declared_receptive_field: 69,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_kernels.len() != NUM_LAYERS || self.layer_dilations.len() != NUM_LAYERS {
            return Err(Error::invalid(format!(
                "network needs {NUM_LAYERS} kernels and dilations, got {} and {}",
                self.layer_kernels.len(),
                self.layer_dilations.len()
            )));
        }
        if self.num_classes != NUM_CLASSES || self.num_phases != 2 {
            return Err(Error::invalid("network must have 4 classes and 2 phases"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0,1)"));
        }
        self.layer_specs()?;
        let rf = receptive_field(self);
        if rf != self.declared_receptive_field {
            return Err(Error::invalid(format!(
                "layer plan gives receptive field {rf}, declared {}",
                self.declared_receptive_field
            )));
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Result<Vec<ConvSpec>> {
        let last = self.layer_kernels.len().saturating_sub(1);
        self.layer_kernels
            .iter()
            .zip(&self.layer_dilations)
            .enumerate()
            .map(|(i, (&k, &d))| {
                let cin = if i == 0 { INPUT_CHANNELS } else { self.channels };
                let cout = if i == last {
                    self.num_classes * self.num_phases
                } else {
                    self.channels
                };
                ConvSpec::new(k, d, cin, cout)
            })
            .collect()
    }

    /// Zero padding per side that keeps output and image extents equal.
    pub fn context_pad(&self) -> usize {
        (receptive_field(self) - 1) / 2
    }
}

/// `1 + Σ (kernel − 1)·dilation` over the layers.
pub fn receptive_field(config: &NetworkConfig) -> usize {
    1 + config
        .layer_kernels
        .iter()
        .zip(&config.layer_dilations)
        .map(|(&k, &d)| k.saturating_sub(1) * d)
        .sum::<usize>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub state: BatchNormState<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Option<NormParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub config: NetworkConfig,
    pub layers: Vec<LayerParams<T>>,
}

/// Fresh parameters: weights uniform in `±sqrt(6/fan_in)`, zero biases,
/// unit batch-norm scale and running variance.
pub fn build_network<T: Real>(config: &NetworkConfig, rng: &RngStream) -> Result<NetworkParams<T>> {
    config.validate()?;
    let specs = config.layer_specs()?;
    let last = specs.len() - 1;
    let layers = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let fan_in = (spec.in_channels * spec.kernel_size * spec.kernel_size) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let mut gen = rng.derive(i as u64).rng();
            let weight = Tensor::from_fn(&spec.weight_dims(), |_| T::from_f64(gen.random_range(-bound..bound)));
            let norm = (i != last).then(|| NormParams {
                gamma: Tensor::full(&[spec.out_channels], T::one()),
                beta: Tensor::zeros(&[spec.out_channels]),
                state: BatchNormState::new(spec.out_channels),
            });
            LayerParams {
                spec,
                weight,
                bias: Tensor::zeros(&[spec.out_channels]),
                norm,
            }
        })
        .collect();
    Ok(NetworkParams {
        config: config.clone(),
        layers,
    })
}

impl<T: Real> NetworkParams<T> {
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.config)
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, then
    /// gamma and beta when the layer is normalized.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(n) = &l.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    spec: l.spec,
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    norm: l.norm.as_ref().map(|n| NormParams {
                        gamma: n.gamma.cast(),
                        beta: n.beta.cast(),
                        state: n.state.cast(),
                    }),
                })
                .collect(),
        }
    }

    /// Installs running statistics produced by a training-mode forward pass.
    pub fn set_norm_states(&mut self, states: Vec<Option<BatchNormState<T>>>) {
        for (l, s) in self.layers.iter_mut().zip(states) {
            if let (Some(n), Some(s)) = (&mut l.norm, s) {
                n.state = s;
            }
        }
    }
}

struct LayerCache<T> {
    input: Tensor<T>,
    pre_norm: Option<Tensor<T>>,
    norm_state: Option<BatchNormState<T>>,
    post_norm: Option<Tensor<T>>,
    mask: Option<DropoutMask>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    mode: Mode,
    layers: Vec<LayerCache<T>>,
}

/// Result of a batched forward pass.
pub struct ForwardPass<T> {
    /// `[N, 8, H − rf + 1, W − rf + 1]` logits.
    pub logits: Tensor<T>,
    /// Running statistics after this pass (changed only in train mode).
    pub norm_states: Vec<Option<BatchNormState<T>>>,
    pub cache: Option<ForwardCache<T>>,
}

fn run<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &RngStream,
    keep_cache: bool,
) -> Result<ForwardPass<T>> {
    let [_, c, h, w] = *input.dims() else {
        return Err(Error::shape(format!(
            "network input must be [N,2,H,W], got {:?}",
            input.dims()
        )));
    };
    if c != INPUT_CHANNELS {
        return Err(Error::shape(format!("network input needs 2 channels, got {c}")));
    }
    let rf = params.receptive_field();
    if h < rf || w < rf {
        return Err(Error::shape(format!("input {h}x{w} smaller than receptive field {rf}")));
    }
    let last = params.layers.len() - 1;
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut states = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let z = conv2d_dilated(&x, &layer.weight, &layer.bias, &layer.spec)?;
        match (&layer.norm, i == last) {
            (Some(norm), false) => {
                let (b, new_state) = batch_norm(&z, &norm.gamma, &norm.beta, &norm.state, mode)?;
                let r = relu(&b);
                let (a, mask) = dropout(&r, params.config.dropout_rate, mode, &rng.derive(i as u64))?;
                states.push(Some(new_state));
                let input = std::mem::replace(&mut x, a);
                if keep_cache {
                    caches.push(LayerCache {
                        input,
                        pre_norm: Some(z),
                        norm_state: Some(norm.state.clone()),
                        post_norm: Some(b),
                        mask: Some(mask),
                    });
                }
            }
            _ => {
                states.push(None);
                let input = std::mem::replace(&mut x, z);
                if keep_cache {
                    caches.push(LayerCache {
                        input,
                        pre_norm: None,
                        norm_state: None,
                        post_norm: None,
                        mask: None,
                    });
                }
            }
        }
    }
    x.ensure_finite("network forward")?;
    Ok(ForwardPass {
        logits: x,
        norm_states: states,
        cache: keep_cache.then_some(ForwardCache { mode, layers: caches }),
    })
}

/// Batched forward pass over `[N, 2, H, W]` inputs keeping activations for
/// [`backward`]. Layer `i` draws its dropout mask from `rng.derive(i)`.
pub fn forward_batch<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &RngStream,
) -> Result<ForwardPass<T>> {
    run(params, input, mode, rng, true)
}

/// Forward pass without activation caching.
pub fn infer_batch<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    Ok(run(params, input, mode, rng, false)?.logits)
}

/// Logits `[8, H−rf+1, W−rf+1]` for one (already padded) ED/ES slice pair.
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    ed_slice: &Tensor<T>,
    es_slice: &Tensor<T>,
    mode: Mode,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    let [h, w] = *ed_slice.dims() else {
        return Err(Error::shape("slices must be [H,W]"));
    };
    if es_slice.dims() != ed_slice.dims() {
        return Err(Error::shape("ED and ES slices differ in shape"));
    }
    let mut data = ed_slice.data().to_vec();
    data.extend_from_slice(es_slice.data());
    let input = Tensor::new(vec![1, INPUT_CHANNELS, h, w], data)?;
    let logits = infer_batch(params, &input, mode, rng)?;
    let dims = logits.dims()[1..].to_vec();
    logits.reshape(dims)
}

/// Gradients of a scalar loss w.r.t. every trainable tensor, ordered as
/// [`NetworkParams::trainable`].
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if cache.layers.len() != params.layers.len() {
        return Err(Error::shape("forward cache does not match network"));
    }
    let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(params.layers.len());
    let mut g = grad_logits.clone();
    for (layer, lc) in params.layers.iter().zip(&cache.layers).rev() {
        let mut norm_grads = Vec::new();
        if let (Some(norm), Some(pre), Some(state), Some(post), Some(mask)) =
            (&layer.norm, &lc.pre_norm, &lc.norm_state, &lc.post_norm, &lc.mask)
        {
            let gd = dropout_grad(&g, mask)?;
            let gr = relu_grad(&gd, post)?;
            let bn = batch_norm_grad(&gr, pre, &norm.gamma, state, cache.mode)?;
            norm_grads.push(bn.grad_gamma);
            norm_grads.push(bn.grad_beta);
            g = bn.grad_input;
        }
        let cg = conv2d_dilated_grad(&g, &lc.input, &layer.weight, &layer.spec)?;
        let mut grads = vec![cg.grad_weights, cg.grad_bias];
        grads.extend(norm_grads);
        per_layer.push(grads);
        g = cg.grad_input;
    }
    per_layer.reverse();
    Ok(per_layer.into_iter().flatten().collect())
}

/// Surrounds `[H,W]` with `pad` zeros on every side.
pub fn pad_input<T: Real>(image: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    pad_input_with(image, pad, T::zero())
}

pub fn pad_input_with<T: Real>(image: &Tensor<T>, pad: usize, fill: T) -> Result<Tensor<T>> {
    let [h, w] = *image.dims() else {
        return Err(Error::shape(format!("pad_input expects [H,W], got {:?}", image.dims())));
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![fill; ph * pw];
    for y in 0..h {
        let dst = (y + pad) * pw + pad;
        out[dst..dst + w].copy_from_slice(&image.data()[y * w..(y + 1) * w]);
    }
    Tensor::new(vec![ph, pw], out)
}

const MANIFEST: &str = "manifest.txt";
const CHECKPOINT_FORMAT: &str = "uncseg-checkpoint-1";

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("bad integer '{p}': {e}")))
        })
        .collect()
}

/// Writes a checkpoint directory: one UQT1 file per tensor plus a
/// `manifest.txt` echoing the configuration and iteration.
pub fn save_checkpoint(dir: &Path, params: &NetworkParams<f32>, iteration: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &params.config;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format = {CHECKPOINT_FORMAT}");
    let _ = writeln!(manifest, "iteration = {iteration}");
    let _ = writeln!(manifest, "kernels = {}", join_usize(&c.layer_kernels));
    let _ = writeln!(manifest, "dilations = {}", join_usize(&c.layer_dilations));
    let _ = writeln!(manifest, "channels = {}", c.channels);
    let _ = writeln!(manifest, "dropout_rate = {}", c.dropout_rate);
    let _ = writeln!(manifest, "receptive_field = {}", c.declared_receptive_field);
    for (i, l) in params.layers.iter().enumerate() {
        let s = &l.spec;
        let _ = writeln!(
            manifest,
            "layer{i:02} = conv{k}x{k} dilation {d} {ci}->{co}{bn}",
            k = s.kernel_size,
            d = s.dilation,
            ci = s.in_channels,
            co = s.out_channels,
            bn = if l.norm.is_some() {
                " batchnorm relu dropout"
            } else {
                ""
            }
        );
        uqt::write_f32(&dir.join(format!("layer{i:02}.weight.uqt")), &l.weight)?;
        uqt::write_f32(&dir.join(format!("layer{i:02}.bias.uqt")), &l.bias)?;
        if let Some(n) = &l.norm {
            uqt::write_f32(&dir.join(format!("layer{i:02}.gamma.uqt")), &n.gamma)?;
            uqt::write_f32(&dir.join(format!("layer{i:02}.beta.uqt")), &n.beta)?;
            uqt::write_f32(
                &dir.join(format!("layer{i:02}.running_mean.uqt")),
                &n.state.running_mean,
            )?;
            uqt::write_f32(&dir.join(format!("layer{i:02}.running_var.uqt")), &n.state.running_var)?;
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`]; returns the params and
/// the stored iteration.
pub fn load_checkpoint(dir: &Path) -> Result<(NetworkParams<f32>, usize)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv: BTreeMap<&str, &str> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("{}: missing key '{k}'", path.display())))
    };
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("{}: unknown checkpoint format", path.display())));
    }
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|e| Error::Format(format!("{}: key '{k}': {e}", path.display())))
    };
    let config = NetworkConfig {
        layer_kernels: parse_usize_list(get("kernels")?)?,
        layer_dilations: parse_usize_list(get("dilations")?)?,
        channels: num("channels")?,
        dropout_rate: get("dropout_rate")?
            .parse()
            .map_err(|e| Error::Format(format!("dropout_rate: {e}")))?,
        num_classes: NUM_CLASSES,
        num_phases: 2,
        declared_receptive_field: num("receptive_field")?,
    };
    let iteration = num("iteration")?;
    let mut params = build_network::<f32>(&config, &RngStream::new(0, 0))?;
    let load = |name: String, like: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = uqt::read_f32(&dir.join(&name))?;
        if t.dims() != like.dims() {
            return Err(Error::Format(format!(
                "{name}: dims {:?}, expected {:?}",
                t.dims(),
                like.dims()
            )));
        }
        Ok(t)
    };
    for (i, l) in params.layers.iter_mut().enumerate() {
        l.weight = load(format!("layer{i:02}.weight.uqt"), &l.weight)?;
        l.bias = load(format!("layer{i:02}.bias.uqt"), &l.bias)?;
        if let Some(n) = &mut l.norm {
            n.gamma = load(format!("layer{i:02}.gamma.uqt"), &n.gamma)?;
            n.beta = load(format!("layer{i:02}.beta.uqt"), &n.beta)?;
            n.state.running_mean = load(format!("layer{i:02}.running_mean.uqt"), &n.state.running_mean)?;
            n.state.running_var = load(format!("layer{i:02}.running_var.uqt"), &n.state.running_var)?;
        }
    }
    Ok((params, iteration))
}

/// Output channels expected from the final layer.
pub const OUTPUT_CHANNELS: usize = GROUPED_CHANNELS;
