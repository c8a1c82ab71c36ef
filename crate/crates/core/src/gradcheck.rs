//! Central finite-difference checks of every hand-written gradient, run at
//! 64-bit precision.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dcnn::{backward, build_network, forward_batch, NetworkConfig, NetworkParams};
use crate::error::Result;
use crate::losses::{batch_loss, LossKind};
use crate::ops::{
    batch_norm, batch_norm_grad, conv2d_dilated, conv2d_dilated_grad, dropout, dropout_grad, relu, relu_grad,
    softmax_groups, softmax_groups_grad, BatchNormState, ConvSpec, Mode,
};
use crate::rng::RngStream;
use crate::tensor::{LabelMap, Tensor, NUM_CLASSES};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on absolute error: central
/// differences cannot resolve them (roundoff is about 1e-11 at `STEP`).
pub const GRAD_FLOOR: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Whole-network step: a channel-wide shift crosses fewer ReLU kinks.
pub const NETWORK_STEP: f64 = 1e-6;
/// Coordinates probed per tensor.
pub const PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn normal(rng: &RngStream, dims: &[usize], scale: f64) -> Tensor<f64> {
    let mut g = rng.rng();
    Tensor::from_fn(dims, |_| scale * Distribution::<f64>::sample(&StandardNormal, &mut g))
}

fn labels(rng: &RngStream, dims: &[usize]) -> LabelMap {
    let mut g = rng.rng();
    let n: usize = dims.iter().product();
    LabelMap::new(
        dims.to_vec(),
        (0..n).map(|_| g.random_range(0..NUM_CLASSES as u8)).collect(),
    )
    .expect("label dims")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` with central differences of `f` at up to [`PROBES`]
/// random coordinates of `x`.
fn probe(
    x: &Tensor<f64>,
    step: f64,
    analytic: &Tensor<f64>,
    rng: &RngStream,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut g = rng.rng();
    let count = PROBES.min(x.len());
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let i = g.random_range(0..x.len());
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok((worst, count))
}

fn record(out: &mut Vec<GradCheck>, name: String, tolerance: f64, (max_rel_error, probes): (f64, usize)) {
    out.push(GradCheck {
        name,
        max_rel_error,
        tolerance,
        probes,
    });
}

/// Layer checks for conv, batch norm, ReLU, dropout, grouped softmax and the
/// three losses.
pub fn check_layers(seed: u64) -> Result<Vec<GradCheck>> {
    let root = RngStream::new(seed, 0x6772);
    let mut out = Vec::new();
    let tol = LAYER_TOLERANCE;

    for (k, d) in [(3, 1), (3, 2), (1, 1)] {
        let spec = ConvSpec::new(k, d, 3, 2)?;
        let s = root.derive_path(&[1, k as u64, d as u64]);
        let x = normal(&s.derive(0), &[2, 3, 9, 9], 1.0);
        let w = normal(&s.derive(1), &spec.weight_dims(), 0.5);
        let b = normal(&s.derive(2), &[2], 0.5);
        let y = conv2d_dilated(&x, &w, &b, &spec)?;
        let r = normal(&s.derive(3), y.dims(), 1.0);
        let g = conv2d_dilated_grad(&r, &x, &w, &spec)?;
        let name = format!("conv{k}x{k}_d{d}");
        record(
            &mut out,
            format!("{name}/input"),
            tol,
            probe(&x, STEP, &g.grad_input, &s.derive(4), |v| {
                Ok(dot(&conv2d_dilated(v, &w, &b, &spec)?, &r))
            })?,
        );
        record(
            &mut out,
            format!("{name}/weight"),
            tol,
            probe(&w, STEP, &g.grad_weights, &s.derive(5), |v| {
                Ok(dot(&conv2d_dilated(&x, v, &b, &spec)?, &r))
            })?,
        );
        record(
            &mut out,
            format!("{name}/bias"),
            tol,
            probe(&b, STEP, &g.grad_bias, &s.derive(6), |v| {
                Ok(dot(&conv2d_dilated(&x, &w, v, &spec)?, &r))
            })?,
        );
    }

    for mode in [Mode::Train, Mode::Eval] {
        let s = root.derive_path(&[2, mode as u64]);
        let x = normal(&s.derive(0), &[2, 3, 4, 4], 2.0);
        let gamma = normal(&s.derive(1), &[3], 1.0);
        let beta = normal(&s.derive(2), &[3], 1.0);
        let mut state = BatchNormState::<f64>::new(3);
        state.running_mean = normal(&s.derive(3), &[3], 0.5);
        state.running_var = normal(&s.derive(4), &[3], 0.5).map(|v| 0.5 + v.abs());
        let r = normal(&s.derive(5), x.dims(), 1.0);
        let g = batch_norm_grad(&r, &x, &gamma, &state, mode)?;
        let f = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| -> Result<f64> {
            Ok(dot(&batch_norm(x, gm, bt, &state, mode)?.0, &r))
        };
        let name = format!("batchnorm_{mode:?}").to_lowercase();
        record(
            &mut out,
            format!("{name}/input"),
            tol,
            probe(&x, STEP, &g.grad_input, &s.derive(6), |v| f(v, &gamma, &beta))?,
        );
        record(
            &mut out,
            format!("{name}/gamma"),
            tol,
            probe(&gamma, STEP, &g.grad_gamma, &s.derive(7), |v| f(&x, v, &beta))?,
        );
        record(
            &mut out,
            format!("{name}/beta"),
            tol,
            probe(&beta, STEP, &g.grad_beta, &s.derive(8), |v| f(&x, &gamma, v))?,
        );
    }

    {
        let s = root.derive(3);
        // keep inputs away from the kink
        let x = normal(&s.derive(0), &[40], 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let r = normal(&s.derive(1), &[40], 1.0);
        let g = relu_grad(&r, &x)?;
        record(
            &mut out,
            "relu".into(),
            tol,
            probe(&x, STEP, &g, &s.derive(2), |v| Ok(dot(&relu(v), &r)))?,
        );

        let stream = s.derive(3);
        let (_, mask) = dropout(&x, 0.3, Mode::Train, &stream)?;
        let g = dropout_grad(&r, &mask)?;
        record(
            &mut out,
            "dropout".into(),
            tol,
            probe(&x, STEP, &g, &s.derive(4), |v| {
                Ok(dot(&dropout(v, 0.3, Mode::Train, &stream)?.0, &r))
            })?,
        );
    }

    {
        let s = root.derive(4);
        let z = normal(&s.derive(0), &[2, 8, 3, 3], 2.0);
        let r = normal(&s.derive(1), z.dims(), 1.0);
        let p = softmax_groups(&z)?;
        let g = softmax_groups_grad(&p, &r)?;
        record(
            &mut out,
            "softmax_groups".into(),
            tol,
            probe(&z, STEP, &g, &s.derive(2), |v| Ok(dot(&softmax_groups(v)?, &r)))?,
        );

        let ed = labels(&s.derive(3), &[2, 3, 3]);
        let es = labels(&s.derive(4), &[2, 3, 3]);
        for kind in LossKind::ALL {
            let (_, gp) = batch_loss(kind, &p, &ed, &es)?;
            let gz = softmax_groups_grad(&p, &gp)?;
            let res = probe(&z, STEP, &gz, &s.derive(5 + kind as u64), |v| {
                Ok(batch_loss(kind, &softmax_groups(v)?, &ed, &es)?.0)
            })?;
            record(&mut out, format!("loss_{}", kind.tag()), tol, res);
        }
    }
    Ok(out)
}

/// Plan with a 17×17 receptive field and 4 channels, small enough for
/// exhaustive finite differences.
pub fn small_network_config() -> NetworkConfig {
    NetworkConfig {
        layer_kernels: vec![3, 3, 3, 3, 3, 3, 3, 3, 1, 1],
        layer_dilations: vec![1; 10],
        channels: 4,
        declared_receptive_field: 17,
        ..NetworkConfig::default()
    }
}

/// Loss of the full network (train mode, fixed dropout stream).
pub fn network_loss(
    params: &NetworkParams<f64>,
    input: &Tensor<f64>,
    ed: &LabelMap,
    es: &LabelMap,
    kind: LossKind,
    rng: &RngStream,
) -> Result<f64> {
    let pass = forward_batch(params, input, Mode::Train, rng)?;
    Ok(batch_loss(kind, &softmax_groups(&pass.logits)?, ed, es)?.0)
}

/// End-to-end check over every trainable tensor of `config`.
pub fn check_network(seed: u64, config: &NetworkConfig, input_size: usize) -> Result<Vec<GradCheck>> {
    let root = RngStream::new(seed, 0x6e6574);
    let params = build_network::<f64>(config, &root.derive(0))?;
    let out_size = input_size + 1 - config.declared_receptive_field;
    let input = normal(&root.derive(1), &[1, 2, input_size, input_size], 1.0);
    let ed = labels(&root.derive(2), &[1, out_size, out_size]);
    let es = labels(&root.derive(3), &[1, out_size, out_size]);
    let drop = root.derive(4);
    let kind = LossKind::CrossEntropy;
    let pass = forward_batch(&params, &input, Mode::Train, &drop)?;
    let probs = softmax_groups(&pass.logits)?;
    let (_, gp) = batch_loss(kind, &probs, &ed, &es)?;
    let grads = backward(
        &params,
        pass.cache.as_ref().expect("cache"),
        &softmax_groups_grad(&probs, &gp)?,
    )?;
    let mut out = Vec::new();
    let count = params.trainable().len();
    for t in 0..count {
        let base = params.trainable()[t].clone();
        let res = probe(&base, NETWORK_STEP, &grads[t], &root.derive_path(&[5, t as u64]), |v| {
            let mut p = params.clone();
            *p.trainable_mut()[t] = v.clone();
            network_loss(&p, &input, &ed, &es, kind, &drop)
        })?;
        let (layer, slot) = (t / 4, ["weight", "bias", "gamma", "beta"][t % 4]);
        record(
            &mut out,
            format!("network/layer{layer:02}.{slot}"),
            NETWORK_TOLERANCE,
            res,
        );
    }
    Ok(out)
}
