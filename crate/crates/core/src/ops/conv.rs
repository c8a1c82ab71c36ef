//! Valid (unpadded) dilated 2D convolution, lowered to GEMM via im2col.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel_size}")));
        }
        if dilation == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("dilation and channel counts must be positive"));
        }
        Ok(Self {
            kernel_size,
            dilation,
            in_channels,
            out_channels,
        })
    }

    /// Input window covered by one output voxel along each axis.
    pub fn extent(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let e = self.extent();
        if e > h || e > w {
            return Err(Error::shape(format!("kernel extent {e} exceeds input {h}x{w}")));
        }
        Ok((h - e + 1, w - e + 1))
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }
}

/// Gradients of a valid dilated convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn im2col<T: Real>(input: &[T], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
    let k = spec.kernel_size;
    let d = spec.dilation;
    let n = oh * ow;
    for c in 0..spec.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for y in 0..oh {
                    let src = (y + ky * d) * w + kx * d;
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&plane[src..src + ow]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize, grad_in: &mut [T]) {
    let k = spec.kernel_size;
    let d = spec.dilation;
    let n = oh * ow;
    for c in 0..spec.in_channels {
        let plane = &mut grad_in[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for y in 0..oh {
                    let dst = (y + ky * d) * w + kx * d;
                    for (g, &v) in plane[dst..dst + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *g += v;
                    }
                }
            }
        }
    }
}

/// Single-image forward on raw slices: `input` is `[C_in,H,W]`, `out` is `[C_out,H',W']`.
pub(crate) fn forward_image<T: Real>(
    input: &[T],
    weights: &[T],
    bias: &[T],
    spec: &ConvSpec,
    h: usize,
    w: usize,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let (oh, ow) = spec.output_size(h, w).expect("caller validated shape");
    let n = oh * ow;
    let taps = spec.taps();
    for (c, &b) in bias.iter().enumerate() {
        out[c * n..(c + 1) * n].fill(b);
    }
    let col: &[T] = if spec.kernel_size == 1 {
        input
    } else {
        scratch.resize(taps * n, T::zero());
        im2col(input, spec, h, w, oh, ow, scratch);
        scratch
    };
    T::gemm(
        spec.out_channels,
        taps,
        n,
        T::one(),
        weights,
        (taps, 1),
        col,
        (n, 1),
        T::one(),
        out,
        (n, 1),
    );
}

/// Single-image backward; accumulates into `grad_w`/`grad_b` and, if given,
/// overwrites `grad_in`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_image<T: Real>(
    grad_out: &[T],
    input: &[T],
    weights: &[T],
    spec: &ConvSpec,
    h: usize,
    w: usize,
    grad_in: Option<&mut [T]>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    scratch: &mut Vec<T>,
) {
    let (oh, ow) = spec.output_size(h, w).expect("caller validated shape");
    let n = oh * ow;
    let taps = spec.taps();
    for (c, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[c * n..(c + 1) * n].iter().copied().sum::<T>();
    }
    if spec.kernel_size == 1 {
        // grad_w[Co,Ci] += grad_out[Co,N] · input[Ci,N]^T
        T::gemm(
            spec.out_channels,
            n,
            taps,
            T::one(),
            grad_out,
            (n, 1),
            input,
            (1, n),
            T::one(),
            grad_w,
            (taps, 1),
        );
        if let Some(gi) = grad_in {
            T::gemm(
                taps,
                spec.out_channels,
                n,
                T::one(),
                weights,
                (1, taps),
                grad_out,
                (n, 1),
                T::zero(),
                gi,
                (n, 1),
            );
        }
        return;
    }
    scratch.resize(taps * n, T::zero());
    im2col(input, spec, h, w, oh, ow, scratch);
    T::gemm(
        spec.out_channels,
        n,
        taps,
        T::one(),
        grad_out,
        (n, 1),
        scratch,
        (1, n),
        T::one(),
        grad_w,
        (taps, 1),
    );
    if let Some(gi) = grad_in {
        T::gemm(
            taps,
            spec.out_channels,
            n,
            T::one(),
            weights,
            (1, taps),
            grad_out,
            (n, 1),
            T::zero(),
            scratch,
            (n, 1),
        );
        gi.fill(T::zero());
        col2im_add(scratch, spec, h, w, oh, ow, gi);
    }
}

fn split_input_dims(dims: &[usize], spec: &ConvSpec) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = match *dims {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "conv input must be [C,H,W] or [N,C,H,W], got {dims:?}"
            )))
        }
    };
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    Ok((n, h, w))
}

fn check_params<T: Real>(weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<()> {
    if weights.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "weights {:?} do not match spec {:?}",
            weights.dims(),
            spec.weight_dims()
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [spec.out_channels] {
            return Err(Error::shape(format!(
                "bias {:?} vs {} out channels",
                b.dims(),
                spec.out_channels
            )));
        }
    }
    Ok(())
}

/// Valid dilated convolution of `[C_in,H,W]` (or a batch `[N,C_in,H,W]`).
/// Output spatial size is `H − (k−1)·dilation`.
pub fn conv2d_dilated<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_params(weights, Some(bias), spec)?;
    let (n, h, w) = split_input_dims(input.dims(), spec)?;
    let (oh, ow) = spec.output_size(h, w)?;
    let in_len = spec.in_channels * h * w;
    let out_len = spec.out_channels * oh * ow;
    let mut out = vec![T::zero(); n * out_len];
    let mut scratch = Vec::new();
    for i in 0..n {
        forward_image(
            &input.data()[i * in_len..(i + 1) * in_len],
            weights.data(),
            bias.data(),
            spec,
            h,
            w,
            &mut out[i * out_len..(i + 1) * out_len],
            &mut scratch,
        );
    }
    let dims = if input.ndim() == 3 {
        vec![spec.out_channels, oh, ow]
    } else {
        vec![n, spec.out_channels, oh, ow]
    };
    Tensor::new(dims, out)
}

pub fn conv2d_dilated_grad<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    check_params(weights, None, spec)?;
    let (n, h, w) = split_input_dims(input.dims(), spec)?;
    let (oh, ow) = spec.output_size(h, w)?;
    let expected: Vec<usize> = if input.ndim() == 3 {
        vec![spec.out_channels, oh, ow]
    } else {
        vec![n, spec.out_channels, oh, ow]
    };
    if grad_out.dims() != expected.as_slice() {
        return Err(Error::shape(format!(
            "grad_out {:?}, expected {expected:?}",
            grad_out.dims()
        )));
    }
    let in_len = spec.in_channels * h * w;
    let out_len = spec.out_channels * oh * ow;
    let mut gi = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); spec.out_channels];
    let mut scratch = Vec::new();
    for i in 0..n {
        backward_image(
            &grad_out.data()[i * out_len..(i + 1) * out_len],
            &input.data()[i * in_len..(i + 1) * in_len],
            weights.data(),
            spec,
            h,
            w,
            Some(&mut gi[i * in_len..(i + 1) * in_len]),
            &mut gw,
            &mut gb,
            &mut scratch,
        );
    }
    Ok(ConvGrads {
        grad_input: Tensor::new(input.dims().to_vec(), gi)?,
        grad_weights: Tensor::new(weights.dims().to_vec(), gw)?,
        grad_bias: Tensor::new(vec![spec.out_channels], gb)?,
    })
}
