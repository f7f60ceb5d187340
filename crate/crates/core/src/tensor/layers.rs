use rand::Rng;

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Output extent of a stride-1 convolution along one axis.
pub fn conv_output_side(input: usize, kernel: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid if kernel <= input && kernel > 0 => Some(input - kernel + 1),
        Padding::Same if kernel > 0 => Some(input),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    f: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], bias: &[usize], padding: Padding) -> Result<Self> {
        let (h, w, c) = match *input {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be H×W×C, got {input:?}"),
                ))
            }
        };
        let (kh, kw, kc, f) = match *kernel {
            [kh, kw, kc, f] => (kh, kw, kc, f),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be kh×kw×C×F, got {kernel:?}"),
                ))
            }
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if bias != [f] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bias:?} does not match {f} filters"),
            ));
        }
        let (oh, ow) = match (
            conv_output_side(h, kh, padding),
            conv_output_side(w, kw, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}×{kw} does not fit input {h}×{w} with {padding:?} padding"),
                ))
            }
        };
        let (pad_top, pad_left) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        };
        Ok(Self {
            h,
            w,
            c,
            kh,
            kw,
            f,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds input patches into a (positions × kh·kw·C) matrix.
fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    im2col_rows(input, g, 0..g.oh)
}

/// `im2col` restricted to a band of output rows.
fn im2col_rows<T: Real>(input: &[T], g: &ConvGeom, rows: std::ops::Range<usize>) -> Vec<T> {
    let k = g.patch_len();
    let span = g.kw * g.c;
    let first = rows.start;
    let mut cols = vec![T::zero(); rows.len() * g.ow * k];
    for oy in rows {
        for ox in 0..g.ow {
            let row = &mut cols[((oy - first) * g.ow + ox) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let dst = &mut row[ky * span..][..span];
                let ix0 = ox as isize - g.pad_left as isize;
                if ix0 >= 0 && ix0 as usize + g.kw <= g.w {
                    let src = (iy as usize * g.w + ix0 as usize) * g.c;
                    dst.copy_from_slice(&input[src..src + span]);
                } else {
                    for kx in 0..g.kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let src = (iy as usize * g.w + ix as usize) * g.c;
                            dst[kx * g.c..][..g.c].copy_from_slice(&input[src..src + g.c]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds patch rows back into an input image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.h * g.w * g.c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = ox as isize + kx as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let src = &row[(ky * g.kw + kx) * g.c..][..g.c];
                    for (d, &s) in out[dst..dst + g.c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// State retained by `conv2d` for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    geom: ConvGeom,
    cols: Vec<T>,
}

/// `out = bias + cols · kernel` for `out.len() / f` positions.
fn gemm_biased<T: Real>(
    cols: &[T],
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
    out: &mut [T],
) {
    for px in out.chunks_exact_mut(g.f) {
        px.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::row_major(cols, out.len() / g.f, g.patch_len()),
        MatRef::row_major(kernel.data(), g.patch_len(), g.f),
        T::one(),
        out,
    );
}

fn conv_forward_cols<T: Real>(
    cols: &[T],
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let mut out = vec![T::zero(); g.positions() * g.f];
    gemm_biased(cols, kernel, bias, g, &mut out);
    Tensor::new([g.oh, g.ow, g.f], out).expect("conv output shape")
}

/// Upper bound on the unfolded-patch buffer of an inference convolution, in
/// elements. Large kernels over large inputs are unfolded a band of output
/// rows at a time.
const INFER_COLS_BUDGET: usize = 1 << 24;

/// 2-D convolution, stride 1. Input is H×W×C, kernel kh×kw×C×F.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.shape(), padding)?;
    let cols = im2col(input.data(), &g);
    let out = conv_forward_cols(&cols, kernel, bias, &g);
    Ok((out, ConvCache { geom: g, cols }))
}

/// Forward pass without retaining the unfolded input.
pub fn conv2d_infer<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    conv2d_banded(input, kernel, bias, padding, INFER_COLS_BUDGET)
}

fn conv2d_banded<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    budget: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.shape(), padding)?;
    let band = (budget / (g.ow * g.patch_len()).max(1)).clamp(1, g.oh);
    let mut out = vec![T::zero(); g.positions() * g.f];
    for (i, chunk) in out.chunks_mut(band * g.ow * g.f).enumerate() {
        let rows = i * band..(i * band + band).min(g.oh);
        let cols = im2col_rows(input.data(), &g, rows);
        gemm_biased(&cols, kernel, bias, &g, chunk);
    }
    Ok(Tensor::new([g.oh, g.ow, g.f], out).expect("conv output shape"))
}

/// Accumulates kernel and bias gradients and returns the input gradient
/// when `want_input` is set.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
    kernel_grad: &mut [T],
    bias_grad: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let g = cache.geom;
    if dout.shape() != [g.oh, g.ow, g.f] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} vs output {:?}",
                dout.shape(),
                [g.oh, g.ow, g.f]
            ),
        ));
    }
    let (p, k) = (g.positions(), g.patch_len());
    let cols = MatRef::row_major(&cache.cols[..], p, k);
    let dmat = MatRef::row_major(dout.data(), p, g.f);
    gemm(cols.t(), dmat, T::one(), kernel_grad);

    let mut sums = vec![0.0f64; g.f];
    for row in dout.data().chunks_exact(g.f) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    for (b, s) in bias_grad.iter_mut().zip(sums) {
        *b += T::of(s);
    }

    if !want_input {
        return Ok(None);
    }
    let mut dcols = vec![T::zero(); p * k];
    gemm(
        dmat,
        MatRef::row_major(kernel.data(), k, g.f).t(),
        T::zero(),
        &mut dcols,
    );
    let din = col2im(&dcols, &g);
    Ok(Some(Tensor::new([g.h, g.w, g.c], din)?))
}

/// Argmax bookkeeping of a 2×2 max pool.
#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: [usize; 3],
    argmax: Vec<u32>,
}

/// 2×2 max pooling, stride 2. Odd trailing rows/columns are dropped.
/// Ties resolve to the first element in row-major block order.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (h, w, c) = input.hwc()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "maxpool2d",
            format!("input {h}×{w} smaller than 2×2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok((
        Tensor::new([oh, ow, c], out)?,
        PoolCache {
            input_shape: [h, w, c],
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Real>(cache: &PoolCache, dout: &Tensor<T>) -> Result<Tensor<T>> {
    if dout.len() != cache.argmax.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!(
                "upstream gradient has {} elements, expected {}",
                dout.len(),
                cache.argmax.len()
            ),
        ));
    }
    let mut din = Tensor::zeros(cache.input_shape);
    let d = din.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(dout.data()) {
        d[idx as usize] += g;
    }
    Ok(din)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    out
}

/// Gradient of ReLU given its forward output; zero at the kink.
pub fn relu_backward<T: Real>(output: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != dout.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", output.shape(), dout.shape()),
        ));
    }
    let mut din = dout.clone();
    for (d, &y) in din.data_mut().iter_mut().zip(output.data()) {
        if !(y > T::zero()) {
            *d = T::zero();
        }
    }
    Ok(din)
}

/// Fully connected layer: `input · weight + bias` over the flattened input.
pub fn dense<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, m) = dense_dims(input, weight, bias)?;
    let mut out = bias.data().to_vec();
    gemm(
        MatRef::row_major(input.data(), 1, n),
        MatRef::row_major(weight.data(), n, m),
        T::one(),
        &mut out,
    );
    Tensor::new([m], out)
}

fn dense_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    let (n, m) = match *weight.shape() {
        [n, m] => (n, m),
        _ => {
            return Err(Error::shape(
                "dense",
                format!("weight must be N×M, got {:?}", weight.shape()),
            ))
        }
    };
    if input.len() != n {
        return Err(Error::shape(
            "dense",
            format!("input has {} elements, weight expects {n}", input.len()),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(
            "dense",
            format!("bias {:?} does not match {m} outputs", bias.shape()),
        ));
    }
    Ok((n, m))
}

/// Accumulates weight/bias gradients; returns the input gradient (shaped
/// like `input`) when requested.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (n, m) = match *weight.shape() {
        [n, m] => (n, m),
        _ => return Err(Error::shape("dense_backward", "weight must be N×M")),
    };
    if dout.len() != m || input.len() != n {
        return Err(Error::shape(
            "dense_backward",
            format!(
                "input {} / upstream {} vs weight {n}×{m}",
                input.len(),
                dout.len()
            ),
        ));
    }
    gemm(
        MatRef::row_major(input.data(), 1, n).t(),
        MatRef::row_major(dout.data(), 1, m),
        T::one(),
        weight_grad,
    );
    for (b, &g) in bias_grad.iter_mut().zip(dout.data()) {
        *b += g;
    }
    if !want_input {
        return Ok(None);
    }
    let mut din = vec![T::zero(); n];
    gemm(
        MatRef::row_major(weight.data(), n, m),
        MatRef::row_major(dout.data(), m, 1),
        T::zero(),
        &mut din,
    );
    Ok(Some(Tensor::new(input.shape().to_vec(), din)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Per-element keep multipliers: 0 for dropped elements, 1/(1-rate) for
/// survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T> {
    scale: Vec<T>,
}

impl<T: Real> DropoutMask<T> {
    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.len() != self.scale.len() {
            return Err(Error::shape(
                "dropout",
                format!(
                    "mask of {} elements applied to {}",
                    self.scale.len(),
                    input.len()
                ),
            ));
        }
        let mut out = input.clone();
        for (v, &s) in out.data_mut().iter_mut().zip(&self.scale) {
            *v = *v * s;
        }
        Ok(out)
    }

    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.scale.iter().filter(|&&s| s == T::zero()).count();
        zeros as f64 / self.scale.len().max(1) as f64
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

pub fn dropout_mask<T: Real, R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    rng: &mut R,
) -> Result<DropoutMask<T>> {
    check_rate(rate)?;
    let keep = T::of(1.0 / (1.0 - rate));
    let scale = (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Ok(DropoutMask { scale })
}

/// Inverted dropout. Eval mode and rate 0 are the identity and return no mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    check_rate(rate)?;
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mask = dropout_mask(input.len(), rate, rng)?;
    let out = mask.apply(input)?;
    Ok((out, Some(mask)))
}
