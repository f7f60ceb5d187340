//! The context classifier in its two forms.
//!
//! The base variant ends in two dense layers and expects inputs of exactly
//! `input_side` pixels. The fully-convolutional variant replaces them by a
//! `flatten_side`² convolution and a 1×1 convolution, so it accepts any input
//! at least `input_side` wide and emits a 2-logit map with output stride 4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, conv2d_infer, conv_output_side, dense, dense_backward, dropout_mask,
    l1_distance, maxpool2d, maxpool2d_backward, relu, relu_backward, softmax,
    softmax_cross_entropy, ClassLabel, ConvCache, DropoutMask, Padding, Parameter, PoolCache, Real,
    Tensor,
};

/// Spatial stride between adjacent cells of the dense output map.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub channels: usize,
    pub conv_filters: [usize; 4],
    pub head_width: usize,
    pub block_dropout: f64,
    pub head_dropout: f64,
    pub scale_name: String,
}

impl NetworkConfig {
    /// The published 224-pixel geometry.
    pub fn canonical() -> Self {
        Self {
            input_side: 224,
            channels: 3,
            conv_filters: [32, 32, 64, 64],
            head_width: 256,
            block_dropout: 0.25,
            head_dropout: 0.5,
            scale_name: "canonical".into(),
        }
    }

    /// Small geometry used for training on a desktop CPU.
    pub fn desk() -> Self {
        Self {
            input_side: 64,
            channels: 1,
            conv_filters: [8, 8, 16, 16],
            head_width: 32,
            block_dropout: 0.25,
            head_dropout: 0.5,
            scale_name: "desk".into(),
        }
    }

    /// Side of the last pooled feature map, i.e. the spatial extent the
    /// first head layer consumes.
    pub fn flatten_side(&self) -> Result<usize> {
        self.feature_side(self.input_side)
    }

    fn feature_side(&self, side: usize) -> Result<usize> {
        let mut s = side;
        let steps = ["conv1", "conv2", "pool1", "conv3", "conv4", "pool2"];
        for name in steps {
            let next = if name.starts_with("pool") {
                if s >= 2 {
                    Some(s / 2)
                } else {
                    None
                }
            } else {
                conv_output_side(s, 3, Padding::Valid)
            };
            s = next.ok_or_else(|| Error::Geometry {
                layer: name.to_string(),
                detail: format!("cannot process a {s}-pixel input"),
            })?;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.head_width == 0 || self.conv_filters.contains(&0) {
            return Err(Error::Geometry {
                layer: "config".into(),
                detail: "channel, filter and head counts must be positive".into(),
            });
        }
        for rate in [self.block_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        self.flatten_side().map(|_| ())
    }

    /// Dense-map extent for an input side (fully-convolutional variant).
    pub fn map_side(&self, input_side: usize) -> Option<usize> {
        if input_side < self.input_side {
            return None;
        }
        let fs = self.flatten_side().ok()?;
        let feat = self.feature_side(input_side).ok()?;
        Some(feat - fs + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    FullyConvolutional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv { padding: Padding },
    Relu,
    MaxPool,
    Dropout { rate: f64 },
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Real = f32> {
    pub name: String,
    pub kind: LayerKind,
    /// Weight then bias for conv/dense layers; empty otherwise.
    pub params: Vec<Parameter<T>>,
}

impl<T: Real> Layer<T> {
    fn plain(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            params: Vec::new(),
        }
    }

    fn weighted<R: Rng>(name: &str, kind: LayerKind, weight_shape: &[usize], rng: &mut R) -> Self {
        let fan_in: usize = weight_shape[..weight_shape.len() - 1].iter().product();
        let out = *weight_shape.last().unwrap();
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(weight_shape.to_vec(), |_| {
            T::of(rng.random_range(-limit..limit))
        });
        Self {
            name: name.into(),
            kind,
            params: vec![Parameter::new(weight), Parameter::new(Tensor::zeros([out]))],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }
}

enum StepCache<T> {
    Conv(ConvCache<T>),
    Relu(Tensor<T>),
    Pool(PoolCache),
    Dropout(Option<DropoutMask<T>>),
    Dense(Tensor<T>),
}

/// Layer caches of one forward pass, consumed by `ContextNet::backward`.
pub struct Trace<T> {
    steps: Vec<StepCache<T>>,
}

/// Dropout masks for one training example. Both streams of a Siamese pair
/// are run with the same masks.
#[derive(Clone, Debug)]
pub struct DropoutMasks<T> {
    masks: Vec<Option<DropoutMask<T>>>,
}

#[derive(Clone, Copy)]
pub enum Pass<'a, T> {
    Eval,
    Train(&'a DropoutMasks<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextNet<T: Real = f32> {
    config: NetworkConfig,
    variant: Variant,
    layers: Vec<Layer<T>>,
}

impl<T: Real> ContextNet<T> {
    pub fn build(config: NetworkConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let fs = config.flatten_side()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [f1, f2, f3, f4] = config.conv_filters;
        let conv = LayerKind::Conv {
            padding: Padding::Valid,
        };
        let block = LayerKind::Dropout {
            rate: config.block_dropout,
        };
        let head_drop = LayerKind::Dropout {
            rate: config.head_dropout,
        };
        let mut layers = vec![
            Layer::weighted("conv1", conv, &[3, 3, config.channels, f1], &mut rng),
            Layer::plain("relu1", LayerKind::Relu),
            Layer::weighted("conv2", conv, &[3, 3, f1, f2], &mut rng),
            Layer::plain("relu2", LayerKind::Relu),
            Layer::plain("pool1", LayerKind::MaxPool),
            Layer::plain("drop1", block),
            Layer::weighted("conv3", conv, &[3, 3, f2, f3], &mut rng),
            Layer::plain("relu3", LayerKind::Relu),
            Layer::weighted("conv4", conv, &[3, 3, f3, f4], &mut rng),
            Layer::plain("relu4", LayerKind::Relu),
            Layer::plain("pool2", LayerKind::MaxPool),
            Layer::plain("drop2", block),
        ];
        let n = fs * fs * f4;
        match variant {
            Variant::Base => {
                layers.push(Layer::weighted(
                    "fc1",
                    LayerKind::Dense,
                    &[n, config.head_width],
                    &mut rng,
                ));
                layers.push(Layer::plain("relu5", LayerKind::Relu));
                layers.push(Layer::plain("drop3", head_drop));
                layers.push(Layer::weighted(
                    "fc2",
                    LayerKind::Dense,
                    &[config.head_width, 2],
                    &mut rng,
                ));
            }
            Variant::FullyConvolutional => {
                layers.push(Layer::weighted(
                    "fc1",
                    conv,
                    &[fs, fs, f4, config.head_width],
                    &mut rng,
                ));
                layers.push(Layer::plain("relu5", LayerKind::Relu));
                layers.push(Layer::plain("drop3", head_drop));
                layers.push(Layer::weighted(
                    "fc2",
                    conv,
                    &[1, 1, config.head_width, 2],
                    &mut rng,
                ));
            }
        }
        Ok(Self {
            config,
            variant,
            layers,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// (layer name, parameter count) for every layer, in order.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.param_count()))
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }

    /// Output shape of every layer for a given input shape.
    pub fn layer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match layer.kind {
                LayerKind::Conv { padding } => {
                    let k = layer.params[0].shape();
                    match (shape.as_slice(), k) {
                        ([h, w, c], [kh, kw, kc, f]) if c == kc => {
                            let oh = conv_output_side(*h, *kh, padding);
                            let ow = conv_output_side(*w, *kw, padding);
                            match (oh, ow) {
                                (Some(oh), Some(ow)) => vec![oh, ow, *f],
                                _ => return Err(layer_err(layer, &shape)),
                            }
                        }
                        _ => return Err(layer_err(layer, &shape)),
                    }
                }
                LayerKind::MaxPool => match shape.as_slice() {
                    [h, w, c] if *h >= 2 && *w >= 2 => vec![h / 2, w / 2, *c],
                    _ => return Err(layer_err(layer, &shape)),
                },
                LayerKind::Dense => {
                    let [n, m] = layer.params[0].shape() else {
                        unreachable!()
                    };
                    if shape.iter().product::<usize>() != *n {
                        return Err(layer_err(layer, &shape));
                    }
                    vec![*m]
                }
                LayerKind::Relu | LayerKind::Dropout { .. } => shape,
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn sample_dropout<R: Rng>(
        &self,
        input_shape: &[usize],
        rng: &mut R,
    ) -> Result<DropoutMasks<T>> {
        let shapes = self.layer_shapes(input_shape)?;
        let masks = self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, shape)| match layer.kind {
                LayerKind::Dropout { rate } if rate > 0.0 => {
                    dropout_mask(shape.iter().product(), rate, rng).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(DropoutMasks { masks })
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (h, w, c) = input.hwc()?;
        if c != self.config.channels {
            return Err(Error::shape(
                "network input",
                format!("{c} channels, network expects {}", self.config.channels),
            ));
        }
        let side = self.config.input_side;
        let ok = match self.variant {
            Variant::Base => h == side && w == side,
            Variant::FullyConvolutional => h >= side && w >= side,
        };
        if !ok {
            return Err(Error::shape(
                "network input",
                format!(
                    "{h}×{w} input for a {side}-pixel {:?} network",
                    self.variant
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass retaining the caches needed by `backward`.
    pub fn forward(&self, input: &Tensor<T>, pass: Pass<'_, T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(input)?;
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer.kind {
                LayerKind::Conv { padding } => {
                    let (y, cache) =
                        conv2d(&x, &layer.params[0].value, &layer.params[1].value, padding)?;
                    steps.push(StepCache::Conv(cache));
                    y
                }
                LayerKind::Relu => {
                    let y = relu(&x);
                    steps.push(StepCache::Relu(y.clone()));
                    y
                }
                LayerKind::MaxPool => {
                    let (y, cache) = maxpool2d(&x)?;
                    steps.push(StepCache::Pool(cache));
                    y
                }
                LayerKind::Dropout { .. } => {
                    let mask = match pass {
                        Pass::Eval => None,
                        Pass::Train(m) => m.masks.get(i).cloned().flatten(),
                    };
                    let y = match &mask {
                        Some(m) => m.apply(&x)?,
                        None => x,
                    };
                    steps.push(StepCache::Dropout(mask));
                    y
                }
                LayerKind::Dense => {
                    let y = dense(&x, &layer.params[0].value, &layer.params[1].value)?;
                    steps.push(StepCache::Dense(x));
                    y
                }
            };
        }
        Ok((x, Trace { steps }))
    }

    /// Evaluation-mode forward pass without caches.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer.kind {
                LayerKind::Conv { padding } => {
                    conv2d_infer(&x, &layer.params[0].value, &layer.params[1].value, padding)?
                }
                LayerKind::Relu => relu(&x),
                LayerKind::MaxPool => maxpool2d(&x)?.0,
                LayerKind::Dropout { .. } => x,
                LayerKind::Dense => dense(&x, &layer.params[0].value, &layer.params[1].value)?,
            };
        }
        Ok(x)
    }

    /// Positive-class probability of a single-window output.
    pub fn context_score(&self, input: &Tensor<T>) -> Result<f64> {
        let logits = self.infer(input)?;
        if logits.len() != 2 {
            return Err(Error::shape(
                "context_score",
                format!("output {:?} is not one window", logits.shape()),
            ));
        }
        Ok(softmax(logits.data())[0])
    }

    /// Back-propagates `dlogits` through a trace, accumulating parameter
    /// gradients. Traces from several forward passes may be replayed into
    /// the same parameters.
    pub fn backward(&mut self, trace: &Trace<T>, dlogits: &Tensor<T>) -> Result<()> {
        self.backward_to_input(trace, dlogits, false).map(|_| ())
    }

    /// Like `backward`, also returning the gradient with respect to the input.
    pub fn backward_to_input(
        &mut self,
        trace: &Trace<T>,
        dlogits: &Tensor<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if trace.steps.len() != self.layers.len() {
            return Err(Error::shape(
                "backward",
                "trace does not belong to this network",
            ));
        }
        let mut grad = dlogits.clone();
        for (i, (layer, step)) in self.layers.iter_mut().zip(&trace.steps).enumerate().rev() {
            let need_input = want_input || i > 0;
            grad = match (layer.kind, step) {
                (LayerKind::Conv { .. }, StepCache::Conv(cache)) => {
                    let (w, b) = layer.params.split_at_mut(1);
                    let (w, b) = (&mut w[0], &mut b[0]);
                    match conv2d_backward(
                        cache,
                        &w.value,
                        &grad,
                        w.grad.data_mut(),
                        b.grad.data_mut(),
                        need_input,
                    )? {
                        Some(g) => g,
                        None => return Ok(None),
                    }
                }
                (LayerKind::Relu, StepCache::Relu(out)) => relu_backward(out, &grad)?,
                (LayerKind::MaxPool, StepCache::Pool(cache)) => maxpool2d_backward(cache, &grad)?,
                (LayerKind::Dropout { .. }, StepCache::Dropout(mask)) => match mask {
                    Some(m) => m.apply(&grad)?,
                    None => grad,
                },
                (LayerKind::Dense, StepCache::Dense(input)) => {
                    let (w, b) = layer.params.split_at_mut(1);
                    let (w, b) = (&mut w[0], &mut b[0]);
                    match dense_backward(
                        input,
                        &w.value,
                        &grad,
                        w.grad.data_mut(),
                        b.grad.data_mut(),
                        need_input,
                    )? {
                        Some(g) => g,
                        None => return Ok(None),
                    }
                }
                _ => {
                    return Err(Error::shape(
                        "backward",
                        format!("cache mismatch at layer {}", layer.name),
                    ))
                }
            };
        }
        Ok(Some(grad))
    }

    /// Rewrites the dense head as convolutions over the same weights.
    pub fn convert_to_fully_convolutional(self) -> Result<Self> {
        if self.variant != Variant::Base {
            return Err(Error::InvalidArgument(
                "network is already fully convolutional".into(),
            ));
        }
        let fs = self.config.flatten_side()?;
        let f4 = self.config.conv_filters[3];
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut dense_seen = 0;
        for layer in self.layers {
            if layer.kind != LayerKind::Dense {
                layers.push(layer);
                continue;
            }
            let [n, m] = *layer.params[0].shape() else {
                unreachable!()
            };
            let kshape = if dense_seen == 0 {
                [fs, fs, f4, m]
            } else {
                [1, 1, n, m]
            };
            dense_seen += 1;
            let mut params = layer.params.into_iter();
            let weight = params.next().unwrap().reshaped(&kshape)?;
            let bias = params.next().unwrap();
            layers.push(Layer {
                name: layer.name,
                kind: LayerKind::Conv {
                    padding: Padding::Valid,
                },
                params: vec![weight, bias],
            });
        }
        Ok(Self {
            config: self.config,
            variant: Variant::FullyConvolutional,
            layers,
        })
    }
}

fn layer_err<T: Real>(layer: &Layer<T>, shape: &[usize]) -> Error {
    Error::Geometry {
        layer: layer.name.clone(),
        detail: format!("cannot accept input of shape {shape:?}"),
    }
}

/// Loss terms of one Siamese example.
#[derive(Clone, Debug)]
pub struct CombinedLoss<T> {
    pub total: f64,
    pub distance: f64,
    pub classification: f64,
    /// Gradient of `total` with respect to the masked-stream logits.
    pub grad_masked: Tensor<T>,
    /// Gradient of `total` with respect to the raw-stream logits.
    pub grad_raw: Tensor<T>,
}

/// `lambda·L1(masked, raw) + CE(masked, label)`; the classification term
/// only sees the masked stream.
pub fn combined_loss<T: Real>(
    logits_masked: &Tensor<T>,
    logits_raw: &Tensor<T>,
    label: ClassLabel,
    lambda: f64,
) -> Result<CombinedLoss<T>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} must be nonnegative"
        )));
    }
    if !logits_masked.is_finite() || !logits_raw.is_finite() {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    let (distance, dsign) = l1_distance(logits_masked, logits_raw)?;
    let (classification, dce) = softmax_cross_entropy(logits_masked, label)?;
    let lam = T::of(lambda);
    let mut grad_masked = dce.reshape(logits_masked.shape().to_vec())?;
    for (g, &s) in grad_masked.data_mut().iter_mut().zip(dsign.data()) {
        *g += lam * s;
    }
    let grad_raw = Tensor::from_fn(logits_raw.shape().to_vec(), |i| -lam * dsign.data()[i]);
    Ok(CombinedLoss {
        total: lambda * distance + classification,
        distance,
        classification,
        grad_masked,
        grad_raw,
    })
}

/// Outputs of both streams of a Siamese forward pass.
pub struct SiameseOutput<T> {
    pub logits_masked: Tensor<T>,
    pub logits_raw: Tensor<T>,
    pub trace_masked: Trace<T>,
    pub trace_raw: Trace<T>,
}

/// Runs the masked and raw crops through one parameter set with shared
/// dropout masks.
pub fn siamese_forward<T: Real>(
    net: &ContextNet<T>,
    masked: &Tensor<T>,
    raw: &Tensor<T>,
    pass: Pass<'_, T>,
) -> Result<SiameseOutput<T>> {
    if masked.shape() != raw.shape() {
        return Err(Error::shape(
            "siamese_forward",
            format!("masked {:?} vs raw {:?}", masked.shape(), raw.shape()),
        ));
    }
    let (logits_masked, trace_masked) = net.forward(masked, pass)?;
    let (logits_raw, trace_raw) = net.forward(raw, pass)?;
    Ok(SiameseOutput {
        logits_masked,
        logits_raw,
        trace_masked,
        trace_raw,
    })
}
