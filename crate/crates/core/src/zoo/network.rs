//! Network descriptors, parameters and the forward/backward passes.
//!
//! Tensors are carried as one matrix row per example. Image tensors are laid
//! out row-major as (channel, height, width), so `flatten` never moves data.

use std::fmt;

use crate::error::{Error, Result};
use crate::matcore::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl TensorShape {
    pub fn len(&self) -> usize {
        match *self {
            TensorShape::Flat(n) => n,
            TensorShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TensorShape::Flat(n) => write!(f, "{n}"),
            TensorShape::Image {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

impl std::str::FromStr for TensorShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let nums = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad tensor shape '{s}'")))?;
        match nums.as_slice() {
            [n] if *n > 0 => Ok(TensorShape::Flat(*n)),
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(TensorShape::Image {
                channels: *c,
                height: *h,
                width: *w,
            }),
            _ => Err(Error::Config(format!("bad tensor shape '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride-1 "valid" convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_height: usize,
        in_width: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    fn to_text(self) -> String {
        match self {
            LayerSpec::Dense { inputs, outputs } => format!("dense {inputs} {outputs}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                in_height,
                in_width,
            } => format!("conv2d {in_channels} {out_channels} {kernel} {in_height} {in_width}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }

    fn from_text(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        let kind = it.next().unwrap_or_default();
        let nums = it
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad layer '{s}'")))?;
        match (kind, nums.as_slice()) {
            ("dense", [i, o]) => Ok(LayerSpec::Dense {
                inputs: *i,
                outputs: *o,
            }),
            ("conv2d", [ci, co, k, h, w]) => Ok(LayerSpec::Conv2d {
                in_channels: *ci,
                out_channels: *co,
                kernel: *k,
                in_height: *h,
                in_width: *w,
            }),
            ("relu", []) => Ok(LayerSpec::Relu),
            ("flatten", []) => Ok(LayerSpec::Flatten),
            _ => Err(Error::Config(format!("bad layer '{s}'"))),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        match (*self, input) {
            (LayerSpec::Dense { inputs, outputs }, TensorShape::Flat(n)) if n == inputs && outputs > 0 => {
                Ok(TensorShape::Flat(outputs))
            }
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    in_height,
                    in_width,
                },
                TensorShape::Image {
                    channels,
                    height,
                    width,
                },
            ) if channels == in_channels
                && height == in_height
                && width == in_width
                && kernel >= 1
                && kernel <= height
                && kernel <= width
                && out_channels > 0 =>
            {
                Ok(TensorShape::Image {
                    channels: out_channels,
                    height: height - kernel + 1,
                    width: width - kernel + 1,
                })
            }
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Flatten, s) => Ok(TensorShape::Flat(s.len())),
            (layer, s) => Err(Error::Shape(format!(
                "layer '{}' cannot consume input of shape {s}",
                layer.to_text()
            ))),
        }
    }
}

/// Architecture plus initialization seed of one network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkDescriptor {
    id: String,
    input: TensorShape,
    classes: usize,
    layers: Vec<LayerSpec>,
    init_seed: u64,
}

impl NetworkDescriptor {
    pub fn new(
        id: impl Into<String>,
        input: TensorShape,
        classes: usize,
        layers: Vec<LayerSpec>,
        init_seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(Error::Config(format!("invalid model id '{id}'")));
        }
        if classes < 2 {
            return Err(Error::Config(format!("{id}: class count must be >= 2")));
        }
        if !layers.contains(&LayerSpec::Relu) {
            return Err(Error::Config(format!("{id}: needs at least one nonlinear layer")));
        }
        let mut shape = input;
        for layer in &layers {
            shape = layer.output_shape(shape)?;
        }
        match layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) if *outputs == classes => {}
            _ => {
                return Err(Error::Shape(format!(
                    "{id}: final layer must be dense with {classes} outputs"
                )))
            }
        }
        Ok(Self {
            id,
            input,
            classes,
            layers,
            init_seed,
        })
    }

    /// Multilayer perceptron: dense+relu per hidden width, then a dense head.
    pub fn mlp(id: impl Into<String>, inputs: usize, hidden: &[usize], classes: usize, init_seed: u64) -> Result<Self> {
        Self::cnn(id, TensorShape::Flat(inputs), &[], hidden, classes, init_seed)
    }

    /// Convolutional stack `(out_channels, kernel)` with relu after each,
    /// flatten, then the MLP part.
    pub fn cnn(
        id: impl Into<String>,
        input: TensorShape,
        convs: &[(usize, usize)],
        hidden: &[usize],
        classes: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut shape = input;
        for &(out_channels, kernel) in convs {
            let TensorShape::Image {
                channels,
                height,
                width,
            } = shape
            else {
                return Err(Error::Shape("convolution needs an image input".into()));
            };
            let conv = LayerSpec::Conv2d {
                in_channels: channels,
                out_channels,
                kernel,
                in_height: height,
                in_width: width,
            };
            shape = conv.output_shape(shape)?;
            layers.push(conv);
            layers.push(LayerSpec::Relu);
        }
        if matches!(shape, TensorShape::Image { .. }) {
            layers.push(LayerSpec::Flatten);
        }
        let mut width = shape.len();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: classes,
        });
        Self::new(id, input, classes, layers, init_seed)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Same architecture under a different id and seed.
    pub fn renamed(&self, id: impl Into<String>, init_seed: u64) -> Result<Self> {
        Self::new(id, self.input, self.classes, self.layers.clone(), init_seed)
    }

    /// Positions of layers whose outputs are captured: every relu, plus the
    /// final logits.
    pub fn capturable_layers(&self) -> Vec<usize> {
        let last = self.layers.len() - 1;
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| **l == LayerSpec::Relu || *i == last)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "id={}\ninput={}\nclasses={}\ninit_seed={}\n",
            self.id, self.input, self.classes, self.init_seed
        );
        for l in &self.layers {
            s.push_str("layer=");
            s.push_str(&l.to_text());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut id = None;
        let mut input = None;
        let mut classes = None;
        let mut seed = None;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad descriptor line '{line}'")))?;
            let bad = || Error::Config(format!("bad descriptor value '{line}'"));
            match k {
                "id" => id = Some(v.to_string()),
                "input" => input = Some(v.parse::<TensorShape>()?),
                "classes" => classes = Some(v.parse::<usize>().map_err(|_| bad())?),
                "init_seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                "layer" => layers.push(LayerSpec::from_text(v)?),
                _ => {}
            }
        }
        let missing = |what: &str| Error::Config(format!("descriptor missing '{what}'"));
        Self::new(
            id.ok_or_else(|| missing("id"))?,
            input.ok_or_else(|| missing("input"))?,
            classes.ok_or_else(|| missing("classes"))?,
            layers,
            seed.ok_or_else(|| missing("init_seed"))?,
        )
    }
}

/// Weights and bias of one parameterized layer. Dense weights are
/// `outputs x inputs`; conv weights are `out_channels x (in_channels*k*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.data().iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// He-normal weights and zero biases from the descriptor's seed, rounded to
/// `f32` so that saved models reload bit-exactly.
pub fn initialize(descriptor: &NetworkDescriptor) -> Vec<Option<LayerParams>> {
    let mut rng = RngStream::new(descriptor.init_seed);
    descriptor
        .layers
        .iter()
        .map(|layer| {
            let (rows, cols) = match *layer {
                LayerSpec::Dense { inputs, outputs } => (outputs, inputs),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (out_channels, in_channels * kernel * kernel),
                _ => return None,
            };
            let std = (2.0 / cols as f64).sqrt();
            let weight = rng.normal_matrix(rows, cols).scale(std).quantized();
            Some(LayerParams {
                weight,
                bias: vec![0.0; rows],
            })
        })
        .collect()
}

pub(crate) fn check_params(descriptor: &NetworkDescriptor, params: &[Option<LayerParams>]) -> Result<()> {
    if params.len() != descriptor.layers.len() {
        return Err(Error::Shape(format!(
            "{} parameter slots for {} layers",
            params.len(),
            descriptor.layers.len()
        )));
    }
    for (i, (layer, p)) in descriptor.layers.iter().zip(params).enumerate() {
        let expected = match *layer {
            LayerSpec::Dense { inputs, outputs } => Some((outputs, inputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((out_channels, in_channels * kernel * kernel)),
            _ => None,
        };
        match (expected, p) {
            (None, None) => {}
            (Some(shape), Some(p)) if p.weight.shape() == shape && p.bias.len() == shape.0 => {
                if !p.is_finite() {
                    return Err(Error::Numerical(format!("layer {i} has non-finite parameters")));
                }
            }
            _ => return Err(Error::Shape(format!("parameters of layer {i} do not match its spec"))),
        }
    }
    Ok(())
}

/// Inputs seen by every layer during one forward pass, kept for backprop.
pub(crate) struct ForwardCache {
    /// `inputs[i]` is the input to layer `i`; the last entry is the logits.
    pub(crate) inputs: Vec<Matrix>,
}

impl ForwardCache {
    pub(crate) fn logits(&self) -> &Matrix {
        self.inputs.last().expect("cache holds the output")
    }
}

pub(crate) fn forward_cached(
    descriptor: &NetworkDescriptor,
    params: &[Option<LayerParams>],
    x: &Matrix,
) -> Result<ForwardCache> {
    if x.cols() != descriptor.input.len() {
        return Err(Error::Shape(format!(
            "input has {} features, {} expects {}",
            x.cols(),
            descriptor.id,
            descriptor.input.len()
        )));
    }
    let mut inputs = Vec::with_capacity(descriptor.layers.len() + 1);
    let mut current = x.clone();
    for (layer, p) in descriptor.layers.iter().zip(params) {
        let next = match (layer, p) {
            (LayerSpec::Dense { .. }, Some(p)) => dense_forward(&current, p)?,
            (LayerSpec::Conv2d { .. }, Some(p)) => conv_forward(layer, &current, p),
            (LayerSpec::Relu, _) => current.map(|v| v.max(0.0)),
            (LayerSpec::Flatten, _) => current.clone(),
            _ => unreachable!("parameters validated against descriptor"),
        };
        inputs.push(current);
        current = next;
    }
    inputs.push(current);
    Ok(ForwardCache { inputs })
}

fn dense_forward(x: &Matrix, p: &LayerParams) -> Result<Matrix> {
    let mut y = x.matmul_transposed(&p.weight)?;
    for i in 0..y.rows() {
        for (v, b) in y.row_mut(i).iter_mut().zip(&p.bias) {
            *v += b;
        }
    }
    Ok(y)
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(layer: &LayerSpec) -> ConvGeom {
    let LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        in_height,
        in_width,
    } = *layer
    else {
        unreachable!()
    };
    ConvGeom {
        cin: in_channels,
        cout: out_channels,
        k: kernel,
        h: in_height,
        w: in_width,
        oh: in_height - kernel + 1,
        ow: in_width - kernel + 1,
    }
}

fn conv_forward(layer: &LayerSpec, x: &Matrix, p: &LayerParams) -> Matrix {
    let g = conv_geom(layer);
    let mut out = Matrix::zeros(x.rows(), g.cout * g.oh * g.ow);
    for n in 0..x.rows() {
        let src = x.row(n);
        let dst = out.row_mut(n);
        for o in 0..g.cout {
            let wrow = p.weight.row(o);
            for i in 0..g.oh {
                for j in 0..g.ow {
                    let mut s = p.bias[o];
                    for c in 0..g.cin {
                        for a in 0..g.k {
                            let base = c * g.h * g.w + (i + a) * g.w + j;
                            let wbase = c * g.k * g.k + a * g.k;
                            for b in 0..g.k {
                                s += wrow[wbase + b] * src[base + b];
                            }
                        }
                    }
                    dst[o * g.oh * g.ow + i * g.ow + j] = s;
                }
            }
        }
    }
    out
}

/// Backpropagates `grad_out` (gradient w.r.t. logits) and returns parameter
/// gradients (if requested) and the gradient w.r.t. the network input.
pub(crate) fn backward(
    descriptor: &NetworkDescriptor,
    params: &[Option<LayerParams>],
    cache: &ForwardCache,
    grad_out: Matrix,
    want_params: bool,
) -> (Vec<Option<LayerParams>>, Matrix) {
    let mut grads: Vec<Option<LayerParams>> = vec![None; params.len()];
    let mut g = grad_out;
    for idx in (0..descriptor.layers.len()).rev() {
        let input = &cache.inputs[idx];
        let layer = &descriptor.layers[idx];
        g = match (layer, &params[idx]) {
            (LayerSpec::Dense { .. }, Some(p)) => {
                if want_params {
                    let mut gp = p.zeros_like();
                    // dW = g^T x, db = column sums of g
                    gp.weight = g.transpose().matmul(input).expect("dense shapes");
                    for i in 0..g.rows() {
                        for (b, v) in gp.bias.iter_mut().zip(g.row(i)) {
                            *b += v;
                        }
                    }
                    grads[idx] = Some(gp);
                }
                g.matmul(&p.weight).expect("dense shapes")
            }
            (LayerSpec::Conv2d { .. }, Some(p)) => {
                let (gx, gp) = conv_backward(layer, input, p, &g, want_params);
                grads[idx] = gp;
                gx
            }
            (LayerSpec::Relu, _) => {
                let mut gx = g;
                for (v, &x) in gx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                gx
            }
            (LayerSpec::Flatten, _) => g,
            _ => unreachable!("parameters validated against descriptor"),
        };
    }
    (grads, g)
}

fn conv_backward(
    layer: &LayerSpec,
    x: &Matrix,
    p: &LayerParams,
    g: &Matrix,
    want_params: bool,
) -> (Matrix, Option<LayerParams>) {
    let geom = conv_geom(layer);
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut gp = want_params.then(|| p.zeros_like());
    for n in 0..x.rows() {
        let src = x.row(n);
        let gout = g.row(n);
        let gin = gx.row_mut(n);
        for o in 0..geom.cout {
            let wrow = p.weight.row(o);
            for i in 0..geom.oh {
                for j in 0..geom.ow {
                    let go = gout[o * geom.oh * geom.ow + i * geom.ow + j];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..geom.cin {
                        for a in 0..geom.k {
                            let base = c * geom.h * geom.w + (i + a) * geom.w + j;
                            let wbase = c * geom.k * geom.k + a * geom.k;
                            for b in 0..geom.k {
                                gin[base + b] += wrow[wbase + b] * go;
                            }
                        }
                    }
                    if let Some(gp) = gp.as_mut() {
                        gp.bias[o] += go;
                        let gw = gp.weight.row_mut(o);
                        for c in 0..geom.cin {
                            for a in 0..geom.k {
                                let base = c * geom.h * geom.w + (i + a) * geom.w + j;
                                let wbase = c * geom.k * geom.k + a * geom.k;
                                for b in 0..geom.k {
                                    gw[wbase + b] += src[base + b] * go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gp)
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Per-example cross-entropy of `logits` against `labels`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .collect()
}

/// Gradient of the summed cross-entropy w.r.t. the logits: `softmax - onehot`.
pub(crate) fn cross_entropy_grad(logits: &Matrix, labels: &[usize]) -> Matrix {
    let mut g = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        let v = g.get(i, y);
        g.set(i, y, v - 1.0);
    }
    g
}
