//! Sequential CNN with per-layer back-propagation mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, ConvCfg};
use crate::cost::LayerCfg;
use crate::error::{config_err, shape_err, Result};
use crate::filter::{self, FilterCfg, PatchGrid};
use crate::tensor::{Kernel4, Tensor4};

/// How a convolution layer takes part in back-propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Kernel never updated; still propagates exact `g_x` when needed.
    Frozen,
    Vanilla,
    Filtered(FilterCfg),
}

impl ConvMode {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, ConvMode::Frozen)
    }

    pub fn label(&self) -> String {
        match self {
            ConvMode::Frozen => "frozen".into(),
            ConvMode::Vanilla => "vanilla".into(),
            ConvMode::Filtered(f) => format!("filtered(r={})", f.r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Kernel4,
    pub bias: Vec<f64>,
    pub cfg: ConvCfg,
    pub mode: ConvMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// Row-major `(out, in)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    /// 2×2 window, stride 2; trailing odd rows/cols are dropped.
    AvgPool2,
    Flatten,
    Linear(LinearLayer),
}

impl Layer {
    pub fn conv(kernel: Kernel4, bias: Vec<f64>, cfg: ConvCfg) -> Self {
        Layer::Conv(ConvLayer {
            kernel,
            bias,
            cfg,
            mode: ConvMode::Vanilla,
        })
    }

    pub fn linear(weights: Vec<f64>, bias: Vec<f64>, in_features: usize, out_features: usize) -> Self {
        Layer::Linear(LinearLayer {
            weights,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn is_trainable(&self) -> bool {
        match self {
            Layer::Conv(c) => c.mode.is_trainable(),
            Layer::Linear(_) => true,
            _ => false,
        }
    }
}

/// Per-sample shape `(C, H, W)`.
pub type SampleDims = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input: SampleDims,
    /// Per-layer input shape, filled by shape inference.
    shapes: Vec<SampleDims>,
    output: SampleDims,
}

/// What the forward pass keeps for the backward pass of one layer.
#[derive(Debug)]
enum Saved {
    Nothing,
    Input(Tensor4),
    Features(Tensor4),
    PatchSums(PatchGrid),
    Mask(Vec<bool>),
}

/// Activations retained by a training forward pass.
#[derive(Debug)]
pub struct Tape {
    saved: Vec<Saved>,
    batch: usize,
}

impl Tape {
    /// Activation elements held for convolution kernel gradients.
    pub fn conv_stored_elements(&self) -> Vec<(usize, usize)> {
        self.saved
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Saved::Input(t) => Some((i, t.len())),
                Saved::PatchSums(g) => Some((i, g.len())),
                _ => None,
            })
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradient for one trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn infer_shape(layer: &Layer, input: SampleDims) -> Result<SampleDims> {
    let (c, h, w) = input;
    match layer {
        Layer::Conv(cl) => {
            cl.cfg.validate()?;
            if cl.kernel.in_channels() != c {
                return shape_err(format!(
                    "conv expects {} channels, gets {c}",
                    cl.kernel.in_channels()
                ));
            }
            if cl.bias.len() != cl.kernel.out_channels() {
                return shape_err("conv bias length differs from output channels");
            }
            let (ho, wo) = conv::output_hw((h, w), cl.kernel.kernel_hw(), cl.cfg)?;
            if let ConvMode::Filtered(f) = cl.mode {
                f.validate()?;
                if (ho, wo) != (h, w) {
                    return config_err("filtered conv layers need same-size output (use same padding)");
                }
            }
            Ok((cl.kernel.out_channels(), ho, wo))
        }
        Layer::Relu => Ok(input),
        Layer::AvgPool2 => {
            if h < 2 || w < 2 {
                return shape_err(format!("avgpool2 on {h}x{w}"));
            }
            Ok((c, h / 2, w / 2))
        }
        Layer::Flatten => Ok((c * h * w, 1, 1)),
        Layer::Linear(l) => {
            if (h, w) != (1, 1) || c != l.in_features {
                return shape_err(format!(
                    "linear expects {} flat features, gets {c}x{h}x{w}",
                    l.in_features
                ));
            }
            if l.weights.len() != l.in_features * l.out_features || l.bias.len() != l.out_features {
                return shape_err("linear parameter sizes inconsistent");
            }
            Ok((l.out_features, 1, 1))
        }
    }
}

impl Model {
    pub fn new(input: SampleDims, layers: Vec<Layer>) -> Result<Self> {
        let mut model = Self {
            layers,
            input,
            shapes: Vec::new(),
            output: input,
        };
        model.reinfer()?;
        Ok(model)
    }

    fn reinfer(&mut self) -> Result<()> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for layer in &self.layers {
            shapes.push(cur);
            cur = infer_shape(layer, cur)?;
        }
        self.shapes = shapes;
        self.output = cur;
        Ok(())
    }

    /// conv3×3(8) → relu → pool → conv3×3(16) → relu → pool → conv3×3(32)
    /// → relu → flatten → linear(classes). Same padding throughout; weights
    /// drawn uniform with fan-in scaling from `seed`.
    pub fn desk(input: SampleDims, classes: usize, seed: u64) -> Result<Self> {
        Self::desk_with_widths(input, classes, &[8, 16, 32], 3, seed)
    }

    pub fn desk_with_widths(
        input: SampleDims,
        classes: usize,
        widths: &[usize],
        kernel: usize,
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() {
            return config_err("model needs at least one conv layer");
        }
        if kernel.is_multiple_of(2) {
            return config_err("kernel side must be odd for same padding");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = input;
        for (i, &width) in widths.iter().enumerate() {
            let fan_in = (c * kernel * kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let k = Kernel4::from_fn([width, c, kernel, kernel], |_| rng.random_range(-bound..bound));
            layers.push(Layer::conv(k, vec![0.0; width], ConvCfg::same(kernel)));
            layers.push(Layer::Relu);
            c = width;
            if i + 1 < widths.len() {
                layers.push(Layer::AvgPool2);
                h /= 2;
                w /= 2;
            }
        }
        layers.push(Layer::Flatten);
        let features = c * h * w;
        let bound = 1.0 / (features as f64).sqrt();
        let weights = (0..features * classes).map(|_| rng.random_range(-bound..bound)).collect();
        layers.push(Layer::linear(weights, vec![0.0; classes], features, classes));
        Self::new(input, layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dims(&self) -> SampleDims {
        self.input
    }

    pub fn output_dims(&self) -> SampleDims {
        self.output
    }

    /// Input shape of layer `i`.
    pub fn layer_input_dims(&self, i: usize) -> SampleDims {
        self.shapes[i]
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_modes(&self) -> Vec<ConvMode> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.mode),
                _ => None,
            })
            .collect()
    }

    /// Cost-model shape of the conv layer at index `i`.
    pub fn layer_cost_cfg(&self, i: usize) -> Option<LayerCfg> {
        let Layer::Conv(cl) = &self.layers[i] else {
            return None;
        };
        let (c_x, h_x, w_x) = self.shapes[i];
        let (kh, kw) = cl.kernel.kernel_hw();
        let (ho, wo) = conv::output_hw((h_x, w_x), (kh, kw), cl.cfg).ok()?;
        Some(LayerCfg {
            c_x: c_x as u64,
            c_y: cl.kernel.out_channels() as u64,
            h_y: ho as u64,
            w_y: wo as u64,
            h_k: kh as u64,
            w_k: kw as u64,
            h_x: h_x as u64,
            w_x: w_x as u64,
        })
    }

    /// Sets the last `k` conv layers to `mode` and freezes the rest. The
    /// classifier stays trainable regardless.
    pub fn set_active_layers(&mut self, k: usize, mode: ConvMode) -> Result<()> {
        let convs = self.conv_indices();
        if k > convs.len() {
            return config_err(format!("k={k} exceeds {} conv layers", convs.len()));
        }
        if !mode.is_trainable() {
            return config_err("active layer mode must be vanilla or filtered");
        }
        let first_active = convs.len() - k;
        let previous = self.layers.clone();
        for (pos, &i) in convs.iter().enumerate() {
            if let Layer::Conv(cl) = &mut self.layers[i] {
                cl.mode = if pos >= first_active { mode } else { ConvMode::Frozen };
            }
        }
        if let Err(e) = self.reinfer() {
            self.layers = previous;
            self.reinfer()?;
            return Err(e);
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if (c, h, w) != self.input {
            return shape_err(format!("model expects {:?}, got {:?}", self.input, (c, h, w)));
        }
        Ok(())
    }

    /// Inference forward pass; returns logits as `[N, K, 1, 1]`.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer_forward(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Index of the earliest layer that needs gradients.
    fn first_trainable(&self) -> Option<usize> {
        self.layers.iter().position(Layer::is_trainable)
    }

    /// Training forward pass. Vanilla conv layers keep their full input,
    /// filtered ones keep only the input patch sums, frozen ones keep nothing.
    pub fn forward_train(&self, x: &Tensor4) -> Result<(Tensor4, Tape)> {
        self.check_input(x)?;
        let first = self.first_trainable().unwrap_or(self.layers.len());
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let needs_backward = i >= first;
            let keep = if !needs_backward {
                Saved::Nothing
            } else {
                match layer {
                    Layer::Conv(cl) => match cl.mode {
                        ConvMode::Frozen => Saved::Nothing,
                        ConvMode::Vanilla => Saved::Input(cur.clone()),
                        ConvMode::Filtered(f) => Saved::PatchSums(filter::patch_sum_input(&cur, f)?),
                    },
                    Layer::Linear(_) => Saved::Features(cur.clone()),
                    _ => Saved::Nothing,
                }
            };
            let next = layer_forward(layer, &cur)?;
            let keep = match (layer, needs_backward) {
                (Layer::Relu, true) => Saved::Mask(next.data().iter().map(|&v| v > 0.0).collect()),
                _ => keep,
            };
            saved.push(keep);
            cur = next;
        }
        Ok((
            cur,
            Tape {
                saved,
                batch: x.batch(),
            },
        ))
    }

    /// Back-propagates `g_out` (gradient of the loss w.r.t. the logits)
    /// through the layers recorded on `tape`. Returns gradients of every
    /// trainable layer in layer order.
    pub fn backward(&self, tape: &Tape, g_out: &Tensor4) -> Result<Vec<ParamGrad>> {
        let Some(first) = self.first_trainable() else {
            return Ok(Vec::new());
        };
        let mut grads = Vec::new();
        let mut g = g_out.clone();
        for i in (first..self.layers.len()).rev() {
            let need_gx = i > first;
            let (c, h, w) = self.shapes[i];
            let in_dims = [tape.batch, c, h, w];
            match (&self.layers[i], &tape.saved[i]) {
                (Layer::Conv(cl), saved) => {
                    let (param, gx) = conv_backward(cl, saved, &g, (h, w), need_gx)?;
                    if let Some((weights, bias)) = param {
                        grads.push(ParamGrad { layer: i, weights, bias });
                    }
                    if let Some(gx) = gx {
                        g = gx;
                    }
                }
                (Layer::Linear(l), Saved::Features(x)) => {
                    let (gw, gb, gx) = linear_backward(l, x, &g);
                    grads.push(ParamGrad {
                        layer: i,
                        weights: gw,
                        bias: gb,
                    });
                    g = gx;
                }
                (Layer::Relu, Saved::Mask(mask)) => {
                    for (v, &on) in g.data_mut().iter_mut().zip(mask) {
                        if !on {
                            *v = 0.0;
                        }
                    }
                }
                (Layer::AvgPool2, _) => g = avgpool2_backward(&g, in_dims),
                (Layer::Flatten, _) => g = Tensor4::new(in_dims, g.into_data())?,
                _ => unreachable!("tape does not match model layer {i}"),
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Exact output gradient `g_y` and input of every conv layer for the
    /// mean cross-entropy of the batch, ignoring layer modes.
    pub fn conv_output_grads(&self, x: &Tensor4, labels: &[usize]) -> Result<Vec<ConvProbe>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            cur = layer_forward(layer, &cur)?;
        }
        let classes = self.output.0;
        let (_, g_logits) = super::loss::cross_entropy(cur.data(), labels, classes)?;
        let mut g = Tensor4::new(cur.dims(), g_logits)?;
        let mut probes = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let x_in = &inputs[i];
            let (_, h, w) = self.shapes[i];
            match &self.layers[i] {
                Layer::Conv(cl) => {
                    probes.push(ConvProbe {
                        layer: i,
                        input: x_in.clone(),
                        g_y: g.clone(),
                    });
                    g = conv::conv2d_backward_input(&g, &cl.kernel, (h, w), cl.cfg)?;
                }
                Layer::Linear(l) => g = linear_backward(l, x_in, &g).2,
                Layer::Relu => {
                    let out = layer_forward(&Layer::Relu, x_in)?;
                    for (v, o) in g.data_mut().iter_mut().zip(out.data()) {
                        if *o <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                Layer::AvgPool2 => g = avgpool2_backward(&g, x_in.dims()),
                Layer::Flatten => g = Tensor4::new(x_in.dims(), g.into_data())?,
            }
        }
        probes.reverse();
        Ok(probes)
    }

    /// Mutable parameter blocks of trainable layers, `(weights, bias)` in
    /// layer order.
    pub fn trainable_params_mut(&mut self) -> Vec<(usize, &mut [f64], &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, layer)| match layer {
                Layer::Conv(cl) if cl.mode.is_trainable() => {
                    Some((i, cl.kernel.data_mut(), cl.bias.as_mut_slice()))
                }
                Layer::Linear(l) => Some((i, l.weights.as_mut_slice(), l.bias.as_mut_slice())),
                _ => None,
            })
            .collect()
    }
}

/// Inputs and exact output gradient of one conv layer.
#[derive(Debug, Clone)]
pub struct ConvProbe {
    pub layer: usize,
    pub input: Tensor4,
    pub g_y: Tensor4,
}

type ConvGrads = (Option<(Vec<f64>, Vec<f64>)>, Option<Tensor4>);

fn conv_backward(cl: &ConvLayer, saved: &Saved, g_y: &Tensor4, in_hw: (usize, usize), need_gx: bool) -> Result<ConvGrads> {
    match (cl.mode, saved) {
        (ConvMode::Frozen, _) => {
            let gx = if need_gx {
                Some(conv::conv2d_backward_input(g_y, &cl.kernel, in_hw, cl.cfg)?)
            } else {
                None
            };
            Ok((None, gx))
        }
        (ConvMode::Vanilla, Saved::Input(x)) => {
            let gk = conv::conv2d_backward_kernel(g_y, x, cl.kernel.kernel_hw(), cl.cfg)?;
            let gb = conv::conv2d_backward_bias(g_y);
            let gx = if need_gx {
                Some(conv::conv2d_backward_input(g_y, &cl.kernel, in_hw, cl.cfg)?)
            } else {
                None
            };
            Ok((Some((gk.into_data(), gb)), gx))
        }
        (ConvMode::Filtered(f), Saved::PatchSums(x_u)) => {
            let out = filter::filtered_backward(x_u, &cl.kernel, g_y, f)?;
            let gx = need_gx.then_some(out.g_x);
            Ok((Some((out.g_kernel.into_data(), out.g_bias)), gx))
        }
        _ => unreachable!("conv tape entry does not match its mode"),
    }
}

fn layer_forward(layer: &Layer, x: &Tensor4) -> Result<Tensor4> {
    match layer {
        Layer::Conv(cl) => conv::conv2d_forward(x, &cl.kernel, &cl.bias, cl.cfg),
        Layer::Relu => Ok(Tensor4::new(x.dims(), x.data().iter().map(|&v| v.max(0.0)).collect())?),
        Layer::AvgPool2 => Ok(avgpool2_forward(x)),
        Layer::Flatten => {
            let [n, c, h, w] = x.dims();
            Tensor4::new([n, c * h * w, 1, 1], x.data().to_vec())
        }
        Layer::Linear(l) => Ok(linear_forward(l, x)),
    }
}

fn avgpool2_forward(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let (ho, wo) = (h / 2, w / 2);
    Tensor4::from_fn([n, c, ho, wo], |[b, ch, i, j]| {
        let p = x.plane(b, ch);
        let (r0, c0) = (2 * i, 2 * j);
        0.25 * (p[r0 * w + c0] + p[r0 * w + c0 + 1] + p[(r0 + 1) * w + c0] + p[(r0 + 1) * w + c0 + 1])
    })
}

fn avgpool2_backward(g: &Tensor4, in_dims: [usize; 4]) -> Tensor4 {
    let [_, _, ho, wo] = g.dims();
    Tensor4::from_fn(in_dims, |[b, ch, i, j]| {
        let (pi, pj) = (i / 2, j / 2);
        if pi < ho && pj < wo {
            0.25 * g.at([b, ch, pi, pj])
        } else {
            0.0
        }
    })
}

fn linear_forward(l: &LinearLayer, x: &Tensor4) -> Tensor4 {
    let n = x.batch();
    let (fi, fo) = (l.in_features, l.out_features);
    let mut out = Vec::with_capacity(n * fo);
    for b in 0..n {
        let row = &x.data()[b * fi..(b + 1) * fi];
        for o in 0..fo {
            let w = &l.weights[o * fi..(o + 1) * fi];
            out.push(l.bias[o] + crate::tensor::frobenius_inner(w, row));
        }
    }
    Tensor4::new([n, fo, 1, 1], out).expect("linear output dims")
}

fn linear_backward(l: &LinearLayer, x: &Tensor4, g: &Tensor4) -> (Vec<f64>, Vec<f64>, Tensor4) {
    let n = x.batch();
    let (fi, fo) = (l.in_features, l.out_features);
    let mut gw = vec![0.0; fi * fo];
    let mut gb = vec![0.0; fo];
    let mut gx = vec![0.0; n * fi];
    for b in 0..n {
        let xr = &x.data()[b * fi..(b + 1) * fi];
        let gxr = &mut gx[b * fi..(b + 1) * fi];
        for o in 0..fo {
            let go = g.data()[b * fo + o];
            gb[o] += go;
            let wr = &l.weights[o * fi..(o + 1) * fi];
            let gwr = &mut gw[o * fi..(o + 1) * fi];
            for k in 0..fi {
                gwr[k] += go * xr[k];
                gxr[k] += go * wr[k];
            }
        }
    }
    (gw, gb, Tensor4::new(x.dims(), gx).expect("linear input dims"))
}
