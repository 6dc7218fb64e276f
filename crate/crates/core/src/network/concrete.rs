use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

use super::ConvInput;

/// A layer with plain weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ConcreteLayer {
    Fc { weight: Tensor, bias: Vec<f64> },
    Conv { weight: Tensor, bias: Vec<f64>, input: ConvInput },
    Relu,
}

/// Weight and bias gradients of one layer (`None` for weightless layers).
pub(crate) type LayerGrad = Option<(Tensor, Vec<f64>)>;

/// Network with fixed weights, e.g. the extracted domain-agnostic model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteNetwork {
    layers: Vec<ConcreteLayer>,
    input_shape: Vec<usize>,
    classes: usize,
}

impl ConcreteNetwork {
    pub fn new(layers: Vec<ConcreteLayer>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let mut shape = input_shape.clone();
        for l in &layers {
            let ls = match l {
                ConcreteLayer::Fc { weight, bias } => {
                    let [i, o] = dims2(weight)?;
                    check_bias(bias, o)?;
                    Some((crate::domain::LayerShape::Fc { inputs: i, outputs: o }, None))
                }
                ConcreteLayer::Conv { weight, bias, input } => {
                    let [h, w, d, f] = <[usize; 4]>::try_from(weight.shape())
                        .map_err(|_| shape_err("conv weight must be order 4"))?;
                    check_bias(bias, f)?;
                    Some((
                        crate::domain::LayerShape::Conv {
                            height: h,
                            width: w,
                            depth: d,
                            filters: f,
                        },
                        Some(*input),
                    ))
                }
                ConcreteLayer::Relu => None,
            };
            shape = super::layer_output_shape(ls, &shape)?;
        }
        if shape != [classes] {
            return Err(shape_err(format!("network outputs {shape:?}, expected [{classes}]")));
        }
        Ok(Self {
            layers,
            input_shape,
            classes,
        })
    }

    pub fn layers(&self) -> &[ConcreteLayer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let n: usize = self.input_shape.iter().product();
        if x.len() != n {
            return Err(shape_err(format!("input of length {}, network expects {n}", x.len())));
        }
        Ok(())
    }

    /// Class scores (logits).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in &self.layers {
            a = layer_forward(l, &a);
        }
        Ok(a)
    }

    /// Activations entering the last weight-bearing layer.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self
            .layers
            .iter()
            .rposition(|l| !matches!(l, ConcreteLayer::Relu))
            .unwrap_or(0);
        let mut a = x.to_vec();
        for l in &self.layers[..last] {
            a = layer_forward(l, &a);
        }
        Ok(a)
    }

    pub(crate) fn zero_layer_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| match l {
                ConcreteLayer::Fc { weight, bias } | ConcreteLayer::Conv { weight, bias, .. } => Some((
                    Tensor::zeros(weight.shape()).expect("valid weight shape"),
                    vec![0.0; bias.len()],
                )),
                ConcreteLayer::Relu => None,
            })
            .collect()
    }

    /// Runs one instance forward, returns its cross-entropy loss and adds
    /// `scale ×` its parameter gradients into `acc` for layers at index
    /// `≥ stop` (backpropagation halts there; `None` skips it entirely).
    pub(crate) fn accumulate(
        &self,
        x: &[f64],
        label: usize,
        scale: f64,
        stop: Option<usize>,
        acc: &mut [LayerGrad],
    ) -> Result<f64> {
        self.check_input(x)?;
        if label >= self.classes {
            return Err(Error::LabelSpace(format!("label {label} outside 0..{}", self.classes)));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let next = layer_forward(l, acts.last().expect("non-empty"));
            acts.push(next);
        }
        let scores = acts.last().expect("non-empty");
        let (loss, mut grad) = softmax_cross_entropy(scores, label);
        let Some(stop) = stop else {
            return Ok(loss);
        };
        grad.iter_mut().for_each(|g| *g *= scale);
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i < stop {
                break;
            }
            grad = layer_backward(l, &acts[i], &acts[i + 1], &grad, &mut acc[i], i > stop);
        }
        Ok(loss)
    }
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    <[usize; 2]>::try_from(t.shape()).map_err(|_| shape_err("fc weight must be order 2"))
}

fn check_bias(bias: &[f64], outputs: usize) -> Result<()> {
    if bias.len() != outputs {
        return Err(shape_err(format!("bias of length {}, expected {outputs}", bias.len())));
    }
    Ok(())
}

/// Numerically stable `(−log softmax(s)[label], softmax(s) − onehot(label))`.
pub(crate) fn softmax_cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (scores[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn layer_forward(layer: &ConcreteLayer, x: &[f64]) -> Vec<f64> {
    match layer {
        ConcreteLayer::Fc { weight, bias } => {
            let outs = bias.len();
            let mut y = bias.clone();
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &weight.data()[i * outs..(i + 1) * outs];
                for (o, &w) in y.iter_mut().zip(row) {
                    *o += xi * w;
                }
            }
            y
        }
        ConcreteLayer::Conv { weight, bias, input } => {
            let g = ConvGeom::new(weight, *input);
            let mut y = vec![0.0; g.out_h * g.out_w * g.filters];
            let mut patch = vec![0.0; g.patch_len()];
            for r in 0..g.out_h {
                for c in 0..g.out_w {
                    g.gather(x, r, c, &mut patch);
                    let out = &mut y[(r * g.out_w + c) * g.filters..(r * g.out_w + c + 1) * g.filters];
                    out.copy_from_slice(bias);
                    for (p, &v) in patch.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &weight.data()[p * g.filters..(p + 1) * g.filters];
                        for (o, &w) in out.iter_mut().zip(row) {
                            *o += v * w;
                        }
                    }
                }
            }
            y
        }
        ConcreteLayer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Accumulates parameter gradients and returns the input gradient (empty
/// when `need_input` is false).
fn layer_backward(
    layer: &ConcreteLayer,
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    acc: &mut LayerGrad,
    need_input: bool,
) -> Vec<f64> {
    match layer {
        ConcreteLayer::Fc { weight, .. } => {
            let outs = dy.len();
            let (dw, db) = acc.as_mut().expect("fc layer has a gradient slot");
            db.iter_mut().zip(dy).for_each(|(b, g)| *b += g);
            let dwd = dw.data_mut();
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (w, &g) in dwd[i * outs..(i + 1) * outs].iter_mut().zip(dy) {
                    *w += xi * g;
                }
            }
            if !need_input {
                return Vec::new();
            }
            (0..x.len())
                .map(|i| {
                    weight.data()[i * outs..(i + 1) * outs]
                        .iter()
                        .zip(dy)
                        .map(|(w, g)| w * g)
                        .sum()
                })
                .collect()
        }
        ConcreteLayer::Conv { weight, input, .. } => {
            let g = ConvGeom::new(weight, *input);
            let (dw, db) = acc.as_mut().expect("conv layer has a gradient slot");
            let mut dx = if need_input { vec![0.0; x.len()] } else { Vec::new() };
            let mut patch = vec![0.0; g.patch_len()];
            let mut dpatch = vec![0.0; g.patch_len()];
            for r in 0..g.out_h {
                for c in 0..g.out_w {
                    let dout = &dy[(r * g.out_w + c) * g.filters..(r * g.out_w + c + 1) * g.filters];
                    db.iter_mut().zip(dout).for_each(|(b, d)| *b += d);
                    g.gather(x, r, c, &mut patch);
                    let dwd = dw.data_mut();
                    for (p, &v) in patch.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (w, &d) in dwd[p * g.filters..(p + 1) * g.filters].iter_mut().zip(dout) {
                            *w += v * d;
                        }
                    }
                    if need_input {
                        for (p, dp) in dpatch.iter_mut().enumerate() {
                            *dp = weight.data()[p * g.filters..(p + 1) * g.filters]
                                .iter()
                                .zip(dout)
                                .map(|(w, d)| w * d)
                                .sum();
                        }
                        g.scatter_add(&dpatch, r, c, &mut dx);
                    }
                }
            }
            dx
        }
        ConcreteLayer::Relu => {
            if !need_input {
                return Vec::new();
            }
            y.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
        }
    }
}

struct ConvGeom {
    kh: usize,
    kw: usize,
    depth: usize,
    filters: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(weight: &Tensor, input: ConvInput) -> Self {
        let s = weight.shape();
        Self {
            kh: s[0],
            kw: s[1],
            depth: s[2],
            filters: s[3],
            in_w: input.width,
            out_h: input.height - s[0] + 1,
            out_w: input.width - s[1] + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.depth
    }

    /// Patch in weight order `(i, j, depth)`.
    fn gather(&self, x: &[f64], r: usize, c: usize, patch: &mut [f64]) {
        for i in 0..self.kh {
            for j in 0..self.kw {
                let src = ((r + i) * self.in_w + c + j) * self.depth;
                let dst = (i * self.kw + j) * self.depth;
                patch[dst..dst + self.depth].copy_from_slice(&x[src..src + self.depth]);
            }
        }
    }

    fn scatter_add(&self, patch: &[f64], r: usize, c: usize, dx: &mut [f64]) {
        for i in 0..self.kh {
            for j in 0..self.kw {
                let dst = ((r + i) * self.in_w + c + j) * self.depth;
                let src = (i * self.kw + j) * self.depth;
                for k in 0..self.depth {
                    dx[dst + k] += patch[src + k];
                }
            }
        }
    }
}
