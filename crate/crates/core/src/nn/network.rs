//! CONV/FC network definition with forward and backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerParams, LayerShape, Model, WeightTensor4D};

/// Activation and pooling attached to one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDef {
    pub relu: bool,
    /// 2x2 max-pool with stride 2 after the activation (CONV layers only).
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDef {
    /// Input dimensions `[C, H, W]`.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerDef>,
}

/// Tensor dimensions around one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub input: [usize; 3],
    /// Output of the CONV/FC operator before pooling.
    pub conv_out: [usize; 3],
    pub output: [usize; 3],
}

impl LayerGeometry {
    pub fn positions(&self) -> usize {
        self.conv_out[1] * self.conv_out[2]
    }
}

fn numel(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub pool: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl NetworkDef {
    pub fn geometry(&self, shapes: &[LayerShape]) -> Result<Vec<LayerGeometry>> {
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "network defines {} layers, model has {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        let mut dims = self.input;
        let mut out = Vec::with_capacity(shapes.len());
        for (i, (s, def)) in shapes.iter().zip(&self.layers).enumerate() {
            let input = match s.kind {
                LayerKind::Conv => dims,
                LayerKind::Fc => [numel(dims), 1, 1],
            };
            if input[0] != s.channels {
                return Err(Error::layer(
                    i,
                    format!("expects {} input channels, receives {}", s.channels, input[0]),
                ));
            }
            if input[1] < s.kernel_h || input[2] < s.kernel_w {
                return Err(Error::layer(
                    i,
                    format!("{}x{} kernel exceeds {}x{} input", s.kernel_h, s.kernel_w, input[1], input[2]),
                ));
            }
            let conv_out = [
                s.filters,
                (input[1] - s.kernel_h) / s.stride + 1,
                (input[2] - s.kernel_w) / s.stride + 1,
            ];
            let output = if def.pool {
                if s.kind == LayerKind::Fc || conv_out[1] < 2 || conv_out[2] < 2 {
                    return Err(Error::layer(i, "max-pool needs a CONV output of at least 2x2"));
                }
                [conv_out[0], conv_out[1] / 2, conv_out[2] / 2]
            } else {
                conv_out
            };
            out.push(LayerGeometry { input, conv_out, output });
            dims = output;
        }
        if numel(dims) != self.num_classes {
            return Err(Error::Shape(format!(
                "network produces {} outputs for {} classes",
                numel(dims),
                self.num_classes
            )));
        }
        Ok(out)
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        let shapes: Vec<LayerShape> = model.layers().iter().map(|l| *l.shape()).collect();
        self.geometry(&shapes).map(|_| ())
    }

    /// LeNet-style stack: CONV blocks (ReLU + optional pool), hidden FC layers
    /// with ReLU, and a linear classifier.
    pub fn build(
        input: [usize; 3],
        convs: &[ConvSpec],
        fc_hidden: &[usize],
        num_classes: usize,
    ) -> Result<(NetworkDef, Vec<LayerShape>)> {
        if convs.is_empty() {
            return Err(Error::Config("at least one CONV layer is required".into()));
        }
        let mut shapes = Vec::new();
        let mut layers = Vec::new();
        let mut dims = input;
        for c in convs {
            let s = LayerShape::conv(c.filters, dims[0], c.kernel, c.kernel, c.stride);
            s.validate().map_err(Error::Config)?;
            if dims[1] < c.kernel || dims[2] < c.kernel {
                return Err(Error::Config(format!("kernel {} exceeds {}x{} input", c.kernel, dims[1], dims[2])));
            }
            let h = (dims[1] - c.kernel) / c.stride + 1;
            let w = (dims[2] - c.kernel) / c.stride + 1;
            dims = if c.pool { [c.filters, h / 2, w / 2] } else { [c.filters, h, w] };
            shapes.push(s);
            layers.push(LayerDef { relu: true, pool: c.pool });
        }
        let mut width = numel(dims);
        for &h in fc_hidden {
            shapes.push(LayerShape::fc(h, width));
            layers.push(LayerDef { relu: true, pool: false });
            width = h;
        }
        shapes.push(LayerShape::fc(num_classes, width));
        layers.push(LayerDef { relu: false, pool: false });
        let net = NetworkDef { input, num_classes, layers };
        net.geometry(&shapes)?;
        Ok((net, shapes))
    }

    /// He-uniform weights, zero biases.
    pub fn init_model(&self, shapes: &[LayerShape], seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shapes
            .iter()
            .map(|s| {
                let bound = (6.0 / s.filter_len() as f64).sqrt();
                let values = (0..s.len()).map(|_| rng.random_range(-bound..bound)).collect();
                let w = WeightTensor4D::new(*s, values).map_err(Error::Config)?;
                Ok(LayerParams::new(w, vec![0.0; s.filters]))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers, Some(self.clone()))
    }
}

/// A batch of inputs (`batch x C x H x W`, row-major) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub dims: [usize; 3],
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl TrainingBatch {
    pub fn new(dims: [usize; 3], inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("batch must contain at least one sample".into()));
        }
        if inputs.len() != labels.len() * numel(dims) {
            return Err(Error::Shape(format!(
                "{} input values for {} samples of {:?}",
                inputs.len(),
                labels.len(),
                dims
            )));
        }
        Ok(TrainingBatch { dims, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = numel(self.dims);
        &self.inputs[i * n..(i + 1) * n]
    }
}

/// Real arithmetic, or inputs of every layer requantized to the layer's
/// unsigned input grid (weights are used as stored).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Real,
    Quantized,
}

#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub pool_argmax: Vec<usize>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub precision: Precision,
    pub samples: Vec<Vec<LayerCache>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub type Gradients = Vec<LayerGrads>;

pub fn zero_gradients(model: &Model) -> Gradients {
    model
        .layers()
        .iter()
        .map(|l| LayerGrads { weights: vec![0.0; l.shape().len()], biases: vec![0.0; l.biases.len()] })
        .collect()
}

/// Valid cross-correlation without bias. Products are summed in kernel order
/// before the bias is added, so on fixed-point operands the sum is exact.
pub fn conv_accumulate(x: &[f64], dims: [usize; 3], w: &WeightTensor4D, out_dims: [usize; 3]) -> Vec<f64> {
    let s = w.shape();
    let [_, h_in, w_in] = dims;
    let [_, oh, ow] = out_dims;
    let mut out = vec![0.0; s.filters * oh * ow];
    for f in 0..s.filters {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..s.channels {
                    let k = w.kernel(f, c);
                    for kh in 0..s.kernel_h {
                        let row = (c * h_in + oy * s.stride + kh) * w_in + ox * s.stride;
                        for kw in 0..s.kernel_w {
                            acc += k[kh * s.kernel_w + kw] * x[row + kw];
                        }
                    }
                }
                out[(f * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn max_pool2(x: &[f64], dims: [usize; 3]) -> (Vec<f64>, Vec<usize>) {
    let [c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (ch * h + 2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn forward_sample(
    model: &Model,
    net: &NetworkDef,
    geometry: &[LayerGeometry],
    x: &[f64],
    precision: Precision,
) -> Result<(Vec<f64>, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(model.num_layers());
    let mut current = x.to_vec();
    for (i, ((layer, def), geo)) in model.layers().iter().zip(&net.layers).zip(geometry).enumerate() {
        let input = match precision {
            Precision::Real => current,
            Precision::Quantized => {
                let q = layer.quant.ok_or_else(|| Error::layer(i, "quantized forward on an unquantized layer"))?;
                current.iter().map(|&v| q.quantize_input(v)).collect()
            }
        };
        let mut pre = conv_accumulate(&input, geo.input, &layer.weights, geo.conv_out);
        let plane = geo.conv_out[1] * geo.conv_out[2];
        for (j, v) in pre.iter_mut().enumerate() {
            *v += layer.biases[j / plane];
        }
        let act: Vec<f64> = if def.relu { pre.iter().map(|&v| v.max(0.0)).collect() } else { pre.clone() };
        let (output, pool_argmax) = if def.pool { max_pool2(&act, geo.conv_out) } else { (act.clone(), Vec::new()) };
        current = output.clone();
        caches.push(LayerCache { input, pre, act, pool_argmax, output });
    }
    Ok((current, caches))
}

pub fn forward(
    model: &Model,
    net: &NetworkDef,
    batch: &TrainingBatch,
    precision: Precision,
) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    let geometry = geometry_for(model, net, batch.dims)?;
    let results: Vec<Result<(Vec<f64>, Vec<LayerCache>)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| forward_sample(model, net, &geometry, batch.sample(i), precision))
        .collect();
    let mut logits = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    for r in results {
        let (l, c) = r?;
        logits.push(l);
        samples.push(c);
    }
    Ok((logits, ForwardCache { precision, samples }))
}

pub(crate) fn geometry_for(model: &Model, net: &NetworkDef, dims: [usize; 3]) -> Result<Vec<LayerGeometry>> {
    if dims != net.input {
        return Err(Error::Shape(format!("batch dims {:?} differ from network input {:?}", dims, net.input)));
    }
    let shapes: Vec<LayerShape> = model.layers().iter().map(|l| *l.shape()).collect();
    net.geometry(&shapes)
}

/// Mean softmax cross-entropy contribution and logit gradient of one sample.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn backward_sample(
    model: &Model,
    net: &NetworkDef,
    geometry: &[LayerGeometry],
    caches: &[LayerCache],
    dlogits: Vec<f64>,
) -> Gradients {
    let mut grads = zero_gradients(model);
    let mut dout = dlogits;
    for i in (0..model.num_layers()).rev() {
        let layer = model.layer(i);
        let def = net.layers[i];
        let geo = geometry[i];
        let cache = &caches[i];
        let mut dact = if def.pool {
            let mut d = vec![0.0; cache.act.len()];
            for (j, &src) in cache.pool_argmax.iter().enumerate() {
                d[src] += dout[j];
            }
            d
        } else {
            dout
        };
        if def.relu {
            for (d, &p) in dact.iter_mut().zip(&cache.pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let dz = dact;
        let s = layer.shape();
        let [_, h_in, w_in] = geo.input;
        let [_, oh, ow] = geo.conv_out;
        let g = &mut grads[i];
        let need_dx = i > 0;
        let mut dx = if need_dx { vec![0.0; cache.input.len()] } else { Vec::new() };
        for f in 0..s.filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dz[(f * oh + oy) * ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[f] += d;
                    for c in 0..s.channels {
                        let kbase = (f * s.channels + c) * s.kernel_len();
                        for kh in 0..s.kernel_h {
                            let row = (c * h_in + oy * s.stride + kh) * w_in + ox * s.stride;
                            for kw in 0..s.kernel_w {
                                let k = kbase + kh * s.kernel_w + kw;
                                g.weights[k] += d * cache.input[row + kw];
                                if need_dx {
                                    dx[row + kw] += d * layer.weights.values()[k];
                                }
                            }
                        }
                    }
                }
            }
        }
        dout = dx;
    }
    grads
}

/// Mean cross-entropy over the batch and its exact gradient with respect to
/// every weight and bias. Per-sample gradients are reduced in sample order so
/// the result does not depend on thread scheduling.
pub fn backward(model: &Model, net: &NetworkDef, batch: &TrainingBatch, cache: &ForwardCache) -> Result<(f64, Gradients)> {
    if cache.precision != Precision::Real {
        return Err(Error::Config("backward requires a real-precision forward cache".into()));
    }
    if cache.samples.len() != batch.len() {
        return Err(Error::Shape("forward cache does not match batch".into()));
    }
    let geometry = geometry_for(model, net, batch.dims)?;
    let per_sample: Vec<(f64, Gradients)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let caches = &cache.samples[i];
            let logits = &caches.last().expect("at least one layer").output;
            let (loss, dlogits) = softmax_cross_entropy(logits, batch.labels[i]);
            (loss, backward_sample(model, net, &geometry, caches, dlogits))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = zero_gradients(model);
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l;
        for (t, s) in total.iter_mut().zip(g) {
            for (a, b) in t.weights.iter_mut().zip(s.weights) {
                *a += b;
            }
            for (a, b) in t.biases.iter_mut().zip(s.biases) {
                *a += b;
            }
        }
    }
    for t in &mut total {
        t.weights.iter_mut().for_each(|v| *v *= scale);
        t.biases.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, total))
}

pub fn loss_and_gradients(model: &Model, net: &NetworkDef, batch: &TrainingBatch) -> Result<(f64, Gradients)> {
    let (_, cache) = forward(model, net, batch, Precision::Real)?;
    backward(model, net, batch, &cache)
}

pub fn mean_loss(model: &Model, net: &NetworkDef, batch: &TrainingBatch) -> Result<f64> {
    let (logits, _) = forward(model, net, batch, Precision::Real)?;
    let total: f64 = logits.iter().zip(&batch.labels).map(|(l, &y)| softmax_cross_entropy(l, y).0).sum();
    Ok(total / batch.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
