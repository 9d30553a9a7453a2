//! Placement of a quantized model onto processing elements (PEs) and
//! sub-arrays, pruning-aware, with bit-exact simulation of inference.
//!
//! Each layer gets one PE per input channel. A PE holds one input sub-array
//! and one weight sub-array per filter, each `bits` rows by `kh * kw`
//! columns. Pruned kernels are either deleted (`Physical`) or kept and marked
//! in the PE's skip LUT (`Lut`).

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitserial::{
    check_operands, conv_output_dims, input_tile, kernel_planes, load_footprint, BitConvTrace, BitPlaneTensor,
    OperandBits, TraceMode,
};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{LayerKind, LayerParams, LayerShape, Model, QuantSpec, WeightTensor4D};
use crate::nn::network::{max_pool2, NetworkDef};
use crate::nn::Dataset;
use crate::quant::weight_codes;

pub const LAYOUT_FORMAT: &str = "pimforge-layout/1";
pub const TRACE_FORMAT: &str = "pimforge-trace/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovalMode {
    /// Pruned sub-arrays and empty PEs are deleted.
    #[default]
    Physical,
    /// Everything is kept; pruned sub-arrays are skipped through the LUT.
    Lut,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SubArrayContent {
    WeightKernel { filter: usize, channel: usize },
    InputTile { channel: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubArray {
    pub rows: usize,
    pub cols: usize,
    pub content: SubArrayContent,
    pub pruned: bool,
    /// Signed weight codes in kernel order; empty for input tiles.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub codes: Vec<i64>,
}

impl SubArray {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessingElement {
    /// Input channel served by this PE.
    pub pe_index: usize,
    pub input_subarray: SubArray,
    pub weight_subarrays: Vec<SubArray>,
    pub skip_lut: Vec<bool>,
}

impl ProcessingElement {
    pub fn active_subarrays(&self) -> impl Iterator<Item = &SubArray> {
        self.weight_subarrays.iter().zip(&self.skip_lut).filter(|(_, &skip)| !skip).map(|(s, _)| s)
    }

    pub fn is_active(&self) -> bool {
        self.skip_lut.iter().any(|&s| !s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub layer: usize,
    pub shape: LayerShape,
    pub quant: QuantSpec,
    pub biases: Vec<f64>,
    pub pes: Vec<ProcessingElement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PimLayout {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mode: RemovalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkDef>,
    pub layers: Vec<LayerLayout>,
}

fn layer_codes(i: usize, layer: &LayerParams, spec: &QuantSpec) -> Result<Vec<i64>> {
    spec.validate().map_err(|m| Error::layer(i, m))?;
    weight_codes(&layer.weights, spec).map_err(|j| {
        Error::layer(
            i,
            format!("weight {j} = {} is not on the {}-bit grid (step {})", layer.weights.values()[j], spec.weight_bits, spec.weight_step()),
        )
    })
}

/// Places `model` onto PEs. Each layer uses `quant` if given, otherwise its
/// own quantization spec; every weight must already lie on that grid.
pub fn build_layout(model: &Model, quant: Option<QuantSpec>, mode: RemovalMode) -> Result<PimLayout> {
    model.validate()?;
    let mut layers = Vec::with_capacity(model.num_layers());
    for (i, layer) in model.layers().iter().enumerate() {
        let spec = quant
            .or(layer.quant)
            .ok_or_else(|| Error::layer(i, "model is not quantized; sub-array rows are undefined"))?;
        let codes = layer_codes(i, layer, &spec)?;
        let s = layer.shape();
        let k = s.kernel_len();
        let mut pes = Vec::with_capacity(s.channels);
        for c in 0..s.channels {
            let mut weight_subarrays = Vec::with_capacity(s.filters);
            for f in 0..s.filters {
                let start = (f * s.channels + c) * k;
                let kernel = &codes[start..start + k];
                let pruned = kernel.iter().all(|&v| v == 0);
                if pruned && mode == RemovalMode::Physical {
                    continue;
                }
                weight_subarrays.push(SubArray {
                    rows: spec.weight_bits as usize,
                    cols: k,
                    content: SubArrayContent::WeightKernel { filter: f, channel: c },
                    pruned,
                    codes: kernel.to_vec(),
                });
            }
            if weight_subarrays.is_empty() && mode == RemovalMode::Physical {
                continue;
            }
            let skip_lut = weight_subarrays.iter().map(|s| s.pruned).collect();
            pes.push(ProcessingElement {
                pe_index: c,
                input_subarray: SubArray {
                    rows: spec.input_bits as usize,
                    cols: k,
                    content: SubArrayContent::InputTile { channel: c },
                    pruned: false,
                    codes: Vec::new(),
                },
                weight_subarrays,
                skip_lut,
            });
        }
        layers.push(LayerLayout { layer: i, shape: *s, quant: spec, biases: layer.biases.clone(), pes });
    }
    Ok(PimLayout {
        format: LAYOUT_FORMAT.to_string(),
        seed: model.seed,
        mode,
        network: model.network.clone(),
        layers,
    })
}

impl PimLayout {
    /// Structural checks: PE/sub-array geometry, LUT consistency and mode
    /// rules.
    pub fn validate(&self) -> Result<()> {
        if self.format != LAYOUT_FORMAT {
            return Err(Error::Config(format!("unsupported layout format {:?}", self.format)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let err = |m: String| Err(Error::layer(i, m));
            if l.layer != i {
                return err(format!("layer index {} out of order", l.layer));
            }
            l.shape.validate().map_err(|m| Error::layer(i, m))?;
            l.quant.validate().map_err(|m| Error::layer(i, m))?;
            if l.biases.len() != l.shape.filters {
                return err("bias count does not match filters".into());
            }
            let k = l.shape.kernel_len();
            let max_code = l.quant.max_weight_code();
            let mut last_pe = None;
            for pe in &l.pes {
                if pe.pe_index >= l.shape.channels || last_pe.is_some_and(|p| p >= pe.pe_index) {
                    return err(format!("PE index {} invalid or out of order", pe.pe_index));
                }
                last_pe = Some(pe.pe_index);
                let inp = &pe.input_subarray;
                if inp.rows != l.quant.input_bits as usize
                    || inp.cols != k
                    || inp.content != (SubArrayContent::InputTile { channel: pe.pe_index })
                {
                    return err(format!("PE {} has a malformed input sub-array", pe.pe_index));
                }
                if pe.skip_lut.len() != pe.weight_subarrays.len() {
                    return err(format!("PE {} skip LUT length mismatch", pe.pe_index));
                }
                if pe.weight_subarrays.is_empty() && self.mode == RemovalMode::Physical {
                    return err(format!("PE {} is empty in physical mode", pe.pe_index));
                }
                let mut last_f = None;
                for (sa, &skip) in pe.weight_subarrays.iter().zip(&pe.skip_lut) {
                    let SubArrayContent::WeightKernel { filter, channel } = sa.content else {
                        return err(format!("PE {} holds a non-weight sub-array", pe.pe_index));
                    };
                    if channel != pe.pe_index || filter >= l.shape.filters || last_f.is_some_and(|p| p >= filter) {
                        return err(format!("PE {} has a misplaced kernel ({filter}, {channel})", pe.pe_index));
                    }
                    last_f = Some(filter);
                    if sa.rows != l.quant.weight_bits as usize || sa.cols != k || sa.codes.len() != k {
                        return err(format!("sub-array ({filter}, {channel}) has the wrong geometry"));
                    }
                    if sa.codes.iter().any(|c| c.abs() > max_code || (!l.quant.signed && *c < 0)) {
                        return err(format!("sub-array ({filter}, {channel}) holds an out-of-range code"));
                    }
                    let zero = sa.codes.iter().all(|&c| c == 0);
                    if skip != sa.pruned || sa.pruned != zero {
                        return err(format!("sub-array ({filter}, {channel}) pruned flag disagrees with contents"));
                    }
                    if sa.pruned && self.mode == RemovalMode::Physical {
                        return err(format!("pruned sub-array ({filter}, {channel}) present in physical mode"));
                    }
                }
                if self.mode == RemovalMode::Lut && pe.weight_subarrays.len() != l.shape.filters {
                    return err(format!("PE {} lost sub-arrays in LUT mode", pe.pe_index));
                }
            }
            if self.mode == RemovalMode::Lut && l.pes.len() != l.shape.channels {
                return err("LUT mode must keep every PE".into());
            }
        }
        if let Some(net) = &self.network {
            let shapes: Vec<LayerShape> = self.layers.iter().map(|l| l.shape).collect();
            net.geometry(&shapes)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Parse { what: "layout".into(), source })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let l: PimLayout = serde_json::from_str(s).map_err(|source| Error::Parse { what: "layout".into(), source })?;
        l.validate()?;
        Ok(l)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let l: PimLayout = io::read_json(path, "layout file")?;
        l.validate()?;
        Ok(l)
    }

    /// The quantized model the layout encodes; removed sub-arrays become zero
    /// kernels.
    pub fn to_model(&self) -> Result<Model> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut w = WeightTensor4D::zeros(l.shape);
                for sa in l.pes.iter().flat_map(|p| &p.weight_subarrays) {
                    if let SubArrayContent::WeightKernel { filter, channel } = sa.content {
                        for (dst, &code) in w.kernel_mut(filter, channel).iter_mut().zip(&sa.codes) {
                            *dst = l.quant.weight_value(code);
                        }
                    }
                }
                let mut p = LayerParams::new(w, l.biases.clone());
                p.quant = Some(l.quant);
                p
            })
            .collect();
        let mut m = Model::new(layers, self.network.clone())?;
        m.seed = self.seed;
        Ok(m)
    }

    pub fn operand_bits(&self, layer: usize) -> OperandBits {
        OperandBits::from_spec(&self.layers[layer].quant)
    }
}

/// Layer `i` of the layout with weight planes decoded once.
struct PreparedLayer<'a> {
    layout: &'a LayerLayout,
    bits: OperandBits,
    /// Per PE: channel and active (filter, planes) pairs.
    pes: Vec<(usize, Vec<(usize, BitPlaneTensor)>)>,
}

impl<'a> PreparedLayer<'a> {
    fn new(layout: &'a LayerLayout) -> Self {
        let bits = OperandBits::from_spec(&layout.quant);
        let single = LayerShape { filters: 1, channels: 1, ..layout.shape };
        let pes = layout
            .pes
            .iter()
            .map(|pe| {
                let kernels = pe
                    .active_subarrays()
                    .map(|sa| {
                        let SubArrayContent::WeightKernel { filter, .. } = sa.content else { unreachable!() };
                        (filter, kernel_planes(&sa.codes, &single, bits).pop().expect("one kernel"))
                    })
                    .collect();
                (pe.pe_index, kernels)
            })
            .collect();
        PreparedLayer { layout, bits, pes }
    }

    fn simulate(&self, input: &[i64], dims: [usize; 3]) -> Result<LayerSim> {
        let shape = &self.layout.shape;
        let zero_w = vec![0i64; shape.len()];
        let out_dims = check_operands(input, dims, &zero_w, shape, self.bits)?;
        let positions = out_dims[1] * out_dims[2];
        let partial: Vec<(Vec<i64>, BitConvTrace)> = self
            .pes
            .par_iter()
            .map(|(c, kernels)| {
                let mut out = vec![0i64; shape.filters * positions];
                let mut trace = BitConvTrace::default();
                if kernels.is_empty() {
                    return (out, trace);
                }
                let mut tile = input_tile(shape, self.bits);
                for oy in 0..out_dims[1] {
                    for ox in 0..out_dims[2] {
                        load_footprint(&mut tile, input, dims, shape, *c, oy, ox);
                        trace.input_writes += 1;
                        for (f, planes) in kernels {
                            let (v, t) = crate::bitserial::bitwise_dot_with(&tile, planes, TraceMode::Logical)
                                .expect("footprint and kernel lengths agree");
                            out[f * positions + oy * out_dims[2] + ox] += v;
                            trace += t;
                        }
                    }
                }
                (out, trace)
            })
            .collect();
        let mut output = vec![0i64; shape.filters * positions];
        let mut pe_traces = Vec::with_capacity(partial.len());
        for (out, t) in partial {
            for (a, b) in output.iter_mut().zip(out) {
                *a += b;
            }
            pe_traces.push(t);
        }
        Ok(LayerSim { output, out_dims, pe_traces })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSim {
    /// Integer accumulations `F x H' x W'` before rescaling and bias.
    pub output: Vec<i64>,
    pub out_dims: [usize; 3],
    /// One trace per PE, in layout order.
    pub pe_traces: Vec<BitConvTrace>,
}

impl LayerSim {
    pub fn trace(&self) -> BitConvTrace {
        self.pe_traces.iter().copied().sum()
    }
}

/// Runs layer `layer` of the layout on unsigned input codes `C x H x W`.
/// Skipped and removed sub-arrays perform no work.
pub fn simulate_layer(layout: &PimLayout, layer: usize, input: &[i64], dims: [usize; 3]) -> Result<LayerSim> {
    let l = layout
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("layout has no layer {layer}")))?;
    if !l.pes.iter().any(|p| p.is_active()) {
        warn!("layer {layer} is fully pruned; its output is zero");
    }
    PreparedLayer::new(l).simulate(input, dims)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeTrace {
    pub pe_index: usize,
    #[serde(flatten)]
    pub counts: BitConvTrace,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub pes: Vec<PeTrace>,
}

impl LayerTrace {
    pub fn total(&self) -> BitConvTrace {
        self.pes.iter().map(|p| p.counts).sum()
    }
}

/// Operation counts summed over `samples` inferences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationTrace {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mode: RemovalMode,
    pub samples: u64,
    pub layers: Vec<LayerTrace>,
}

impl SimulationTrace {
    pub fn empty(layout: &PimLayout) -> Self {
        SimulationTrace {
            format: TRACE_FORMAT.to_string(),
            seed: layout.seed,
            mode: layout.mode,
            samples: 0,
            layers: layout
                .layers
                .iter()
                .map(|l| LayerTrace {
                    layer: l.layer,
                    pes: l.pes.iter().map(|p| PeTrace { pe_index: p.pe_index, counts: Default::default() }).collect(),
                })
                .collect(),
        }
    }

    pub fn total(&self) -> BitConvTrace {
        self.layers.iter().map(|l| l.total()).sum()
    }

    /// Adds another trace of the same layout.
    pub fn merge(&mut self, other: &SimulationTrace) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::Config("cannot merge traces of different layouts".into()));
        }
        self.samples += other.samples;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (p, q) in a.pes.iter_mut().zip(&b.pes) {
                p.counts += q.counts;
            }
        }
        Ok(())
    }

    fn same_structure(&self, other: &SimulationTrace) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.layer == b.layer
                    && a.pes.len() == b.pes.len()
                    && a.pes.iter().zip(&b.pes).all(|(p, q)| p.pe_index == q.pe_index)
            })
    }

    /// True when the trace was recorded on a layout with this PE structure.
    pub fn matches(&self, layout: &PimLayout) -> bool {
        self.same_structure(&SimulationTrace::empty(layout))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: SimulationTrace = io::read_json(path, "trace file")?;
        if t.format != TRACE_FORMAT {
            return Err(Error::Config(format!("unsupported trace format {:?}", t.format)));
        }
        Ok(t)
    }
}

fn rescale(acc: i64, q: &QuantSpec) -> f64 {
    acc as f64 * (-((q.frac_bits + q.input_frac_bits) as f64)).exp2()
}

fn network_of<'a>(net: Option<&'a NetworkDef>, shapes: &[LayerShape]) -> Result<&'a NetworkDef> {
    let net = net.ok_or_else(|| Error::Config("activation and pooling are unknown without a network definition".into()))?;
    net.geometry(shapes)?;
    Ok(net)
}

/// Rescale, bias, ReLU and pooling after an integer layer.
fn finish_layer(acc: &[i64], out_dims: [usize; 3], q: &QuantSpec, biases: &[f64], relu: bool, pool: bool) -> (Vec<f64>, [usize; 3]) {
    let plane = out_dims[1] * out_dims[2];
    let mut v: Vec<f64> = acc.iter().enumerate().map(|(j, &a)| rescale(a, q) + biases[j / plane]).collect();
    if relu {
        for x in &mut v {
            *x = x.max(0.0);
        }
    }
    if pool {
        let (p, _) = max_pool2(&v, out_dims);
        (p, [out_dims[0], out_dims[1] / 2, out_dims[2] / 2])
    } else {
        (v, out_dims)
    }
}

fn flatten_for(shape: &LayerShape, dims: [usize; 3]) -> [usize; 3] {
    match shape.kind {
        LayerKind::Conv => dims,
        LayerKind::Fc => [dims.iter().product(), 1, 1],
    }
}

/// Reusable simulator with every layer's weight planes decoded up front.
pub struct Simulator<'a> {
    layout: &'a PimLayout,
    net: &'a NetworkDef,
    layers: Vec<PreparedLayer<'a>>,
}

impl<'a> Simulator<'a> {
    pub fn new(layout: &'a PimLayout) -> Result<Self> {
        layout.validate()?;
        let shapes: Vec<LayerShape> = layout.layers.iter().map(|l| l.shape).collect();
        let net = network_of(layout.network.as_ref(), &shapes)?;
        for l in &layout.layers {
            if !l.pes.iter().any(|p| p.is_active()) {
                warn!("layer {} is fully pruned; its output is zero", l.layer);
            }
        }
        Ok(Simulator { layout, net, layers: layout.layers.iter().map(PreparedLayer::new).collect() })
    }

    /// Logits of one sample plus per-layer PE traces.
    pub fn run(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<LayerSim>)> {
        if x.len() != self.net.input.iter().product::<usize>() {
            return Err(Error::Shape(format!("sample of {} values for input {:?}", x.len(), self.net.input)));
        }
        let mut current = x.to_vec();
        let mut dims = self.net.input;
        let mut sims = Vec::with_capacity(self.layers.len());
        for (prep, def) in self.layers.iter().zip(&self.net.layers) {
            let l = prep.layout;
            dims = flatten_for(&l.shape, dims);
            let codes: Vec<i64> = current.iter().map(|&v| l.quant.input_code(v)).collect();
            let sim = prep.simulate(&codes, dims)?;
            let (next, nd) = finish_layer(&sim.output, sim.out_dims, &l.quant, &l.biases, def.relu, def.pool);
            current = next;
            dims = nd;
            sims.push(sim);
        }
        Ok((current, sims))
    }

    /// Runs every sample; logits come back in dataset order and traces are
    /// summed in that order.
    pub fn run_dataset(&self, data: &Dataset) -> Result<(Vec<Vec<f64>>, SimulationTrace)> {
        if data.dims != self.net.input {
            return Err(Error::Shape(format!("dataset dims {:?} differ from network input {:?}", data.dims, self.net.input)));
        }
        let results: Vec<Result<(Vec<f64>, Vec<LayerSim>)>> =
            (0..data.len()).into_par_iter().map(|i| self.run(data.sample(i))).collect();
        let mut trace = SimulationTrace::empty(self.layout);
        let mut logits = Vec::with_capacity(data.len());
        for r in results {
            let (l, sims) = r?;
            for (lt, sim) in trace.layers.iter_mut().zip(&sims) {
                for (p, t) in lt.pes.iter_mut().zip(&sim.pe_traces) {
                    p.counts += *t;
                }
            }
            trace.samples += 1;
            logits.push(l);
        }
        Ok((logits, trace))
    }
}

/// Logits of one sample on the layout.
pub fn simulate_inference(layout: &PimLayout, x: &[f64]) -> Result<(Vec<f64>, Vec<LayerSim>)> {
    Simulator::new(layout)?.run(x)
}

/// The same integer pipeline computed directly with
/// [`crate::bitserial::bitwise_conv2d`] on the model's dense weight codes,
/// without any layout.
pub fn reference_inference(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let shapes: Vec<LayerShape> = model.layers().iter().map(|l| *l.shape()).collect();
    let net = network_of(model.network.as_ref(), &shapes)?;
    let mut current = x.to_vec();
    let mut dims = net.input;
    for (i, (layer, def)) in model.layers().iter().zip(&net.layers).enumerate() {
        let q = layer.quant.ok_or_else(|| Error::layer(i, "reference inference needs a quantized model"))?;
        let codes = layer_codes(i, layer, &q)?;
        dims = flatten_for(layer.shape(), dims);
        let input: Vec<i64> = current.iter().map(|&v| q.input_code(v)).collect();
        let (acc, _) =
            crate::bitserial::bitwise_conv2d(&input, dims, &codes, layer.shape(), OperandBits::from_spec(&q), TraceMode::Logical)?;
        let out_dims = conv_output_dims(dims, layer.shape())?;
        let (next, nd) = finish_layer(&acc, out_dims, &q, &layer.biases, def.relu, def.pool);
        current = next;
        dims = nd;
    }
    Ok(current)
}

fn is_relu(model: &Model, i: usize) -> Option<bool> {
    model.network.as_ref().map(|n| n.layers[i].relu)
}

/// Zeroes structures whose contribution is provably dead, to a fixpoint:
///
/// * a filter of layer `i` with all-zero weights whose output is always zero
///   (zero bias, or non-positive bias followed by ReLU) zeroes the matching
///   input channel(s) of layer `i + 1`;
/// * an all-zero input channel (group) of layer `i + 1` zeroes filter weights
///   and bias of layer `i`, whose output is then never read.
///
/// The network function is unchanged.
pub fn propagate_pruning(model: &Model) -> Model {
    let mut m = model.clone();
    loop {
        let mut changed = false;
        for i in 0..m.num_layers().saturating_sub(1) {
            let (f_count, next_shape) = (m.layer(i).shape().filters, *m.layer(i + 1).shape());
            let group = next_shape.channels / f_count;
            let relu = is_relu(&m, i);
            for f in 0..f_count {
                let channels = f * group..(f + 1) * group;
                let (head, tail) = m.layers_mut().split_at_mut(i + 1);
                let (cur, next) = (&mut head[i], &mut tail[0]);
                let bias = cur.biases[f];
                let dead_out = cur.weights.is_filter_zero(f) && (bias == 0.0 || (bias < 0.0 && relu == Some(true)));
                let dead_in = channels.clone().all(|c| next.weights.is_channel_zero(c));
                if dead_out && !dead_in {
                    for c in channels {
                        for g in 0..next_shape.filters {
                            next.weights.kernel_mut(g, c).fill(0.0);
                        }
                    }
                    changed = true;
                } else if dead_in && (!cur.weights.is_filter_zero(f) || bias != 0.0) {
                    for c in 0..cur.weights.shape().channels {
                        cur.weights.kernel_mut(f, c).fill(0.0);
                    }
                    cur.biases[f] = 0.0;
                    changed = true;
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// PEs present in the layout.
    pub pes: usize,
    /// PEs with at least one unskipped sub-array.
    pub active_pes: usize,
    /// Weight sub-arrays present in the layout.
    pub weight_subarrays: usize,
    /// Weight sub-arrays that are not skipped.
    pub effective_weight_subarrays: usize,
    pub weight_rows: usize,
    pub input_rows: usize,
    /// Cells of all present sub-arrays (input and weight).
    pub cells: usize,
    pub effective_cells: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub layers: Vec<LayerStats>,
    pub total: LayerStats,
}

pub fn layout_stats(layout: &PimLayout) -> LayoutStats {
    let layers: Vec<LayerStats> = layout
        .layers
        .iter()
        .map(|l| {
            let mut s = LayerStats { layer: l.layer, pes: l.pes.len(), ..Default::default() };
            for pe in &l.pes {
                let active = pe.is_active();
                s.active_pes += active as usize;
                s.input_rows += pe.input_subarray.rows;
                s.cells += pe.input_subarray.cells();
                if active {
                    s.effective_cells += pe.input_subarray.cells();
                }
                for (sa, &skip) in pe.weight_subarrays.iter().zip(&pe.skip_lut) {
                    s.weight_subarrays += 1;
                    s.weight_rows += sa.rows;
                    s.cells += sa.cells();
                    if !skip {
                        s.effective_weight_subarrays += 1;
                        s.effective_cells += sa.cells();
                    }
                }
            }
            s
        })
        .collect();
    let mut total = LayerStats { layer: layers.len(), ..Default::default() };
    for s in &layers {
        total.pes += s.pes;
        total.active_pes += s.active_pes;
        total.weight_subarrays += s.weight_subarrays;
        total.effective_weight_subarrays += s.effective_weight_subarrays;
        total.weight_rows += s.weight_rows;
        total.input_rows += s.input_rows;
        total.cells += s.cells;
        total.effective_cells += s.effective_cells;
    }
    LayoutStats { layers, total }
}
