//! Network, layer and weight representation plus the versioned JSON model
//! format shared by every other module.
//!
//! FC layers are stored as CONV tensors with a 1x1 kernel, so projection,
//! quantization and mapping code never needs a second code path.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::NetworkDef;

pub const MODEL_FORMAT: &str = "pimforge-model/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub filters: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl LayerShape {
    pub fn conv(filters: usize, channels: usize, kernel_h: usize, kernel_w: usize, stride: usize) -> Self {
        LayerShape { kind: LayerKind::Conv, filters, channels, kernel_h, kernel_w, stride }
    }

    pub fn fc(outputs: usize, inputs: usize) -> Self {
        LayerShape { kind: LayerKind::Fc, filters: outputs, channels: inputs, kernel_h: 1, kernel_w: 1, stride: 1 }
    }

    /// Elements in one (filter, channel) kernel.
    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn filter_len(&self) -> usize {
        self.channels * self.kernel_len()
    }

    pub fn len(&self) -> usize {
        self.filters * self.filter_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.filters == 0 || self.channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(format!(
                "all dimensions must be positive, got F={} C={} H={} W={}",
                self.filters, self.channels, self.kernel_h, self.kernel_w
            ));
        }
        if self.stride == 0 {
            return Err("stride must be at least 1".into());
        }
        if self.kind == LayerKind::Fc && (self.kernel_h != 1 || self.kernel_w != 1 || self.stride != 1) {
            return Err("FC layers must have a 1x1 kernel and stride 1".into());
        }
        Ok(())
    }
}

/// Dense row-major `F x C x H x W` weight tensor. Values are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor4D {
    shape: LayerShape,
    values: Vec<f64>,
}

impl WeightTensor4D {
    pub fn new(shape: LayerShape, values: Vec<f64>) -> std::result::Result<Self, String> {
        shape.validate()?;
        if values.len() != shape.len() {
            return Err(format!(
                "expected {} weight values for shape {}x{}x{}x{}, found {}",
                shape.len(),
                shape.filters,
                shape.channels,
                shape.kernel_h,
                shape.kernel_w,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("weight {i} is not finite ({})", values[i]));
        }
        Ok(WeightTensor4D { shape, values })
    }

    pub fn zeros(shape: LayerShape) -> Self {
        WeightTensor4D { shape, values: vec![0.0; shape.len()] }
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the raw values. Callers must keep them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn index(&self, f: usize, c: usize, h: usize, w: usize) -> usize {
        ((f * self.shape.channels + c) * self.shape.kernel_h + h) * self.shape.kernel_w + w
    }

    pub fn get(&self, f: usize, c: usize, h: usize, w: usize) -> f64 {
        self.values[self.index(f, c, h, w)]
    }

    pub fn kernel(&self, f: usize, c: usize) -> &[f64] {
        let k = self.shape.kernel_len();
        let start = (f * self.shape.channels + c) * k;
        &self.values[start..start + k]
    }

    pub fn kernel_mut(&mut self, f: usize, c: usize) -> &mut [f64] {
        let k = self.shape.kernel_len();
        let start = (f * self.shape.channels + c) * k;
        &mut self.values[start..start + k]
    }

    pub fn filter(&self, f: usize) -> &[f64] {
        let n = self.shape.filter_len();
        &self.values[f * n..(f + 1) * n]
    }

    pub fn is_kernel_zero(&self, f: usize, c: usize) -> bool {
        self.kernel(f, c).iter().all(|&v| v == 0.0)
    }

    pub fn is_filter_zero(&self, f: usize) -> bool {
        self.filter(f).iter().all(|&v| v == 0.0)
    }

    pub fn is_channel_zero(&self, c: usize) -> bool {
        (0..self.shape.filters).all(|f| self.is_kernel_zero(f, c))
    }

    pub fn nonzero_filters(&self) -> usize {
        (0..self.shape.filters).filter(|&f| !self.is_filter_zero(f)).count()
    }

    pub fn nonzero_channels(&self) -> usize {
        (0..self.shape.channels).filter(|&c| !self.is_channel_zero(c)).count()
    }

    pub fn nonzero_kernels(&self) -> usize {
        let s = self.shape;
        (0..s.filters)
            .flat_map(|f| (0..s.channels).map(move |c| (f, c)))
            .filter(|&(f, c)| !self.is_kernel_zero(f, c))
            .count()
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Fixed-point format of one layer: signed sign-magnitude weights with step
/// `2^-frac_bits`, unsigned inputs with step `2^-input_frac_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub input_bits: u32,
    pub frac_bits: u32,
    pub input_frac_bits: u32,
    pub signed: bool,
}

impl QuantSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=16).contains(&self.weight_bits) || !(1..=16).contains(&self.input_bits) {
            return Err(format!(
                "bit widths must be in [1, 16], got weight_bits={} input_bits={}",
                self.weight_bits, self.input_bits
            ));
        }
        if self.frac_bits >= self.weight_bits {
            return Err(format!(
                "frac_bits ({}) must be smaller than weight_bits ({})",
                self.frac_bits, self.weight_bits
            ));
        }
        if self.signed && self.weight_bits < 2 {
            return Err("signed weights need at least 2 bits (sign + magnitude)".into());
        }
        if self.input_frac_bits > 16 {
            return Err(format!("input_frac_bits ({}) exceeds 16", self.input_frac_bits));
        }
        Ok(())
    }

    /// Number of magnitude bit planes used for weights (the sign occupies one
    /// of `weight_bits` when signed).
    pub fn weight_magnitude_bits(&self) -> u32 {
        if self.signed {
            self.weight_bits - 1
        } else {
            self.weight_bits
        }
    }

    pub fn max_weight_code(&self) -> i64 {
        (1i64 << self.weight_magnitude_bits()) - 1
    }

    pub fn weight_step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_input_code(&self) -> i64 {
        (1i64 << self.input_bits) - 1
    }

    pub fn input_step(&self) -> f64 {
        (-(self.input_frac_bits as f64)).exp2()
    }

    /// Nearest weight level code; ties round away from zero, out-of-range
    /// magnitudes saturate.
    pub fn weight_code(&self, w: f64) -> i64 {
        let k = (w.abs() / self.weight_step()).round();
        let k = (k as i64).min(self.max_weight_code());
        if self.signed && w < 0.0 {
            -k
        } else if !self.signed && w < 0.0 {
            0
        } else {
            k
        }
    }

    pub fn weight_value(&self, code: i64) -> f64 {
        code as f64 * self.weight_step()
    }

    /// Unsigned input code: clamp to `[0, max_input_code]`, round to nearest,
    /// ties away from zero.
    pub fn input_code(&self, x: f64) -> i64 {
        if x <= 0.0 || x.is_nan() {
            return 0;
        }
        ((x / self.input_step()).round() as i64).min(self.max_input_code())
    }

    pub fn input_value(&self, code: i64) -> f64 {
        code as f64 * self.input_step()
    }

    pub fn quantize_input(&self, x: f64) -> f64 {
        self.input_value(self.input_code(x))
    }

    /// Largest `frac_bits` (capped at `weight_bits - 1`) whose grid still
    /// covers `max_abs`.
    pub fn fit_frac_bits(weight_bits: u32, signed: bool, max_abs: f64) -> u32 {
        let mag = if signed { weight_bits - 1 } else { weight_bits };
        let max_code = ((1u64 << mag) - 1) as f64;
        let mut frac = weight_bits - 1;
        while frac > 0 && max_abs > max_code * (-(frac as f64)).exp2() {
            frac -= 1;
        }
        frac
    }

    /// Same rule as [`QuantSpec::fit_frac_bits`] for unsigned inputs; allowed
    /// to reach 16 fractional bits.
    pub fn fit_input_frac_bits(input_bits: u32, max_value: f64) -> u32 {
        let max_code = ((1u64 << input_bits) - 1) as f64;
        let mut frac = 16;
        while frac > 0 && max_value > max_code * (-(frac as f64)).exp2() {
            frac -= 1;
        }
        frac
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: WeightTensor4D,
    pub biases: Vec<f64>,
    pub quant: Option<QuantSpec>,
}

impl LayerParams {
    pub fn new(weights: WeightTensor4D, biases: Vec<f64>) -> Self {
        LayerParams { weights, biases, quant: None }
    }

    pub fn shape(&self) -> &LayerShape {
        self.weights.shape()
    }
}

/// An N-layer network whose first M layers are CONV and the rest FC.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<LayerParams>,
    num_conv_layers: usize,
    pub network: Option<NetworkDef>,
    /// Seed of the job that produced this model, if any.
    pub seed: Option<u64>,
}

impl Model {
    pub fn new(layers: Vec<LayerParams>, network: Option<NetworkDef>) -> Result<Self> {
        let num_conv_layers = layers.iter().take_while(|l| l.shape().kind == LayerKind::Conv).count();
        let model = Model { layers, num_conv_layers, network, seed: None };
        model.validate()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Mutable access to layer parameters. Shapes must not be changed;
    /// [`Model::validate`] re-checks everything.
    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_conv_layers(&self) -> usize {
        self.num_conv_layers
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().all(|l| l.quant.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Model("a model needs at least one layer".into()));
        }
        if self.num_conv_layers == 0 {
            return Err(Error::Model("the first layer must be a CONV layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = layer.shape();
            shape.validate().map_err(|m| Error::layer(i, m))?;
            if i >= self.num_conv_layers && shape.kind == LayerKind::Conv {
                return Err(Error::layer(i, "CONV layer after an FC layer"));
            }
            if layer.biases.len() != shape.filters {
                return Err(Error::layer(
                    i,
                    format!("bias length {} does not match filter count {}", layer.biases.len(), shape.filters),
                ));
            }
            if let Some(j) = layer.biases.iter().position(|b| !b.is_finite()) {
                return Err(Error::layer(i, format!("bias {j} is not finite")));
            }
            if let Some(j) = layer.weights.values().iter().position(|w| !w.is_finite()) {
                return Err(Error::layer(i, format!("weight {j} is not finite")));
            }
            if let Some(q) = &layer.quant {
                q.validate().map_err(|m| Error::layer(i, m))?;
            }
            if i > 0 {
                let prev = self.layers[i - 1].shape();
                let flatten = prev.kind == LayerKind::Conv && shape.kind == LayerKind::Fc;
                let ok = if flatten {
                    shape.channels % prev.filters == 0
                } else {
                    shape.channels == prev.filters
                };
                if !ok {
                    return Err(Error::layer(
                        i,
                        format!(
                            "input channels {} incompatible with previous layer's {} filters",
                            shape.channels, prev.filters
                        ),
                    ));
                }
            }
        }
        if let Some(net) = &self.network {
            net.check_model(self)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = io::read_json(path, "model file")?;
        file.into_model()
    }

    /// Writes the model atomically. Rejects invalid models (e.g. NaN weights)
    /// before touching the file system.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        io::write_json(path, &ModelFile::from_model(self))
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(&ModelFile::from_model(self))
            .map_err(|source| Error::Parse { what: "model".into(), source })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(s).map_err(|source| Error::Parse { what: "model".into(), source })?;
        file.into_model()
    }

    pub fn sparsity_report(&self) -> SparsityReport {
        let layers: Vec<LayerSparsity> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSparsity {
                layer: i,
                kind: l.shape().kind,
                filters: l.shape().filters,
                channels: l.shape().channels,
                nonzero_filters: l.weights.nonzero_filters(),
                nonzero_channels: l.weights.nonzero_channels(),
                nonzero_kernels: l.weights.nonzero_kernels(),
                nonzero_weights: l.weights.nonzero_count(),
                total_weights: l.shape().len(),
            })
            .collect();
        let conv = &layers[..self.num_conv_layers];
        let dense: usize = conv.iter().map(|l| l.total_weights).sum();
        let nonzero: usize = conv.iter().map(|l| l.nonzero_weights).sum();
        let conv_compression_rate = if nonzero == 0 { f64::INFINITY } else { dense as f64 / nonzero as f64 };
        SparsityReport { layers, conv_compression_rate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub kind: LayerKind,
    pub filters: usize,
    pub channels: usize,
    pub nonzero_filters: usize,
    pub nonzero_channels: usize,
    pub nonzero_kernels: usize,
    pub nonzero_weights: usize,
    pub total_weights: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    /// Dense CONV weight count over nonzero CONV weight count.
    pub conv_compression_rate: f64,
}

impl SparsityReport {
    /// Compression rate rounded to one decimal place, as reported.
    pub fn rounded_rate(&self) -> f64 {
        (self.conv_compression_rate * 10.0).round() / 10.0
    }
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer  kind  filters      channels     kernels        weights")?;
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::Fc => "fc",
            };
            writeln!(
                f,
                "{:>5}  {:<4}  {:>4}/{:<6}  {:>4}/{:<6}  {:>5}/{:<6}  {:>6}/{:<6}",
                l.layer,
                kind,
                l.nonzero_filters,
                l.filters,
                l.nonzero_channels,
                l.channels,
                l.nonzero_kernels,
                l.filters * l.channels,
                l.nonzero_weights,
                l.total_weights
            )?;
        }
        write!(f, "CONV compression rate: {:.1}x", self.conv_compression_rate)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    num_layers: usize,
    num_conv_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    network: Option<NetworkDef>,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    #[serde(flatten)]
    shape: LayerShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantSpec>,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl ModelFile {
    fn from_model(m: &Model) -> Self {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            seed: m.seed,
            num_layers: m.num_layers(),
            num_conv_layers: m.num_conv_layers,
            network: m.network.clone(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerRecord {
                    shape: *l.shape(),
                    quant: l.quant,
                    weights: l.weights.values().to_vec(),
                    biases: l.biases.clone(),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<Model> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unsupported format {:?}, expected {MODEL_FORMAT:?}", self.format)));
        }
        if self.num_layers != self.layers.len() {
            return Err(Error::Model(format!(
                "header declares {} layers but {} are present",
                self.num_layers,
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, rec) in self.layers.into_iter().enumerate() {
            let weights = WeightTensor4D::new(rec.shape, rec.weights).map_err(|m| Error::layer(i, m))?;
            layers.push(LayerParams { weights, biases: rec.biases, quant: rec.quant });
        }
        let mut model = Model::new(layers, self.network)?;
        if model.num_conv_layers != self.num_conv_layers {
            return Err(Error::Model(format!(
                "header declares {} CONV layers but {} leading CONV layers are present",
                self.num_conv_layers, model.num_conv_layers
            )));
        }
        model.seed = self.seed;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let w = WeightTensor4D::new(LayerShape::conv(1, 1, 1, 1, 1), vec![0.5]).unwrap();
        Model::new(vec![LayerParams::new(w, vec![0.0])], None).unwrap()
    }

    fn two_layer() -> Model {
        let c = LayerShape::conv(2, 1, 2, 2, 1);
        let w0 = WeightTensor4D::new(c, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let f = LayerShape::fc(3, 8);
        let w1 = WeightTensor4D::new(f, (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        Model::new(vec![LayerParams::new(w0, vec![0.1, -0.2]), LayerParams::new(w1, vec![0.0; 3])], None).unwrap()
    }

    #[test]
    fn minimal_model_counts() {
        let m = tiny();
        assert_eq!(m.num_layers(), 1);
        assert_eq!(m.num_conv_layers(), 1);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = two_layer();
        m.layers_mut()[0].weights.values_mut()[3] = 0.1 + 0.2; // not a short decimal
        m.layers_mut()[1].quant =
            Some(QuantSpec { weight_bits: 8, input_bits: 8, frac_bits: 6, input_frac_bits: 4, signed: true });
        m.seed = Some(7);
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        let m = two_layer();
        m.save(&a).unwrap();
        m.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(Model::load(&a).unwrap(), m);
    }

    #[test]
    fn nan_weight_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = tiny();
        m.layers_mut()[0].weights.values_mut()[0] = f64::NAN;
        assert!(m.save(&path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn bias_length_mismatch_names_layer() {
        let m = two_layer();
        let mut json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        json["layers"][1]["biases"] = serde_json::json!([0.0, 0.0]);
        let err = Model::from_json(&json.to_string()).unwrap_err();
        match err {
            Error::Layer { layer, msg } => {
                assert_eq!(layer, 1);
                assert!(msg.contains("bias length"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_file_is_parse_error() {
        assert!(matches!(Model::from_json("{\"format\": 3"), Err(Error::Parse { .. })));
    }

    #[test]
    fn incompatible_channels_rejected() {
        let w0 = WeightTensor4D::zeros(LayerShape::conv(3, 1, 1, 1, 1));
        let w1 = WeightTensor4D::zeros(LayerShape::conv(2, 4, 1, 1, 1));
        let err = Model::new(vec![LayerParams::new(w0, vec![0.0; 3]), LayerParams::new(w1, vec![0.0; 2])], None)
            .unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 1, .. }));
    }

    #[test]
    fn compression_rate_definition() {
        let mut m = two_layer();
        m.layers_mut()[0].weights.values_mut().fill(1.0);
        assert_eq!(m.sparsity_report().conv_compression_rate, 1.0);
        for v in m.layers_mut()[0].weights.values_mut()[..4].iter_mut() {
            *v = 0.0;
        }
        let r = m.sparsity_report();
        assert_eq!(r.conv_compression_rate, 2.0);
        assert_eq!(r.layers[0].nonzero_filters, 1);
        assert_eq!(r.layers[0].nonzero_kernels, 1);
        assert_eq!(r.rounded_rate(), 2.0);
    }

    #[test]
    fn quant_codes_round_half_away() {
        let q = QuantSpec { weight_bits: 4, input_bits: 4, frac_bits: 1, input_frac_bits: 1, signed: true };
        assert_eq!(q.weight_code(0.25), 1);
        assert_eq!(q.weight_code(-0.25), -1);
        assert_eq!(q.weight_code(0.3), 1);
        assert_eq!(q.weight_code(100.0), 7);
        assert_eq!(q.input_code(-1.0), 0);
        assert_eq!(q.input_code(100.0), 15);
        assert!(q.validate().is_ok());
        let bad = QuantSpec { frac_bits: 4, ..q };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_frac_bits_covers_range() {
        assert_eq!(QuantSpec::fit_frac_bits(8, true, 0.9), 7);
        assert_eq!(QuantSpec::fit_frac_bits(8, true, 1.5), 6);
        assert_eq!(QuantSpec::fit_frac_bits(8, true, 1000.0), 0);
        assert_eq!(QuantSpec::fit_input_frac_bits(8, 1.0), 7);
    }
}
