//! The compress, map, simulate and report jobs. Each job reads its inputs,
//! writes its artifacts atomically and reports progress through an event
//! sink.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::admm::{self, AdmmSchedule, CompressEvent, DatasetObjective, RoundLog};
use crate::config::{resolve, CompressConfig, MapConfig, QuantConfig, ReportConfig, SimulateConfig, Split};
use crate::cost::{compare, estimate, CostParams, CostReport};
use crate::error::{Error, Result};
use crate::io;
use crate::mapper::{
    build_layout, layout_stats, propagate_pruning, reference_inference, LayoutStats, PimLayout, SimulationTrace,
    Simulator,
};
use crate::model::{LayerShape, Model, QuantSpec, SparsityReport};
use crate::nn::network::{argmax, forward_sample, geometry_for};
use crate::nn::train::{evaluate, train};
use crate::nn::{Dataset, NetworkDef, Precision};
use crate::quant::{quantize_project, QuantConstraint};

pub const COMPRESS_LOG_FORMAT: &str = "pimforge-compress-log/1";
pub const OUTPUTS_FORMAT: &str = "pimforge-outputs/1";

/// A progress record. `data` carries the machine-readable payload.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub stage: String,
    pub message: String,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub data: Value,
}

impl Event {
    pub fn new(stage: &str, message: impl Into<String>, data: Value) -> Self {
        Event { stage: stage.to_string(), message: message.into(), data }
    }
}

pub type Sink<'a> = &'a mut dyn FnMut(&Event);

/// Independent sub-seed `stream` of a job seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    #[serde(flatten)]
    pub log: RoundLog,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressLog {
    pub format: String,
    pub seed: u64,
    pub pretrain: Vec<EpochRecord>,
    pub dense_test_accuracy: f64,
    pub constraints: Vec<admm::LayerConstraint>,
    pub rounds: Vec<RoundRecord>,
    pub retrain_steps: usize,
    pub retrain_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<Vec<QuantSpec>>,
    /// Test accuracy of the compressed model in real arithmetic.
    pub test_accuracy: f64,
    /// Test accuracy with every layer input requantized (the hardware path).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized_test_accuracy: Option<f64>,
    pub sparsity: SparsityReport,
}

fn network_of(model: &Model) -> Result<NetworkDef> {
    model.network.clone().ok_or_else(|| Error::Model("model has no network definition".into()))
}

/// Per-layer maximum input value over `data` in real arithmetic.
pub fn max_layer_inputs(model: &Model, net: &NetworkDef, data: &Dataset) -> Result<Vec<f64>> {
    let geometry = geometry_for(model, net, data.dims)?;
    let per_sample: Vec<Result<Vec<f64>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (_, caches) = forward_sample(model, net, &geometry, data.sample(i), Precision::Real)?;
            Ok(caches.iter().map(|c| c.input.iter().fold(0.0f64, |m, &v| m.max(v))).collect())
        })
        .collect();
    let mut out = vec![0.0f64; model.num_layers()];
    for r in per_sample {
        for (o, v) in out.iter_mut().zip(r?) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Grid for every layer; missing weight fractional bits are fitted to the
/// layer's largest weight magnitude.
pub fn weight_specs(model: &Model, q: &QuantConfig) -> Result<Vec<QuantSpec>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let max_abs = l.weights.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let spec = QuantSpec {
                weight_bits: q.weight_bits,
                input_bits: q.input_bits,
                frac_bits: q.frac_bits.unwrap_or_else(|| QuantSpec::fit_frac_bits(q.weight_bits, q.signed, max_abs)),
                input_frac_bits: q.input_frac_bits.unwrap_or(0),
                signed: q.signed,
            };
            spec.validate().map_err(|m| Error::layer(i, m))?;
            Ok(spec)
        })
        .collect()
}

/// Fits each layer's input fractional bits to the largest input seen on
/// `data`.
pub fn calibrate_inputs(model: &mut Model, data: &Dataset) -> Result<()> {
    let net = network_of(model)?;
    let maxima = max_layer_inputs(model, &net, data)?;
    for (i, (layer, m)) in model.layers_mut().iter_mut().zip(maxima).enumerate() {
        let q = layer.quant.as_mut().ok_or_else(|| Error::layer(i, "calibration needs a quantized layer"))?;
        q.input_frac_bits = QuantSpec::fit_input_frac_bits(q.input_bits, m);
    }
    Ok(())
}

pub fn quantize_model(model: &mut Model, specs: &[QuantSpec]) -> Result<()> {
    for (layer, spec) in model.layers_mut().iter_mut().zip(specs) {
        layer.weights = quantize_project(&layer.weights, &QuantConstraint::new(*spec)?);
        layer.quant = Some(*spec);
    }
    model.validate()
}

pub struct CompressOutcome {
    pub model: Model,
    pub log: CompressLog,
}

/// Trains (or loads) a dense model and compresses it. Writes the model, the
/// optional dense model and the log.
pub fn run_compress(cfg: &CompressConfig, base: &Path, seed: Option<u64>, sink: Sink) -> Result<CompressOutcome> {
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let (train_set, test_set) = cfg.dataset.load(base, seed)?;
    sink(&Event::new(
        "data",
        format!("{} training / {} test samples of {:?}", train_set.len(), test_set.len(), train_set.dims),
        json!({"train": train_set.len(), "test": test_set.len()}),
    ));

    let mut pretrain = Vec::new();
    let (mut model, net) = match &cfg.model_in {
        Some(p) => {
            let m = Model::load(&resolve(base, p))?;
            let net = network_of(&m)?;
            (m, net)
        }
        None => {
            let arch = cfg
                .architecture
                .as_ref()
                .ok_or_else(|| Error::Config("either model_in or architecture is required".into()))?;
            let pt = cfg
                .pretrain
                .as_ref()
                .ok_or_else(|| Error::Config("training from scratch needs a pretrain section".into()))?;
            let (net, shapes) = arch.build()?;
            let mut m = net.init_model(&shapes, sub_seed(seed, 1))?;
            train(&mut m, &net, &train_set, pt.epochs, pt.learning_rate, pt.momentum, pt.batch_size, sub_seed(seed, 2), |s, m| {
                let test_accuracy = evaluate(m, &net, &test_set, Precision::Real)?;
                sink(&Event::new(
                    "pretrain",
                    format!(
                        "epoch {:>2}  loss {:.4}  train {:.2}%  test {:.2}%",
                        s.epoch,
                        s.loss,
                        100.0 * s.accuracy,
                        100.0 * test_accuracy
                    ),
                    json!({"epoch": s.epoch, "loss": s.loss, "train_accuracy": s.accuracy, "test_accuracy": test_accuracy}),
                ));
                pretrain.push(EpochRecord { epoch: s.epoch, loss: s.loss, train_accuracy: s.accuracy, test_accuracy });
                Ok(())
            })?;
            (m, net)
        }
    };
    if net.input != train_set.dims {
        return Err(Error::Shape(format!("model input {:?} but dataset samples are {:?}", net.input, train_set.dims)));
    }
    model.seed = Some(seed);
    let dense_acc = evaluate(&model, &net, &test_set, Precision::Real)?;
    sink(&Event::new("dense", format!("dense test accuracy {:.2}%", 100.0 * dense_acc), json!({"test_accuracy": dense_acc})));
    if let (Some(p), None) = (&cfg.dense_model_out, &cfg.model_in) {
        model.save(&resolve(base, p))?;
    }

    let shapes: Vec<LayerShape> = model.layers().iter().map(|l| *l.shape()).collect();
    let constraints = cfg.constraints.iter().map(|c| c.resolve(&shapes)).collect::<Result<Vec<_>>>()?;
    let specs = cfg.quant.as_ref().map(|q| weight_specs(&model, q)).transpose()?;
    let admm_specs = match (&cfg.quant, &specs) {
        (Some(q), Some(s)) if q.admm => Some(s.as_slice()),
        _ => None,
    };

    let s = &cfg.schedule;
    let mut objective = DatasetObjective::new(&net, &train_set, s.batch_size, sub_seed(seed, 3))?;
    let pass = objective.steps_per_epoch();
    let sched = AdmmSchedule {
        admm_rounds: s.admm_rounds,
        sgd_steps_per_round: s.sgd_steps_per_round.unwrap_or(pass),
        rho_initial: s.rho_initial,
        rho_growth: s.rho_growth,
        learning_rate: s.learning_rate,
        lr_decay: s.lr_decay,
        momentum: s.momentum,
        retrain_steps: s.retrain_epochs * pass,
        seed,
    };
    let mut rounds = Vec::new();
    let mut retrain = (0, 0.0);
    let mut observer_err = None;
    let mut compressed = admm::compress(&model, &constraints, admm_specs, &mut objective, &sched, &mut |e, m| match e {
        CompressEvent::Round(log) => {
            let acc = match evaluate(m, &net, &test_set, Precision::Real) {
                Ok(a) => a,
                Err(err) => {
                    observer_err.get_or_insert(err);
                    f64::NAN
                }
            };
            let worst = log.residuals.iter().fold(0.0f64, |a, r| a.max(r.value));
            sink(&Event::new(
                "admm",
                format!(
                    "round {:>2}  loss {:.4}  rho {:.3e}  max |W-Z| {:.3e}  test {:.2}%",
                    log.round,
                    log.loss,
                    log.rho,
                    worst,
                    100.0 * acc
                ),
                json!({"round": log.round, "loss": log.loss, "rho": log.rho, "max_residual": worst, "test_accuracy": acc}),
            ));
            rounds.push(RoundRecord { log: log.clone(), test_accuracy: acc });
        }
        CompressEvent::Retrained { steps, loss } => {
            retrain = (*steps, *loss);
            sink(&Event::new(
                "retrain",
                format!("masked retraining: {steps} steps, mean loss {loss:.4}"),
                json!({"steps": steps, "loss": loss}),
            ));
        }
        CompressEvent::Quantized => {}
    })?;
    if let Some(e) = observer_err {
        return Err(e);
    }
    if let (Some(q), Some(specs)) = (&cfg.quant, &specs) {
        if !q.admm {
            quantize_model(&mut compressed, specs)?;
        }
        if q.input_frac_bits.is_none() {
            calibrate_inputs(&mut compressed, &train_set.head(cfg.calibration_samples.max(1)))?;
        }
    }
    compressed.seed = Some(seed);

    let test_accuracy = evaluate(&compressed, &net, &test_set, Precision::Real)?;
    let quantized_test_accuracy = if compressed.is_quantized() {
        Some(evaluate(&compressed, &net, &test_set, Precision::Quantized)?)
    } else {
        None
    };
    let sparsity = compressed.sparsity_report();
    sink(&Event::new(
        "result",
        format!(
            "{sparsity}\ntest accuracy {:.2}% (dense {:.2}%){}",
            100.0 * test_accuracy,
            100.0 * dense_acc,
            quantized_test_accuracy.map(|a| format!(", quantized inputs {:.2}%", 100.0 * a)).unwrap_or_default()
        ),
        json!({
            "conv_compression_rate": sparsity.conv_compression_rate,
            "test_accuracy": test_accuracy,
            "quantized_test_accuracy": quantized_test_accuracy,
            "dense_test_accuracy": dense_acc,
        }),
    ));

    compressed.save(&resolve(base, &cfg.model_out))?;
    let log = CompressLog {
        format: COMPRESS_LOG_FORMAT.to_string(),
        seed,
        pretrain,
        dense_test_accuracy: dense_acc,
        constraints,
        rounds,
        retrain_steps: retrain.0,
        retrain_loss: retrain.1,
        quant: compressed.is_quantized().then(|| compressed.layers().iter().filter_map(|l| l.quant).collect()),
        test_accuracy,
        quantized_test_accuracy,
        sparsity,
    };
    io::write_json(&resolve(base, &cfg.log_out), &log)?;
    Ok(CompressOutcome { model: compressed, log })
}

/// Places a quantized model onto PEs and writes the layout.
pub fn run_map(cfg: &MapConfig, base: &Path, seed: Option<u64>, sink: Sink) -> Result<(PimLayout, LayoutStats)> {
    let mut model = Model::load(&resolve(base, &cfg.model))?;
    if cfg.propagate {
        let before = model.sparsity_report();
        model = propagate_pruning(&model);
        let after = model.sparsity_report();
        if after != before {
            sink(&Event::new(
                "propagate",
                format!(
                    "dead-structure propagation: CONV compression {:.2}x -> {:.2}x",
                    before.conv_compression_rate, after.conv_compression_rate
                ),
                json!({"before": before.conv_compression_rate, "after": after.conv_compression_rate}),
            ));
        }
    }
    let mut layout = build_layout(&model, cfg.quant, cfg.mode)?;
    layout.seed = seed.or(model.seed);
    let stats = layout_stats(&layout);
    let mut table = String::from("layer   PEs (active)   weight sub-arrays (effective)   cells");
    for s in &stats.layers {
        table.push_str(&format!(
            "\n{:>5}   {:>4} ({:>4})   {:>8} ({:>8})   {:>10}",
            s.layer, s.pes, s.active_pes, s.weight_subarrays, s.effective_weight_subarrays, s.cells
        ));
    }
    sink(&Event::new("map", table, serde_json::to_value(&stats).unwrap_or(Value::Null)));
    layout.save(&resolve(base, &cfg.layout_out))?;
    Ok((layout, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutputs {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub samples: usize,
    pub accuracy: f64,
    /// Samples whose logits differ from the layout-free integer path.
    pub reference_mismatches: usize,
    pub predictions: Vec<usize>,
}

/// Runs inference on the layout, cross-checks every sample against the
/// reference integer path and writes the trace (and optionally the
/// predictions). Any mismatch is an error.
pub fn run_simulate(cfg: &SimulateConfig, base: &Path, seed: Option<u64>, sink: Sink) -> Result<(SimulationOutputs, SimulationTrace)> {
    let layout = PimLayout::load(&resolve(base, &cfg.layout))?;
    let seed = seed.or(layout.seed);
    let (train_set, test_set) = cfg.dataset.load(base, seed.unwrap_or(0))?;
    let data = match cfg.split {
        Split::Train => train_set,
        Split::Test => test_set,
    };
    let data = match cfg.limit {
        Some(n) => data.head(n),
        None => data,
    };
    if data.is_empty() {
        return Err(Error::Dataset("nothing to simulate".into()));
    }
    let sim = Simulator::new(&layout)?;
    let (logits, mut trace) = sim.run_dataset(&data)?;
    trace.seed = seed;

    let model = layout.to_model()?;
    let mismatches: usize = (0..data.len())
        .into_par_iter()
        .map(|i| reference_inference(&model, data.sample(i)).map(|r| (r != logits[i]) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let predictions: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let outputs = SimulationOutputs {
        format: OUTPUTS_FORMAT.to_string(),
        seed,
        samples: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        reference_mismatches: mismatches,
        predictions,
    };
    let total = trace.total();
    sink(&Event::new(
        "simulate",
        format!(
            "{} samples  accuracy {:.2}%  reference mismatches {}\nper inference: {} row-pair ANDs, {} input writes",
            outputs.samples,
            100.0 * outputs.accuracy,
            mismatches,
            total.and_row_ops / trace.samples,
            total.input_writes / trace.samples
        ),
        json!({"samples": outputs.samples, "accuracy": outputs.accuracy, "reference_mismatches": mismatches, "trace": total}),
    ));
    if mismatches > 0 {
        return Err(Error::Model(format!(
            "{mismatches} of {} samples differ between the layout and the reference integer path",
            data.len()
        )));
    }
    trace.save(&resolve(base, &cfg.trace_out))?;
    if let Some(p) = &cfg.outputs_out {
        io::write_json(&resolve(base, p), &outputs)?;
    }
    Ok((outputs, trace))
}

/// Estimates cost from a layout and its trace; `compare_with` overrides the
/// config's baseline report.
pub fn run_report(cfg: &ReportConfig, base: &Path, compare_with: Option<&Path>, sink: Sink) -> Result<CostReport> {
    let layout = PimLayout::load(&resolve(base, &cfg.layout))?;
    let trace = SimulationTrace::load(&resolve(base, &cfg.trace))?;
    let params = match &cfg.cost_params {
        Some(p) => CostParams::load(&resolve(base, p))?,
        None => CostParams::default(),
    };
    let mut report = estimate(&layout, &trace, &params)?;
    let baseline: Option<PathBuf> = compare_with.map(Path::to_path_buf).or_else(|| cfg.baseline.as_ref().map(|p| resolve(base, p)));
    if let Some(b) = baseline {
        let base_report = CostReport::load(&b)?;
        report.comparison = Some(compare(&report, &base_report)?);
    }
    sink(&Event::new("report", report.to_string(), serde_json::to_value(&report).unwrap_or(Value::Null)));
    report.save(&resolve(base, &cfg.report_out))?;
    if let Some(p) = &cfg.csv_out {
        io::write_atomic(&resolve(base, p), report.to_csv().as_bytes())?;
    }
    Ok(report)
}
