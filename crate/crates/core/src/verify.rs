//! Oracle suites run by the `verify` command: direct integer convolution for
//! the bit-serial engine, exhaustive subset search for the projections,
//! central differences for the gradients, and the layout-free integer path
//! for a mapped model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::admm::{augmented_loss_gradient, AdmmState, LayerConstraint};
use crate::bitserial::{bitwise_conv2d, bitwise_dot, decompose, OperandBits, TraceMode};
use crate::config::{resolve, VerifyConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::mapper::{build_layout, reference_inference, PimLayout, RemovalMode, Simulator};
use crate::model::{LayerShape, Model, WeightTensor4D};
use crate::nn::network::{forward_sample, geometry_for, softmax_cross_entropy, ConvSpec, NetworkDef, Precision, TrainingBatch};
use crate::pipeline::{sub_seed, Event, Sink};
use crate::sparsity::{self, GroupKind, SparsityConstraint};

pub const VERIFY_FORMAT: &str = "pimforge-verify/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error in the suite's own metric.
    pub max_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        SuiteResult { name: name.to_string(), cases: 0, failures: 0, max_error: 0.0, first_failure: None }
    }

    fn record(&mut self, ok: bool, error: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        self.max_error = self.max_error.max(error);
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub format: String,
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

/// Textbook integer cross-correlation.
pub fn direct_conv2d(input: &[i64], dims: [usize; 3], w: &[i64], s: &LayerShape) -> Vec<i64> {
    let oh = (dims[1] - s.kernel_h) / s.stride + 1;
    let ow = (dims[2] - s.kernel_w) / s.stride + 1;
    let mut out = vec![0i64; s.filters * oh * ow];
    for f in 0..s.filters {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0i64;
                for c in 0..s.channels {
                    for ky in 0..s.kernel_h {
                        for kx in 0..s.kernel_w {
                            let xi = input[(c * dims[1] + y * s.stride + ky) * dims[2] + x * s.stride + kx];
                            let wi = w[((f * s.channels + c) * s.kernel_h + ky) * s.kernel_w + kx];
                            acc += xi * wi;
                        }
                    }
                }
                out[(f * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// Random instances with inputs up to 2x8x8, up to 4 filters of up to 3x3,
/// bit widths 1-8 and signed weights.
pub fn verify_bitserial(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SuiteResult::new("bit-serial convolution vs direct integer convolution");
    for _ in 0..cases {
        let (f, c) = (rng.random_range(1..=4), rng.random_range(1..=2));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let stride = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(kh..=8), rng.random_range(kw..=8));
        let bits = OperandBits { input: rng.random_range(1..=8), weight: rng.random_range(1..=8), signed_weights: true };
        let shape = LayerShape::conv(f, c, kh, kw, stride);
        let (imax, wmax) = ((1i64 << bits.input) - 1, (1i64 << bits.weight) - 1);
        let x: Vec<i64> = (0..c * h * w).map(|_| rng.random_range(0..=imax)).collect();
        let wt: Vec<i64> = (0..shape.len()).map(|_| rng.random_range(-wmax..=wmax)).collect();
        let expect = direct_conv2d(&x, [c, h, w], &wt, &shape);
        let got = bitwise_conv2d(&x, [c, h, w], &wt, &shape, bits, TraceMode::Logical);
        let ok = matches!(&got, Ok((o, _)) if *o == expect);
        suite.record(ok, if ok { 0.0 } else { 1.0 }, || format!("{shape:?} {bits:?} input {x:?} weights {wt:?}"));
    }
    suite
}

/// Every 2-bit unsigned input vector against every 2-bit-magnitude signed
/// weight vector, lengths 1 to 4.
pub fn verify_exhaustive_dot() -> SuiteResult {
    let mut suite = SuiteResult::new("exhaustive 2-bit dot products");
    for len in 1..=4u32 {
        for a in 0..4u32.pow(len) {
            let x: Vec<i64> = (0..len).map(|k| ((a >> (2 * k)) & 3) as i64).collect();
            let xp = decompose(&x, 2, false).expect("in range");
            for b in 0..7u32.pow(len) {
                let w: Vec<i64> = (0..len).map(|k| (b / 7u32.pow(k) % 7) as i64 - 3).collect();
                let expect: i64 = x.iter().zip(&w).map(|(p, q)| p * q).sum();
                let got = bitwise_dot(&xp, &decompose(&w, 2, true).expect("in range")).map(|r| r.0);
                let ok = got.as_ref().is_ok_and(|&v| v == expect);
                suite.record(ok, if ok { 0.0 } else { 1.0 }, || format!("{x:?} . {w:?} gave {got:?}, expected {expect}"));
            }
        }
    }
    suite
}

fn group_norms(w: &WeightTensor4D, kind: GroupKind) -> Vec<f64> {
    let s = *w.shape();
    match kind {
        GroupKind::Filter => (0..s.filters).map(|f| w.filter(f).iter().map(|v| v * v).sum()).collect(),
        GroupKind::Channel => (0..s.channels)
            .map(|c| (0..s.filters).flat_map(|f| w.kernel(f, c).iter()).map(|v| v * v).sum())
            .collect(),
        GroupKind::Kernel => (0..s.filters)
            .flat_map(|f| (0..s.channels).map(move |c| (f, c)))
            .map(|(f, c)| w.kernel(f, c).iter().map(|v| v * v).sum())
            .collect(),
    }
}

/// Smallest squared distance to the constraint set: the cheapest set of
/// groups to drop. Exhaustive over subsets up to 16 groups, exact dynamic
/// programming over "keep at most k" beyond that.
pub fn best_projection_distance(w: &WeightTensor4D, kind: GroupKind, budget: usize) -> f64 {
    let norms = group_norms(w, kind);
    let n = norms.len();
    let total: f64 = norms.iter().sum();
    let best_kept = if n <= 16 {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize <= budget)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| norms[i]).sum::<f64>())
            .fold(0.0f64, f64::max)
    } else {
        // dp[j] = best total norm of at most j kept groups among those seen
        let mut dp = vec![0.0f64; budget + 1];
        for &s in &norms {
            for j in (1..=budget).rev() {
                dp[j] = dp[j].max(dp[j - 1] + s);
            }
        }
        dp[budget]
    };
    (total - best_kept).max(0.0)
}

/// Random tensors with up to 8 filters and channels and kernels up to 2x2,
/// every kind and budget.
pub fn verify_projection(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SuiteResult::new("projection vs exhaustive best");
    for _ in 0..cases {
        let (f, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (h, wd) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let shape = LayerShape::conv(f, c, h, wd, 1);
        let values: Vec<f64> = (0..shape.len())
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-2.0..2.0) })
            .collect();
        let w = WeightTensor4D::new(shape, values).expect("finite");
        for kind in GroupKind::ALL {
            for budget in 1..=kind.group_count(&shape) {
                let con = SparsityConstraint::new(kind, budget).expect("positive budget");
                let p = sparsity::project(&w, &con).expect("valid budget");
                let dist: f64 = w.values().iter().zip(p.values()).map(|(a, b)| (a - b) * (a - b)).sum();
                let best = best_projection_distance(&w, kind, budget);
                let feasible = sparsity::is_feasible(&p, &con).unwrap_or(false);
                let idempotent = sparsity::project(&p, &con).is_ok_and(|q| q == p);
                let gap = dist - best;
                suite.record(gap <= 1e-9 && feasible && idempotent, gap.max(0.0), || {
                    format!("{shape:?} {kind:?} budget {budget}: distance {dist} vs best {best}, feasible {feasible}, idempotent {idempotent}")
                });
            }
        }
    }
    suite
}

/// Loss, ReLU sign pattern and pooling choices of a real-precision forward
/// pass over `batch`.
fn loss_and_pattern(model: &Model, net: &NetworkDef, batch: &TrainingBatch) -> Result<(f64, Vec<bool>, Vec<usize>)> {
    let geometry = geometry_for(model, net, batch.dims)?;
    let mut loss = 0.0;
    let (mut signs, mut args) = (Vec::new(), Vec::new());
    for i in 0..batch.len() {
        let (logits, caches) = forward_sample(model, net, &geometry, batch.sample(i), Precision::Real)?;
        loss += softmax_cross_entropy(&logits, batch.labels[i]).0;
        for (c, def) in caches.iter().zip(&net.layers) {
            if def.relu {
                signs.extend(c.pre.iter().map(|&p| p > 0.0));
            }
            args.extend_from_slice(&c.pool_argmax);
        }
    }
    Ok((loss / batch.len() as f64, signs, args))
}

fn penalty(model: &Model, state: &AdmmState) -> f64 {
    state
        .slots
        .iter()
        .map(|s| {
            let w = model.layer(s.layer).weights.values();
            let sq: f64 = (0..w.len()).map(|j| (w[j] - s.z.values()[j] + s.u.values()[j]).powi(2)).sum();
            0.5 * s.rho * sq
        })
        .sum()
}

/// Relative gradient error with an absolute floor of 1e-6 on the scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub struct GradientCase {
    pub model: Model,
    pub net: NetworkDef,
    pub batch: TrainingBatch,
    pub state: AdmmState,
}

/// Random 2-CONV + 1-FC network, two samples, and ADMM variables with random
/// `Z`, `U` and `rho` on both CONV layers.
pub fn random_gradient_case(rng: &mut ChaCha8Rng) -> Result<GradientCase> {
    let convs = [
        ConvSpec { filters: rng.random_range(2..=3), kernel: 3, stride: 1, pool: true },
        ConvSpec { filters: rng.random_range(2..=3), kernel: 2, stride: 1, pool: false },
    ];
    let (net, shapes) = NetworkDef::build([1, 8, 8], &convs, &[], 3)?;
    let mut model = net.init_model(&shapes, rng.random())?;
    for l in model.layers_mut() {
        for b in &mut l.biases {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let inputs: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = TrainingBatch::new([1, 8, 8], inputs, vec![rng.random_range(0..3), rng.random_range(0..3)])?;
    let constraints = [
        LayerConstraint { layer: 0, constraint: SparsityConstraint::filter(1)? },
        LayerConstraint { layer: 1, constraint: SparsityConstraint::kernel(2)? },
    ];
    let mut state = AdmmState::new(&model, &constraints, None, 1.0)?;
    for s in &mut state.slots {
        s.rho = rng.random_range(0.1..2.0);
        for v in s.z.values_mut().iter_mut().chain(s.u.values_mut().iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(GradientCase { model, net, batch, state })
}

/// Central differences with step 1e-5 on every weight and bias of random
/// networks, including the ADMM penalty. Instances where a perturbation
/// flips a ReLU or a max-pool choice sit on a kink and are redrawn.
pub fn verify_gradients(cases: usize, seed: u64) -> Result<SuiteResult> {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SuiteResult::new("analytic vs central-difference gradients");
    let mut done = 0;
    let mut attempts = 0;
    while done < cases {
        attempts += 1;
        if attempts > 20 * cases.max(1) {
            return Err(Error::Config("could not draw gradient instances away from activation kinks".into()));
        }
        let GradientCase { model, net, batch, state } = random_gradient_case(&mut rng)?;
        let (_, grads) = augmented_loss_gradient(&model, &net, &batch, &state)?;
        let (_, signs, args) = loss_and_pattern(&model, &net, &batch)?;
        let mut results = Vec::new();
        let mut kink = false;
        'params: for i in 0..model.num_layers() {
            let nw = model.layer(i).weights.values().len();
            for j in 0..nw + model.layer(i).biases.len() {
                let eval = |delta: f64| -> Result<Option<f64>> {
                    let mut m = model.clone();
                    if j < nw {
                        m.layers_mut()[i].weights.values_mut()[j] += delta;
                    } else {
                        m.layers_mut()[i].biases[j - nw] += delta;
                    }
                    let (l, s, a) = loss_and_pattern(&m, &net, &batch)?;
                    Ok((s == signs && a == args).then(|| l + penalty(&m, &state)))
                };
                let (Some(up), Some(down)) = (eval(EPS)?, eval(-EPS)?) else {
                    kink = true;
                    break 'params;
                };
                let numeric = (up - down) / (2.0 * EPS);
                let analytic = if j < nw { grads[i].weights[j] } else { grads[i].biases[j - nw] };
                results.push((i, j, analytic, numeric));
            }
        }
        if kink {
            continue;
        }
        for (i, j, a, n) in results {
            let e = relative_error(a, n);
            suite.record(e <= 1e-4, e, || format!("layer {i} parameter {j}: analytic {a}, numeric {n}"));
        }
        done += 1;
    }
    Ok(suite)
}

/// Simulates `data` on the layout in both removal modes and checks logits
/// against the reference integer path and the quantized forward pass, plus
/// equality of effective operation counts between the modes.
pub fn verify_layout(layout: &PimLayout, data: &crate::nn::Dataset) -> Result<Vec<SuiteResult>> {
    let model = layout.to_model()?;
    let net = model.network.clone().ok_or_else(|| Error::Config("layout has no network definition".into()))?;
    let other_mode = match layout.mode {
        RemovalMode::Physical => RemovalMode::Lut,
        RemovalMode::Lut => RemovalMode::Physical,
    };
    let other = build_layout(&model, None, other_mode)?;
    let (la, ta) = Simulator::new(layout)?.run_dataset(data)?;
    let (lb, tb) = Simulator::new(&other)?.run_dataset(data)?;
    let geometry = geometry_for(&model, &net, data.dims)?;
    let mut eq = SuiteResult::new("layout vs quantized forward and reference path");
    for i in 0..data.len() {
        let (fwd, _) = forward_sample(&model, &net, &geometry, data.sample(i), Precision::Quantized)?;
        let reference = reference_inference(&model, data.sample(i))?;
        let ok = la[i] == fwd && lb[i] == fwd && reference == fwd;
        eq.record(ok, if ok { 0.0 } else { 1.0 }, || format!("sample {i} differs"));
    }
    let mut ops = SuiteResult::new("physical vs LUT effective operation counts");
    let ok = ta.total() == tb.total();
    ops.record(ok, if ok { 0.0 } else { 1.0 }, || format!("{:?} vs {:?}", ta.total(), tb.total()));
    Ok(vec![eq, ops])
}

pub fn run_verify(cfg: &VerifyConfig, base: &Path, seed: Option<u64>, sink: Sink) -> Result<VerifyReport> {
    let seed = seed.unwrap_or(0);
    let mut suites = vec![
        verify_bitserial(cfg.conv_cases, sub_seed(seed, 10)),
        verify_exhaustive_dot(),
        verify_projection(cfg.projection_cases, sub_seed(seed, 11)),
        verify_gradients(cfg.gradient_cases, sub_seed(seed, 12))?,
    ];
    if let Some(p) = &cfg.layout {
        let layout = PimLayout::load(&resolve(base, p))?;
        let ds = cfg.dataset.as_ref().ok_or_else(|| Error::Config("layout verification needs a dataset".into()))?;
        let (_, test) = ds.load(base, layout.seed.unwrap_or(seed))?;
        let test = test.head(cfg.limit.unwrap_or(100));
        suites.extend(verify_layout(&layout, &test)?);
    }
    for s in &suites {
        sink(&Event::new(
            "verify",
            format!(
                "{} {:<55} {:>7} cases  max error {:.3e}",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.cases,
                s.max_error
            ),
            json!(s),
        ));
    }
    let report = VerifyReport {
        format: VERIFY_FORMAT.to_string(),
        seed,
        passed: suites.iter().all(SuiteResult::passed),
        suites,
    };
    if let Some(p) = &cfg.report_out {
        io::write_json(&resolve(base, p), &report)?;
    }
    Ok(report)
}
