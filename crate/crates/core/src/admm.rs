//! ADMM-regularized training for structured sparsity and quantization.
//!
//! Every (layer, constraint) pair carries its own auxiliary variable `Z`,
//! scaled dual `U` and penalty `rho`. A round runs SGD on the loss plus
//! `rho/2 ||W - Z + U||^2` for each pair, then sets `Z := proj(W + U)` and
//! `U := U + W - Z`. Afterwards the combined sparsity mask is hard-applied and
//! the surviving weights are retrained with the mask frozen, which makes the
//! result exactly feasible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, QuantSpec, WeightTensor4D};
use crate::nn::network::{loss_and_gradients, Gradients, NetworkDef, TrainingBatch};
use crate::nn::train::{BatchSampler, LayerMasks, Sgd};
use crate::nn::Dataset;
use crate::quant::{quantize_project, QuantConstraint};
use crate::sparsity::{self, SparsityConstraint};

/// Source of the training loss `f` and its gradient.
pub trait Objective {
    /// Loss and gradient at `model`, typically on the next mini-batch.
    fn loss_and_grad(&mut self, model: &Model) -> Result<(f64, Gradients)>;
}

/// Mini-batch cross-entropy over a dataset with a seeded sampler.
pub struct DatasetObjective<'a> {
    net: &'a NetworkDef,
    data: &'a Dataset,
    sampler: BatchSampler,
}

impl<'a> DatasetObjective<'a> {
    pub fn new(net: &'a NetworkDef, data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        Ok(DatasetObjective { net, data, sampler: BatchSampler::new(data.len(), batch_size, seed)? })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.steps_per_epoch()
    }
}

impl Objective for DatasetObjective<'_> {
    fn loss_and_grad(&mut self, model: &Model) -> Result<(f64, Gradients)> {
        let batch = self.data.batch(&self.sampler.next_indices())?;
        loss_and_gradients(model, self.net, &batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmSchedule {
    pub admm_rounds: usize,
    pub sgd_steps_per_round: usize,
    pub rho_initial: f64,
    pub rho_growth: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    pub retrain_steps: usize,
    pub seed: u64,
}

impl AdmmSchedule {
    /// 10 rounds of one pass each, 5 passes of masked retraining.
    pub fn with_pass_length(steps_per_pass: usize, seed: u64) -> Self {
        AdmmSchedule {
            admm_rounds: 10,
            sgd_steps_per_round: steps_per_pass,
            rho_initial: 1e-3,
            rho_growth: 1.5,
            learning_rate: 0.05,
            lr_decay: 1.0,
            momentum: 0.0,
            retrain_steps: 5 * steps_per_pass,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.admm_rounds == 0 || self.sgd_steps_per_round == 0 {
            return bad("admm_rounds and sgd_steps_per_round must be at least 1");
        }
        if !(self.rho_initial > 0.0 && self.rho_initial.is_finite()) {
            return bad("rho_initial must be positive");
        }
        if !(self.rho_growth >= 1.0 && self.rho_growth.is_finite()) {
            return bad("rho_growth must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, round: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(round as i32)
    }
}

/// A sparsity constraint attached to one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConstraint {
    pub layer: usize,
    pub constraint: SparsityConstraint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    Sparsity(SparsityConstraint),
    Quant(QuantConstraint),
}

impl Constraint {
    pub fn project(&self, w: &WeightTensor4D) -> Result<WeightTensor4D> {
        match self {
            Constraint::Sparsity(c) => sparsity::project(w, c),
            Constraint::Quant(q) => Ok(quantize_project(w, q)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Constraint::Sparsity(c) => format!("{:?}<={}", c.kind, c.budget()).to_lowercase(),
            Constraint::Quant(q) => format!("quant{}b/f{}", q.spec().weight_bits, q.spec().frac_bits),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmSlot {
    pub layer: usize,
    pub constraint: Constraint,
    pub z: WeightTensor4D,
    pub u: WeightTensor4D,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub slots: Vec<AdmmSlot>,
}

fn check_constraints(model: &Model, constraints: &[LayerConstraint]) -> Result<()> {
    for lc in constraints {
        if lc.layer >= model.num_layers() {
            return Err(Error::Config(format!(
                "constraint targets layer {} but the model has {} layers",
                lc.layer,
                model.num_layers()
            )));
        }
        lc.constraint
            .check(model.layer(lc.layer).shape())
            .map_err(|e| Error::layer(lc.layer, e.to_string()))?;
    }
    Ok(())
}

impl AdmmState {
    /// `Z = proj(W)`, `U = 0` for each sparsity constraint and, when `quant`
    /// is given, one quantization pair per layer.
    pub fn new(
        model: &Model,
        constraints: &[LayerConstraint],
        quant: Option<&[QuantSpec]>,
        rho: f64,
    ) -> Result<Self> {
        check_constraints(model, constraints)?;
        let mut slots = Vec::new();
        let mut push = |layer: usize, constraint: Constraint| -> Result<()> {
            let w = &model.layer(layer).weights;
            slots.push(AdmmSlot {
                layer,
                constraint,
                z: constraint.project(w)?,
                u: WeightTensor4D::zeros(*w.shape()),
                rho,
            });
            Ok(())
        };
        for lc in constraints {
            push(lc.layer, Constraint::Sparsity(lc.constraint))?;
        }
        if let Some(specs) = quant {
            if specs.len() != model.num_layers() {
                return Err(Error::Config(format!(
                    "{} quantization specs for {} layers",
                    specs.len(),
                    model.num_layers()
                )));
            }
            for (i, spec) in specs.iter().enumerate() {
                push(i, Constraint::Quant(QuantConstraint::new(*spec)?))?;
            }
        }
        Ok(AdmmState { slots })
    }

    fn check_shapes(&self, model: &Model) -> Result<()> {
        for s in &self.slots {
            if s.layer >= model.num_layers() || s.z.shape() != model.layer(s.layer).shape() || s.u.shape() != s.z.shape()
            {
                return Err(Error::Config(format!("ADMM state for layer {} does not match the model", s.layer)));
            }
        }
        Ok(())
    }
}

/// Adds `rho (W - Z + U)` of every pair to the weight gradient of its layer.
/// Bias gradients are left alone.
pub fn add_penalty_gradient(model: &Model, state: &AdmmState, grads: &mut Gradients) -> Result<()> {
    state.check_shapes(model)?;
    for s in &state.slots {
        let w = model.layer(s.layer).weights.values();
        let g = &mut grads[s.layer].weights;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += s.rho * (w[j] - s.z.values()[j] + s.u.values()[j]);
        }
    }
    Ok(())
}

/// Gradient of the augmented loss on one batch.
pub fn augmented_loss_gradient(
    model: &Model,
    net: &NetworkDef,
    batch: &TrainingBatch,
    state: &AdmmState,
) -> Result<(f64, Gradients)> {
    state.check_shapes(model)?;
    let (loss, mut grads) = loss_and_gradients(model, net, batch)?;
    add_penalty_gradient(model, state, &mut grads)?;
    Ok((loss, grads))
}

/// `||W - Z||_F` per pair, in slot order.
pub fn primal_residual(state: &AdmmState, model: &Model) -> Vec<f64> {
    state
        .slots
        .iter()
        .map(|s| {
            let w = model.layer(s.layer).weights.values();
            w.iter().zip(s.z.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub layer: usize,
    pub constraint: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Mean data loss over the round's SGD steps.
    pub loss: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub residuals: Vec<Residual>,
}

/// One ADMM round: SGD on the augmented loss, projection, dual update, then
/// `rho *= rho_growth`.
pub fn admm_round(
    model: &mut Model,
    state: &mut AdmmState,
    objective: &mut dyn Objective,
    sched: &AdmmSchedule,
    round: usize,
    opt: &mut Sgd,
) -> Result<RoundLog> {
    state.check_shapes(model)?;
    let lr = sched.learning_rate_at(round);
    let rho = state.slots.first().map_or(sched.rho_initial, |s| s.rho);
    let mut total = 0.0;
    for step in 0..sched.sgd_steps_per_round {
        let (loss, mut grads) = objective.loss_and_grad(model)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage: format!("ADMM round {round}, step {step}"), loss });
        }
        total += loss;
        add_penalty_gradient(model, state, &mut grads)?;
        opt.step(model, &grads, lr, None);
    }
    for s in &mut state.slots {
        let w = &model.layer(s.layer).weights;
        let mut target = w.clone();
        for (t, u) in target.values_mut().iter_mut().zip(s.u.values()) {
            *t += u;
        }
        s.z = s.constraint.project(&target)?;
        for ((u, &wj), &zj) in s.u.values_mut().iter_mut().zip(w.values()).zip(s.z.values()) {
            *u += wj - zj;
        }
    }
    let residuals = state
        .slots
        .iter()
        .zip(primal_residual(state, model))
        .map(|(s, value)| Residual { layer: s.layer, constraint: s.constraint.label(), value })
        .collect();
    for s in &mut state.slots {
        s.rho *= sched.rho_growth;
    }
    Ok(RoundLog { round, loss: total / sched.sgd_steps_per_round as f64, rho, learning_rate: lr, residuals })
}

/// Per-layer combined keep masks of the sparsity constraints, computed from
/// the current weights. Unconstrained layers get `None`.
pub fn sparsity_masks(model: &Model, constraints: &[LayerConstraint]) -> Result<LayerMasks> {
    check_constraints(model, constraints)?;
    (0..model.num_layers())
        .map(|i| {
            let cs: Vec<SparsityConstraint> =
                constraints.iter().filter(|lc| lc.layer == i).map(|lc| lc.constraint).collect();
            if cs.is_empty() {
                Ok(None)
            } else {
                sparsity::combined_mask(&model.layer(i).weights, &cs).map(Some)
            }
        })
        .collect()
}

/// Hard-prunes with the combined mask, then runs `steps` masked SGD steps.
/// Returns the mean training loss over those steps (0 if none).
pub fn masked_retrain(
    model: &mut Model,
    constraints: &[LayerConstraint],
    objective: &mut dyn Objective,
    steps: usize,
    learning_rate: f64,
    momentum: f64,
) -> Result<f64> {
    let masks = sparsity_masks(model, constraints)?;
    for (i, (layer, mask)) in model.layers_mut().iter_mut().zip(&masks).enumerate() {
        if let Some(m) = mask {
            sparsity::apply_mask(&mut layer.weights, m);
            if layer.weights.nonzero_count() == 0 {
                return Err(Error::layer(i, "pruning mask eliminates every weight of the layer"));
            }
        }
    }
    let mut opt = Sgd::new(momentum);
    let mut total = 0.0;
    for step in 0..steps {
        let (loss, grads) = objective.loss_and_grad(model)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage: format!("masked retraining step {step}"), loss });
        }
        total += loss;
        opt.step(model, &grads, learning_rate, Some(&masks));
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompressEvent {
    Round(RoundLog),
    Retrained { steps: usize, loss: f64 },
    Quantized,
}

/// Full pipeline: ADMM rounds over all sparsity constraints (plus one
/// quantization pair per layer when `quant` is given), masked retraining,
/// then projection of the retained weights onto the quantization grid.
///
/// The result satisfies every sparsity constraint exactly and, with `quant`,
/// every weight lies on its layer's grid.
pub fn compress(
    model: &Model,
    constraints: &[LayerConstraint],
    quant: Option<&[QuantSpec]>,
    objective: &mut dyn Objective,
    sched: &AdmmSchedule,
    observer: &mut dyn FnMut(&CompressEvent, &Model),
) -> Result<Model> {
    sched.validate()?;
    let mut model = model.clone();
    let mut state = AdmmState::new(&model, constraints, quant, sched.rho_initial)?;
    let mut opt = Sgd::new(sched.momentum);
    if !state.slots.is_empty() {
        for round in 0..sched.admm_rounds {
            let log = admm_round(&mut model, &mut state, objective, sched, round, &mut opt)?;
            observer(&CompressEvent::Round(log), &model);
        }
    }
    let lr = sched.learning_rate_at(sched.admm_rounds);
    let loss = masked_retrain(&mut model, constraints, objective, sched.retrain_steps, lr, sched.momentum)?;
    observer(&CompressEvent::Retrained { steps: sched.retrain_steps, loss }, &model);

    if let Some(specs) = quant {
        for (layer, spec) in model.layers_mut().iter_mut().zip(specs) {
            layer.weights = quantize_project(&layer.weights, &QuantConstraint::new(*spec)?);
            layer.quant = Some(*spec);
        }
        observer(&CompressEvent::Quantized, &model);
    }

    for lc in constraints {
        if !sparsity::is_feasible(&model.layer(lc.layer).weights, &lc.constraint)? {
            return Err(Error::layer(lc.layer, format!("result violates {:?}", lc.constraint)));
        }
    }
    model.validate()?;
    Ok(model)
}
