//! SGD updates, mini-batch sampling and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::Dataset;
use super::network::{argmax, forward_sample, geometry_for, loss_and_gradients, Gradients, NetworkDef, Precision, TrainingBatch};
use crate::error::{Error, Result};
use crate::model::Model;

/// Per-layer element masks; `None` means the layer is unmasked.
pub type LayerMasks = Vec<Option<Vec<bool>>>;

/// `w -= lr * g` on weights where the mask is true, and on all biases.
/// Masked-off weights are left untouched.
pub fn sgd_step(model: &mut Model, grads: &Gradients, learning_rate: f64, masks: Option<&LayerMasks>) {
    for (i, (layer, g)) in model.layers_mut().iter_mut().zip(grads).enumerate() {
        let mask = masks.and_then(|m| m[i].as_deref());
        for (j, (w, d)) in layer.weights.values_mut().iter_mut().zip(&g.weights).enumerate() {
            if mask.is_none_or(|m| m[j]) {
                *w -= learning_rate * d;
            }
        }
        for (b, d) in layer.biases.iter_mut().zip(&g.biases) {
            *b -= learning_rate * d;
        }
    }
}

/// SGD with optional heavy-ball momentum. With momentum 0 this is exactly
/// [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: None }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, learning_rate: f64, masks: Option<&LayerMasks>) {
        if self.momentum == 0.0 {
            sgd_step(model, grads, learning_rate, masks);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| super::network::zero_gradients(model));
        for (vl, gl) in v.iter_mut().zip(grads) {
            for (a, b) in vl.weights.iter_mut().zip(&gl.weights) {
                *a = self.momentum * *a + b;
            }
            for (a, b) in vl.biases.iter_mut().zip(&gl.biases) {
                *a = self.momentum * *a + b;
            }
        }
        sgd_step(model, v, learning_rate, masks);
    }
}

/// Reshuffles the sample order every epoch from a seeded generator.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Dataset("cannot sample from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler { order, pos: 0, batch_size, rng })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

pub fn predict(model: &Model, net: &NetworkDef, data: &Dataset, precision: Precision) -> Result<Vec<usize>> {
    let geometry = geometry_for(model, net, data.dims)?;
    (0..data.len())
        .into_par_iter()
        .map(|i| forward_sample(model, net, &geometry, data.sample(i), precision).map(|(l, _)| argmax(&l)))
        .collect()
}

/// Top-1 accuracy in [0, 1].
pub fn evaluate(model: &Model, net: &NetworkDef, data: &Dataset, precision: Precision) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(model, net, data, precision)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Plain dense training for `epochs` passes; `on_epoch` sees training loss,
/// training accuracy and the model after each pass.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model,
    net: &NetworkDef,
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    mut on_epoch: impl FnMut(EpochStats, &Model) -> Result<()>,
) -> Result<()> {
    let mut sampler = BatchSampler::new(data.len(), batch_size, seed)?;
    let mut opt = Sgd::new(momentum);
    for epoch in 0..epochs {
        let mut total = 0.0;
        let steps = sampler.steps_per_epoch();
        for _ in 0..steps {
            let batch: TrainingBatch = data.batch(&sampler.next_indices())?;
            let (loss, grads) = loss_and_gradients(model, net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: format!("dense training epoch {epoch}"), loss });
            }
            total += loss;
            opt.step(model, &grads, learning_rate, None);
        }
        let accuracy = evaluate(model, net, data, Precision::Real)?;
        on_epoch(EpochStats { epoch, loss: total / steps as f64, accuracy }, model)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, LayerShape, WeightTensor4D};
    use crate::nn::network::{zero_gradients, ConvSpec, LayerGrads};

    fn scalar_model(w: f64) -> Model {
        let t = WeightTensor4D::new(LayerShape::conv(1, 1, 1, 1, 1), vec![w]).unwrap();
        Model::new(vec![LayerParams::new(t, vec![0.0])], None).unwrap()
    }

    #[test]
    fn sgd_arithmetic() {
        let mut m = scalar_model(1.0);
        let g = vec![LayerGrads { weights: vec![0.5], biases: vec![0.0] }];
        sgd_step(&mut m, &g, 0.1, None);
        assert_eq!(m.layer(0).weights.values()[0], 0.95);
        sgd_step(&mut m, &g, 0.0, None);
        assert_eq!(m.layer(0).weights.values()[0], 0.95);
        sgd_step(&mut m, &g, 0.1, Some(&vec![Some(vec![false])]));
        assert_eq!(m.layer(0).weights.values()[0], 0.95);
    }

    #[test]
    fn masked_positions_stay_zero() {
        let (net, shapes) =
            NetworkDef::build([1, 6, 6], &[ConvSpec { filters: 3, kernel: 3, stride: 1, pool: true }], &[], 4).unwrap();
        let mut m = net.init_model(&shapes, 2).unwrap();
        let masks: LayerMasks = m
            .layers()
            .iter()
            .map(|l| Some((0..l.shape().len()).map(|j| j % 3 != 0).collect::<Vec<bool>>()))
            .collect();
        for (l, mask) in m.layers_mut().iter_mut().zip(&masks) {
            for (v, &k) in l.weights.values_mut().iter_mut().zip(mask.as_ref().unwrap()) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        let data = crate::nn::data::synthetic_digits(8, 1);
        let data = Dataset::new(
            [1, 6, 6],
            4,
            data.images.chunks(256).flat_map(|c| c[..36].to_vec()).collect(),
            data.labels.iter().map(|l| l % 4).collect(),
        )
        .unwrap();
        let mut opt = Sgd::new(0.9);
        for _ in 0..5 {
            let (_, g) = loss_and_gradients(&m, &net, &data.all().unwrap()).unwrap();
            opt.step(&mut m, &g, 0.5, Some(&masks));
        }
        for (l, mask) in m.layers().iter().zip(&masks) {
            for (v, &k) in l.weights.values().iter().zip(mask.as_ref().unwrap()) {
                if !k {
                    assert_eq!(v.to_bits(), 0.0f64.to_bits());
                }
            }
        }
        let _ = zero_gradients(&m);
    }

    #[test]
    fn sampler_covers_epoch() {
        let mut s = BatchSampler::new(10, 4, 0).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn constant_prediction_accuracy() {
        // zero network predicts class 0 everywhere (argmax ties -> first)
        let (net, shapes) =
            NetworkDef::build([1, 16, 16], &[ConvSpec { filters: 2, kernel: 3, stride: 1, pool: true }], &[], 10)
                .unwrap();
        let mut m = net.init_model(&shapes, 0).unwrap();
        for l in m.layers_mut() {
            l.weights.values_mut().fill(0.0);
        }
        let data = crate::nn::data::synthetic_digits(100, 5);
        assert_eq!(evaluate(&m, &net, &data, Precision::Real).unwrap(), 0.10);
    }

    #[test]
    fn overfits_single_sample() {
        let (net, shapes) =
            NetworkDef::build([1, 16, 16], &[ConvSpec { filters: 4, kernel: 5, stride: 1, pool: true }], &[], 10)
                .unwrap();
        let mut m = net.init_model(&shapes, 3).unwrap();
        let data = crate::nn::data::synthetic_digits(1, 8);
        train(&mut m, &net, &data, 300, 0.1, 0.0, 1, 0, |_, _| Ok(())).unwrap();
        let loss = crate::nn::network::mean_loss(&m, &net, &data.all().unwrap()).unwrap();
        assert!(loss < 1e-3, "{loss}");
        assert_eq!(evaluate(&m, &net, &data, Precision::Real).unwrap(), 1.0);
    }
}
