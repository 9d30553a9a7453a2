//! Sign-magnitude fixed-point weight grid and its projection.

use crate::error::{Error, Result};
use crate::model::{QuantSpec, WeightTensor4D};

/// The level set `{-(2^(b-1)-1)s, ..., -s, 0, s, ..., (2^(b-1)-1)s}` with
/// power-of-two step `s = 2^-frac_bits`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConstraint {
    spec: QuantSpec,
}

impl QuantConstraint {
    pub fn new(spec: QuantSpec) -> Result<Self> {
        spec.validate().map_err(Error::Config)?;
        Ok(QuantConstraint { spec })
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn step(&self) -> f64 {
        self.spec.weight_step()
    }

    pub fn levels(&self) -> Vec<f64> {
        let max = self.spec.max_weight_code();
        let min = if self.spec.signed { -max } else { 0 };
        (min..=max).map(|k| self.spec.weight_value(k)).collect()
    }

    pub fn project_value(&self, w: f64) -> f64 {
        self.spec.weight_value(self.spec.weight_code(w))
    }

    /// True iff `w` equals a grid level exactly.
    pub fn contains(&self, w: f64) -> bool {
        self.project_value(w) == w
    }
}

/// Maps every element to its nearest level (ties away from zero). Zero stays
/// zero, so pruning masks survive quantization.
pub fn quantize_project(w: &WeightTensor4D, q: &QuantConstraint) -> WeightTensor4D {
    let mut out = w.clone();
    for v in out.values_mut() {
        *v = q.project_value(*v);
    }
    out
}

/// Integer codes of a tensor that already lies on the grid.
pub fn weight_codes(w: &WeightTensor4D, spec: &QuantSpec) -> std::result::Result<Vec<i64>, usize> {
    w.values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let code = spec.weight_code(v);
            if spec.weight_value(code) == v {
                Ok(code)
            } else {
                Err(i)
            }
        })
        .collect()
}
