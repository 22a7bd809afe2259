//! Named parameter storage, the Adam optimizer, and finite-difference
//! gradient verification.
//!
//! Models keep their weights in a [`ParamStore`]; explicit backward passes
//! accumulate into the store's gradient slots, and [`ParamStore::adam_step`]
//! consumes them. [`grad_check`] is the verification harness every layer in
//! the crate is tested against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Serialized form of one parameter tensor inside a checkpoint file.
#[derive(Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Map of named parameters with gradient slots and Adam moment buffers.
///
/// Iteration order is the name order (BTreeMap), so updates are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor2>,
    grads: BTreeMap<String, Tensor2>,
    moment1: BTreeMap<String, Tensor2>,
    moment2: BTreeMap<String, Tensor2>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Moment buffers start at zero.
    pub fn insert(&mut self, name: &str, t: Tensor2) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        self.moment1
            .insert(name.to_string(), Tensor2::zeros(t.rows(), t.cols()));
        self.moment2
            .insert(name.to_string(), Tensor2::zeros(t.rows(), t.cols()));
        self.params.insert(name.to_string(), t);
    }

    pub fn param(&self, name: &str) -> &Tensor2 {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor2 {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.params.values().map(|t| t.data().len()).sum()
    }

    /// Fill gradient slots for every parameter with zeros.
    pub fn zero_grads(&mut self) {
        for (name, p) in &self.params {
            self.grads
                .insert(name.clone(), Tensor2::zeros(p.rows(), p.cols()));
        }
    }

    /// Add `delta` into the gradient slot for `name`, creating it if absent.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor2) {
        let p = self.param(name);
        assert!(
            p.same_shape(delta),
            "gradient shape {}x{} does not match parameter {name} {}x{}",
            delta.rows(),
            delta.cols(),
            p.rows(),
            p.cols()
        );
        let (rows, cols) = (p.rows(), p.cols());
        self.grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor2::zeros(rows, cols))
            .add_scaled(delta, 1.0);
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2> {
        self.grads.get(name)
    }

    /// Snapshot of all gradient slots, keyed by name.
    pub fn grads_snapshot(&self) -> BTreeMap<String, Tensor2> {
        self.grads.clone()
    }

    /// One Adam update over every parameter; clears the gradients afterwards.
    ///
    /// Every parameter must have a populated gradient slot.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        for name in self.params.keys() {
            if !self.grads.contains_key(name) {
                return Err(Error::State(format!(
                    "adam_step: no gradient for parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            let m = self.moment1.get_mut(name).unwrap();
            let v = self.moment2.get_mut(name).unwrap();
            for idx in 0..p.data().len() {
                let gi = g.data()[idx];
                let mi = BETA1 * m.data()[idx] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data()[idx] + (1.0 - BETA2) * gi * gi;
                m.data_mut()[idx] = mi;
                v.data_mut()[idx] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[idx] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        self.grads.clear();
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.is_finite())
    }

    /// Serialize every parameter for a checkpoint file.
    pub(crate) fn to_entries(&self) -> BTreeMap<String, TensorEntry> {
        self.params
            .iter()
            .map(|(name, t)| {
                let entry =
                    TensorEntry { rows: t.rows(), cols: t.cols(), data: t.data().to_vec() };
                (name.clone(), entry)
            })
            .collect()
    }

    /// Rebuild a store from checkpoint entries, validating names, shapes,
    /// and finiteness against the expected shape list. `version` only
    /// labels the mismatch errors.
    pub(crate) fn from_entries(
        mut entries: BTreeMap<String, TensorEntry>,
        shapes: &[(String, usize, usize)],
        version: u32,
    ) -> Result<ParamStore> {
        let mut params = ParamStore::new();
        for (name, rows, cols) in shapes {
            let entry = entries.remove(name).ok_or_else(|| Error::CheckpointMismatch {
                version,
                detail: format!("missing parameter {name}"),
            })?;
            if entry.rows != *rows || entry.cols != *cols || entry.data.len() != rows * cols {
                return Err(Error::CheckpointMismatch {
                    version,
                    detail: format!(
                        "parameter {name} has shape {}x{} ({} values), expected {rows}x{cols}",
                        entry.rows,
                        entry.cols,
                        entry.data.len()
                    ),
                });
            }
            if entry.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CheckpointMismatch {
                    version,
                    detail: format!("parameter {name} contains non-finite values"),
                });
            }
            params.insert(name, Tensor2::from_vec(*rows, *cols, entry.data)?);
        }
        if let Some(extra) = entries.keys().next() {
            return Err(Error::CheckpointMismatch {
                version,
                detail: format!("unexpected parameter {extra}"),
            });
        }
        Ok(params)
    }
}

/// Verify analytic gradients against central finite differences.
///
/// `f` must recompute the loss for the store's current parameter values and
/// leave the matching analytic gradients in the store's gradient slots
/// (zeroing them first). Returns the max over all coordinates of
/// |analytic - numeric| / max(1, |analytic| + |numeric|).
pub fn grad_check<F>(mut f: F, store: &mut ParamStore, epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::arg(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let base = f(store)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!(
            "grad_check: loss is not finite ({base})"
        )));
    }
    let analytic = store.grads_snapshot();
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut max_err = 0.0f64;
    for name in &names {
        let coords = store.param(name).data().len();
        for idx in 0..coords {
            let orig = store.param(name).data()[idx];
            store.param_mut(name).data_mut()[idx] = orig + epsilon;
            let loss_plus = f(store)?;
            store.param_mut(name).data_mut()[idx] = orig - epsilon;
            let loss_minus = f(store)?;
            store.param_mut(name).data_mut()[idx] = orig;
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::Evaluation(format!(
                    "grad_check: perturbed loss not finite at {name}[{idx}]"
                )));
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
            let a = analytic
                .get(name)
                .map(|g| g.data()[idx])
                .unwrap_or(0.0);
            let err = (a - numeric).abs() / 1.0f64.max(a.abs() + numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    // Leave the store's gradient slots consistent with its parameters.
    f(store)?;
    Ok(max_err)
}
