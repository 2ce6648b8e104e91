//! Named parameter storage shared by graphs, the optimizer and
//! checkpointing.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::AutodiffError;
use crate::scalar::Scalar;

/// Handle to an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry<S: Scalar> {
    name: String,
    value: ArrayD<S>,
    grad: ArrayD<S>,
    trainable: bool,
    // AdamW first/second moment estimates
    m: ArrayD<S>,
    v: ArrayD<S>,
}

/// Flat registry of named tensors: trainable parameters plus non-trainable
/// buffers (e.g. normalization running statistics). Iteration order is
/// registration order everywhere, which keeps optimizer updates and
/// checkpoint layout deterministic.
pub struct ParamStore<S: Scalar> {
    entries: Vec<Entry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(
        &mut self,
        name: &str,
        value: ArrayD<S>,
        trainable: bool,
    ) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::DuplicateParam { name: name.into() });
        }
        let zeros = ArrayD::zeros(value.shape().to_vec());
        self.entries.push(Entry {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            trainable,
        });
        let id = ParamId(self.entries.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        Ok(id)
    }

    /// Registers a trainable parameter.
    pub fn register(&mut self, name: &str, value: ArrayD<S>) -> Result<ParamId, AutodiffError> {
        self.insert(name, value, true)
    }

    /// Registers a non-trainable buffer: checkpointed, never updated by
    /// the optimizer, and excluded from gradient flow.
    pub fn register_buffer(
        &mut self,
        name: &str,
        value: ArrayD<S>,
    ) -> Result<ParamId, AutodiffError> {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn n_trainable_elems(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId, AutodiffError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| AutodiffError::UnknownParam { name: name.into() })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].value
    }

    /// Mutable access for initialization tweaks, buffer updates and
    /// finite-difference probes in tests. Shape must be preserved.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].grad
    }

    pub fn add_grad(&mut self, id: ParamId, delta: &ArrayD<S>) {
        debug_assert_eq!(self.entries[id.0].grad.shape(), delta.shape());
        self.entries[id.0].grad += delta;
    }

    /// Scales every gradient in place (e.g. by 1/batch after accumulating
    /// per-scene gradients).
    pub fn scale_grads(&mut self, factor: S) {
        for e in &mut self.entries {
            e.grad.mapv_inplace(|g| g * factor);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(S::zero());
        }
    }

    /// L2 norm over all trainable gradients, for logging/diagnostics.
    pub fn grad_norm(&self) -> S {
        let mut acc = S::zero();
        for e in self.entries.iter().filter(|e| e.trainable) {
            for &g in e.grad.iter() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// `(name, value)` pairs in registration order; the checkpoint layout.
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites an entry by name, e.g. when restoring a checkpoint.
    /// The shape must match the registered shape.
    pub fn load_named(&mut self, name: &str, value: ArrayD<S>) -> Result<(), AutodiffError> {
        let id = self.id_of(name)?;
        let cur = self.entries[id.0].value.shape();
        if cur != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "load_named",
                lhs: cur.to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub(super) fn adam_update(
        &mut self,
        id: ParamId,
        update: impl Fn(&mut ArrayD<S>, &ArrayD<S>, &mut ArrayD<S>, &mut ArrayD<S>),
    ) {
        let e = &mut self.entries[id.0];
        // grad borrowed immutably alongside value/m/v, so split the struct
        let Entry {
            value, grad, m, v, ..
        } = e;
        update(value, grad, m, v);
    }

    pub(super) fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn duplicate_names_rejected() {
        let mut st = ParamStore::<f64>::new();
        st.register("w", arr2(&[[1.0]]).into_dyn()).unwrap();
        assert!(matches!(
            st.register("w", arr2(&[[2.0]]).into_dyn()),
            Err(AutodiffError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn load_named_checks_shape_and_name() {
        let mut st = ParamStore::<f64>::new();
        st.register("w", arr2(&[[1.0, 2.0]]).into_dyn()).unwrap();
        assert!(st.load_named("w", arr2(&[[3.0, 4.0]]).into_dyn()).is_ok());
        assert_eq!(st.value(st.id_of("w").unwrap())[[0, 1]], 4.0);
        assert!(matches!(
            st.load_named("w", arr2(&[[1.0]]).into_dyn()),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            st.load_named("nope", arr2(&[[1.0]]).into_dyn()),
            Err(AutodiffError::UnknownParam { .. })
        ));
    }

    #[test]
    fn iteration_follows_registration_order() {
        let mut st = ParamStore::<f64>::new();
        st.register("b", arr2(&[[1.0]]).into_dyn()).unwrap();
        st.register_buffer("a", arr2(&[[1.0]]).into_dyn()).unwrap();
        st.register("c", arr2(&[[1.0]]).into_dyn()).unwrap();
        let names: Vec<&str> = st.iter_named().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a", "c"]);
        assert_eq!(st.trainable_ids().len(), 2);
    }
}
