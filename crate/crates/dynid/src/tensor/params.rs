//! Named trainable parameters and their tape bindings.

use super::{Scalar, Tape, Tensor, TensorError, TensorId};
use std::collections::BTreeMap;

struct Param<T> {
    value: Tensor<T>,
    grad: Vec<T>,
}

/// A named map of trainable tensors. Iteration order is always sorted by
/// name, so reductions over parameters are deterministic. Gradients
/// accumulate across backward passes until [`ParamSet::zero_grad`].
pub struct ParamSet<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let numel = value.numel();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: vec![T::zero(); numel],
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[T], TensorError> {
        self.entries
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Sorted (name, value, grad) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &[T])> {
        self.entries
            .iter()
            .map(|(n, p)| (n.as_str(), &p.value, p.grad.as_slice()))
    }

    /// Sorted mutable (value, grad) iteration for optimizer steps.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Vec<T>)> {
        self.entries
            .iter_mut()
            .map(|(n, p)| (n.as_str(), &mut p.value, &mut p.grad))
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Add a gradient contribution to one parameter. No-op names are a bug,
    /// so this panics on unknown parameters.
    pub fn accumulate_grad(&mut self, name: &str, contribution: &[T]) {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        debug_assert_eq!(p.grad.len(), contribution.len());
        for (g, &d) in p.grad.iter_mut().zip(contribution) {
            *g += d;
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| {
                let v = g.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place (gradient clipping).
    pub fn scale_grads(&mut self, factor: T) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copy parameter values into a plain map (for checkpoints and hashing).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, p) in &self.entries {
            out.insert(name, p.value.cast()).expect("names unique");
        }
        out
    }
}

/// Mapping from parameter names to leaf nodes on one tape.
pub struct Binding {
    ids: BTreeMap<String, TensorId>,
}

impl Binding {
    /// Bind every parameter (sorted order) as a leaf on the tape.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Binding {
        Self::bind_filtered(tape, params, |_| true)
    }

    /// Bind only the parameters `keep` accepts. Gradients accumulate
    /// exclusively into bound parameters; anything else entering the graph
    /// as a constant stays frozen.
    pub fn bind_filtered<T: Scalar>(
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        keep: impl Fn(&str) -> bool,
    ) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, value, _) in params.iter() {
            if keep(name) {
                let id = tape.leaf(value.clone());
                ids.insert(name.to_string(), id);
            }
        }
        Binding { ids }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(|s| s.as_str())
    }

    pub fn id(&self, name: &str) -> Result<TensorId, TensorError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Add this tape's leaf gradients into the parameter set. Parameters the
    /// loss never touched contribute nothing.
    pub fn accumulate<T: Scalar>(&self, tape: &Tape<T>, params: &mut ParamSet<T>) {
        for (name, id) in &self.ids {
            if let Some(g) = tape.grad(*id) {
                if let Some(p) = params.entries.get_mut(name) {
                    for (dst, &src) in p.grad.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
    }
}

/// Name-to-node lookup for a model forward pass. Trainable parameters point
/// at bound leaves, frozen ones at constant leaves; the forward code does
/// not need to know which is which.
pub struct NameTable {
    ids: BTreeMap<String, TensorId>,
}

impl NameTable {
    /// Bind a full parameter set onto a tape, treating names accepted by
    /// `trainable` as gradient-carrying. Returns the lookup table plus the
    /// binding that accumulates into exactly the trainable subset.
    pub fn bind_model<T: Scalar>(
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> (NameTable, Binding) {
        let binding = Binding::bind_filtered(tape, params, &trainable);
        let mut ids = BTreeMap::new();
        for (name, value, _) in params.iter() {
            let id = match binding.ids.get(name) {
                Some(&id) => id,
                None => tape.leaf(value.clone()),
            };
            ids.insert(name.to_string(), id);
        }
        (NameTable { ids }, binding)
    }

    pub fn from_binding(binding: &Binding) -> NameTable {
        NameTable {
            ids: binding.ids.clone(),
        }
    }

    pub fn insert(&mut self, name: &str, id: TensorId) {
        self.ids.insert(name.to_string(), id);
    }

    pub fn id(&self, name: &str) -> Result<TensorId, TensorError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }
}

/// Convenience wrapper implementing the usual train-step flow: run `build`
/// to a scalar loss, backpropagate, and accumulate into `params`.
pub fn backward_into<T: Scalar, F>(
    params: &mut ParamSet<T>,
    build: F,
) -> Result<T, TensorError>
where
    F: FnOnce(&mut Tape<T>, &Binding) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let loss = build(&mut tape, &binding)?;
    tape.backward(loss)?;
    let loss_val = tape.value(loss).item()?;
    binding.accumulate(&tape, params);
    Ok(loss_val)
}
