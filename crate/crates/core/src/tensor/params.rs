//! Named parameter collections shared by the classifiers and the verifier.

use std::collections::BTreeMap;

use super::tape::{StatUpdate, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Name -> tensor map. Iteration order is the name order, which keeps every
/// reduction over parameters (serialization, optimizer steps, global norms)
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

/// Parameter-name to tape-leaf bindings for one forward pass.
#[derive(Debug, Default)]
pub struct TapeBindings {
    entries: Vec<(String, Var)>,
}

impl TapeBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    fn lookup(&self, name: &str) -> Option<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            if t.requires_grad {
                let n = t.numel();
                match &mut t.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                    None => t.grad = Some(vec![0.0; n]),
                }
            }
        }
    }

    /// Put a parameter on the tape (snapshot copy) and remember the binding.
    /// Binding the same name twice returns the existing leaf.
    pub fn bind(&self, name: &str, tape: &mut Tape, binds: &mut TapeBindings) -> Result<Var> {
        if let Some(v) = binds.lookup(name) {
            return Ok(v);
        }
        let t = self.get(name)?;
        let v = tape.leaf(t);
        binds.entries.push((name.to_string(), v));
        Ok(v)
    }

    /// Pull gradients off a finished tape into the parameter grad buffers.
    /// Bound parameters the loss does not reach get zeros, so every
    /// grad-requiring parameter ends up populated.
    pub fn apply_gradients(&mut self, tape: &Tape, binds: &TapeBindings) -> Result<()> {
        for (name, var) in &binds.entries {
            let t = self.get_mut(name)?;
            if !t.requires_grad {
                continue;
            }
            match tape.grad(*var) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let n = t.numel();
                    t.grad.get_or_insert_with(|| vec![0.0; n]);
                }
            }
        }
        Ok(())
    }

    /// Write refreshed batch-norm running statistics back.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) -> Result<()> {
        for up in updates {
            let mean = self.get_mut(&format!("{}.mean", up.prefix))?;
            mean.data_mut().copy_from_slice(&up.mean);
            let var = self.get_mut(&format!("{}.var", up.prefix))?;
            var.data_mut().copy_from_slice(&up.var);
            let steps = self.get_mut(&format!("{}.steps", up.prefix))?;
            steps.data_mut()[0] += 1.0;
        }
        Ok(())
    }

    /// Global L2 norm over all parameter gradients, in name order.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in self.entries.values() {
            if let Some(g) = &t.grad {
                for v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Scale every gradient in place.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.entries.values_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}
