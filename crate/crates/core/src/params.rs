//! Named, ordered parameter tensors.

use std::collections::HashMap;

use crate::autodiff::{grad_check, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters in a fixed canonical order. The order is what checkpoints,
/// the optimizer state and flattened gradients all agree on.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but reports a missing name as an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        slot.expect_same_shape(&value)?;
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All zeros with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// True when names, order and shapes agree.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Places every parameter on `tape` as a named leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(n, t.clone())))
            .collect();
        Bound { vars }
    }

    /// Gradients laid out like `self`; parameters the loss did not touch
    /// get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> ParamSet {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let g = grads
                        .param(n)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()));
                    (n.clone(), g)
                })
                .collect(),
        }
    }

    /// Concatenation of the named tensors, in the given order.
    pub fn flatten(&self, names: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(self.require(n)?.data());
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }
}

/// [`grad_check`] over every tensor of a [`ParamSet`], with the loss
/// built from named handles.
pub fn grad_check_params<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let names: Vec<String> = params.names().map(String::from).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    grad_check(&tensors, |tape, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        f(tape, &bound)
    })
}
