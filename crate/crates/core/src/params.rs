//! Named parameter hierarchies.
//!
//! Paths are `/`-separated strings kept in a `BTreeMap`, so iteration (and
//! therefore flattening) is lexicographic by path and row-major within each
//! tensor.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree {
    entries: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar coordinate count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a tree with this tree's structure from flat coordinates.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamTree> {
        if flat.len() != self.numel() {
            return Err(Error::CoordinateCount {
                expected: self.numel(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        let mut out = ParamTree::new();
        for (path, t) in &self.entries {
            let n = t.numel();
            let data = flat[offset..offset + n].to_vec();
            out.insert(path.clone(), Tensor::new(t.shape().to_vec(), data)?);
            offset += n;
        }
        Ok(out)
    }

    /// `(path, offset, len)` for every tensor in flattening order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut offset = 0;
        self.entries
            .iter()
            .map(|(p, t)| {
                let entry = (p.clone(), offset, t.numel());
                offset += t.numel();
                entry
            })
            .collect()
    }

    pub fn zeros_like(&self) -> ParamTree {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> ParamTree {
        ParamTree {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Elementwise combination of two trees with identical structure.
    pub fn zip_map(&self, other: &ParamTree, f: impl Fn(f64, f64) -> f64) -> Result<ParamTree> {
        self.check_same_structure(other)?;
        let mut out = ParamTree::new();
        for ((k, a), b) in self.entries.iter().zip(other.entries.values()) {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            out.insert(k.clone(), Tensor::new(a.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    pub fn check_same_structure(&self, other: &ParamTree) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::CoordinateCount {
                expected: self.numel(),
                found: other.numel(),
            });
        }
        for ((ka, a), (kb, b)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(Error::MissingParam(ka.clone()));
            }
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "param tree",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy `other` in under `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamTree) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn subtree(&self, prefix: &str) -> ParamTree {
        let lead = format!("{prefix}/");
        ParamTree {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Register every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> VarTree {
        VarTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Register every tensor as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> VarTree {
        VarTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamTree`].
#[derive(Debug, Clone, Default)]
pub struct VarTree {
    entries: BTreeMap<String, Var>,
}

impl VarTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, var: Var) {
        self.entries.insert(path.into(), var);
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.entries
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn subtree(&self, prefix: &str) -> VarTree {
        let lead = format!("{prefix}/");
        VarTree {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), *v)))
                .collect(),
        }
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Read the current values back out of the tape.
    pub fn values(&self, tape: &Tape) -> ParamTree {
        let mut out = ParamTree::new();
        for (k, v) in &self.entries {
            out.insert(k.clone(), tape.value(*v).clone());
        }
        out
    }

    /// Gradients for every bound leaf, zero where the root does not depend on it.
    pub fn grads(&self, grads: &Gradients) -> ParamTree {
        let mut out = ParamTree::new();
        for (k, v) in &self.entries {
            out.insert(k.clone(), grads.wrt(*v));
        }
        out
    }

    /// Views of a flat `[n]` vector laid out like `like`, one tape node per tensor.
    pub fn split_flat(tape: &mut Tape, flat: Var, like: &ParamTree) -> Result<VarTree> {
        let mut out = VarTree::new();
        for (path, offset, len) in like.layout() {
            let part = tape.slice(flat, offset, offset + len)?;
            let shape = like.get(&path)?.shape().to_vec();
            let part = tape.reshape(part, &shape)?;
            out.insert(path, part);
        }
        Ok(out)
    }
}

/// Forward value and gradient of a scalar function of `params`.
pub fn value_and_grad(
    params: &ParamTree,
    f: impl FnOnce(&mut Tape, &VarTree) -> Result<Var>,
) -> Result<(f64, ParamTree)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let root = f(&mut tape, &vars)?;
    let value = tape.value(root).item();
    let grads = tape.backward(root)?;
    Ok((value, vars.grads(&grads)))
}
