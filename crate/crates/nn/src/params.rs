use crate::error::{NnError, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Ordered, named collection of parameter tensors.
///
/// Order is significant: graphs bind parameters positionally and checkpoints
/// serialize them in this order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    /// Appends every entry of `other` with `prefix.` prepended to its name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.push(format!("{prefix}.{n}"), t);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Errors unless `other` has the same tensor count and shapes.
    pub fn check_compatible(&self, other_shapes: &[&[usize]]) -> Result<()> {
        if other_shapes.len() != self.tensors.len() {
            return Err(NnError::Shape(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                other_shapes.len()
            )));
        }
        for ((n, t), s) in self.iter().zip(other_shapes) {
            if t.shape() != *s {
                return Err(NnError::Shape(format!(
                    "{n}: expected shape {:?}, got {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    /// Replaces every tensor's values with `other`'s (shapes must match).
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(&other.shapes())?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Sequential reader over the vars produced by [`crate::Graph::bind`].
#[derive(Debug)]
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| NnError::Usage(format!("parameter list exhausted at {}", self.pos)))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [Var]> {
        if self.pos + n > self.vars.len() {
            return Err(NnError::Usage(format!(
                "need {n} parameters at {}, only {} bound",
                self.pos,
                self.vars.len()
            )));
        }
        let s = &self.vars[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

/// SplitMix64 finalizer: derives decorrelated sub-seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
