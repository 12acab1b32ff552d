//! Named, ordered parameter registry.
//!
//! Model components hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds
//! every parameter onto a fresh tape; gradients are read back in registry order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{read_u32, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

/// Parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Binding from tape variables listed in registry order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.values
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Gradients for every parameter in registry order; parameters the loss
    /// does not reach get zeros.
    pub fn grads(&self, tape: &Tape<F>, bound: &Bound) -> Vec<Tensor<F>> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// `u32 count`, then per parameter `u32 name length`, UTF-8 name, tensor blob.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            value.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(Error::Format(format!("parameter name length {len}")));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let name = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            store.register(name, Tensor::read_from(r)?);
        }
        Ok(store)
    }

    /// Copies values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter registry names differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Format(format!("shape {:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trip_keeps_order() {
        let mut s = ParamStore::<f32>::new();
        s.register("b.w", Tensor::full(&[2, 2], 0.5));
        s.register("a.bias", Tensor::full(&[3], -1.0));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>(), ["b.w", "a.bias"]);
        assert_eq!(back.values(), s.values());
    }
}
