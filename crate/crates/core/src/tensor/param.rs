use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable: true,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.position(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Record every parameter on the tape; trainable ones as differentiable
    /// leaves. The returned handles are in store order.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Record every parameter as a non-differentiable constant.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bindings {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bindings { vars }
    }

    /// Add the tape gradients of bound parameters into their `grad` buffers.
    /// Parameters the backward pass never reached get an explicit zero.
    pub fn collect_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            if !p.trainable {
                continue;
            }
            let shape = p.value.shape();
            let grad = p.grad.get_or_insert_with(|| Tensor::zeros(shape));
            if let Some(g) = tape.grad(v) {
                grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, store: &ParamStore, name: &str) -> Result<Var> {
        store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros(Shape::new(1, 1, 3, 3))).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(Shape::scalar())).is_err());
        assert_eq!(s.num_scalars(), 9);
    }

    #[test]
    fn collect_grads_roundtrip() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(Shape::new(1, 1, 1, 2), 3.0)).unwrap();
        s.insert("unused", Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let w = b.var(&s, "w").unwrap();
        let y = tape.scale(w, 5.0);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        s.collect_grads(&tape, &b);
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap().data(), &[5.0, 5.0]);
        assert_eq!(s.get("unused").unwrap().grad.as_ref().unwrap().data(), &[0.0]);
    }
}
