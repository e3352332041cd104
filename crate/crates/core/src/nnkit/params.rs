use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One named parameter tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub m: Vec<S>,
    pub v: Vec<S>,
    /// Frozen entries (running statistics, fixed feature extractors) are
    /// skipped by the optimizer and by gradient checks.
    pub trainable: bool,
}

impl<S: Scalar> ParamEntry<S> {
    fn new(shape: Vec<usize>, value: Vec<S>, trainable: bool) -> Self {
        let n = value.len();
        ParamEntry {
            shape,
            value,
            grad: vec![S::zero(); n],
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Insertion-ordered map of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    entries: IndexMap<String, ParamEntry<S>>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<S>, trainable: bool) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::shape(format!("parameter {name}"), numel, value.len()));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry::new(shape.to_vec(), value, trainable));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&[S]> {
        Ok(&self.get(name)?.value)
    }

    /// Adds `g` into the gradient buffer of `name`.
    pub fn accumulate(&mut self, name: &str, g: &[S]) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.grad.len() != g.len() {
            return Err(Error::shape(format!("gradient of {name}"), e.grad.len(), g.len()));
        }
        for (a, &b) in e.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.iter())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Moves every entry of `other` into this store.
    pub fn merge(&mut self, other: ParamStore<S>) -> Result<()> {
        for (name, e) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter name {name}")));
            }
            self.entries.insert(name, e);
        }
        Ok(())
    }

    /// Converts values and optimizer state to another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::lit(x.as_f64())).collect::<Vec<T>>();
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            shape: e.shape.clone(),
                            value: conv(&e.value),
                            grad: conv(&e.grad),
                            m: conv(&e.m),
                            v: conv(&e.v),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_checks_shape_and_uniqueness() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", &[2, 3], vec![0.0; 6], true).unwrap();
        assert!(p.insert("w", &[1], vec![0.0], true).is_err());
        assert!(p.insert("b", &[4], vec![0.0; 3], true).is_err());
        let e = p.get("w").unwrap();
        assert_eq!((e.grad.len(), e.m.len(), e.v.len()), (6, 6, 6));
    }

    #[test]
    fn accumulate_and_zero() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", &[2], vec![1.0, 2.0], true).unwrap();
        p.accumulate("w", &[0.5, 0.5]).unwrap();
        p.accumulate("w", &[0.5, 1.0]).unwrap();
        assert_eq!(p.get("w").unwrap().grad, vec![1.0, 1.5]);
        assert!(p.accumulate("w", &[1.0]).is_err());
        p.zero_grad();
        assert_eq!(p.get("w").unwrap().grad, vec![0.0, 0.0]);
    }
}
