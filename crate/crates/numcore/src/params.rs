use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_gaussian;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Vec<f64>,
}

/// Named trainable tensors in insertion order, each with a gradient slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    slots: IndexMap<String, Slot>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    name: String,
    value: Tensor,
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let list: Vec<Stored> = self
            .slots
            .iter()
            .map(|(name, slot)| Stored {
                name: name.clone(),
                value: slot.value.clone(),
            })
            .collect();
        list.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let list = Vec::<Stored>::deserialize(d)?;
        let mut set = ParamSet::new();
        for s in list {
            set.insert(&s.name, s.value).map_err(serde::de::Error::custom)?;
        }
        Ok(set)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = vec![0.0; value.len()];
        self.slots.insert(name.to_string(), Slot { value, grad });
        Ok(())
    }

    /// Inserts `N(0, std²)` entries drawn from `seed`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> Result<()> {
        let t = seeded_gaussian(seed, shape).map(|v| v * std);
        self.insert(name, t)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamSet::set",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.slots
            .get(name)
            .map(|s| s.grad.as_slice())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.grad.len() != g.len() {
            return Err(Error::invalid(
                "accumulate_grad",
                format!("{name}: {} vs {}", slot.grad.len(), g.len()),
            ));
        }
        for (a, b) in slot.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// Visits every value together with its gradient, mutably.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>, &[f64])) {
        for (name, slot) in self.slots.iter_mut() {
            f(name, slot.value.data_mut(), &slot.grad);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_unknown() {
        let mut p = ParamSet::new();
        p.insert_const("w", &[2, 2], 1.0).unwrap();
        assert_eq!(p.insert_const("w", &[1], 0.0), Err(Error::DuplicateParam("w".into())));
        assert!(matches!(p.get("v"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut p = ParamSet::new();
        p.insert_normal("b", &[3, 5], 0.1, 9).unwrap();
        p.insert_const("a", &[1, 2], 1.0 / 3.0).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: ParamSet = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.names().collect::<Vec<_>>(), vec!["b", "a"]);
    }

    #[test]
    fn grads_accumulate_and_reset() {
        let mut p = ParamSet::new();
        p.insert_const("w", &[1, 2], 0.0).unwrap();
        p.accumulate_grad("w", &[1.0, 2.0]).unwrap();
        p.accumulate_grad("w", &[1.0, 2.0]).unwrap();
        assert_eq!(p.grad("w").unwrap(), &[2.0, 4.0]);
        p.zero_grads();
        assert_eq!(p.grad("w").unwrap(), &[0.0, 0.0]);
    }
}
