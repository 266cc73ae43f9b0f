use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Shape, Tape, Var};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: (usize, usize, usize),
}

impl Slot {
    pub fn shape(&self) -> Shape {
        Shape::new(self.shape.0, self.shape.1, self.shape.2)
    }
}

/// Named parameter slots over one flat buffer. Slots are kept sorted by name
/// and laid out contiguously in that order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    slots: Vec<Slot>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a slot.
    pub fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) {
        assert_eq!(values.len(), shape.len(), "slot `{name}` values do not match shape");
        let mut map: BTreeMap<String, (Shape, Vec<f64>)> =
            self.slots.iter().map(|s| (s.name.clone(), (s.shape(), self.data[s.offset..s.offset + s.len].to_vec()))).collect();
        map.insert(name.to_string(), (shape, values));
        self.slots.clear();
        self.data.clear();
        for (name, (shape, values)) in map {
            self.slots.push(Slot {
                name,
                offset: self.data.len(),
                len: values.len(),
                shape: (shape.c, shape.h, shape.w),
            });
            self.data.extend(values);
        }
    }

    /// Rebuilds a vector from a slot table and payload (checkpoint loading).
    pub fn from_parts(slots: Vec<Slot>, data: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for w in slots.windows(2) {
            if w[0].name >= w[1].name {
                return Err(Error::Format("slot table is not sorted by name".into()));
            }
        }
        for s in &slots {
            if s.offset != expected || s.len != s.shape().len() {
                return Err(Error::Format(format!("slot `{}` has an inconsistent layout", s.name)));
            }
            expected += s.len;
        }
        if expected != data.len() {
            return Err(Error::Format("payload length does not match slot table".into()));
        }
        Ok(Self { slots, data })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slot(name).is_some()
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let s = self.slot(name).unwrap_or_else(|| panic!("unknown slot `{name}`"));
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let s = self.slot(name).unwrap_or_else(|| panic!("unknown slot `{name}`")).clone();
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn try_get(&self, name: &str) -> Result<&[f64]> {
        self.slot(name)
            .map(|s| &self.data[s.offset..s.offset + s.len])
            .ok_or_else(|| invalid(format!("missing parameter slot `{name}`")))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self { slots: self.slots.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.slots == other.slots
    }

    /// Slot owning flat index `i`.
    pub fn slot_of(&self, i: usize) -> &Slot {
        self.slots.iter().find(|s| i >= s.offset && i < s.offset + s.len).expect("index out of range")
    }

    /// Copies every slot of `other` into `self`, adding missing ones.
    pub fn merge(&mut self, other: &ParamVector) {
        for s in other.slots() {
            self.insert(&s.name, s.shape(), other.get(&s.name).to_vec());
        }
    }

    /// Subset of slots whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamVector {
        let mut out = ParamVector::new();
        for s in self.slots.iter().filter(|s| s.name.starts_with(prefix)) {
            out.insert(&s.name, s.shape(), self.get(&s.name).to_vec());
        }
        out
    }
}

/// Tape handles for every slot of a [`ParamVector`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers every slot as a trainable leaf (or as constants when
    /// `trainable` is false, for forward-only evaluation).
    pub fn load(tape: &mut Tape, params: &ParamVector, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for s in params.slots() {
            let v = params.get(&s.name).to_vec();
            let var = if trainable { tape.param(v, s.shape()) } else { tape.constant(v, s.shape()) };
            vars.insert(s.name.clone(), var);
        }
        Self { vars }
    }

    /// Handles of both sets; `other` wins on name clashes.
    pub fn union(&self, other: &ParamVars) -> ParamVars {
        let mut vars = self.vars.clone();
        vars.extend(other.vars.iter().map(|(k, v)| (k.clone(), *v)));
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter slot `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Evaluates `loss_fn` and its gradient w.r.t. every slot of `params`.
pub fn backward<F>(loss_fn: F, params: &ParamVector) -> Result<(f64, ParamVector)>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, params, true);
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss evaluated to {value}")));
    }
    let grads = tape.backward(loss);
    let mut out = params.zeros_like();
    for s in params.slots() {
        let g = grads.get(vars.get(&s.name));
        out.get_mut(&s.name).copy_from_slice(&g);
    }
    Ok((value, out))
}

/// Forward-only evaluation of `loss_fn`.
pub fn evaluate<F>(loss_fn: &F, params: &ParamVector) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, params, false);
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_sorted_and_contiguous() {
        let mut p = ParamVector::new();
        p.insert("z", Shape::vector(2), vec![1.0, 2.0]);
        p.insert("a", Shape::vector(3), vec![3.0, 4.0, 5.0]);
        let names: Vec<_> = p.slots().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["a", "z"]);
        assert_eq!(p.slot("a").unwrap().offset, 0);
        assert_eq!(p.slot("z").unwrap().offset, 3);
        assert_eq!(p.get("z"), &[1.0, 2.0]);
        assert!(ParamVector::from_parts(p.slots().to_vec(), p.data().to_vec()).is_ok());
        assert!(ParamVector::from_parts(p.slots().to_vec(), vec![0.0; 4]).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut p = ParamVector::new();
        p.insert("x", Shape::vector(3), vec![0.5, -1.5, 2.0]);
        let (_, g) = backward(|t, v| Ok(t.sum(v.get("x"))), &p).unwrap();
        assert_eq!(g.get("x"), &[1.0, 1.0, 1.0]);
        let (_, g) = backward(
            |t, v| {
                let q = t.square(v.get("x"));
                let s = t.sum(q);
                Ok(t.scale(s, 0.5))
            },
            &p,
        )
        .unwrap();
        assert_eq!(g.get("x"), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut p = ParamVector::new();
        p.insert("x", Shape::scalar(), vec![-1.0]);
        let r = backward(|t, v| Ok(t.ln(v.get("x"))), &p);
        assert!(matches!(r, Err(Error::Diverged(_))));
    }
}
