use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Named tensors with insertion-ordered, deterministic iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Inserts a new entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing entry, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) if slot.dims() == value.dims() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::shape(format!(
                "`{name}`: {:?} vs {:?}",
                slot.dims(),
                value.dims()
            ))),
            None => Err(Error::Config(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.dims() == vb.dims())
    }

    /// Copies every entry of `other` into `self`, adding new names.
    pub fn extend(&mut self, other: &ParamSet) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(k, v.clone())?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// Tape variables for each entry of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    /// Pushes every entry of `params` onto `tape`, as trainable leaves when
    /// `trainable`, constants otherwise.
    pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.to_string(), var)
            })
            .collect();
        Bindings { vars }
    }

    /// Variable bound to `name`.
    ///
    /// Panics when the name was never bound; model code owns the naming.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn merge(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Evaluates `f` at `params` and returns its value and gradient with respect
/// to every entry of `params`.
pub fn value_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bindings::bind(&mut tape, params, true);
    let root = f(&mut tape, &bound)?;
    let value = tape.value(root);
    if value.dims() != (1, 1) {
        return Err(Error::shape(format!(
            "objective must be scalar, got {:?}",
            value.dims()
        )));
    }
    let value = value.item();
    if !value.is_finite() {
        return Err(Error::numeric(format!("objective evaluated to {value}")));
    }
    let grads = tape.backward(root)?;
    let mut out = ParamSet::new();
    for (name, var) in bound.iter() {
        let g = grads.get(var);
        if !g.all_finite() {
            return Err(Error::numeric_in(name, "non-finite gradient"));
        }
        out.insert(name, g)?;
    }
    Ok((value, out))
}

/// Evaluates `f` with every parameter bound as a constant.
pub fn value_only<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bindings::bind(&mut tape, params, false);
    let root = f(&mut tape, &bound)?;
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(Error::numeric(format!("objective evaluated to {value}")));
    }
    Ok(value)
}
