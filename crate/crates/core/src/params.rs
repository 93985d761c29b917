use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ledger::Category;
use crate::tensor::{Element, Tensor};

/// A named weight, with a gradient slot that only trainable parameters use.
#[derive(Debug)]
pub struct Parameter<T: Element> {
    name: String,
    value: Rc<Tensor<T>>,
    trainable: bool,
    grad: Option<Tensor<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let value = if value.category() == Category::Weights {
            value
        } else {
            value.copy_as(Category::Weights)
        };
        Parameter {
            name: name.into(),
            value: Rc::new(value),
            trainable,
            grad: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    /// Mutable access; copies the buffer first if a tape still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.value)
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if !self.trainable {
            return Err(Error::State(format!(
                "frozen parameter `{}` cannot hold a gradient",
                self.name
            )));
        }
        if grad.shape() != self.value.shape() {
            return Err(Error::dim("set_grad", self.value.shape(), grad.shape()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Parameters of one model, keyed (and iterated) by name in lexicographic order.
#[derive(Debug, Default)]
pub struct ParamStore<T: Element> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<()> {
        if self.params.contains_key(param.name()) {
            return Err(Error::Config(format!(
                "duplicate parameter name `{}`",
                param.name()
            )));
        }
        self.params.insert(param.name().to_string(), param);
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        self.insert(Parameter::new(name, value, trainable))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter<T>> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values().filter(|p| p.trainable())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|p| p.name().to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.trainable().map(|p| p.numel()).sum()
    }

    /// Trainable share of all parameters, in percent.
    pub fn trainable_percent(&self) -> f64 {
        100.0 * self.trainable_numel() as f64 / self.total_numel().max(1) as f64
    }

    /// Write a gradient map into the trainable parameters.
    pub fn apply_grads(&mut self, grads: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(&name)?.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.clear_grad();
        }
    }
}
