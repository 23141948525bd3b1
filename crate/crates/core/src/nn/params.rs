use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameters in insertion order. Names are dotted paths such as
/// `edge.conv0.weight`; the first segment names the partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    params: IndexMap<String, Tensor>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    /// Normal weights with std `sqrt(gain / fan_in)` plus zero bias, both
    /// trainable. Gain 2 is He init for ReLU layers; 1 suits output layers.
    /// Conv kernels are `[F, C, k, k]` (bias `F`), dense weights `[I, O]`
    /// (bias `O`).
    pub fn insert_layer<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        weight_shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        let bias_len = match weight_shape[..] {
            [f, _, _, _] => f,
            [.., o] => o,
            [] => return Err(Error::dim("insert_layer", "empty weight shape")),
        };
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let numel = weight_shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::new(weight_shape, data)?.with_requires_grad(true),
        )?;
        self.insert(
            format!("{prefix}.bias"),
            Tensor::zeros(vec![bias_len]).with_requires_grad(true),
        )
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Marks every parameter whose partition is in `partitions` as trainable
    /// and freezes the rest.
    pub fn set_trainable(&mut self, partitions: &[&str]) {
        for (name, t) in self.params.iter_mut() {
            let part = name.split('.').next().unwrap_or("");
            t.set_requires_grad(partitions.contains(&part));
        }
    }

    /// Moves all parameters of `other` into this registry.
    pub fn extend(&mut self, other: ParamRegistry) -> Result<()> {
        for (name, t) in other.params {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Copies out the parameters whose partition equals `partition`.
    pub fn partition(&self, partition: &str) -> ParamRegistry {
        let params = self
            .params
            .iter()
            .filter(|(name, _)| name.split('.').next() == Some(partition))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamRegistry { params }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Plain SGD: `p <- p - lr * grad` on every trainable parameter, then
    /// zeroes the gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {lr} must be finite and >= 0")));
        }
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(_, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(Error::State(format!("parameter `{name}` has no gradient")));
        }
        for t in self.params.values_mut().filter(|t| t.requires_grad()) {
            let (data, grad) = t.grad_mut_slot();
            let grad = grad.expect("checked above");
            for (p, g) in data.iter_mut().zip(grad.iter_mut()) {
                *p -= lr * *g;
                *g = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        let mut t = Tensor::scalar(value).with_requires_grad(true);
        t.accumulate_grad(&[grad]).unwrap();
        reg.insert("p", t).unwrap();
        reg
    }

    #[test]
    fn sgd_updates_and_zeroes() {
        let mut reg = single(1.0, 2.0);
        reg.sgd_step(0.1).unwrap();
        let p = reg.get("p").unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut reg = single(1.0, 2.0);
        reg.sgd_step(0.0).unwrap();
        assert_eq!(reg.get("p").unwrap().data(), &[1.0]);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut a = single(1.0, 2.0);
        a.sgd_step(0.1).unwrap();
        a.get_mut("p").unwrap().accumulate_grad(&[2.0]).unwrap();
        a.sgd_step(0.1).unwrap();
        let mut b = single(1.0, 4.0);
        b.sgd_step(0.1).unwrap();
        assert!((a.get("p").unwrap().data()[0] - b.get("p").unwrap().data()[0]).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::scalar(1.0).with_requires_grad(true)).unwrap();
        assert!(matches!(reg.sgd_step(0.1), Err(Error::State(_))));
    }

    #[test]
    fn frozen_params_skip_gradient_check() {
        let mut reg = ParamRegistry::new();
        reg.insert("edge.w", Tensor::scalar(1.0).with_requires_grad(true)).unwrap();
        reg.insert("server.w", Tensor::scalar(1.0).with_requires_grad(true)).unwrap();
        reg.set_trainable(&["server"]);
        reg.get_mut("server.w").unwrap().accumulate_grad(&[1.0]).unwrap();
        reg.sgd_step(0.5).unwrap();
        assert_eq!(reg.get("edge.w").unwrap().data(), &[1.0]);
        assert_eq!(reg.get("server.w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = ParamRegistry::new();
        reg.insert("a", Tensor::scalar(0.0)).unwrap();
        assert!(reg.insert("a", Tensor::scalar(0.0)).is_err());
    }
}
