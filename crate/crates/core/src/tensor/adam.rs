use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A parameter together with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step: u64,
}

impl<T: Real> ParamEntry<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        ParamEntry {
            value,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step: 0,
        }
    }
}

/// Named parameters with optimizer state, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<T>) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.all_finite())
    }

    /// Same parameters in another precision; optimizer state is carried over.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            first_moment: e.first_moment.cast(),
                            second_moment: e.second_moment.cast(),
                            step: e.step,
                        },
                    )
                })
                .collect(),
        }
    }

    /// One bias-corrected Adam update.
    ///
    /// A registered parameter without a gradient in `grads` is treated as
    /// having a zero gradient: its moments decay and its counter advances.
    /// A gradient whose shape disagrees with its parameter is an error, and
    /// nothing is updated in that case.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        cfg: AdamConfig,
    ) -> Result<()> {
        for (name, entry) in &self.entries {
            if let Some(g) = grads.get(name) {
                if g.shape() != entry.value.shape() {
                    return Err(Error::dim(
                        "adam_step",
                        format!(
                            "gradient for {name} has shape {:?}, parameter {:?}",
                            g.shape(),
                            entry.value.shape()
                        ),
                    ));
                }
            }
        }
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let eps = T::of(cfg.eps);
        let one = T::one();
        for (name, entry) in self.entries.iter_mut() {
            entry.step += 1;
            let t = entry.step as i32;
            let c1 = T::of(1.0 - cfg.beta1.powi(t));
            let c2 = T::of(1.0 - cfg.beta2.powi(t));
            let lr = T::of(lr);
            let grad = grads.get(name).map(|g| g.data());
            let value = entry.value.data_mut();
            let m = entry.first_moment.data_mut();
            let v = entry.second_moment.data_mut();
            for i in 0..value.len() {
                let g = grad.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_values_but_counts_steps() {
        let mut s = store(1.5);
        s.adam_step(&grads(0.0), 0.1, AdamConfig::default()).unwrap();
        s.adam_step(&BTreeMap::new(), 0.1, AdamConfig::default())
            .unwrap();
        let e = s.entry("p").unwrap();
        assert_eq!(e.value.item().unwrap(), 1.5);
        assert_eq!(e.step, 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(0.0);
        s.adam_step(&grads(1.0), 0.01, AdamConfig::default())
            .unwrap();
        let moved = s.get("p").unwrap().item().unwrap();
        assert!((moved + 0.01).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn quadratic_objective_strictly_decreases() {
        let mut s = store(0.0);
        let objective = |p: f64| (p - 3.0) * (p - 3.0);
        let mut last = objective(0.0);
        for _ in 0..10 {
            let p = s.get("p").unwrap().item().unwrap();
            s.adam_step(&grads(2.0 * (p - 3.0)), 0.1, AdamConfig::default())
                .unwrap();
            let now = objective(s.get("p").unwrap().item().unwrap());
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn moment_shapes_follow_parameters() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[3, 4]));
        let e = s.entry("w").unwrap();
        assert_eq!(e.first_moment.shape(), &[3, 4]);
        assert_eq!(e.second_moment.shape(), &[3, 4]);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut s = store(0.0);
        let bad = BTreeMap::from([("p".to_string(), Tensor::zeros(&[2]))]);
        assert!(s.adam_step(&bad, 0.1, AdamConfig::default()).is_err());
        assert_eq!(s.entry("p").unwrap().step, 0);
    }
}
