use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values by name; every stored parameter must be present
    /// with an identical shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<f32>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.entries {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_named", p.value.shape(), t.shape()));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn named_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .collect()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) bufs: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            bufs: store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| {
                let v = x.f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for b in &mut self.bufs {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bufs.iter().flatten().all(|x| *x == T::zero())
    }
}

/// Weight initializers.
pub mod init {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use crate::tensor::{Real, Tensor};

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        Tensor::matrix(fan_in, fan_out, data).expect("positive fan sizes")
    }

    pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }
}
