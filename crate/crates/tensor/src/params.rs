use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones get a fresh identity so gradients never cross between copies.
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::invalid(
                "param_store",
                format!("duplicate parameter '{name}'"),
            ));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Replace values from another store holding the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| TensorError::invalid("load_from", format!("missing parameter '{name}'")))?;
            let t = other.get(src);
            if t.shape() != self.values[i].shape() {
                return Err(TensorError::mismatch("load_from", self.values[i].shape(), t.shape()));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// A store viewed for one forward pass, either trainable or frozen.
#[derive(Debug, Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Params<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Params { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Params {
            store,
            trainable: false,
        }
    }
}

/// Sums parameter gradients over several graphs (mini-batch accumulation).
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: store.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, store: &ParamStore, grads: &Gradients) {
        for (id, g) in grads.params_of(store.uid()) {
            if let Some(g) = g {
                self.sums[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.sums[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.sums.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.sums.iter_mut().flatten().for_each(|v| *v *= s);
    }

    /// Rescale so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().flatten().for_each(|v| *v = 0.0);
        self.count = 0;
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccumulator, lr: f64) {
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = &grads.sums[i];
            let v = &mut self.velocity[i];
            for ((theta, vel), &gi) in value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + gi + self.weight_decay * *theta;
                *theta -= lr * *vel;
            }
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&Params::trainable(&store), id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let mut acc = GradAccumulator::new(&store);
        acc.add(&store, &grads);
        let mut opt = Sgd::new(&store, 0.9, 0.0);
        opt.step(&mut store, &acc, 0.1);
        assert_eq!(store.get(id).data(), &[1.0 - 0.1 * 2.0, -2.0 + 0.1 * 4.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![3.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&Params::frozen(&store), id);
        let x = g.leaf(Tensor::from_vec(vec![2.0]));
        let y = g.mul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert_eq!(grads.params_of(store.uid()).count(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("a", Tensor::scalar(2.0)).is_err());
    }
}
