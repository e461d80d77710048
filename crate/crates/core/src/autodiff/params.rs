use rand::Rng;
use rustc_hash::FxHashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named trainable tensors plus their gradients and Adam moments.
///
/// A tensor of dims `[d0, .., dn]` is held as a `(d0*..*d(n-1)) x dn`
/// matrix; rank-1 tensors are single rows.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: FxHashMap<String, ParamId>,
    step: u64,
}

fn matrix_shape(dims: &[usize]) -> (usize, usize) {
    match dims.split_last() {
        None => (1, 1),
        Some((&last, rest)) => (rest.iter().product(), last),
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of optimizer steps taken.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn register(&mut self, name: &str, dims: &[usize], value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        let (r, c) = matrix_shape(dims);
        if value.shape() != (r, c) {
            return Err(Error::Shape(format!(
                "parameter `{name}` with dims {dims:?} given a {}x{} value",
                value.rows(),
                value.cols()
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            dims: dims.to_vec(),
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            value,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Glorot-uniform weights in `+-sqrt(6/(fan_in+fan_out))`.
    pub fn register_glorot(
        &mut self,
        name: &str,
        dims: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let (r, c) = matrix_shape(dims);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, dims, Tensor::from_vec(r, c, data)?)
    }

    pub fn register_zeros(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        let (r, c) = matrix_shape(dims);
        self.register(name, dims, Tensor::zeros(r, c))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn dims(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].dims
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Marks exactly the tensors whose name starts with one of `prefixes`
    /// as trainable.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for e in &mut self.entries {
            e.trainable = prefixes.iter().any(|p| e.name.starts_with(p));
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.entries[id.0].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Zeroes the Adam moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        for e in &mut self.entries {
            e.m.fill(0.0);
            e.v.fill(0.0);
        }
        self.step = 0;
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// One bias-corrected Adam update of every trainable tensor.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for e in &self.entries {
            if e.trainable && !e.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", e.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let g = e.grad.data();
            let m = e.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = e.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (e.m.data(), e.v.data());
            for ((x, mi), vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) of every tensor present in both.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            if let Some(&id) = other.by_name.get(&e.name) {
                let src = &other.entries[id.0];
                if src.dims != e.dims {
                    return Err(Error::Shape(format!(
                        "parameter `{}`: dims {:?} vs {:?}",
                        e.name, e.dims, src.dims
                    )));
                }
                e.value = src.value.clone();
            }
        }
        Ok(())
    }

    /// True when every value tensor is bitwise equal to `other`'s.
    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.dims == b.dims
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register_zeros("a", &[3]).unwrap();
        assert!(s.register_zeros("a", &[3]).is_err());
        assert!(s.register("b", &[2, 2], Tensor::zeros(1, 4)).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut s = ParamStore::new();
        let id = s.register("w", &[2], Tensor::row(vec![0.5, -1.0])).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -1.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s.register("w", &[3], Tensor::row(vec![0.0, 0.0, 0.0])).unwrap();
        s.accumulate_grad(id, &Tensor::row(vec![2.0, -0.3, 5e3]));
        let cfg = AdamConfig::default();
        s.adam_step(&cfg).unwrap();
        for (x, sign) in s.value(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * cfg.lr).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut s = ParamStore::new();
        let id = s.register_zeros("layer.w", &[1]).unwrap();
        s.accumulate_grad(id, &Tensor::row(vec![f64::NAN]));
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.register_zeros("enc.w", &[1]).unwrap();
        let b = s.register_zeros("dec.w", &[1]).unwrap();
        s.accumulate_grad(a, &Tensor::row(vec![1.0]));
        s.accumulate_grad(b, &Tensor::row(vec![1.0]));
        s.train_only(&["dec."]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(a).item(), 0.0);
        assert!(s.value(b).item() < 0.0);
    }
}
