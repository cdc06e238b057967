//! Named parameter storage, AdamW, and content hashing for freeze checks.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Ordered collection of named tensors owned by one model.
///
/// Each store carries a process-unique id so a [`crate::autograd::Graph`] can
/// tell parameters of different models apart. Cloning yields a new id.
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("params", &self.names.len()).field("elements", &self.num_elements()).finish()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: fresh_uid(), names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = Arc::new(value);
            return i;
        }
        self.names.push(name.clone());
        self.values.push(Arc::new(value));
        self.index.insert(name, self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &*self.values[i])
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub(crate) fn value_arc(&self, i: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[i])
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    /// Replaces a parameter in place, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self.index_of(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// SHA-256 over names, shapes and values (widened to `f64` bits).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gaussian initializer.
pub fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// One optimizer parameter group: which store, and at what learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Decoupled-weight-decay Adam over a single store. Several groups with
/// distinct learning rates are expressed as several `AdamW` instances sharing
/// one step counter through [`AdamW::step`].
pub struct AdamW<T> {
    cfg: AdamWConfig,
    store_uid: u64,
    state: Vec<Option<Moments<T>>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        Self { cfg, store_uid: store.uid(), state: (0..store.len()).map(|_| None).collect(), t: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Number of parameter tensors holding optimizer state.
    pub fn tracked_params(&self) -> usize {
        self.state.iter().filter(|s| s.is_some()).count()
    }

    /// Applies one update. `grads[i] == None` leaves parameter `i` untouched,
    /// including weight decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if store.uid() != self.store_uid || grads.len() != store.len() {
            return Err(Error::Invalid("optimizer bound to a different parameter store".into()));
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let st = self.state[i]
                .get_or_insert_with(|| Moments { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()) });
            let p = store.value_mut(i);
            p.ensure_same_shape(g, "AdamW gradient")?;
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(st.m.data_mut()).zip(st.v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_only_with_content() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::full(&[2, 2], 1.0));
        let h0 = s.content_hash();
        let c = s.clone();
        assert_eq!(c.content_hash(), h0);
        assert_ne!(c.uid(), s.uid());
        s.value_mut(0).data_mut()[3] = 1.5;
        assert_ne!(s.content_hash(), h0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::full(&[3], 0.0));
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.1) });
        let g = Tensor::from_vec(&[3], vec![2.0, -3.0, 0.5]).unwrap();
        opt.step(&mut s, &[Some(g)]).unwrap();
        for (x, want) in s.value(0).data().iter().zip([-0.1, 0.1, -0.1]) {
            assert!((x - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_leaves_store_bit_identical() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::from_fn(&[4], |i| i as f32 - 1.5));
        let h = s.content_hash();
        let mut opt = AdamW::new(&s, AdamWConfig::with_lr(0.0));
        opt.step(&mut s, &[Some(Tensor::full(&[4], 1.0))]).unwrap();
        assert_eq!(s.content_hash(), h);
    }

    #[test]
    fn optimizer_refuses_foreign_store() {
        let s = ParamStore::<f32>::new();
        let mut other = ParamStore::<f32>::new();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        assert!(opt.step(&mut other, &[]).is_err());
    }
}
