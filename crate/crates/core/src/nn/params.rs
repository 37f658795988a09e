//! Parameter storage shared by all trainable models.
//!
//! Parameters live outside any computation graph in a [`ParamStore`]; a tape
//! references them by [`ParamId`]. Gradients come back as a dense
//! [`Grads`] vector indexed the same way, which makes multi-graph
//! accumulation and freezing (absent gradient = frozen) straightforward.

use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;

use crate::rng::Rng;

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors with stable ids.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique; they key checkpoints.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Flatten all parameters into one vector in id order (checkpointing).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Inverse of [`flatten`]; shapes must already match.
    pub fn unflatten(&mut self, flat: &[f64]) -> crate::error::Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(crate::error::Error::Checkpoint(format!(
                "parameter count mismatch: store has {}, payload has {}",
                self.scalar_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// SHA-256 over every parameter's name, shape, and raw bytes in id
    /// order. Two stores digest equal iff they hold bitwise-equal tensors
    /// under the same names, which is how freezing is audited.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy values from `src` into identically named parameters of this
    /// store (name-matched warm start). Shapes of matched names must
    /// agree. Returns how many parameters were copied.
    pub fn adopt_matching(&mut self, src: &ParamStore) -> crate::error::Result<usize> {
        let mut copied = 0;
        for src_id in src.ids() {
            let name = src.name(src_id);
            if let Some(dst_id) = self.lookup(name) {
                let value = src.value(src_id);
                if self.values[dst_id.0].shape() != value.shape() {
                    return Err(crate::error::Error::Checkpoint(format!(
                        "parameter {name} has shape {:?} here but {:?} in the source",
                        self.values[dst_id.0].shape(),
                        value.shape()
                    )));
                }
                self.values[dst_id.0] = value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Dense gradient map returned by a backward pass. `None` means the
/// parameter did not participate in the graph.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn zeros(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: ArrayD<f64>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Merge another gradient map into this one (fixed order, deterministic).
    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Initializers. All draws come from the caller's seeded stream.
pub mod init {
    use super::*;

    pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::ones(IxDyn(shape))
    }

    pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| gauss(rng) * std).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data agree")
    }

    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data agree")
    }

    /// Xavier/Glorot scaling for a (fan_out, fan_in)-shaped weight.
    pub fn xavier(rng: &mut Rng, fan_out: usize, fan_in: usize) -> ArrayD<f64> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        normal(rng, &[fan_out, fan_in], std)
    }

    /// Box-Muller; two uniform draws per call keeps the stream layout simple.
    fn gauss(rng: &mut Rng) -> f64 {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::root(3);
        store.add("a", init::normal(&mut rng, &[2, 3], 1.0));
        store.add("b", init::uniform(&mut rng, &[4], -1.0, 1.0));
        let flat = store.flatten();
        let mut store2 = store.clone();
        store2.value_mut(ParamId(0)).fill(0.0);
        store2.unflatten(&flat).unwrap();
        assert_eq!(store.value(ParamId(0)), store2.value(ParamId(0)));
    }

    #[test]
    fn grads_merge_accumulates() {
        let mut a = Grads::zeros(2);
        a.accumulate(ParamId(0), ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut b = Grads::zeros(2);
        b.accumulate(ParamId(0), ArrayD::from_elem(IxDyn(&[2]), 2.0));
        b.accumulate(ParamId(1), ArrayD::from_elem(IxDyn(&[1]), 5.0));
        a.merge(b);
        assert_eq!(a.get(ParamId(0)).unwrap()[[0]], 3.0);
        assert_eq!(a.get(ParamId(1)).unwrap()[[0]], 5.0);
    }
}
