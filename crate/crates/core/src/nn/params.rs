use rand::Rng;
use sha2::{Digest, Sha256};

use super::Tensor;

/// Ordered collection of named, independently owned parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a fresh name and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    /// Convolution weight `[co, ci, k, k]` drawn uniformly from
    /// `±1/sqrt(ci*k*k)`.
    pub fn conv_weight(
        &mut self,
        name: impl Into<String>,
        co: usize,
        ci: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let fan_in = (ci * k * k) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let data = (0..co * ci * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.push(name, Tensor::from_vec([co, ci, k, k], data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, len: usize) -> usize {
        self.push(name, Tensor::zeros([len, 1, 1, 1]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Replaces every tensor's values, checking names and shapes agree.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(format!(
                    "shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                ));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
