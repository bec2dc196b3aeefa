//! Named parameter blocks.

use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Index of a block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor2,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        self.blocks.push(ParamBlock {
            name: name.into(),
            value,
        });
        ParamId(self.blocks.len() - 1)
    }

    /// Normal init with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut StreamRng,
    ) -> ParamId {
        let data = rng::gaussian_vec(rng, rows * cols)
            .into_iter()
            .map(|x| x * std)
            .collect();
        self.add(name, Tensor2::new(rows, cols, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.blocks[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.blocks[id.0].name
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// SHA-256 over block names, shapes and little-endian `f64` values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.blocks {
            h.update(b.name.as_bytes());
            h.update((b.value.rows() as u64).to_le_bytes());
            h.update((b.value.cols() as u64).to_le_bytes());
            for x in b.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value to `f32` precision (checkpoint storage precision).
    pub fn round_to_f32(&mut self) {
        for b in &mut self.blocks {
            b.value.round_to_f32();
        }
    }

    /// Replaces values from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.blocks.len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "block `{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// How a module's weights enter a graph.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Scope<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    /// Leaf for block `id`: a parameter when trainable, a borrowed constant otherwise.
    pub fn w(&self, g: &mut Graph<'a>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store.get(id), id)
        } else {
            g.constant_ref(self.store.get(id))
        }
    }
}
