//! Named parameter blocks with a flat coordinate space.
//!
//! Every trainable tensor in the model lives here under a stable name (the
//! checkpoint format serializes blocks by name). Embedding pad rows are
//! frozen: excluded from the trainable count, their gradients masked and no
//! weight decay applied.

use alloc::string::String;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Block<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Leading rows whose values are frozen (pad embeddings).
    pub frozen_prefix_rows: usize,
    /// Flat offset of this block's first coordinate.
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    blocks: Vec<Block<S>>,
    total: usize,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            blocks: Vec::new(),
            total: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.add_frozen(name, tensor, 0)
    }

    pub fn add_frozen(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<S>,
        frozen_prefix_rows: usize,
    ) -> ParamId {
        let id = ParamId(self.blocks.len());
        let offset = self.total;
        self.total += tensor.len();
        self.blocks.push(Block {
            name: name.into(),
            tensor,
            frozen_prefix_rows,
            offset,
        });
        id
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.blocks[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.blocks[id.0].tensor
    }

    pub fn block(&self, id: ParamId) -> &Block<S> {
        &self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Block<S>] {
        &self.blocks
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .map(ParamId)
    }

    /// Total number of scalars including frozen rows.
    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Number of trainable scalars (frozen pad rows excluded).
    pub fn trainable_len(&self) -> usize {
        self.total
            - self
                .blocks
                .iter()
                .map(|b| b.frozen_prefix_rows * b.tensor.last_dim())
                .sum::<usize>()
    }

    /// Flat mask, true where the coordinate is frozen.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = alloc::vec![false; self.total];
        for b in &self.blocks {
            let n = b.frozen_prefix_rows * b.tensor.last_dim();
            for m in &mut mask[b.offset..b.offset + n] {
                *m = true;
            }
        }
        mask
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let mut lo = 0usize;
        let mut hi = self.blocks.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.blocks[mid].offset <= flat {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, flat - self.blocks[lo].offset)
    }

    pub fn flat_read(&self, flat: usize) -> S {
        let (b, i) = self.locate(flat);
        self.blocks[b].tensor.data()[i]
    }

    pub fn flat_write(&mut self, flat: usize, v: S) {
        let (b, i) = self.locate(flat);
        self.blocks[b].tensor.data_mut()[i] = v;
    }

    /// Copy all coordinates into one flat vector (block order).
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total);
        for b in &self.blocks {
            out.extend_from_slice(b.tensor.data());
        }
        out
    }

    /// Overwrite all coordinates from a flat vector (block order).
    pub fn load_flat(&mut self, flat: &[S]) {
        debug_assert_eq!(flat.len(), self.total);
        for b in &mut self.blocks {
            let n = b.tensor.len();
            b.tensor
                .data_mut()
                .copy_from_slice(&flat[b.offset..b.offset + n]);
        }
    }
}
