//! Embedding of a native-resolution patch into a Q-times average-pooled
//! window of its surroundings.

use crate::error::{Error, Result};
use crate::network::kernels::{avg_pool, avg_pool_backward};
use crate::tensor::Tensor;

/// A pooled window with a slot for the pooled patch.
#[derive(Clone, Debug)]
pub struct PooledEmbedding {
    pooled_window: Tensor,
    q: usize,
    patch_h: usize,
    patch_w: usize,
    /// Slot corner in pooled coordinates.
    slot_x: usize,
    slot_y: usize,
}

pub(crate) fn pool_times(t: &Tensor, q: usize) -> Tensor {
    let mut out = t.clone();
    for _ in 0..q {
        out = avg_pool(&out);
    }
    out
}

impl PooledEmbedding {
    /// `position` is the patch's top-left corner inside `window`, in native
    /// pixels. Position and patch size must be multiples of 2^q.
    pub fn new(
        window: &Tensor,
        q: usize,
        patch_h: usize,
        patch_w: usize,
        position: (usize, usize),
    ) -> Result<Self> {
        let (x, y) = position;
        let block = 1usize << q;
        if x % block != 0
            || y % block != 0
            || !patch_h.is_multiple_of(block)
            || !patch_w.is_multiple_of(block)
        {
            return Err(Error::InvalidArgument(format!(
                "patch {patch_w}x{patch_h} at ({x},{y}) not aligned to {block}-pixel blocks"
            )));
        }
        if x + patch_w > window.width() || y + patch_h > window.height() {
            return Err(Error::InvalidArgument(format!(
                "patch {patch_w}x{patch_h} at ({x},{y}) outside {}x{} window",
                window.width(),
                window.height()
            )));
        }
        if !window.width().is_multiple_of(block) || !window.height().is_multiple_of(block) {
            return Err(Error::InvalidArgument(format!(
                "window {}x{} not a multiple of {block}",
                window.width(),
                window.height()
            )));
        }
        Ok(PooledEmbedding {
            pooled_window: pool_times(window, q),
            q,
            patch_h,
            patch_w,
            slot_x: x >> q,
            slot_y: y >> q,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn pooled_shape(&self) -> (usize, usize, usize) {
        self.pooled_window.shape()
    }

    /// x̂_g: the pooled window with the pooled patch written into its slot.
    pub fn embed(&self, patch: &Tensor) -> Result<Tensor> {
        if patch.shape() != (self.pooled_window.channels(), self.patch_h, self.patch_w) {
            return Err(Error::Shape(format!(
                "patch {:?} does not match the embedding slot",
                patch.shape()
            )));
        }
        let mut out = self.pooled_window.clone();
        out.paste(&pool_times(patch, self.q), self.slot_x, self.slot_y)?;
        Ok(out)
    }

    /// Adjoint of [`embed`](Self::embed) w.r.t. the patch: the slot's
    /// cotangent spread uniformly over each 2^q×2^q block.
    pub fn adjoint(&self, cotangent: &Tensor) -> Result<Tensor> {
        if cotangent.shape() != self.pooled_window.shape() {
            return Err(Error::Shape(format!(
                "cotangent {:?} vs pooled window {:?}",
                cotangent.shape(),
                self.pooled_window.shape()
            )));
        }
        let mut g = cotangent.crop(
            self.slot_x,
            self.slot_y,
            self.patch_w >> self.q,
            self.patch_h >> self.q,
        )?;
        for level in (0..self.q).rev() {
            g = avg_pool_backward(&g, self.patch_h >> level, self.patch_w >> level);
        }
        Ok(g)
    }
}

/// One-shot form of [`PooledEmbedding::embed`].
pub fn embed_pooled(
    patch: &Tensor,
    window: &Tensor,
    q: usize,
    position: (usize, usize),
) -> Result<Tensor> {
    PooledEmbedding::new(window, q, patch.height(), patch.width(), position)?.embed(patch)
}
