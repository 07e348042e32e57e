//! Propagation of the hole mask to the resolution of each statistics layer.
//!
//! Masks are 1×H×W tensors holding 0 (unknown, inside Ω) or 1 (known).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{FeatureNetwork, LayerKind};

/// The input mask and its per-statistics-layer adaptations.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub base: Tensor,
    pub levels: Vec<Tensor>,
    /// Expansion applied at each level; empty for exact masks.
    pub expansions: Vec<usize>,
}

impl MaskPyramid {
    /// A pyramid of all-ones masks (nothing masked).
    pub fn ones(net: &FeatureNetwork, height: usize, width: usize) -> Self {
        let levels = net
            .statistics_shapes(height, width)
            .into_iter()
            .map(|(_, h, w)| Tensor::filled(1, h, w, 1.0))
            .collect();
        MaskPyramid {
            base: Tensor::filled(1, height, width, 1.0),
            levels,
            expansions: vec![0; net.num_statistics()],
        }
    }

    pub fn zero_counts(&self) -> Vec<usize> {
        self.levels
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v == 0.0).count())
            .collect()
    }
}

/// 2×2 stride-2 pooling that marks a cell 0 if any cell in its window is 0.
pub fn min_pool(m: &Tensor) -> Tensor {
    let (c, h, w) = m.shape();
    Tensor::from_fn(c, h / 2, w / 2, |ch, i, j| {
        let v = m
            .get(ch, 2 * i, 2 * j)
            .min(m.get(ch, 2 * i, 2 * j + 1))
            .min(m.get(ch, 2 * i + 1, 2 * j))
            .min(m.get(ch, 2 * i + 1, 2 * j + 1));
        if v == 0.0 {
            0.0
        } else {
            1.0
        }
    })
}

/// Grows the zero region by `ry` rows and `rx` columns (a box dilation).
fn dilate_zeros_rect(m: &Tensor, ry: usize, rx: usize) -> Tensor {
    let (c, h, w) = m.shape();
    if ry == 0 && rx == 0 {
        return m.clone();
    }
    let mut out = Tensor::filled(c, h, w, 1.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if m.get(ch, y, x) == 0.0 {
                    for yy in y.saturating_sub(ry)..(y + ry + 1).min(h) {
                        for xx in x.saturating_sub(rx)..(x + rx + 1).min(w) {
                            out.set(ch, yy, xx, 0.0);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Grows the zero region by `radius` pixels in Chebyshev distance.
pub fn dilate_zeros(m: &Tensor, radius: usize) -> Tensor {
    dilate_zeros_rect(m, radius, radius)
}

fn check_mask(m: &Tensor) -> Result<()> {
    if m.channels() != 1 {
        return Err(Error::Shape(format!("mask has {} channels", m.channels())));
    }
    Ok(())
}

/// Min-pools the mask through every pooling layer up to each statistics
/// layer, then dilates the zeros by that layer's expansion.
pub(super) fn propagate_mask(
    net: &FeatureNetwork,
    m: &Tensor,
    expansions: &[usize],
) -> Result<MaskPyramid> {
    check_mask(m)?;
    if expansions.len() != net.num_statistics() {
        return Err(Error::InvalidArgument(format!(
            "{} expansions for {} statistics layers",
            expansions.len(),
            net.num_statistics()
        )));
    }
    let mut levels = Vec::with_capacity(expansions.len());
    let mut pooled = m.clone();
    let mut pools_done = 0;
    for (&li, &e) in net.statistics_indices().iter().zip(expansions) {
        let pools = net.pools_through(li);
        while pools_done < pools {
            pooled = min_pool(&pooled);
            pools_done += 1;
        }
        levels.push(dilate_zeros(&pooled, e));
    }
    Ok(MaskPyramid {
        base: m.clone(),
        levels,
        expansions: expansions.to_vec(),
    })
}

/// Marks a unit 0 exactly when its receptive field intersects the zeros of `m`.
pub(super) fn exact_mask(net: &FeatureNetwork, m: &Tensor) -> Result<MaskPyramid> {
    check_mask(m)?;
    let stats = net.statistics_indices();
    let mut levels = Vec::with_capacity(stats.len());
    let mut cur = m.clone();
    let mut next = 0;
    for (i, layer) in net.layers().iter().enumerate() {
        if next == stats.len() {
            break;
        }
        cur = match &layer.kind {
            LayerKind::Conv(c) => dilate_zeros_rect(&cur, c.kh / 2, c.kw / 2),
            LayerKind::Pool => min_pool(&cur),
        };
        if stats[next] == i {
            levels.push(cur.clone());
            next += 1;
        }
    }
    Ok(MaskPyramid {
        base: m.clone(),
        levels,
        expansions: Vec::new(),
    })
}
