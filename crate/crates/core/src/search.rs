//! Reference-patch lookup by masked-Gramian distance over a stride grid.

use crate::error::{Error, Placement, Result};
use crate::network::{FeatureNetwork, MaskPyramid};
use crate::parallel;
use crate::stats::{distance_to_features, masked_gramians};
use crate::tensor::{Rect, Tensor};

/// Admissible top-left positions of `patch_w`×`patch_h` candidates: on the
/// stride grid, inside the image and disjoint from the excluded rectangle.
/// Positions are sorted by (y, x).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchGrid {
    pub stride: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    positions: Vec<Placement>,
}

impl SearchGrid {
    pub fn new(
        image_w: usize,
        image_h: usize,
        patch_w: usize,
        patch_h: usize,
        stride: usize,
        exclude: Rect,
    ) -> Result<Self> {
        if stride == 0 || patch_w == 0 || patch_h == 0 {
            return Err(Error::InvalidArgument(
                "search stride and patch size must be positive".into(),
            ));
        }
        let mut positions = Vec::new();
        if patch_w <= image_w && patch_h <= image_h {
            for y in (0..=image_h - patch_h).step_by(stride) {
                for x in (0..=image_w - patch_w).step_by(stride) {
                    if !Rect::new(x, y, patch_w, patch_h).intersects(&exclude) {
                        positions.push(Placement::new(x, y));
                    }
                }
            }
        }
        if positions.is_empty() {
            return Err(Error::NoAdmissiblePosition(format!(
                "no {patch_w}x{patch_h} window at stride {stride} in a {image_w}x{image_h} \
                 image avoids the hole {}x{}+{}+{}",
                exclude.w, exclude.h, exclude.x, exclude.y
            )));
        }
        Ok(SearchGrid {
            stride,
            patch_w,
            patch_h,
            positions,
        })
    }

    pub fn positions(&self) -> &[Placement] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Match {
    pub position: Placement,
    pub patch: Tensor,
    pub distance: f64,
}

/// Candidate scanner over one image. Candidate features can be cached
/// because candidates never overlap the hole, so their pixels never change.
pub struct ReferenceSearch<'a> {
    image: &'a Tensor,
    grid: SearchGrid,
    net: &'a FeatureNetwork,
    cache: Option<Vec<Vec<Tensor>>>,
}

impl<'a> ReferenceSearch<'a> {
    pub fn new(image: &'a Tensor, grid: SearchGrid, net: &'a FeatureNetwork) -> Self {
        ReferenceSearch {
            image,
            grid,
            net,
            cache: None,
        }
    }

    /// Precomputes candidate features if they fit in `budget_bytes`.
    pub fn with_cache(mut self, budget_bytes: usize) -> Result<Self> {
        let per_candidate: usize = self
            .net
            .statistics_shapes(self.grid.patch_h, self.grid.patch_w)
            .iter()
            .map(|(c, h, w)| c * h * w * std::mem::size_of::<f64>())
            .sum();
        if per_candidate.saturating_mul(self.grid.len()) <= budget_bytes {
            let feats = parallel::map_slice(self.grid.positions(), |p| self.features_at(*p));
            self.cache = Some(feats.into_iter().collect::<Result<Vec<_>>>()?);
        }
        Ok(self)
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    pub fn grid(&self) -> &SearchGrid {
        &self.grid
    }

    fn patch_at(&self, p: Placement) -> Result<Tensor> {
        self.image
            .crop(p.x, p.y, self.grid.patch_w, self.grid.patch_h)
    }

    fn features_at(&self, p: Placement) -> Result<Vec<Tensor>> {
        Ok(self.net.forward(&self.patch_at(p)?)?.into_features())
    }

    /// Masked-Gramian distance from `query` to every candidate, in grid order.
    pub fn distances(&self, query: &Tensor, pyramid: &MaskPyramid) -> Result<Vec<f64>> {
        if query.shape() != (self.image.channels(), self.grid.patch_h, self.grid.patch_w) {
            return Err(Error::Shape(format!(
                "query {:?} vs {}x{} candidates",
                query.shape(),
                self.grid.patch_w,
                self.grid.patch_h
            )));
        }
        let qf = self.net.forward(query)?.into_features();
        let qg = masked_gramians(&qf, pyramid)?;
        let results = match &self.cache {
            Some(cache) => parallel::map_slice(cache, |f| distance_to_features(&qg, f, pyramid)),
            None => parallel::map_slice(self.grid.positions(), |p| {
                distance_to_features(&qg, &self.features_at(*p)?, pyramid)
            }),
        };
        results.into_iter().collect()
    }

    /// The admissible candidate with the smallest distance; ties go to the
    /// smallest (y, x).
    pub fn find(&self, query: &Tensor, pyramid: &MaskPyramid) -> Result<Match> {
        let d = self.distances(query, pyramid)?;
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = i;
            }
        }
        let position = self.grid.positions()[best];
        Ok(Match {
            position,
            patch: self.patch_at(position)?,
            distance: d[best],
        })
    }
}

/// One-shot reference lookup without caching.
pub fn find_reference(
    query: &Tensor,
    pyramid: &MaskPyramid,
    grid: &SearchGrid,
    net: &FeatureNetwork,
    image: &Tensor,
) -> Result<Match> {
    ReferenceSearch::new(image, grid.clone(), net).find(query, pyramid)
}
