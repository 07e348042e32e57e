//! Minimum-error boundary cuts for compositing overlapping patches.

use crate::error::{Error, Placement, Result};
use crate::tensor::{Rect, Tensor};

/// Per-pixel squared RGB difference over an overlap band.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapError {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl OverlapError {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} error values for a {height}x{width} band",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidArgument("overlap errors must be >= 0".into()));
        }
        Ok(OverlapError {
            height,
            width,
            data,
        })
    }

    /// Σ_c (a − b)² per pixel of the `w`×`h` window at (x, y) of `a`
    /// against the window at (px, py) of `b`.
    fn between(
        a: &Tensor,
        (x, y): (usize, usize),
        b: &Tensor,
        (px, py): (usize, usize),
        w: usize,
        h: usize,
    ) -> OverlapError {
        let mut data = vec![0.0; w * h];
        for c in 0..a.channels() {
            for r in 0..h {
                for k in 0..w {
                    let d = a.get(c, y + r, x + k) - b.get(c, py + r, px + k);
                    data[r * w + k] += d * d;
                }
            }
        }
        OverlapError {
            height: h,
            width: w,
            data,
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    fn transposed(&self) -> OverlapError {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                data[c * self.height + r] = self.at(r, c);
            }
        }
        OverlapError {
            height: self.width,
            width: self.height,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Top-to-bottom seam, one column per row.
    Vertical,
    /// Left-to-right seam, one row per column.
    Horizontal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seam {
    pub orientation: Orientation,
    /// Column per row (vertical) or row per column (horizontal).
    pub path: Vec<usize>,
    pub cost: f64,
}

/// Dynamic-programming minimum-cost monotone seam (steps of at most one
/// cell sideways). Ties go to the smaller index.
pub fn min_cut_seam(err: &OverlapError, orientation: Orientation) -> Result<Seam> {
    if err.height == 0 || err.width == 0 {
        return Err(Error::InvalidArgument("empty overlap band".into()));
    }
    let e = match orientation {
        Orientation::Vertical => err.clone(),
        Orientation::Horizontal => err.transposed(),
    };
    let (h, w) = (e.height, e.width);
    let mut cost = vec![0.0; h * w];
    cost[..w].copy_from_slice(&e.data[..w]);
    for r in 1..h {
        for c in 0..w {
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(w - 1);
            let best = (lo..=hi)
                .map(|k| cost[(r - 1) * w + k])
                .fold(f64::INFINITY, f64::min);
            cost[r * w + c] = best + e.at(r, c);
        }
    }
    let argmin = |row: usize, range: std::ops::RangeInclusive<usize>| {
        let mut best = *range.start();
        for k in range {
            if cost[row * w + k] < cost[row * w + best] {
                best = k;
            }
        }
        best
    };
    let mut path = vec![0; h];
    path[h - 1] = argmin(h - 1, 0..=w - 1);
    let total = cost[(h - 1) * w + path[h - 1]];
    for r in (0..h - 1).rev() {
        let c = path[r + 1];
        path[r] = argmin(r, c.saturating_sub(1)..=(c + 1).min(w - 1));
    }
    Ok(Seam {
        orientation,
        path,
        cost: total,
    })
}

/// Result of [`composite_patch_detailed`].
#[derive(Clone, Debug)]
pub struct Composite {
    pub canvas: Tensor,
    /// Seam through the left band, if the overlap is nonzero.
    pub vertical: Option<Seam>,
    /// Seam through the top band, if the overlap is nonzero.
    pub horizontal: Option<Seam>,
}

/// Writes `patch` into `canvas` at `position`. The left and top `overlap`
/// bands are split by minimum-error seams (existing content left of /
/// above the seam is kept; in the corner a pixel is kept if either seam
/// keeps it). Pixels outside `omega` are never written.
pub fn composite_patch_detailed(
    canvas: &Tensor,
    patch: &Tensor,
    position: Placement,
    overlap: usize,
    omega: Rect,
) -> Result<Composite> {
    let (c, ph, pw) = patch.shape();
    let Placement { x, y } = position;
    if c != canvas.channels() || x + pw > canvas.width() || y + ph > canvas.height() {
        return Err(Error::InvalidArgument(format!(
            "patch {pw}x{ph} at {position} outside {}x{} canvas",
            canvas.width(),
            canvas.height()
        )));
    }
    let ov_x = overlap.min(pw);
    let ov_y = overlap.min(ph);
    let vertical = if ov_x > 0 {
        let err = OverlapError::between(canvas, (x, y), patch, (0, 0), ov_x, ph);
        Some(min_cut_seam(&err, Orientation::Vertical)?)
    } else {
        None
    };
    let horizontal = if ov_y > 0 {
        let err = OverlapError::between(canvas, (x, y), patch, (0, 0), pw, ov_y);
        Some(min_cut_seam(&err, Orientation::Horizontal)?)
    } else {
        None
    };
    let mut out = canvas.clone();
    for r in 0..ph {
        for k in 0..pw {
            if !omega.contains(x + k, y + r) {
                continue;
            }
            let keep_left = vertical.as_ref().is_some_and(|s| k < s.path[r]);
            let keep_top = horizontal.as_ref().is_some_and(|s| r < s.path[k]);
            if keep_left || keep_top {
                continue;
            }
            for ch in 0..c {
                out.set(ch, y + r, x + k, patch.get(ch, r, k));
            }
        }
    }
    Ok(Composite {
        canvas: out,
        vertical,
        horizontal,
    })
}

pub fn composite_patch(
    canvas: &Tensor,
    patch: &Tensor,
    position: Placement,
    overlap: usize,
    omega: Rect,
) -> Result<Tensor> {
    Ok(composite_patch_detailed(canvas, patch, position, overlap, omega)?.canvas)
}
