//! Brute-force reference implementations and fixtures.

// each test target uses a different subset
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texfill_core::network::ConvLayer;
use texfill_core::{FeatureNetwork, ImageBuffer, MaskPyramid, Placement, Rect, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(lo..hi))
}

/// Two-colour checkerboard with 4-pixel cells and seeded per-pixel noise.
pub fn texture(seed: u64, width: usize, height: usize) -> ImageBuffer {
    let mut rng = rng(seed);
    ImageBuffer::from_fn(width, height, |x, y| {
        let base: [i32; 3] = if (x / 4 + y / 4) % 2 == 0 {
            [52, 70, 104]
        } else {
            [206, 168, 132]
        };
        let n = rng.random_range(-12..=12);
        base.map(|v| (v + n).clamp(0, 255) as u8)
    })
}

/// Zero-padded "same" convolution with optional ReLU, by direct summation.
pub fn conv(x: &Tensor, layer: &ConvLayer, relu: bool) -> Tensor {
    let (_, h, w) = x.shape();
    let (ph, pw) = (layer.kh as isize / 2, layer.kw as isize / 2);
    Tensor::from_fn(layer.out_channels, h, w, |o, y, xx| {
        let mut s = layer.biases[o];
        for i in 0..layer.in_channels {
            for ky in 0..layer.kh {
                for kx in 0..layer.kw {
                    let sy = y as isize + ky as isize - ph;
                    let sx = xx as isize + kx as isize - pw;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        s += layer.weight(o, i, ky, kx) * x.get(i, sy as usize, sx as usize);
                    }
                }
            }
        }
        if relu {
            s.max(0.0)
        } else {
            s
        }
    })
}

pub fn avg_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, h / 2, w / 2, |ch, y, xx| {
        (x.get(ch, 2 * y, 2 * xx)
            + x.get(ch, 2 * y, 2 * xx + 1)
            + x.get(ch, 2 * y + 1, 2 * xx)
            + x.get(ch, 2 * y + 1, 2 * xx + 1))
            / 4.0
    })
}

/// N×N row-major Σ_k w_k a_i(k) b_j(k) over all positions.
fn correlate(
    n: usize,
    positions: impl Iterator<Item = (usize, usize)> + Clone,
    a: impl Fn(usize, usize, usize) -> f64,
    b: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = positions
                .clone()
                .map(|(y, x)| a(i, y, x) * b(j, y, x))
                .sum();
        }
    }
    g
}

fn all_positions(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + Clone {
    (0..h).flat_map(move |y| (0..w).map(move |x| (y, x)))
}

pub fn gramian(f: &Tensor) -> Vec<f64> {
    let (n, h, w) = f.shape();
    correlate(
        n,
        all_positions(h, w),
        |c, y, x| f.get(c, y, x),
        |c, y, x| f.get(c, y, x),
    )
}

/// (G_x, G_y): G_x,ij = Σ F_i(y, x+δ) F_j(y, x), G_y,ij = Σ F_i(y+δ, x) F_j(y, x).
pub fn shifted_gramians(f: &Tensor, d: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, h, w) = f.shape();
    let gx = correlate(
        n,
        all_positions(h, w - d),
        |c, y, x| f.get(c, y, x + d),
        |c, y, x| f.get(c, y, x),
    );
    let gy = correlate(
        n,
        all_positions(h - d, w),
        |c, y, x| f.get(c, y + d, x),
        |c, y, x| f.get(c, y, x),
    );
    (gx, gy)
}

pub fn masked_gramian(f: &Tensor, m: &Tensor) -> Vec<f64> {
    let (n, h, w) = f.shape();
    correlate(
        n,
        all_positions(h, w),
        |c, y, x| m.get(0, y, x) * f.get(c, y, x),
        |c, y, x| f.get(c, y, x),
    )
}

/// Minimum cost over every monotone top-to-bottom path of an h×w cost
/// grid, summed top to bottom.
pub fn seam_cost(cost: &[f64], h: usize, w: usize) -> f64 {
    fn walk(cost: &[f64], h: usize, w: usize, r: usize, c: usize, acc: f64) -> f64 {
        let acc = acc + cost[r * w + c];
        if r + 1 == h {
            return acc;
        }
        let lo = c.saturating_sub(1);
        let hi = (c + 1).min(w - 1);
        (lo..=hi)
            .map(|k| walk(cost, h, w, r + 1, k, acc))
            .fold(f64::INFINITY, f64::min)
    }
    (0..w)
        .map(|c| walk(cost, h, w, 0, c, 0.0))
        .fold(f64::INFINITY, f64::min)
}

/// Exhaustive reference search: every stride-grid window that fits and
/// shares no pixel with `exclude`, compared by masked-Gramian distance;
/// ties go to the first window in row-major order.
pub fn find_reference(
    image: &Tensor,
    query: &Tensor,
    pyramid: &MaskPyramid,
    net: &FeatureNetwork,
    patch: (usize, usize),
    stride: usize,
    exclude: Rect,
) -> Option<(Placement, f64)> {
    let (pw, ph) = patch;
    let qf = net.forward(query).unwrap().into_features();
    let qg: Vec<Vec<f64>> = qf
        .iter()
        .zip(&pyramid.levels)
        .map(|(f, m)| masked_gramian(f, m))
        .collect();
    let mut best: Option<(Placement, f64)> = None;
    let mut y = 0;
    while y + ph <= image.height() {
        let mut x = 0;
        while x + pw <= image.width() {
            let touches = (y..y + ph).any(|yy| (x..x + pw).any(|xx| exclude.contains(xx, yy)));
            if !touches {
                let cand = image.crop(x, y, pw, ph).unwrap();
                let cf = net.forward(&cand).unwrap().into_features();
                let d: f64 = cf
                    .iter()
                    .zip(&pyramid.levels)
                    .zip(&qg)
                    .map(|((f, m), q)| {
                        masked_gramian(f, m)
                            .iter()
                            .zip(q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((Placement::new(x, y), d));
                }
            }
            x += stride;
        }
        y += stride;
    }
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
