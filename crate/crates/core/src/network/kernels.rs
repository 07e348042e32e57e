//! Convolution and pooling kernels. Each output plane is computed by one
//! work item, so the parallel and sequential paths sum in the same order.

use crate::parallel;
use crate::tensor::Tensor;

use super::ConvLayer;

/// Zero-padded "same" convolution, optionally followed by ReLU.
pub fn conv2d(input: &Tensor, conv: &ConvLayer, relu: bool) -> Tensor {
    let (_, h, w) = input.shape();
    let mut out = Tensor::zeros(conv.out_channels, h, w);
    let plane = h * w;
    let (kh, kw) = (conv.kh, conv.kw);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    parallel::for_each_chunk(out.data_mut(), plane, |oc, dst| {
        dst.fill(conv.biases[oc]);
        for ic in 0..conv.in_channels {
            let src = input.plane(ic);
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let wgt = conv.weight(oc, ic, ky, kx);
                    if wgt == 0.0 {
                        continue;
                    }
                    accumulate_shifted(dst, src, h, w, dy, dx, wgt);
                }
            }
        }
        if relu {
            for v in dst.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    });
    out
}

/// Gradient of [`conv2d`] (without the activation) w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &Tensor, conv: &ConvLayer) -> Tensor {
    let (_, h, w) = grad_out.shape();
    let mut grad_in = Tensor::zeros(conv.in_channels, h, w);
    let plane = h * w;
    let (kh, kw) = (conv.kh, conv.kw);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    parallel::for_each_chunk(grad_in.data_mut(), plane, |ic, dst| {
        for oc in 0..conv.out_channels {
            let g = grad_out.plane(oc);
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let wgt = conv.weight(oc, ic, ky, kx);
                    if wgt == 0.0 {
                        continue;
                    }
                    // forward: out[y, x] += w * in[y + dy, x + dx]
                    // adjoint: in[y, x] += w * out[y - dy, x - dx]
                    accumulate_shifted(dst, g, h, w, -dy, -dx, wgt);
                }
            }
        }
    });
    grad_in
}

/// dst[y, x] += wgt * src[y + dy, x + dx] wherever the source is in bounds.
#[inline]
fn accumulate_shifted(
    dst: &mut [f64],
    src: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wgt: f64,
) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (a, b) in d.iter_mut().zip(s) {
            *a += wgt * b;
        }
    }
}

/// 2×2 stride-2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    parallel::for_each_chunk(out.data_mut(), oh * ow, |ch, dst| {
        let src = input.plane(ch);
        for i in 0..oh {
            let r0 = 2 * i * w;
            let r1 = r0 + w;
            for j in 0..ow {
                let s =
                    src[r0 + 2 * j] + src[r0 + 2 * j + 1] + src[r1 + 2 * j] + src[r1 + 2 * j + 1];
                dst[i * ow + j] = 0.25 * s;
            }
        }
    });
    out
}

pub fn avg_pool_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = grad_out.shape();
    let mut grad_in = Tensor::zeros(c, in_h, in_w);
    parallel::for_each_chunk(grad_in.data_mut(), in_h * in_w, |ch, dst| {
        let g = grad_out.plane(ch);
        for i in 0..oh {
            for j in 0..ow {
                let v = 0.25 * g[i * ow + j];
                let r0 = 2 * i * in_w + 2 * j;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + in_w] = v;
                dst[r0 + in_w + 1] = v;
            }
        }
    });
    grad_in
}

/// 2×2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat in-plane index of the first maximal input.
pub fn max_pool(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let planes = parallel::map_range(c, |ch| {
        let src = input.plane(ch);
        let mut vals = vec![0.0; oh * ow];
        let mut idx = vec![0u32; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    2 * i * w + 2 * j,
                    2 * i * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                vals[i * ow + j] = src[best];
                idx[i * ow + j] = best as u32;
            }
        }
        (vals, idx)
    });
    let mut data = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for (v, i) in planes {
        data.extend(v);
        argmax.extend(i);
    }
    (
        Tensor::from_vec(c, oh, ow, data).expect("pool shape"),
        argmax,
    )
}

pub fn max_pool_backward(grad_out: &Tensor, argmax: &[u32], in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = grad_out.shape();
    let mut grad_in = Tensor::zeros(c, in_h, in_w);
    let n = oh * ow;
    parallel::for_each_chunk(grad_in.data_mut(), in_h * in_w, |ch, dst| {
        let g = grad_out.plane(ch);
        let idx = &argmax[ch * n..(ch + 1) * n];
        for (gv, &k) in g.iter().zip(idx) {
            dst[k as usize] += gv;
        }
    });
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvLayer {
        let weights = (0..out * inp * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let biases = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvLayer::new(out, inp, k, k, weights, biases).unwrap()
    }

    // Direct nested-loop convolution with explicit zero padding.
    fn conv_oracle(x: &Tensor, conv: &ConvLayer) -> Tensor {
        let (_, h, w) = x.shape();
        let (ph, pw) = (conv.kh / 2, conv.kw / 2);
        Tensor::from_fn(conv.out_channels, h, w, |oc, y, xx| {
            let mut s = conv.biases[oc];
            for ic in 0..conv.in_channels {
                for ky in 0..conv.kh {
                    for kx in 0..conv.kw {
                        let sy = y as isize + ky as isize - ph as isize;
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            s += conv.weight(oc, ic, ky, kx) * x.get(ic, sy as usize, sx as usize);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1usize, 3, 5] {
            let x = random_tensor(&mut rng, 3, 7, 6);
            let conv = random_conv(&mut rng, 4, 3, k);
            let got = conv2d(&x, &conv, false);
            let want = conv_oracle(&x, &conv);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = random_conv(&mut rng, 5, 3, 3);
        conv.biases.iter_mut().for_each(|b| *b = 0.0);
        let x = random_tensor(&mut rng, 3, 6, 9);
        let y = random_tensor(&mut rng, 5, 6, 9);
        let lhs = conv2d(&x, &conv, false).dot(&y);
        let rhs = x.dot(&conv2d_backward_input(&y, &conv));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn pools_and_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 5, 7);
        let p = avg_pool(&x);
        assert_eq!(p.shape(), (2, 2, 3));
        let want = 0.25 * (x.get(1, 2, 4) + x.get(1, 2, 5) + x.get(1, 3, 4) + x.get(1, 3, 5));
        assert!((p.get(1, 1, 2) - want).abs() < 1e-15);
        let c = random_tensor(&mut rng, 2, 2, 3);
        let lhs = p.dot(&c);
        let rhs = x.dot(&avg_pool_backward(&c, 5, 7));
        assert!((lhs - rhs).abs() < 1e-12);

        let (m, idx) = max_pool(&x);
        let lhs = m.dot(&c);
        let rhs = x.dot(&max_pool_backward(&c, &idx, 5, 7));
        assert!((lhs - rhs).abs() < 1e-12);
        let want = [
            x.get(0, 0, 0),
            x.get(0, 0, 1),
            x.get(0, 1, 0),
            x.get(0, 1, 1),
        ]
        .into_iter()
        .fold(f64::MIN, f64::max);
        assert_eq!(m.get(0, 0, 0), want);
    }
}
