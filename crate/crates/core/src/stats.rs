//! Gramian texture statistics, the synthesis losses built on them, and the
//! masked-Gramian patch distance.
//!
//! All loss functions return the scalar value together with its gradient
//! w.r.t. the captured feature maps (one cotangent per statistics layer);
//! [`FeatureNetwork::backward`] carries those back to the input.

use crate::embed::PooledEmbedding;
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, FeatureNetwork, MaskPyramid};
use crate::parallel;
use crate::tensor::Tensor;

/// Dense square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} entries for {n}x{n}", data.len())));
        }
        Ok(Matrix { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        Matrix { n, data }
    }

    /// Σ_ij (self − other)²
    pub fn squared_distance(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn diff(&self, other: &Matrix) -> Matrix {
        Matrix {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    fn scaled(mut self, s: f64) -> Matrix {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }
}

/// Σ_k a_ik b_jk over rows of two N×M row-major matrices.
fn cross_products(a: &[f64], b: &[f64], n: usize, m: usize) -> Matrix {
    let rows = parallel::map_range(n, |i| {
        let ai = &a[i * m..(i + 1) * m];
        (0..n)
            .map(|j| {
                let bj = &b[j * m..(j + 1) * m];
                ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect::<Vec<_>>()
    });
    Matrix {
        n,
        data: rows.into_iter().flatten().collect(),
    }
}

/// W · A for an N×N matrix W and an N×M row-major A.
fn left_multiply(w: &Matrix, a: &[f64], m: usize) -> Vec<f64> {
    let n = w.n;
    let rows = parallel::map_range(n, |i| {
        let mut row = vec![0.0; m];
        for j in 0..n {
            let wij = w.get(i, j);
            if wij == 0.0 {
                continue;
            }
            for (r, x) in row.iter_mut().zip(&a[j * m..(j + 1) * m]) {
                *r += wij * x;
            }
        }
        row
    });
    rows.into_iter().flatten().collect()
}

/// G_ij = Σ_k F_ik F_jk over all spatial locations k.
pub fn gramian(f: &Tensor) -> Matrix {
    cross_products(f.data(), f.data(), f.channels(), f.plane_len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    X,
    Y,
}

/// Crops every map to the `+δ` (leading = true) or `−δ` window along `axis`.
fn shift_crop(f: &Tensor, delta: usize, axis: Axis, leading: bool) -> Tensor {
    let (c, h, w) = f.shape();
    match axis {
        Axis::X => {
            let x0 = if leading { delta } else { 0 };
            Tensor::from_fn(c, h, w - delta, |ch, y, x| f.get(ch, y, x + x0))
        }
        Axis::Y => {
            let y0 = if leading { delta } else { 0 };
            Tensor::from_fn(c, h - delta, w, |ch, y, x| f.get(ch, y + y0, x))
        }
    }
}

/// Adds a cropped gradient back into its position in a full-size map.
fn scatter_crop(dst: &mut Tensor, src: &Tensor, delta: usize, axis: Axis, leading: bool) {
    let (c, h, w) = src.shape();
    let (y0, x0) = match (axis, leading) {
        (Axis::X, true) => (0, delta),
        (Axis::Y, true) => (delta, 0),
        _ => (0, 0),
    };
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = dst.index(ch, y + y0, x + x0);
                dst.data_mut()[i] += src.get(ch, y, x);
            }
        }
    }
}

fn shifted(f: &Tensor, delta: usize, axis: Axis) -> Matrix {
    let a = shift_crop(f, delta, axis, true);
    let b = shift_crop(f, delta, axis, false);
    cross_products(a.data(), b.data(), f.channels(), a.plane_len())
}

/// Horizontally and vertically translated Gramians: each pairs the maps
/// shifted by +δ (columns δ..w, resp. rows δ..h) with the maps shifted by
/// −δ (columns 0..w−δ, resp. rows 0..h−δ).
pub fn shifted_gramians(f: &Tensor, delta: usize) -> Result<(Matrix, Matrix)> {
    if delta >= f.height() || delta >= f.width() {
        return Err(Error::InvalidArgument(format!(
            "shift {delta} not smaller than the {}x{} feature map",
            f.height(),
            f.width()
        )));
    }
    Ok((shifted(f, delta, Axis::X), shifted(f, delta, Axis::Y)))
}

/// Gramian restricted to locations where `mask` is nonzero; the mask
/// multiplies each product F_ik F_jk.
pub fn masked_gramian(f: &Tensor, mask: &Tensor) -> Result<Matrix> {
    if mask.shape() != (1, f.height(), f.width()) {
        return Err(Error::Shape(format!(
            "mask {:?} vs features {:?}",
            mask.shape(),
            f.shape()
        )));
    }
    let (n, m) = (f.channels(), f.plane_len());
    let weighted: Vec<f64> = (0..n)
        .flat_map(|i| {
            f.plane(i)
                .iter()
                .zip(mask.data())
                .map(|(v, w)| v * w)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(cross_products(&weighted, f.data(), n, m))
}

/// Translated Gramians of one layer together with the shift and crop sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedPair {
    pub delta: usize,
    pub gx: Matrix,
    pub gy: Matrix,
    /// Number of locations entering `gx` and `gy`.
    pub mx: usize,
    pub my: usize,
}

/// Reference statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGramians {
    pub gram: Matrix,
    pub shifted: ShiftedPair,
    /// Number of feature maps.
    pub n: usize,
    /// Number of spatial locations per map.
    pub m: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-statistics-layer Gramians of one texture.
#[derive(Clone, Debug, PartialEq)]
pub struct GramianSet {
    pub layers: Vec<LayerGramians>,
}

impl GramianSet {
    /// `deltas[l]` is the translation used for layer l's shifted Gramians.
    pub fn from_features<'a>(
        features: impl IntoIterator<Item = &'a Tensor>,
        deltas: &[usize],
    ) -> Result<Self> {
        let features: Vec<&Tensor> = features.into_iter().collect();
        if features.len() != deltas.len() {
            return Err(Error::InvalidArgument(format!(
                "{} shifts for {} statistics layers",
                deltas.len(),
                features.len()
            )));
        }
        let layers = features
            .iter()
            .zip(deltas)
            .map(|(f, &d)| {
                let (gx, gy) = shifted_gramians(f, d)?;
                let (_, h, w) = f.shape();
                Ok(LayerGramians {
                    gram: gramian(f),
                    shifted: ShiftedPair {
                        delta: d,
                        gx,
                        gy,
                        mx: h * (w - d),
                        my: (h - d) * w,
                    },
                    n: f.channels(),
                    m: h * w,
                    height: h,
                    width: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GramianSet { layers })
    }

    pub fn from_trace(trace: &ActivationTrace, deltas: &[usize]) -> Result<Self> {
        GramianSet::from_features(trace.features(), deltas)
    }

    /// Forward pass plus Gramians in one call.
    pub fn of_texture(net: &FeatureNetwork, x: &Tensor, deltas: &[usize]) -> Result<Self> {
        GramianSet::from_trace(&net.forward(x)?, deltas)
    }

    pub fn deltas(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.shifted.delta).collect()
    }
}

/// Loss value with per-statistics-layer feature cotangents.
#[derive(Clone, Debug)]
pub struct FeatureLoss {
    pub value: f64,
    pub cotangents: Vec<Tensor>,
}

fn check_layers(reference: &GramianSet, features: &[&Tensor]) -> Result<()> {
    if features.len() != reference.layers.len() {
        return Err(Error::Shape(format!(
            "{} reference layers vs {} captured layers",
            reference.layers.len(),
            features.len()
        )));
    }
    for (k, (f, r)) in features.iter().zip(&reference.layers).enumerate() {
        if f.channels() != r.n {
            return Err(Error::Shape(format!(
                "layer {k}: {} maps vs {} in the reference",
                f.channels(),
                r.n
            )));
        }
        if r.shifted.delta >= f.height() || r.shifted.delta >= f.width() {
            return Err(Error::Shape(format!(
                "layer {k}: shift {} too large for {}x{}",
                r.shifted.delta,
                f.height(),
                f.width()
            )));
        }
    }
    Ok(())
}

/// Σ_l 1/(2 N² M²) Σ_ij (G − Ĝ)², with gradient 2 (Ĝ − G) F / (N² M²).
pub fn synthesis_loss(reference: &GramianSet, trace: &ActivationTrace) -> Result<FeatureLoss> {
    synthesis_loss_features(reference, &trace.features().collect::<Vec<_>>())
}

/// [`synthesis_loss`] on explicit feature maps.
pub fn synthesis_loss_features(
    reference: &GramianSet,
    features: &[&Tensor],
) -> Result<FeatureLoss> {
    check_layers(reference, features)?;
    let mut value = 0.0;
    let mut cotangents = Vec::with_capacity(features.len());
    for (f, r) in features.iter().zip(&reference.layers) {
        let (n, m) = (f.channels() as f64, f.plane_len() as f64);
        let g = gramian(f);
        let d = g.diff(&r.gram);
        let norm = n * n * m * m;
        value += d.data.iter().map(|v| v * v).sum::<f64>() / (2.0 * norm);
        let grad = left_multiply(&d.scaled(2.0 / norm), f.data(), f.plane_len());
        cotangents.push(Tensor::from_vec(f.channels(), f.height(), f.width(), grad)?);
    }
    Ok(FeatureLoss { value, cotangents })
}

/// Σ_l [Σ (Gx − Ĝx)² / (4 N² Mx²) + Σ (Gy − Ĝy)² / (4 N² My²)], where Mx
/// and My count the locations surviving the crop.
pub fn cross_correlation_loss(
    reference: &GramianSet,
    trace: &ActivationTrace,
) -> Result<FeatureLoss> {
    cross_correlation_loss_features(reference, &trace.features().collect::<Vec<_>>())
}

/// [`cross_correlation_loss`] on explicit feature maps.
pub fn cross_correlation_loss_features(
    reference: &GramianSet,
    features: &[&Tensor],
) -> Result<FeatureLoss> {
    check_layers(reference, features)?;
    let mut value = 0.0;
    let mut cotangents = Vec::with_capacity(features.len());
    for (f, r) in features.iter().zip(&reference.layers) {
        let n = f.channels() as f64;
        let delta = r.shifted.delta;
        let mut grad = Tensor::zeros(f.channels(), f.height(), f.width());
        for (axis, reference_g) in [(Axis::X, &r.shifted.gx), (Axis::Y, &r.shifted.gy)] {
            let a = shift_crop(f, delta, axis, true);
            let b = shift_crop(f, delta, axis, false);
            let mc = a.plane_len();
            let g = cross_products(a.data(), b.data(), f.channels(), mc);
            let d = g.diff(reference_g);
            let norm = 4.0 * n * n * (mc * mc) as f64;
            value += d.data.iter().map(|v| v * v).sum::<f64>() / norm;
            // dL/dĜ = 2 D / norm; Ĝ = A Bᵀ
            let w = d.scaled(2.0 / norm);
            let ga = left_multiply(&w, b.data(), mc);
            let gb = left_multiply(&w.transpose(), a.data(), mc);
            let ga = Tensor::from_vec(a.channels(), a.height(), a.width(), ga)?;
            let gb = Tensor::from_vec(b.channels(), b.height(), b.width(), gb)?;
            scatter_crop(&mut grad, &ga, delta, axis, true);
            scatter_crop(&mut grad, &gb, delta, axis, false);
        }
        cotangents.push(grad);
    }
    Ok(FeatureLoss { value, cotangents })
}

/// w_s · L_s + w_cc · L_cc
pub fn combined_loss(
    reference: &GramianSet,
    trace: &ActivationTrace,
    w_s: f64,
    w_cc: f64,
) -> Result<FeatureLoss> {
    combined_loss_features(reference, &trace.features().collect::<Vec<_>>(), w_s, w_cc)
}

/// [`combined_loss`] on explicit feature maps.
pub fn combined_loss_features(
    reference: &GramianSet,
    features: &[&Tensor],
    w_s: f64,
    w_cc: f64,
) -> Result<FeatureLoss> {
    let mut value = 0.0;
    let mut cotangents: Option<Vec<Tensor>> = None;
    let mut accumulate = |loss: FeatureLoss, w: f64| {
        value += w * loss.value;
        match &mut cotangents {
            None => {
                cotangents = Some(
                    loss.cotangents
                        .into_iter()
                        .map(|mut t| {
                            t.data_mut().iter_mut().for_each(|v| *v *= w);
                            t
                        })
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(loss.cotangents) {
                    a.data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(x, y)| *x += w * y);
                }
            }
        }
    };
    if w_s != 0.0 {
        accumulate(synthesis_loss_features(reference, features)?, w_s);
    }
    if w_cc != 0.0 {
        accumulate(cross_correlation_loss_features(reference, features)?, w_cc);
    }
    let cotangents = match cotangents {
        Some(c) => c,
        None => {
            check_layers(reference, features)?;
            features
                .iter()
                .map(|f| Tensor::zeros(f.channels(), f.height(), f.width()))
                .collect()
        }
    };
    Ok(FeatureLoss { value, cotangents })
}

/// (1/P) Σ (m x_b − m x̂)² and its gradient w.r.t. x̂; `mask` is 1×H×W and
/// broadcast over channels.
pub fn boundary_loss(x_b: &Tensor, x_hat: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)> {
    let (c, h, w) = x_hat.shape();
    if x_b.shape() != x_hat.shape() || mask.shape() != (1, h, w) {
        return Err(Error::Shape(format!(
            "boundary loss: x_b {:?}, x̂ {:?}, mask {:?}",
            x_b.shape(),
            x_hat.shape(),
            mask.shape()
        )));
    }
    let p = (c * h * w) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(c, h, w);
    let plane = h * w;
    for ch in 0..c {
        let xb = x_b.plane(ch);
        let xh = x_hat.plane(ch);
        let g = &mut grad.data_mut()[ch * plane..(ch + 1) * plane];
        for k in 0..plane {
            let m = mask.data()[k];
            let r = m * xb[k] - m * xh[k];
            value += r * r;
            g[k] = -2.0 * m * r / p;
        }
    }
    Ok((value / p, grad))
}

/// Weights of every loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_s: f64,
    pub w_cc: f64,
    pub w_d: f64,
    pub w_g: f64,
    pub w_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_s: 1e6,
            w_cc: 1e7,
            w_d: 1.0,
            w_g: 0.05,
            w_b: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_s, self.w_cc, self.w_d, self.w_g, self.w_b];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Network plus reference statistics for one branch.
#[derive(Clone, Copy, Debug)]
pub struct Branch<'a> {
    pub net: &'a FeatureNetwork,
    pub reference: &'a GramianSet,
}

/// The two-branch objective for one patch position:
///
/// L = w_d L_{s,cc}(x_d, x̂_d) + w_g L_{s,cc}(x_g, x̂_g) + w_b L_b(x_b, x̂_d)
///
/// where x̂_g is x̂_d embedded into the pooled window. Only x̂_d varies.
#[derive(Clone, Debug)]
pub struct PatchObjective<'a> {
    pub detail: Option<Branch<'a>>,
    pub global: Option<(Branch<'a>, &'a PooledEmbedding)>,
    pub x_b: &'a Tensor,
    pub mask: &'a Tensor,
    pub weights: LossWeights,
}

/// Value of each term and the gradient of the total w.r.t. x̂_d.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub total: f64,
    /// Unweighted L_{s,cc} of the detail branch (0 when inactive).
    pub detail: f64,
    pub global: f64,
    pub boundary: f64,
    pub gradient: Tensor,
}

impl PatchObjective<'_> {
    pub fn evaluate(&self, x_hat: &Tensor) -> Result<LossEvaluation> {
        let w = &self.weights;
        let mut gradient = Tensor::zeros(x_hat.channels(), x_hat.height(), x_hat.width());
        let add = |g: &mut Tensor, t: &Tensor, s: f64| {
            g.data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, b)| *a += s * b);
        };
        let mut detail = 0.0;
        if let Some(b) = self.detail.filter(|_| w.w_d != 0.0) {
            let trace = b.net.forward(x_hat)?;
            let loss = combined_loss(b.reference, &trace, w.w_s, w.w_cc)?;
            detail = loss.value;
            add(
                &mut gradient,
                &b.net.backward(&trace, &loss.cotangents)?,
                w.w_d,
            );
        }
        let mut global = 0.0;
        if let Some((b, emb)) = self.global.filter(|_| w.w_g != 0.0) {
            let x_g = emb.embed(x_hat)?;
            let trace = b.net.forward(&x_g)?;
            let loss = combined_loss(b.reference, &trace, w.w_s, w.w_cc)?;
            global = loss.value;
            let g = emb.adjoint(&b.net.backward(&trace, &loss.cotangents)?)?;
            add(&mut gradient, &g, w.w_g);
        }
        let mut boundary = 0.0;
        if w.w_b != 0.0 {
            let (v, g) = boundary_loss(self.x_b, x_hat, self.mask)?;
            boundary = v;
            add(&mut gradient, &g, w.w_b);
        }
        Ok(LossEvaluation {
            total: w.w_d * detail + w.w_g * global + w.w_b * boundary,
            detail,
            global,
            boundary,
            gradient,
        })
    }
}

/// Total two-branch loss and its gradient w.r.t. x̂_d.
pub fn total_loss(objective: &PatchObjective<'_>, x_hat: &Tensor) -> Result<LossEvaluation> {
    objective.evaluate(x_hat)
}

/// Masked Gramians of each captured layer.
pub fn masked_gramians(features: &[Tensor], pyramid: &MaskPyramid) -> Result<Vec<Matrix>> {
    if features.len() != pyramid.levels.len() {
        return Err(Error::Shape(format!(
            "{} feature layers vs {} mask levels",
            features.len(),
            pyramid.levels.len()
        )));
    }
    features
        .iter()
        .zip(&pyramid.levels)
        .map(|(f, m)| masked_gramian(f, m))
        .collect()
}

/// Σ_l Σ_ij (masked Gramian of a − masked Gramian of b)² over precomputed
/// query Gramians and candidate features.
pub fn distance_to_features(
    query: &[Matrix],
    features: &[Tensor],
    pyramid: &MaskPyramid,
) -> Result<f64> {
    let other = masked_gramians(features, pyramid)?;
    if other.len() != query.len() {
        return Err(Error::Shape("query/candidate layer count".into()));
    }
    Ok(query
        .iter()
        .zip(&other)
        .map(|(a, b)| a.squared_distance(b))
        .sum())
}

/// Masked-Gramian patch distance Δ_G(a, b).
pub fn patch_distance(
    a: &Tensor,
    b: &Tensor,
    pyramid: &MaskPyramid,
    net: &FeatureNetwork,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "patch distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let fa = net.forward(a)?.into_features();
    let fb = net.forward(b)?.into_features();
    distance_to_features(&masked_gramians(&fa, pyramid)?, &fb, pyramid)
}
