//! The coarse-to-fine inpainting procedure.
//!
//! Ω is first filled with the per-channel mean of the source region. The
//! coarse pass then optimizes each scheduled patch against global
//! statistics only, after which Ω is converted to greyscale. The fine pass
//! re-synthesizes every patch against a searched reference patch plus the
//! global statistics, and composites it with minimum-error seams.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{pool_times, PooledEmbedding};
use crate::error::{Error, Placement, Result, Stage};
use crate::lbfgs::{minimize, Bounds, OptimizerConfig, Termination};
use crate::network::{min_pool, FeatureNetwork, DEFAULT_STATISTICS_LAYERS};
use crate::quilt::composite_patch;
use crate::search::{ReferenceSearch, SearchGrid};
use crate::stats::{Branch, GramianSet, LossEvaluation, LossWeights, PatchObjective};
use crate::tensor::{
    fill_with_channel_means, image_to_tensor, tensor_to_image, to_greyscale_region_weighted,
    ImageBuffer, Rect, RegionSpec, Tensor, GREY_WEIGHTS,
};

pub use crate::embed::embed_pooled;

pub const DEFAULT_Q: usize = 2;
pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_STRIDE: usize = 64;
pub const DEFAULT_DELTAS: [usize; 5] = [6, 6, 5, 4, 3];
pub const DEFAULT_EXPANSIONS: [usize; 5] = [1, 1, 2, 3, 2];
pub const DEFAULT_COARSE_ITERATIONS: usize = 200;
pub const DEFAULT_FINE_ITERATIONS: usize = 400;
pub const DEFAULT_PSI_BAND: usize = 16;
pub const DEFAULT_HISTORY_SIZE: usize = 10;
pub const DEFAULT_CACHE_BUDGET: usize = 512 << 20;

/// Everything needed for one inpainting run.
#[derive(Clone, Debug)]
pub struct InpaintJob {
    pub image: ImageBuffer,
    pub region: RegionSpec,
    pub network: FeatureNetwork,
    /// Fine-stage weights. The coarse stage uses w_d = 0 and w_g = 1.
    pub weights: LossWeights,
    /// Number of average poolings between the detail and global branches.
    pub q: usize,
    pub patch_size: usize,
    /// Defaults to a quarter of the patch size.
    pub overlap: Option<usize>,
    pub stride: usize,
    pub detail_layers: Vec<String>,
    pub global_layers: Vec<String>,
    /// Shift per detail layer.
    pub deltas: Vec<usize>,
    /// Mask expansion per detail layer.
    pub expansions: Vec<usize>,
    pub coarse_iterations: usize,
    pub fine_iterations: usize,
    /// Keep the boundary loss active in the coarse stage.
    pub coarse_boundary: bool,
    /// Convert Ω to greyscale between the stages.
    pub greyscale: bool,
    /// RGB weights of the greyscale conversion.
    pub grey_weights: [f64; 3],
    pub seed: u64,
    /// Amplitude of uniform noise added to the mean fill.
    pub init_noise: f64,
    pub history_size: usize,
    /// Upper bound on memory spent caching candidate features.
    pub cache_budget: usize,
    pub dump_dir: Option<PathBuf>,
}

impl InpaintJob {
    pub fn new(image: ImageBuffer, region: RegionSpec, network: FeatureNetwork) -> Self {
        let layers: Vec<String> = DEFAULT_STATISTICS_LAYERS
            .iter()
            .map(|s| s.to_string())
            .collect();
        InpaintJob {
            image,
            region,
            network,
            weights: LossWeights::default(),
            q: DEFAULT_Q,
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: None,
            stride: DEFAULT_STRIDE,
            detail_layers: layers.clone(),
            global_layers: layers,
            deltas: DEFAULT_DELTAS.to_vec(),
            expansions: DEFAULT_EXPANSIONS.to_vec(),
            coarse_iterations: DEFAULT_COARSE_ITERATIONS,
            fine_iterations: DEFAULT_FINE_ITERATIONS,
            coarse_boundary: true,
            greyscale: true,
            grey_weights: GREY_WEIGHTS,
            seed: 0,
            init_noise: 0.0,
            history_size: DEFAULT_HISTORY_SIZE,
            cache_budget: DEFAULT_CACHE_BUDGET,
            dump_dir: None,
        }
    }

    pub fn overlap(&self) -> usize {
        self.overlap.unwrap_or(self.patch_size / 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let block = 1usize << self.q;
        let (patch, overlap) = (self.patch_size, self.overlap());
        if (self.image.width, self.image.height) != (self.region.width, self.region.height) {
            return bad(format!(
                "mask is {}x{} but the image is {}x{}",
                self.region.width, self.region.height, self.image.width, self.image.height
            ));
        }
        if patch == 0 || patch % block != 0 {
            return bad(format!(
                "patch size {patch} is not a positive multiple of 2^{}",
                self.q
            ));
        }
        if overlap >= patch {
            return bad(format!(
                "overlap {overlap} must be smaller than the patch size {patch}"
            ));
        }
        if (patch - overlap) % block != 0 {
            return bad(format!(
                "patch step {} is not a multiple of 2^{}",
                patch - overlap,
                self.q
            ));
        }
        if self.stride == 0 {
            return bad("search stride must be positive".into());
        }
        if self.detail_layers.is_empty() || self.global_layers.is_empty() {
            return bad("layer sets must be nonempty".into());
        }
        if self.deltas.len() != self.detail_layers.len()
            || self.expansions.len() != self.detail_layers.len()
        {
            return bad(format!(
                "{} detail layers need as many shifts and expansions (got {} and {})",
                self.detail_layers.len(),
                self.deltas.len(),
                self.expansions.len()
            ));
        }
        if !(self.init_noise.is_finite() && self.init_noise >= 0.0) {
            return bad(format!(
                "init noise {} must be finite and >= 0",
                self.init_noise
            ));
        }
        Ok(())
    }
}

/// Row-major patch placements covering Ω.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSchedule {
    pub placements: Vec<Placement>,
    pub patch: usize,
    pub overlap: usize,
    pub columns: usize,
    pub rows: usize,
}

impl PatchSchedule {
    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Placement> {
        self.placements.iter()
    }

    pub fn footprint(&self, p: Placement) -> Rect {
        Rect::new(p.x, p.y, self.patch, self.patch)
    }

    /// Whether the union of the footprints contains `r`.
    pub fn covers(&self, r: &Rect) -> bool {
        (r.y..r.bottom()).all(|y| {
            (r.x..r.right()).all(|x| self.iter().any(|p| self.footprint(*p).contains(x, y)))
        })
    }

    /// Snaps every placement so that its offset from the first placement is
    /// a multiple of `block`, keeping coverage of `omega`.
    fn aligned(&self, block: usize, omega: &Rect) -> Result<PatchSchedule> {
        let Some(first) = self.placements.first().copied() else {
            return Ok(self.clone());
        };
        let snap = |v: usize, base: usize| base + (v - base) / block * block;
        let mut xs: Vec<usize> = self.placements[..self.columns]
            .iter()
            .map(|p| snap(p.x, first.x))
            .collect();
        let mut ys: Vec<usize> = self
            .placements
            .iter()
            .step_by(self.columns)
            .map(|p| snap(p.y, first.y))
            .collect();
        xs.dedup();
        ys.dedup();
        let out = grid_schedule(&xs, &ys, self.patch, self.overlap);
        if !out.covers(omega) {
            return Err(Error::InvalidArgument(format!(
                "cannot place {0}x{0} patches on a 2^q grid that covers the hole",
                self.patch
            )));
        }
        Ok(out)
    }
}

fn grid_schedule(xs: &[usize], ys: &[usize], patch: usize, overlap: usize) -> PatchSchedule {
    let placements = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Placement::new(x, y)))
        .collect();
    PatchSchedule {
        placements,
        patch,
        overlap,
        columns: xs.len(),
        rows: ys.len(),
    }
}

/// Positions along one axis: start `overlap` before the hole, step by
/// `patch − overlap` until the hole is covered, clamp into the image.
fn axis_positions(lo: usize, hi: usize, extent: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let step = patch - overlap;
    let start = lo.saturating_sub(overlap);
    let mut out = vec![start.min(extent - patch)];
    let mut next = start;
    while next + patch < hi {
        next += step;
        out.push(next.min(extent - patch));
    }
    out.dedup();
    out
}

/// Top-to-bottom, left-to-right placements of `patch`×`patch` windows that
/// cover Ω with `overlap` pixels shared between neighbours.
pub fn build_schedule(region: &RegionSpec, patch: usize, overlap: usize) -> Result<PatchSchedule> {
    if overlap >= patch {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be smaller than the patch size {patch}"
        )));
    }
    if patch > region.width || patch > region.height {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not fit the {}x{} image",
            region.width, region.height
        )));
    }
    let omega = region.omega;
    if omega.is_empty() {
        return Ok(grid_schedule(&[], &[], patch, overlap));
    }
    let xs = axis_positions(omega.x, omega.right(), region.width, patch, overlap);
    let ys = axis_positions(omega.y, omega.bottom(), region.height, patch, overlap);
    let first = Rect::new(xs[0], ys[0], patch, patch);
    if omega.contains_rect(&first) {
        return Err(Error::InvalidArgument(
            "the first patch lies entirely inside the hole; no known boundary to anchor to".into(),
        ));
    }
    Ok(grid_schedule(&xs, &ys, patch, overlap))
}

/// Smallest rectangle containing `want` whose edges sit on the grid of
/// multiples of `block` through `anchor`. Where that leaves the image the
/// rectangle is shrunk, never below `must` (which lies on the grid).
fn global_window(
    want: Rect,
    must: Rect,
    anchor: Placement,
    block: usize,
    w: usize,
    h: usize,
) -> Rect {
    let span = |lo: usize, hi: usize, must_hi: usize, base: usize, extent: usize| {
        let start = if lo >= base {
            base + (lo - base) / block * block
        } else {
            base.checked_sub((base - lo).div_ceil(block) * block)
                .unwrap_or(base % block)
        };
        let mut end = start + (hi.max(must_hi) - start).div_ceil(block) * block;
        while end > extent && end - block >= must_hi {
            end -= block;
        }
        (start, end)
    };
    let (x0, x1) = span(want.x, want.right(), must.right(), anchor.x, w);
    let (y0, y1) = span(want.y, want.bottom(), must.bottom(), anchor.y, h);
    Rect::new(x0, y0, x1 - x0, y1 - y0)
}

/// Value of each loss term at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub detail: f64,
    pub global: f64,
    pub boundary: f64,
}

impl From<&LossEvaluation> for LossBreakdown {
    fn from(e: &LossEvaluation) -> Self {
        LossBreakdown {
            total: e.total,
            detail: e.detail,
            global: e.global,
            boundary: e.boundary,
        }
    }
}

/// Outcome of one patch optimization.
#[derive(Clone, Debug)]
pub struct PatchRecord {
    pub stage: Stage,
    pub index: usize,
    pub placement: Placement,
    /// Top-left corner of the reference patch (x_d in the fine stage, the
    /// global reference window in the coarse stage), in image pixels.
    pub reference: Placement,
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
    /// Objective after every accepted optimizer step.
    pub trajectory: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub elapsed: Duration,
}

/// Everything the pipeline decided and measured during a run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub schedule: PatchSchedule,
    /// Native-resolution window whose pooled version feeds the global branch.
    pub global_window: Rect,
    pub global_reference: Option<Placement>,
    pub records: Vec<PatchRecord>,
}

impl RunReport {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Summed (initial, final) objective over the patches of one stage.
    pub fn loss_sums(&self, stage: Stage) -> (f64, f64) {
        self.stage(stage).fold((0.0, 0.0), |(a, b), r| {
            (a + r.initial.total, b + r.last.total)
        })
    }
}

/// One line per patch.
impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.global_window;
        write!(f, "setup window={}x{}+{}+{}", w.w, w.h, w.x, w.y)?;
        if let Some(r) = self.global_reference {
            write!(f, " global_ref={r}")?;
        }
        writeln!(f, " patches={}", self.schedule.len())?;
        for r in &self.records {
            writeln!(
                f,
                "stage={} patch={} at={} ref={} initial={:.6e} final={:.6e} detail={:.6e}->{:.6e} \
                 iterations={} evaluations={} termination={:?} ms={}",
                r.stage,
                r.index,
                r.placement,
                r.reference,
                r.initial.total,
                r.last.total,
                r.initial.detail,
                r.last.detail,
                r.iterations,
                r.evaluations,
                r.termination,
                r.elapsed.as_millis()
            )?;
        }
        Ok(())
    }
}

/// Canvas plus the mask of pixels already known or synthesized in the
/// current stage (1 known, 0 pending).
#[derive(Clone, Debug)]
pub struct InpaintState {
    pub canvas: Tensor,
    pub known: Tensor,
}

/// Derived per-run quantities shared by both stages.
#[derive(Clone, Debug)]
pub struct Plan {
    pub detail_net: FeatureNetwork,
    pub global_net: FeatureNetwork,
    pub schedule: PatchSchedule,
    pub global_window: Rect,
    pub global_reference: Placement,
    pub global_stats: GramianSet,
    /// Shifts for the detail layers, clamped to the patch's feature sizes.
    pub detail_deltas: Vec<usize>,
    pub detail_expansions: Vec<usize>,
    /// Unmodified input; candidates are read from here.
    pub source: Tensor,
}

/// Value for each of `names`, taken from the matching detail layer or the
/// last detail entry when the layer is not in the detail set.
fn per_layer(names: &[String], detail: &[String], values: &[usize]) -> Vec<usize> {
    names
        .iter()
        .map(|n| match detail.iter().position(|d| d == n) {
            Some(i) => values[i],
            None => values[values.len() - 1],
        })
        .collect()
}

/// Caps each shift below the extent of its feature map.
fn clamp_deltas(net: &FeatureNetwork, height: usize, width: usize, deltas: &[usize]) -> Vec<usize> {
    net.statistics_shapes(height, width)
        .iter()
        .zip(deltas)
        .map(|(&(_, h, w), &d)| d.min(h.min(w).saturating_sub(1)))
        .collect()
}

fn min_pool_times(m: &Tensor, q: usize) -> Tensor {
    (0..q).fold(m.clone(), |acc, _| min_pool(&acc))
}

fn crop_rect(t: &Tensor, r: Rect) -> Result<Tensor> {
    t.crop(r.x, r.y, r.w, r.h)
}

/// Tags an untagged error as a setup failure.
fn in_setup(e: Error) -> Error {
    match e {
        Error::Pipeline { .. } => e,
        e => setup_error(Placement::default())(e),
    }
}

fn setup_error(placement: Placement) -> impl FnOnce(Error) -> Error {
    move |e| Error::Pipeline {
        stage: Stage::Setup,
        patch: 0,
        placement,
        source: Box::new(e),
    }
}

/// Initial state: Ω filled with the channel means of the source region.
pub fn initial_state(job: &InpaintJob) -> Result<InpaintState> {
    let region = &job.region;
    let image = image_to_tensor(&job.image);
    let mut canvas = fill_with_channel_means(&image, region, &region.source_mask())?;
    if job.init_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        let half = 0.5 * job.init_noise;
        let omega = region.omega;
        for c in 0..canvas.channels() {
            for y in omega.y..omega.bottom() {
                for x in omega.x..omega.right() {
                    let v = canvas.get(c, y, x) + rng.random_range(-half..=half);
                    canvas.set(c, y, x, v.clamp(0.0, 255.0));
                }
            }
        }
    }
    Ok(InpaintState {
        canvas,
        known: region.known_mask(),
    })
}

/// Schedule, networks, global window and global reference statistics.
pub fn plan(job: &InpaintJob, state: &InpaintState) -> Result<Plan> {
    job.validate()?;
    let region = &job.region;
    let block = 1usize << job.q;
    let patch = job.patch_size;
    let schedule = build_schedule(region, patch, job.overlap())?.aligned(block, &region.omega)?;
    let first = schedule.placements.first().copied().unwrap_or_default();
    let wrap = setup_error(first);

    let detail_net = job.network.with_statistics_layers(&job.detail_layers)?;
    let global_net = job.network.with_statistics_layers(&job.global_layers)?;

    let must = schedule
        .iter()
        .map(|p| schedule.footprint(*p))
        .reduce(|a, b| {
            let (x0, y0) = (a.x.min(b.x), a.y.min(b.y));
            let (x1, y1) = (a.right().max(b.right()), a.bottom().max(b.bottom()));
            Rect::new(x0, y0, x1 - x0, y1 - y0)
        })
        .unwrap_or_default();
    let band = region.omega_with_band();
    let want = Rect::new(
        band.x.min(must.x),
        band.y.min(must.y),
        band.right().max(must.right()) - band.x.min(must.x),
        band.bottom().max(must.bottom()) - band.y.min(must.y),
    );
    let window = global_window(want, must, first, block, region.width, region.height);

    // global reference: the best pooled window of the source region
    let source = image_to_tensor(&job.image);
    let pooled_source = pool_times(&source, job.q);
    let query = pool_times(&crop_rect(&state.canvas, window)?, job.q);
    let query_mask = min_pool_times(&crop_rect(&state.known, window)?, job.q);
    let omega = region.omega;
    let pooled_omega = Rect::new(
        omega.x >> job.q,
        omega.y >> job.q,
        omega.right().div_ceil(block) - (omega.x >> job.q),
        omega.bottom().div_ceil(block) - (omega.y >> job.q),
    );
    let global_expansions = per_layer(&job.global_layers, &job.detail_layers, &job.expansions);
    let global_deltas = per_layer(&job.global_layers, &job.detail_layers, &job.deltas);
    let (qh, qw) = (query.height(), query.width());
    let (global_reference, x_g) = (|| {
        let grid = SearchGrid::new(
            pooled_source.width(),
            pooled_source.height(),
            qw,
            qh,
            (job.stride >> job.q).max(1),
            pooled_omega,
        )?;
        let pyramid = global_net.propagate_mask(&query_mask, &global_expansions)?;
        let found =
            ReferenceSearch::new(&pooled_source, grid, &global_net).find(&query, &pyramid)?;
        Ok::<_, Error>((found.position, found.patch))
    })()
    .map_err(wrap)?;
    let global_deltas = clamp_deltas(&global_net, qh, qw, &global_deltas);
    let global_stats =
        GramianSet::of_texture(&global_net, &x_g, &global_deltas).map_err(setup_error(first))?;
    log::info!(
        "{} patches, global window {}x{}+{}+{}, global reference {}",
        schedule.len(),
        window.w,
        window.h,
        window.x,
        window.y,
        global_reference
    );
    Ok(Plan {
        detail_deltas: clamp_deltas(&detail_net, patch, patch, &job.deltas),
        detail_expansions: job.expansions.clone(),
        detail_net,
        global_net,
        schedule,
        global_window: window,
        global_reference: Placement::new(global_reference.x << job.q, global_reference.y << job.q),
        global_stats,
        source,
    })
}

fn dump(job: &InpaintJob, name: &str, canvas: &Tensor) -> Result<()> {
    if let Some(dir) = &job.dump_dir {
        save_canvas(canvas, &dir.join(name))?;
    }
    Ok(())
}

fn save_canvas(canvas: &Tensor, path: &Path) -> Result<()> {
    tensor_to_image(canvas)?.save_png(path)
}

struct PatchProblem<'a> {
    objective: PatchObjective<'a>,
    x0: Tensor,
    iterations: usize,
    history: usize,
}

/// Runs the optimizer on one patch and returns the result with its record
/// fields filled in (stage, index, placement and reference are left to the
/// caller).
fn optimize(problem: PatchProblem<'_>) -> Result<(Tensor, PatchRecord)> {
    let start = Instant::now();
    let (c, h, w) = problem.x0.shape();
    let objective = &problem.objective;
    let initial = LossBreakdown::from(&objective.evaluate(&problem.x0)?);
    let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let e = objective.evaluate(&Tensor::from_vec(c, h, w, x.to_vec())?)?;
        Ok((e.total, e.gradient.into_vec()))
    };
    let cfg = OptimizerConfig {
        history_size: problem.history,
        max_iterations: problem.iterations,
        bounds: Bounds::Uniform(0.0, 255.0),
        ..OptimizerConfig::default()
    };
    let report = minimize(&mut f, problem.x0.data(), &cfg)?;
    let x = Tensor::from_vec(c, h, w, report.x)?;
    let last = LossBreakdown::from(&objective.evaluate(&x)?);
    let record = PatchRecord {
        stage: Stage::Setup,
        index: 0,
        placement: Placement::default(),
        reference: Placement::default(),
        initial,
        last,
        trajectory: report.values,
        iterations: report.iterations,
        evaluations: report.evaluations,
        termination: report.termination,
        elapsed: start.elapsed(),
    };
    Ok((x, record))
}

fn mark_known(known: &mut Tensor, footprint: Rect, omega: Rect) {
    for y in footprint.y..footprint.bottom() {
        for x in footprint.x..footprint.right() {
            if omega.contains(x, y) {
                known.set(0, y, x, 1.0);
            }
        }
    }
}

fn write_inside(canvas: &mut Tensor, patch: &Tensor, at: Placement, omega: Rect) {
    for c in 0..patch.channels() {
        for r in 0..patch.height() {
            for k in 0..patch.width() {
                if omega.contains(at.x + k, at.y + r) {
                    canvas.set(c, at.y + r, at.x + k, patch.get(c, r, k));
                }
            }
        }
    }
}

/// Global statistics only, written straight into Ω; Ω is converted to
/// greyscale afterwards unless disabled.
pub fn coarse_pass(
    job: &InpaintJob,
    plan: &Plan,
    mut state: InpaintState,
    records: &mut Vec<PatchRecord>,
) -> Result<InpaintState> {
    let omega = job.region.omega;
    let weights = LossWeights {
        w_d: 0.0,
        w_g: 1.0,
        w_b: if job.coarse_boundary {
            job.weights.w_b
        } else {
            0.0
        },
        ..job.weights
    };
    let window = plan.global_window;
    let patch = plan.schedule.patch;
    for (index, &at) in plan.schedule.iter().enumerate() {
        let fail = |e: Error| Error::Pipeline {
            stage: Stage::Coarse,
            patch: index,
            placement: at,
            source: Box::new(e),
        };
        let (x, mut record) = (|| {
            let x0 = state.canvas.crop(at.x, at.y, patch, patch)?;
            let mask = state.known.crop(at.x, at.y, patch, patch)?;
            let embedding = PooledEmbedding::new(
                &crop_rect(&state.canvas, window)?,
                job.q,
                patch,
                patch,
                (at.x - window.x, at.y - window.y),
            )?;
            optimize(PatchProblem {
                objective: PatchObjective {
                    detail: None,
                    global: Some((
                        Branch {
                            net: &plan.global_net,
                            reference: &plan.global_stats,
                        },
                        &embedding,
                    )),
                    x_b: &x0,
                    mask: &mask,
                    weights,
                },
                x0: x0.clone(),
                iterations: job.coarse_iterations,
                history: job.history_size,
            })
        })()
        .map_err(fail)?;
        write_inside(&mut state.canvas, &x, at, omega);
        mark_known(&mut state.known, plan.schedule.footprint(at), omega);
        record.stage = Stage::Coarse;
        record.index = index;
        record.placement = at;
        record.reference = plan.global_reference;
        log::info!(
            "coarse patch {index} at {at}: {:.4e} -> {:.4e}",
            record.initial.total,
            record.last.total
        );
        records.push(record);
        dump(job, &format!("coarse_{index:02}.png"), &state.canvas).map_err(fail)?;
    }
    if job.greyscale {
        state.canvas = to_greyscale_region_weighted(&state.canvas, &job.region, job.grey_weights)?;
        dump(job, "grey.png", &state.canvas)?;
    }
    Ok(state)
}

/// Detail plus global statistics against a searched reference per patch,
/// composited with minimum-error seams.
pub fn fine_pass(
    job: &InpaintJob,
    plan: &Plan,
    mut state: InpaintState,
    records: &mut Vec<PatchRecord>,
) -> Result<InpaintState> {
    let omega = job.region.omega;
    state.known = job.region.known_mask();
    let window = plan.global_window;
    let patch = plan.schedule.patch;
    let overlap = plan.schedule.overlap;
    let first = plan
        .schedule
        .placements
        .first()
        .copied()
        .unwrap_or_default();
    let search = SearchGrid::new(
        plan.source.width(),
        plan.source.height(),
        patch,
        patch,
        job.stride,
        omega,
    )
    .and_then(|grid| {
        ReferenceSearch::new(&plan.source, grid, &plan.detail_net).with_cache(job.cache_budget)
    })
    .map_err(|e| Error::Pipeline {
        stage: Stage::Fine,
        patch: 0,
        placement: first,
        source: Box::new(e),
    })?;
    for (index, &at) in plan.schedule.iter().enumerate() {
        let fail = |e: Error| Error::Pipeline {
            stage: Stage::Fine,
            patch: index,
            placement: at,
            source: Box::new(e),
        };
        let (x, mut record) = (|| {
            let x0 = state.canvas.crop(at.x, at.y, patch, patch)?;
            let mask = state.known.crop(at.x, at.y, patch, patch)?;
            let pyramid = plan
                .detail_net
                .propagate_mask(&mask, &plan.detail_expansions)?;
            let found = search.find(&x0, &pyramid)?;
            let reference =
                GramianSet::of_texture(&plan.detail_net, &found.patch, &plan.detail_deltas)?;
            let embedding = PooledEmbedding::new(
                &crop_rect(&state.canvas, window)?,
                job.q,
                patch,
                patch,
                (at.x - window.x, at.y - window.y),
            )?;
            let (x, mut record) = optimize(PatchProblem {
                objective: PatchObjective {
                    detail: Some(Branch {
                        net: &plan.detail_net,
                        reference: &reference,
                    }),
                    global: Some((
                        Branch {
                            net: &plan.global_net,
                            reference: &plan.global_stats,
                        },
                        &embedding,
                    )),
                    x_b: &x0,
                    mask: &mask,
                    weights: job.weights,
                },
                x0: x0.clone(),
                iterations: job.fine_iterations,
                history: job.history_size,
            })?;
            record.reference = found.position;
            Ok::<_, Error>((x, record))
        })()
        .map_err(fail)?;
        state.canvas = composite_patch(&state.canvas, &x, at, overlap, omega).map_err(fail)?;
        mark_known(&mut state.known, plan.schedule.footprint(at), omega);
        record.stage = Stage::Fine;
        record.index = index;
        record.placement = at;
        log::info!(
            "fine patch {index} at {at} (reference {}): {:.4e} -> {:.4e}",
            record.reference,
            record.initial.total,
            record.last.total
        );
        records.push(record);
        dump(job, &format!("fine_{index:02}.png"), &state.canvas).map_err(fail)?;
    }
    Ok(state)
}

/// Runs both stages and returns the result with the run report.
pub fn inpaint(job: &InpaintJob) -> Result<(ImageBuffer, RunReport)> {
    job.validate()?;
    if let Some(dir) = &job.dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    if job.region.omega.is_empty() {
        dump(job, "final.png", &image_to_tensor(&job.image))?;
        let schedule = grid_schedule(&[], &[], job.patch_size, job.overlap());
        return Ok((
            job.image.clone(),
            RunReport {
                schedule,
                global_window: Rect::default(),
                global_reference: None,
                records: Vec::new(),
            },
        ));
    }
    let state = initial_state(job).map_err(in_setup)?;
    let plan = plan(job, &state).map_err(in_setup)?;
    let mut records = Vec::new();
    let state = coarse_pass(job, &plan, state, &mut records)?;
    let state = fine_pass(job, &plan, state, &mut records)?;
    let image = tensor_to_image(&state.canvas)?;
    if let Some(dir) = &job.dump_dir {
        image.save_png(dir.join("final.png"))?;
    }
    Ok((
        image,
        RunReport {
            schedule: plan.schedule,
            global_window: plan.global_window,
            global_reference: Some(plan.global_reference),
            records,
        },
    ))
}
