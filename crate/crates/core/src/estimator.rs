//! Parameter recovery by direct minimization of the L2 reconstruction loss
//! through the rectification layer.
//!
//! Instead of a learned regressor, the eight parameters of a single
//! fisheye / ground-truth pair are optimized with ADAGRAD, using the
//! analytic gradients of [`rect_layer::backward`]. ADAGRAD runs in
//! whitened coordinates (see [`whitening`]), restarted periodically, on a
//! coarse-to-fine pyramid. Exactly black fisheye pixels are treated as
//! outside the lens footprint and kept out of the loss.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::camera_model::{check_monotonic, DistortionParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::image_core::{FillMode, ImageBuffer, Mask};
use crate::rect_layer::{self, build_grid, finite_diff_oracle, rectify, PinholeGeometry, WarpGrid};

pub type Matrix8 = SMatrix<f64, 8, 8>;
type Vector8 = SVector<f64, 8>;

/// `sum (I_r - I_gt)^2` over the masked pixels and all channels, together
/// with the upstream gradient `2 (I_r - I_gt)` (zero outside the mask).
pub fn reconstruction_loss(
    rectified: &ImageBuffer,
    gt: &ImageBuffer,
    mask: Option<&Mask>,
) -> Result<(f64, ImageBuffer)> {
    rectified.check_same_shape(gt)?;
    if let Some(m) = mask {
        if (m.width(), m.height()) != (gt.width(), gt.height()) {
            return Err(Error::shape(
                format!("{}x{} mask", gt.width(), gt.height()),
                format!("{}x{} mask", m.width(), m.height()),
            ));
        }
    }
    let ch = gt.channels();
    let mut upstream = ImageBuffer::new(gt.width(), gt.height(), ch);
    let mut loss = 0.0;
    let (r, g) = (rectified.data(), gt.data());
    let up = upstream.data_mut();
    for (pixel, i) in (0..r.len()).step_by(ch).enumerate() {
        if let Some(m) = mask {
            if !m.data()[pixel] {
                continue;
            }
        }
        for c in i..i + ch {
            let d = r[c] - g[c];
            loss += d * d;
            up[c] = 2.0 * d;
        }
    }
    Ok((loss, upstream))
}

/// ADAGRAD state over the normalized parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub params: [f64; 8],
    pub accum: [f64; 8],
    pub learning_rate: f64,
    pub epsilon: f64,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(params: [f64; 8], learning_rate: f64, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        Self {
            params,
            accum: [0.0; 8],
            learning_rate,
            epsilon,
            iteration: 0,
        }
    }
}

/// One ADAGRAD update: `G += g^2`, then `p -= lr * g / (sqrt(G) + eps)`.
pub fn adagrad_step(mut state: OptimizerState, grad: &[f64; 8]) -> OptimizerState {
    for ((p, acc), g) in state.params.iter_mut().zip(&mut state.accum).zip(grad) {
        *acc += g * g;
        *p -= state.learning_rate * g / (acc.sqrt() + state.epsilon);
    }
    state.iteration += 1;
    state
}

/// Optimizer settings. Learning rates are in whitened units (see
/// [`whitening`]): a step of 1 moves the fisheye sample positions by
/// about one pixel RMS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// ADAGRAD learning rate at the finest level; doubled per coarser level.
    pub learning_rate: f64,
    pub epsilon: f64,
    /// Iterations per level (per start on a multi-start level).
    pub iterations: usize,
    pub levels: usize,
    /// Border excluded from the loss at the finest level, in pixels. Halved
    /// (at least 1) per coarser level.
    pub border: usize,
    pub fill: FillModeSetting,
    /// Every this many iterations the whitening is recomputed at the
    /// current parameters and ADAGRAD restarts with fresh accumulators.
    /// 0 disables restarts.
    pub restart_every: usize,
    /// Learning-rate factor applied at each restart.
    pub restart_decay: f64,
    /// Number of `k` coefficients optimized on the coarsest level of a
    /// multi-level run; the rest stay at their initial values until the
    /// next level.
    pub coarse_k_terms: usize,
    /// Try a small grid of starting points (k1 and focal scale) on the
    /// coarsest level of a multi-level run and continue from the best.
    pub multi_start: bool,
    /// Treat exactly black fisheye pixels as outside the field of view and
    /// drop rectified pixels that sample them from the loss.
    pub mask_black: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.25,
            epsilon: 1e-8,
            iterations: 500,
            levels: 3,
            border: 8,
            fill: FillModeSetting::Clamp,
            restart_every: 100,
            restart_decay: 0.5,
            coarse_k_terms: 1,
            multi_start: true,
            mask_black: true,
        }
    }
}

/// Serializable mirror of [`FillMode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillModeSetting {
    Zero,
    Clamp,
}

impl From<FillModeSetting> for FillMode {
    fn from(f: FillModeSetting) -> Self {
        match f {
            FillModeSetting::Zero => FillMode::Zero,
            FillModeSetting::Clamp => FillMode::Clamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Global iteration index (continues across pyramid levels).
    pub iteration: usize,
    pub level: usize,
    pub loss: f64,
    pub params: DistortionParams,
    /// Norm of the gradient in normalized parameter space.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossReport {
    /// Loss of the returned parameters at the finest level.
    pub loss: f64,
    pub trace: Vec<TraceEntry>,
    /// Whether the returned `k` gives a strictly increasing `r(theta)` over
    /// the rectified field of view.
    pub monotonic: bool,
}

impl LossReport {
    /// CSV with columns `iteration,loss,k1..k4,mu,mv,u0,v0,grad_norm`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss");
        for name in PARAM_NAMES {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",grad_norm\n");
        for e in &self.trace {
            let _ = write!(out, "{},{:.17e}", e.iteration, e.loss);
            for v in e.params.to_array() {
                let _ = write!(out, ",{v:.17e}");
            }
            let _ = writeln!(out, ",{:.17e}", e.grad_norm);
        }
        out
    }

    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One pyramid level: images, geometry and the loss mask ingredients.
struct Level<'a> {
    fisheye: &'a ImageBuffer,
    gt: &'a ImageBuffer,
    geometry: PinholeGeometry,
    /// Fisheye pixels that carry content (see [`Schedule::mask_black`]).
    content: Option<&'a Mask>,
    border: usize,
    fill: FillMode,
}

impl Level<'_> {
    fn mask(&self, grid: &WarpGrid) -> Mask {
        let m = match self.content {
            Some(c) => grid.footprint_mask(c),
            None => grid.in_bounds_mask(self.fisheye.width(), self.fisheye.height()),
        };
        m.and(&Mask::interior(self.geometry.width, self.geometry.height, self.border))
    }

    /// Loss, parameter gradient and number of pixels in the loss.
    fn evaluate(&self, params: &DistortionParams) -> Result<(f64, [f64; 8], usize)> {
        let grid = build_grid(params, &self.geometry)?;
        let rectified = rectify(self.fisheye, &grid, self.fill)?;
        let mask = self.mask(&grid);
        let (loss, upstream) = reconstruction_loss(&rectified, self.gt, Some(&mask))?;
        let grads = rect_layer::backward(self.fisheye, &grid, &upstream, self.fill, false)?;
        Ok((loss, grads.d_params, mask.count()))
    }
}

/// Mask used by the estimator: a border of `border` pixels plus every pixel
/// whose bilinear footprint leaves the fisheye raster.
pub fn interior_mask(
    params: &DistortionParams,
    geometry: &PinholeGeometry,
    fisheye_width: usize,
    fisheye_height: usize,
    border: usize,
) -> Result<Mask> {
    let grid = build_grid(params, geometry)?;
    Ok(grid
        .in_bounds_mask(fisheye_width, fisheye_height)
        .and(&Mask::interior(geometry.width, geometry.height, border)))
}

/// Loss and parameter gradient at `params`, with the loss restricted to
/// [`interior_mask`].
pub fn loss_and_gradient(
    fisheye: &ImageBuffer,
    gt: &ImageBuffer,
    params: &DistortionParams,
    geometry: &PinholeGeometry,
    border: usize,
    fill: FillMode,
) -> Result<(f64, [f64; 8])> {
    let level = Level {
        fisheye,
        gt,
        geometry: *geometry,
        content: None,
        border,
        fill,
    };
    level.evaluate(params).map(|(l, g, _)| (l, g))
}

/// Scalar loss only, for finite differences. The mask is supplied by the
/// caller so it stays fixed while `params` is perturbed.
pub fn loss_with_fixed_mask(
    fisheye: &ImageBuffer,
    gt: &ImageBuffer,
    params: &DistortionParams,
    mask: &Mask,
    geometry: &PinholeGeometry,
    fill: FillMode,
) -> Result<f64> {
    let grid = build_grid(params, geometry)?;
    let rectified = rectify(fisheye, &grid, fill)?;
    Ok(reconstruction_loss(&rectified, gt, Some(mask))?.0)
}

fn check_pair(fisheye: &ImageBuffer, gt: &ImageBuffer, geometry: &PinholeGeometry) -> Result<()> {
    fisheye.check_same_shape(gt)?;
    if (gt.width(), gt.height()) != (geometry.width, geometry.height) {
        return Err(Error::shape(
            format!("{}x{}", geometry.width, geometry.height),
            format!("{}x{}", gt.width(), gt.height()),
        ));
    }
    Ok(())
}

/// Linear map `T` with `params = origin + T z` under which the sampling
/// displacement is isotropic: `z^T z` equals the mean squared shift (in
/// pixels) of the fisheye sample positions over `mask`, to first order.
///
/// `T = L^-T` where `L L^T = mean_pixels(J^T J)` and `J` is the 2x8
/// Jacobian of `(x_f, y_f)` with respect to the parameters. The odd powers
/// of theta are nearly collinear over a typical field of view, so the raw
/// `k` coordinates are badly conditioned; ADAGRAD's per-coordinate scaling
/// cannot fix that, but it works well in these coordinates.
///
/// Parameters outside `free` get an identity block and are held fixed by
/// the caller.
pub fn whitening(grid: &WarpGrid, mask: &Mask, free: &[bool; 8]) -> Matrix8 {
    let p = grid.params();
    let mut m = Matrix8::zeros();
    let mut n = 0usize;
    for (e, _) in grid.entries().iter().zip(mask.data()).filter(|(_, &keep)| keep) {
        let mut jx = Vector8::zeros();
        let mut jy = Vector8::zeros();
        let t2 = e.theta * e.theta;
        let mut t = e.theta;
        for i in 0..4 {
            t *= t2;
            jx[i] = p.mu * e.dir_x * t;
            jy[i] = p.mv * e.dir_y * t;
        }
        jx[4] = e.dir_x * e.radial;
        jy[5] = e.dir_y * e.radial;
        jx[6] = 1.0;
        jy[7] = 1.0;
        m += jx * jx.transpose() + jy * jy.transpose();
        n += 1;
    }
    if n > 0 {
        m /= n as f64;
    }
    for i in (0..8).filter(|&i| !free[i]) {
        m.row_mut(i).fill(0.0);
        m.column_mut(i).fill(0.0);
        m[(i, i)] = 1.0;
    }
    match m.cholesky().and_then(|c| c.l().transpose().try_inverse()) {
        Some(t) => t,
        // Degenerate footprint (e.g. nearly empty mask): per-coordinate
        // scaling only.
        None => Matrix8::from_diagonal(&m.diagonal().map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 })),
    }
}

/// Per-level knobs derived from the schedule.
struct LevelRun {
    learning_rate: f64,
    free: [bool; 8],
}

/// ADAGRAD in whitened coordinates with periodic re-whitening. Returns the
/// best iterate, its loss and its mask size.
fn run_level(
    level: &Level,
    init: &DistortionParams,
    schedule: &Schedule,
    run: &LevelRun,
    level_index: usize,
    trace: &mut Vec<TraceEntry>,
) -> Result<(DistortionParams, f64, usize)> {
    let restart = if schedule.restart_every == 0 { usize::MAX } else { schedule.restart_every };
    let mut origin = Vector8::from(init.to_array());
    let mut transform = Matrix8::identity();
    let mut state = OptimizerState::new([0.0; 8], run.learning_rate, schedule.epsilon);
    let mut best: Option<(DistortionParams, f64, usize)> = None;

    for it in 0..=schedule.iterations {
        let params = DistortionParams::from_array((origin + transform * Vector8::from(state.params)).into());
        let diverged = |trace: &mut Vec<TraceEntry>| Error::Diverged {
            iteration: trace.len(),
            trace: std::mem::take(trace),
        };
        if !params.is_finite() {
            return Err(diverged(trace));
        }
        if it % restart == 0 && it < schedule.iterations {
            let grid = build_grid(&params, &level.geometry)?;
            origin = Vector8::from(params.to_array());
            transform = whitening(&grid, &level.mask(&grid), &run.free);
            let lr = run.learning_rate * schedule.restart_decay.powi((it / restart) as i32);
            state = OptimizerState::new([0.0; 8], lr, schedule.epsilon);
        }

        let (loss, grad, count) = level.evaluate(&params)?;
        let mut gz = transform.transpose() * Vector8::from(grad);
        for i in (0..8).filter(|&i| !run.free[i]) {
            gz[i] = 0.0;
        }
        let grad_norm = gz.norm();
        trace.push(TraceEntry {
            iteration: trace.len(),
            level: level_index,
            loss,
            params,
            grad_norm,
        });
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(diverged(trace));
        }
        if best.as_ref().is_none_or(|(_, l, _)| loss < *l) {
            best = Some((params, loss, count));
        }
        if it < schedule.iterations {
            state = adagrad_step(state, &gz.into());
        }
    }
    Ok(best.expect("at least one iteration is evaluated"))
}

fn validate_schedule(schedule: &Schedule) -> Result<()> {
    let ok = schedule.epsilon > 0.0
        && schedule.learning_rate.is_finite()
        && schedule.learning_rate >= 0.0
        && schedule.restart_decay.is_finite()
        && schedule.restart_decay > 0.0
        && schedule.coarse_k_terms <= 4;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("invalid schedule {schedule:?}")))
    }
}

/// Runs ADAGRAD from `init` on a single level and returns the best iterate.
pub fn estimate_params(
    fisheye: &ImageBuffer,
    gt: &ImageBuffer,
    init: &DistortionParams,
    geometry: &PinholeGeometry,
    schedule: &Schedule,
) -> Result<(DistortionParams, LossReport)> {
    check_pair(fisheye, gt, geometry)?;
    init.validate()?;
    validate_schedule(schedule)?;
    let content = schedule.mask_black.then(|| Mask::non_black(fisheye));
    let level = Level {
        fisheye,
        gt,
        geometry: *geometry,
        content: content.as_ref(),
        border: schedule.border,
        fill: schedule.fill.into(),
    };
    let run = LevelRun {
        learning_rate: schedule.learning_rate,
        free: [true; 8],
    };
    let mut trace = Vec::new();
    let (params, loss, _) = run_level(&level, init, schedule, &run, 0, &mut trace)?;
    Ok((
        params,
        LossReport {
            loss,
            trace,
            monotonic: check_monotonic(&params.k, geometry.theta_max()).is_ok(),
        },
    ))
}

/// Starting points tried on the coarsest level: `k1` in {-0.2, 0, 0.2}
/// times focal scale in {0.8, 1, 1.25}.
fn coarse_starts(init: &DistortionParams) -> Vec<DistortionParams> {
    let mut starts = Vec::with_capacity(9);
    for k1 in [0.0, -0.2, 0.2] {
        for scale in [1.0, 0.8, 1.25] {
            let mut p = *init;
            p.k[0] = k1;
            p.mu *= scale;
            p.mv *= scale;
            starts.push(p);
        }
    }
    starts
}

/// Estimates on a 2x image pyramid from coarsest to finest, carrying the
/// best parameters of each level to the next with
/// [`DistortionParams::rescaled`]. With one level this is exactly
/// [`estimate_params`].
///
/// On the coarsest level of a multi-level run only the first
/// [`Schedule::coarse_k_terms`] coefficients of `k` are free and, with
/// [`Schedule::multi_start`], several starting points are tried. Starts are
/// compared by mean loss per masked pixel, since the mask size varies with
/// the parameters.
pub fn coarse_to_fine(
    fisheye: &ImageBuffer,
    gt: &ImageBuffer,
    init: &DistortionParams,
    geometry: &PinholeGeometry,
    schedule: &Schedule,
) -> Result<(DistortionParams, LossReport)> {
    check_pair(fisheye, gt, geometry)?;
    init.validate()?;
    validate_schedule(schedule)?;
    let levels = schedule.levels.max(1);
    if levels == 1 {
        return estimate_params(fisheye, gt, init, geometry, schedule);
    }
    let min_side = geometry.width.min(geometry.height);
    if min_side >> (levels - 1) < 8 {
        return Err(Error::InvalidImage(format!(
            "{}x{} is too small for {levels} pyramid levels",
            geometry.width, geometry.height
        )));
    }

    let mut pyramid = vec![(fisheye.clone(), gt.clone(), *geometry, Mask::non_black(fisheye))];
    for _ in 1..levels {
        let (f, g, geo, c) = pyramid.last().expect("non-empty");
        pyramid.push((f.downsample2(), g.downsample2(), geo.downsampled(), c.downsample2()));
    }

    let mut params = init.rescaled(0.5f64.powi(levels as i32 - 1));
    let mut trace = Vec::new();
    let mut loss = f64::NAN;
    for index in (0..levels).rev() {
        let (f, g, geo, c) = &pyramid[index];
        let level = Level {
            fisheye: f,
            gt: g,
            geometry: *geo,
            content: schedule.mask_black.then_some(c),
            border: (schedule.border >> index).max(1).min(schedule.border),
            fill: schedule.fill.into(),
        };
        let coarsest = index == levels - 1;
        let mut free = [true; 8];
        if coarsest {
            for (i, f) in free.iter_mut().take(4).enumerate() {
                *f = i < schedule.coarse_k_terms;
            }
        }
        let run = LevelRun {
            learning_rate: schedule.learning_rate * f64::from(1u32 << index),
            free,
        };
        let starts = if coarsest && schedule.multi_start { coarse_starts(&params) } else { vec![params] };
        let mut chosen: Option<(DistortionParams, f64, f64)> = None;
        for start in &starts {
            let (p, l, count) = run_level(&level, start, schedule, &run, index, &mut trace)?;
            let mean = l / count.max(1) as f64;
            if chosen.as_ref().is_none_or(|(_, _, m)| mean < *m) {
                chosen = Some((p, l, mean));
            }
        }
        let (p, l, _) = chosen.expect("at least one start");
        loss = l;
        params = if index > 0 { p.rescaled(2.0) } else { p };
    }
    Ok((
        params,
        LossReport {
            loss,
            trace,
            monotonic: check_monotonic(&params.k, geometry.theta_max()).is_ok(),
        },
    ))
}

/// Analytic versus central-difference comparison for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|)`, or 0 when both are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the analytic parameter gradient of the reconstruction loss
/// against central differences with the given per-parameter `steps`
/// (usually [`rect_layer::FD_STEPS`] or [`rect_layer::FINE_FD_STEPS`]). The loss mask is frozen at
/// `params` so both sides differentiate the same function.
pub fn check_gradients(
    fisheye: &ImageBuffer,
    gt: &ImageBuffer,
    params: &DistortionParams,
    geometry: &PinholeGeometry,
    border: usize,
    fill: FillMode,
    steps: &[f64; 8],
) -> Result<Vec<GradientCheck>> {
    check_pair(fisheye, gt, geometry)?;
    let grid = build_grid(params, geometry)?;
    let mask = grid
        .in_bounds_mask(fisheye.width(), fisheye.height())
        .and(&Mask::interior(geometry.width, geometry.height, border));
    let rectified = rectify(fisheye, &grid, fill)?;
    let (loss, upstream) = reconstruction_loss(&rectified, gt, Some(&mask))?;
    let analytic = rect_layer::backward(fisheye, &grid, &upstream, fill, false)?.d_params;

    // Absolute floor for the 0/0 guard: far below any gradient that a
    // non-degenerate loss of this magnitude can produce.
    let floor = 1e-9 * (1.0 + loss);
    let mut failure = None;
    let checks = (0..8)
        .map(|i| {
            let numeric = finite_diff_oracle(
                |p| match loss_with_fixed_mask(fisheye, gt, p, &mask, geometry, fill) {
                    Ok(l) => l,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                },
                params,
                i,
                steps[i],
            );
            GradientCheck {
                name: PARAM_NAMES[i],
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric, floor),
            }
        })
        .collect();
    match failure {
        Some(e) => Err(e),
        None => Ok(checks),
    }
}
