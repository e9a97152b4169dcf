//! Differentiable distortion rectification layer.
//!
//! The forward pass maps every pixel of the rectified (pinhole) output to a
//! fisheye source location and reads it by bilinear interpolation. The
//! backward pass returns the gradient of a scalar loss with respect to the
//! eight distortion parameters and, optionally, the fisheye image.
//!
//! For an output pixel with pinhole coordinates `(x, y)`, `rho = |(x, y)|`,
//! `theta = atan(rho)` and `R = r(theta)`:
//!
//! ```text
//! x_f = u0 + mu * (x / rho) * R        y_f = v0 + mv * (y / rho) * R
//! dx_f/dk_i = mu * (x / rho) * theta^(2i+1)
//! dx_f/dmu  = (x / rho) * R            dx_f/dmv = 0
//! dx_f/du0  = 1                        dx_f/dv0 = 0
//! ```
//!
//! and symmetrically for `y_f`.

use rayon::prelude::*;

use crate::camera_model::{radial_poly, DistortionParams};
use crate::error::{Error, Result};
use crate::image_core::{BilinearTaps, FillMode, ImageBuffer, LabelMap, Mask};

/// Maps output pixels to normalized pinhole coordinates:
/// `x = (u - cx) * scale`, `y = (v - cy) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PinholeGeometry {
    pub width: usize,
    pub height: usize,
    /// Normalized pinhole units per output pixel.
    pub scale: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PinholeGeometry {
    /// Default geometry for a `width x height` output: centred, with one
    /// pixel spanning `1 / (0.35 * width)` normalized units so that a fisheye
    /// with `mu = 0.35 * width` is neither magnified nor shrunk at its centre.
    pub fn for_size(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            scale: 1.0 / (0.35 * width as f64),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    #[inline]
    pub fn to_pinhole(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) * self.scale, (v - self.cy) * self.scale)
    }

    #[inline]
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale + self.cx, y / self.scale + self.cy)
    }

    /// Largest ray angle seen by any output pixel (at the corners).
    pub fn theta_max(&self) -> f64 {
        let corners = [
            (0.0, 0.0),
            (self.width as f64 - 1.0, 0.0),
            (0.0, self.height as f64 - 1.0),
            (self.width as f64 - 1.0, self.height as f64 - 1.0),
        ];
        corners
            .iter()
            .map(|&(u, v)| {
                let (x, y) = self.to_pinhole(u, v);
                x.hypot(y).atan()
            })
            .fold(0.0, f64::max)
    }

    /// Geometry of the 2x box-downsampled image.
    pub fn downsampled(&self) -> Self {
        Self {
            width: self.width / 2,
            height: self.height / 2,
            scale: self.scale * 2.0,
            cx: (self.cx + 0.5) / 2.0 - 0.5,
            cy: (self.cy + 0.5) / 2.0 - 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidImage("output geometry has zero size".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidParams(format!("invalid pinhole geometry {self:?}")));
        }
        Ok(())
    }
}

/// Cached per-pixel quantities of the forward warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridEntry {
    pub x_f: f64,
    pub y_f: f64,
    pub theta: f64,
    /// `x / rho` (zero on the optical axis).
    pub dir_x: f64,
    /// `y / rho` (zero on the optical axis).
    pub dir_y: f64,
    /// `r(theta)`.
    pub radial: f64,
}

/// Source coordinates in the fisheye image for every rectified pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrid {
    geometry: PinholeGeometry,
    params: DistortionParams,
    entries: Vec<GridEntry>,
}

impl WarpGrid {
    pub fn geometry(&self) -> &PinholeGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &DistortionParams {
        &self.params
    }

    pub fn out_width(&self) -> usize {
        self.geometry.width
    }

    pub fn out_height(&self) -> usize {
        self.geometry.height
    }

    pub fn entries(&self) -> &[GridEntry] {
        &self.entries
    }

    #[inline]
    pub fn entry(&self, u: usize, v: usize) -> &GridEntry {
        &self.entries[v * self.geometry.width + u]
    }

    /// Pixels whose four bilinear neighbours all lie inside a
    /// `width x height` fisheye raster.
    pub fn in_bounds_mask(&self, width: usize, height: usize) -> Mask {
        let (w, h) = (width as f64, height as f64);
        Mask::from_fn(self.geometry.width, self.geometry.height, |u, v| {
            let e = self.entry(u, v);
            e.x_f >= 0.0 && e.y_f >= 0.0 && e.x_f.floor() + 1.0 < w && e.y_f.floor() + 1.0 < h
        })
    }

    /// Pixels whose four bilinear neighbours all lie inside `valid` (a
    /// mask over the fisheye raster).
    pub fn footprint_mask(&self, valid: &Mask) -> Mask {
        let (w, h) = (valid.width() as i64, valid.height() as i64);
        let ok = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && valid.get(x as usize, y as usize);
        Mask::from_fn(self.geometry.width, self.geometry.height, |u, v| {
            let e = self.entry(u, v);
            if !(e.x_f.is_finite() && e.y_f.is_finite()) {
                return false;
            }
            let (x0, y0) = (e.x_f.floor() as i64, e.y_f.floor() as i64);
            ok(x0, y0) && ok(x0 + 1, y0) && ok(x0, y0 + 1) && ok(x0 + 1, y0 + 1)
        })
    }
}

/// Builds the warp grid for `params` over the output geometry.
pub fn build_grid(params: &DistortionParams, geometry: &PinholeGeometry) -> Result<WarpGrid> {
    geometry.validate()?;
    if !params.is_finite() {
        return Err(Error::NonFinite("distortion parameters"));
    }
    let p = *params;
    let g = *geometry;
    let entries: Vec<GridEntry> = (0..g.height)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..g.width).map(move |u| {
                let (x, y) = g.to_pinhole(u as f64, v as f64);
                let rho = x.hypot(y);
                let (dir_x, dir_y) = if rho > 0.0 { (x / rho, y / rho) } else { (0.0, 0.0) };
                let theta = rho.atan();
                let radial = radial_poly(theta, &p.k);
                GridEntry {
                    x_f: p.u0 + p.mu * dir_x * radial,
                    y_f: p.v0 + p.mv * dir_y * radial,
                    theta,
                    dir_x,
                    dir_y,
                    radial,
                }
            })
        })
        .collect();
    Ok(WarpGrid {
        geometry: g,
        params: p,
        entries,
    })
}

/// Samples the fisheye image at every grid location.
pub fn rectify(fisheye: &ImageBuffer, grid: &WarpGrid, fill: FillMode) -> Result<ImageBuffer> {
    if fisheye.width() == 0 || fisheye.height() == 0 {
        return Err(Error::InvalidImage("empty fisheye image".into()));
    }
    let (w, h, ch) = (grid.out_width(), grid.out_height(), fisheye.channels());
    let mut out = ImageBuffer::new(w, h, ch);
    out.data_mut()
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..w {
                let e = grid.entry(u, v);
                let taps = BilinearTaps::new(fisheye, e.x_f, e.y_f, fill);
                for c in 0..ch {
                    row[u * ch + c] = taps.value(fisheye, c);
                }
            }
        });
    Ok(out)
}

/// Warps a label map through the grid with nearest-neighbour sampling.
pub fn rectify_labels(labels: &LabelMap, grid: &WarpGrid) -> Result<LabelMap> {
    let (w, h) = (grid.out_width(), grid.out_height());
    let data = grid
        .entries
        .iter()
        .map(|e| labels.sample_nearest(e.x_f, e.y_f))
        .collect::<Result<Vec<u32>>>()?;
    LabelMap::from_vec(w, h, data, labels.ignore_label())
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    /// `dL/d[k1, k2, k3, k4, mu, mv, u0, v0]`.
    pub d_params: [f64; 8],
    /// `dL/dI_f`, when requested.
    pub d_input: Option<ImageBuffer>,
}

impl GradientBundle {
    pub fn norm(&self) -> f64 {
        self.d_params.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Backward pass of [`rectify`].
///
/// `upstream` is `dL/dI_r` with the rectified image's shape. Parameter
/// gradients are accumulated per row in `f64` and reduced in row order, so
/// the result does not depend on thread scheduling.
pub fn backward(
    fisheye: &ImageBuffer,
    grid: &WarpGrid,
    upstream: &ImageBuffer,
    fill: FillMode,
    want_input_grad: bool,
) -> Result<GradientBundle> {
    let (w, h, ch) = (grid.out_width(), grid.out_height(), fisheye.channels());
    if upstream.width() != w || upstream.height() != h || upstream.channels() != ch {
        return Err(Error::shape(
            format!("{w}x{h}x{ch}"),
            upstream.shape_string(),
        ));
    }
    let p = grid.params;

    let rows: Vec<[f64; 8]> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut acc = [0.0f64; 8];
            for u in 0..w {
                let e = grid.entry(u, v);
                let taps = BilinearTaps::new(fisheye, e.x_f, e.y_f, fill);
                let (mut gx, mut gy) = (0.0, 0.0);
                for c in 0..ch {
                    let g = upstream.get(u, v, c);
                    if g == 0.0 {
                        continue;
                    }
                    let (dx, dy) = taps.gradient(fisheye, c);
                    gx += g * dx;
                    gy += g * dy;
                }
                if gx == 0.0 && gy == 0.0 {
                    continue;
                }
                let along = gx * p.mu * e.dir_x + gy * p.mv * e.dir_y;
                let t2 = e.theta * e.theta;
                let mut power = e.theta * t2;
                for slot in acc.iter_mut().take(4) {
                    *slot += along * power;
                    power *= t2;
                }
                acc[4] += gx * e.dir_x * e.radial;
                acc[5] += gy * e.dir_y * e.radial;
                acc[6] += gx;
                acc[7] += gy;
            }
            acc
        })
        .collect();

    let mut d_params = [0.0f64; 8];
    for row in &rows {
        for (d, r) in d_params.iter_mut().zip(row) {
            *d += r;
        }
    }

    let d_input = want_input_grad.then(|| {
        let mut grad = ImageBuffer::new(fisheye.width(), fisheye.height(), ch);
        let data = grad.data_mut();
        for v in 0..h {
            for u in 0..w {
                let e = grid.entry(u, v);
                let taps = BilinearTaps::new(fisheye, e.x_f, e.y_f, fill);
                let weights = taps.weights();
                for (offset, weight) in taps.offsets.iter().zip(weights) {
                    if let Some(o) = offset {
                        for c in 0..ch {
                            data[o + c] += weight * upstream.get(u, v, c);
                        }
                    }
                }
            }
        }
        grad
    });

    Ok(GradientBundle { d_params, d_input })
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference derivative of `loss` with respect to parameter
/// `index` (in `[k1, k2, k3, k4, mu, mv, u0, v0]` order).
pub fn finite_diff_oracle(
    mut loss: impl FnMut(&DistortionParams) -> f64,
    params: &DistortionParams,
    index: usize,
    step: f64,
) -> f64 {
    assert!(index < 8, "parameter index out of range");
    let base = params.to_array();
    central_difference(
        |value| {
            let mut a = base;
            a[index] = value;
            loss(&DistortionParams::from_array(a))
        },
        base[index],
        step,
    )
}

/// Default finite-difference steps: `1e-4` on `k`, `1e-3` on pixel-unit
/// parameters.
pub const FD_STEPS: [f64; 8] = [1e-4, 1e-4, 1e-4, 1e-4, 1e-3, 1e-3, 1e-3, 1e-3];

/// Steps 100x smaller than [`FD_STEPS`]. The bilinear interpolant has a
/// slope kink on every integer grid line, and a central difference whose
/// sample points straddle one measures a secant instead of the derivative.
/// With the default steps a few percent of pixels straddle, which swamps
/// components that are small sums of large cancelling terms. At these
/// steps straddling is rare and the loss is still far above round-off.
pub const FINE_FD_STEPS: [f64; 8] = [1e-6, 1e-6, 1e-6, 1e-6, 1e-5, 1e-5, 1e-5, 1e-5];
