//! Fisheye sample synthesis.
//!
//! Rendering is inverse warping: each fisheye pixel is converted back to a
//! normalized radius, the radial polynomial is inverted numerically to get
//! the ray angle, and the perspective source is sampled at the resulting
//! pinhole location.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_model::{check_monotonic, radial_poly, radial_poly_derivative, DistortionParams};
use crate::error::{Error, Result};
use crate::image_core::{
    load_image, load_labels, save_image, save_labels, BilinearTaps, FillMode, ImageBuffer, LabelMap,
    Mask, DEFAULT_IGNORE_LABEL,
};
use crate::rect_layer::{PinholeGeometry, WarpGrid};

pub const MANIFEST_VERSION: u32 = 1;

/// Rejection-sampling budget per parameter draw.
pub const MAX_DRAW_RETRIES: usize = 100;

const INVERT_MAX_ITERS: usize = 200;

/// Inverts `r(theta) = r_target` on `[0, theta_max]`.
///
/// Newton's method from `theta = r_target`, falling back to bisection
/// whenever a step leaves the current bracket. Requires `r` to be strictly
/// increasing on the interval.
pub fn invert_radial(r_target: f64, k: &[f64; 4], theta_max: f64) -> Result<f64> {
    if !r_target.is_finite() || !theta_max.is_finite() {
        return Err(Error::NonFinite("invert_radial input"));
    }
    let r_max = radial_poly(theta_max, k);
    if r_target < 0.0 || r_target > r_max {
        return Err(Error::OutOfField {
            radius: r_target,
            max: r_max,
        });
    }
    if r_target == 0.0 {
        return Ok(0.0);
    }

    let (mut lo, mut hi) = (0.0, theta_max);
    let mut theta = r_target.clamp(lo, hi);
    for _ in 0..INVERT_MAX_ITERS {
        let f = radial_poly(theta, k) - r_target;
        if f == 0.0 {
            return Ok(theta);
        }
        if f > 0.0 {
            hi = theta;
        } else {
            lo = theta;
        }
        let slope = radial_poly_derivative(theta, k);
        let newton = theta - f / slope;
        let next = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - theta).abs() <= 1e-16 * theta.max(1.0) || hi - lo <= f64::EPSILON * hi {
            theta = next;
            break;
        }
        theta = next;
    }
    if (radial_poly(theta, k) - r_target).abs() < 1e-10 {
        Ok(theta)
    } else {
        Err(Error::NoConvergence { radius: r_target })
    }
}

/// For every pixel of a fisheye raster, the location in the perspective
/// (ground-truth) raster it is rendered from, or `None` when it has no
/// preimage. Images and labels warped through the same map are aligned by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseMap {
    width: usize,
    height: usize,
    sources: Vec<Option<(f64, f64)>>,
}

impl InverseMap {
    /// Builds the map for a fisheye raster of the same size as `geometry`.
    ///
    /// Fails if `r(theta)` is not strictly increasing over the field of view
    /// of `geometry`.
    pub fn build(params: &DistortionParams, geometry: &PinholeGeometry) -> Result<Self> {
        params.validate()?;
        geometry.validate()?;
        let theta_field = geometry.theta_max();
        check_monotonic(&params.k, theta_field)?;
        let r_field = radial_poly(theta_field, &params.k);
        let (w, h) = (geometry.width, geometry.height);
        let (max_x, max_y) = (w as f64 - 1.0, h as f64 - 1.0);
        let p = *params;
        let g = *geometry;

        let sources = (0..h)
            .into_par_iter()
            .flat_map_iter(|yf| {
                (0..w).map(move |xf| -> Result<Option<(f64, f64)>> {
                    let xp = (xf as f64 - p.u0) / p.mu;
                    let yp = (yf as f64 - p.v0) / p.mv;
                    let r = xp.hypot(yp);
                    if r > r_field {
                        return Ok(None);
                    }
                    let (x, y) = if r == 0.0 {
                        (0.0, 0.0)
                    } else {
                        let theta = invert_radial(r, &p.k, theta_field)?;
                        let rho = theta.tan();
                        (rho * xp / r, rho * yp / r)
                    };
                    let (sx, sy) = g.to_pixel(x, y);
                    if (0.0..=max_x).contains(&sx) && (0.0..=max_y).contains(&sy) {
                        Ok(Some((sx, sy)))
                    } else {
                        Ok(None)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: w,
            height: h,
            sources,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn source(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.sources[y * self.width + x]
    }

    /// Rectified pixels whose four bilinear neighbours in the fisheye raster
    /// all have a preimage, i.e. carry rendered content rather than fill.
    pub fn covered_mask(&self, grid: &WarpGrid) -> Mask {
        grid.footprint_mask(&Mask::from_fn(self.width, self.height, |x, y| self.source(x, y).is_some()))
    }

    /// Renders the fisheye image; pixels without a preimage are black.
    pub fn warp_image(&self, src: &ImageBuffer) -> ImageBuffer {
        let ch = src.channels();
        let mut out = ImageBuffer::new(self.width, self.height, ch);
        let w = self.width;
        out.data_mut()
            .par_chunks_mut(w * ch)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..w {
                    if let Some((sx, sy)) = self.sources[y * w + x] {
                        let taps = BilinearTaps::new(src, sx, sy, FillMode::Clamp);
                        for c in 0..ch {
                            row[x * ch + c] = taps.value(src, c);
                        }
                    }
                }
            });
        out
    }

    /// Renders the fisheye label map; pixels without a preimage get the
    /// ignore label.
    pub fn warp_labels(&self, src: &LabelMap) -> Result<LabelMap> {
        let data = self
            .sources
            .iter()
            .map(|s| match s {
                Some((sx, sy)) => src.sample_nearest(*sx, *sy),
                None => Ok(src.ignore_label()),
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::from_vec(self.width, self.height, data, src.ignore_label())
    }
}

fn check_source_shape(w: usize, h: usize, geometry: &PinholeGeometry) -> Result<()> {
    if (w, h) != (geometry.width, geometry.height) {
        return Err(Error::shape(
            format!("{}x{}", geometry.width, geometry.height),
            format!("{w}x{h}"),
        ));
    }
    Ok(())
}

/// Renders the fisheye view of a perspective image whose pixels follow
/// `geometry`.
pub fn distort(src: &ImageBuffer, params: &DistortionParams, geometry: &PinholeGeometry) -> Result<ImageBuffer> {
    check_source_shape(src.width(), src.height(), geometry)?;
    Ok(InverseMap::build(params, geometry)?.warp_image(src))
}

pub fn distort_labels(src: &LabelMap, params: &DistortionParams, geometry: &PinholeGeometry) -> Result<LabelMap> {
    check_source_shape(src.width(), src.height(), geometry)?;
    InverseMap::build(params, geometry)?.warp_labels(src)
}

/// Closed sampling intervals for each parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub k1: (f64, f64),
    pub k2: (f64, f64),
    pub k3: (f64, f64),
    pub k4: (f64, f64),
    pub mu: (f64, f64),
    pub mv: (f64, f64),
    pub u0: (f64, f64),
    pub v0: (f64, f64),
    pub samples_per_source: usize,
}

impl ParamRanges {
    /// Default ranges for a `width x height` raster: `mu, mv` in
    /// `[0.25, 0.45] * width`, principal point within 5% of the centre.
    pub fn default_for(width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        Self {
            k1: (-0.4, 0.4),
            k2: (-0.2, 0.2),
            k3: (-0.1, 0.1),
            k4: (-0.05, 0.05),
            mu: (0.25 * w, 0.45 * w),
            mv: (0.25 * w, 0.45 * w),
            u0: (cx - 0.05 * w, cx + 0.05 * w),
            v0: (cy - 0.05 * h, cy + 0.05 * h),
            samples_per_source: 10,
        }
    }

    fn intervals(&self) -> [(f64, f64); 8] {
        [self.k1, self.k2, self.k3, self.k4, self.mu, self.mv, self.u0, self.v0]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in crate::camera_model::PARAM_NAMES.iter().zip(self.intervals()) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidParams(format!("bad range for {name}: [{lo}, {hi}]")));
            }
        }
        if self.mu.0 <= 0.0 || self.mv.0 <= 0.0 {
            return Err(Error::InvalidParams("mu and mv ranges must be positive".into()));
        }
        Ok(())
    }

    /// Uniform independent draw, resampled until `r(theta)` is strictly
    /// increasing on `[0, theta_max]`.
    pub fn sample(&self, rng: &mut impl Rng, theta_max: f64) -> Result<DistortionParams> {
        let mut last = Error::InvalidParams("no draw attempted".into());
        for _ in 0..MAX_DRAW_RETRIES {
            let mut a = [0.0; 8];
            for (v, (lo, hi)) in a.iter_mut().zip(self.intervals()) {
                *v = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            }
            let p = DistortionParams::from_array(a);
            match check_monotonic(&p.k, theta_max) {
                Ok(()) => return Ok(p),
                Err(e) => last = e,
            }
        }
        Err(Error::InvalidParams(format!(
            "no monotonic draw in {MAX_DRAW_RETRIES} attempts ({last})"
        )))
    }
}

/// One source image with its optional label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceItem {
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub source: PathBuf,
    /// Paths are relative to the manifest's directory.
    pub fisheye_image: PathBuf,
    pub gt_image: PathBuf,
    pub fisheye_labels: Option<PathBuf>,
    pub gt_labels: Option<PathBuf>,
    pub params: DistortionParams,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSource {
    pub source: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub geometry: PinholeGeometry,
    pub ranges: ParamRanges,
    pub records: Vec<ManifestRecord>,
    #[serde(default)]
    pub skipped: Vec<SkippedSource>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest is always serializable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Options for [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub width: usize,
    pub height: usize,
    /// Centre-crop sources to a square before resizing.
    pub square: bool,
    pub ignore_label: u32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            square: false,
            ignore_label: DEFAULT_IGNORE_LABEL,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG stream for one record, derived from the dataset seed
/// and the record's position.
pub fn record_seed(seed: u64, source_index: usize, sample_index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(source_index as u64)) ^ sample_index as u64)
}

struct PreparedSource {
    index: usize,
    item: SourceItem,
    image: ImageBuffer,
    labels: Option<LabelMap>,
}

fn prepare_source(index: usize, item: &SourceItem, opts: &SynthOptions) -> Result<PreparedSource> {
    let mut image = load_image(&item.image)?;
    if opts.square {
        image = image.center_square();
    }
    let image = image.resized(opts.width, opts.height);
    let labels = match &item.labels {
        Some(path) => {
            let mut l = load_labels(path, opts.ignore_label)?;
            if opts.square {
                l = l.center_square();
            }
            Some(l.resized(opts.width, opts.height))
        }
        None => None,
    };
    Ok(PreparedSource {
        index,
        item: item.clone(),
        image,
        labels,
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates `samples_per_source` fisheye samples per source into
/// `out_dir` and writes `out_dir/manifest.json`.
///
/// Layout: `gt/`, `gt_labels/`, `fisheye/`, `fisheye_labels/`. Unreadable
/// sources are skipped and listed in the manifest; any write failure
/// aborts before the manifest is written.
pub fn generate_dataset(
    sources: &[SourceItem],
    ranges: &ParamRanges,
    seed: u64,
    out_dir: &Path,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    ranges.validate()?;
    let geometry = PinholeGeometry::for_size(opts.width, opts.height);
    geometry.validate()?;
    let theta_max = geometry.theta_max();

    let mut prepared = Vec::new();
    let mut skipped = Vec::new();
    for (index, item) in sources.iter().enumerate() {
        match prepare_source(index, item, opts) {
            Ok(p) => prepared.push(p),
            Err(e) => {
                log::warn!("skipping source {}: {e}", item.image.display());
                skipped.push(SkippedSource {
                    source: item.image.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }

    for sub in ["gt", "gt_labels", "fisheye", "fisheye_labels"] {
        ensure_dir(&out_dir.join(sub))?;
    }

    let per_source: Vec<Vec<ManifestRecord>> = prepared
        .par_iter()
        .map(|src| -> Result<Vec<ManifestRecord>> {
            let src_id = format!("s{:05}", src.index);
            let gt_image = PathBuf::from("gt").join(format!("{src_id}.png"));
            save_image(&src.image, out_dir.join(&gt_image))?;
            let gt_labels = match &src.labels {
                Some(l) => {
                    let p = PathBuf::from("gt_labels").join(format!("{src_id}.pgm"));
                    save_labels(l, out_dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };

            (0..ranges.samples_per_source)
                .map(|j| {
                    let id = format!("{src_id}_{j:03}");
                    let rseed = record_seed(seed, src.index, j);
                    let mut rng = ChaCha8Rng::seed_from_u64(rseed);
                    let params = ranges.sample(&mut rng, theta_max)?;
                    let map = InverseMap::build(&params, &geometry)?;

                    let fisheye_image = PathBuf::from("fisheye").join(format!("{id}.png"));
                    save_image(&map.warp_image(&src.image), out_dir.join(&fisheye_image))?;
                    let fisheye_labels = match &src.labels {
                        Some(l) => {
                            let p = PathBuf::from("fisheye_labels").join(format!("{id}.pgm"));
                            save_labels(&map.warp_labels(l)?, out_dir.join(&p))?;
                            Some(p)
                        }
                        None => None,
                    };
                    Ok(ManifestRecord {
                        id,
                        source: src.item.image.clone(),
                        fisheye_image,
                        gt_image: gt_image.clone(),
                        fisheye_labels,
                        gt_labels: gt_labels.clone(),
                        params,
                        seed: rseed,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        geometry,
        ranges: ranges.clone(),
        records: per_source.into_iter().flatten().collect(),
        skipped,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> PinholeGeometry {
        PinholeGeometry::for_size(64, 64)
    }

    #[test]
    fn invert_radial_examples() {
        assert_eq!(invert_radial(0.0, &[0.1, 0.0, 0.0, 0.0], 1.2).unwrap(), 0.0);
        assert!((invert_radial(0.7, &[0.0; 4], 1.2).unwrap() - 0.7).abs() < 1e-15);
        let k = [0.2, -0.05, 0.01, 0.0];
        let r = radial_poly(0.9, &k);
        assert!((invert_radial(r, &k, 1.2).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn invert_radial_out_of_field() {
        let err = invert_radial(5.0, &[0.0; 4], 1.2).unwrap_err();
        assert!(matches!(err, Error::OutOfField { .. }));
        assert!(invert_radial(-0.1, &[0.0; 4], 1.2).is_err());
    }

    #[test]
    fn zero_distortion_preserves_centre() {
        let g = PinholeGeometry::for_size(65, 65);
        let src = ImageBuffer::from_fn(65, 65, 1, |x, y, _| ((x * 3 + y * 5) % 17) as f64 / 16.0);
        let p = DistortionParams::new([0.0; 4], 1.0 / g.scale, 1.0 / g.scale, 32.0, 32.0);
        let out = distort(&src, &p, &g).unwrap();
        assert_eq!(out.get(32, 32, 0), src.get(32, 32, 0));
    }

    #[test]
    fn white_source_gives_white_footprint() {
        let g = geometry();
        let src = ImageBuffer::filled(64, 64, 3, 1.0);
        let p = DistortionParams::new([0.1, 0.0, 0.0, 0.0], 16.0, 16.0, 31.5, 31.5);
        let map = InverseMap::build(&p, &g).unwrap();
        let out = map.warp_image(&src);
        let mut inside = 0;
        for y in 0..64 {
            for x in 0..64 {
                let expected = if map.source(x, y).is_some() { 1.0 } else { 0.0 };
                inside += map.source(x, y).is_some() as usize;
                for c in 0..3 {
                    assert!((out.get(x, y, c) - expected).abs() < 1e-12);
                }
            }
        }
        // mu = 16 keeps the whole footprint inside the raster: corners are black.
        assert!(inside > 0 && map.source(0, 0).is_none());
    }

    #[test]
    fn non_monotonic_params_rejected() {
        let p = DistortionParams::new([-0.6, 0.0, 0.0, 0.0], 20.0, 20.0, 31.5, 31.5);
        let src = ImageBuffer::new(64, 64, 1);
        assert!(matches!(distort(&src, &p, &geometry()), Err(Error::NonMonotonic { .. })));
    }

    #[test]
    fn labels_and_image_share_footprint() {
        let g = geometry();
        let p = DistortionParams::new([0.05, 0.01, 0.0, 0.0], 22.0, 20.0, 30.0, 33.0);
        let src = ImageBuffer::filled(64, 64, 1, 1.0);
        let lbl = LabelMap::filled(64, 64, 3, 255);
        let img = distort(&src, &p, &g).unwrap();
        let out = distort_labels(&lbl, &p, &g).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(img.get(x, y, 0) == 0.0, out.get(x, y) == 255);
            }
        }
    }

    #[test]
    fn sampling_respects_ranges_and_is_reproducible() {
        let r = ParamRanges::default_for(256, 256);
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let tm = PinholeGeometry::for_size(256, 256).theta_max();
        for _ in 0..50 {
            let p = r.sample(&mut a, tm).unwrap();
            assert_eq!(p, r.sample(&mut b, tm).unwrap());
            check_monotonic(&p.k, tm).unwrap();
            for (v, (lo, hi)) in p.to_array().iter().zip(r.intervals()) {
                assert!(*v >= lo && *v <= hi);
            }
        }
    }

    #[test]
    fn impossible_ranges_exhaust_retries() {
        let mut r = ParamRanges::default_for(64, 64);
        r.k1 = (-0.9, -0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(r.sample(&mut rng, 1.2).is_err());
        r.k1 = (0.5, 0.1);
        assert!(r.validate().is_err());
    }

    #[test]
    fn record_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..20 {
            for j in 0..10 {
                assert!(seen.insert(record_seed(7, s, j)));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn inversion_round_trip(seed in any::<u64>(), frac in 0.0f64..1.0) {
                let ranges = ParamRanges::default_for(256, 256);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let theta_max = 1.2;
                let p = ranges.sample(&mut rng, theta_max).unwrap();
                let theta = frac * theta_max;
                let back = invert_radial(radial_poly(theta, &p.k), &p.k, theta_max).unwrap();
                prop_assert!((back - theta).abs() < 1e-9);
            }
        }
    }
}
