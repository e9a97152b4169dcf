use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use fisheye_core::camera_model::PARAM_NAMES;
use fisheye_core::estimator::{check_gradients, coarse_to_fine, relative_error, FillModeSetting, Schedule};
use fisheye_core::image_core::{load_image, load_labels, save_image, save_labels, FillMode, DEFAULT_IGNORE_LABEL};
use fisheye_core::metrics::evaluate_manifest;
use fisheye_core::patterns::smooth_pattern;
use fisheye_core::rect_layer::{build_grid, rectify_labels, FD_STEPS, FINE_FD_STEPS};
use fisheye_core::synthesizer::{
    distort as distort_image, distort_labels, generate_dataset, DatasetManifest, ParamRanges, SourceItem, SynthOptions,
    MANIFEST_FILE,
};
use fisheye_core::{DistortionParams, PinholeGeometry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

fn is_false(b: &bool) -> bool {
    !b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Zero,
    Clamp,
}

impl From<Fill> for FillMode {
    fn from(f: Fill) -> Self {
        match f {
            Fill::Zero => FillMode::Zero,
            Fill::Clamp => FillMode::Clamp,
        }
    }
}

impl From<Fill> for FillModeSetting {
    fn from(f: Fill) -> Self {
        match f {
            Fill::Zero => FillModeSetting::Zero,
            Fill::Clamp => FillModeSetting::Clamp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Steps {
    /// 1e-6 on k, 1e-5 on pixel-unit parameters
    Fine,
    /// 1e-4 on k, 1e-3 on pixel-unit parameters
    Standard,
}

/// Shared seed flags: `--seed N` (default 0) or `--entropy`.
#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOpts {
    /// Seed for all randomness [default: 0]
    #[arg(long, conflicts_with = "entropy")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Draw a random seed instead (it is printed so the run can be repeated)
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub entropy: bool,
}

impl SeedOpts {
    fn resolve(&self) -> u64 {
        if self.entropy {
            let s = rand::random();
            println!("seed {s}");
            s
        } else {
            self.seed.unwrap_or(0)
        }
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .with_context(|| format!("missing required option --{flag} (flag or config file)"))
}

/// Reads parameters from an 8-element JSON array, or from any object with
/// a `params` field holding one (such as a manifest record).
pub fn read_params(path: &Path) -> Result<DistortionParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading params {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing params {}", path.display()))?;
    let value = match value {
        serde_json::Value::Object(mut m) if m.contains_key("params") => m.remove("params").expect("checked"),
        v => v,
    };
    let params: DistortionParams = serde_json::from_value(value).with_context(|| {
        format!(
            "params {}: expected an 8-element array [{}]",
            path.display(),
            PARAM_NAMES.join(", ")
        )
    })?;
    params
        .validate()
        .with_context(|| format!("params {}", path.display()))?;
    Ok(params)
}

pub fn write_params(params: &DistortionParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string(params)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- synthesize

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeOpts {
    /// Directory of source images (png/pgm/ppm/pnm)
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sources: Option<PathBuf>,

    /// Directory of label maps named after the source images (optional)
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedOpts,

    /// Samples per source image [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_source: Option<usize>,

    /// Output width [default: 256]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,

    /// Output height [default: 256]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,

    /// Centre-crop sources to a square before resizing
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub square: bool,

    /// JSON file with parameter ranges (all eight intervals and samples_per_source)
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges: Option<PathBuf>,

    /// Label id used outside the field of view [default: 255]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u32>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading source directory {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn find_labels(dir: &Path, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?;
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(stem).with_extension(ext))
        .find(|p| p.is_file())
}

pub fn synthesize(o: &SynthesizeOpts) -> Result<bool> {
    let sources_dir = required(&o.sources, "sources")?;
    let out = required(&o.out, "out")?;
    ensure!(sources_dir.is_dir(), "source directory {} does not exist", sources_dir.display());
    if let Some(l) = &o.labels {
        ensure!(l.is_dir(), "label directory {} does not exist", l.display());
    }
    let images = list_images(sources_dir)?;
    ensure!(!images.is_empty(), "no images found in {}", sources_dir.display());

    let opts = SynthOptions {
        width: o.width.unwrap_or(256),
        height: o.height.unwrap_or(256),
        square: o.square,
        ignore_label: o.ignore_label.unwrap_or(DEFAULT_IGNORE_LABEL),
    };
    let mut ranges = match &o.ranges {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading ranges {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing ranges {}", p.display()))?
        }
        None => ParamRanges::default_for(opts.width, opts.height),
    };
    if let Some(n) = o.per_source {
        ranges.samples_per_source = n;
    }

    let sources: Vec<SourceItem> = images
        .into_iter()
        .map(|image| {
            let labels = o.labels.as_deref().and_then(|d| {
                let found = find_labels(d, &image);
                if found.is_none() {
                    log::warn!("no label map for {}", image.display());
                }
                found
            });
            SourceItem { image, labels }
        })
        .collect();

    let seed = o.seed.resolve();
    let manifest = generate_dataset(&sources, &ranges, seed, out, &opts)?;
    println!(
        "{} samples from {} sources ({} skipped) -> {}",
        manifest.records.len(),
        sources.len() - manifest.skipped.len(),
        manifest.skipped.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(true)
}

// ------------------------------------------------------- rectify / distort

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifyOpts {
    /// Fisheye image
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,

    /// Parameters: JSON array [k1,k2,k3,k4,mu,mv,u0,v0] or a manifest record
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,

    /// Rectified image to write
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,

    /// Fisheye label map to rectify as well
    #[arg(long, value_name = "FILE", requires = "labels_out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,

    /// Where to write the rectified label map
    #[arg(long, value_name = "FILE", requires = "labels")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_out: Option<PathBuf>,

    /// Value of samples outside the fisheye image [default: zero]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<Fill>,

    /// Output width [default: input width]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,

    /// Output height [default: input height]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,

    /// Label id used outside the field of view [default: 255]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u32>,
}

pub fn rectify(o: &RectifyOpts) -> Result<bool> {
    let input = required(&o.input, "input")?;
    let output = required(&o.output, "output")?;
    let params = read_params(required(&o.params, "params")?)?;
    let fisheye = load_image(input)?;
    let geometry = PinholeGeometry::for_size(
        o.width.unwrap_or(fisheye.width()),
        o.height.unwrap_or(fisheye.height()),
    );
    let grid = build_grid(&params, &geometry)?;
    let rect = fisheye_core::rect_layer::rectify(&fisheye, &grid, o.fill.unwrap_or(Fill::Zero).into())?;
    create_parent(output)?;
    save_image(&rect, output)?;
    if let (Some(lin), Some(lout)) = (&o.labels, &o.labels_out) {
        let labels = load_labels(lin, o.ignore_label.unwrap_or(DEFAULT_IGNORE_LABEL))?;
        create_parent(lout)?;
        save_labels(&rectify_labels(&labels, &grid)?, lout)?;
    }
    println!("rectified {} -> {}", input.display(), output.display());
    Ok(true)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortOpts {
    /// Perspective image
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,

    /// Parameters: JSON array [k1,k2,k3,k4,mu,mv,u0,v0] or a manifest record
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,

    /// Fisheye image to write (same size as the input)
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,

    /// Label map to distort as well
    #[arg(long, value_name = "FILE", requires = "labels_out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,

    /// Where to write the distorted label map
    #[arg(long, value_name = "FILE", requires = "labels")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_out: Option<PathBuf>,

    /// Label id used outside the field of view [default: 255]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u32>,
}

pub fn distort(o: &DistortOpts) -> Result<bool> {
    let input = required(&o.input, "input")?;
    let output = required(&o.output, "output")?;
    let params = read_params(required(&o.params, "params")?)?;
    let src = load_image(input)?;
    let geometry = PinholeGeometry::for_size(src.width(), src.height());
    let fisheye = distort_image(&src, &params, &geometry)?;
    create_parent(output)?;
    save_image(&fisheye, output)?;
    if let (Some(lin), Some(lout)) = (&o.labels, &o.labels_out) {
        let labels = load_labels(lin, o.ignore_label.unwrap_or(DEFAULT_IGNORE_LABEL))?;
        create_parent(lout)?;
        save_labels(&distort_labels(&labels, &params, &geometry)?, lout)?;
    }
    println!("distorted {} -> {}", input.display(), output.display());
    Ok(true)
}

// ------------------------------------------------------------------ estimate

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateOpts {
    /// Fisheye image
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fisheye: Option<PathBuf>,

    /// Ground-truth perspective image of the same size
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,

    /// Directory for params.json, rectified.png and trace.csv
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,

    /// Initial parameters [default: k = 0, mu = mv = 0.35 * width, centred]
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,

    /// Pyramid levels [default: 3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,

    /// Iterations per level [default: 500]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,

    /// ADAGRAD learning rate at the finest level, in whitened units (about
    /// one pixel of sample displacement); doubled per coarser level [default: 0.25]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,

    /// ADAGRAD epsilon [default: 1e-8]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,

    /// Border excluded from the loss at the finest level, in pixels [default: 8]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub border: Option<usize>,

    /// Sampling outside the fisheye image during estimation [default: clamp]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<Fill>,

    /// Re-whiten and restart ADAGRAD every N iterations, 0 for never [default: 100]
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restart_every: Option<usize>,

    /// Learning-rate factor applied at each restart [default: 0.5]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restart_decay: Option<f64>,

    /// Distortion coefficients free on the coarsest level [default: 1]
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u8).range(0..=4))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_k_terms: Option<u8>,

    /// Start the coarsest level only from --init instead of a small grid around it
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub single_start: bool,

    /// Keep black fisheye pixels in the loss instead of treating them as outside the lens
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub keep_black: bool,
}

impl EstimateOpts {
    fn schedule(&self) -> Schedule {
        let mut s = Schedule::default();
        if let Some(v) = self.levels {
            s.levels = v;
        }
        if let Some(v) = self.iters {
            s.iterations = v;
        }
        if let Some(v) = self.lr {
            s.learning_rate = v;
        }
        if let Some(v) = self.epsilon {
            s.epsilon = v;
        }
        if let Some(v) = self.border {
            s.border = v;
        }
        if let Some(v) = self.fill {
            s.fill = v.into();
        }
        if let Some(v) = self.restart_every {
            s.restart_every = v;
        }
        if let Some(v) = self.restart_decay {
            s.restart_decay = v;
        }
        if let Some(v) = self.coarse_k_terms {
            s.coarse_k_terms = v.into();
        }
        s.multi_start &= !self.single_start;
        s.mask_black &= !self.keep_black;
        s
    }
}

pub fn estimate(o: &EstimateOpts) -> Result<bool> {
    let fisheye = load_image(required(&o.fisheye, "fisheye")?)?;
    let gt = load_image(required(&o.gt, "gt")?)?;
    let out_dir = required(&o.out_dir, "out-dir")?;
    ensure!(
        fisheye.same_shape(&gt),
        "fisheye image is {} but ground truth is {}",
        fisheye.shape_string(),
        gt.shape_string()
    );
    let schedule = o.schedule();
    ensure!(schedule.epsilon > 0.0, "--epsilon must be positive");
    ensure!(schedule.levels >= 1, "--levels must be at least 1");
    ensure!(schedule.restart_decay > 0.0, "--restart-decay must be positive");
    let geometry = PinholeGeometry::for_size(gt.width(), gt.height());
    let init = match &o.init {
        Some(p) => read_params(p)?,
        None => DistortionParams::equidistance_default(gt.width(), gt.height()),
    };

    let (params, report) = coarse_to_fine(&fisheye, &gt, &init, &geometry, &schedule)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_params(&params, &out_dir.join("params.json"))?;
    report.write_trace_csv(out_dir.join("trace.csv"))?;
    let grid = build_grid(&params, &geometry)?;
    let rect = fisheye_core::rect_layer::rectify(&fisheye, &grid, FillMode::Zero)?;
    save_image(&rect, out_dir.join("rectified.png"))?;

    println!("params {params}");
    println!("loss {:.6e} after {} evaluations", report.loss, report.trace.len());
    if !report.monotonic {
        log::warn!("estimated r(theta) is not monotonic over the field of view");
    }
    Ok(true)
}

// ----------------------------------------------------------------- gradcheck

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOpts {
    /// Test image [default: a random smooth pattern]
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,

    /// Side of the generated test image [default: 64]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,

    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedOpts,

    /// Largest acceptable relative error [default: 1e-3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,

    /// Finite-difference step set [default: fine]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Steps>,

    /// Debug: corrupt the analytic gradient of one parameter (k1..v0) to test the checker
    #[arg(long = "break", value_name = "PARAM")]
    #[serde(rename = "break", skip_serializing_if = "Option::is_none")]
    pub break_param: Option<String>,
}

pub fn gradcheck(o: &GradcheckOpts) -> Result<bool> {
    let threshold = o.threshold.unwrap_or(1e-3);
    let broken = match &o.break_param {
        Some(name) => match PARAM_NAMES.iter().position(|n| n == name) {
            Some(i) => Some(i),
            None => bail!("--break expects one of {}, got {name:?}", PARAM_NAMES.join(", ")),
        },
        None => None,
    };
    let seed = o.seed.resolve();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = match &o.image {
        Some(p) => load_image(p)?,
        None => {
            let n = o.size.unwrap_or(64);
            ensure!(n >= 4, "--size must be at least 4");
            smooth_pattern(n, n, 1, &mut rng)
        }
    };
    let target = smooth_pattern(image.width(), image.height(), image.channels(), &mut rng);
    let geometry = PinholeGeometry::for_size(image.width(), image.height());
    let params = ParamRanges::default_for(image.width(), image.height()).sample(&mut rng, geometry.theta_max())?;
    let steps = match o.steps.unwrap_or(Steps::Fine) {
        Steps::Fine => &FINE_FD_STEPS,
        Steps::Standard => &FD_STEPS,
    };

    let mut checks = check_gradients(&image, &target, &params, &geometry, 0, FillMode::Clamp, steps)?;
    if let Some(i) = broken {
        let c = &mut checks[i];
        c.analytic += 0.1 * c.analytic.abs().max(1e-3);
        c.rel_error = relative_error(c.analytic, c.numeric, 0.0);
    }

    println!("params {params}");
    println!("{:<4} {:>16} {:>16} {:>10}", "", "analytic", "numeric", "rel.err");
    let mut ok = true;
    for c in &checks {
        let pass = c.rel_error < threshold;
        ok &= pass;
        println!(
            "{:<4} {:>16.8e} {:>16.8e} {:>10.2e} {}",
            c.name,
            c.analytic,
            c.numeric,
            c.rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

// ------------------------------------------------------------------ evaluate

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateOpts {
    /// Dataset manifest
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,

    /// Directory holding <record id>.png rectifications
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rectified: Option<PathBuf>,

    /// Per-sample CSV [default: <rectified>/metrics.csv]
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,

    /// Summary JSON [default: <rectified>/metrics.json]
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,

    /// Pixels cropped from every side before scoring [default: 0, full frame]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interior_margin: Option<usize>,
}

pub fn evaluate(o: &EvaluateOpts) -> Result<bool> {
    let manifest_path = required(&o.manifest, "manifest")?;
    let rectified = required(&o.rectified, "rectified")?;
    ensure!(rectified.is_dir(), "rectified directory {} does not exist", rectified.display());
    let manifest = DatasetManifest::load(manifest_path)?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let report = evaluate_manifest(&manifest, manifest_dir, rectified, o.interior_margin.unwrap_or(0))?;
    ensure!(
        !report.samples.is_empty(),
        "none of the {} records has a rectified image in {}",
        manifest.records.len(),
        rectified.display()
    );
    let summary = report.summary();

    let csv = o.csv.clone().unwrap_or_else(|| rectified.join("metrics.csv"));
    let json = o.json.clone().unwrap_or_else(|| rectified.join("metrics.json"));
    create_parent(&csv)?;
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    create_parent(&json)?;
    fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;

    println!(
        "mean PSNR {:.4} dB, mean SSIM {:.4} over {} samples ({} missing)",
        summary.mean_psnr,
        summary.mean_ssim,
        summary.count,
        report.missing.len()
    );
    Ok(true)
}
