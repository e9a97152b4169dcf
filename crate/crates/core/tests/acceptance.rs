//! Acceptance experiments. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use fisheye_core::camera_model::{check_monotonic, fit_projection, radial_poly, ProjectionKind};
use fisheye_core::estimator::{check_gradients, coarse_to_fine, Schedule};
use fisheye_core::image_core::{save_image, FillMode, ImageBuffer, Mask};
use fisheye_core::metrics::{psnr, psnr_masked, ssim};
use fisheye_core::patterns::{block_labels, hard_edge_pattern, scene_pattern, smooth_pattern};
use fisheye_core::rect_layer::{backward, build_grid, rectify, PinholeGeometry, FD_STEPS, FINE_FD_STEPS};
use fisheye_core::synthesizer::{
    generate_dataset, invert_radial, InverseMap, ParamRanges, SourceItem, SynthOptions,
};
use fisheye_core::DistortionParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL_SMOOTH: f64 = 1e-3;
const GRAD_TOL_HARD_EDGE: f64 = 1e-2;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const ADJOINT_TOL: f64 = 1e-9;
const ROUND_TRIP_MIN_PSNR: f64 = 30.0;
/// Regression floor pinned from the first measured mean (65.31 dB).
const ROUND_TRIP_REGRESSION_PSNR: f64 = 65.0;
const INVERSION_TOL: f64 = 1e-9;
const RECOVERY_GAP_DB: f64 = 2.0;
const RECOVERY_MIN_PASSING: usize = 8;
const RECOVERY_TIME_LIMIT: Duration = Duration::from_secs(600);
const FIT_RESIDUAL_TOL: f64 = 1e-3;
const FIT_ZERO_TOL: f64 = 1e-10;
const MARGIN: usize = 8;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Pair {
    gt: ImageBuffer,
    fisheye: ImageBuffer,
    params: DistortionParams,
    map: InverseMap,
}

fn synth_pair(seed: u64, size: usize, geometry: &PinholeGeometry) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = scene_pattern(size, size, &mut rng);
    let params = ParamRanges::default_for(size, size)
        .sample(&mut rng, geometry.theta_max())
        .expect("default ranges admit monotonic draws");
    let map = InverseMap::build(&params, geometry).expect("sampled params are valid");
    let fisheye = map.warp_image(&gt);
    Pair {
        gt,
        fisheye,
        params,
        map,
    }
}

/// Interior PSNR of rectifying `pair` with `params`: 8-px margin, and only
/// pixels whose bilinear footprint lies on rendered fisheye content.
fn interior_psnr(pair: &Pair, params: &DistortionParams, geometry: &PinholeGeometry, fill: FillMode) -> f64 {
    let grid = build_grid(params, geometry).unwrap();
    let rect = rectify(&pair.fisheye, &grid, fill).unwrap();
    let mask = pair
        .map
        .covered_mask(&grid)
        .and(&Mask::interior(geometry.width, geometry.height, MARGIN));
    psnr_masked(&rect, &pair.gt, &mask).unwrap()
}

fn crop(img: &ImageBuffer, m: usize) -> ImageBuffer {
    ImageBuffer::from_fn(img.width() - 2 * m, img.height() - 2 * m, img.channels(), |x, y, c| {
        img.get(x + m, y + m, c)
    })
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let size = 64;
    let geometry = PinholeGeometry::for_size(size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let images: Vec<ImageBuffer> = (0..10).map(|_| smooth_pattern(size, size, 1, &mut rng)).collect();
    let targets: Vec<ImageBuffer> = (0..10).map(|_| smooth_pattern(size, size, 1, &mut rng)).collect();
    let ranges = ParamRanges::default_for(size, size);
    let draws: Vec<DistortionParams> = (0..10)
        .map(|_| ranges.sample(&mut rng, geometry.theta_max()).unwrap())
        .collect();

    // Pass/fail uses steps below the interpolant's kink scale; the worst
    // error at the default steps is reported alongside for reference.
    let worst = |img: &ImageBuffer, target: &ImageBuffer, p: &DistortionParams, steps: &[f64; 8]| {
        check_gradients(img, target, p, &geometry, 0, FillMode::Clamp, steps)
            .unwrap()
            .iter()
            .fold(0.0f64, |m, c| m.max(c.rel_error))
    };
    let mut worst_smooth: f64 = 0.0;
    let mut worst_smooth_coarse: f64 = 0.0;
    for (img, target) in images.iter().zip(&targets) {
        for p in &draws {
            worst_smooth = worst_smooth.max(worst(img, target, p, &FINE_FD_STEPS));
            worst_smooth_coarse = worst_smooth_coarse.max(worst(img, target, p, &FD_STEPS));
        }
    }

    let mut worst_edge: f64 = 0.0;
    for p in &draws {
        let img = hard_edge_pattern(size, size, &mut rng);
        let target = smooth_pattern(size, size, 1, &mut rng);
        worst_edge = worst_edge.max(worst(&img, &target, p, &FINE_FD_STEPS));
    }
    let elapsed = start.elapsed();
    outcome(
        worst_smooth < GRAD_TOL_SMOOTH && worst_edge < GRAD_TOL_HARD_EDGE && elapsed < GRAD_TIME_LIMIT,
        format!(
            "worst rel. error smooth {worst_smooth:.2e} (< {GRAD_TOL_SMOOTH:.0e}), hard edge {worst_edge:.2e} (< {GRAD_TOL_HARD_EDGE:.0e}); \
             smooth at 1e-4/1e-3 steps {worst_smooth_coarse:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_adjointness() -> Outcome {
    let size = 32;
    let geometry = PinholeGeometry::for_size(size, size);
    let ranges = ParamRanges::default_for(size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6164_6a6f);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let p = ranges.sample(&mut rng, geometry.theta_max()).unwrap();
        let fill = if trial % 2 == 0 { FillMode::Zero } else { FillMode::Clamp };
        let grid = build_grid(&p, &geometry).unwrap();
        let u = ImageBuffer::from_fn(size, size, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let v = ImageBuffer::from_fn(size, size, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let jv = rectify(&v, &grid, fill).unwrap();
        let jt_u = backward(&v, &grid, &u, fill, true).unwrap().d_input.unwrap();
        let lhs: f64 = u.data().iter().zip(jv.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = jt_u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    outcome(worst <= ADJOINT_TOL, format!("max |<U,JV> - <J'U,V>| = {worst:.2e} over 100 trials"))
}

fn criterion_round_trip() -> (Outcome, f64) {
    let size = 256;
    let geometry = PinholeGeometry::for_size(size, size);
    let values: Vec<f64> = (0..20)
        .map(|i| {
            let pair = synth_pair(1000 + i, size, &geometry);
            interior_psnr(&pair, &pair.params, &geometry, FillMode::Zero)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    (
        outcome(
            mean >= ROUND_TRIP_MIN_PSNR.max(ROUND_TRIP_REGRESSION_PSNR),
            format!(
                "mean interior PSNR {mean:.2} dB (min {min:.2}) over 20 samples, floor {ROUND_TRIP_MIN_PSNR}, regression floor {ROUND_TRIP_REGRESSION_PSNR}"
            ),
        ),
        mean,
    )
}

fn criterion_inversion() -> Outcome {
    let geometry = PinholeGeometry::for_size(256, 256);
    let theta_max = geometry.theta_max();
    let ranges = ParamRanges::default_for(256, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(0x696e_7672);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = ranges.sample(&mut rng, theta_max).unwrap();
        let theta = rng.random_range(0.0..=theta_max);
        let back = invert_radial(radial_poly(theta, &p.k), &p.k, theta_max).unwrap();
        worst = worst.max((back - theta).abs());
    }
    outcome(worst < INVERSION_TOL, format!("max |theta - inv(r(theta))| = {worst:.2e} over 1000 draws"))
}

struct RecoveryRow {
    ceiling: f64,
    recovered: f64,
    psnr_rect: f64,
    ssim_rect: f64,
    psnr_fisheye: f64,
    ssim_fisheye: f64,
}

fn recovery_experiment() -> (Vec<RecoveryRow>, Duration) {
    let size = 256;
    let geometry = PinholeGeometry::for_size(size, size);
    let schedule = Schedule::default();
    let init = DistortionParams::equidistance_default(size, size);
    let start = Instant::now();
    let rows = (0..10)
        .map(|i| {
            let pair = synth_pair(2000 + i, size, &geometry);
            let (est, _) = coarse_to_fine(&pair.fisheye, &pair.gt, &init, &geometry, &schedule).unwrap();
            let ceiling = interior_psnr(&pair, &pair.params, &geometry, FillMode::Zero);
            let recovered = interior_psnr(&pair, &est, &geometry, FillMode::Zero);

            let rect = rectify(&pair.fisheye, &build_grid(&est, &geometry).unwrap(), FillMode::Clamp).unwrap();
            let (gt_c, rect_c, fish_c) = (crop(&pair.gt, MARGIN), crop(&rect, MARGIN), crop(&pair.fisheye, MARGIN));
            if std::env::var_os("FISHEYE_ACCEPTANCE_VERBOSE").is_some() {
                eprintln!("  pair {i}: truth {} | est {} | ceiling {ceiling:.2} recovered {recovered:.2}", pair.params, est);
            }
            RecoveryRow {
                ceiling,
                recovered,
                psnr_rect: psnr(&rect_c, &gt_c).unwrap(),
                ssim_rect: ssim(&rect_c, &gt_c).unwrap(),
                psnr_fisheye: psnr(&fish_c, &gt_c).unwrap(),
                ssim_fisheye: ssim(&fish_c, &gt_c).unwrap(),
            }
        })
        .collect();
    (rows, start.elapsed())
}

fn criterion_recovery(rows: &[RecoveryRow], elapsed: Duration) -> Outcome {
    let passing = rows
        .iter()
        .filter(|r| r.recovered >= r.ceiling - RECOVERY_GAP_DB)
        .count();
    let gaps: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.ceiling - r.recovered)).collect();
    outcome(
        passing >= RECOVERY_MIN_PASSING && elapsed < RECOVERY_TIME_LIMIT,
        format!(
            "{passing}/10 pairs within {RECOVERY_GAP_DB} dB of ceiling (gaps [{}] dB), {:.1}s",
            gaps.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_baseline(rows: &[RecoveryRow]) -> Outcome {
    let n = rows.len() as f64;
    let mean = |f: fn(&RecoveryRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (pr, sr) = (mean(|r| r.psnr_rect), mean(|r| r.ssim_rect));
    let (pf, sf) = (mean(|r| r.psnr_fisheye), mean(|r| r.ssim_fisheye));
    outcome(
        pr > pf && sr > sf,
        format!("recovered {pr:.2} dB / SSIM {sr:.4} vs unrectified {pf:.2} dB / SSIM {sf:.4}"),
    )
}

fn criterion_projection_fit() -> Outcome {
    let equi = fit_projection(ProjectionKind::Equidistance, 1.0, 1.2).unwrap();
    let mut ok = equi.k.iter().all(|k| k.abs() <= FIT_ZERO_TOL);
    let mut parts = vec![format!("equidistance max|k| {:.1e}", equi.k.iter().fold(0.0f64, |a, k| a.max(k.abs())))];
    for kind in [ProjectionKind::Stereographic, ProjectionKind::Equisolid, ProjectionKind::Orthogonal] {
        let fit = fit_projection(kind, 1.0, 1.2).unwrap();
        ok &= fit.max_residual < FIT_RESIDUAL_TOL && check_monotonic(&fit.k, 1.2).is_ok();
        parts.push(format!("{kind:?} {:.1e}", fit.max_residual));
    }
    outcome(ok, parts.join(", "))
}

fn criterion_metric_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d65_7472);
    let a = scene_pattern(48, 48, &mut rng);
    let ssim_self = ssim(&a, &a).unwrap();

    let noise = ImageBuffer::from_fn(48, 48, 3, |_, _, _| rng.random_range(-0.02..0.02));
    let shifted = |s: f64| {
        let data = a.data().iter().zip(noise.data()).map(|(x, n)| x + s * n).collect();
        ImageBuffer::from_vec(48, 48, 3, data).unwrap()
    };
    let base = psnr(&a, &shifted(1.0)).unwrap();
    let shift_err = [0.25, 0.5, 2.0, 4.0]
        .iter()
        .map(|&s| (psnr(&a, &shifted(s)).unwrap() - (base - 20.0 * f64::log10(s))).abs())
        .fold(0.0, f64::max);

    let identical = dataset_determinism();
    outcome(
        ssim_self == 1.0 && shift_err < 1e-9 && identical,
        format!("SSIM(a,a) = {ssim_self}, PSNR shift error {shift_err:.1e}, byte-identical datasets: {identical}"),
    )
}

fn dataset_determinism() -> bool {
    let src_dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sources = Vec::new();
    for i in 0..2 {
        let img = scene_pattern(80, 64, &mut rng);
        let path = src_dir.path().join(format!("src{i}.png"));
        save_image(&img, &path).unwrap();
        let labels = block_labels(80, 64, 4, &mut rng);
        let lpath = src_dir.path().join(format!("src{i}.pgm"));
        fisheye_core::image_core::save_labels(&labels, &lpath).unwrap();
        sources.push(SourceItem {
            image: path,
            labels: Some(lpath),
        });
    }
    let opts = SynthOptions {
        width: 64,
        height: 64,
        ..SynthOptions::default()
    };
    let mut ranges = ParamRanges::default_for(64, 64);
    ranges.samples_per_source = 3;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&sources, &ranges, 9, a.path(), &opts).unwrap();
    generate_dataset(&sources, &ranges, 9, b.path(), &opts).unwrap();
    let files: Vec<_> = walk(a.path());
    files.len() > 1
        && files.iter().all(|rel| {
            std::fs::read(a.path().join(rel)).ok() == std::fs::read(b.path().join(rel)).ok()
        })
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn main() {
    // libtest-style filtering is not supported; `--list` prints nothing so
    // tooling that enumerates tests keeps working.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let o = f();
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    run("1 gradient suite", &criterion_gradients);
    run("2 adjointness", &criterion_adjointness);
    run("3 round-trip fidelity", &|| criterion_round_trip().0);
    run("4 radial inversion", &criterion_inversion);
    let (rows, elapsed) = recovery_experiment();
    run("5 parameter recovery", &|| criterion_recovery(&rows, elapsed));
    run("6 do-nothing baseline ordering", &|| criterion_baseline(&rows));
    run("7 projection fitting", &criterion_projection_fit);
    run("8 metric sanity and determinism", &criterion_metric_sanity);

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
