//! General fisheye camera model.
//!
//! A ray at angle `theta` from the optical axis lands at normalized radius
//! `r(theta) = theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9`,
//! which is then scaled by `mu`, `mv` (pixels per unit distance) and offset by
//! the principal point `(u0, v0)` of the fisheye image.
//!
//! Pinhole coordinates are normalized: the virtual pinhole camera has unit
//! focal length and is centred on its principal point, so
//! `theta = atan(sqrt(x^2 + y^2))`. Any other focal length is absorbed by
//! `mu` and `mv`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names of the eight parameters in vector order.
pub const PARAM_NAMES: [&str; 8] = ["k1", "k2", "k3", "k4", "mu", "mv", "u0", "v0"];

/// Number of angles sampled by [`fit_projection`].
pub const FIT_SAMPLES: usize = 200;

/// Number of angles sampled by [`check_monotonic`].
const MONOTONIC_SAMPLES: usize = 2048;

/// The distortion parameter vector `[k1, k2, k3, k4, mu, mv, u0, v0]`.
///
/// Serialized as a flat 8-element JSON array in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 8]", into = "[f64; 8]")]
pub struct DistortionParams {
    /// Radial polynomial coefficients for `theta^3, theta^5, theta^7, theta^9`.
    pub k: [f64; 4],
    /// Horizontal pixels per unit distance.
    pub mu: f64,
    /// Vertical pixels per unit distance.
    pub mv: f64,
    /// Principal point, x (pixels).
    pub u0: f64,
    /// Principal point, y (pixels).
    pub v0: f64,
}

impl DistortionParams {
    pub fn new(k: [f64; 4], mu: f64, mv: f64, u0: f64, v0: f64) -> Self {
        Self { k, mu, mv, u0, v0 }
    }

    /// Zero distortion, `mu = mv = 0.35 * width`, principal point at the
    /// image centre.
    pub fn equidistance_default(width: usize, height: usize) -> Self {
        let m = 0.35 * width as f64;
        Self {
            k: [0.0; 4],
            mu: m,
            mv: m,
            u0: (width as f64 - 1.0) / 2.0,
            v0: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.k[0], self.k[1], self.k[2], self.k[3], self.mu, self.mv, self.u0, self.v0,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            k: [a[0], a[1], a[2], a[3]],
            mu: a[4],
            mv: a[5],
            u0: a[6],
            v0: a[7],
        }
    }

    /// Parses a slice, rejecting anything that is not exactly 8 values.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; 8] = values.try_into().map_err(|_| {
            Error::InvalidParams(format!(
                "expected 8 values [k1,k2,k3,k4,mu,mv,u0,v0], got {}",
                values.len()
            ))
        })?;
        Ok(Self::from_array(arr))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks finiteness and positive pixel scales.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite("distortion parameters"));
        }
        if self.mu <= 0.0 || self.mv <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "mu and mv must be positive (mu = {}, mv = {})",
                self.mu, self.mv
            )));
        }
        Ok(())
    }

    /// Re-expresses the parameters for an image resampled by `factor`
    /// (`factor = 2` when moving one pyramid level finer).
    ///
    /// Pixel centres sit at integer coordinates, so a point at `p` maps to
    /// `factor * (p + 0.5) - 0.5`. `mu` and `mv` scale linearly and `k` is
    /// unchanged because it acts on angles.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            k: self.k,
            mu: self.mu * factor,
            mv: self.mv * factor,
            u0: factor * (self.u0 + 0.5) - 0.5,
            v0: factor * (self.v0 + 0.5) - 0.5,
        }
    }
}

impl From<[f64; 8]> for DistortionParams {
    fn from(a: [f64; 8]) -> Self {
        Self::from_array(a)
    }
}

impl From<DistortionParams> for [f64; 8] {
    fn from(p: DistortionParams) -> Self {
        p.to_array()
    }
}

impl fmt::Display for DistortionParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k=[{:.5}, {:.5}, {:.5}, {:.5}] mu={:.3} mv={:.3} u0={:.3} v0={:.3}",
            self.k[0], self.k[1], self.k[2], self.k[3], self.mu, self.mv, self.u0, self.v0
        )
    }
}

/// Normalized coordinates on the virtual pinhole image plane (unit focal
/// length, centred on the pinhole principal point).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCoords {
    pub x: f64,
    pub y: f64,
}

impl PinholeCoords {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Angle between the incoming ray and the optical axis.
    pub fn theta(&self) -> f64 {
        self.x.hypot(self.y).atan()
    }
}

/// Pixel coordinates in the fisheye image. May lie outside the raster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisheyeCoords {
    pub x_f: f64,
    pub y_f: f64,
}

/// The classical fisheye projection laws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Stereographic,
    Equidistance,
    Equisolid,
    Orthogonal,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 4] = [
        ProjectionKind::Stereographic,
        ProjectionKind::Equidistance,
        ProjectionKind::Equisolid,
        ProjectionKind::Orthogonal,
    ];
}

/// `theta + sum_i k_i theta^(2i+1)`, Horner form in `theta^2`.
#[inline]
pub fn radial_poly(theta: f64, k: &[f64; 4]) -> f64 {
    let t2 = theta * theta;
    theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))
}

/// `d r / d theta`.
#[inline]
pub fn radial_poly_derivative(theta: f64, k: &[f64; 4]) -> f64 {
    let t2 = theta * theta;
    1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])))
}

/// Radial distance `r(theta)` on the normalized fisheye image plane.
pub fn radial_distance(theta: f64, params: &DistortionParams) -> Result<f64> {
    if theta.is_nan() || params.k.iter().any(|k| k.is_nan()) {
        return Err(Error::NonFinite("radial_distance input"));
    }
    if !(0.0..FRAC_PI_2).contains(&theta) {
        return Err(Error::Domain {
            theta,
            max: FRAC_PI_2,
        });
    }
    Ok(radial_poly(theta, &params.k))
}

/// Maps a pinhole point into fisheye pixel coordinates.
///
/// The optical axis itself (`x = y = 0`) has no direction; it maps to the
/// principal point, which is the limit of the mapping.
pub fn pinhole_to_fisheye(p: PinholeCoords, params: &DistortionParams) -> Result<FisheyeCoords> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::NonFinite("pinhole coordinates"));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("distortion parameters"));
    }
    let rho = p.x.hypot(p.y);
    if rho == 0.0 {
        return Ok(FisheyeCoords {
            x_f: params.u0,
            y_f: params.v0,
        });
    }
    let r = radial_poly(rho.atan(), &params.k);
    Ok(FisheyeCoords {
        x_f: params.u0 + params.mu * (p.x / rho) * r,
        y_f: params.v0 + params.mv * (p.y / rho) * r,
    })
}

/// Ideal radial distance under one of the classical projections.
pub fn reference_projection(theta: f64, kind: ProjectionKind, f: f64) -> Result<f64> {
    if theta.is_nan() || f.is_nan() {
        return Err(Error::NonFinite("reference_projection input"));
    }
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return Err(Error::Domain {
            theta,
            max: FRAC_PI_2,
        });
    }
    Ok(match kind {
        ProjectionKind::Stereographic => 2.0 * f * (theta / 2.0).tan(),
        ProjectionKind::Equidistance => f * theta,
        ProjectionKind::Equisolid => 2.0 * f * (theta / 2.0).sin(),
        ProjectionKind::Orthogonal => f * theta.sin(),
    })
}

/// Result of approximating a reference projection with the radial polynomial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionFit {
    pub k: [f64; 4],
    /// Largest absolute radial residual on the sample grid, in units of `f`.
    pub max_residual: f64,
}

/// Least-squares fit of `k1..k4` to a reference projection on
/// `[0, theta_max]`.
///
/// The polynomial has a unit linear term, so the fit targets `R(theta) / f`;
/// the focal length is carried by `mu` and `mv`. Angles are scaled by
/// `theta_max` before forming the normal equations to keep the 4x4 system
/// well conditioned.
pub fn fit_projection(kind: ProjectionKind, f: f64, theta_max: f64) -> Result<ProjectionFit> {
    if !f.is_finite() || f <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "focal length must be positive, got {f}"
        )));
    }
    if !(0.0..=FRAC_PI_2).contains(&theta_max) {
        return Err(Error::Domain {
            theta: theta_max,
            max: FRAC_PI_2,
        });
    }

    let thetas: Vec<f64> = (0..FIT_SAMPLES)
        .map(|i| theta_max * i as f64 / (FIT_SAMPLES - 1) as f64)
        .collect();

    let mut normal = Matrix4::<f64>::zeros();
    let mut rhs = Vector4::<f64>::zeros();
    for &theta in &thetas {
        let target = reference_projection(theta, kind, f)? / f - theta;
        let t = if theta_max > 0.0 { theta / theta_max } else { 0.0 };
        let t2 = t * t;
        let basis = Vector4::new(t * t2, t * t2 * t2, t * t2 * t2 * t2, t * t2 * t2 * t2 * t2);
        normal += basis * basis.transpose();
        rhs += basis * target;
    }

    let scaled = normal
        .lu()
        .solve(&rhs)
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("theta_max = {theta_max}")))?;

    // Undo the angle scaling: c_i t^(2i+1) = c_i / theta_max^(2i+1) theta^(2i+1).
    let mut k = [0.0; 4];
    let mut scale = theta_max * theta_max * theta_max;
    for (ki, ci) in k.iter_mut().zip(scaled.iter()) {
        *ki = ci / scale;
        scale *= theta_max * theta_max;
    }

    let max_residual = thetas
        .iter()
        .map(|&theta| {
            let ideal = reference_projection(theta, kind, f).map(|r| r / f)?;
            Ok((radial_poly(theta, &k) - ideal).abs())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    Ok(ProjectionFit { k, max_residual })
}

/// Verifies that `r(theta)` is strictly increasing on `[0, theta_max]`.
///
/// Checks the sign of `r'` and the ordering of `r` on a dense grid. Returns
/// the first offending angle on failure.
pub fn check_monotonic(k: &[f64; 4], theta_max: f64) -> Result<()> {
    if k.iter().any(|v| !v.is_finite()) || !theta_max.is_finite() {
        return Err(Error::NonFinite("monotonicity check input"));
    }
    let mut prev = radial_poly(0.0, k);
    for i in 0..=MONOTONIC_SAMPLES {
        let theta = theta_max * i as f64 / MONOTONIC_SAMPLES as f64;
        if radial_poly_derivative(theta, k) <= 0.0 {
            return Err(Error::NonMonotonic { theta });
        }
        let r = radial_poly(theta, k);
        if i > 0 && r <= prev {
            return Err(Error::NonMonotonic { theta });
        }
        prev = r;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};

    fn params(k: [f64; 4]) -> DistortionParams {
        DistortionParams::new(k, 100.0, 100.0, 128.0, 128.0)
    }

    // Straight power-sum, independent of the Horner evaluation.
    fn naive_radial(theta: f64, k: &[f64; 4]) -> f64 {
        theta
            + k.iter()
                .enumerate()
                .map(|(i, ki)| ki * theta.powi(2 * i as i32 + 3))
                .sum::<f64>()
    }

    #[test]
    fn radial_distance_examples() {
        assert_eq!(radial_distance(0.0, &params([0.3, -0.1, 0.2, 0.01])).unwrap(), 0.0);
        assert_eq!(radial_distance(0.5, &params([0.0; 4])).unwrap(), 0.5);
        let r = radial_distance(0.5, &params([0.1, 0.0, 0.0, 0.0])).unwrap();
        assert!((r - 0.5125).abs() < 1e-15);
        assert!((r - naive_radial(0.5, &[0.1, 0.0, 0.0, 0.0])).abs() < 1e-15);
    }

    #[test]
    fn radial_distance_rejects_nan_and_domain() {
        assert!(matches!(
            radial_distance(f64::NAN, &params([0.0; 4])),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            radial_distance(FRAC_PI_2, &params([0.0; 4])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn pinhole_to_fisheye_examples() {
        let p = params([0.0; 4]);
        let c = pinhole_to_fisheye(PinholeCoords::new(0.0, 0.0), &p).unwrap();
        assert_eq!((c.x_f, c.y_f), (128.0, 128.0));

        let c = pinhole_to_fisheye(PinholeCoords::new(1.0, 0.0), &p).unwrap();
        assert!((c.x_f - (128.0 + 100.0 * FRAC_PI_4)).abs() < 1e-12);
        assert!((c.x_f - 206.5398).abs() < 1e-4);
        assert_eq!(c.y_f, 128.0);

        let q = params([0.05, -0.01, 0.0, 0.002]);
        let a = pinhole_to_fisheye(PinholeCoords::new(0.3, -0.7), &q).unwrap();
        let b = pinhole_to_fisheye(PinholeCoords::new(-0.7, 0.3), &q).unwrap();
        assert!((a.x_f - b.y_f).abs() < 1e-12 && (a.y_f - b.x_f).abs() < 1e-12);
    }

    #[test]
    fn pinhole_to_fisheye_rejects_nan() {
        let r = pinhole_to_fisheye(PinholeCoords::new(f64::NAN, 0.0), &params([0.0; 4]));
        assert!(r.is_err());
    }

    #[test]
    fn reference_projection_examples() {
        for kind in ProjectionKind::ALL {
            assert_eq!(reference_projection(0.0, kind, 1.0).unwrap(), 0.0);
        }
        let o = reference_projection(FRAC_PI_2, ProjectionKind::Orthogonal, 1.0).unwrap();
        assert!((o - 1.0).abs() < 1e-15);
        let e = reference_projection(FRAC_PI_3, ProjectionKind::Equisolid, 1.0).unwrap();
        assert!((e - 1.0).abs() < 1e-15);
        assert!(reference_projection(1.6, ProjectionKind::Orthogonal, 1.0).is_err());
        assert!(reference_projection(-0.1, ProjectionKind::Equidistance, 1.0).is_err());
    }

    #[test]
    fn fit_equidistance_is_zero() {
        let fit = fit_projection(ProjectionKind::Equidistance, 1.0, 1.2).unwrap();
        assert!(fit.k.iter().all(|k| k.abs() < 1e-10), "{:?}", fit.k);
        assert!(fit.max_residual < 1e-10);
    }

    #[test]
    fn fit_reference_projections() {
        let st = fit_projection(ProjectionKind::Stereographic, 1.0, 1.2).unwrap();
        assert!(st.max_residual < 1e-4, "{}", st.max_residual);
        let or = fit_projection(ProjectionKind::Orthogonal, 1.0, 1.2).unwrap();
        assert!(or.k[0] < 0.0);
        // Leading coefficients approach the Taylor series of sin: -1/6.
        assert!((or.k[0] + 1.0 / 6.0).abs() < 1e-3, "{:?}", or.k);
        for kind in ProjectionKind::ALL {
            let fit = fit_projection(kind, 1.0, 1.2).unwrap();
            check_monotonic(&fit.k, 1.2).unwrap();
        }
    }

    #[test]
    fn fit_focal_length_is_factored_out() {
        let a = fit_projection(ProjectionKind::Equisolid, 1.0, 1.0).unwrap();
        let b = fit_projection(ProjectionKind::Equisolid, 3.5, 1.0).unwrap();
        for (x, y) in a.k.iter().zip(b.k.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_degenerate_range_is_rejected() {
        assert!(matches!(
            fit_projection(ProjectionKind::Stereographic, 1.0, 0.0),
            Err(Error::Singular(_))
        ));
        assert!(fit_projection(ProjectionKind::Stereographic, 1.0, 2.0).is_err());
    }

    #[test]
    fn monotonicity_validator() {
        check_monotonic(&[0.0; 4], 1.5).unwrap();
        // 1 - 3 * 0.4 * theta^2 turns negative at theta ~ 0.91.
        let err = check_monotonic(&[-0.4, 0.0, 0.0, 0.0], 1.2).unwrap_err();
        match err {
            Error::NonMonotonic { theta } => assert!((theta - 0.9129).abs() < 1e-2),
            e => panic!("unexpected {e}"),
        }
        check_monotonic(&[-0.4, 0.0, 0.0, 0.0], 0.9).unwrap();
    }

    #[test]
    fn rescaling_law() {
        let p = DistortionParams::new([0.1, -0.02, 0.003, 0.0], 40.0, 42.0, 31.5, 30.0);
        let q = p.rescaled(2.0);
        assert_eq!(q.k, p.k);
        assert_eq!((q.mu, q.mv), (80.0, 84.0));
        // Image centre maps to image centre: (64 - 1) / 2 -> (128 - 1) / 2.
        assert_eq!(q.u0, 63.5);
        assert_eq!(q.rescaled(0.5), p);
    }

    #[test]
    fn params_serialize_as_array() {
        let p = DistortionParams::new([0.1, 0.2, 0.3, 0.4], 5.0, 6.0, 7.0, 8.0);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[0.1,0.2,0.3,0.4,5.0,6.0,7.0,8.0]");
        assert_eq!(serde_json::from_str::<DistortionParams>(&json).unwrap(), p);
        assert!(serde_json::from_str::<DistortionParams>("[1,2,3]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn azimuth_is_preserved(
                x in -3.0f64..3.0, y in -3.0f64..3.0,
                k1 in -0.3f64..0.3, k2 in -0.1f64..0.1,
                mu in 20.0f64..200.0, mv in 20.0f64..200.0,
            ) {
                prop_assume!(x.hypot(y) > 1e-6);
                let p = DistortionParams::new([k1, k2, 0.0, 0.0], mu, mv, 10.0, -4.0);
                let c = pinhole_to_fisheye(PinholeCoords::new(x, y), &p).unwrap();
                let r = radial_poly(x.hypot(y).atan(), &p.k);
                prop_assume!(r > 1e-6);
                let phi = (c.y_f - p.v0).atan2((c.x_f - p.u0) * mv / mu);
                let mut d = (phi - y.atan2(x)).abs();
                if d > std::f64::consts::PI { d = 2.0 * std::f64::consts::PI - d; }
                prop_assert!(d < 1e-9);
            }

            #[test]
            fn zero_k_is_equidistance(x in -4.0f64..4.0, y in -4.0f64..4.0, m in 10.0f64..300.0) {
                let p = DistortionParams::new([0.0; 4], m, m, 64.0, 64.0);
                let c = pinhole_to_fisheye(PinholeCoords::new(x, y), &p).unwrap();
                let theta = x.hypot(y).atan();
                let phi = y.atan2(x);
                prop_assert!((c.x_f - (64.0 + m * theta * phi.cos())).abs() < 1e-9);
                prop_assert!((c.y_f - (64.0 + m * theta * phi.sin())).abs() < 1e-9);
            }

            #[test]
            fn radial_zero_at_origin(k in proptest::array::uniform4(-1.0f64..1.0)) {
                prop_assert_eq!(radial_poly(0.0, &k), 0.0);
            }

            #[test]
            fn horner_matches_power_sum(theta in 0.0f64..1.5, k in proptest::array::uniform4(-1.0f64..1.0)) {
                prop_assert!((radial_poly(theta, &k) - naive_radial(theta, &k)).abs() < 1e-12);
            }
        }
    }
}
