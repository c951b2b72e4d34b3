//! 2D cavity patches: radial rotation of 1D profiles and size-classed
//! random warping.
//!
//! A patch is the intensity ratio to the local background (1.0 =
//! background) on an odd-sided square raster with the cavity at the
//! center pixel. Warping remaps radius by low-order angular harmonics,
//! which preserves the mean ring radius by construction and keeps the
//! first Fresnel fringe topologically intact; every warp is verified by
//! the fringe check and retried on a fresh substream if it destroyed the
//! ring.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::physics::ContrastProfile;
use crate::seed;

/// Rays cast by the fringe check.
pub const FRINGE_RAYS: usize = 64;
/// A ray succeeds only if its dip falls at least this far below background.
pub const CONTRAST_FLOOR: f64 = 0.05;
/// Fraction of rays that must find a dip.
pub const RAY_SUCCESS_FRACTION: f64 = 0.9;
/// Radial search band for the ring, in units of the nominal cavity radius.
/// Wide enough to cover the fringe drift of diffuse small-cavity profiles
/// plus the strongest allowed warp.
pub const FRINGE_BAND: (f64, f64) = (0.4, 2.2);

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("pixel scale must be positive, got {0} nm/px")]
    NonPositivePixelScale(f64),
    #[error("cavity radius {radius_px:.2} px below the 3 px minimum; use a finer pixel scale")]
    TooSmall { radius_px: f64 },
    #[error("warp destroyed the fringe in 16 attempts (seed {seed})")]
    WarpFailed { seed: u64 },
}

/// Size category for warp-amplitude selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeCategory {
    Small,
    Medium,
    Large,
}

/// Resolved class for one cavity: its category and warp budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeClass {
    pub category: SizeCategory,
    /// Maximum total radial modulation, as a fraction of radius.
    pub max_warp_amplitude: f64,
}

/// Radius partition and per-class warp amplitudes.
///
/// Classes are half-open: Small = [0, small_max), Medium =
/// [small_max, medium_max), Large = [medium_max, inf), so every positive
/// radius belongs to exactly one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeClassTable {
    pub small_max_nm: f64,
    pub medium_max_nm: f64,
    pub small_warp: f64,
    pub medium_warp: f64,
    pub large_warp: f64,
}

impl Default for SizeClassTable {
    fn default() -> Self {
        Self {
            small_max_nm: 5.0,
            medium_max_nm: 20.0,
            small_warp: 0.03,
            medium_warp: 0.07,
            large_warp: 0.12,
        }
    }
}

impl SizeClassTable {
    pub fn validate(&self) -> bool {
        0.0 < self.small_max_nm
            && self.small_max_nm < self.medium_max_nm
            && 0.0 <= self.small_warp
            && self.small_warp <= self.medium_warp
            && self.medium_warp <= self.large_warp
    }

    pub fn classify(&self, radius_nm: f64) -> SizeClass {
        debug_assert!(radius_nm > 0.0);
        if radius_nm < self.small_max_nm {
            SizeClass {
                category: SizeCategory::Small,
                max_warp_amplitude: self.small_warp,
            }
        } else if radius_nm < self.medium_max_nm {
            SizeClass {
                category: SizeCategory::Medium,
                max_warp_amplitude: self.medium_warp,
            }
        } else {
            SizeClass {
                category: SizeCategory::Large,
                max_warp_amplitude: self.large_warp,
            }
        }
    }
}

/// One angular harmonic of the radial warp r'(theta) = r (1 + a cos(m theta + phi)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub order: u32,
    pub amplitude: f64,
    pub phase: f64,
}

/// Grayscale cavity patch with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityPatch {
    /// Intensity ratio to background; odd x odd with the cavity centered.
    pub intensity: Array2<f64>,
    pub physical_radius_nm: f64,
    pub pixel_scale_nm: f64,
    /// Harmonics applied by warping; empty for an unwarped patch.
    pub warp: Vec<Harmonic>,
    /// Median darkest-ring radius measured by the fringe check, when a
    /// ring is detectable.
    pub fringe_radius_px: Option<f64>,
    pub rng_seed: u64,
}

impl CavityPatch {
    pub fn side(&self) -> usize {
        self.intensity.nrows()
    }

    pub fn center(&self) -> f64 {
        (self.side() / 2) as f64
    }

    /// Nominal cavity radius in pixels.
    pub fn nominal_radius_px(&self) -> f64 {
        self.physical_radius_nm / self.pixel_scale_nm
    }

    /// Bilinear sample with clamped coordinates. Exact at integer
    /// coordinates.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.intensity, x, y)
    }
}

fn bilinear(a: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (rows, cols) = a.dim();
    let x = x.clamp(0.0, (cols - 1) as f64);
    let y = y.clamp(0.0, (rows - 1) as f64);
    let x0 = (x as usize).min(cols - 2);
    let y0 = (y as usize).min(rows - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    a[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
        + a[[y0, x0 + 1]] * fx * (1.0 - fy)
        + a[[y0 + 1, x0]] * (1.0 - fx) * fy
        + a[[y0 + 1, x0 + 1]] * fx * fy
}

/// Rotate a 1D profile 360 degrees into a 2D patch at `pixel_scale_nm`
/// per pixel. Patch side is `2 ceil(rho_max R / s) + 1`; the center pixel
/// carries the profile value at rho = 0 exactly.
pub fn rotate_profile(
    profile: &ContrastProfile,
    pixel_scale_nm: f64,
) -> Result<CavityPatch, PatchError> {
    if pixel_scale_nm <= 0.0 {
        return Err(PatchError::NonPositivePixelScale(pixel_scale_nm));
    }
    let radius_nm = profile.request.cavity_radius_nm;
    let radius_px = radius_nm / pixel_scale_nm;
    if radius_px < 3.0 {
        return Err(PatchError::TooSmall { radius_px });
    }
    let half = (profile.rho_max * radius_px).ceil() as usize;
    let side = 2 * half + 1;
    let c = half as f64;
    let mut intensity = Array2::zeros((side, side));
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let rho = (dx * dx + dy * dy).sqrt() / radius_px;
            intensity[[y, x]] = profile.intensity_at(rho);
        }
    }
    let fringe_radius_px = profile_fringe_radius(profile).map(|rho| rho * radius_px);
    Ok(CavityPatch {
        intensity,
        physical_radius_nm: radius_nm,
        pixel_scale_nm,
        warp: Vec::new(),
        fringe_radius_px,
        rng_seed: 0,
    })
}

/// Sub-sample location of the deepest interior dip of a profile, in
/// reduced radius, if it falls in the ring search band and below the
/// contrast floor.
pub fn profile_fringe_radius(profile: &ContrastProfile) -> Option<f64> {
    let i = profile.interior_argmin()?;
    if profile.intensity[i] >= 1.0 - CONTRAST_FLOOR {
        return None;
    }
    let rho = profile.rho_at(i);
    let lo = FRINGE_BAND.0;
    let hi = FRINGE_BAND.1;
    if !(lo..=hi).contains(&rho) {
        return None;
    }
    // parabolic refinement on the three samples around the minimum
    let step = profile.rho_max / (profile.intensity.len() - 1) as f64;
    Some(rho + parabolic_offset(
        profile.intensity[i - 1],
        profile.intensity[i],
        profile.intensity[i + 1],
    ) * step)
}

/// Offset of the parabola vertex through (-1, a), (0, b), (1, c), clamped
/// to half a step.
pub(crate) fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom <= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Result of the fringe check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringeCheck {
    /// True when at least [`RAY_SUCCESS_FRACTION`] of rays found a dip.
    pub found: bool,
    /// Median dip radius over succeeding rays, px.
    pub radius_px: Option<f64>,
    pub ray_success_fraction: f64,
}

/// Scan one ray for the darkest dip inside the search band.
///
/// Samples at 1 px steps, takes the darkest sample strictly inside the
/// band, refines it parabolically, and accepts it only if it dips below
/// the contrast floor.
pub(crate) fn ray_dip(
    patch: &CavityPatch,
    theta: f64,
    band_px: (f64, f64),
) -> Option<f64> {
    let c = patch.center();
    let (dir_y, dir_x) = theta.sin_cos();
    let t_lo = band_px.0.max(1.0);
    let t_hi = band_px.1.min(c);
    if t_hi <= t_lo + 2.0 {
        return None;
    }
    let n = (t_hi - t_lo).floor() as usize;
    let value_at = |t: f64| patch.sample(c + t * dir_x, c + t * dir_y);
    let mut best_i = 0usize;
    let mut best_v = f64::INFINITY;
    let mut values = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let v = value_at(t_lo + i as f64);
        values.push(v);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    if best_v >= 1.0 - CONTRAST_FLOOR || best_i == 0 || best_i == n {
        return None;
    }
    let offset = parabolic_offset(values[best_i - 1], values[best_i], values[best_i + 1]);
    Some(t_lo + best_i as f64 + offset)
}

/// Verify the first Fresnel fringe survives in a patch and measure its
/// radius: casts [`FRINGE_RAYS`] rays from the center, finds each ray's
/// darkest dip in the ring band, and takes the median over succeeding
/// rays.
pub fn check_fringe(patch: &CavityPatch) -> FringeCheck {
    let nominal = patch.nominal_radius_px();
    let band = (FRINGE_BAND.0 * nominal, FRINGE_BAND.1 * nominal);
    let mut radii = Vec::with_capacity(FRINGE_RAYS);
    for k in 0..FRINGE_RAYS {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / FRINGE_RAYS as f64;
        if let Some(r) = ray_dip(patch, theta, band) {
            radii.push(r);
        }
    }
    let frac = radii.len() as f64 / FRINGE_RAYS as f64;
    if frac >= RAY_SUCCESS_FRACTION {
        FringeCheck {
            found: true,
            radius_px: Some(median(&mut radii)),
            ray_success_fraction: frac,
        }
    } else {
        FringeCheck {
            found: false,
            radius_px: None,
            ray_success_fraction: frac,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Apply a fixed set of warp harmonics: each output pixel at polar
/// (r, theta) samples the input at radius r / (1 + sum a_m cos(m theta + phi_m)).
/// Pixels where the modulation factor is exactly 1 copy through bit-exactly.
pub fn warp_with_harmonics(patch: &CavityPatch, harmonics: &[Harmonic]) -> CavityPatch {
    let side = patch.side();
    let c = patch.center();
    let mut out = Array2::zeros((side, side));
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let theta = dy.atan2(dx);
            let factor: f64 = 1.0
                + harmonics
                    .iter()
                    .map(|h| h.amplitude * (h.order as f64 * theta + h.phase).cos())
                    .sum::<f64>();
            if factor == 1.0 {
                out[[y, x]] = patch.intensity[[y, x]];
            } else {
                let r = (dx * dx + dy * dy).sqrt();
                let r_src = r / factor;
                out[[y, x]] = patch.sample(c + r_src * theta.cos(), c + r_src * theta.sin());
            }
        }
    }
    CavityPatch {
        intensity: out,
        warp: harmonics.to_vec(),
        ..patch.clone()
    }
}

/// Randomly warp a patch within its size class's amplitude budget.
///
/// Harmonic amplitudes are drawn uniformly from +-(budget/3) per order
/// m = 2..4, so the total modulation never exceeds the budget and the
/// mean ring radius is preserved (no m = 0 term). Each attempt is checked
/// for fringe survival; up to 16 fresh substreams are tried.
pub fn warp_patch(
    patch: &CavityPatch,
    class: SizeClass,
    seed_value: u64,
) -> Result<CavityPatch, PatchError> {
    let per_harmonic = class.max_warp_amplitude / 3.0;
    for attempt in 0..16u64 {
        let mut rng = seed::rng_for(seed_value, "warp", attempt);
        let harmonics: Vec<Harmonic> = (2..=4u32)
            .map(|order| Harmonic {
                order,
                amplitude: if per_harmonic > 0.0 {
                    rng.gen_range(-per_harmonic..=per_harmonic)
                } else {
                    0.0
                },
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        let mut warped = warp_with_harmonics(patch, &harmonics);
        warped.rng_seed = seed_value;
        let check = check_fringe(&warped);
        if check.found {
            warped.fringe_radius_px = check.radius_px;
            return Ok(warped);
        }
    }
    Err(PatchError::WarpFailed { seed: seed_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{simulate_profile, MicroscopeParams, SimulationRequest};

    fn desk_profile(radius_nm: f64, defocus_um: f64) -> ContrastProfile {
        let params = MicroscopeParams::new(200e3, -0.15e9, -0.002e9, 100e-9, 50e-9).unwrap();
        simulate_profile(&SimulationRequest::new(radius_nm, defocus_um, params)).unwrap()
    }

    fn flat_profile() -> ContrastProfile {
        let params = MicroscopeParams::new(200e3, 0.0, 0.0, 100e-9, 50e-9).unwrap();
        simulate_profile(&SimulationRequest::new(5.0, -1.0, params)).unwrap()
    }

    #[test]
    fn classify_covers_the_line() {
        let table = SizeClassTable::default();
        assert!(table.validate());
        assert_eq!(table.classify(2.0).category, SizeCategory::Small);
        assert_eq!(table.classify(10.0).category, SizeCategory::Medium);
        assert_eq!(table.classify(30.0).category, SizeCategory::Large);
        // half-open [lo, hi): boundary belongs to the class it opens
        assert_eq!(table.classify(5.0).category, SizeCategory::Medium);
        assert_eq!(table.classify(20.0).category, SizeCategory::Large);
        assert!(
            table.classify(2.0).max_warp_amplitude <= table.classify(10.0).max_warp_amplitude
        );
        assert!(
            table.classify(10.0).max_warp_amplitude <= table.classify(30.0).max_warp_amplitude
        );
    }

    #[test]
    fn rotate_constant_profile_is_flat() {
        let patch = rotate_profile(&flat_profile(), 0.1).unwrap();
        assert_eq!(patch.side() % 2, 1);
        for &v in patch.intensity.iter() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!(patch.fringe_radius_px.is_none());
    }

    #[test]
    fn rotate_center_and_side_contract() {
        let profile = desk_profile(5.0, -1.0);
        let patch = rotate_profile(&profile, 0.1).unwrap();
        let expected_side = 2 * ((profile.rho_max * 5.0 / 0.1).ceil() as usize) + 1;
        assert_eq!(patch.side(), expected_side);
        let c = patch.side() / 2;
        assert_eq!(patch.intensity[[c, c]], profile.intensity[0]);
    }

    #[test]
    fn rotate_rejects_tiny_patches() {
        let profile = desk_profile(5.0, -1.0);
        assert!(matches!(
            rotate_profile(&profile, 2.0),
            Err(PatchError::TooSmall { .. })
        ));
    }

    #[test]
    fn patch_equals_its_own_quarter_rotation() {
        let patch = rotate_profile(&desk_profile(4.0, -1.0), 0.1).unwrap();
        let n = patch.side();
        for y in 0..n {
            for x in 0..n {
                // 90-degree rotation: (x, y) -> (y, n-1-x)
                assert_eq!(
                    patch.intensity[[y, x]],
                    patch.intensity[[n - 1 - x, y]],
                    "asymmetry at ({x}, {y})"
                );
            }
        }
    }

    #[test]
    fn border_ring_is_background() {
        let patch = rotate_profile(&desk_profile(5.0, -1.0), 0.1).unwrap();
        let n = patch.side();
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..n {
            for x in 0..n {
                if y < 2 || y >= n - 2 || x < 2 || x >= n - 2 {
                    sum += patch.intensity[[y, x]];
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        assert!((mean - 1.0).abs() < 0.02, "border mean {mean}");
    }

    #[test]
    fn fringe_check_matches_profile_argmin() {
        let profile = desk_profile(5.0, -1.0);
        let patch = rotate_profile(&profile, 0.1).unwrap();
        let expected = profile_fringe_radius(&profile).unwrap() * 5.0 / 0.1;
        let check = check_fringe(&patch);
        assert!(check.found);
        let measured = check.radius_px.unwrap();
        assert!(
            (measured - expected).abs() <= 1.0,
            "measured {measured:.2} vs argmin {expected:.2}"
        );
    }

    #[test]
    fn fringe_check_rejects_flat_patch() {
        let patch = rotate_profile(&flat_profile(), 0.1).unwrap();
        let check = check_fringe(&patch);
        assert!(!check.found);
        assert!(check.radius_px.is_none());
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let patch = rotate_profile(&desk_profile(5.0, -1.0), 0.1).unwrap();
        let zero = [
            Harmonic { order: 2, amplitude: 0.0, phase: 0.3 },
            Harmonic { order: 3, amplitude: 0.0, phase: 1.1 },
        ];
        let warped = warp_with_harmonics(&patch, &zero);
        assert_eq!(patch.intensity, warped.intensity);
    }

    #[test]
    fn warp_is_deterministic_per_seed() {
        let patch = rotate_profile(&desk_profile(5.0, -1.0), 0.1).unwrap();
        let class = SizeClassTable::default().classify(5.0);
        let a = warp_patch(&patch, class, 99).unwrap();
        let b = warp_patch(&patch, class, 99).unwrap();
        assert_eq!(a.intensity, b.intensity);
        assert_eq!(a.warp, b.warp);
        assert_ne!(a.intensity, warp_patch(&patch, class, 100).unwrap().intensity);
    }

    #[test]
    fn warp_preserves_ring_radius_and_support() {
        let profile = desk_profile(8.0, -1.0);
        let patch = rotate_profile(&profile, 0.1).unwrap();
        let class = SizeClassTable::default().classify(8.0);
        let unwarped_fringe = patch.fringe_radius_px.unwrap();
        for seed_value in 0..8u64 {
            let warped = warp_patch(&patch, class, seed_value).unwrap();
            // mean dip radius over rays stays near the unwarped ring
            let nominal = warped.nominal_radius_px();
            let band = (FRINGE_BAND.0 * nominal, FRINGE_BAND.1 * nominal);
            let mut sum = 0.0;
            let mut n = 0usize;
            for k in 0..256 {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / 256.0;
                if let Some(r) = ray_dip(&warped, theta, band) {
                    sum += r;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            assert!(
                (mean - unwarped_fringe).abs() / unwarped_fringe < 0.01,
                "seed {seed_value}: mean ring {mean:.2} vs {unwarped_fringe:.2}"
            );
            // histogram support: extremes move by < 5%
            let (lo0, hi0) = min_max(&patch.intensity);
            let (lo1, hi1) = min_max(&warped.intensity);
            assert!((lo1 - lo0).abs() / lo0 < 0.05);
            assert!((hi1 - hi0).abs() / hi0 < 0.05);
        }
    }

    fn min_max(a: &Array2<f64>) -> (f64, f64) {
        a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    #[test]
    fn warp_failure_reports_seed() {
        // a flat patch has no fringe, so every attempt fails
        let patch = rotate_profile(&flat_profile(), 0.1).unwrap();
        let class = SizeClassTable::default().classify(5.0);
        match warp_patch(&patch, class, 1234) {
            Err(PatchError::WarpFailed { seed }) => assert_eq!(seed, 1234),
            other => panic!("expected warp failure, got {other:?}"),
        }
    }
}
