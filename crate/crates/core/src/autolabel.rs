//! Pixel-precise cavity labeling.
//!
//! The labeler runs a two-marker watershed on the patch intensity
//! surface (interior marker at the center pixel, exterior marker on the
//! border ring) and then snaps the basin boundary, ray by ray, onto the
//! darkest point of the outer fringe, so the mask edge sits at the center
//! of the first dark Fresnel ring. Cavities too small to carve a detailed
//! mask (< 8 px measured radius) fall back to a square label 1.5x the
//! cavity diameter.
//!
//! The watershed variant used here assigns each pixel to the marker it
//! can reach through the brightest path (maximizing the minimum intensity
//! along the way). For ring-shaped cavities that places the basin divide
//! in the dark moat between interior and background, which is where the
//! snap expects it; flooding order is fully deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;
use thiserror::Error;

use crate::patch::{check_fringe, parabolic_offset, CavityPatch};

/// Radius below which the watershed mask is replaced by a square label.
pub const SQUARE_FALLBACK_RADIUS_PX: f64 = 8.0;
/// Square labels are this factor larger than the cavity diameter.
pub const SQUARE_FALLBACK_SCALE: f64 = 1.5;
/// Per-ray snap window around the watershed boundary, px.
pub const SNAP_WINDOW_PX: f64 = 3.0;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no detectable fringe ({fraction:.0}% of rays found a dip); feature should be dropped")]
    NoFringe { fraction: f64 },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask bbox {bbox:?} does not fit in a {width}x{height} image at origin {origin:?}")]
    OutOfBounds {
        bbox: (usize, usize, usize, usize),
        origin: (i64, i64),
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMethod {
    Watershed,
    SquareFallback,
}

/// Boolean cavity mask for one patch, with its tight bounding box
/// (inclusive pixel coordinates, patch-local).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub mask: Array2<bool>,
    /// (x_min, y_min, x_max, y_max), inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub method: LabelMethod,
    /// Median mask-edge radius, px.
    pub edge_radius_px: f64,
}

impl LabelMask {
    pub fn width_px(&self) -> usize {
        self.bbox.2 - self.bbox.0 + 1
    }

    pub fn height_px(&self) -> usize {
        self.bbox.3 - self.bbox.1 + 1
    }
}

#[derive(Clone, Copy, PartialEq)]
struct FloodNode {
    /// Minimum intensity along the best path from the seeding marker.
    cost: f64,
    y: u32,
    x: u32,
    label: u8,
}

impl Eq for FloodNode {}

impl Ord for FloodNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap on cost; deterministic total order on ties
        self.cost
            .total_cmp(&other.cost)
            .then_with(|| other.y.cmp(&self.y))
            .then_with(|| other.x.cmp(&self.x))
            .then_with(|| other.label.cmp(&self.label))
    }
}

impl PartialOrd for FloodNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const INTERIOR: u8 = 1;
const EXTERIOR: u8 = 2;

/// Two-marker watershed by brightest-path flooding. Returns the label
/// grid (INTERIOR / EXTERIOR everywhere).
fn watershed(intensity: &Array2<f64>) -> Array2<u8> {
    let (rows, cols) = intensity.dim();
    let mut labels = Array2::zeros((rows, cols));
    let mut heap = BinaryHeap::with_capacity(2 * (rows + cols));

    let cy = rows / 2;
    let cx = cols / 2;
    heap.push(FloodNode {
        cost: intensity[[cy, cx]],
        y: cy as u32,
        x: cx as u32,
        label: INTERIOR,
    });
    for x in 0..cols {
        for y in [0, rows - 1] {
            heap.push(FloodNode {
                cost: intensity[[y, x]],
                y: y as u32,
                x: x as u32,
                label: EXTERIOR,
            });
        }
    }
    for y in 1..rows - 1 {
        for x in [0, cols - 1] {
            heap.push(FloodNode {
                cost: intensity[[y, x]],
                y: y as u32,
                x: x as u32,
                label: EXTERIOR,
            });
        }
    }

    while let Some(node) = heap.pop() {
        let (y, x) = (node.y as usize, node.x as usize);
        if labels[[y, x]] != 0 {
            continue;
        }
        labels[[y, x]] = node.label;
        let mut push = |ny: usize, nx: usize, heap: &mut BinaryHeap<FloodNode>| {
            if labels[[ny, nx]] == 0 {
                heap.push(FloodNode {
                    cost: node.cost.min(intensity[[ny, nx]]),
                    y: ny as u32,
                    x: nx as u32,
                    label: node.label,
                });
            }
        };
        if y > 0 {
            push(y - 1, x, &mut heap);
        }
        if y + 1 < rows {
            push(y + 1, x, &mut heap);
        }
        if x > 0 {
            push(y, x - 1, &mut heap);
        }
        if x + 1 < cols {
            push(y, x + 1, &mut heap);
        }
    }
    labels
}

/// Distance from the center to the first interior/exterior transition
/// along a ray, sampled at half-pixel steps on the label lattice.
fn watershed_boundary_radius(labels: &Array2<u8>, theta: f64) -> f64 {
    let (rows, _) = labels.dim();
    let c = (rows / 2) as f64;
    let (dy, dx) = theta.sin_cos();
    let t_max = c - 1.0;
    let mut t = 1.0;
    while t <= t_max {
        let y = (c + t * dy).round() as usize;
        let x = (c + t * dx).round() as usize;
        if labels[[y, x]] != INTERIOR {
            return (t - 0.5).max(1.0);
        }
        t += 0.5;
    }
    t_max
}

/// Darkest bilinear sample within the snap window around `t0` along a
/// ray, parabolically refined.
fn snap_to_darkest(patch: &CavityPatch, theta: f64, t0: f64) -> f64 {
    let c = patch.center();
    let (dy, dx) = theta.sin_cos();
    let lo = (t0 - SNAP_WINDOW_PX).max(1.0);
    let hi = (t0 + SNAP_WINDOW_PX).min(c - 1.0);
    let steps = ((hi - lo) / 0.5).floor() as usize;
    if steps < 2 {
        return t0;
    }
    let value = |t: f64| patch.sample(c + t * dx, c + t * dy);
    let samples: Vec<f64> = (0..=steps).map(|i| value(lo + 0.5 * i as f64)).collect();
    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for (i, &v) in samples.iter().enumerate() {
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut t = lo + 0.5 * best_i as f64;
    if best_i > 0 && best_i < steps {
        t += 0.5 * parabolic_offset(samples[best_i - 1], samples[best_i], samples[best_i + 1]);
    }
    t
}

fn filled_square_mask(patch: &CavityPatch, radius_px: f64) -> LabelMask {
    let side_px = ((SQUARE_FALLBACK_SCALE * 2.0 * radius_px).round() as usize)
        .max(1)
        .min(patch.side());
    let c = patch.side() / 2;
    let lo = c - ((side_px - 1) / 2).min(c);
    let hi = (lo + side_px - 1).min(patch.side() - 1);
    let mut mask = Array2::from_elem(patch.intensity.dim(), false);
    for y in lo..=hi {
        for x in lo..=hi {
            mask[[y, x]] = true;
        }
    }
    LabelMask {
        mask,
        bbox: (lo, lo, hi, hi),
        method: LabelMethod::SquareFallback,
        edge_radius_px: radius_px,
    }
}

fn tight_bbox(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let (rows, cols) = mask.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..rows {
        for x in 0..cols {
            if mask[[y, x]] {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    bounds
}

/// Label one patch.
///
/// Requires a surviving fringe; patches without one are rejected so the
/// caller can drop the feature. Measured radii below
/// [`SQUARE_FALLBACK_RADIUS_PX`] yield a centered square label of side
/// `round(1.5 * 2 * radius)`; everything else gets the snapped watershed
/// mask.
pub fn label_patch(patch: &CavityPatch) -> Result<LabelMask, LabelError> {
    let fringe = check_fringe(patch);
    let radius = match fringe.radius_px {
        Some(r) if fringe.found => r,
        _ => {
            return Err(LabelError::NoFringe {
                fraction: fringe.ray_success_fraction * 100.0,
            })
        }
    };

    if radius < SQUARE_FALLBACK_RADIUS_PX {
        return Ok(filled_square_mask(patch, radius));
    }

    let labels = watershed(&patch.intensity);

    // one snapped boundary radius per ray, oversampled so every boundary
    // pixel has an adjacent ray
    let n_rays = ((2.0 * std::f64::consts::PI * radius).ceil() as usize).max(64);
    let mut edge = Vec::with_capacity(n_rays);
    for k in 0..n_rays {
        let theta = std::f64::consts::TAU * k as f64 / n_rays as f64;
        let t_watershed = watershed_boundary_radius(&labels, theta);
        edge.push(snap_to_darkest(patch, theta, t_watershed));
    }

    // rasterize the star-shaped region bounded by the snapped radii
    let side = patch.side();
    let c = patch.center();
    let mut mask = Array2::from_elem((side, side), false);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let pos = theta / std::f64::consts::TAU * n_rays as f64;
            let i = (pos as usize) % n_rays;
            let f = pos - pos.floor();
            let r_edge = edge[i] * (1.0 - f) + edge[(i + 1) % n_rays] * f;
            mask[[y, x]] = r <= r_edge;
        }
    }

    let bbox = tight_bbox(&mask).ok_or(LabelError::EmptyMask)?;
    let mut radii = edge;
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edge_radius_px = if radii.len() % 2 == 1 {
        radii[radii.len() / 2]
    } else {
        0.5 * (radii[radii.len() / 2 - 1] + radii[radii.len() / 2])
    };
    Ok(LabelMask {
        mask,
        bbox,
        method: LabelMethod::Watershed,
        edge_radius_px,
    })
}

/// Normalized (cx, cy, w, h) of a mask's bounding box placed with its
/// patch origin at `origin` (image pixels) inside a `width` x `height`
/// image. Values are clamped to [0, 1].
pub fn mask_to_box(
    label: &LabelMask,
    origin: (i64, i64),
    width: usize,
    height: usize,
) -> Result<(f64, f64, f64, f64), LabelError> {
    let (x_min, y_min, x_max, y_max) = label.bbox;
    let x0 = origin.0 + x_min as i64;
    let y0 = origin.1 + y_min as i64;
    let x1 = origin.0 + x_max as i64 + 1;
    let y1 = origin.1 + y_max as i64 + 1;
    if x0 < 0 || y0 < 0 || x1 > width as i64 || y1 > height as i64 {
        return Err(LabelError::OutOfBounds {
            bbox: label.bbox,
            origin,
            width,
            height,
        });
    }
    let w = width as f64;
    let h = height as f64;
    let cx = ((x0 + x1) as f64 / 2.0 / w).clamp(0.0, 1.0);
    let cy = ((y0 + y1) as f64 / 2.0 / h).clamp(0.0, 1.0);
    let bw = ((x1 - x0) as f64 / w).clamp(0.0, 1.0);
    let bh = ((y1 - y0) as f64 / h).clamp(0.0, 1.0);
    Ok((cx, cy, bw, bh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{rotate_profile, warp_patch, SizeClassTable};
    use crate::physics::{simulate_profile, MicroscopeParams, SimulationRequest};

    fn desk_patch(radius_nm: f64, pixel_scale: f64) -> CavityPatch {
        let params = MicroscopeParams::new(200e3, -0.15e9, -0.002e9, 100e-9, 50e-9).unwrap();
        let profile =
            simulate_profile(&SimulationRequest::new(radius_nm, -1.0, params)).unwrap();
        rotate_profile(&profile, pixel_scale).unwrap()
    }

    #[test]
    fn unwarped_mask_is_a_disc_at_the_fringe() {
        let patch = desk_patch(5.0, 0.1);
        let fringe = patch.fringe_radius_px.unwrap();
        let label = label_patch(&patch).unwrap();
        assert_eq!(label.method, LabelMethod::Watershed);
        assert!(
            (label.edge_radius_px - fringe).abs() <= 1.0,
            "edge {:.2} vs fringe {:.2}",
            label.edge_radius_px,
            fringe
        );
        let expected = 2.0 * fringe + 1.0;
        assert!((label.width_px() as f64 - expected).abs() <= 2.0);
        assert!((label.height_px() as f64 - expected).abs() <= 2.0);
        // the mask contains the dark-ring interior
        let c = patch.center();
        let side = patch.side();
        for y in 0..side {
            for x in 0..side {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                if r <= fringe - 1.5 {
                    assert!(label.mask[[y, x]], "interior pixel ({x},{y}) not in mask");
                }
            }
        }
    }

    #[test]
    fn small_feature_gets_square_fallback() {
        // 1 nm at 0.2 nm/px puts the ring around 5-6 px
        let patch = desk_patch(1.0, 0.2);
        let measured = check_fringe(&patch).radius_px.unwrap();
        assert!(measured < SQUARE_FALLBACK_RADIUS_PX);
        let label = label_patch(&patch).unwrap();
        assert_eq!(label.method, LabelMethod::SquareFallback);
        let expected_side = (1.5 * 2.0 * measured).round() as usize;
        assert_eq!(label.width_px(), expected_side);
        assert_eq!(label.height_px(), expected_side);
        let c = patch.side() / 2;
        assert!(label.mask[[c, c]]);
    }

    #[test]
    fn fallback_trigger_matches_measured_radius() {
        let mut saw_fallback = false;
        let mut saw_watershed = false;
        for scale in [0.25, 0.2, 0.15, 0.12, 0.1, 0.08] {
            let patch = desk_patch(1.0, scale);
            let measured = check_fringe(&patch).radius_px.unwrap();
            let label = label_patch(&patch).unwrap();
            let expect_fallback = measured < SQUARE_FALLBACK_RADIUS_PX;
            assert_eq!(
                label.method == LabelMethod::SquareFallback,
                expect_fallback,
                "scale {scale}: measured {measured:.2}"
            );
            saw_fallback |= expect_fallback;
            saw_watershed |= !expect_fallback;
        }
        assert!(saw_fallback && saw_watershed, "test should exercise both branches");
    }

    #[test]
    fn flat_patch_cannot_be_labeled() {
        let params = MicroscopeParams::new(200e3, 0.0, 0.0, 100e-9, 50e-9).unwrap();
        let profile = simulate_profile(&SimulationRequest::new(5.0, -1.0, params)).unwrap();
        let patch = rotate_profile(&profile, 0.1).unwrap();
        assert!(matches!(label_patch(&patch), Err(LabelError::NoFringe { .. })));
    }

    #[test]
    fn labeling_is_deterministic() {
        let patch = desk_patch(4.0, 0.1);
        assert_eq!(label_patch(&patch).unwrap(), label_patch(&patch).unwrap());
    }

    #[test]
    fn warped_patch_edge_follows_fringe_check() {
        let patch = desk_patch(6.0, 0.1);
        let class = SizeClassTable::default().classify(6.0);
        for seed in 0..4u64 {
            let warped = warp_patch(&patch, class, seed).unwrap();
            let fringe = check_fringe(&warped).radius_px.unwrap();
            let label = label_patch(&warped).unwrap();
            assert!(
                (label.edge_radius_px - fringe).abs() <= 1.0,
                "seed {seed}: edge {:.2} vs fringe {:.2}",
                label.edge_radius_px,
                fringe
            );
        }
    }

    #[test]
    fn box_normalization_arithmetic() {
        let full = LabelMask {
            mask: Array2::from_elem((10, 10), true),
            bbox: (0, 0, 9, 9),
            method: LabelMethod::Watershed,
            edge_radius_px: 5.0,
        };
        assert_eq!(mask_to_box(&full, (0, 0), 10, 10).unwrap(), (0.5, 0.5, 1.0, 1.0));
        assert_eq!(
            mask_to_box(&full, (0, 0), 100, 100).unwrap(),
            (0.05, 0.05, 0.1, 0.1)
        );
    }

    #[test]
    fn box_rejects_out_of_bounds_placement() {
        let label = LabelMask {
            mask: Array2::from_elem((10, 10), true),
            bbox: (0, 0, 9, 9),
            method: LabelMethod::Watershed,
            edge_radius_px: 5.0,
        };
        assert!(mask_to_box(&label, (95, 0), 100, 100).is_err());
        assert!(mask_to_box(&label, (-1, 0), 100, 100).is_err());
    }

    #[test]
    fn box_contains_every_mask_pixel_after_rasterization() {
        let patch = desk_patch(5.0, 0.1);
        let label = label_patch(&patch).unwrap();
        let (cx, cy, w, h) = mask_to_box(&label, (37, 12), 2048, 1024).unwrap();
        let x0 = ((cx - w / 2.0) * 2048.0).round() as i64;
        let x1 = ((cx + w / 2.0) * 2048.0).round() as i64;
        let y0 = ((cy - h / 2.0) * 1024.0).round() as i64;
        let y1 = ((cy + h / 2.0) * 1024.0).round() as i64;
        for y in 0..patch.side() {
            for x in 0..patch.side() {
                if label.mask[[y, x]] {
                    let ix = 37 + x as i64;
                    let iy = 12 + y as i64;
                    assert!(ix >= x0 && ix < x1, "x {ix} outside [{x0},{x1})");
                    assert!(iy >= y0 && iy < y1, "y {iy} outside [{y0},{y1})");
                }
            }
        }
    }
}
