//! Detector / model pixel lattice.
//!
//! Pixels are indexed row-major, `p = row * side + col`. The reciprocal-space
//! coordinate of a pixel is `q = ((col - c) / side, (row - c) / side)` with
//! `c = (side - 1) / 2`, i.e. cycles per real-space pixel of a `side x side`
//! object array. The same lattice is used for detector frames and for the
//! Fourier model of the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelClass {
    Good,
    Hole,
    Corner,
}

/// Minimal description from which a [`DetectorGeometry`] is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryMeta {
    pub side_px: usize,
    pub aperture_radius_px: f64,
    pub hole_radius_px: f64,
}

#[derive(Debug, Clone)]
pub struct DetectorGeometry {
    side: usize,
    center: f64,
    aperture_radius_px: f64,
    hole_radius_px: f64,
    q: Vec<[f64; 2]>,
    mask: Vec<PixelClass>,
    good: Vec<u32>,
    good_pos: Vec<u32>,
}

pub const NOT_GOOD: u32 = u32::MAX;

impl DetectorGeometry {
    pub fn new(side_px: usize, aperture_radius_px: f64, hole_radius_px: f64) -> Result<Self> {
        if side_px < 3 || side_px % 2 == 0 {
            return Err(Error::invalid(format!(
                "detector side must be odd and >= 3, got {side_px}"
            )));
        }
        if !(hole_radius_px >= 0.0) || !(hole_radius_px < aperture_radius_px) {
            return Err(Error::invalid(format!(
                "hole radius {hole_radius_px} must be in [0, aperture radius {aperture_radius_px})"
            )));
        }
        if aperture_radius_px > side_px as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "aperture radius {aperture_radius_px} exceeds half the array side {}",
                side_px as f64 / 2.0
            )));
        }

        let n = side_px;
        let c = (n - 1) as f64 / 2.0;
        let mut q = Vec::with_capacity(n * n);
        let mut mask = Vec::with_capacity(n * n);
        let mut good = Vec::new();
        let mut good_pos = vec![NOT_GOOD; n * n];
        for row in 0..n {
            for col in 0..n {
                let dx = col as f64 - c;
                let dy = row as f64 - c;
                q.push([dx / n as f64, dy / n as f64]);
                let r = dx.hypot(dy);
                let class = if r < hole_radius_px {
                    PixelClass::Hole
                } else if r >= aperture_radius_px {
                    PixelClass::Corner
                } else {
                    PixelClass::Good
                };
                if class == PixelClass::Good {
                    good_pos[row * n + col] = good.len() as u32;
                    good.push((row * n + col) as u32);
                }
                mask.push(class);
            }
        }

        Ok(Self {
            side: n,
            center: c,
            aperture_radius_px,
            hole_radius_px,
            q,
            mask,
            good,
            good_pos,
        })
    }

    pub fn from_meta(meta: &GeometryMeta) -> Result<Self> {
        Self::new(meta.side_px, meta.aperture_radius_px, meta.hole_radius_px)
    }

    pub fn meta(&self) -> GeometryMeta {
        GeometryMeta {
            side_px: self.side,
            aperture_radius_px: self.aperture_radius_px,
            hole_radius_px: self.hole_radius_px,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn aperture_radius_px(&self) -> f64 {
        self.aperture_radius_px
    }

    pub fn hole_radius_px(&self) -> f64 {
        self.hole_radius_px
    }

    /// Largest |q| inside the aperture, in inverse pixels.
    pub fn q_max(&self) -> f64 {
        self.aperture_radius_px / self.side as f64
    }

    pub fn q(&self, pixel: usize) -> [f64; 2] {
        self.q[pixel]
    }

    pub fn q_coords(&self) -> &[[f64; 2]] {
        &self.q
    }

    pub fn class(&self, pixel: usize) -> PixelClass {
        self.mask[pixel]
    }

    pub fn mask(&self) -> &[PixelClass] {
        &self.mask
    }

    pub fn is_good(&self, pixel: usize) -> bool {
        self.mask[pixel] == PixelClass::Good
    }

    /// Pixel indices of all GOOD pixels, ascending.
    pub fn good_pixels(&self) -> &[u32] {
        &self.good
    }

    /// Position of `pixel` within [`Self::good_pixels`], or [`NOT_GOOD`].
    pub fn good_position(&self, pixel: usize) -> u32 {
        self.good_pos[pixel]
    }

    pub fn count(&self, class: PixelClass) -> usize {
        self.mask.iter().filter(|&&m| m == class).count()
    }

    /// Radial distance of a pixel from the center, in pixels.
    pub fn radius_px(&self, pixel: usize) -> f64 {
        let [qx, qy] = self.q[pixel];
        qx.hypot(qy) * self.side as f64
    }

    /// Continuous lattice position (col, row) of a q-coordinate.
    pub fn lattice_position(&self, q: [f64; 2]) -> (f64, f64) {
        let n = self.side as f64;
        (self.center + q[0] * n, self.center + q[1] * n)
    }

    /// Nearest lattice pixel to `q`, or `None` when it falls off the array.
    pub fn nearest_pixel(&self, q: [f64; 2]) -> Option<usize> {
        let (x, y) = self.lattice_position(q);
        let col = x.round();
        let row = y.round();
        let max = (self.side - 1) as f64;
        if col < 0.0 || row < 0.0 || col > max || row > max {
            return None;
        }
        Some(row as usize * self.side + col as usize)
    }

    /// Pixel index of the point reflection of `pixel` about the center.
    pub fn mirror(&self, pixel: usize) -> usize {
        self.n_pixels() - 1 - pixel
    }
}

/// Rotates `q` counter-clockwise by `theta` radians.
#[inline]
pub fn rotate_coord(q: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * q[0] - s * q[1], s * q[0] + c * q[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn full_size_detector_counts_match_brute_force() {
        let g = DetectorGeometry::new(185, 92.5, 4.0).unwrap();
        let c = 92.0;
        let mut good = 0;
        for i in 0..185 {
            for j in 0..185 {
                let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                if (4.0..92.5).contains(&r) {
                    good += 1;
                }
            }
        }
        assert_eq!(g.count(PixelClass::Good), good);
        assert_eq!(g.good_pixels().len(), good);
        let total = g.count(PixelClass::Good) + g.count(PixelClass::Hole) + g.count(PixelClass::Corner);
        assert_eq!(total, 185 * 185);
        assert_eq!(g.class(92 * 185 + 92), PixelClass::Hole);
        assert_eq!(g.class(0), PixelClass::Corner);
    }

    #[test]
    fn tiny_detector_center_is_good() {
        let g = DetectorGeometry::new(3, 1.5, 0.0).unwrap();
        assert_eq!(g.class(4), PixelClass::Good);
        assert_eq!(g.q(4), [0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DetectorGeometry::new(184, 92.0, 4.0).is_err());
        assert!(DetectorGeometry::new(185, 4.0, 4.0).is_err());
        assert!(DetectorGeometry::new(185, 93.0, 4.0).is_err());
        assert!(DetectorGeometry::new(1, 0.5, 0.0).is_err());
    }

    #[test]
    fn mask_is_centrosymmetric() {
        let g = DetectorGeometry::new(45, 22.0, 3.3).unwrap();
        for p in 0..g.n_pixels() {
            assert_eq!(g.class(p), g.class(g.mirror(p)));
            let [a, b] = g.q(p);
            let [c, d] = g.q(g.mirror(p));
            assert_eq!(a, -c);
            assert_eq!(b, -d);
        }
    }

    #[test]
    fn rotate_examples() {
        let r = rotate_coord([1.0, 0.0], PI / 2.0);
        assert!(r[0].abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        assert_eq!(rotate_coord([0.3, 0.2], 0.0), [0.3, 0.2]);
        let (t, q) = (0.7f64, [0.3, -0.4]);
        let m = [[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        let expect = [m[0][0] * q[0] + m[0][1] * q[1], m[1][0] * q[0] + m[1][1] * q[1]];
        let got = rotate_coord(q, t);
        assert!((got[0] - expect[0]).abs() < 1e-15 && (got[1] - expect[1]).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_round_trips(x in -1.0f64..1.0, y in -1.0f64..1.0, t in -10.0f64..10.0) {
            let back = rotate_coord(rotate_coord([x, y], t), -t);
            prop_assert!((back[0] - x).abs() < 1e-12 && (back[1] - y).abs() < 1e-12);
            let r = rotate_coord([x, y], t);
            prop_assert!((r[0].hypot(r[1]) - x.hypot(y)).abs() < 1e-12);
        }
    }
}
