//! Composite far-field intensity of a target plus spherical reference.
//!
//! Per pixel the detector sees `|F_o(q) + F_s(|q|, D) exp(2 pi i q.t)|^2` times a
//! global fluence factor, where `F_s` is the (real) form factor of a uniform
//! sphere of diameter `D`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_coord, DetectorGeometry};
use crate::simulate::LatentParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereReference {
    pub diameter_px: f64,
    /// Electron-density ratio of the reference material to the target material.
    pub contrast: f64,
}

impl SphereReference {
    pub fn new(diameter_px: f64, contrast: f64) -> Result<Self> {
        if !(diameter_px > 0.0) || !(contrast > 0.0) {
            return Err(Error::invalid(format!(
                "sphere reference needs positive diameter and contrast, got D={diameter_px}, contrast={contrast}"
            )));
        }
        Ok(Self { diameter_px, contrast })
    }

    pub fn volume(&self) -> f64 {
        PI / 6.0 * self.diameter_px.powi(3)
    }
}

/// Fourier amplitude of a uniform sphere, `contrast * V(D) * 3 (sin x - x cos x) / x^3`
/// with `x = pi |q| D`.
pub fn sphere_ft(q_mag: f64, reference: &SphereReference) -> f64 {
    sphere_amplitude(q_mag, reference.diameter_px, reference.contrast)
}

#[inline]
pub fn sphere_amplitude(q_mag: f64, diameter_px: f64, contrast: f64) -> f64 {
    let volume = PI / 6.0 * diameter_px * diameter_px * diameter_px;
    contrast * volume * sphere_shape(PI * q_mag.abs() * diameter_px)
}

/// Normalized sphere form factor `3 (sin x - x cos x) / x^3`, equal to 1 at x = 0.
#[inline]
pub fn sphere_shape(x: f64) -> f64 {
    if x.abs() < 0.05 {
        let x2 = x * x;
        1.0 - x2 / 10.0 + x2 * x2 / 280.0 - x2 * x2 * x2 / 15120.0
    } else {
        let (s, c) = x.sin_cos();
        3.0 * (s - x * c) / (x * x * x)
    }
}

/// Unscaled intensity of one pixel, `|F_o + F_s(|q|, D) e^{2 pi i q.t}|^2`.
pub fn composite_intensity(f_o: Complex64, q: [f64; 2], diameter_px: f64, t: [f64; 2], ref_contrast: f64) -> f64 {
    let fs = sphere_amplitude(q[0].hypot(q[1]), diameter_px, ref_contrast);
    let ramp = Complex64::from_polar(fs, 2.0 * PI * (q[0] * t[0] + q[1] * t[1]));
    (f_o + ramp).norm_sqr()
}

/// Complex Fourier model of the target on the detector lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexModel {
    side: usize,
    pub grid: Vec<Complex64>,
    pub reliable: Vec<bool>,
    /// Global fluence factor: rendered photons per unit |F|^2.
    pub scale: f64,
}

impl ComplexModel {
    pub fn new(side: usize, grid: Vec<Complex64>, reliable: Vec<bool>, scale: f64) -> Result<Self> {
        if grid.len() != side * side || reliable.len() != side * side {
            return Err(Error::invalid(format!(
                "model grid of {} values / {} flags does not match side {side}",
                grid.len(),
                reliable.len()
            )));
        }
        Ok(Self {
            side,
            grid,
            reliable,
            scale,
        })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            grid: vec![Complex64::new(0.0, 0.0); side * side],
            reliable: vec![true; side * side],
            scale: 1.0,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Clears the reliability flag of every pixel that is not GOOD in `geom`.
    pub fn mask_to(&mut self, geom: &DetectorGeometry) {
        for (p, flag) in self.reliable.iter_mut().enumerate() {
            if !geom.is_good(p) {
                *flag = false;
            }
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Bilinear interpolation (real and imaginary parts separately) at a continuous
    /// q-coordinate. Lattice neighbors that fall off the array count as zero.
    #[inline]
    pub fn sample(&self, q: [f64; 2]) -> Complex64 {
        let n = self.side;
        let c = (n - 1) as f64 / 2.0;
        let x = c + q[0] * n as f64;
        let y = c + q[1] * n as f64;
        bilinear(&self.grid, n, x, y)
    }
}

#[inline]
pub(crate) fn bilinear<T>(grid: &[T], side: usize, x: f64, y: f64) -> T
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let max = side as isize - 1;
    let (ix, iy) = (x0 as isize, y0 as isize);
    if ix < -1 || iy < -1 || ix > max || iy > max {
        return T::default();
    }
    let at = |r: isize, c: isize| -> T {
        if r < 0 || c < 0 || r > max || c > max {
            T::default()
        } else {
            grid[r as usize * side + c as usize]
        }
    };
    at(iy, ix) * ((1.0 - fx) * (1.0 - fy))
        + at(iy, ix + 1) * (fx * (1.0 - fy))
        + at(iy + 1, ix) * ((1.0 - fx) * fy)
        + at(iy + 1, ix + 1) * (fx * fy)
}

/// Expected photon image for one frame: GOOD pixels get
/// `scale * |F_o(R_{-theta} q) + F_s(|q|, D) e^{2 pi i q.t}|^2`, everything else 0.
/// With `reference = None` only the target term is rendered.
pub fn render_frame(
    model: &ComplexModel,
    geom: &DetectorGeometry,
    latent: &LatentParams,
    reference: Option<&SphereReference>,
) -> Result<Vec<f64>> {
    if model.side() != geom.side() {
        return Err(Error::invalid(format!(
            "model side {} does not match detector side {}",
            model.side(),
            geom.side()
        )));
    }
    let mut out = vec![0.0; geom.n_pixels()];
    for &p in geom.good_pixels() {
        let q = geom.q(p as usize);
        let f_o = model.sample(rotate_coord(q, -latent.theta));
        let total = match reference {
            Some(r) => {
                let fs = sphere_amplitude(q[0].hypot(q[1]), latent.diameter_px, r.contrast);
                let phase = 2.0 * PI * (q[0] * latent.shift_px[0] + q[1] * latent.shift_px[1]);
                f_o + Complex64::from_polar(fs, phase)
            }
            None => f_o,
        };
        out[p as usize] = total.norm_sqr() * model.scale;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{density_to_model, DensityGrid};

    fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn sphere_at_origin_is_weighted_volume() {
        let r = SphereReference::new(7.0, 11.0).unwrap();
        let expect = 11.0 * PI / 6.0 * 343.0;
        assert!((sphere_ft(0.0, &r) - expect).abs() < 1e-10);
        // continuity through the series branch
        let x = 0.05 / (PI * 7.0);
        let a = sphere_ft(x * 0.999_999, &r);
        let b = sphere_ft(x * 1.000_001, &r);
        assert!((a - b).abs() / expect < 1e-9);
    }

    #[test]
    fn sphere_first_zero() {
        let root = bisect(PI, 1.5 * PI, |x| x.sin() - x * x.cos());
        assert!((root - 4.4934).abs() < 1e-3);
        let d = 7.0;
        let r = SphereReference::new(d, 11.0).unwrap();
        let q0 = root / (PI * d);
        assert!(sphere_ft(q0, &r).abs() < 1e-9 * sphere_ft(0.0, &r));
        assert!(sphere_ft(q0 * 0.99, &r) > 0.0 && sphere_ft(q0 * 1.01, &r) < 0.0);
        assert_eq!(sphere_ft(0.1, &r), sphere_ft(-0.1, &r));
    }

    #[test]
    fn composite_examples() {
        let q = [0.05, 0.0];
        let fs = sphere_amplitude(0.05, 7.0, 11.0);
        let i0 = composite_intensity(Complex64::new(0.0, 0.0), q, 7.0, [3.0, 1.0], 11.0);
        assert!((i0 - fs * fs).abs() < 1e-9 * fs * fs);
        let f = Complex64::new(3.0, 4.0);
        let i1 = composite_intensity(f, q, 7.0, [0.0, 0.0], 11.0);
        assert!((i1 - (f + fs).norm_sqr()).abs() < 1e-9);
        // F_o = 3+4i, F_s = 2, q.t = 1/4 -> |3 + 6i|^2 = 45; pick D so that F_s = 2
        let d = 1.0;
        let contrast = 2.0 / (PI / 6.0 * sphere_shape(PI * 0.25 * d));
        let i2 = composite_intensity(f, [0.25, 0.0], d, [1.0, 0.0], contrast);
        assert!((i2 - 45.0).abs() < 1e-9);
    }

    #[test]
    fn phase_form_identity() {
        let q: [f64; 2] = [0.11, -0.07];
        let t = [0.8, 1.3];
        let f = Complex64::new(-12.0, 30.0);
        let fs = sphere_amplitude(q[0].hypot(q[1]), 6.5, 11.0);
        let phi = 2.0 * PI * (q[0] * t[0] + q[1] * t[1]) - f.arg();
        let alt = f.norm_sqr() + fs * fs + 2.0 * f.norm() * fs * phi.cos();
        let direct = composite_intensity(f, q, 6.5, t, 11.0);
        assert!((alt - direct).abs() < 1e-10 * direct.max(1.0));
    }

    fn test_density(side: usize) -> DensityGrid {
        let mut d = DensityGrid::zeros(side);
        let c = (side / 2) as isize;
        for (dr, dc, v) in [(0, 0, 2.0), (1, 2, 1.0), (-3, 1, 0.5), (2, -2, 1.5)] {
            d.data[((c + dr) as usize) * side + (c + dc) as usize] = v;
        }
        d
    }

    #[test]
    fn render_matches_pixelwise_and_reference_only() {
        let geom = DetectorGeometry::new(21, 10.0, 1.5).unwrap();
        let model = density_to_model(&test_density(21)).with_scale(0.5);
        let latent = LatentParams {
            theta: 0.0,
            diameter_px: 7.0,
            shift_px: [0.0, 0.0],
        };
        let r = SphereReference::new(7.0, 11.0).unwrap();
        let img = render_frame(&model, &geom, &latent, Some(&r)).unwrap();
        for p in 0..geom.n_pixels() {
            if geom.is_good(p) {
                let e = 0.5 * composite_intensity(model.grid[p], geom.q(p), 7.0, [0.0, 0.0], 11.0);
                assert!((img[p] - e).abs() < 1e-9 * e.max(1.0));
            } else {
                assert_eq!(img[p], 0.0);
            }
        }
        let zero = ComplexModel::zeros(21);
        let img = render_frame(&zero, &geom, &latent, Some(&r)).unwrap();
        for &p in geom.good_pixels() {
            let fs = sphere_ft(geom.radius_px(p as usize) / 21.0, &r);
            assert!((img[p as usize] - fs * fs).abs() < 1e-9 * fs * fs);
        }
    }

    #[test]
    fn render_rotation_equals_rotated_density() {
        // rotating by 90 degrees is exact on the lattice
        let side = 21;
        let geom = DetectorGeometry::new(side, 10.0, 0.0).unwrap();
        let dens = test_density(side);
        let mut rotated = DensityGrid::zeros(side);
        let c = (side / 2) as isize;
        for r in 0..side as isize {
            for col in 0..side as isize {
                // rho'(x, y) = rho(R_{-90} (x, y)) = rho(y, -x)
                let (x, y) = (col - c, r - c);
                let (sx, sy) = (y, -x);
                rotated.data[(r as usize) * side + col as usize] =
                    dens.data[((sy + c) as usize) * side + (sx + c) as usize];
            }
        }
        let latent = LatentParams {
            theta: PI / 2.0,
            diameter_px: 6.0,
            shift_px: [0.7, -0.4],
        };
        let r = SphereReference::new(6.0, 11.0).unwrap();
        let a = render_frame(&density_to_model(&dens), &geom, &latent, Some(&r)).unwrap();
        let direct = LatentParams { theta: 0.0, ..latent };
        let b = render_frame(&density_to_model(&rotated), &geom, &direct, Some(&r)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8 * y.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn render_friedel_and_nonnegative() {
        let side = 21;
        let geom = DetectorGeometry::new(side, 10.0, 1.0).unwrap();
        let model = density_to_model(&test_density(side));
        let latent = LatentParams {
            theta: 0.3,
            diameter_px: 7.0,
            shift_px: [0.0, 0.0],
        };
        let r = SphereReference::new(7.0, 11.0).unwrap();
        let img = render_frame(&model, &geom, &latent, Some(&r)).unwrap();
        for p in 0..geom.n_pixels() {
            assert!(img[p] >= 0.0);
            let m = geom.mirror(p);
            assert!((img[p] - img[m]).abs() < 1e-8 * img[p].max(1.0));
        }
    }

    #[test]
    fn render_rejects_size_mismatch() {
        let geom = DetectorGeometry::new(21, 10.0, 1.0).unwrap();
        let latent = LatentParams {
            theta: 0.0,
            diameter_px: 7.0,
            shift_px: [0.0, 0.0],
        };
        assert!(render_frame(&ComplexModel::zeros(23), &geom, &latent, None).is_err());
    }
}
