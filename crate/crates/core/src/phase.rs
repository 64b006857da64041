//! Support estimation and difference-map phase retrieval.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::CenteredFft2;
use crate::forward::ComplexModel;
use crate::geometry::DetectorGeometry;
use crate::object::DensityGrid;

/// Largest support area, as a fraction of the grid, that still oversamples the object.
pub const MAX_SUPPORT_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportMask {
    side: usize,
    pub mask: Vec<bool>,
}

impl SupportMask {
    pub fn new(side: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != side * side {
            return Err(Error::invalid("support mask does not match side"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("support mask is empty"));
        }
        Ok(Self { side, mask })
    }

    /// Disc of `radius` pixels about `center` (col, row).
    pub fn disc(side: usize, center: (f64, f64), radius: f64) -> Result<Self> {
        let mut mask = vec![false; side * side];
        for r in 0..side {
            for c in 0..side {
                let (dx, dy) = (c as f64 - center.0, r as f64 - center.1);
                mask[r * side + c] = dx * dx + dy * dy <= radius * radius;
            }
        }
        Self::new(side, mask)
    }

    /// Pixels where `density` exceeds `threshold`, grown by `grow` pixels.
    pub fn from_density(density: &DensityGrid, threshold: f64, grow: usize) -> Result<Self> {
        let side = density.side();
        let mut mask: Vec<bool> = density.data.iter().map(|&v| v > threshold).collect();
        for _ in 0..grow {
            mask = dilate(&mask, side);
        }
        Self::new(side, mask)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn area_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn n_components(&self) -> usize {
        let n = self.side;
        let mut label = vec![false; n * n];
        let mut count = 0;
        for start in 0..n * n {
            if !self.mask[start] || label[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            label[start] = true;
            while let Some(i) = stack.pop() {
                for j in neighbors4(i, n) {
                    if self.mask[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }
}

/// Width (standard deviation, pixels) of the smoothing applied to the autocorrelation modulus.
const SUPPORT_SMOOTHING_PX: f64 = 2.0;

/// Separable Gaussian smoothing with the kernel truncated at three standard deviations.
fn gaussian_blur(values: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let reach = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let pass = |src: &[f64], step: usize, stride: usize| {
        let mut out = vec![0.0; n * n];
        for line in 0..n {
            for k in 0..n {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let m = k as isize + j as isize - reach;
                    if m >= 0 && (m as usize) < n {
                        acc += w * src[line * stride + m as usize * step];
                    }
                }
                out[line * stride + k * step] = acc / total;
            }
        }
        out
    };
    let rows = pass(values, 1, n);
    pass(&rows, n, 1)
}

fn neighbors4(i: usize, n: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / n, i % n);
    [
        (r > 0).then(|| i - n),
        (r + 1 < n).then(|| i + n),
        (c > 0).then(|| i - 1),
        (c + 1 < n).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

fn dilate(mask: &[bool], n: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for j in neighbors8(i, n) {
                out[j] = true;
            }
        }
    }
    out
}

fn erode(mask: &[bool], n: usize) -> Vec<bool> {
    let inv: Vec<bool> = mask.iter().map(|&m| !m).collect();
    dilate(&inv, n).into_iter().map(|m| !m).collect()
}

fn neighbors8(i: usize, n: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((i / n) as isize, (i % n) as isize);
    let n = n as isize;
    (-1..=1)
        .flat_map(move |dr| (-1..=1).map(move |dc| (r + dr, c + dc)))
        .filter(move |&(rr, cc)| rr >= 0 && cc >= 0 && rr < n && cc < n)
        .map(move |(rr, cc)| (rr * n + cc) as usize)
}

/// Support from the autocorrelation of the band-limited data: inverse transform
/// of `|F|^2` restricted to reliable GOOD pixels with `q_band[0] <= |q|/q_max <= q_band[1]`.
/// Its modulus, smoothed over a few pixels so the ringing of the band-passed
/// autocorrelation merges into one region, is thresholded at `threshold_frac` of the
/// way from its median (the noise floor away from the object) to its maximum, then
/// morphologically closed and reduced to the connected region around the center.
pub fn estimate_support(
    model: &ComplexModel,
    geom: &DetectorGeometry,
    q_band: [f64; 2],
    threshold_frac: f64,
) -> Result<SupportMask> {
    if model.side() != geom.side() {
        return Err(Error::invalid("model does not match detector"));
    }
    if !(0.0 <= q_band[0] && q_band[0] < q_band[1] && q_band[1] <= 1.0) {
        return Err(Error::invalid(format!(
            "q band {q_band:?} must satisfy 0 <= lo < hi <= 1"
        )));
    }
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        // a zero threshold keeps the whole field of view
        return Err(Error::invalid("threshold fraction must lie in (0, 1)"));
    }
    let n = geom.side();
    let q_max = geom.q_max();
    let mut power = vec![Complex64::new(0.0, 0.0); n * n];
    for &p in geom.good_pixels() {
        let p = p as usize;
        let qf = geom.radius_px(p) / n as f64 / q_max;
        if model.reliable[p] && qf >= q_band[0] && qf <= q_band[1] {
            power[p] = Complex64::new(model.grid[p].norm_sqr(), 0.0);
        }
    }
    CenteredFft2::new(n).inverse(&mut power);
    let modulus: Vec<f64> = power.iter().map(|v| v.norm()).collect();
    let smooth = gaussian_blur(&modulus, n, SUPPORT_SMOOTHING_PX);
    let max = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = smooth.clone();
    let mid = sorted.len() / 2;
    let (_, &mut floor, _) = sorted.select_nth_unstable_by(mid, f64::total_cmp);
    if !(max > floor) {
        return Err(Error::numerical("band-limited autocorrelation is flat"));
    }
    let level = floor + threshold_frac * (max - floor);
    let raw: Vec<bool> = smooth.iter().map(|&v| v >= level).collect();
    let closed = erode(&dilate(&raw, n), n);
    // keep the region connected to the center
    let center = (n / 2) * n + n / 2;
    let mut mask = vec![false; n * n];
    if closed[center] {
        let mut stack = vec![center];
        mask[center] = true;
        while let Some(i) = stack.pop() {
            for j in neighbors4(i, n) {
                if closed[j] && !mask[j] {
                    mask[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    let support = SupportMask::new(n, mask)?;
    let area = support.area_fraction();
    if area >= MAX_SUPPORT_FRACTION {
        return Err(Error::numerical(format!(
            "estimated support covers {:.1}% of the grid (limit {:.0}%)",
            100.0 * area,
            100.0 * MAX_SUPPORT_FRACTION
        )));
    }
    Ok(support)
}

/// Fourier-space data the difference map must honor.
#[derive(Debug, Clone)]
pub enum FourierConstraint {
    /// Complex values at reliable pixels; unreliable pixels are free.
    Complex(ComplexModel),
    /// Moduli at pixels flagged `known`; everything else is free.
    Magnitude { magnitudes: Vec<f64>, known: Vec<bool> },
}

impl FourierConstraint {
    fn side_squared(&self) -> usize {
        match self {
            FourierConstraint::Complex(m) => m.grid.len(),
            FourierConstraint::Magnitude { magnitudes, .. } => magnitudes.len(),
        }
    }

    fn project(&self, f: &mut [Complex64]) {
        match self {
            FourierConstraint::Complex(m) => {
                for ((v, &k), &r) in f.iter_mut().zip(&m.grid).zip(&m.reliable) {
                    if r {
                        *v = k;
                    }
                }
            }
            FourierConstraint::Magnitude { magnitudes, known } => {
                for ((v, &a), &k) in f.iter_mut().zip(magnitudes).zip(known) {
                    if k {
                        let norm = v.norm();
                        *v = if norm > 0.0 {
                            *v * (a / norm)
                        } else {
                            Complex64::new(a, 0.0)
                        };
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub beta: f64,
    pub n_iter: usize,
    pub seed: u64,
    /// Support band as fractions of `q_max`.
    pub q_band: [f64; 2],
    pub threshold_frac: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            n_iter: 500,
            seed: 0,
            q_band: [0.1, 1.0],
            threshold_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    /// Support-projected density at the iterate with the smallest error.
    pub density: DensityGrid,
    /// Fourier transform of `density`, with the constrained complex values
    /// restored at reliable pixels in complex mode.
    pub model: ComplexModel,
    pub errors: Vec<f64>,
    pub best_iteration: usize,
    pub diverged: bool,
}

fn support_project(x: &[Complex64], support: &SupportMask, out: &mut [Complex64]) {
    for ((o, v), &s) in out.iter_mut().zip(x).zip(&support.mask) {
        *o = if s {
            Complex64::new(v.re.max(0.0), 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
}

/// Difference map `x <- x + beta [P_S(2 P_M x - x) - P_M x]`, where `P_M` imposes the
/// Fourier constraint and `P_S` zeroes the density outside the support and clips
/// negatives. The error of an iterate is `||P_S(2 P_M x - x) - P_M x||`, the size of
/// the step; the returned density is `P_S(P_M x)` at the iterate where it was smallest.
/// Stops early, flagging divergence, once the error has stayed above ten times its
/// minimum for 50 consecutive iterations.
pub fn difference_map(
    known: &FourierConstraint,
    support: &SupportMask,
    beta: f64,
    n_iter: usize,
    seed: u64,
) -> Result<PhaseResult> {
    let n = support.side();
    if known.side_squared() != n * n {
        return Err(Error::invalid("Fourier constraint does not match support"));
    }
    if n_iter == 0 {
        return Err(Error::invalid("difference map needs at least one iteration"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("beta must lie in (0, 1]"));
    }
    let mut fft = CenteredFft2::new(n);
    let mut x = match known {
        FourierConstraint::Complex(m) => {
            let mut f: Vec<Complex64> = m
                .grid
                .iter()
                .zip(&m.reliable)
                .map(|(&v, &r)| if r { v } else { Complex64::new(0.0, 0.0) })
                .collect();
            fft.inverse(&mut f);
            f
        }
        FourierConstraint::Magnitude { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            support
                .mask
                .iter()
                .map(|&s| Complex64::new(if s { rng.random::<f64>() } else { 0.0 }, 0.0))
                .collect()
        }
    };
    let mut pm = vec![Complex64::new(0.0, 0.0); n * n];
    let mut reflect = vec![Complex64::new(0.0, 0.0); n * n];
    let mut ps = vec![Complex64::new(0.0, 0.0); n * n];
    let mut errors = Vec::with_capacity(n_iter);
    let mut best: Option<(f64, usize, Vec<Complex64>)> = None;
    let mut above = 0;
    let mut diverged = false;
    for it in 0..n_iter {
        pm.copy_from_slice(&x);
        fft.forward(&mut pm);
        known.project(&mut pm);
        fft.inverse(&mut pm);
        for ((r, &m), &v) in reflect.iter_mut().zip(&pm).zip(&x) {
            *r = 2.0 * m - v;
        }
        support_project(&reflect, support, &mut ps);
        let mut err = 0.0;
        for i in 0..n * n {
            let d = ps[i] - pm[i];
            err += d.norm_sqr();
            x[i] += beta * d;
        }
        let err = err.sqrt();
        if !err.is_finite() {
            return Err(Error::numerical("difference map produced a non-finite iterate"));
        }
        errors.push(err);
        // pm holds P_M of the iterate this error belongs to
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, it, pm.clone()));
        }
        let min = best.as_ref().map(|b| b.0).unwrap_or(err);
        if err > 10.0 * min {
            above += 1;
            if above >= 50 {
                log::warn!("difference map diverging at iteration {it}; keeping iteration with smallest error");
                diverged = true;
                break;
            }
        } else {
            above = 0;
        }
    }
    let (_, best_iteration, best_pm) = best.expect("at least one iteration ran");
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    support_project(&best_pm, support, &mut out);
    let density = DensityGrid::from_vec(n, out.iter().map(|v| v.re).collect())?;
    fft.forward(&mut out);
    if let FourierConstraint::Complex(m) = known {
        for ((v, &k), &r) in out.iter_mut().zip(&m.grid).zip(&m.reliable) {
            if r {
                *v = k;
            }
        }
    }
    let scale = match known {
        FourierConstraint::Complex(m) => m.scale,
        FourierConstraint::Magnitude { .. } => 1.0,
    };
    let model = ComplexModel::new(n, out, vec![true; n * n], scale)?;
    Ok(PhaseResult {
        density,
        model,
        errors,
        best_iteration,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{density_to_model, random_blob_object, DensityGrid, TargetSpec};

    fn disc_density(side: usize, radius: f64) -> DensityGrid {
        let mut d = DensityGrid::zeros(side);
        let c = d.center();
        d.add_sphere((c, c), radius, 1.0, 4);
        d
    }

    #[test]
    fn closing_and_components() {
        let n = 9;
        let mut m = vec![false; n * n];
        m[4 * n + 3] = true;
        m[4 * n + 5] = true;
        let s = SupportMask::new(n, m.clone()).unwrap();
        assert_eq!(s.n_components(), 2);
        let closed = erode(&dilate(&m, n), n);
        assert!(closed[4 * n + 4]);
        assert!(SupportMask::new(n, vec![false; n * n]).is_err());
    }

    #[test]
    fn support_of_disc_covers_autocorrelation_core() {
        let geom = DetectorGeometry::new(97, 48.0, 2.0).unwrap();
        let model = density_to_model(&disc_density(97, 6.0));
        let s = estimate_support(&model, &geom, [0.0, 1.0], 0.05).unwrap();
        // the disc autocorrelation is positive out to twice the radius; its core is certainly kept
        let core = SupportMask::disc(97, (48.0, 48.0), 8.0).unwrap();
        assert!(core.mask.iter().zip(&s.mask).all(|(&c, &m)| !c || m));
        assert!(s.area_fraction() < MAX_SUPPORT_FRACTION);
        assert_eq!(s.n_components(), 1);
        assert_eq!(s, estimate_support(&model, &geom, [0.0, 1.0], 0.05).unwrap());
        assert!(estimate_support(&model, &geom, [0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn full_data_is_reproduced_after_one_iteration() {
        let d = disc_density(41, 5.0);
        let model = density_to_model(&d);
        let support = SupportMask::from_density(&d, 1e-9, 1).unwrap();
        let r = difference_map(&FourierConstraint::Complex(model.clone()), &support, 0.7, 1, 0).unwrap();
        for (a, b) in r.density.data.iter().zip(&d.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fills_missing_low_q() {
        let side = 61;
        let d = disc_density(side, 7.0);
        let geom = DetectorGeometry::new(side, 30.0, 4.0).unwrap();
        let truth = density_to_model(&d);
        let mut known = truth.clone();
        let mut hole = Vec::new();
        for p in 0..geom.n_pixels() {
            if geom.radius_px(p) < 4.0 {
                known.grid[p] = Complex64::new(0.0, 0.0);
                known.reliable[p] = false;
                hole.push(p);
            }
        }
        let support = SupportMask::disc(side, (30.0, 30.0), 8.0).unwrap();
        let r = difference_map(&FourierConstraint::Complex(known), &support, 0.7, 200, 0).unwrap();
        let num: f64 = hole.iter().map(|&p| (r.model.grid[p] - truth.grid[p]).norm_sqr()).sum();
        let den: f64 = hole.iter().map(|&p| truth.grid[p].norm_sqr()).sum();
        assert!((num / den).sqrt() <= 0.02, "{}", (num / den).sqrt());
        // output lives on the support and is non-negative
        for (v, &s) in r.density.data.iter().zip(&support.mask) {
            assert!(*v >= 0.0 && (s || *v == 0.0));
        }
    }

    #[test]
    fn magnitude_mode_up_to_twin() {
        let side = 63;
        let d = random_blob_object(&TargetSpec {
            side_px: side,
            n_blobs: 6,
            blob_radius_px: (1.5, 3.0),
            extent_px: 7.0,
            density: 1.0,
            seed: 12,
        })
        .unwrap();
        let truth = density_to_model(&d);
        let magnitudes = truth.grid.iter().map(|v| v.norm()).collect();
        let support = SupportMask::from_density(&d, 1e-3, 2).unwrap();
        let r = difference_map(
            &FourierConstraint::Magnitude {
                magnitudes,
                known: vec![true; side * side],
            },
            &support,
            0.7,
            500,
            3,
        )
        .unwrap();
        // moduli fix the density only up to the twin and a translation
        let twin = DensityGrid::from_vec(side, r.density.data.iter().rev().copied().collect()).unwrap();
        let mut c = f64::NEG_INFINITY;
        for cand in [&r.density, &twin] {
            for dy in -15i64..=15 {
                for dx in -15i64..=15 {
                    let mut shifted = DensityGrid::zeros(side);
                    for row in 0..side as i64 {
                        for col in 0..side as i64 {
                            let (sr, sc) = ((row - dy).rem_euclid(side as i64), (col - dx).rem_euclid(side as i64));
                            shifted.data[(row * side as i64 + col) as usize] =
                                cand.data[(sr * side as i64 + sc) as usize];
                        }
                    }
                    c = c.max(crate::metrics::masked_correlation(&shifted, &d, None).unwrap());
                }
            }
        }
        let mut f: Vec<Complex64> = r.density.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        CenteredFft2::new(side).forward(&mut f);
        let num: f64 = f
            .iter()
            .zip(&truth.grid)
            .map(|(a, b)| (a.norm() - b.norm()).powi(2))
            .sum();
        let den: f64 = truth.grid.iter().map(|b| b.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-2, "{}", (num / den).sqrt());
        assert!(c > 0.95, "{c}");
    }
}
