//! Fourier ring correlation, global alignment and latent-error statistics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::CenteredFft2;
use crate::forward::ComplexModel;
use crate::geometry::{rotate_coord, DetectorGeometry};
use crate::object::{density_to_model, model_to_density, DensityGrid};
use crate::simulate::LatentParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrcCurve {
    /// Ring centers in inverse pixels.
    pub q: Vec<f64>,
    pub values: Vec<f64>,
    /// Ring width in inverse pixels.
    pub width: f64,
    pub pixel_counts: Vec<usize>,
    /// Detector edge, reported when the curve never drops below one half.
    pub q_max: f64,
    /// Side of the lattice, to convert `q` into pixel radii.
    pub side: usize,
}

impl FrcCurve {
    pub fn radius_px(&self) -> Vec<f64> {
        self.q.iter().map(|q| q * self.side as f64).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// FRC over GOOD pixels reliable in both models. Ring `k` holds pixels with
/// `round(r / width) == k`; rings with no pixels or zero power are omitted.
pub fn frc(a: &ComplexModel, b: &ComplexModel, geom: &DetectorGeometry, ring_width_px: f64) -> Result<FrcCurve> {
    if a.side() != b.side() || a.side() != geom.side() {
        return Err(Error::invalid("FRC needs models of equal size matching the detector"));
    }
    if !(ring_width_px > 0.0) {
        return Err(Error::invalid("ring width must be positive"));
    }
    let n_rings = (geom.side() as f64 / ring_width_px).ceil() as usize + 2;
    let mut cross = vec![0.0; n_rings];
    let mut pa = vec![0.0; n_rings];
    let mut pb = vec![0.0; n_rings];
    let mut count = vec![0usize; n_rings];
    for &p in geom.good_pixels() {
        let p = p as usize;
        if !a.reliable[p] || !b.reliable[p] {
            continue;
        }
        let k = (geom.radius_px(p) / ring_width_px + 0.5).floor() as usize;
        let (fa, fb) = (a.grid[p], b.grid[p]);
        cross[k] += (fa * fb.conj()).re;
        pa[k] += fa.norm_sqr();
        pb[k] += fb.norm_sqr();
        count[k] += 1;
    }
    let side = geom.side();
    let mut curve = FrcCurve {
        q: Vec::new(),
        values: Vec::new(),
        width: ring_width_px / side as f64,
        pixel_counts: Vec::new(),
        q_max: geom.q_max(),
        side,
    };
    for k in 0..n_rings {
        if count[k] == 0 || pa[k] <= 0.0 || pb[k] <= 0.0 {
            if count[k] > 0 {
                log::debug!("FRC ring {k} has zero power; omitted");
            }
            continue;
        }
        curve.q.push(k as f64 * ring_width_px / side as f64);
        curve.values.push(cross[k] / (pa[k] * pb[k]).sqrt());
        curve.pixel_counts.push(count[k]);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossingKind {
    /// Interpolated crossing between two rings.
    Crossing,
    /// The curve never drops below 0.5; the detector edge is reported.
    NeverBelow,
    /// The first ring is already below 0.5; 0 is reported.
    StartsBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub q: f64,
    pub radius_px: f64,
    pub kind: CrossingKind,
}

/// First crossing of FRC = 0.5, linearly interpolated between ring centers.
pub fn resolution_at_half(curve: &FrcCurve) -> Result<Resolution> {
    if curve.is_empty() {
        return Err(Error::invalid("FRC curve is empty"));
    }
    let make = |q: f64, kind| Resolution {
        q,
        radius_px: q * curve.side as f64,
        kind,
    };
    if curve.values[0] < 0.5 {
        log::warn!("FRC starts below 0.5");
        return Ok(make(0.0, CrossingKind::StartsBelow));
    }
    for i in 1..curve.values.len() {
        let (v0, v1) = (curve.values[i - 1], curve.values[i]);
        if v1 < 0.5 {
            let f = (v0 - 0.5) / (v0 - v1);
            let q = curve.q[i - 1] + f * (curve.q[i] - curve.q[i - 1]);
            return Ok(make(q, CrossingKind::Crossing));
        }
    }
    Ok(make(curve.q_max, CrossingKind::NeverBelow))
}

/// `G(q) = F(R_{-alpha} q)`: the object rotated counter-clockwise by `alpha`.
pub fn rotate_model(model: &ComplexModel, geom: &DetectorGeometry, alpha: f64) -> ComplexModel {
    let mut out = model.clone();
    for p in 0..geom.n_pixels() {
        let src = rotate_coord(geom.q(p), -alpha);
        out.grid[p] = model.sample(src);
        out.reliable[p] = geom.nearest_pixel(src).is_some_and(|m| model.reliable[m]);
    }
    out
}

/// `G(q) = F(q) e^{2 pi i q.s}`: the object displaced by `s` pixels.
pub fn translate_model(model: &ComplexModel, geom: &DetectorGeometry, s: [f64; 2]) -> ComplexModel {
    let mut out = model.clone();
    for (p, v) in out.grid.iter_mut().enumerate() {
        let q = geom.q(p);
        *v *= Complex64::from_polar(1.0, 2.0 * PI * (q[0] * s[0] + q[1] * s[1]));
    }
    out
}

/// Rigid transform taking a reconstruction onto the truth: rotate by `theta`,
/// then displace by `shift`. `inverted` reports whether `theta` is closer to a
/// half-turn than to identity; for magnitude-only data that is the twin image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub theta: f64,
    pub shift: [f64; 2],
    pub inverted: bool,
    pub correlation: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            shift: [0.0, 0.0],
            inverted: false,
            correlation: 1.0,
        }
    }

    pub fn apply(&self, model: &ComplexModel, geom: &DetectorGeometry) -> ComplexModel {
        translate_model(&rotate_model(model, geom, self.theta), geom, self.shift)
    }
}

/// Candidate rotations `0, step, ...` below `limit` (radians).
pub fn rotation_candidates(step_deg: f64, limit_deg: f64) -> Vec<f64> {
    let n = (limit_deg / step_deg - 1e-9).ceil() as usize;
    (0..n).map(|i| (i as f64 * step_deg).to_radians()).collect()
}

struct Aligner<'a> {
    recon: &'a ComplexModel,
    truth: &'a ComplexModel,
    geom: &'a DetectorGeometry,
    allow_shift: bool,
}

impl Aligner<'_> {
    fn usable(&self, p: usize) -> bool {
        self.geom.is_good(p) && self.truth.reliable[p]
    }

    /// Best correlation over displacements for a fixed rotation.
    fn score(&self, alpha: f64) -> (f64, [f64; 2]) {
        let rot = rotate_model(self.recon, self.geom, alpha);
        let n = self.geom.side();
        let mut prod = vec![Complex64::new(0.0, 0.0); n * n];
        let (mut rot_norm, mut truth_norm) = (0.0, 0.0);
        for p in 0..n * n {
            if self.usable(p) && rot.reliable[p] {
                prod[p] = rot.grid[p] * self.truth.grid[p].conj();
                rot_norm += rot.grid[p].norm_sqr();
                truth_norm += self.truth.grid[p].norm_sqr();
            }
        }
        let norm = (rot_norm * truth_norm).sqrt();
        if norm == 0.0 {
            return (0.0, [0.0, 0.0]);
        }
        let corr_at = |s: [f64; 2]| -> f64 {
            let mut acc = 0.0;
            for (p, v) in prod.iter().enumerate() {
                if v.re != 0.0 || v.im != 0.0 {
                    let q = self.geom.q(p);
                    acc += (v * Complex64::from_polar(1.0, 2.0 * PI * (q[0] * s[0] + q[1] * s[1]))).re;
                }
            }
            acc / norm
        };
        if !self.allow_shift {
            return (corr_at([0.0, 0.0]), [0.0, 0.0]);
        }
        // c(s) for integer s, s measured from the central pixel
        let mut c = prod.clone();
        CenteredFft2::new(n).forward(&mut c);
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for (i, v) in c.iter().enumerate() {
            if v.re > best {
                best = v.re;
                at = i;
            }
        }
        let center = (n / 2) as isize;
        let (row, col) = ((at / n) as isize, (at % n) as isize);
        let get =
            |r: isize, cc: isize| c[(r.rem_euclid(n as isize) as usize) * n + cc.rem_euclid(n as isize) as usize].re;
        let parabola = |m: f64, z: f64, p: f64| {
            let d = m - 2.0 * z + p;
            if d < 0.0 {
                (0.5 * (m - p) / d).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let dx = parabola(get(row, col - 1), best, get(row, col + 1));
        let dy = parabola(get(row - 1, col), best, get(row + 1, col));
        let s_int = [(col - center) as f64, (row - center) as f64];
        let s_sub = [s_int[0] + dx, s_int[1] + dy];
        let (v_int, v_sub) = (corr_at(s_int), corr_at(s_sub));
        if v_sub >= v_int {
            (v_sub, s_sub)
        } else {
            (v_int, s_int)
        }
    }
}

/// Rigid alignment of a Fourier-space reconstruction onto the truth, maximizing
/// real-space correlation over the GOOD pixels that are reliable in both. The
/// exhaustive scan over `candidates` is refined by golden-section search to 0.1
/// degree. With `allow_shift` the best displacement is found for every rotation.
pub fn align_global(
    recon: &ComplexModel,
    truth: &ComplexModel,
    geom: &DetectorGeometry,
    candidates: &[f64],
    allow_shift: bool,
) -> Result<(ComplexModel, Alignment)> {
    if recon.side() != truth.side() || recon.side() != geom.side() {
        return Err(Error::invalid(
            "alignment needs models of equal size matching the detector",
        ));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no rotation candidates"));
    }
    let aligner = Aligner {
        recon,
        truth,
        geom,
        allow_shift,
    };
    let scores: Vec<(f64, [f64; 2])> = candidates.par_iter().map(|&a| aligner.score(a)).collect();
    let mut i_best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.0 > scores[i_best].0 {
            i_best = i;
        }
    }
    let mut best = (candidates[i_best], scores[i_best].0, scores[i_best].1);
    let step = if candidates.len() > 1 {
        let mut d = f64::INFINITY;
        for w in candidates.windows(2) {
            d = d.min((w[1] - w[0]).abs());
        }
        d
    } else {
        0.0
    };
    if step > 0.0 {
        let (mut lo, mut hi) = (best.0 - step, best.0 + step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let mut f1 = aligner.score(x1);
        let mut f2 = aligner.score(x2);
        while hi - lo > 0.1f64.to_radians() {
            if f1.0 >= f2.0 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = aligner.score(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = aligner.score(x2);
            }
        }
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f.0 > best.1 {
                best = (x, f.0, f.1);
            }
        }
    }
    let theta = best.0.rem_euclid(2.0 * PI);
    let alignment = Alignment {
        theta,
        shift: best.2,
        inverted: theta.cos() < 0.0,
        correlation: best.1,
    };
    Ok((alignment.apply(recon, geom), alignment))
}

/// Alignment of real-space densities (rotation, displacement; the twin is a
/// half-turn rotation in the plane and is reported through `inverted`).
pub fn align_densities(
    recon: &DensityGrid,
    truth: &DensityGrid,
    geom: &DetectorGeometry,
    candidates: &[f64],
) -> Result<(DensityGrid, Alignment)> {
    if recon.side() != truth.side() {
        return Err(Error::invalid("densities differ in size"));
    }
    let r = density_to_model(recon);
    let t = density_to_model(truth);
    let full = DetectorGeometry::new(geom.side(), geom.aperture_radius_px(), 0.0)?;
    let (aligned, a) = align_global(&r, &t, &full, candidates, true)?;
    Ok((model_to_density(&aligned), a))
}

/// Pearson correlation of two densities over `mask` (all pixels when `None`).
pub fn masked_correlation(a: &DensityGrid, b: &DensityGrid, mask: Option<&[bool]>) -> Result<f64> {
    if a.side() != b.side() || mask.is_some_and(|m| m.len() != a.data.len()) {
        return Err(Error::invalid("correlation inputs differ in size"));
    }
    let idx: Vec<usize> = (0..a.data.len()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    if idx.len() < 2 {
        return Err(Error::invalid("correlation mask selects fewer than two pixels"));
    }
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| a.data[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b.data[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (x, y) = (a.data[i] - ma, b.data[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Full width at half maximum of the strongest peak within `radius` of `center` (col, row),
/// from the azimuthally averaged profile about the peak's centroid.
pub fn peak_fwhm(density: &DensityGrid, center: (f64, f64), radius: f64) -> Result<f64> {
    let n = density.side();
    let inside = |r: usize, c: usize| {
        let (dx, dy) = (c as f64 - center.0, r as f64 - center.1);
        dx * dx + dy * dy <= radius * radius
    };
    let mut peak = (f64::NEG_INFINITY, 0usize);
    for r in 0..n {
        for c in 0..n {
            if inside(r, c) && density.data[r * n + c] > peak.0 {
                peak = (density.data[r * n + c], r * n + c);
            }
        }
    }
    if !(peak.0 > 0.0) {
        return Err(Error::invalid("no positive peak inside the search window"));
    }
    let half = 0.5 * peak.0;
    // centroid of the connected half-maximum region
    let mut seen = vec![false; n * n];
    let mut stack = vec![peak.1];
    seen[peak.1] = true;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    while let Some(i) = stack.pop() {
        let (r, c) = (i / n, i % n);
        let w = density.data[i];
        sw += w;
        sx += w * c as f64;
        sy += w * r as f64;
        let neighbors = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in neighbors {
            if nr < n && nc < n && inside(nr, nc) {
                let j = nr * n + nc;
                if !seen[j] && density.data[j] >= half {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    let (cx, cy) = (sx / sw, sy / sw);
    // azimuthal average in half-pixel shells, then the first half-maximum crossing
    let bin = 0.5;
    let n_bins = (radius / bin).ceil() as usize + 1;
    let mut sum = vec![0.0; n_bins];
    let mut cnt = vec![0usize; n_bins];
    for r in 0..n {
        for c in 0..n {
            let d = (c as f64 - cx).hypot(r as f64 - cy);
            let b = (d / bin).round() as usize;
            if b < n_bins {
                sum[b] += density.data[r * n + c];
                cnt[b] += 1;
            }
        }
    }
    let profile: Vec<(f64, f64)> = (0..n_bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| (b as f64 * bin, sum[b] / cnt[b] as f64))
        .collect();
    let top = profile.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let level = 0.5 * top;
    for w in profile.windows(2) {
        let ((r0, v0), (r1, v1)) = (w[0], w[1]);
        if v0 >= level && v1 < level {
            let r_half = r0 + (v0 - level) / (v0 - v1) * (r1 - r0);
            return Ok(2.0 * r_half);
        }
    }
    Err(Error::numerical(
        "peak profile never falls to half maximum inside the window",
    ))
}

/// Per-frame latent errors after removing the global alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentErrors {
    /// Rotation errors, radians, wrapped to `(-pi/2, pi/2]`.
    pub theta: Vec<f64>,
    pub diameter: Vec<f64>,
    pub shift_x: Vec<f64>,
    pub shift_y: Vec<f64>,
    pub summary: ErrorSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n_frames: usize,
    pub sigma_theta_deg: f64,
    pub sigma_diameter_px: f64,
    pub sigma_shift_x_px: f64,
    pub sigma_shift_y_px: f64,
    /// Root of the mean of the two per-axis shift variances.
    pub sigma_shift_px: f64,
    pub bias_theta_deg: f64,
    pub bias_diameter_px: f64,
    pub bias_shift_x_px: f64,
    pub bias_shift_y_px: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Errors of predicted latents against truth. The reconstruction is related to
/// the truth by `alignment` (rotate by `theta`, then displace by `shift`), so a
/// frame predicted at `theta_p` corresponds to `theta_p - alignment.theta`, and its
/// shift to `t_p + R(theta_true) shift`. Predictions a half-turn away are folded
/// back, which negates the predicted shift.
pub fn latent_errors(
    predicted: &[LatentParams],
    truth: &[LatentParams],
    alignment: &Alignment,
) -> Result<LatentErrors> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predicted frames vs {} true frames",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no frames to compare"));
    }
    let mut out = LatentErrors {
        theta: Vec::with_capacity(truth.len()),
        diameter: Vec::with_capacity(truth.len()),
        shift_x: Vec::with_capacity(truth.len()),
        shift_y: Vec::with_capacity(truth.len()),
        summary: ErrorSummary {
            n_frames: truth.len(),
            sigma_theta_deg: 0.0,
            sigma_diameter_px: 0.0,
            sigma_shift_x_px: 0.0,
            sigma_shift_y_px: 0.0,
            sigma_shift_px: 0.0,
            bias_theta_deg: 0.0,
            bias_diameter_px: 0.0,
            bias_shift_x_px: 0.0,
            bias_shift_y_px: 0.0,
        },
    };
    for (p, t) in predicted.iter().zip(truth) {
        let raw = p.theta - alignment.theta - t.theta;
        // wrap into (-pi/2, pi/2]
        let k = ((raw - PI / 2.0) / PI).ceil();
        let err = raw - k * PI;
        let flip = (k as i64).rem_euclid(2) == 1;
        let tp = if flip {
            [-p.shift_px[0], -p.shift_px[1]]
        } else {
            p.shift_px
        };
        let corr = rotate_coord(alignment.shift, t.theta);
        out.theta.push(err);
        out.diameter.push(p.diameter_px - t.diameter_px);
        out.shift_x.push(tp[0] + corr[0] - t.shift_px[0]);
        out.shift_y.push(tp[1] + corr[1] - t.shift_px[1]);
    }
    let (bt, st) = mean_std(&out.theta);
    let (bd, sd) = mean_std(&out.diameter);
    let (bx, sx) = mean_std(&out.shift_x);
    let (by, sy) = mean_std(&out.shift_y);
    out.summary = ErrorSummary {
        n_frames: truth.len(),
        sigma_theta_deg: st.to_degrees(),
        sigma_diameter_px: sd,
        sigma_shift_x_px: sx,
        sigma_shift_y_px: sy,
        sigma_shift_px: (0.5 * (sx * sx + sy * sy)).sqrt(),
        bias_theta_deg: bt.to_degrees(),
        bias_diameter_px: bd,
        bias_shift_x_px: bx,
        bias_shift_y_px: by,
    };
    Ok(out)
}

/// Equal-width histogram over `[lo, hi)`; values outside are dropped.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    if bins == 0 || !(hi > lo) {
        return h;
    }
    for &v in values {
        if v >= lo && v < hi {
            let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1;
        }
    }
    h
}
