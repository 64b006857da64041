use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxlp::assign::{reference_term, INTENSITY_FLOOR};

/// One observation of a model pixel: a detector pixel of one frame, mapped back
/// through that frame's assigned rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub count: u32,
    /// Reference amplitude `F_s(|q|, D)` for the frame's assigned diameter.
    pub ref_amp: f64,
    /// Ramp angle `2 pi q.t` for the frame's assigned shift.
    pub phase: f64,
}

impl Observation {
    pub fn reference(&self) -> Complex64 {
        reference_term(Complex64::from_polar(1.0, self.phase), self.ref_amp)
    }
}

/// All observations of one model pixel, plus the fluence factor that turns
/// `|F + F_s e^{i phase}|^2` into expected photons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelObservations {
    pub scale: f64,
    pub entries: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// First poll step. `None`: the incumbent's modulus (1 when it is zero), but
    /// never below the pixel's Poisson amplitude uncertainty.
    pub init_step: Option<f64>,
    pub shrink: f64,
    /// Stop once the step falls below `tol_rel * init_step`.
    pub tol_rel: f64,
    pub max_iter: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            init_step: None,
            shrink: 0.5,
            tol_rel: 1e-3,
            max_iter: 200,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::invalid("pattern-search shrink factor must lie in (0, 1)"));
        }
        if !(self.tol_rel > 0.0 && self.tol_rel < 1.0) {
            return Err(Error::invalid("pattern-search relative tolerance must lie in (0, 1)"));
        }
        if let Some(h) = self.init_step {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::invalid("pattern-search initial step must be positive"));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("pattern-search max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Per-pixel Poisson objective
/// `sum_d K_d ln(s |F + a_d|^2) - s |F + a_d|^2`, with the `-I` part kept as running sums.
#[derive(Debug, Clone, Default)]
pub(crate) struct PixelObjective {
    scale: f64,
    n: usize,
    sum_a: Complex64,
    sum_aa: f64,
    photons: f64,
    hits: Vec<(f64, Complex64)>,
}

impl PixelObjective {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            ..Default::default()
        }
    }

    pub fn from_observations(obs: &PixelObservations) -> Self {
        let mut o = Self::new(obs.scale);
        for e in &obs.entries {
            o.push(e.count, e.reference());
        }
        o
    }

    #[inline]
    pub fn push(&mut self, count: u32, a: Complex64) {
        self.n += 1;
        self.sum_a += a;
        self.sum_aa += a.norm_sqr();
        if count > 0 {
            let k = count as f64;
            self.photons += k;
            self.hits.push((k, a));
        }
    }

    pub fn value(&self, f: Complex64) -> f64 {
        let s = self.scale;
        let mut acc = 0.0;
        for &(k, a) in &self.hits {
            acc += k * (s * (f + a).norm_sqr()).max(INTENSITY_FLOOR).ln();
        }
        let quad = self.n as f64 * f.norm_sqr() + 2.0 * (f.re * self.sum_a.re + f.im * self.sum_a.im) + self.sum_aa;
        acc - s * quad
    }

    /// Statistical amplitude resolution `1 / (2 sqrt(s n))` of the pixel.
    fn amplitude_noise(&self) -> f64 {
        if self.n == 0 || !(self.scale > 0.0) {
            0.0
        } else {
            0.5 / (self.scale * self.n as f64).sqrt()
        }
    }

    pub fn maximize(&self, init: Complex64, cfg: &SearchConfig) -> Result<Complex64> {
        if self.n == 0 {
            return Ok(init);
        }
        let mut h = match cfg.init_step {
            Some(h) => h,
            None => {
                let m = init.norm();
                let h = if m > 0.0 { m } else { 1.0 };
                h.max(self.amplitude_noise())
            }
        };
        let tol = cfg.tol_rel * h;
        let mut best = init;
        let mut f_best = self.value(best);
        if !f_best.is_finite() {
            return Err(Error::numerical(format!(
                "pixel objective is {f_best} at the initial point"
            )));
        }
        const STENCIL: [(f64, f64); 8] = [
            (-1.0, -1.0),
            (0.0, -1.0),
            (1.0, -1.0),
            (-1.0, 0.0),
            (1.0, 0.0),
            (-1.0, 1.0),
            (0.0, 1.0),
            (1.0, 1.0),
        ];
        for _ in 0..cfg.max_iter {
            if h < tol {
                break;
            }
            let mut cand = best;
            let mut f_cand = f_best;
            for (dx, dy) in STENCIL {
                let p = best + Complex64::new(dx * h, dy * h);
                let v = self.value(p);
                if !v.is_finite() {
                    return Err(Error::numerical(format!("pixel objective is {v} at {p}")));
                }
                if v > f_cand {
                    cand = p;
                    f_cand = v;
                }
            }
            if f_cand > f_best {
                best = cand;
                f_best = f_cand;
            } else {
                h *= cfg.shrink;
            }
        }
        Ok(best)
    }
}

/// Pattern-search maximizer of the pixel's Poisson log-likelihood in the complex
/// plane: polls a 3x3 stencil of step `h` around the incumbent, moves to the best
/// improving point, otherwise shrinks `h`. Empty observations return `init`.
pub fn pixel_pattern_search(obs: &PixelObservations, init: Complex64, cfg: &SearchConfig) -> Result<Complex64> {
    cfg.validate()?;
    if obs.entries.is_empty() {
        return Ok(init);
    }
    if !(obs.scale > 0.0) || !obs.scale.is_finite() {
        return Err(Error::invalid("pixel observations need a positive fluence scale"));
    }
    PixelObjective::from_observations(obs).maximize(init, cfg)
}

/// Log-likelihood of a pixel's observations at `f` (up to the `ln K!` constant).
pub fn pixel_log_likelihood(obs: &PixelObservations, f: Complex64) -> f64 {
    PixelObjective::from_observations(obs).value(f)
}
