//! Conventional (reference-free) reconstruction: soft-assignment EMC over in-plane
//! rotations to recover the diffraction intensity, then magnitude-only phasing.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{bilinear, ComplexModel};
use crate::geometry::{rotate_coord, DetectorGeometry, NOT_GOOD};
use crate::maxlp::INTENSITY_FLOOR;
use crate::phase::{difference_map, estimate_support, FourierConstraint, PhaseConfig, PhaseResult, SupportMask};
use crate::simulate::SparseDataset;

/// Expected photons per pixel on the detector lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub side: usize,
    pub values: Vec<f64>,
    /// Pixels that received data (false for the central hole and the corners).
    pub known: Vec<bool>,
    pub thetas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmcConfig {
    pub n_iter: usize,
    pub seed: u64,
}

impl Default for EmcConfig {
    fn default() -> Self {
        Self { n_iter: 30, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmcResult {
    pub model: IntensityModel,
    /// Mutual information between frames and rotations, per iteration (nats).
    pub mutual_info: Vec<f64>,
    /// Marginal log-likelihood of the data under the model entering each iteration.
    pub log_likelihood: Vec<f64>,
}

struct Tomograms<'a> {
    geom: &'a DetectorGeometry,
    q: Vec<[f64; 2]>,
    n: usize,
}

impl Tomograms<'_> {
    /// Lattice position (col, row) of GOOD pixel `g` rotated back by `theta`.
    fn source(&self, g: usize, theta: f64) -> (f64, f64) {
        self.geom.lattice_position(rotate_coord(self.q[g], -theta))
    }

    fn expand(&self, model: &[f64], theta: f64) -> Vec<f64> {
        (0..self.q.len())
            .map(|g| {
                let (x, y) = self.source(g, theta);
                bilinear(model, self.n, x, y)
            })
            .collect()
    }

    /// Adds `weight * tomogram` into the model accumulators with the transpose of
    /// the bilinear interpolation used by [`Self::expand`].
    fn compress_into(&self, tomo: &[f64], theta: f64, weight: f64, num: &mut [f64], den: &mut [f64]) {
        let n = self.n as isize;
        for (g, &v) in tomo.iter().enumerate() {
            let (x, y) = self.source(g, theta);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (ix, iy) = (x0 as isize, y0 as isize);
            for (dr, dc, w) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (0, 1, fx * (1.0 - fy)),
                (1, 0, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let (r, c) = (iy + dr, ix + dc);
                if w > 0.0 && r >= 0 && c >= 0 && r < n && c < n {
                    let p = (r * n + c) as usize;
                    num[p] += weight * w * v;
                    den[p] += weight * w;
                }
            }
        }
    }
}

/// Soft-assignment EMC of a reference-free dataset over the rotations `thetas`.
/// Normalized rotation probabilities of one frame and its marginal log-likelihood
/// under a uniform prior.
fn rotation_probabilities(frame: &[(u32, f64)], log_tabs: &[Vec<f64>], sums: &[f64]) -> (Vec<f64>, f64) {
    let ll: Vec<f64> = log_tabs
        .iter()
        .zip(sums)
        .map(|(lt, s)| frame.iter().map(|&(g, k)| k * lt[g as usize]).sum::<f64>() - s)
        .collect();
    let max = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = ll.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let marginal = max + (z / ll.len() as f64).ln();
    (w.into_iter().map(|v| v / z).collect(), marginal)
}

pub fn emc_intensity(
    ds: &SparseDataset,
    thetas: &[f64],
    geom: &DetectorGeometry,
    cfg: &EmcConfig,
) -> Result<EmcResult> {
    if thetas.is_empty() {
        return Err(Error::invalid("EMC needs at least one rotation"));
    }
    if cfg.n_iter == 0 {
        return Err(Error::invalid("EMC needs at least one iteration"));
    }
    if ds.meta.geometry != geom.meta() {
        return Err(Error::invalid("dataset geometry does not match detector"));
    }
    if ds.meta.with_reference {
        log::warn!("running conventional EMC on a dataset recorded with a reference");
    }
    let total = ds.total_photons();
    if total == 0 {
        return Err(Error::data("every frame is empty"));
    }
    let n = geom.side();
    let n_good = geom.good_pixels().len();
    let tomo = Tomograms {
        geom,
        q: geom.good_pixels().iter().map(|&p| geom.q(p as usize)).collect(),
        n,
    };
    let frames: Vec<Vec<(u32, f64)>> = ds
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .filter_map(|(p, k)| {
                    let g = geom.good_position(p as usize);
                    (g != NOT_GOOD).then_some((g, k as f64))
                })
                .collect()
        })
        .collect();

    // start from the rotational average of the data, lightly perturbed
    let mut radial_sum = vec![0.0f64; n];
    let mut radial_cnt = vec![0.0f64; n];
    let mut mean_img = vec![0.0; n_good];
    for f in &frames {
        for &(g, k) in f {
            mean_img[g as usize] += k;
        }
    }
    for (g, &p) in geom.good_pixels().iter().enumerate() {
        let r = geom.radius_px(p as usize).round() as usize;
        radial_sum[r] += mean_img[g] / frames.len() as f64;
        radial_cnt[r] += 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = vec![0.0; n * n];
    let mut known = vec![false; n * n];
    for &p in geom.good_pixels() {
        let p = p as usize;
        let r = geom.radius_px(p).round() as usize;
        let avg = radial_sum[r] / radial_cnt[r].max(1.0);
        model[p] = avg.max(INTENSITY_FLOOR) * (1.0 + 0.2 * (rng.random::<f64>() - 0.5));
        known[p] = true;
    }

    let mut mutual_info = Vec::with_capacity(cfg.n_iter);
    let mut log_likelihood = Vec::with_capacity(cfg.n_iter);
    let n_rot = thetas.len();
    for it in 0..cfg.n_iter {
        let expanded: Vec<Vec<f64>> = thetas.par_iter().map(|&t| tomo.expand(&model, t)).collect();
        let log_tabs: Vec<Vec<f64>> = expanded
            .par_iter()
            .map(|w| w.iter().map(|&v| v.max(INTENSITY_FLOOR).ln()).collect())
            .collect();
        let sums: Vec<f64> = expanded.iter().map(|w| w.iter().sum()).collect();

        // E-step: normalized rotation probabilities per frame
        let probs: Vec<(Vec<f64>, f64)> = frames
            .par_iter()
            .map(|f| rotation_probabilities(f, &log_tabs, &sums))
            .collect();
        let ll_total: f64 = probs.iter().map(|p| p.1).sum();
        let mi: f64 = probs
            .iter()
            .map(|(p, _)| {
                p.iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * (v * n_rot as f64).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / frames.len() as f64;

        // M-step: photon-weighted tomograms
        let updated: Vec<(Vec<f64>, f64)> = (0..n_rot)
            .into_par_iter()
            .map(|j| {
                let mut acc = vec![0.0; n_good];
                let mut mass = 0.0;
                for (f, (p, _)) in frames.iter().zip(&probs) {
                    let w = p[j];
                    if w == 0.0 {
                        continue;
                    }
                    mass += w;
                    for &(g, k) in f {
                        acc[g as usize] += w * k;
                    }
                }
                if mass > 0.0 {
                    acc.iter_mut().for_each(|v| *v /= mass);
                }
                (acc, mass)
            })
            .collect();

        // compress, weighting each tomogram by its probability mass
        let mut num = vec![0.0; n * n];
        let mut den = vec![0.0; n * n];
        for (j, (t, mass)) in updated.iter().enumerate() {
            if *mass > 0.0 {
                tomo.compress_into(t, thetas[j], *mass, &mut num, &mut den);
            }
        }
        for p in 0..n * n {
            if known[p] && den[p] > 0.0 {
                model[p] = num[p] / den[p];
            }
        }
        log::info!("EMC iteration {it}: log-likelihood {ll_total:.6e}, mutual information {mi:.4}");
        mutual_info.push(mi);
        log_likelihood.push(ll_total);
    }
    Ok(EmcResult {
        model: IntensityModel {
            side: n,
            values: model,
            known,
            thetas: thetas.to_vec(),
        },
        mutual_info,
        log_likelihood,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub emc: EmcConfig,
    pub phase: PhaseConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            emc: EmcConfig::default(),
            phase: PhaseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub emc: EmcResult,
    pub support: SupportMask,
    pub phased: PhaseResult,
}

/// EMC intensities, their square roots as Fourier moduli, a support estimated
/// from those moduli, then magnitude-mode difference map.
pub fn baseline_reconstruct(
    ds: &SparseDataset,
    thetas: &[f64],
    geom: &DetectorGeometry,
    cfg: &BaselineConfig,
) -> Result<BaselineResult> {
    let emc = emc_intensity(ds, thetas, geom, &cfg.emc)?;
    let magnitudes: Vec<f64> = emc.model.values.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let as_model = ComplexModel::new(
        geom.side(),
        magnitudes.iter().map(|&a| Complex64::new(a, 0.0)).collect(),
        emc.model.known.clone(),
        1.0,
    )?;
    let support = estimate_support(&as_model, geom, cfg.phase.q_band, cfg.phase.threshold_frac)?;
    let phased = difference_map(
        &FourierConstraint::Magnitude {
            magnitudes,
            known: emc.model.known.clone(),
        },
        &support,
        cfg.phase.beta,
        cfg.phase.n_iter,
        cfg.phase.seed,
    )?;
    Ok(BaselineResult { emc, support, phased })
}
