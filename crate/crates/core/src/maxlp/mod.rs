//! Maximum-likelihood phasing of holographic single-particle data.
//!
//! Each iteration assigns every frame its single most likely latent hypothesis
//! on a fixed grid (E-step), then refits every Fourier pixel of the complex model
//! by a derivative-free pattern search on that pixel's Poisson likelihood (C-step).

mod assign;
mod grid;
mod search;
mod update;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use assign::{assign_latents, frame_log_likelihood, AssignedLatent, Assignment, INTENSITY_FLOOR};
pub use grid::{arange_inclusive, LatentGrid};
pub use search::{pixel_log_likelihood, pixel_pattern_search, Observation, PixelObservations, SearchConfig};
pub use update::{collect_pixel_observations, update_model};

use crate::error::{Error, Result};
use crate::forward::{ComplexModel, SphereReference};
use crate::geometry::DetectorGeometry;
use crate::simulate::SparseDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxlpConfig {
    pub n_iter: usize,
    pub seed: u64,
    pub search: SearchConfig,
    /// Pixels seen in fewer frames are flagged unreliable.
    pub min_observations: usize,
    /// Pixels whose reference terms span a smaller arc (radians) are flagged unreliable.
    pub min_phase_spread: f64,
    /// Also bin each observation onto the point-reflected pixel with the conjugate
    /// reference term, i.e. assume a real-valued target density.
    pub friedel: bool,
}

impl Default for MaxlpConfig {
    fn default() -> Self {
        Self {
            n_iter: 20,
            seed: 0,
            search: SearchConfig::default(),
            min_observations: 10,
            min_phase_spread: std::f64::consts::FRAC_PI_4,
            friedel: false,
        }
    }
}

impl MaxlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::invalid("n_iter must be at least 1"));
        }
        if !(self.min_phase_spread >= 0.0) {
            return Err(Error::invalid("min_phase_spread must be non-negative"));
        }
        self.search.validate()
    }
}

/// Per-iteration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Total data log-likelihood at the E-step of this iteration.
    pub log_likelihood: f64,
    /// RMS change of the model over GOOD pixels.
    pub rms_change: f64,
    pub reliable_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub model: ComplexModel,
    pub assignment: Assignment,
    pub log: Vec<IterationLog>,
}

impl Reconstruction {
    pub fn likelihood_trace(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.log_likelihood).collect()
    }
}

/// Complex Gaussian start whose mean intensity matches the data's mean photons
/// per GOOD pixel, on GOOD pixels only. The fluence scale is taken from the dataset.
pub fn initial_model(ds: &SparseDataset, geom: &DetectorGeometry, seed: u64, friedel: bool) -> Result<ComplexModel> {
    let scale = ds.meta.scale;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::data("dataset has no usable fluence scale"));
    }
    let n_good = geom.good_pixels().len() as f64;
    let mean_photons = ds.total_photons() as f64 / (ds.frames.len() as f64 * n_good);
    if !(mean_photons > 0.0) {
        return Err(Error::data("dataset contains no photons"));
    }
    let sigma = (mean_photons / scale / 2.0).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::numerical(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![Complex64::new(0.0, 0.0); geom.n_pixels()];
    for &p in geom.good_pixels() {
        grid[p as usize] = Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
    }
    if friedel {
        for p in 0..grid.len() {
            let m = geom.mirror(p);
            if m < p {
                grid[p] = grid[m].conj();
            } else if m == p {
                grid[p].im = 0.0;
            }
        }
    }
    let mut model = ComplexModel::new(geom.side(), grid, vec![true; geom.n_pixels()], scale)?;
    model.mask_to(geom);
    Ok(model)
}

/// One E-step plus one C-step.
pub fn maxlp_iteration(
    ds: &SparseDataset,
    model: &ComplexModel,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    reference: &SphereReference,
    cfg: &MaxlpConfig,
    iteration: usize,
) -> Result<(ComplexModel, Assignment, IterationLog)> {
    let assignment = assign_latents(ds, model, grid, geom, reference)?;
    let next = update_model(ds, &assignment, grid, geom, reference, model, cfg)?;
    let log = IterationLog {
        iteration,
        log_likelihood: assignment.total_log_likelihood(),
        rms_change: rms_change(&model.grid, &next.grid, geom),
        reliable_fraction: next.reliable.iter().filter(|&&r| r).count() as f64 / geom.good_pixels().len() as f64,
    };
    log::info!(
        "iteration {iteration}: log-likelihood {:.6e}, rms change {:.4e}, reliable {:.3}",
        log.log_likelihood,
        log.rms_change,
        log.reliable_fraction
    );
    Ok((next, assignment, log))
}

fn rms_change(a: &[Complex64], b: &[Complex64], geom: &DetectorGeometry) -> f64 {
    let good = geom.good_pixels();
    let s: f64 = good.iter().map(|&p| (a[p as usize] - b[p as usize]).norm_sqr()).sum();
    (s / good.len() as f64).sqrt()
}

/// Full reconstruction from a noise start: `cfg.n_iter` alternations of
/// [`assign_latents`] and [`update_model`].
pub fn maxlp_reconstruct(
    ds: &SparseDataset,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    reference: &SphereReference,
    cfg: &MaxlpConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let model = initial_model(ds, geom, cfg.seed, cfg.friedel)?;
    resume_reconstruct(ds, grid, geom, reference, cfg, model, Vec::new())
}

/// Continues a reconstruction from `model` after `log.len()` completed iterations.
pub fn resume_reconstruct(
    ds: &SparseDataset,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    reference: &SphereReference,
    cfg: &MaxlpConfig,
    mut model: ComplexModel,
    mut log: Vec<IterationLog>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let mut assignment = None;
    for it in log.len()..cfg.n_iter {
        let (next, a, entry) = maxlp_iteration(ds, &model, grid, geom, reference, cfg, it)?;
        model = next;
        assignment = Some(a);
        log.push(entry);
    }
    let assignment = match assignment {
        Some(a) => a,
        None => assign_latents(ds, &model, grid, geom, reference)?,
    };
    Ok(Reconstruction { model, assignment, log })
}
