use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{render_frame, sphere_amplitude, ComplexModel, SphereReference};
use crate::geometry::{rotate_coord, DetectorGeometry, NOT_GOOD};
use crate::maxlp::grid::LatentGrid;
use crate::simulate::{LatentParams, SparseDataset, SparseFrame};

/// Floor applied to a predicted intensity before taking its logarithm.
pub const INTENSITY_FLOOR: f64 = 1e-20;

/// Hard latent assignment of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignedLatent {
    /// Index into the latent grid.
    pub index: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub frames: Vec<AssignedLatent>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn latent(&self, grid: &LatentGrid, frame: usize) -> LatentParams {
        grid.params(self.frames[frame].index)
    }

    pub fn latents(&self, grid: &LatentGrid) -> Vec<LatentParams> {
        self.frames.iter().map(|a| grid.params(a.index)).collect()
    }

    pub fn total_log_likelihood(&self) -> f64 {
        self.frames.iter().map(|a| a.log_likelihood).sum()
    }
}

/// Poisson log-likelihood `sum K ln I - I` of one frame under `latent`, up to the
/// `ln K!` constant. The `-I` sum runs over every GOOD pixel, the `K ln I` sum
/// only over occupied pixels.
pub fn frame_log_likelihood(
    frame: &SparseFrame,
    model: &ComplexModel,
    latent: &LatentParams,
    geom: &DetectorGeometry,
    reference: Option<&SphereReference>,
) -> Result<f64> {
    let img = render_frame(model, geom, latent, reference)?;
    let total: f64 = geom.good_pixels().iter().map(|&p| img[p as usize]).sum();
    let mut acc = 0.0;
    for (p, k) in frame.iter() {
        let mut i = img[p as usize];
        if i <= 0.0 {
            log::debug!("zero intensity at occupied pixel {p}; clamping");
            i = INTENSITY_FLOOR;
        }
        acc += k as f64 * i.ln();
    }
    Ok(acc - total)
}

/// Reference-term tables shared by the E- and C-steps, indexed by GOOD position.
pub(crate) struct ReferenceTables {
    pub q: Vec<[f64; 2]>,
    /// `[i_d][g]`: sphere amplitude for each grid diameter.
    pub amp: Vec<Vec<f64>>,
    /// `[i_x * n_y + i_y][g]`: ramp phase `2 pi q.t`.
    pub phase: Vec<Vec<f64>>,
    /// Unit phasors of `phase`.
    pub ramp: Vec<Vec<Complex64>>,
}

impl ReferenceTables {
    pub fn new(geom: &DetectorGeometry, grid: &LatentGrid, contrast: f64) -> Self {
        let q: Vec<[f64; 2]> = geom.good_pixels().iter().map(|&p| geom.q(p as usize)).collect();
        let amp = grid
            .diameters()
            .iter()
            .map(|&d| {
                q.iter()
                    .map(|v| sphere_amplitude(v[0].hypot(v[1]), d, contrast))
                    .collect()
            })
            .collect();
        let mut phase = Vec::new();
        for &tx in grid.shifts_x() {
            for &ty in grid.shifts_y() {
                phase.push(
                    q.iter()
                        .map(|v| 2.0 * PI * (v[0] * tx + v[1] * ty))
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let ramp = phase
            .iter()
            .map(|row| row.iter().map(|&ph| Complex64::from_polar(1.0, ph)).collect())
            .collect();
        Self { q, amp, phase, ramp }
    }

    pub fn n_shifts(&self) -> usize {
        self.phase.len()
    }
}

/// Reference contribution `F_s e^{i phase}` in the exact arithmetic used everywhere.
#[inline]
pub(crate) fn reference_term(unit_ramp: Complex64, amp: f64) -> Complex64 {
    unit_ramp * amp
}

/// Occupied pixels of a frame as `(GOOD position, count)`.
pub(crate) fn good_counts(frame: &SparseFrame, geom: &DetectorGeometry) -> Vec<(u32, u32)> {
    frame
        .iter()
        .filter_map(|(p, k)| {
            let g = geom.good_position(p as usize);
            (g != NOT_GOOD).then_some((g, k))
        })
        .collect()
}

pub(crate) fn check_inputs(ds: &SparseDataset, model: &ComplexModel, geom: &DetectorGeometry) -> Result<()> {
    if model.side() != geom.side() {
        return Err(Error::invalid(format!(
            "model side {} does not match detector side {}",
            model.side(),
            geom.side()
        )));
    }
    if ds.meta.geometry != geom.meta() {
        return Err(Error::invalid("dataset geometry does not match detector"));
    }
    Ok(())
}

/// Most likely grid hypothesis for every frame. Ties go to the lowest grid index.
///
/// For each rotation the model is sampled once at the rotated GOOD coordinates and
/// a table of `ln I` is built for every (diameter, shift) hypothesis, laid out
/// pixel-major so that scoring a frame is a sum of contiguous rows weighted by its
/// photon counts. The `-sum I` term is computed once per hypothesis.
pub fn assign_latents(
    ds: &SparseDataset,
    model: &ComplexModel,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    reference: &SphereReference,
) -> Result<Assignment> {
    check_inputs(ds, model, geom)?;
    let tables = ReferenceTables::new(geom, grid, reference.contrast);
    let n_good = tables.q.len();
    let per_theta = grid.per_theta();
    let n_shift = tables.n_shifts();
    let frames: Vec<Vec<(u32, u32)>> = ds.frames.iter().map(|f| good_counts(f, geom)).collect();

    let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, 0); frames.len()];
    let mut ln_tab = vec![0f32; n_good * per_theta];
    let mut sampled = vec![Complex64::new(0.0, 0.0); n_good];
    let scale = model.scale;

    for (i_theta, &theta) in grid.thetas().iter().enumerate() {
        sampled
            .par_iter_mut()
            .zip(&tables.q)
            .for_each(|(s, &q)| *s = model.sample(rotate_coord(q, -theta)));

        ln_tab
            .par_chunks_mut(per_theta)
            .zip(sampled.par_iter())
            .enumerate()
            .for_each(|(g, (row, &f_o))| {
                for (i_d, amp) in tables.amp.iter().enumerate() {
                    for s in 0..n_shift {
                        let total = f_o + reference_term(tables.ramp[s][g], amp[g]);
                        let i = (scale * total.norm_sqr()).max(INTENSITY_FLOOR);
                        row[i_d * n_shift + s] = i.ln() as f32;
                    }
                }
            });

        // frame-independent -sum I per hypothesis, pixel order fixed
        let sum_i: Vec<f64> = (0..per_theta)
            .into_par_iter()
            .map(|h| {
                let (i_d, s) = (h / n_shift, h % n_shift);
                let amp = &tables.amp[i_d];
                let ramp = &tables.ramp[s];
                let mut acc = 0.0;
                for g in 0..n_good {
                    acc += scale * (sampled[g] + reference_term(ramp[g], amp[g])).norm_sqr();
                }
                acc
            })
            .collect();

        let base = i_theta * per_theta;
        best.par_iter_mut().zip(frames.par_iter()).for_each_init(
            || vec![0f64; per_theta],
            |acc, (b, counts)| {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(g, k) in counts {
                    let row = &ln_tab[g as usize * per_theta..(g as usize + 1) * per_theta];
                    let k = k as f64;
                    for (a, &l) in acc.iter_mut().zip(row) {
                        *a += k * l as f64;
                    }
                }
                for h in 0..per_theta {
                    let q = acc[h] - sum_i[h];
                    if q > b.0 {
                        *b = (q, base + h);
                    }
                }
            },
        );
    }

    // exact likelihood of the winning hypothesis
    let out = best
        .par_iter()
        .zip(ds.frames.par_iter())
        .map(|(&(_, index), frame)| {
            let latent = grid.params(index);
            let ll = frame_log_likelihood(frame, model, &latent, geom, Some(reference))?;
            if !ll.is_finite() {
                return Err(Error::numerical("non-finite frame log-likelihood"));
            }
            Ok(AssignedLatent {
                index,
                log_likelihood: ll,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Assignment { frames: out })
}
