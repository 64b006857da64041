use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ComplexModel, SphereReference};
use crate::geometry::{rotate_coord, DetectorGeometry};
use crate::maxlp::assign::{check_inputs, good_counts, reference_term, Assignment, ReferenceTables};
use crate::maxlp::grid::LatentGrid;
use crate::maxlp::search::{Observation, PixelObjective, PixelObservations};
use crate::maxlp::MaxlpConfig;
use crate::simulate::SparseDataset;

const ANGLE_BINS: u32 = 64;

/// Calls `visit(frame, model_pixel, count, i_diameter, i_shift, good_position, mirrored)` for every
/// (frame, GOOD detector pixel) pair, in frame order then pixel order. With
/// `friedel`, each pair is also offered to the point-reflected model pixel with
/// `mirrored = true`; its reference term is then the complex conjugate.
fn for_each_observation(
    ds: &SparseDataset,
    assignment: &Assignment,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    tables: &ReferenceTables,
    friedel: bool,
    mut visit: impl FnMut(usize, usize, u32, usize, usize, usize, bool),
) {
    let n_y = grid.shifts_y().len();
    for (f, (frame, assigned)) in ds.frames.iter().zip(&assignment.frames).enumerate() {
        let [i_t, i_d, i_x, i_y] = grid.unravel(assigned.index);
        let theta = grid.thetas()[i_t];
        let s = i_x * n_y + i_y;
        let counts = good_counts(frame, geom);
        let mut next = counts.iter().peekable();
        for (g, &q) in tables.q.iter().enumerate() {
            let k = match next.peek() {
                Some(&&(pos, k)) if pos as usize == g => {
                    next.next();
                    k
                }
                _ => 0,
            };
            let Some(m) = geom.nearest_pixel(rotate_coord(q, -theta)) else {
                continue;
            };
            visit(f, m, k, i_d, s, g, false);
            if friedel {
                visit(f, geom.mirror(m), k, i_d, s, g, true);
            }
        }
    }
}

/// Spread of the reference-term angles covering a model pixel: the shortest arc
/// holding every occupied 1/64-turn bin, in radians.
fn angular_spread(bins: u64) -> f64 {
    if bins == 0 {
        return 0.0;
    }
    let mut longest_gap = 0;
    let mut run = 0;
    // walk twice round the circle so a gap across bin 0 is counted whole
    for i in 0..2 * ANGLE_BINS {
        if bins >> (i % ANGLE_BINS) & 1 == 0 {
            run += 1;
            longest_gap = longest_gap.max(run.min(ANGLE_BINS));
        } else {
            run = 0;
        }
    }
    let occupied_arc = ANGLE_BINS - longest_gap - 1;
    occupied_arc as f64 * 2.0 * PI / ANGLE_BINS as f64
}

#[inline]
fn angle_bin(a: Complex64) -> u64 {
    let t = a.im.atan2(a.re).rem_euclid(2.0 * PI);
    let b = ((t / (2.0 * PI)) * ANGLE_BINS as f64) as u32 % ANGLE_BINS;
    1u64 << b
}

fn term(tables: &ReferenceTables, i_d: usize, s: usize, g: usize, mirrored: bool) -> Complex64 {
    let a = reference_term(tables.ramp[s][g], tables.amp[i_d][g]);
    if mirrored {
        a.conj()
    } else {
        a
    }
}

/// Observations of one model pixel under `assignment`, in the order the C-step uses them.
pub fn collect_pixel_observations(
    ds: &SparseDataset,
    assignment: &Assignment,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    reference: &SphereReference,
    scale: f64,
    friedel: bool,
    pixel: usize,
) -> PixelObservations {
    let tables = ReferenceTables::new(geom, grid, reference.contrast);
    let mut entries = Vec::new();
    for_each_observation(
        ds,
        assignment,
        grid,
        geom,
        &tables,
        friedel,
        |_, m, k, i_d, s, g, mirrored| {
            if m == pixel {
                let phase = tables.phase[s][g];
                entries.push(Observation {
                    count: k,
                    ref_amp: tables.amp[i_d][g],
                    phase: if mirrored { -phase } else { phase },
                });
            }
        },
    );
    PixelObservations { scale, entries }
}

/// C-step: re-fits every model pixel to the observations binned onto it under the
/// assigned latents, starting from `prev`. Pixels are solved independently.
pub fn update_model(
    ds: &SparseDataset,
    assignment: &Assignment,
    grid: &LatentGrid,
    geom: &DetectorGeometry,
    reference: &SphereReference,
    prev: &ComplexModel,
    cfg: &MaxlpConfig,
) -> Result<ComplexModel> {
    check_inputs(ds, prev, geom)?;
    cfg.search.validate()?;
    if assignment.len() != ds.frames.len() {
        return Err(Error::invalid(format!(
            "assignment covers {} frames, dataset has {}",
            assignment.len(),
            ds.frames.len()
        )));
    }
    if assignment.frames.iter().any(|a| a.index >= grid.len()) {
        return Err(Error::invalid("assignment refers outside the latent grid"));
    }
    let scale = prev.scale;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("model fluence scale must be positive"));
    }
    let tables = ReferenceTables::new(geom, grid, reference.contrast);
    let n_pix = geom.n_pixels();
    let mut objectives = vec![PixelObjective::new(scale); n_pix];
    let mut bins = vec![0u64; n_pix];
    // distinct frames per model pixel; several detector pixels of one frame can land on the same model pixel
    let mut n_frames = vec![0usize; n_pix];
    let mut last_frame = vec![usize::MAX; n_pix];
    for_each_observation(
        ds,
        assignment,
        grid,
        geom,
        &tables,
        cfg.friedel,
        |f, m, k, i_d, s, g, mirrored| {
            let a = term(&tables, i_d, s, g, mirrored);
            objectives[m].push(k, a);
            if last_frame[m] != f {
                last_frame[m] = f;
                n_frames[m] += 1;
            }
            if a.re != 0.0 || a.im != 0.0 {
                bins[m] |= angle_bin(a);
            }
        },
    );

    let solved = objectives
        .par_iter()
        .enumerate()
        .map(|(m, obj)| {
            let f = obj.maximize(prev.grid[m], &cfg.search)?;
            let reliable = geom.is_good(m)
                && n_frames[m] >= cfg.min_observations.max(1)
                && angular_spread(bins[m]) >= cfg.min_phase_spread;
            Ok((f, reliable))
        })
        .collect::<Result<Vec<_>>>()?;
    let (grid_vals, reliable): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    ComplexModel::new(geom.side(), grid_vals, reliable, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxlp::assign::AssignedLatent;
    use crate::maxlp::search::pixel_pattern_search;
    use crate::object::{density_to_model, random_blob_object, TargetSpec};
    use crate::simulate::{generate_dataset, FrameSource, LatentConfig, LatentParams, SimulationConfig};

    #[test]
    fn spread_of_bins() {
        assert_eq!(angular_spread(0), 0.0);
        assert_eq!(angular_spread(1), 0.0);
        let w = 2.0 * PI / 64.0;
        assert!((angular_spread(0b111) - 2.0 * w).abs() < 1e-12);
        // bins 63 and 0 are adjacent
        assert!((angular_spread(1 | 1 << 63) - w).abs() < 1e-12);
        assert!((angular_spread(u64::MAX) - 63.0 * w).abs() < 1e-12);
        assert!((angular_spread(1 | 1 << 32) - 32.0 * w).abs() < 1e-12);
    }

    fn fixture(
        latent: LatentConfig,
        n_frames: usize,
    ) -> (SparseDataset, Vec<LatentParams>, ComplexModel, DetectorGeometry) {
        let geom = DetectorGeometry::new(31, 15.0, 2.0).unwrap();
        let spec = TargetSpec {
            side_px: 31,
            n_blobs: 6,
            blob_radius_px: (1.5, 2.5),
            extent_px: 6.0,
            density: 1.0,
            seed: 4,
        };
        let truth = density_to_model(&random_blob_object(&spec).unwrap());
        let cfg = SimulationConfig {
            n_frames,
            target_photons: 2e4,
            seed: 8,
            with_reference: true,
            contrast: 11.0,
            latent,
            n_probe: 8,
        };
        let (ds, t) = generate_dataset(&FrameSource::Static(truth.clone()), &geom, &cfg).unwrap();
        let truth = truth.with_scale(ds.meta.scale);
        (ds, t.into_iter().map(|f| f.latent).collect(), truth, geom)
    }

    fn true_assignment(grid: &LatentGrid, latents: &[LatentParams]) -> Assignment {
        Assignment {
            frames: latents
                .iter()
                .map(|l| AssignedLatent {
                    index: grid.nearest(l),
                    log_likelihood: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn fixed_latents_fail_phase_spread() {
        let latent = LatentConfig {
            mean_diameter_px: 7.0,
            sigma_diameter_px: 0.0,
            sigma_shift_px: 0.0,
        };
        let (ds, _, truth, geom) = fixture(latent, 20);
        let reference = ds.reference().unwrap();
        let grid = LatentGrid::single(&LatentParams {
            theta: 0.0,
            diameter_px: 7.0,
            shift_px: [0.0, 0.0],
        })
        .unwrap();
        let a = Assignment {
            frames: vec![
                AssignedLatent {
                    index: 0,
                    log_likelihood: 0.0
                };
                20
            ],
        };
        let cfg = MaxlpConfig::default();
        let m = update_model(&ds, &a, &grid, &geom, &reference, &truth, &cfg).unwrap();
        // one shift, one diameter: every pixel sees a single reference phase
        assert!(m.reliable.iter().all(|&r| !r));
    }

    #[test]
    fn reliability_thresholds() {
        let (ds, latents, truth, geom) = fixture(LatentConfig::default(), 40);
        let reference = ds.reference().unwrap();
        let grid = LatentGrid::default_for(&LatentConfig::default()).unwrap();
        let a = true_assignment(&grid, &latents);
        let cfg = MaxlpConfig {
            min_observations: 41,
            ..MaxlpConfig::default()
        };
        let m = update_model(&ds, &a, &grid, &geom, &reference, &truth, &cfg).unwrap();
        assert!(m.reliable.iter().all(|&r| !r));
        let m = update_model(&ds, &a, &grid, &geom, &reference, &truth, &MaxlpConfig::default()).unwrap();
        let n_rel = m.reliable.iter().filter(|&&r| r).count();
        assert!(n_rel > geom.good_pixels().len() / 2, "{n_rel}");
        assert!(m.reliable.iter().enumerate().all(|(p, &r)| !r || geom.is_good(p)));
    }

    #[test]
    fn pixels_are_independent() {
        let (ds, latents, truth, geom) = fixture(LatentConfig::default(), 30);
        let reference = ds.reference().unwrap();
        let grid = LatentGrid::default_for(&LatentConfig::default()).unwrap();
        let a = true_assignment(&grid, &latents);
        for friedel in [false, true] {
            let cfg = MaxlpConfig {
                friedel,
                ..MaxlpConfig::default()
            };
            let start = ComplexModel::new(
                geom.side(),
                truth.grid.iter().map(|f| f * 0.8).collect(),
                truth.reliable.clone(),
                truth.scale,
            )
            .unwrap();
            let m = update_model(&ds, &a, &grid, &geom, &reference, &start, &cfg).unwrap();
            // solve pixels one at a time, in reverse order, from their own observation lists
            for p in (0..geom.n_pixels()).rev().step_by(7) {
                let obs = collect_pixel_observations(&ds, &a, &grid, &geom, &reference, truth.scale, friedel, p);
                let f = pixel_pattern_search(&obs, start.grid[p], &cfg.search).unwrap();
                assert_eq!(f, m.grid[p], "pixel {p}");
            }
        }
    }

    /// Frames rendered exactly at random grid hypotheses, with the matching assignment.
    fn on_grid_dataset(
        n_frames: usize,
        grid: &LatentGrid,
    ) -> (SparseDataset, Assignment, ComplexModel, DetectorGeometry) {
        use crate::forward::render_frame;
        use crate::simulate::poisson_sample;
        use rand::{Rng, SeedableRng};
        let (mut ds, _, truth, geom) = fixture(LatentConfig::default(), n_frames);
        let reference = ds.reference().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut frames = Vec::with_capacity(n_frames);
        for frame in ds.frames.iter_mut() {
            let index = rng.random_range(0..grid.len());
            let img = render_frame(&truth, &geom, &grid.params(index), Some(&reference)).unwrap();
            *frame = poisson_sample(&img, &geom, &mut rng).unwrap();
            frames.push(AssignedLatent {
                index,
                log_likelihood: 0.0,
            });
        }
        (ds, Assignment { frames }, truth, geom)
    }

    #[test]
    fn true_latents_recover_model() {
        let grid = LatentGrid::default_for(&LatentConfig::default()).unwrap();
        let (ds, a, truth, geom) = on_grid_dataset(200, &grid);
        let reference = ds.reference().unwrap();
        let mut m = ComplexModel::zeros(geom.side()).with_scale(truth.scale);
        for _ in 0..3 {
            m = update_model(&ds, &a, &grid, &geom, &reference, &m, &MaxlpConfig::default()).unwrap();
        }
        // relative error over reliable GOOD pixels
        let (mut num, mut den) = (0.0, 0.0);
        for p in 0..geom.n_pixels() {
            if m.reliable[p] {
                num += (m.grid[p] - truth.grid[p]).norm_sqr();
                den += truth.grid[p].norm_sqr();
            }
        }
        assert!((num / den).sqrt() < 0.2, "{}", (num / den).sqrt());
    }
}
