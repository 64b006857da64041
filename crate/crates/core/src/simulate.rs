//! Sparse Poisson diffraction datasets.
//!
//! Every frame draws its own latent parameters (orientation, reference diameter,
//! relative shift) and, for heterogeneous targets, its own subunit state. Frame
//! `i` uses ChaCha8 stream `i` of the dataset seed, so the output does not depend
//! on how frames are scheduled across threads.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{render_frame, ComplexModel, SphereReference};
use crate::geometry::{DetectorGeometry, GeometryMeta};
use crate::object::{density_to_model, heterogeneous_variant, DensityGrid, Heterogeneity, VariantState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    /// In-plane rotation of the composite object, radians.
    pub theta: f64,
    /// Reference sphere diameter.
    pub diameter_px: f64,
    /// Reference displacement relative to the target, in detector-frame pixels.
    pub shift_px: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub mean_diameter_px: f64,
    pub sigma_diameter_px: f64,
    pub sigma_shift_px: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            mean_diameter_px: 7.0,
            sigma_diameter_px: 0.5,
            sigma_shift_px: 1.0,
        }
    }
}

/// Draws `theta ~ U[0, 2pi)`, `D ~ N(mu, sigma^2)` truncated to `D > 0`, `t ~ N(0, sigma_t^2)` per axis.
pub fn sample_latents<R: Rng + ?Sized>(rng: &mut R, cfg: &LatentConfig) -> LatentParams {
    let theta = rng.random_range(0.0..2.0 * PI);
    let diameter_px = if cfg.sigma_diameter_px > 0.0 {
        let d = Normal::new(cfg.mean_diameter_px, cfg.sigma_diameter_px).expect("finite sigma");
        loop {
            let v = d.sample(rng);
            if v > 0.0 {
                break v;
            }
        }
    } else {
        cfg.mean_diameter_px
    };
    let shift_px = if cfg.sigma_shift_px > 0.0 {
        let n = Normal::new(0.0, cfg.sigma_shift_px).expect("finite sigma");
        [n.sample(rng), n.sample(rng)]
    } else {
        [0.0, 0.0]
    };
    LatentParams {
        theta,
        diameter_px,
        shift_px,
    }
}

/// Photon counts of one frame. `ones` holds pixels with exactly one photon,
/// `multi`/`multi_counts` pixels with two or more.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SparseFrame {
    pub ones: Vec<u32>,
    pub multi: Vec<u32>,
    pub multi_counts: Vec<i32>,
}

impl SparseFrame {
    pub fn total_photons(&self) -> u64 {
        self.ones.len() as u64 + self.multi_counts.iter().map(|&c| c as u64).sum::<u64>()
    }

    pub fn is_empty(&self) -> bool {
        self.ones.is_empty() && self.multi.is_empty()
    }

    /// Occupied pixels with their counts, in ascending pixel order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let mut i = 0;
        let mut j = 0;
        std::iter::from_fn(move || {
            let a = self.ones.get(i).copied();
            let b = self.multi.get(j).copied();
            match (a, b) {
                (Some(pa), Some(pb)) if pa < pb => {
                    i += 1;
                    Some((pa, 1))
                }
                (Some(pa), None) => {
                    i += 1;
                    Some((pa, 1))
                }
                (_, Some(pb)) => {
                    j += 1;
                    Some((pb, self.multi_counts[j - 1] as u32))
                }
                (None, None) => None,
            }
        })
    }

    /// Dense count image over the whole lattice.
    pub fn to_dense(&self, n_pixels: usize) -> Vec<u32> {
        let mut out = vec![0; n_pixels];
        for (p, k) in self.iter() {
            out[p as usize] = k;
        }
        out
    }

    pub fn validate(&self, geom: &DetectorGeometry) -> Result<()> {
        let sorted = |v: &[u32]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.ones) || !sorted(&self.multi) {
            return Err(Error::data("frame pixel indices are not strictly increasing"));
        }
        if self.multi.len() != self.multi_counts.len() {
            return Err(Error::data("multi-count index and count lists differ in length"));
        }
        if self.multi_counts.iter().any(|&c| c < 2) {
            return Err(Error::data("multi-photon pixel with count < 2"));
        }
        for &p in self.ones.iter().chain(&self.multi) {
            if p as usize >= geom.n_pixels() || !geom.is_good(p as usize) {
                return Err(Error::data(format!("photon recorded on non-GOOD pixel {p}")));
            }
        }
        if self.ones.iter().any(|p| self.multi.binary_search(p).is_ok()) {
            return Err(Error::data("pixel listed as both single and multi photon"));
        }
        Ok(())
    }
}

/// Independent Poisson draw per GOOD pixel of an expected-photon image.
pub fn poisson_sample<R: Rng + ?Sized>(intensity: &[f64], geom: &DetectorGeometry, rng: &mut R) -> Result<SparseFrame> {
    if intensity.len() != geom.n_pixels() {
        return Err(Error::invalid("intensity image does not match detector"));
    }
    let mut frame = SparseFrame::default();
    for &p in geom.good_pixels() {
        let lambda = intensity[p as usize];
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::numerical(format!(
                "invalid expected intensity {lambda} at pixel {p}"
            )));
        }
        if lambda == 0.0 {
            continue;
        }
        let k = Poisson::new(lambda)
            .map_err(|e| Error::numerical(format!("poisson({lambda}): {e}")))?
            .sample(rng) as u64;
        match k {
            0 => {}
            1 => frame.ones.push(p),
            _ => {
                frame.multi.push(p);
                frame.multi_counts.push(k.min(i32::MAX as u64) as i32);
            }
        }
    }
    Ok(frame)
}

/// Where a frame's target density comes from.
#[derive(Debug, Clone)]
pub enum FrameSource {
    /// A fixed target, given as its Fourier model (the model's scale is ignored).
    Static(ComplexModel),
    /// A rigid base plus a movable subunit, re-rendered every frame.
    Variant {
        base: DensityGrid,
        subunit: DensityGrid,
        mode: Heterogeneity,
    },
}

impl FrameSource {
    pub fn side(&self) -> usize {
        match self {
            FrameSource::Static(m) => m.side(),
            FrameSource::Variant { base, .. } => base.side(),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(ComplexModel, Option<VariantState>)> {
        match self {
            FrameSource::Static(m) => Ok((m.clone().with_scale(1.0), None)),
            FrameSource::Variant { base, subunit, mode } => {
                let state = mode.draw(rng);
                let density = heterogeneous_variant(base, subunit, mode, &state)?;
                Ok((density_to_model(&density), Some(state)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_frames: usize,
    pub target_photons: f64,
    pub seed: u64,
    pub with_reference: bool,
    pub contrast: f64,
    pub latent: LatentConfig,
    pub n_probe: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_frames: 10_000,
            target_photons: 1e4,
            seed: 0,
            with_reference: true,
            contrast: 11.0,
            latent: LatentConfig::default(),
            n_probe: 2048,
        }
    }
}

/// Dataset-level metadata, written as the JSON sidecar of the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub geometry: GeometryMeta,
    pub n_frames: usize,
    pub mean_photons_target: f64,
    pub seed: u64,
    pub with_reference: bool,
    pub contrast: f64,
    /// Fluence factor used to render the frames (photons per unit |F|^2).
    pub scale: f64,
    pub latent: LatentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    pub meta: DatasetMeta,
    pub frames: Vec<SparseFrame>,
}

impl SparseDataset {
    pub fn validate(&self) -> Result<DetectorGeometry> {
        let geom = DetectorGeometry::from_meta(&self.meta.geometry)?;
        if self.frames.is_empty() {
            return Err(Error::data("dataset has no frames"));
        }
        if self.frames.len() != self.meta.n_frames {
            return Err(Error::data("frame count disagrees with metadata"));
        }
        for f in &self.frames {
            f.validate(&geom)?;
        }
        Ok(geom)
    }

    pub fn total_photons(&self) -> u64 {
        self.frames.iter().map(|f| f.total_photons()).sum()
    }

    pub fn mean_photons(&self) -> f64 {
        self.total_photons() as f64 / self.frames.len().max(1) as f64
    }

    pub fn reference(&self) -> Option<SphereReference> {
        self.meta.with_reference.then(|| SphereReference {
            diameter_px: self.meta.latent.mean_diameter_px,
            contrast: self.meta.contrast,
        })
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTruth {
    pub latent: LatentParams,
    pub state: Option<VariantState>,
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PROBE_STREAM_BASE: u64 = 1 << 62;

/// Fluence factor that makes the mean over `n_probe` latent draws of the total
/// GOOD-pixel intensity equal `target_photons`.
pub fn calibrate_scale(
    source: &FrameSource,
    geom: &DetectorGeometry,
    reference: Option<&SphereReference>,
    latent_cfg: &LatentConfig,
    target_photons: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    if !(target_photons > 0.0) {
        return Err(Error::invalid("target photon count must be positive"));
    }
    let mean = mean_total_intensity(source, geom, reference, latent_cfg, n_probe, seed)?;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::numerical("total rendered intensity is zero"));
    }
    Ok(target_photons / mean)
}

fn mean_total_intensity(
    source: &FrameSource,
    geom: &DetectorGeometry,
    reference: Option<&SphereReference>,
    latent_cfg: &LatentConfig,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    if n_probe == 0 {
        return Err(Error::invalid("need at least one calibration probe"));
    }
    let totals = (0..n_probe)
        .into_par_iter()
        .map(|i| {
            let mut rng = frame_rng(seed, PROBE_STREAM_BASE + i as u64);
            let latent = sample_latents(&mut rng, latent_cfg);
            let (model, _) = source.draw(&mut rng)?;
            let img = render_frame(&model, geom, &latent, reference)?;
            Ok(img.iter().sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(totals.iter().sum::<f64>() / n_probe as f64)
}

/// Renders and Poisson-samples `cfg.n_frames` frames. Returns the dataset and
/// the per-frame ground truth.
pub fn generate_dataset(
    source: &FrameSource,
    geom: &DetectorGeometry,
    cfg: &SimulationConfig,
) -> Result<(SparseDataset, Vec<FrameTruth>)> {
    if source.side() != geom.side() {
        return Err(Error::invalid("object grid does not match detector"));
    }
    if cfg.n_frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    let reference = if cfg.with_reference {
        Some(SphereReference::new(cfg.latent.mean_diameter_px, cfg.contrast)?)
    } else {
        None
    };
    if !(cfg.target_photons > 0.0) {
        return Err(Error::invalid("target photon count must be positive"));
    }
    let mean = mean_total_intensity(source, geom, reference.as_ref(), &cfg.latent, cfg.n_probe, cfg.seed)?;
    // An object that scatters nothing yields empty frames rather than an error.
    let scale = if mean > 0.0 {
        cfg.target_photons / mean
    } else {
        log::warn!("rendered intensity is zero; every frame will be empty");
        0.0
    };
    let frames = (0..cfg.n_frames)
        .into_par_iter()
        .map(|i| {
            let mut rng = frame_rng(cfg.seed, i as u64);
            let latent = sample_latents(&mut rng, &cfg.latent);
            let (model, state) = source.draw(&mut rng)?;
            let model = model.with_scale(scale);
            let img = render_frame(&model, geom, &latent, reference.as_ref())?;
            let frame = poisson_sample(&img, geom, &mut rng)?;
            Ok((frame, FrameTruth { latent, state }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (frames, truth): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
    let meta = DatasetMeta {
        geometry: geom.meta(),
        n_frames: cfg.n_frames,
        mean_photons_target: cfg.target_photons,
        seed: cfg.seed,
        with_reference: cfg.with_reference,
        contrast: cfg.contrast,
        scale,
        latent: cfg.latent,
    };
    Ok((SparseDataset { meta, frames }, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{random_blob_object, TargetSpec};

    fn geom() -> DetectorGeometry {
        DetectorGeometry::new(61, 30.5, 2.0).unwrap()
    }

    fn target(side: usize) -> ComplexModel {
        let spec = TargetSpec {
            side_px: side,
            n_blobs: 10,
            blob_radius_px: (2.0, 4.0),
            extent_px: 12.0,
            density: 1.0,
            seed: 9,
        };
        density_to_model(&random_blob_object(&spec).unwrap())
    }

    #[test]
    fn degenerate_latent_distributions() {
        let cfg = LatentConfig {
            mean_diameter_px: 7.0,
            sigma_diameter_px: 0.0,
            sigma_shift_px: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let l = sample_latents(&mut rng, &cfg);
            assert_eq!(l.diameter_px, 7.0);
            assert_eq!(l.shift_px, [0.0, 0.0]);
            assert!((0.0..2.0 * PI).contains(&l.theta));
        }
    }

    #[test]
    fn latent_moments() {
        let cfg = LatentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let d: Vec<f64> = (0..n).map(|_| sample_latents(&mut rng, &cfg).diameter_px).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 7.0).abs() < 0.01, "mean {mean}");
        assert!((sd - 0.5).abs() < 0.01, "sd {sd}");
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            assert_eq!(sample_latents(&mut a, &cfg), sample_latents(&mut b, &cfg));
        }
    }

    #[test]
    fn poisson_zero_and_errors() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = poisson_sample(&vec![0.0; g.n_pixels()], &g, &mut rng).unwrap();
        assert!(f.is_empty());
        let mut img = vec![1.0; g.n_pixels()];
        img[g.good_pixels()[10] as usize] = -1.0;
        assert!(poisson_sample(&img, &g, &mut rng).is_err());
    }

    #[test]
    fn poisson_single_pixel_zero_probability() {
        let g = DetectorGeometry::new(3, 1.5, 0.0).unwrap();
        let mut img = vec![0.0; 9];
        img[4] = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| poisson_sample(&img, &g, &mut rng).unwrap().is_empty())
            .count();
        let p = (-5.0f64).exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let est = zeros as f64 / n as f64;
        assert!((est - p).abs() < 3.0 * sigma, "{est} vs {p}");
    }

    #[test]
    fn frame_iter_merges_in_order() {
        let f = SparseFrame {
            ones: vec![1, 5, 9],
            multi: vec![3, 7],
            multi_counts: vec![2, 4],
        };
        let v: Vec<_> = f.iter().collect();
        assert_eq!(v, vec![(1, 1), (3, 2), (5, 1), (7, 4), (9, 1)]);
        assert_eq!(f.total_photons(), 9);
    }

    #[test]
    fn calibration_is_linear_and_exact_for_one_probe() {
        let g = geom();
        let src = FrameSource::Static(target(61));
        let r = SphereReference::new(7.0, 11.0).unwrap();
        let cfg = LatentConfig::default();
        let a = calibrate_scale(&src, &g, Some(&r), &cfg, 1e4, 8, 1).unwrap();
        let b = calibrate_scale(&src, &g, Some(&r), &cfg, 2e4, 8, 1).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);

        let one = calibrate_scale(&src, &g, Some(&r), &cfg, 1e4, 1, 1).unwrap();
        let mut rng = frame_rng(1, PROBE_STREAM_BASE);
        let latent = sample_latents(&mut rng, &cfg);
        let img = render_frame(&target(61), &g, &latent, Some(&r)).unwrap();
        let total: f64 = img.iter().sum();
        assert!((one - 1e4 / total).abs() < 1e-12 * one);

        let zero = FrameSource::Static(ComplexModel::zeros(61));
        assert!(calibrate_scale(&zero, &g, None, &cfg, 1e4, 4, 1).is_err());
    }

    #[test]
    fn dataset_mean_photons_and_determinism() {
        let g = geom();
        let src = FrameSource::Static(target(61));
        let cfg = SimulationConfig {
            n_frames: 1000,
            target_photons: 1e4,
            seed: 17,
            ..SimulationConfig::default()
        };
        let (ds, truth) = generate_dataset(&src, &g, &cfg).unwrap();
        assert_eq!(truth.len(), 1000);
        ds.validate().unwrap();
        let mean = ds.mean_photons();
        assert!((9.5e3..1.05e4).contains(&mean), "mean photons {mean}");
        let (again, _) = generate_dataset(&src, &g, &cfg).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn no_reference_and_zero_density_gives_empty_frames() {
        let g = geom();
        let src = FrameSource::Static(ComplexModel::zeros(61));
        let cfg = SimulationConfig {
            n_frames: 3,
            with_reference: false,
            ..SimulationConfig::default()
        };
        let (ds, _) = generate_dataset(&src, &g, &cfg).unwrap();
        assert!(ds.frames.iter().all(|f| f.is_empty()));
        assert!(!ds.meta.with_reference);
    }

    #[test]
    fn single_high_signal_frame_within_poisson_tail() {
        let g = geom();
        let model = target(61);
        let src = FrameSource::Static(model.clone());
        let cfg = SimulationConfig {
            n_frames: 1,
            target_photons: 1e5,
            seed: 23,
            ..SimulationConfig::default()
        };
        let (ds, truth) = generate_dataset(&src, &g, &cfg).unwrap();
        let n = ds.frames[0].total_photons() as f64;
        // Poisson tail of this frame's own expected total; the latent draw moves the
        // expectation itself away from the dataset-wide target.
        let r = SphereReference::new(7.0, 11.0).unwrap();
        let expected: f64 = render_frame(&model.with_scale(ds.meta.scale), &g, &truth[0].latent, Some(&r))
            .unwrap()
            .iter()
            .sum();
        assert!((n - expected).abs() < 5.0 * expected.sqrt(), "{n} vs {expected}");
        assert!((expected / 1e5 - 1.0).abs() < 0.5);
    }
}
