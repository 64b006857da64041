//! Shared fixtures for the kernel benchmarks.

use hspi::maxlp::{Observation, PixelObservations};
use hspi::simulate::{FrameSource, SimulationConfig};
use hspi::{
    density_to_model, generate_dataset, random_blob_object, ComplexModel, DetectorGeometry, LatentGrid, SparseDataset,
    SphereReference, TargetSpec,
};

pub struct Fixture {
    pub geom: DetectorGeometry,
    pub truth: ComplexModel,
    pub dataset: SparseDataset,
    pub grid: LatentGrid,
    pub reference: SphereReference,
}

/// The standard blob target on a `side`-pixel detector with `n_frames` frames.
pub fn fixture(side: usize, n_frames: usize, photons: f64) -> Fixture {
    let geom = DetectorGeometry::new(side, side as f64 / 2.0, 4.0).expect("valid detector");
    let density = random_blob_object(&TargetSpec {
        side_px: side,
        n_blobs: 12,
        extent_px: side as f64 / 5.0,
        seed: 1,
        ..TargetSpec::default()
    })
    .expect("valid target");
    let cfg = SimulationConfig {
        n_frames,
        target_photons: photons,
        seed: 2,
        n_probe: 64,
        ..SimulationConfig::default()
    };
    let model = density_to_model(&density);
    let (dataset, _) = generate_dataset(&FrameSource::Static(model.clone()), &geom, &cfg).expect("simulation");
    let truth = model.with_scale(dataset.meta.scale);
    let grid = LatentGrid::default_for(&cfg.latent).expect("grid");
    let reference = dataset.reference().expect("holographic dataset");
    Fixture {
        geom,
        truth,
        dataset,
        grid,
        reference,
    }
}

/// A single-pixel problem with `n` observations spread over the reference phase circle.
pub fn pixel_problem(n: usize) -> PixelObservations {
    let entries = (0..n)
        .map(|i| {
            let phase = i as f64 * 2.399_963;
            Observation {
                count: 5 + (i % 7) as u32,
                ref_amp: 1.0 + 0.1 * (i % 5) as f64,
                phase,
            }
        })
        .collect();
    PixelObservations { scale: 3.0, entries }
}
