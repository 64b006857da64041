//! Holographic single-particle imaging.
//!
//! Simulates sparse Poisson diffraction data from a target object conjugated to a
//! spherical reference particle, and recovers the target's complex Fourier transform
//! by hard latent-parameter assignment plus per-pixel maximum-likelihood pattern
//! search. Also contains the phase-retrieval fill-in stage, a conventional
//! (reference-free) EMC baseline and the evaluation metrics used to compare them.

pub mod baseline;
pub mod error;
pub mod fft;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod maxlp;
pub mod metrics;
pub mod object;
pub mod phase;
pub mod simulate;

pub use baseline::{baseline_reconstruct, emc_intensity, BaselineConfig, EmcConfig, IntensityModel};
pub use error::{Error, Result};
pub use forward::{composite_intensity, render_frame, sphere_ft, ComplexModel, SphereReference};
pub use geometry::{rotate_coord, DetectorGeometry, PixelClass};
pub use maxlp::{
    assign_latents, frame_log_likelihood, maxlp_reconstruct, pixel_pattern_search, update_model, Assignment,
    LatentGrid, MaxlpConfig, Observation, PixelObservations, Reconstruction, SearchConfig,
};
pub use metrics::{align_global, frc, latent_errors, resolution_at_half, FrcCurve};
pub use object::{density_to_model, random_blob_object, DensityGrid, TargetSpec};
pub use phase::{difference_map, estimate_support, SupportMask};
pub use simulate::{
    calibrate_scale, generate_dataset, poisson_sample, sample_latents, LatentConfig, LatentParams, SparseDataset,
    SparseFrame,
};

pub use num_complex::Complex64;
