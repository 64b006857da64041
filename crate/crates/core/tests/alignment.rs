//! A reconstruction that is a rigid copy of the truth must give zero latent
//! errors once the alignment is removed.

use hspi::metrics::{latent_errors, rotate_model, rotation_candidates, translate_model};
use hspi::simulate::{FrameSource, SimulationConfig};
use hspi::*;

#[test]
fn rigid_copy_gives_zero_latent_errors() {
    let geom = DetectorGeometry::new(61, 30.5, 1.5).unwrap();
    let truth = density_to_model(
        &random_blob_object(&TargetSpec {
            side_px: 61,
            n_blobs: 16,
            blob_radius_px: (2.0, 4.0),
            extent_px: 14.0,
            density: 1.0,
            seed: 5,
        })
        .unwrap(),
    );
    let grid = LatentGrid::default_for(&LatentConfig::default()).unwrap();
    let cfg = SimulationConfig {
        n_frames: 40,
        target_photons: 1e5,
        seed: 6,
        ..SimulationConfig::default()
    };
    // frames exactly on grid points at quarter turns, where R(theta) s stays on the
    // integer shift lattice, so the only error left is the alignment itself
    let (mut ds, _) = generate_dataset(&FrameSource::Static(truth.clone()), &geom, &cfg).unwrap();
    let truth = truth.with_scale(ds.meta.scale);
    let reference = ds.reference().unwrap();
    let mut true_latents = Vec::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    for (i, frame) in ds.frames.iter_mut().enumerate() {
        let per_theta = grid.len() / grid.thetas().len();
        let i_theta = if i % 4 < 2 { 0 } else { 45 };
        let mut l = grid.params(i_theta * per_theta + (i * 7919 + 13) % per_theta);
        if i % 2 == 1 {
            // the other half-turn of the same intensity
            l.theta += std::f64::consts::PI;
            l.shift_px = [-l.shift_px[0], -l.shift_px[1]];
        }
        let img = render_frame(&truth, &geom, &l, Some(&reference)).unwrap();
        *frame = poisson_sample(&img, &geom, &mut rng).unwrap();
        true_latents.push(l);
    }

    // the reconstruction is the truth displaced, then rotated by a quarter turn,
    // which permutes the lattice without interpolation
    let alpha = 90f64.to_radians();
    let s = [1.0, -1.0];
    let recon = rotate_model(&translate_model(&truth, &geom, [-s[0], -s[1]]), &geom, -alpha);
    let (_, al) = align_global(&recon, &truth, &geom, &rotation_candidates(2.0, 360.0), true).unwrap();
    assert!((al.theta.to_degrees() - 90.0).abs() < 0.3, "{}", al.theta.to_degrees());
    assert!(
        (al.shift[0] - s[0]).abs() < 0.2 && (al.shift[1] - s[1]).abs() < 0.2,
        "{:?}",
        al.shift
    );

    // shift the grid so the hypotheses reachable from the displaced model stay on it
    let shifted = LatentGrid::new(
        grid.thetas().iter().map(|t| t + alpha).collect(),
        grid.diameters().to_vec(),
        hspi::maxlp::arange_inclusive(-4.0, 4.0, 1.0),
        hspi::maxlp::arange_inclusive(-4.0, 4.0, 1.0),
    )
    .unwrap();
    let a = assign_latents(&ds, &recon, &shifted, &geom, &reference).unwrap();
    let e = latent_errors(&a.latents(&shifted), &true_latents, &al).unwrap();
    let s = e.summary;
    assert!(s.sigma_theta_deg < 0.2 && s.bias_theta_deg.abs() < 0.2, "{s:?}");
    assert!(s.sigma_diameter_px < 1e-9, "{s:?}");
    assert!(
        s.sigma_shift_px < 0.1 && s.bias_shift_x_px.abs() < 0.1 && s.bias_shift_y_px.abs() < 0.1,
        "{s:?}"
    );
}
