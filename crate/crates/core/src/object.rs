//! Ground-truth target objects.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::forward::ComplexModel;

/// Real-space projected electron density on a `side x side` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    side: usize,
    pub data: Vec<f64>,
}

impl DensityGrid {
    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            data: vec![0.0; side * side],
        }
    }

    pub fn from_vec(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::invalid(format!(
                "density of {} values does not match side {side}",
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn center(&self) -> f64 {
        (self.side - 1) as f64 / 2.0
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add(&self, other: &DensityGrid) -> Result<DensityGrid> {
        if other.side != self.side {
            return Err(Error::invalid("density grids of different size"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DensityGrid { side: self.side, data })
    }

    pub fn scaled(&self, factor: f64) -> DensityGrid {
        DensityGrid {
            side: self.side,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Pixel-integrated projected profile of a uniform sphere added at `center`
    /// (col, row), using `oversample^2` sub-samples per pixel.
    pub fn add_sphere(&mut self, center: (f64, f64), radius: f64, density: f64, oversample: usize) {
        let n = self.side as isize;
        let sub = oversample.max(1);
        let inv = 1.0 / sub as f64;
        let r2 = radius * radius;
        let lo_c = ((center.0 - radius - 1.0).floor() as isize).max(0);
        let hi_c = ((center.0 + radius + 1.0).ceil() as isize).min(n - 1);
        let lo_r = ((center.1 - radius - 1.0).floor() as isize).max(0);
        let hi_r = ((center.1 + radius + 1.0).ceil() as isize).min(n - 1);
        for row in lo_r..=hi_r {
            for col in lo_c..=hi_c {
                let mut acc = 0.0;
                for sy in 0..sub {
                    let y = row as f64 - 0.5 + (sy as f64 + 0.5) * inv - center.1;
                    for sx in 0..sub {
                        let x = col as f64 - 0.5 + (sx as f64 + 0.5) * inv - center.0;
                        let d2 = x * x + y * y;
                        if d2 < r2 {
                            acc += 2.0 * (r2 - d2).sqrt();
                        }
                    }
                }
                self.data[row as usize * self.side + col as usize] += density * acc * inv * inv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub side_px: usize,
    pub n_blobs: usize,
    /// Inclusive range the blob radii are drawn from uniformly.
    pub blob_radius_px: (f64, f64),
    /// Radius of the disc that contains the whole object.
    pub extent_px: f64,
    pub density: f64,
    pub seed: u64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            side_px: 185,
            n_blobs: 24,
            blob_radius_px: (2.0, 5.0),
            extent_px: 17.5,
            density: 1.0,
            seed: 0,
        }
    }
}

/// Blob placement used by [`random_blob_object`]; exposed for analytic checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
}

const SPHERE_OVERSAMPLE: usize = 8;

pub fn blob_layout(spec: &TargetSpec) -> Result<Vec<Blob>> {
    let (r_lo, r_hi) = spec.blob_radius_px;
    if spec.n_blobs == 0 {
        return Err(Error::invalid("target needs at least one blob"));
    }
    if !(r_lo > 0.0) || r_hi < r_lo {
        return Err(Error::invalid(format!("invalid blob radius range ({r_lo}, {r_hi})")));
    }
    if r_hi > spec.extent_px {
        return Err(Error::invalid(format!(
            "blob radius {r_hi} exceeds object extent {}",
            spec.extent_px
        )));
    }
    if spec.side_px < 3 || spec.side_px % 2 == 0 {
        return Err(Error::invalid("object grid side must be odd and >= 3"));
    }
    if spec.extent_px + 1.0 > (spec.side_px - 1) as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "object extent {} does not fit in a {} grid",
            spec.extent_px, spec.side_px
        )));
    }
    let c = (spec.side_px - 1) as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blobs: Vec<Blob> = (0..spec.n_blobs)
        .map(|_| {
            let radius = if r_hi > r_lo {
                rng.random_range(r_lo..=r_hi)
            } else {
                r_lo
            };
            let reach = spec.extent_px - radius;
            let rho = reach * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            Blob {
                center: (rho * phi.cos(), rho * phi.sin()),
                radius,
            }
        })
        .collect();
    // put the center of mass on the grid center (blob mass goes as radius^3),
    // contracting the layout about it if a blob would leave the extent disc
    let mass: f64 = blobs.iter().map(|b| b.radius.powi(3)).sum();
    let mx = blobs.iter().map(|b| b.radius.powi(3) * b.center.0).sum::<f64>() / mass;
    let my = blobs.iter().map(|b| b.radius.powi(3) * b.center.1).sum::<f64>() / mass;
    let mut shrink: f64 = 1.0;
    for b in &blobs {
        let d = (b.center.0 - mx).hypot(b.center.1 - my);
        if d > 0.0 {
            shrink = shrink.min((spec.extent_px - b.radius) / d);
        }
    }
    for b in &mut blobs {
        b.center = (c + shrink * (b.center.0 - mx), c + shrink * (b.center.1 - my));
    }
    Ok(blobs)
}

/// Agglomerate of projected spheres with uniform-random centers inside the extent disc,
/// recentered so its center of mass sits on the grid center.
pub fn random_blob_object(spec: &TargetSpec) -> Result<DensityGrid> {
    let blobs = blob_layout(spec)?;
    let mut grid = DensityGrid::zeros(spec.side_px);
    for b in &blobs {
        grid.add_sphere(b.center, b.radius, spec.density, SPHERE_OVERSAMPLE);
    }
    Ok(grid)
}

/// A single projected sphere centered on the grid; the default movable subunit.
pub fn sphere_subunit(side: usize, radius: f64, density: f64) -> DensityGrid {
    let mut g = DensityGrid::zeros(side);
    let c = (side - 1) as f64 / 2.0;
    g.add_sphere((c, c), radius, density, SPHERE_OVERSAMPLE);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Heterogeneity {
    /// Subunit sits at `+offset` (state A) or `-offset` (state B) from the base center.
    TwoState { offset: [f64; 2] },
    /// Subunit displaced from `nominal` by an isotropic normal draw.
    Continuous { nominal: [f64; 2], sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VariantState {
    A,
    B,
    Displaced([f64; 2]),
}

impl VariantState {
    pub fn label(&self) -> String {
        match self {
            VariantState::A => "A".to_string(),
            VariantState::B => "B".to_string(),
            VariantState::Displaced([dx, dy]) => format!("{dx:.6};{dy:.6}"),
        }
    }
}

impl Heterogeneity {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> VariantState {
        match *self {
            Heterogeneity::TwoState { .. } => {
                if rng.random_bool(0.5) {
                    VariantState::A
                } else {
                    VariantState::B
                }
            }
            Heterogeneity::Continuous { sigma, .. } => {
                if sigma == 0.0 {
                    return VariantState::Displaced([0.0, 0.0]);
                }
                let n = Normal::new(0.0, sigma).expect("sigma validated by caller");
                VariantState::Displaced([n.sample(rng), n.sample(rng)])
            }
        }
    }

    /// Offset of the subunit from the grid center for a given state.
    pub fn offset(&self, state: &VariantState) -> Result<[f64; 2]> {
        match (self, state) {
            (Heterogeneity::TwoState { offset }, VariantState::A) => Ok(*offset),
            (Heterogeneity::TwoState { offset }, VariantState::B) => Ok([-offset[0], -offset[1]]),
            (Heterogeneity::Continuous { nominal, .. }, VariantState::Displaced(d)) => {
                Ok([nominal[0] + d[0], nominal[1] + d[1]])
            }
            _ => Err(Error::invalid("variant state does not match heterogeneity mode")),
        }
    }
}

/// Returns `base` plus `subunit` translated by `offset` pixels with bilinear splatting.
pub fn place_subunit(base: &DensityGrid, subunit: &DensityGrid, offset: [f64; 2]) -> Result<DensityGrid> {
    if base.side != subunit.side {
        return Err(Error::invalid("base and subunit grids differ in size"));
    }
    let n = base.side as isize;
    let mut out = base.clone();
    let ox = offset[0].floor();
    let oy = offset[1].floor();
    let fx = offset[0] - ox;
    let fy = offset[1] - oy;
    let (ox, oy) = (ox as isize, oy as isize);
    let weights = [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ];
    for row in 0..n {
        for col in 0..n {
            let v = subunit.data[(row * n + col) as usize];
            if v == 0.0 {
                continue;
            }
            for &(dx, dy, w) in &weights {
                if w == 0.0 {
                    continue;
                }
                let c = col + ox + dx;
                let r = row + oy + dy;
                if c < 0 || r < 0 || c >= n || r >= n {
                    return Err(Error::invalid(format!(
                        "subunit offset ({}, {}) pushes density outside the grid",
                        offset[0], offset[1]
                    )));
                }
                out.data[(r * n + c) as usize] += v * w;
            }
        }
    }
    Ok(out)
}

/// Base plus subunit in the given state.
pub fn heterogeneous_variant(
    base: &DensityGrid,
    subunit: &DensityGrid,
    mode: &Heterogeneity,
    state: &VariantState,
) -> Result<DensityGrid> {
    place_subunit(base, subunit, mode.offset(state)?)
}

/// Real-space average over the state distribution: the two-state mean, or the
/// nominal composite blurred by the displacement distribution (Gauss-Hermite).
pub fn average_structure(base: &DensityGrid, subunit: &DensityGrid, mode: &Heterogeneity) -> Result<DensityGrid> {
    match mode {
        Heterogeneity::TwoState { .. } => {
            let a = heterogeneous_variant(base, subunit, mode, &VariantState::A)?;
            let b = heterogeneous_variant(base, subunit, mode, &VariantState::B)?;
            Ok(a.add(&b)?.scaled(0.5))
        }
        Heterogeneity::Continuous { nominal, sigma } => {
            // 7-point Gauss-Hermite rule for E[f(X)], X ~ N(0, sigma^2)
            const NODES: [f64; 7] = [
                -2.651_961_356_835_233,
                -1.673_551_628_767_471,
                -0.816_287_882_858_965,
                0.0,
                0.816_287_882_858_965,
                1.673_551_628_767_471,
                2.651_961_356_835_233,
            ];
            const WEIGHTS: [f64; 7] = [
                0.000_971_781_245_099_519,
                0.054_515_582_819_127,
                0.425_607_252_610_128,
                0.810_264_617_556_807,
                0.425_607_252_610_128,
                0.054_515_582_819_127,
                0.000_971_781_245_099_519,
            ];
            let norm = 1.0 / PI;
            let mut acc = DensityGrid::zeros(base.side);
            let s = sigma * std::f64::consts::SQRT_2;
            for (xi, wi) in NODES.iter().zip(WEIGHTS) {
                for (yj, wj) in NODES.iter().zip(WEIGHTS) {
                    let off = [nominal[0] + s * xi, nominal[1] + s * yj];
                    let placed = place_subunit(&DensityGrid::zeros(base.side), subunit, off)?;
                    let w = wi * wj * norm;
                    acc.data.iter_mut().zip(&placed.data).for_each(|(a, v)| *a += w * v);
                }
            }
            acc.add(base)
        }
    }
}

/// Centered DFT of a real density; every pixel flagged reliable, unit scale.
pub fn density_to_model(density: &DensityGrid) -> ComplexModel {
    let grid = fft::forward_real(density.side, &density.data);
    let n = density.side;
    ComplexModel::new(n, grid, vec![true; n * n], 1.0).expect("sizes agree by construction")
}

/// Real part of the centered inverse DFT of a model.
pub fn model_to_density(model: &ComplexModel) -> DensityGrid {
    let n = model.side();
    let back = fft::inverse(n, &model.grid);
    DensityGrid {
        side: n,
        data: back.iter().map(|c| c.re).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> TargetSpec {
        TargetSpec {
            side_px: 61,
            n_blobs: 12,
            blob_radius_px: (2.0, 4.0),
            extent_px: 14.0,
            density: 1.0,
            seed,
        }
    }

    #[test]
    fn single_centered_blob_is_radial_with_central_max() {
        let g = sphere_subunit(31, 4.0, 1.0);
        let c = 15usize;
        let peak = g.data[c * 31 + c];
        assert!(g.data.iter().all(|&v| v <= peak));
        for (dr, dc) in [(0, 2), (2, 0), (0, -2), (-2, 0)] {
            let v = g.data[((c as isize + dr) as usize) * 31 + (c as isize + dc) as usize];
            assert!((v - g.data[c * 31 + c + 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = random_blob_object(&small_spec(42)).unwrap();
        let b = random_blob_object(&small_spec(42)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_blob_object(&small_spec(43)).unwrap());
    }

    #[test]
    fn integrated_density_matches_analytic_volumes() {
        let spec = small_spec(7);
        let blobs = blob_layout(&spec).unwrap();
        let analytic: f64 = blobs
            .iter()
            .map(|b| 4.0 / 3.0 * PI * b.radius.powi(3) * spec.density)
            .sum();
        let g = random_blob_object(&spec).unwrap();
        assert!((g.sum() - analytic).abs() / analytic < 0.01);
        assert!(g.data.iter().all(|&v| v >= 0.0));
        // support within extent disc
        let c = g.center();
        for row in 0..61 {
            for col in 0..61 {
                let r = (row as f64 - c).hypot(col as f64 - c);
                if r > spec.extent_px + 1.0 {
                    assert_eq!(g.data[row * 61 + col], 0.0);
                }
            }
        }
    }

    #[test]
    fn center_of_mass_on_grid_center() {
        for seed in 0..5 {
            let spec = small_spec(seed);
            let g = random_blob_object(&spec).unwrap();
            let c = g.center();
            let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
            for row in 0..61 {
                for col in 0..61 {
                    let v = g.data[row * 61 + col];
                    m += v;
                    mx += v * col as f64;
                    my += v * row as f64;
                }
            }
            assert!((mx / m - c).abs() < 0.02 && (my / m - c).abs() < 0.02, "seed {seed}");
            for b in blob_layout(&spec).unwrap() {
                assert!((b.center.0 - c).hypot(b.center.1 - c) + b.radius <= spec.extent_px + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_oversized_blobs() {
        let mut spec = small_spec(1);
        spec.blob_radius_px = (2.0, 20.0);
        assert!(random_blob_object(&spec).is_err());
        spec.blob_radius_px = (2.0, 3.0);
        spec.n_blobs = 0;
        assert!(random_blob_object(&spec).is_err());
    }

    #[test]
    fn two_state_variants_mirror_and_average() {
        let side = 61;
        let base = random_blob_object(&small_spec(3)).unwrap();
        let sub = sphere_subunit(side, 3.0, 1.0);
        let mode = Heterogeneity::TwoState { offset: [8.0, 0.0] };
        let a = heterogeneous_variant(&base, &sub, &mode, &VariantState::A).unwrap();
        let b = heterogeneous_variant(&base, &sub, &mode, &VariantState::B).unwrap();
        let zero = DensityGrid::zeros(side);
        let sa = heterogeneous_variant(&zero, &sub, &mode, &VariantState::A).unwrap();
        let sb = heterogeneous_variant(&zero, &sub, &mode, &VariantState::B).unwrap();
        for p in 0..side * side {
            assert!((sa.data[p] - sb.data[side * side - 1 - p]).abs() < 1e-12);
        }
        let avg = average_structure(&base, &sub, &mode).unwrap();
        for p in 0..side * side {
            assert!((avg.data[p] - 0.5 * (a.data[p] + b.data[p])).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_zero_displacement_is_nominal() {
        let side = 61;
        let base = random_blob_object(&small_spec(3)).unwrap();
        let sub = sphere_subunit(side, 3.0, 1.0);
        let mode = Heterogeneity::Continuous {
            nominal: [6.0, -2.0],
            sigma: 0.5,
        };
        let v = heterogeneous_variant(&base, &sub, &mode, &VariantState::Displaced([0.0, 0.0])).unwrap();
        let nominal = place_subunit(&base, &sub, [6.0, -2.0]).unwrap();
        assert_eq!(v, nominal);
        assert!(place_subunit(&base, &sub, [40.0, 0.0]).is_err());
    }

    #[test]
    fn continuous_mean_is_gaussian_blur() {
        // Oracle: explicit convolution with the pixel-integrated sigma = 0.5 Gaussian.
        let side = 41;
        let sub = sphere_subunit(side, 3.0, 1.0);
        let zero = DensityGrid::zeros(side);
        let mode = Heterogeneity::Continuous {
            nominal: [0.0, 0.0],
            sigma: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut mean = vec![0.0; side * side];
        for _ in 0..draws {
            let state = mode.draw(&mut rng);
            let v = heterogeneous_variant(&zero, &sub, &mode, &state).unwrap();
            mean.iter_mut().zip(&v.data).for_each(|(m, x)| *m += x / draws as f64);
        }
        // pixel-integrated Gaussian kernel, radius 3
        let erf = erf_series;
        let cell = |k: f64| 0.5 * (erf((k + 0.5) / (0.5 * 2f64.sqrt())) - erf((k - 0.5) / (0.5 * 2f64.sqrt())));
        let k1: Vec<f64> = (-3..=3).map(|k| cell(k as f64)).collect();
        let mut oracle = vec![0.0; side * side];
        for r in 3..side - 3 {
            for c in 3..side - 3 {
                let mut acc = 0.0;
                for (i, wy) in k1.iter().enumerate() {
                    for (j, wx) in k1.iter().enumerate() {
                        acc += wy * wx * sub.data[(r + i - 3) * side + (c + j - 3)];
                    }
                }
                oracle[r * side + c] = acc;
            }
        }
        let num: f64 = mean.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = oracle.iter().map(|b| b * b).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative L2 error {rel}");
    }

    // Taylor series; fine for the |x| < 6 arguments used above.
    fn erf_series(x: f64) -> f64 {
        if x.abs() > 6.0 {
            return x.signum();
        }
        let mut sum = x;
        let mut term = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    }

    #[test]
    fn model_has_friedel_and_parseval() {
        let g = random_blob_object(&small_spec(5)).unwrap();
        let m = density_to_model(&g);
        let n = g.side();
        let total: f64 = g.sum();
        let c = n / 2;
        assert!((m.grid[c * n + c].re - total).abs() < 1e-9 * total);
        let mut lhs = 0.0;
        for p in 0..n * n {
            let mirror = n * n - 1 - p;
            assert!((m.grid[p] - m.grid[mirror].conj()).norm() < 1e-10 * total);
            lhs += m.grid[p].norm_sqr();
        }
        let rhs = (n * n) as f64 * g.data.iter().map(|v| v * v).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-9 * rhs);

        let mut delta = DensityGrid::zeros(n);
        delta.data[c * n + c] = 3.0;
        let dm = density_to_model(&delta);
        assert!(dm.grid.iter().all(|v| (v.norm() - 3.0).abs() < 1e-12));
        let back = model_to_density(&m);
        for (a, b) in back.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
