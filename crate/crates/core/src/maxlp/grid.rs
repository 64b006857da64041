use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::{LatentConfig, LatentParams};

/// Cartesian grid of latent hypotheses searched by the E-step.
///
/// Hypothesis index: `((i_theta * n_d + i_d) * n_x + i_x) * n_y + i_y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    thetas: Vec<f64>,
    diameters: Vec<f64>,
    shifts_x: Vec<f64>,
    shifts_y: Vec<f64>,
}

fn check_axis(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("latent grid axis '{name}' is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "latent grid axis '{name}' has non-finite values"
        )));
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "latent grid axis '{name}' must be strictly increasing"
        )));
    }
    Ok(())
}

/// `lo, lo + step, ...` up to `hi` inclusive (with a small tolerance on the last point).
pub fn arange_inclusive(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| lo + i as f64 * step).collect()
}

fn axis_step(v: &[f64]) -> f64 {
    if v.len() < 2 {
        0.0
    } else {
        (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
    }
}

impl LatentGrid {
    pub fn new(thetas: Vec<f64>, diameters: Vec<f64>, shifts_x: Vec<f64>, shifts_y: Vec<f64>) -> Result<Self> {
        check_axis("thetas", &thetas)?;
        check_axis("diameters", &diameters)?;
        check_axis("shifts_x", &shifts_x)?;
        check_axis("shifts_y", &shifts_y)?;
        if diameters[0] <= 0.0 {
            return Err(Error::invalid("reference diameters must be positive"));
        }
        Ok(Self {
            thetas,
            diameters,
            shifts_x,
            shifts_y,
        })
    }

    /// Regular grid: `theta_step_deg` over `[0, 180)`, diameters `mu +- 2 sigma`
    /// in steps of `diameter_step`, shifts `+-shift_range` in steps of `shift_step`.
    pub fn regular(
        theta_step_deg: f64,
        latent: &LatentConfig,
        diameter_step: f64,
        shift_range: f64,
        shift_step: f64,
    ) -> Result<Self> {
        if !(theta_step_deg > 0.0) || !(diameter_step > 0.0) || !(shift_step > 0.0) || !(shift_range >= 0.0) {
            return Err(Error::invalid("grid steps must be positive"));
        }
        let n_theta = (180.0 / theta_step_deg - 1e-9).ceil() as usize;
        let thetas = (0..n_theta).map(|i| (i as f64 * theta_step_deg).to_radians()).collect();
        let half = (2.0 * latent.sigma_diameter_px / diameter_step + 1e-9).floor() * diameter_step;
        let diameters = arange_inclusive(
            latent.mean_diameter_px - half,
            latent.mean_diameter_px + half,
            diameter_step,
        );
        let shift_half = (shift_range / shift_step + 1e-9).floor() * shift_step;
        let shifts = arange_inclusive(-shift_half, shift_half, shift_step);
        Self::new(thetas, diameters, shifts.clone(), shifts)
    }

    /// 2 degree rotations, 0.5 px diameters over `mu +- 2 sigma`, +-2 px shifts at 1 px.
    pub fn default_for(latent: &LatentConfig) -> Result<Self> {
        Self::regular(2.0, latent, 0.5, 2.0, 1.0)
    }

    pub fn single(latent: &LatentParams) -> Result<Self> {
        Self::new(
            vec![latent.theta],
            vec![latent.diameter_px],
            vec![latent.shift_px[0]],
            vec![latent.shift_px[1]],
        )
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    pub fn shifts_x(&self) -> &[f64] {
        &self.shifts_x
    }

    pub fn shifts_y(&self) -> &[f64] {
        &self.shifts_y
    }

    pub fn len(&self) -> usize {
        self.thetas.len() * self.per_theta()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Hypotheses sharing one rotation.
    pub(crate) fn per_theta(&self) -> usize {
        self.diameters.len() * self.shifts_x.len() * self.shifts_y.len()
    }

    /// Mean spacing of each axis: `(theta, diameter, shift_x, shift_y)`; 0 for single-value axes.
    pub fn steps(&self) -> [f64; 4] {
        [
            axis_step(&self.thetas),
            axis_step(&self.diameters),
            axis_step(&self.shifts_x),
            axis_step(&self.shifts_y),
        ]
    }

    pub fn index(&self, i_theta: usize, i_d: usize, i_x: usize, i_y: usize) -> usize {
        ((i_theta * self.diameters.len() + i_d) * self.shifts_x.len() + i_x) * self.shifts_y.len() + i_y
    }

    pub fn unravel(&self, index: usize) -> [usize; 4] {
        let ny = self.shifts_y.len();
        let nx = self.shifts_x.len();
        let nd = self.diameters.len();
        [
            index / (ny * nx * nd),
            (index / (ny * nx)) % nd,
            (index / ny) % nx,
            index % ny,
        ]
    }

    pub fn params(&self, index: usize) -> LatentParams {
        let [t, d, x, y] = self.unravel(index);
        LatentParams {
            theta: self.thetas[t],
            diameter_px: self.diameters[d],
            shift_px: [self.shifts_x[x], self.shifts_y[y]],
        }
    }

    /// Grid index closest to `latent`, folding rotations into the grid's half-turn
    /// when all grid angles lie in `[0, pi)` (the second half-turn negates the shift).
    pub fn nearest(&self, latent: &LatentParams) -> usize {
        let half_turn = self.thetas.iter().all(|&t| (0.0..PI).contains(&t));
        let mut theta = latent.theta.rem_euclid(2.0 * PI);
        let mut shift = latent.shift_px;
        if half_turn && theta >= PI {
            theta -= PI;
            shift = [-shift[0], -shift[1]];
        }
        let period = if half_turn { PI } else { 2.0 * PI };
        let i_t = argmin(&self.thetas, |v| {
            let d = (v - theta).rem_euclid(period);
            d.min(period - d)
        });
        let i_d = argmin(&self.diameters, |v| (v - latent.diameter_px).abs());
        let i_x = argmin(&self.shifts_x, |v| (v - shift[0]).abs());
        let i_y = argmin(&self.shifts_y, |v| (v - shift[1]).abs());
        self.index(i_t, i_d, i_x, i_y)
    }
}

fn argmin(v: &[f64], dist: impl Fn(f64) -> f64) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if dist(x) < dist(v[best]) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = LatentGrid::default_for(&LatentConfig::default()).unwrap();
        assert_eq!(g.thetas().len(), 90);
        assert!((g.thetas()[89].to_degrees() - 178.0).abs() < 1e-9);
        assert_eq!(g.diameters(), &[6.0, 6.5, 7.0, 7.5, 8.0]);
        assert_eq!(g.shifts_x(), &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(g.len(), 90 * 125);
        let s = g.steps();
        assert!((s[0].to_degrees() - 2.0).abs() < 1e-9);
        assert_eq!(&s[1..], &[0.5, 1.0, 1.0]);
    }

    #[test]
    fn index_round_trip() {
        let g = LatentGrid::default_for(&LatentConfig::default()).unwrap();
        for idx in [0, 1, 124, 125, 5000, g.len() - 1] {
            let [a, b, c, d] = g.unravel(idx);
            assert_eq!(g.index(a, b, c, d), idx);
            assert_eq!(g.nearest(&g.params(idx)), idx);
        }
    }

    #[test]
    fn nearest_folds_second_half_turn() {
        let g = LatentGrid::default_for(&LatentConfig::default()).unwrap();
        let l = LatentParams {
            theta: (190.0f64).to_radians(),
            diameter_px: 7.1,
            shift_px: [1.2, -0.7],
        };
        let p = g.params(g.nearest(&l));
        assert!((p.theta.to_degrees() - 10.0).abs() < 1e-9);
        assert_eq!(p.shift_px, [-1.0, 1.0]);
        assert_eq!(p.diameter_px, 7.0);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(LatentGrid::new(vec![], vec![7.0], vec![0.0], vec![0.0]).is_err());
        assert!(LatentGrid::new(vec![0.0, 0.0], vec![7.0], vec![0.0], vec![0.0]).is_err());
        assert!(LatentGrid::new(vec![0.0], vec![-1.0], vec![0.0], vec![0.0]).is_err());
    }
}
