//! Centered 2D discrete Fourier transforms on odd square grids.
//!
//! Convention: `F(q) = sum_r rho(r) exp(+2 pi i q.r)` with both `r` and `q`
//! measured from the central pixel. With this sign a density displaced by `t`
//! picks up the phase ramp `exp(+2 pi i q.t)`, which is the ramp the forward
//! model applies to the reference sphere.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

pub struct CenteredFft2 {
    side: usize,
    plus: Arc<dyn Fft<f64>>,
    minus: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    work: Vec<Complex64>,
}

impl CenteredFft2 {
    pub fn new(side: usize) -> Self {
        let mut planner = FftPlanner::new();
        let plus = planner.plan_fft(side, FftDirection::Inverse);
        let minus = planner.plan_fft(side, FftDirection::Forward);
        let scratch_len = plus.get_inplace_scratch_len().max(minus.get_inplace_scratch_len());
        Self {
            side,
            plus,
            minus,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            work: vec![Complex64::new(0.0, 0.0); side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Real-space grid to Fourier model (no normalization).
    pub fn forward(&mut self, data: &mut [Complex64]) {
        let plan = self.plus.clone();
        self.transform(data, plan.as_ref());
    }

    /// Fourier model to real-space grid, normalized so that it inverts [`Self::forward`].
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        let plan = self.minus.clone();
        self.transform(data, plan.as_ref());
        let norm = 1.0 / (self.side * self.side) as f64;
        data.iter_mut().for_each(|v| *v *= norm);
    }

    fn transform(&mut self, data: &mut [Complex64], plan: &dyn Fft<f64>) {
        let n = self.side;
        assert_eq!(data.len(), n * n, "grid size mismatch");
        let shift = n / 2 + 1; // (i - c) mod n == (i + c + 1) mod n for odd n
                               // centered -> origin-first layout
        for row in 0..n {
            let dst_row = (row + shift) % n;
            for col in 0..n {
                self.work[dst_row * n + (col + shift) % n] = data[row * n + col];
            }
        }
        for chunk in self.work.chunks_exact_mut(n) {
            plan.process_with_scratch(chunk, &mut self.scratch);
        }
        transpose(&self.work, data, n);
        for chunk in data.chunks_exact_mut(n) {
            plan.process_with_scratch(chunk, &mut self.scratch);
        }
        transpose(data, &mut self.work, n);
        // origin-first -> centered layout
        for row in 0..n {
            let src_row = (row + shift) % n;
            for col in 0..n {
                data[row * n + col] = self.work[src_row * n + (col + shift) % n];
            }
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in 0..n {
            dst[c * n + r] = src[r * n + c];
        }
    }
}

/// One-shot centered forward transform of a real grid.
pub fn forward_real(side: usize, data: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    CenteredFft2::new(side).forward(&mut buf);
    buf
}

/// One-shot centered inverse transform.
pub fn inverse(side: usize, data: &[Complex64]) -> Vec<Complex64> {
    let mut buf = data.to_vec();
    CenteredFft2::new(side).inverse(&mut buf);
    buf
}
