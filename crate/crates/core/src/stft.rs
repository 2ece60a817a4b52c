//! Short-time Fourier magnitude via precomputed DFT bases.
//!
//! Spectra are computed as plain matrix products against cosine/sine basis
//! matrices so the whole pipeline stays inside the differentiable tape:
//! frame → window → two GEMMs → `sqrt(re^2 + im^2 + eps)`. For the signal
//! lengths used here (thousands of samples, windows ≤ 512) this is fast
//! enough and keeps one code path for losses, the discriminator, and the
//! evaluation embedder.

use ndarray::{Array1, Array2};

use crate::graph::{Tape, Var};
use crate::scalar::{c, Scalar};

/// Small constant inside the magnitude square root, keeping gradients finite
/// at spectral zeros.
pub const MAG_EPS: f64 = 1e-12;

/// Precomputed window and DFT bases for one STFT resolution.
#[derive(Debug, Clone)]
pub struct StftPlan<T: Scalar> {
    pub win_len: usize,
    pub hop: usize,
    window: Array1<T>,
    /// `[bins, win_len]` cosine basis, `bins = win_len / 2 + 1`.
    cos_basis: Array2<T>,
    /// `[bins, win_len]` sine basis.
    sin_basis: Array2<T>,
}

impl<T: Scalar> StftPlan<T> {
    /// Builds a plan with a periodic Hann window.
    pub fn new(win_len: usize, hop: usize) -> Self {
        assert!(win_len >= 2 && hop >= 1, "degenerate STFT geometry");
        let bins = win_len / 2 + 1;
        let mut window = Array1::<T>::zeros(win_len);
        for (n, w) in window.iter_mut().enumerate() {
            let x = std::f64::consts::TAU * n as f64 / win_len as f64;
            *w = c::<T>(0.5 * (1.0 - x.cos()));
        }
        let mut cos_basis = Array2::<T>::zeros((bins, win_len));
        let mut sin_basis = Array2::<T>::zeros((bins, win_len));
        for k in 0..bins {
            for n in 0..win_len {
                let x = std::f64::consts::TAU * (k * n) as f64 / win_len as f64;
                cos_basis[(k, n)] = c::<T>(x.cos());
                sin_basis[(k, n)] = c::<T>(-x.sin());
            }
        }
        StftPlan {
            win_len,
            hop,
            window,
            cos_basis,
            sin_basis,
        }
    }

    pub fn bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    /// Number of frames for a signal of `len` samples (no padding).
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            (len - self.win_len) / self.hop + 1
        }
    }

    /// Magnitude spectrogram `[frames, bins]` of a 1-D signal on the tape.
    pub fn magnitude_tape(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let framed = tape.frames(x, self.win_len, self.hop);
        let win = tape.constant1(self.window.clone());
        let windowed = tape.mul_row(framed, win);
        let cos_b = tape.constant(self.cos_basis.clone().into_dyn());
        let sin_b = tape.constant(self.sin_basis.clone().into_dyn());
        let re = tape.matmul_nt(windowed, cos_b);
        let im = tape.matmul_nt(windowed, sin_b);
        let re2 = tape.square(re);
        let im2 = tape.square(im);
        let power = tape.add(re2, im2);
        let shifted = tape.add_scalar(power, c::<T>(MAG_EPS));
        tape.sqrt(shifted)
    }

    /// Magnitude spectrogram without a tape (evaluation-only paths).
    pub fn magnitude(&self, x: &Array1<T>) -> Array2<T> {
        let frames = self.num_frames(x.len());
        let mut out = Array2::<T>::zeros((frames, self.bins()));
        for f in 0..frames {
            let start = f * self.hop;
            for k in 0..self.bins() {
                let mut re = T::zero();
                let mut im = T::zero();
                for n in 0..self.win_len {
                    let s = x[start + n] * self.window[n];
                    re = re + s * self.cos_basis[(k, n)];
                    im = im + s * self.sin_basis[(k, n)];
                }
                out[(f, k)] = (re * re + im * im + c::<T>(MAG_EPS)).sqrt();
            }
        }
        out
    }
}

/// Standard multi-resolution set used by spectral losses, scaled for short
/// low-rate clips.
pub fn default_resolutions() -> Vec<(usize, usize)> {
    vec![(256, 64), (128, 32), (64, 16)]
}

/// Mean L1 distance between magnitude spectrograms of two signals across a
/// set of resolutions, on the tape.
pub fn multi_resolution_mag_l1<T: Scalar>(
    tape: &mut Tape<T>,
    plans: &[StftPlan<T>],
    a: Var,
    b: Var,
) -> Var {
    assert!(!plans.is_empty(), "need at least one STFT resolution");
    let mut terms = Vec::with_capacity(plans.len());
    for plan in plans {
        let ma = plan.magnitude_tape(tape, a);
        let mb = plan.magnitude_tape(tape, b);
        terms.push(tape.l1_loss(ma, mb));
    }
    let sum = tape.add_many(&terms);
    tape.scale(sum, c::<T>(1.0 / plans.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn reference_mag(x: &Array1<f64>, win: usize, hop: usize) -> Array2<f64> {
        let frames = (x.len() - win) / hop + 1;
        let bins = win / 2 + 1;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(win);
        let mut out = Array2::<f64>::zeros((frames, bins));
        for f in 0..frames {
            let mut buf: Vec<Complex<f64>> = (0..win)
                .map(|n| {
                    let w = 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / win as f64).cos());
                    Complex::new(x[f * hop + n] * w, 0.0)
                })
                .collect();
            fft.process(&mut buf);
            for k in 0..bins {
                out[(f, k)] = buf[k].norm();
            }
        }
        out
    }

    #[test]
    fn magnitude_matches_fft_oracle() {
        let mut rng = crate::rng::seeded_rng(1, "stft-test", 0);
        let x = Array1::from_iter((0..300).map(|_| rng.gen_range(-1.0..1.0)));
        let plan = StftPlan::<f64>::new(64, 16);
        let got = plan.magnitude(&x);
        let want = reference_mag(&x, 64, 16);
        assert_eq!(got.dim(), want.dim());
        for (g, w) in got.iter().zip(want.iter()) {
            assert_relative_eq!(g, w, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let mut rng = crate::rng::seeded_rng(2, "stft-test", 1);
        let x = Array1::from_iter((0..200).map(|_| rng.gen_range(-1.0f64..1.0)));
        let plan = StftPlan::<f64>::new(32, 8);
        let plain = plan.magnitude(&x);
        let mut tape = Tape::new();
        let xv = tape.constant(x.into_dyn());
        let mag = plan.magnitude_tape(&mut tape, xv);
        let taped = tape.value(mag).clone();
        for (p, t) in plain.iter().zip(taped.iter()) {
            assert_relative_eq!(p, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn magnitude_gradients_check_out() {
        let mut rng = crate::rng::seeded_rng(3, "stft-test", 2);
        let x = Array1::from_iter((0..80).map(|_| rng.gen_range(-1.0f64..1.0)));
        let plan = StftPlan::<f64>::new(16, 8);
        let build = |tape: &mut Tape<f64>, inputs: &[Var]| {
            let mag = plan.magnitude_tape(tape, inputs[0]);
            tape.mean_all(mag)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let out = build(&mut tape, &[xv]);
        let grads = tape.backward(out);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = crate::check::central_diff_grad(
            |a| {
                let mut t = Tape::new();
                let v = t.constant(a.clone());
                let o = build(&mut t, &[v]);
                t.value(o).iter().copied().next().unwrap()
            },
            &x.clone().into_dyn(),
            1e-6,
        );
        let err = crate::check::max_rel_err(&analytic, &numeric, 1e-4);
        assert!(err < 1e-5, "stft gradient mismatch: {err}");
    }

    #[test]
    fn multi_resolution_loss_is_zero_for_identical_signals() {
        let x = Array1::from_iter((0..128).map(|i| (i as f64 * 0.1).sin()));
        let plans: Vec<StftPlan<f64>> = [(64usize, 16usize), (32, 8)]
            .iter()
            .map(|&(w, h)| StftPlan::new(w, h))
            .collect();
        let mut tape = Tape::new();
        let a = tape.constant(x.clone().into_dyn());
        let b = tape.constant(x.into_dyn());
        let loss = multi_resolution_mag_l1(&mut tape, &plans, a, b);
        let v = tape.value(loss).iter().copied().next().unwrap();
        assert_eq!(v, 0.0);
    }
}
