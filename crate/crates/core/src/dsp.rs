//! Spectral helpers: STFT magnitudes and the differentiable multi-resolution
//! magnitude loss used by the codec, plus analysis-side utilities
//! (band limiting, power spectra).

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

/// Frame size, hop and FFT kernels for one STFT resolution.
#[derive(Clone)]
pub struct StftPlan<T: Scalar> {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        let window = hann(n_fft);
        Self {
            n_fft,
            hop,
            window,
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples (at least one).
    pub fn n_frames(&self, len: usize) -> usize {
        if len <= self.n_fft {
            1
        } else {
            1 + (len - self.n_fft).div_ceil(self.hop)
        }
    }

    /// One-sided complex spectra of every frame, frame-major.
    pub fn spectra(&self, x: &[T]) -> Vec<Vec<Complex<T>>> {
        let nf = self.n_frames(x.len());
        let mut out = Vec::with_capacity(nf);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        for f in 0..nf {
            let start = f * self.hop;
            for (j, b) in buf.iter_mut().enumerate() {
                let v = x.get(start + j).copied().unwrap_or(T::zero());
                *b = Complex::new(v * self.window[j], T::zero());
            }
            self.fwd.process(&mut buf);
            out.push(buf[..self.bins()].to_vec());
        }
        out
    }

    pub fn magnitudes(&self, x: &[T]) -> Vec<Vec<T>> {
        self.spectra(x)
            .into_iter()
            .map(|fr| fr.into_iter().map(|c| c.norm()).collect())
            .collect()
    }
}

pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let p = std::f64::consts::PI * 2.0 * i as f64 / n as f64;
            T::c(0.5 - 0.5 * p.cos())
        })
        .collect()
}

const MAG_EPS: f64 = 1e-2;

/// Loss `mean|m_p - m_t| + mean|log(m_p+eps) - log(m_t+eps)|` over all
/// frames and one-sided bins, with its gradient w.r.t. `pred`.
pub fn stft_mag_loss_and_grad<T: Scalar>(plan: &StftPlan<T>, pred: &[T], target: &[T]) -> (T, Vec<T>) {
    assert_eq!(pred.len(), target.len(), "stft loss length mismatch");
    let sp = plan.spectra(pred);
    let st = plan.magnitudes(target);
    let eps = T::c(MAG_EPS);
    let tiny = T::c(1e-12);
    let count = T::from_usize(sp.len() * plan.bins()).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); plan.n_fft];
    for (f, (xp, mt)) in sp.iter().zip(&st).enumerate() {
        for b in buf.iter_mut() {
            *b = Complex::new(T::zero(), T::zero());
        }
        for (k, (&x, &m_t)) in xp.iter().zip(mt).enumerate() {
            let m_p = x.norm();
            let d_lin = m_p - m_t;
            let d_log = (m_p + eps).ln() - (m_t + eps).ln();
            loss += d_lin.abs() + d_log.abs();
            let dm = (sgn(d_lin) + sgn(d_log) / (m_p + eps)) / count;
            if m_p > tiny {
                buf[k] = x * (dm / m_p);
            }
        }
        // d loss / d x_n = w_n * Re(sum_k G_k e^{+i 2 pi k n / N})
        plan.inv.process(&mut buf);
        let start = f * plan.hop;
        for (j, b) in buf.iter().enumerate() {
            if let Some(g) = grad.get_mut(start + j) {
                *g += plan.window[j] * b.re;
            }
        }
    }
    (loss / count, grad)
}

fn sgn<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Zeroes every FFT bin above `cutoff_hz` (whole-signal brick-wall filter).
pub fn brickwall_lowpass(x: &[f64], sample_rate: u32, cutoff_hz: f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    let df = sample_rate as f64 / n as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        if bin as f64 * df > cutoff_hz {
            *b = Complex::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// One-sided power spectrum of the whole signal with bin frequencies.
pub fn power_spectrum(x: &[f64], sample_rate: u32) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    let bins = n / 2 + 1;
    let df = sample_rate as f64 / n as f64;
    let power = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
    let freqs = (0..bins).map(|k| k as f64 * df).collect();
    (power, freqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_covers_signal() {
        let p = StftPlan::<f64>::new(8, 4);
        assert_eq!(p.n_frames(8), 1);
        assert_eq!(p.n_frames(9), 2);
        assert_eq!(p.n_frames(16), 3);
    }

    #[test]
    fn identical_signals_have_zero_loss() {
        let p = StftPlan::<f64>::new(16, 4);
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let (l, g) = stft_mag_loss_and_grad(&p, &x, &x);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lowpass_removes_high_tone() {
        let sr = 8000;
        let x: Vec<f64> = (0..8000)
            .map(|i| {
                let t = i as f64 / sr as f64;
                (2.0 * std::f64::consts::PI * 200.0 * t).sin() + (2.0 * std::f64::consts::PI * 3000.0 * t).sin()
            })
            .collect();
        let y = brickwall_lowpass(&x, sr, 1000.0);
        let (p, f) = power_spectrum(&y, sr);
        let hi: f64 = p.iter().zip(&f).filter(|(_, &fr)| fr > 1000.0).map(|(v, _)| v).sum();
        let tot: f64 = p.iter().sum();
        assert!(hi / tot < 1e-12);
    }
}
