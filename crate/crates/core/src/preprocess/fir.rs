//! Linear-phase FIR design by the Kaiser window method, and filter
//! application (causal, delay-compensated, forward-backward).
//!
//! Frequencies passed to the design functions are normalized to the sample
//! rate (cycles per sample, Nyquist = 0.5).

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::matrix::Matrix;

/// Kaiser window shape parameter for a stopband attenuation in dB.
pub fn kaiser_beta(atten_db: f64) -> f64 {
    let a = atten_db.abs();
    if a > 50.0 {
        0.1102 * (a - 8.7)
    } else if a >= 21.0 {
        0.5842 * (a - 21.0).powf(0.4) + 0.07886 * (a - 21.0)
    } else {
        0.0
    }
}

/// Kaiser's length estimate for the given attenuation and normalized
/// transition width, rounded up to an odd number of taps (type I filter).
pub fn kaiser_length(atten_db: f64, transition: f64) -> usize {
    let n = ((atten_db - 7.95) / (14.36 * transition)).ceil().max(1.0) as usize + 1;
    n | 1
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub fn kaiser_window(n: usize, beta: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Ideal response of a band: pass between `lo` and `hi` (normalized).
/// `lo == 0` gives a lowpass, `hi == 0.5` a highpass.
fn windowed_band(lo: f64, hi: f64, n: usize, beta: f64) -> Vec<f64> {
    let w = kaiser_window(n, beta);
    let mid = (n - 1) as f64 / 2.0;
    (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let ideal = 2.0 * hi * sinc(2.0 * hi * t) - 2.0 * lo * sinc(2.0 * lo * t);
            ideal * w[i]
        })
        .collect()
}

/// How a filter is run over a finite signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Application {
    /// y[n] = sum_k h[k] x[n-k] with zero initial state. Delays the signal by
    /// the group delay.
    Causal,
    /// One pass, shifted by the group delay so the output is aligned with
    /// the input (zero phase for a symmetric filter).
    Centered,
    /// Forward pass then backward pass: zero phase, squared magnitude.
    ForwardBackward,
}

/// Band layout of a design: each side is `(stop edge, pass edge)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandEdges {
    pub lower: Option<(f64, f64)>,
    pub upper: Option<(f64, f64)>,
}

impl BandEdges {
    fn cutoffs(&self) -> (f64, f64) {
        let lo = self.lower.map_or(0.0, |(s, p)| 0.5 * (s + p));
        let hi = self.upper.map_or(0.5, |(p, s)| 0.5 * (s + p));
        (lo, hi)
    }

    fn min_transition(&self) -> f64 {
        let l = self.lower.map_or(f64::INFINITY, |(s, p)| p - s);
        let u = self.upper.map_or(f64::INFINITY, |(p, s)| s - p);
        l.min(u)
    }

    /// Normalized frequencies on which the stopband requirement is checked.
    pub fn stopband_grid(&self) -> Vec<f64> {
        let mut grid = Vec::new();
        if let Some((s, _)) = self.lower {
            grid.extend((0..=64).map(|i| s * i as f64 / 64.0));
        }
        if let Some((_, s)) = self.upper {
            grid.extend((0..=256).map(|i| s + (0.5 - s) * i as f64 / 256.0));
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    taps: Vec<f64>,
}

impl FirFilter {
    pub fn from_taps(taps: Vec<f64>) -> Self {
        assert!(!taps.is_empty(), "a filter needs at least one tap");
        Self { taps }
    }

    /// Kaiser-window design meeting `atten_db` on every stopband. Starts from
    /// Kaiser's length estimate and grows the filter until the measured
    /// response satisfies the requirement.
    pub fn kaiser(edges: BandEdges, atten_db: f64) -> Self {
        let beta = kaiser_beta(atten_db);
        let (lo, hi) = edges.cutoffs();
        let grid = edges.stopband_grid();
        let mut n = kaiser_length(atten_db, edges.min_transition());
        loop {
            let f = Self::from_taps(windowed_band(lo, hi, n, beta));
            let worst = grid
                .iter()
                .map(|&g| f.gain(g))
                .fold(0.0f64, f64::max);
            if grid.is_empty() || 20.0 * worst.log10() <= -atten_db || n > 1 << 16 {
                return f;
            }
            n += 2;
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Magnitude response at normalized frequency `f`.
    pub fn gain(&self, f: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (k, h) in self.taps.iter().enumerate() {
            let w = 2.0 * PI * f * k as f64;
            re += h * w.cos();
            im -= h * w.sin();
        }
        re.hypot(im)
    }

    pub fn gain_db(&self, f: f64) -> f64 {
        20.0 * self.gain(f).log10()
    }

    pub fn apply(&self, x: &[f64], how: Application) -> Vec<f64> {
        let mut conv = Convolver::new(&self.taps);
        self.apply_with(&mut conv, x, how)
    }

    /// Filters every row of `m` independently.
    pub fn apply_rows(&self, m: &Matrix, how: Application) -> Matrix {
        let mut conv = Convolver::new(&self.taps);
        m.map_rows(|row| self.apply_with(&mut conv, row, how))
    }

    fn apply_with(&self, conv: &mut Convolver, x: &[f64], how: Application) -> Vec<f64> {
        let t = x.len();
        if t == 0 {
            return Vec::new();
        }
        match how {
            Application::Causal => {
                let mut y = conv.full(x);
                y.truncate(t);
                y
            }
            Application::Centered => {
                let pad = (self.taps.len() - 1).min(t - 1);
                let ext = odd_extend(x, pad);
                let full = conv.full(&ext);
                let start = pad + self.group_delay();
                full[start..start + t].to_vec()
            }
            Application::ForwardBackward => {
                let pad = (self.taps.len() - 1).min(t - 1);
                let ext = odd_extend(x, pad);
                let mut y = conv.full(&ext);
                y.reverse();
                let z = conv.full(&y);
                // z[p - 1 - n] is the backward-pass output at extended index n.
                let p = y.len();
                (pad..pad + t).map(|n| z[p - 1 - n]).collect()
            }
        }
    }
}

/// Odd (point-symmetric) extension by `pad` samples on each side.
fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let t = x.len();
    let (first, last) = (x[0], x[t - 1]);
    let mut ext = Vec::with_capacity(t + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * first - x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| 2.0 * last - x[t - 1 - k]));
    ext
}

/// Full linear convolution with a fixed kernel. Short problems are summed
/// directly; long ones go through the FFT.
struct Convolver {
    taps: Vec<f64>,
    planner: FftPlanner<f64>,
    cached: Option<(usize, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>, Vec<Complex<f64>>)>,
}

impl Convolver {
    fn new(taps: &[f64]) -> Self {
        Self {
            taps: taps.to_vec(),
            planner: FftPlanner::new(),
            cached: None,
        }
    }

    fn full(&mut self, x: &[f64]) -> Vec<f64> {
        let (n, l) = (x.len(), self.taps.len());
        let out_len = n + l - 1;
        if n.min(l) <= 32 || (n as u64) * (l as u64) <= 1 << 14 {
            let mut y = vec![0.0; out_len];
            for (i, &xi) in x.iter().enumerate() {
                for (k, &h) in self.taps.iter().enumerate() {
                    y[i + k] += xi * h;
                }
            }
            return y;
        }
        let size = out_len.next_power_of_two();
        if self.cached.as_ref().map(|c| c.0) != Some(size) {
            let fwd = self.planner.plan_fft_forward(size);
            let inv = self.planner.plan_fft_inverse(size);
            let mut h: Vec<Complex<f64>> = self
                .taps
                .iter()
                .map(|&v| Complex::new(v, 0.0))
                .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
                .take(size)
                .collect();
            fwd.process(&mut h);
            self.cached = Some((size, fwd, inv, h));
        }
        let (_, fwd, inv, h) = self.cached.as_ref().expect("plan cached above");
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(size)
            .collect();
        fwd.process(&mut buf);
        for (b, hk) in buf.iter_mut().zip(h) {
            *b *= hk;
        }
        inv.process(&mut buf);
        let scale = 1.0 / size as f64;
        buf[..out_len].iter().map(|c| c.re * scale).collect()
    }
}
