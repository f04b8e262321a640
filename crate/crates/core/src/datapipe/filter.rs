//! Butterworth low-pass filtering as cascaded second-order sections.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One biquad `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Sos {
    /// Transposed direct-form II state after an infinitely long constant
    /// unit input.
    fn steady_state(&self) -> [f64; 2] {
        let gain = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let z2 = self.b[2] - self.a[1] * gain;
        let z1 = self.b[1] - self.a[0] * gain + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let Sos { b, a } = *self;
        for v in x.iter_mut() {
            let input = *v;
            let y = b[0] * input + z[0];
            z[0] = b[1] * input - a[0] * y + z[1];
            z[1] = b[2] * input - a[1] * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass designed by the bilinear transform with
/// frequency pre-warping, so the gain at the cutoff is exactly `1/sqrt(2)`.
/// Every section has unit DC gain.
#[derive(Clone, Debug, PartialEq)]
pub struct Butterworth {
    pub sections: Vec<Sos>,
    pub cutoff_hz: f64,
    pub sample_rate: f64,
    pub order: usize,
}

impl Butterworth {
    pub fn lowpass(order: usize, cutoff_hz: f64, sample_rate: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("filter order must be >= 1".into()));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("sample rate must be positive, got {sample_rate}")));
        }
        if !(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff_hz} Hz must lie strictly between 0 and the Nyquist frequency {} Hz",
                sample_rate / 2.0
            )));
        }
        let fs2 = 2.0 * sample_rate;
        let warped = fs2 * (PI * cutoff_hz / sample_rate).tan();
        let n = order as f64;
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        // analog poles in the upper half of the left half-plane; each one
        // stands for a conjugate pair
        for k in 0..order / 2 {
            let theta = PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
            let (re, im) = (warped * theta.cos(), warped * theta.sin());
            // z = (fs2 + s) / (fs2 - s)
            let (nr, ni) = (fs2 + re, im);
            let (dr, di) = (fs2 - re, -im);
            let den = dr * dr + di * di;
            let zr = (nr * dr + ni * di) / den;
            let zi = (ni * dr - nr * di) / den;
            let a1 = -2.0 * zr;
            let a2 = zr * zr + zi * zi;
            let g = (1.0 + a1 + a2) / 4.0;
            sections.push(Sos {
                b: [g, 2.0 * g, g],
                a: [a1, a2],
            });
        }
        if order % 2 == 1 {
            let p = (fs2 - warped) / (fs2 + warped);
            let g = (1.0 - p) / 2.0;
            sections.push(Sos {
                b: [g, g, 0.0],
                a: [-p, 0.0],
            });
        }
        Ok(Self {
            sections,
            cutoff_hz,
            sample_rate,
            order,
        })
    }

    /// Causal single pass from a zero initial state.
    pub fn apply_causal(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = signal.to_vec();
        for s in &self.sections {
            s.run(&mut out, [0.0; 2]);
        }
        out
    }

    fn run_steady(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        for s in &self.sections {
            let [z1, z2] = s.steady_state();
            s.run(x, [z1 * first, z2 * first]);
        }
    }

    /// Forward-backward application with odd-extension padding and
    /// steady-state initial conditions; the result has no phase shift and
    /// squared magnitude response.
    pub fn apply_zero_phase(&self, signal: &[f64]) -> Vec<f64> {
        let n = signal.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (signal[0], signal[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));
        self.run_steady(&mut ext);
        ext.reverse();
        self.run_steady(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    /// Single-pass magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        self.sections
            .iter()
            .map(|s| {
                let nr = s.b[0] + s.b[1] * c1 + s.b[2] * c2;
                let ni = s.b[1] * s1 + s.b[2] * s2;
                let dr = 1.0 + s.a[0] * c1 + s.a[1] * c2;
                let di = s.a[0] * s1 + s.a[1] * s2;
                ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
            })
            .product()
    }
}

/// Zero-phase Butterworth low-pass with unit DC gain.
pub fn butterworth_lowpass(signal: &[f64], cutoff_hz: f64, order: usize, sample_rate: f64) -> Result<Vec<f64>> {
    Ok(Butterworth::lowpass(order, cutoff_hz, sample_rate)?.apply_zero_phase(signal))
}

pub const GRAVITY_CUTOFF_HZ: f64 = 0.3;
pub const GRAVITY_ORDER: usize = 3;

/// Splits total acceleration into `(gravity, body)` with
/// `body[i] + gravity[i] == total[i]` exactly.
pub fn separate_gravity(total: &[f64], sample_rate: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    separate_gravity_with(total, sample_rate, GRAVITY_CUTOFF_HZ, GRAVITY_ORDER)
}

pub fn separate_gravity_with(total: &[f64], sample_rate: f64, cutoff_hz: f64, order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let smooth = butterworth_lowpass(total, cutoff_hz, order, sample_rate)?;
    let mut gravity = Vec::with_capacity(total.len());
    let mut body = Vec::with_capacity(total.len());
    for (&t, &g) in total.iter().zip(&smooth) {
        let b = t - g;
        // choose the representable gravity value that reconstructs t
        let mut g = t - b;
        let mut guard = 0;
        while b + g != t && guard < 4 {
            g = if b + g < t { g.next_up() } else { g.next_down() };
            guard += 1;
        }
        gravity.push(g);
        body.push(b);
    }
    Ok((gravity, body))
}

/// Running median of width `width` (odd); the first and last `width / 2`
/// samples are passed through.
pub fn median_filter(signal: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 == 0 {
        return Err(Error::InvalidArgument(format!("median width must be odd, got {width}")));
    }
    let half = width / 2;
    let mut out = signal.to_vec();
    if signal.len() < width {
        return Ok(out);
    }
    let mut buf = vec![0.0; width];
    for i in half..signal.len() - half {
        buf.copy_from_slice(&signal[i - half..=i + half]);
        buf.sort_by(f64::total_cmp);
        out[i] = buf[half];
    }
    Ok(out)
}
