//! Band-pass filter design, zero-phase filtering, amplitude rescaling, and
//! imagery-window extraction.
//!
//! The band-pass design follows the classical digital IIR recipe: analog
//! Butterworth prototype, low-pass-to-band-pass transform, pre-warped
//! bilinear transform, then factoring into second-order sections. An
//! order-`n` prototype yields `2n` poles and `n` sections. Coefficients are
//! kept in `f64` and epochs are filtered in `f64` internally regardless of
//! the storage dtype.

use num_complex::Complex64;
use thiserror::Error;

use crate::data::{DataError, Epoch};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("cutoffs must satisfy 0 < low < high < fs/2, got low={low}, high={high}, fs={fs}")]
    BadCutoffs { low: f64, high: f64, fs: f64 },
    #[error("prototype order must be an even integer >= 2, got {0}")]
    BadOrder(usize),
    #[error("designed section is unstable (pole modulus {0})")]
    Unstable(f64),
    #[error("epoch too short for zero-phase padding: {samples} samples, need more than {min}")]
    TooShort { samples: usize, min: usize },
    #[error("trial too short: {samples} samples, window needs {required}")]
    TrialTooShort { samples: usize, required: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One normalized biquad: `b0 + b1 z^-1 + b2 z^-2` over
/// `1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiquadSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadSection {
    /// Largest pole modulus; must be < 1 for stability.
    pub fn pole_modulus(&self) -> f64 {
        // roots of z^2 + a1 z + a2
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (Complex64::new(-self.a1, 0.0) + disc) / 2.0;
        let r2 = (Complex64::new(-self.a1, 0.0) - disc) / 2.0;
        r1.norm().max(r2.norm())
    }
}

/// Cascade of biquads with a single overall gain factor.
#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<BiquadSection>,
    pub overall_gain: f64,
}

impl BiquadCascade {
    /// Complex frequency response at `f_hz`, evaluated directly on the unit
    /// circle. This is the analysis route used to verify designs; it shares
    /// no code with the design math.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / fs;
        let z1 = Complex64::new(0.0, -w).exp();
        let z2 = z1 * z1;
        let mut h = Complex64::new(self.overall_gain, 0.0);
        for s in &self.sections {
            let num = Complex64::new(s.b0, 0.0) + s.b1 * z1 + s.b2 * z2;
            let den = Complex64::new(1.0, 0.0) + s.a1 * z1 + s.a2 * z2;
            h *= num / den;
        }
        h
    }

    pub fn magnitude(&self, f_hz: f64, fs: f64) -> f64 {
        self.response(f_hz, fs).norm()
    }

    /// Single causal pass over one channel (direct form II transposed).
    pub fn filter_channel(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().map(|&v| v * self.overall_gain).collect();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0f64, 0.0f64);
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b0 * input + z1;
                z1 = s.b1 * input - s.a1 * out + z2;
                z2 = s.b2 * input - s.a2 * out;
                *v = out;
            }
        }
        y
    }
}

fn poles_to_section(p: Complex64, q: Complex64) -> (f64, f64) {
    // (z - p)(z - q) with q = conj(p) or both real
    let a1 = -(p + q).re;
    let a2 = (p * q).re;
    (a1, a2)
}

/// Butterworth band-pass as second-order sections with unit peak passband
/// gain. `order` is the analog prototype order; the band-pass transform
/// doubles the pole count, so the cascade has `order` sections.
pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    fs: f64,
) -> Result<BiquadCascade, SignalError> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(SignalError::BadCutoffs {
            low: low_hz,
            high: high_hz,
            fs,
        });
    }
    if order < 2 || order % 2 != 0 {
        return Err(SignalError::BadOrder(order));
    }

    // Analog prototype: poles on the left unit semicircle, no zeros.
    let n = order as i32;
    let prototype: Vec<Complex64> = (1 - n..n)
        .step_by(2)
        .map(|m| -(Complex64::new(0.0, 1.0) * std::f64::consts::PI * m as f64 / (2.0 * n as f64)).exp())
        .collect();

    // Pre-warped band edges (normalized to Nyquist, internal fs = 2).
    let fs2 = 2.0;
    let warp = |f: f64| 2.0 * fs2 * (std::f64::consts::PI * (f / (fs / 2.0)) / fs2).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let wo = (w1 * w2).sqrt();

    // Low-pass -> band-pass: scale to bandwidth, shift to +-wo.
    let scaled: Vec<Complex64> = prototype.iter().map(|p| p * (bw / 2.0)).collect();
    let mut analog_poles = Vec::with_capacity(2 * order);
    for p in &scaled {
        let root = (p * p - wo * wo).sqrt();
        analog_poles.push(p + root);
        analog_poles.push(p - root);
    }
    // degree zeros move to the origin; gain picks up bw^degree
    let analog_zeros = vec![Complex64::new(0.0, 0.0); order];
    let k_analog = bw.powi(order as i32);

    // Bilinear transform: s -> 2 fs2 (z-1)/(z+1).
    let two_fs = Complex64::new(2.0 * fs2, 0.0);
    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|p| (two_fs + p) / (two_fs - p))
        .collect();
    let mut digital_zeros: Vec<Complex64> = analog_zeros
        .iter()
        .map(|z| (two_fs + z) / (two_fs - z))
        .collect();
    // zeros at infinity land at z = -1
    digital_zeros.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(order));
    let num: Complex64 = analog_zeros.iter().map(|z| two_fs - z).product();
    let den: Complex64 = analog_poles.iter().map(|p| two_fs - p).product();
    let k_digital = k_analog * (num / den).re;

    // Pair poles into conjugate sections. Complex poles arrive with their
    // conjugates; real poles (possible at extreme bandwidths) pair among
    // themselves after sorting.
    let mut complex_poles: Vec<Complex64> = digital_poles
        .iter()
        .copied()
        .filter(|p| p.im > 1e-10)
        .collect();
    let mut real_poles: Vec<Complex64> = digital_poles
        .iter()
        .copied()
        .filter(|p| p.im.abs() <= 1e-10)
        .collect();
    complex_poles.sort_by(|a, b| {
        (a.re, a.im)
            .partial_cmp(&(b.re, b.im))
            .expect("finite pole coordinates")
    });
    real_poles.sort_by(|a, b| a.re.partial_cmp(&b.re).expect("finite pole coordinates"));

    let mut sections = Vec::with_capacity(order);
    for p in complex_poles {
        let (a1, a2) = poles_to_section(p, p.conj());
        sections.push((a1, a2));
    }
    for pair in real_poles.chunks(2) {
        debug_assert_eq!(pair.len(), 2, "real poles of a real filter pair up");
        let (a1, a2) = poles_to_section(pair[0], pair[1]);
        sections.push((a1, a2));
    }
    debug_assert_eq!(sections.len(), order);

    // Each section takes one zero at +1 and one at -1: numerator z^2 - 1.
    let sections: Vec<BiquadSection> = sections
        .into_iter()
        .map(|(a1, a2)| BiquadSection {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1,
            a2,
        })
        .collect();

    for s in &sections {
        let modulus = s.pole_modulus();
        if modulus >= 1.0 {
            return Err(SignalError::Unstable(modulus));
        }
    }

    let mut cascade = BiquadCascade {
        sections,
        overall_gain: k_digital,
    };
    // Normalize to exactly unit gain at the (geometric) center frequency;
    // the analytic k is already within rounding of this.
    let f_center = (low_hz * high_hz).sqrt();
    let mag = cascade.magnitude(f_center, fs);
    cascade.overall_gain /= mag;
    Ok(cascade)
}

/// Zero-phase pad length used by [`filtfilt`]: `3 * (2 * sections + 1)`.
pub fn pad_len(cascade: &BiquadCascade) -> usize {
    3 * (2 * cascade.sections.len() + 1)
}

fn odd_reflect_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        ext.push(2.0 * x[0] - x[pad - i]);
    }
    ext.extend_from_slice(x);
    for j in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - j]);
    }
    ext
}

/// Zero-phase filtering of one channel: odd-reflection padding, forward
/// pass, reverse, second pass, reverse, padding removed.
pub fn filtfilt_channel(cascade: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>, SignalError> {
    let pad = pad_len(cascade);
    if x.len() <= 3 * pad {
        return Err(SignalError::TooShort {
            samples: x.len(),
            min: 3 * pad,
        });
    }
    let ext = odd_reflect_extend(x, pad);
    let mut y = cascade.filter_channel(&ext);
    y.reverse();
    let mut y = cascade.filter_channel(&y);
    y.reverse();
    Ok(y[pad..pad + x.len()].to_vec())
}

/// Zero-phase filtering of every channel of an epoch, independently.
pub fn filtfilt(epoch: &Epoch, cascade: &BiquadCascade) -> Result<Epoch, SignalError> {
    let mut out = epoch.clone();
    for ch in 0..epoch.n_channels {
        let x: Vec<f64> = epoch.channel(ch).iter().map(|&v| v as f64).collect();
        let y = filtfilt_channel(cascade, &x)?;
        for (dst, &v) in out.channel_mut(ch).iter_mut().zip(&y) {
            *dst = v as f32;
        }
    }
    Ok(out)
}

/// Single-pass causal filtering of an epoch (for streaming use; not
/// zero-phase).
pub fn filter_causal(epoch: &Epoch, cascade: &BiquadCascade) -> Epoch {
    let mut out = epoch.clone();
    for ch in 0..epoch.n_channels {
        let x: Vec<f64> = epoch.channel(ch).iter().map(|&v| v as f64).collect();
        let y = cascade.filter_channel(&x);
        for (dst, &v) in out.channel_mut(ch).iter_mut().zip(&y) {
            *dst = v as f32;
        }
    }
    out
}

/// Multiply every sample by `factor`; metadata unchanged. The canonical
/// pipeline uses 1e6 to bring volt-scale amplitudes to unit scale.
pub fn rescale(epoch: &Epoch, factor: f64) -> Epoch {
    let mut out = epoch.clone();
    for v in &mut out.data {
        *v = (*v as f64 * factor) as f32;
    }
    out
}

/// Trial phase durations in seconds. The protocol shows the instruction,
/// stabilizes on a fixation cross, records imagery, then stabilizes again.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialTimeline {
    pub instruction_s: f64,
    pub fixation_pre_s: f64,
    pub imagery_s: f64,
    pub fixation_post_s: f64,
}

impl Default for TrialTimeline {
    fn default() -> Self {
        TrialTimeline {
            instruction_s: 2.0,
            fixation_pre_s: 2.0,
            imagery_s: 3.0,
            fixation_post_s: 2.0,
        }
    }
}

impl TrialTimeline {
    pub fn total_s(&self) -> f64 {
        self.instruction_s + self.fixation_pre_s + self.imagery_s + self.fixation_post_s
    }

    /// Sample range `[start, end)` of the imagery window at rate `fs`.
    pub fn imagery_window(&self, fs: f64) -> (usize, usize) {
        let start = ((self.instruction_s + self.fixation_pre_s) * fs).round() as usize;
        let end = start + (self.imagery_s * fs).round() as usize;
        (start, end)
    }
}

/// A full unsegmented trial recording plus its labels.
#[derive(Clone, Debug)]
pub struct RawTrial {
    pub n_channels: usize,
    pub n_samples: usize,
    /// Channel-major, like [`Epoch`].
    pub data: Vec<f32>,
    pub sample_rate: f64,
    pub subject: crate::data::SubjectId,
    pub paradigm: crate::data::Paradigm,
    pub label: crate::data::ImageryLabel,
    pub trial_id: u32,
}

/// Cut the imagery window out of a full trial. At the canonical timeline
/// and 250 Hz that is samples `[1000, 1750)` of a 2250-sample trial.
pub fn extract_imagery_window(
    raw: &RawTrial,
    timeline: &TrialTimeline,
) -> Result<Epoch, SignalError> {
    let (start, end) = timeline.imagery_window(raw.sample_rate);
    if raw.n_samples < end {
        return Err(SignalError::TrialTooShort {
            samples: raw.n_samples,
            required: end,
        });
    }
    let n_samples = end - start;
    let mut data = Vec::with_capacity(raw.n_channels * n_samples);
    for ch in 0..raw.n_channels {
        let row = &raw.data[ch * raw.n_samples..(ch + 1) * raw.n_samples];
        data.extend_from_slice(&row[start..end]);
    }
    Ok(Epoch {
        n_channels: raw.n_channels,
        n_samples,
        data,
        sample_rate: raw.sample_rate,
        subject: raw.subject,
        paradigm: raw.paradigm,
        label: raw.label,
        trial_id: raw.trial_id,
    })
}
