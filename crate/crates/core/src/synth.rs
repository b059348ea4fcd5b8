//! Seeded synthetic EEG reproducing the canonical acquisition geometry.
//!
//! Every epoch is a deterministic function of `(config, seed)`: sub-streams
//! are derived per subject, per class, and per trial, so files can be
//! generated in any order (or in parallel) and still come out bit-identical.
//!
//! Signal model per channel: pink noise (inverse-spectrum synthesis with
//! seeded phases) mixed with white noise, shaped by a per-subject signature
//! (channel gains, spectral slopes, shared-source mixing, a posterior alpha
//! rhythm), plus a class-specific oscillatory burst: a carrier sine under a
//! Hann envelope over the middle two seconds, injected into the class's
//! channel subset at an amplitude set by `snr_db`. Amplitudes are
//! volt-scale (1e-6); the canonical preprocessing rescales by 1e6.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use pbci_nn::rng::SplitMix64;

use crate::data::{
    write_epoch, DataError, DatasetManifest, Epoch, ImageryLabel, ManifestRecord, Montage,
    Paradigm, SubjectId,
};

const STREAM_SUBJECT: u64 = 0x53;
const STREAM_CLASS: u64 = 0x43;
const STREAM_EPOCH: u64 = 0x45;

/// Base amplitude in volts; unit scale after the canonical 1e6 rescale.
const VOLT_SCALE: f64 = 1e-6;
const WHITE_NOISE_WEIGHT: f64 = 0.3;
const MIXING_SOURCES: usize = 4;
const MIXING_WEIGHT: f64 = 0.4;
const ALPHA_AMPLITUDE: f64 = 0.8;
const CLASS_CHANNELS: usize = 6;
const CARRIER_BAND: (f64, f64) = (9.0, 28.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown preset '{0}' (expected 'easy' or 'hard')")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_subjects: u8,
    pub n_trials_per_label: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub sample_rate: f64,
    /// Burst amplitude relative to per-channel noise RMS, in dB.
    /// `f64::NEG_INFINITY` is the noise-only sentinel: no class signal.
    pub snr_db: f64,
    /// 0 = indistinguishable subjects, 1 = strongly separated signatures.
    pub subject_signature_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 8,
            n_trials_per_label: 50,
            n_channels: 32,
            n_samples: 750,
            sample_rate: 250.0,
            snr_db: 0.0,
            subject_signature_strength: 0.6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_subjects == 0
            || self.n_trials_per_label == 0
            || self.n_channels == 0
            || self.n_samples < 4
            || self.sample_rate <= 0.0
        {
            return Err(SynthError::InvalidConfig("counts must be positive".into()));
        }
        // NEG_INFINITY is the documented noise-only sentinel.
        if self.snr_db.is_nan() || self.snr_db == f64::INFINITY {
            return Err(SynthError::InvalidConfig(format!(
                "snr_db must be finite or -inf, got {}",
                self.snr_db
            )));
        }
        if !(0.0..=1.0).contains(&self.subject_signature_strength) {
            return Err(SynthError::InvalidConfig(
                "subject_signature_strength must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn noise_only(&self) -> bool {
        self.snr_db == f64::NEG_INFINITY
    }

    pub fn total_epochs(&self) -> usize {
        self.n_subjects as usize * Paradigm::ALL.len() * ImageryLabel::COUNT
            * self.n_trials_per_label
    }
}

/// Named difficulty presets.
pub fn preset(name: &str) -> Result<SynthConfig, SynthError> {
    match name {
        "easy" => Ok(SynthConfig {
            snr_db: 6.0,
            subject_signature_strength: 1.0,
            ..SynthConfig::default()
        }),
        "hard" => Ok(SynthConfig {
            snr_db: -6.0,
            subject_signature_strength: 0.3,
            ..SynthConfig::default()
        }),
        other => Err(SynthError::UnknownPreset(other.to_string())),
    }
}

/// Stable per-subject characteristics: how this subject's background EEG
/// differs from everyone else's.
#[derive(Clone, Debug)]
pub struct SubjectSignature {
    /// Multiplicative per-channel amplitude profile.
    pub channel_gains: Vec<f64>,
    /// Per-channel 1/f exponent for the pink-noise floor.
    pub pink_exponents: Vec<f64>,
    /// `[n_channels x MIXING_SOURCES]`, unit-norm columns: shared sources
    /// give each subject a distinctive spatial covariance.
    pub mixing: Vec<f64>,
    pub alpha_hz: f64,
    pub alpha_amplitude: f64,
    pub alpha_channels: Vec<usize>,
}

/// Per-(paradigm, label) burst description.
#[derive(Clone, Debug)]
pub struct ClassSignature {
    pub carrier_hz: f64,
    pub channels: Vec<usize>,
    pub modulation_depth: f64,
}

pub fn subject_signature(config: &SynthConfig, subject: SubjectId) -> SubjectSignature {
    let s = config.subject_signature_strength;
    let mut rng = SplitMix64::derive(config.seed, &[STREAM_SUBJECT, subject.index() as u64]);
    let channel_gains = (0..config.n_channels)
        .map(|_| rng.uniform(1.0 - 0.5 * s, 1.0 + 0.5 * s))
        .collect();
    let pink_exponents = (0..config.n_channels)
        .map(|_| 1.0 + s * rng.uniform(-0.3, 0.3))
        .collect();
    let mut mixing = vec![0.0; config.n_channels * MIXING_SOURCES];
    for k in 0..MIXING_SOURCES {
        let mut norm = 0.0;
        for ch in 0..config.n_channels {
            let v = rng.next_normal();
            mixing[ch * MIXING_SOURCES + k] = v;
            norm += v * v;
        }
        let norm = norm.sqrt().max(1e-12);
        for ch in 0..config.n_channels {
            mixing[ch * MIXING_SOURCES + k] /= norm;
        }
    }
    let alpha_hz = rng.uniform(8.0, 13.0);
    // posterior quarter of the montage
    let start = config.n_channels - (config.n_channels / 4).max(1);
    let alpha_channels = (start..config.n_channels).collect();
    SubjectSignature {
        channel_gains,
        pink_exponents,
        mixing,
        alpha_hz,
        alpha_amplitude: ALPHA_AMPLITUDE * s,
        alpha_channels,
    }
}

/// Paradigm-typical scalp region, as a channel-index range.
fn paradigm_region(paradigm: Paradigm, n_channels: usize) -> (usize, usize) {
    let frac = |lo: f64, hi: f64| {
        let a = (lo * n_channels as f64) as usize;
        let b = ((hi * n_channels as f64) as usize).min(n_channels);
        (a, b.max(a + 1))
    };
    match paradigm {
        Paradigm::Mi => frac(0.2, 0.7),  // central / sensorimotor
        Paradigm::Si => frac(0.0, 0.5),  // frontal-temporal
        Paradigm::Vi => frac(0.55, 1.0), // posterior / occipital
    }
}

pub fn class_signature(
    config: &SynthConfig,
    paradigm: Paradigm,
    label: ImageryLabel,
) -> ClassSignature {
    let mut rng = SplitMix64::derive(
        config.seed,
        &[STREAM_CLASS, paradigm.code() as u64, label.ordinal() as u64],
    );
    // one disjoint carrier sub-band per label keeps (frequency, subset)
    // pairs distinct within a paradigm by construction
    let span = (CARRIER_BAND.1 - CARRIER_BAND.0) / ImageryLabel::COUNT as f64;
    let lo = CARRIER_BAND.0 + label.ordinal() as f64 * span;
    let carrier_hz = rng.uniform(lo + 0.1 * span, lo + 0.9 * span);
    let (r0, r1) = paradigm_region(paradigm, config.n_channels);
    let take = CLASS_CHANNELS.min(r1 - r0);
    let mut channels: Vec<usize> = rng
        .choose_indices(r1 - r0, take)
        .into_iter()
        .map(|i| r0 + i)
        .collect();
    channels.sort_unstable();
    let modulation_depth = rng.uniform(0.75, 1.0);
    ClassSignature {
        carrier_hz,
        channels,
        modulation_depth,
    }
}

/// Pink noise of unit RMS via inverse-spectrum synthesis: bin amplitudes
/// `1/f^(exponent/2)` with seeded phases, one inverse FFT.
fn pink_noise(
    n: usize,
    fs: f64,
    exponent: f64,
    rng: &mut SplitMix64,
    ifft: &std::sync::Arc<dyn rustfft::Fft<f64>>,
    scratch: &mut [Complex64],
) -> Vec<f64> {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 1..=half {
        let f = k as f64 * fs / n as f64;
        let amp = f.powf(-exponent / 2.0);
        let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        if k == half && n % 2 == 0 {
            spectrum[k] = Complex64::new(amp * phase.cos(), 0.0); // Nyquist bin is real
        } else {
            let v = Complex64::from_polar(amp, phase);
            spectrum[k] = v;
            spectrum[n - k] = v.conj();
        }
    }
    ifft.process_with_scratch(&mut spectrum, scratch);
    let mut out: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v /= rms;
        }
    }
    out
}

struct EpochSynth {
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl EpochSynth {
    fn new(n_samples: usize) -> Self {
        let ifft = FftPlanner::new().plan_fft_inverse(n_samples);
        let scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
        EpochSynth { ifft, scratch }
    }

    #[allow(clippy::too_many_arguments)]
    fn generate(
        &mut self,
        config: &SynthConfig,
        subject_sig: &SubjectSignature,
        class_sig: &ClassSignature,
        subject: SubjectId,
        paradigm: Paradigm,
        label: ImageryLabel,
        trial: usize,
        trial_id: u32,
    ) -> Epoch {
        let n = config.n_samples;
        let fs = config.sample_rate;
        let mut rng = SplitMix64::derive(
            config.seed,
            &[
                STREAM_EPOCH,
                subject.index() as u64,
                paradigm.code() as u64,
                label.ordinal() as u64,
                trial as u64,
            ],
        );

        // shared sources first so the channel loop cannot reorder draws
        let sources: Vec<Vec<f64>> = (0..MIXING_SOURCES)
            .map(|_| pink_noise(n, fs, 1.0, &mut rng, &self.ifft, &mut self.scratch))
            .collect();
        let alpha_phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let burst_phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);

        let burst_amp = if config.noise_only() {
            0.0
        } else {
            10f64.powf(config.snr_db / 20.0) * class_sig.modulation_depth
        };
        // carrier under a Hann envelope over the middle two seconds
        let window_len = ((2.0 * fs) as usize).min(n);
        let window_start = (n - window_len) / 2;
        let mix_strength = MIXING_WEIGHT * config.subject_signature_strength;

        let mut data = vec![0f32; config.n_channels * n];
        for ch in 0..config.n_channels {
            let pink = pink_noise(
                n,
                fs,
                subject_sig.pink_exponents[ch],
                &mut rng,
                &self.ifft,
                &mut self.scratch,
            );
            let gain = subject_sig.channel_gains[ch];
            let is_alpha = subject_sig.alpha_channels.contains(&ch);
            let is_burst = burst_amp > 0.0 && class_sig.channels.contains(&ch);
            let row = &mut data[ch * n..(ch + 1) * n];
            for (i, v) in row.iter_mut().enumerate() {
                let white = rng.next_normal();
                let mut sample = (1.0 - WHITE_NOISE_WEIGHT) * pink[i] + WHITE_NOISE_WEIGHT * white;
                for (k, source) in sources.iter().enumerate() {
                    sample +=
                        mix_strength * subject_sig.mixing[ch * MIXING_SOURCES + k] * source[i];
                }
                sample *= gain;
                if is_alpha {
                    sample += subject_sig.alpha_amplitude
                        * (2.0 * std::f64::consts::PI * subject_sig.alpha_hz * i as f64 / fs
                            + alpha_phase)
                            .sin();
                }
                if is_burst {
                    if let Some(w) = i.checked_sub(window_start).filter(|&w| w < window_len) {
                        let hann = 0.5
                            * (1.0
                                - (2.0 * std::f64::consts::PI * w as f64
                                    / (window_len - 1) as f64)
                                    .cos());
                        sample += burst_amp
                            * hann
                            * (2.0 * std::f64::consts::PI * class_sig.carrier_hz * i as f64 / fs
                                + burst_phase)
                                .sin();
                    }
                }
                *v = (sample * VOLT_SCALE) as f32;
            }
        }
        Epoch {
            n_channels: config.n_channels,
            n_samples: n,
            data,
            sample_rate: fs,
            subject,
            paradigm,
            label,
            trial_id,
        }
    }
}

fn provenance_block(config: &SynthConfig) -> String {
    let mut out = format!(
        "synth seed={} snr_db={} strength={} subjects={} trials_per_label={} fs={} geometry={}x{}",
        config.seed,
        config.snr_db,
        config.subject_signature_strength,
        config.n_subjects,
        config.n_trials_per_label,
        config.sample_rate,
        config.n_channels,
        config.n_samples,
    );
    for paradigm in Paradigm::ALL {
        for label in ImageryLabel::ALL {
            let sig = class_signature(config, paradigm, label);
            out.push_str(&format!(
                "\nclass {} {} carrier={:.3}Hz depth={:.3} channels={}",
                paradigm.name(),
                label.name(),
                sig.carrier_hz,
                sig.modulation_depth,
                sig.channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ));
        }
    }
    out
}

/// Generate every epoch of the configured protocol, in memory, in manifest
/// order (subject, paradigm, label, trial).
pub fn generate_epochs(config: &SynthConfig) -> Result<Vec<Epoch>, SynthError> {
    config.validate()?;
    let mut synth = EpochSynth::new(config.n_samples);
    let mut out = Vec::with_capacity(config.total_epochs());
    for s in 1..=config.n_subjects {
        let subject = SubjectId::new(s).expect("non-zero subject index");
        let subject_sig = subject_signature(config, subject);
        for paradigm in Paradigm::ALL {
            for label in ImageryLabel::ALL {
                let class_sig = class_signature(config, paradigm, label);
                for trial in 0..config.n_trials_per_label {
                    let trial_id = (label.ordinal() * config.n_trials_per_label + trial) as u32;
                    out.push(synth.generate(
                        config,
                        &subject_sig,
                        &class_sig,
                        subject,
                        paradigm,
                        label,
                        trial,
                        trial_id,
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Generate the dataset into `out_dir` (one EEGD file per epoch plus
/// `manifest.tsv`) and return the manifest.
pub fn generate_dataset(
    config: &SynthConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| DataError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let montage = if config.n_channels == 32 {
        Montage::standard_32()
    } else {
        Montage::new(
            (0..config.n_channels)
                .map(|i| format!("CH{:02}", i + 1))
                .collect(),
        )
        .expect("generated names are unique")
    };
    let mut manifest = DatasetManifest::new(montage, config.sample_rate, provenance_block(config));
    for epoch in generate_epochs(config)? {
        let name = format!(
            "s{:02}_{}_{}_t{:03}.eegd",
            epoch.subject.index(),
            epoch.paradigm.name().to_ascii_lowercase(),
            epoch.label.name(),
            epoch.trial_id,
        );
        write_epoch(&epoch, &out_dir.join(&name))?;
        manifest.records.push(ManifestRecord {
            path: PathBuf::from(name),
            subject: epoch.subject,
            paradigm: epoch.paradigm,
            label: epoch.label,
            trial_id: epoch.trial_id,
        });
    }
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
