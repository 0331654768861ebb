//! Synthesis of interfered GNSS baseband records and their spectrogram images.
//!
//! A record is `r[n] = s[n] + j[n] + w[n]`: a pseudo-random chipping sequence
//! standing in for the satellite signal, one of five jammer waveforms (or
//! silence), and AWGN. Jammer power is set relative to signal power through
//! the configured JSR. Everything is a pure function of (config, seed).

pub mod render;
pub mod stft;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
pub use render::{render_spectrogram, write_pgm, RenderConfig};
pub use stft::{stft_magnitude, MagnitudeGrid, StftConfig, WindowKind};

/// The six record classes, in stable code order 0..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JammerClass {
    NoJam,
    Am,
    Chirp,
    Fm,
    Dme,
    Nb,
}

impl JammerClass {
    pub const ALL: [JammerClass; 6] = [
        JammerClass::NoJam,
        JammerClass::Am,
        JammerClass::Chirp,
        JammerClass::Fm,
        JammerClass::Dme,
        JammerClass::Nb,
    ];
    pub const COUNT: usize = 6;

    pub fn code(self) -> u8 {
        match self {
            JammerClass::NoJam => 0,
            JammerClass::Am => 1,
            JammerClass::Chirp => 2,
            JammerClass::Fm => 3,
            JammerClass::Dme => 4,
            JammerClass::Nb => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::input(format!("class code {code} out of range 0..=5")))
    }

    pub fn name(self) -> &'static str {
        match self {
            JammerClass::NoJam => "NoJam",
            JammerClass::Am => "AM",
            JammerClass::Chirp => "Chirp",
            JammerClass::Fm => "FM",
            JammerClass::Dme => "DME",
            JammerClass::Nb => "NB",
        }
    }
}

impl fmt::Display for JammerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JammerClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown jammer class `{s}`")))
    }
}

/// Inclusive range helper for per-record parameter draws.
pub type Range = (f64, f64);

fn draw(rng: &mut impl Rng, r: Range) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

/// AM tone: carrier with sinusoidal amplitude modulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmParams {
    /// Carrier frequency range, cycles per sample.
    pub carrier: Range,
    pub mod_freq: f64,
    pub mod_index: f64,
}

/// Sawtooth-repeating linear chirp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpParams {
    pub f_start: Range,
    pub f_end: Range,
    /// Sweep period in samples; 0 means one sweep over the whole record.
    pub period: usize,
}

/// Sinusoidally frequency-modulated carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmParams {
    pub carrier: Range,
    /// Peak frequency deviation, cycles per sample.
    pub deviation: f64,
    pub mod_freq: f64,
}

/// Pulse-pair (DME-like) jammer: Gaussian pulse pairs on a carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmeParams {
    pub carrier: Range,
    /// Fraction of time the pulse train is active, in (0, 1].
    pub duty_cycle: f64,
    /// Gaussian pulse width in samples; support truncated at 3 sigma.
    pub sigma: f64,
    /// Samples between the two pulses of a pair.
    pub pair_spacing: usize,
}

/// Narrowband noise: white Gaussian noise through a biquad bandpass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbParams {
    pub carrier: Range,
    /// Bandpass quality factor; 3 dB bandwidth is roughly carrier / q.
    pub q: f64,
}

/// Per-class waveform parameters. Frequencies are fractions of the sample
/// rate; ranges are drawn per record from the record seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub am: AmParams,
    pub chirp: ChirpParams,
    pub fm: FmParams,
    pub dme: DmeParams,
    pub nb: NbParams,
}

impl Default for ClassParams {
    fn default() -> Self {
        ClassParams {
            am: AmParams {
                carrier: (0.08, 0.42),
                mod_freq: 0.01,
                mod_index: 0.5,
            },
            chirp: ChirpParams {
                f_start: (0.05, 0.15),
                f_end: (0.30, 0.45),
                period: 512,
            },
            fm: FmParams {
                carrier: (0.08, 0.42),
                deviation: 0.012,
                mod_freq: 0.0008,
            },
            dme: DmeParams {
                carrier: (0.10, 0.40),
                duty_cycle: 0.1,
                sigma: 8.0,
                pair_spacing: 24,
            },
            nb: NbParams {
                carrier: (0.10, 0.40),
                q: 8.0,
            },
        }
    }
}

/// Full description of one synthesized baseband record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    /// Sample rate; frequencies elsewhere are normalized to it.
    pub sample_rate_hz: f64,
    pub num_samples: usize,
    /// Jammer-to-signal power ratio in dB.
    pub jsr_db: f64,
    /// AWGN variance.
    pub noise_power: f64,
    /// Power of the chipping (GNSS-like) component.
    pub signal_power: f64,
    /// Chip duration of the GNSS-like component, in samples.
    pub samples_per_chip: usize,
    pub class_params: ClassParams,
    pub rng_seed: u64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            sample_rate_hz: 1.0,
            num_samples: 16384,
            jsr_db: 30.0,
            noise_power: 1.0,
            signal_power: 1.0,
            samples_per_chip: 8,
            class_params: ClassParams::default(),
            rng_seed: 0,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("sample_rate_hz must be positive"));
        }
        if !self.jsr_db.is_finite() {
            return Err(Error::config("jsr_db must be finite"));
        }
        if self.noise_power < 0.0 || !self.noise_power.is_finite() {
            return Err(Error::config("noise_power must be non-negative"));
        }
        if self.signal_power < 0.0 || !self.signal_power.is_finite() {
            return Err(Error::config("signal_power must be non-negative"));
        }
        if self.samples_per_chip == 0 {
            return Err(Error::config("samples_per_chip must be positive"));
        }
        let p = &self.class_params;
        for (name, r) in [
            ("am.carrier", p.am.carrier),
            ("chirp.f_start", p.chirp.f_start),
            ("chirp.f_end", p.chirp.f_end),
            ("fm.carrier", p.fm.carrier),
            ("dme.carrier", p.dme.carrier),
            ("nb.carrier", p.nb.carrier),
        ] {
            if !(r.0 > 0.0 && r.1 < 0.5 && r.0 <= r.1) {
                return Err(Error::config(format!(
                    "{name} range ({}, {}) must satisfy 0 < lo <= hi < 0.5",
                    r.0, r.1
                )));
            }
        }
        if !(p.dme.duty_cycle > 0.0 && p.dme.duty_cycle <= 1.0) {
            return Err(Error::config("dme.duty_cycle must be in (0, 1]"));
        }
        if !(p.dme.sigma > 0.0) {
            return Err(Error::config("dme.sigma must be positive"));
        }
        if !(p.nb.q > 0.0) {
            return Err(Error::config("nb.q must be positive"));
        }
        Ok(())
    }

    /// Jammer power implied by the JSR. Referenced to unit power when the
    /// GNSS component is disabled so jammer-only records stay meaningful.
    pub fn jammer_power(&self) -> f64 {
        let reference = if self.signal_power > 0.0 {
            self.signal_power
        } else {
            1.0
        };
        reference * 10f64.powf(self.jsr_db / 10.0)
    }
}

/// The three additive terms of one record, kept separate for analysis.
#[derive(Debug, Clone)]
pub struct SignalParts {
    pub signal: Vec<f64>,
    pub jammer: Vec<f64>,
    pub noise: Vec<f64>,
    /// Samples where the jammer waveform is active (all-true for continuous
    /// jammers, pulse support for DME, all-false for NoJam).
    pub jammer_active: Vec<bool>,
}

impl SignalParts {
    pub fn combined(&self) -> Vec<f64> {
        self.signal
            .iter()
            .zip(&self.jammer)
            .zip(&self.noise)
            .map(|((s, j), w)| s + j + w)
            .collect()
    }
}

fn mean_power(samples: &[f64], mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (x, &m) in samples.iter().zip(mask) {
        if m {
            acc += x * x;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Generate the raw (unnormalized) jammer waveform and its active mask.
/// Parameter draws happen first and in a fixed order, so the waveform shape
/// is independent of the noise/signal settings.
fn raw_jammer(cfg: &SignalConfig, class: JammerClass, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = cfg.num_samples;
    let p = &cfg.class_params;
    match class {
        JammerClass::NoJam => (vec![0.0; n], vec![false; n]),
        JammerClass::Am => {
            let fc = draw(rng, p.am.carrier);
            let phase = rng.gen_range(0.0..TAU);
            let out = (0..n)
                .map(|i| {
                    let t = i as f64;
                    (TAU * fc * t + phase).cos() * (1.0 + p.am.mod_index * (TAU * p.am.mod_freq * t).cos())
                })
                .collect();
            (out, vec![true; n])
        }
        JammerClass::Chirp => {
            let fa = draw(rng, p.chirp.f_start);
            let fb = draw(rng, p.chirp.f_end);
            let phase = rng.gen_range(0.0..TAU);
            let period = if p.chirp.period == 0 { n } else { p.chirp.period };
            let denom = period.saturating_sub(1).max(1) as f64;
            let out = (0..n)
                .map(|i| {
                    let tau = (i % period) as f64;
                    (phase + TAU * (fa * tau + (fb - fa) * tau * tau / (2.0 * denom))).cos()
                })
                .collect();
            (out, vec![true; n])
        }
        JammerClass::Fm => {
            let fc = draw(rng, p.fm.carrier);
            let phase = rng.gen_range(0.0..TAU);
            let index = p.fm.deviation / p.fm.mod_freq;
            let out = (0..n)
                .map(|i| {
                    let t = i as f64;
                    (TAU * fc * t + index * (TAU * p.fm.mod_freq * t).sin() + phase).cos()
                })
                .collect();
            (out, vec![true; n])
        }
        JammerClass::Dme => {
            let fc = draw(rng, p.dme.carrier);
            let phase = rng.gen_range(0.0..TAU);
            let sigma = p.dme.sigma;
            let half = (3.0 * sigma).ceil() as usize;
            // Active span of one pulse pair; period chosen to hit the duty cycle.
            let span = p.dme.pair_spacing + 2 * half;
            let period = ((span as f64 / p.dme.duty_cycle).round() as usize).max(span + 1);
            let mut env = vec![0.0f64; n];
            let mut active = vec![false; n];
            let mut center = half;
            while center < n + half {
                for c in [center, center + p.dme.pair_spacing] {
                    let lo = c.saturating_sub(half);
                    let hi = (c + half).min(n.saturating_sub(1));
                    for i in lo..=hi.min(n - 1) {
                        let d = i as f64 - c as f64;
                        env[i] += (-d * d / (2.0 * sigma * sigma)).exp();
                        active[i] = true;
                    }
                }
                center += period;
            }
            let out = (0..n).map(|i| env[i] * (TAU * fc * i as f64 + phase).cos()).collect();
            (out, active)
        }
        JammerClass::Nb => {
            let fc = draw(rng, p.nb.carrier);
            // RBJ biquad bandpass (constant skirt gain) around fc.
            let w0 = TAU * fc;
            let alpha = w0.sin() / (2.0 * p.nb.q);
            let a0 = 1.0 + alpha;
            let (b0, b2) = (alpha / a0, -alpha / a0);
            let a1 = -2.0 * w0.cos() / a0;
            let a2 = (1.0 - alpha) / a0;
            let mut x1 = 0.0;
            let mut x2 = 0.0;
            let mut y1 = 0.0;
            let mut y2 = 0.0;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let x0: f64 = rng.sample(rand_distr::StandardNormal);
                let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                out.push(y0);
            }
            (out, vec![true; n])
        }
    }
}

/// Synthesize the three additive components of one record.
///
/// Draw order from the record seed: jammer parameters and jammer noise,
/// then the chip sequence, then AWGN. The jammer is scaled so its mean power
/// over the active portion equals `jammer_power()` exactly.
pub fn synthesize_parts(cfg: &SignalConfig, class: JammerClass) -> Result<SignalParts> {
    cfg.validate()?;
    let n = cfg.num_samples;
    let mut rng = rng_from_seed(cfg.rng_seed);

    let (mut jammer, jammer_active) = raw_jammer(cfg, class, &mut rng);
    if class != JammerClass::NoJam {
        let raw_power = mean_power(&jammer, &jammer_active);
        if raw_power > 0.0 {
            let scale = (cfg.jammer_power() / raw_power).sqrt();
            for j in &mut jammer {
                *j *= scale;
            }
        }
    }

    let mut signal = vec![0.0f64; n];
    if cfg.signal_power > 0.0 {
        let amp = cfg.signal_power.sqrt();
        let mut i = 0;
        while i < n {
            let chip = if rng.gen::<bool>() { amp } else { -amp };
            let end = (i + cfg.samples_per_chip).min(n);
            for s in &mut signal[i..end] {
                *s = chip;
            }
            i = end;
        }
    }

    let mut noise = vec![0.0f64; n];
    if cfg.noise_power > 0.0 {
        let sd = cfg.noise_power.sqrt();
        for w in &mut noise {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *w = sd * z;
        }
    }

    Ok(SignalParts {
        signal,
        jammer,
        noise,
        jammer_active,
    })
}

/// Synthesize one record: `r[n] = s[n] + j[n] + w[n]`.
pub fn synthesize_signal(cfg: &SignalConfig, class: JammerClass) -> Result<Vec<f64>> {
    Ok(synthesize_parts(cfg, class)?.combined())
}

/// Record metadata kept alongside the pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub jsr_db: f64,
    pub seed: u64,
}

/// One quantized spectrogram image with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub label: JammerClass,
    pub meta: RecordMeta,
}

/// Configuration for bulk dataset synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub per_class: usize,
    pub classes: Vec<JammerClass>,
    pub signal: SignalConfig,
    /// Per-record JSR draw range in dB, inclusive of lo.
    pub jsr_db: Range,
    pub stft: StftConfig,
    pub render: RenderConfig,
    pub master_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            per_class: 200,
            classes: JammerClass::ALL.to_vec(),
            signal: SignalConfig::default(),
            jsr_db: (20.0, 40.0),
            stft: StftConfig::default(),
            render: RenderConfig::default(),
            master_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::config("per_class must be at least 1"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("classes must be non-empty"));
        }
        let mut seen = [false; JammerClass::COUNT];
        for c in &self.classes {
            let idx = c.code() as usize;
            if seen[idx] {
                return Err(Error::config(format!("duplicate class {c}")));
            }
            seen[idx] = true;
        }
        if !(self.jsr_db.0.is_finite() && self.jsr_db.1.is_finite() && self.jsr_db.0 <= self.jsr_db.1) {
            return Err(Error::config(format!(
                "jsr_db range ({}, {}) must be finite with lo <= hi",
                self.jsr_db.0, self.jsr_db.1
            )));
        }
        self.signal.validate()?;
        self.stft.validate()?;
        self.render.validate()?;
        if self.signal.num_samples < self.stft.window_len {
            return Err(Error::config(format!(
                "num_samples {} shorter than stft window {}",
                self.signal.num_samples, self.stft.window_len
            )));
        }
        Ok(())
    }
}

/// Synthesize one spectrogram record from a derived record seed.
fn generate_record(gen: &GenConfig, class: JammerClass, record_seed: u64) -> Result<Spectrogram> {
    let mut rng = rng_from_seed(record_seed);
    let jsr_db = draw(&mut rng, gen.jsr_db);
    let synth_seed = rng.gen::<u64>();
    let cfg = SignalConfig {
        jsr_db,
        rng_seed: synth_seed,
        ..gen.signal
    };
    let samples = synthesize_signal(&cfg, class)?;
    let grid = stft_magnitude(&samples, &gen.stft)?;
    let pixels = render_spectrogram(&grid, &gen.render)?;
    Ok(Spectrogram {
        height: gen.render.out_h,
        width: gen.render.out_w,
        pixels,
        label: class,
        meta: RecordMeta {
            jsr_db,
            seed: record_seed,
        },
    })
}

/// Generate `per_class * classes.len()` records with exactly balanced labels.
/// Record `i` is a pure function of `(config, derive_seed(master_seed, [i]))`,
/// so regeneration is bit-identical and records may be built in parallel.
pub fn generate_dataset(gen: &GenConfig) -> Result<Vec<Spectrogram>> {
    gen.validate()?;
    let total = gen.per_class * gen.classes.len();
    (0..total)
        .into_par_iter()
        .map(|i| {
            let class = gen.classes[i % gen.classes.len()];
            generate_record(gen, class, derive_seed(gen.master_seed, &[i as u64]))
        })
        .collect()
}

#[cfg(test)]
mod tests;
