//! Synthetic RF bursts, per-emitter fingerprints and dataset handling.
//!
//! A burst is produced by taking a clean baseband template and passing it
//! through a per-emitter impairment chain:
//!
//! ```text
//! ripple AM -> PA polynomial -> IQ imbalance -> DC offset -> CFO -> AWGN
//! ```
//!
//! In emitter-identification mode every class shares one template (a linear
//! chirp) and differs only in its impairments. In protocol-recognition mode
//! the class is the template itself.

mod dataset;
mod salience;
mod templates;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub use dataset::{generate, load_dataset, save_dataset, Dataset, DatasetManifest, Mode};
pub use salience::{build_salience_map, SalienceMap};
pub use templates::{template_waveform, Protocol, Template};

/// One captured emission: complex baseband samples plus an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct IqBurst {
    pub samples: Vec<Complex64>,
    pub label: Option<u16>,
    pub source_id: u64,
}

impl IqBurst {
    pub fn new(samples: Vec<Complex64>, label: Option<u16>, source_id: u64) -> Result<Self> {
        let b = Self { samples, label, source_id };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "burst has {} samples, need at least 3",
                self.samples.len()
            )));
        }
        if !self.samples.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::InvalidInput("burst contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

fn rms(s: &[Complex64]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    (s.iter().map(|c| c.norm_sqr()).sum::<f64>() / s.len() as f64).sqrt()
}

/// Hardware fingerprint of one transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct EmitterProfile {
    pub class_id: u16,
    /// Quadrature branch gain relative to the in-phase branch.
    pub iq_gain_imbalance: f64,
    /// Quadrature skew in radians.
    pub iq_phase_skew: f64,
    pub dc_offset: Complex64,
    /// Carrier offset in cycles per sample.
    pub freq_offset: f64,
    /// Odd memoryless PA polynomial `(a1, a3, a5)`.
    pub pa_poly: [f64; 3],
    /// Depth of the supply-ripple amplitude modulation.
    pub ripple_depth: f64,
    /// Ripple frequency in cycles per sample.
    pub ripple_freq: f64,
}

impl EmitterProfile {
    /// A perfect transmitter: `distort` leaves the template untouched.
    pub fn identity(class_id: u16) -> Self {
        Self {
            class_id,
            iq_gain_imbalance: 1.0,
            iq_phase_skew: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            freq_offset: 0.0,
            pa_poly: [1.0, 0.0, 0.0],
            ripple_depth: 0.0,
            ripple_freq: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.iq_gain_imbalance,
            self.iq_phase_skew,
            self.dc_offset.re,
            self.dc_offset.im,
            self.freq_offset,
            self.pa_poly[0],
            self.pa_poly[1],
            self.pa_poly[2],
            self.ripple_depth,
            self.ripple_freq,
        ];
        if !finite.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("profile has non-finite parameters".into()));
        }
        if self.pa_poly[0] <= 0.0 {
            return Err(Error::InvalidInput("pa_poly a1 must be positive".into()));
        }
        if self.freq_offset.abs() >= 0.5 {
            return Err(Error::InvalidInput("|freq_offset| must be below 0.5".into()));
        }
        Ok(())
    }

    /// Applies the impairment chain to a clean waveform.
    ///
    /// `ripple_phase` is the per-burst phase of the ripple tone; it is the
    /// only burst-to-burst randomness apart from the additive noise.
    pub fn distort(&self, clean: &[Complex64], ripple_phase: f64) -> Vec<Complex64> {
        let [a1, a3, a5] = self.pa_poly;
        let (sk, ck) = self.iq_phase_skew.sin_cos();
        let tau = std::f64::consts::TAU;
        clean
            .iter()
            .enumerate()
            .map(|(n, &x)| {
                let n = n as f64;
                let x = if self.ripple_depth != 0.0 {
                    x * (1.0 + self.ripple_depth * (tau * self.ripple_freq * n + ripple_phase).cos())
                } else {
                    x
                };
                let p = x.norm_sqr();
                let y = x * (a1 + a3 * p + a5 * p * p);
                let q = self.iq_gain_imbalance * (ck * y.im + sk * y.re);
                let y = Complex64::new(y.re, q) + self.dc_offset;
                if self.freq_offset != 0.0 {
                    y * Complex64::from_polar(1.0, tau * self.freq_offset * n)
                } else {
                    y
                }
            })
            .collect()
    }
}

/// Ranges of the per-emitter parameters drawn by [`synth_emitter_profile`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRanges {
    pub pa_a3: (f64, f64),
    pub pa_a5: (f64, f64),
    pub gain: (f64, f64),
    pub skew: (f64, f64),
    pub cfo: (f64, f64),
    pub dc: (f64, f64),
    pub ripple_depth: (f64, f64),
    pub ripple_freq: (f64, f64),
}

impl Default for ProfileRanges {
    fn default() -> Self {
        Self {
            pa_a3: (-0.05, 0.05),
            pa_a5: (-0.05, 0.05),
            gain: (0.98, 1.02),
            skew: (-0.02, 0.02),
            cfo: (-1e-5, 1e-5),
            dc: (-0.01, 0.01),
            ripple_depth: (0.8, 0.8),
            ripple_freq: (1.0 / 64.0, 1.0 / 2.0),
        }
    }
}

/// Deterministic fingerprint for `(class_id, seed)` using default ranges.
pub fn synth_emitter_profile(class_id: u16, seed: u64) -> EmitterProfile {
    synth_emitter_profile_with(class_id, seed, &ProfileRanges::default())
}

pub fn synth_emitter_profile_with(class_id: u16, seed: u64, r: &ProfileRanges) -> EmitterProfile {
    let mut g = rng::stream(seed, 0x5e1_0000 + class_id as u64);
    let mut u = |(lo, hi): (f64, f64)| if hi > lo { g.random_range(lo..hi) } else { lo };
    EmitterProfile {
        class_id,
        pa_poly: [1.0, u(r.pa_a3), u(r.pa_a5)],
        iq_gain_imbalance: u(r.gain),
        iq_phase_skew: u(r.skew),
        freq_offset: u(r.cfo),
        dc_offset: Complex64::new(u(r.dc), u(r.dc)),
        ripple_depth: u(r.ripple_depth),
        ripple_freq: spread(r.ripple_freq, class_id, seed),
    }
}

/// Ripple frequencies follow a golden-ratio sequence over classes, shifted by
/// a per-seed offset, so no two emitters of one dataset share a fingerprint.
fn spread((lo, hi): (f64, f64), class_id: u16, seed: u64) -> f64 {
    let offset: f64 = rng::stream(seed, 0x5e1_ffff).random();
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    lo + (hi - lo) * (offset + class_id as f64 * golden).fract()
}

/// One noisy burst from `profile` applied to `template`.
///
/// `noise_db` is the signal-to-noise ratio of the added complex white noise;
/// `f64::INFINITY` disables it.
pub fn synth_burst(
    profile: &EmitterProfile,
    template: Template,
    len: usize,
    noise_db: f64,
    seed: u64,
) -> Result<IqBurst> {
    if noise_db.is_nan() || noise_db == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(format!("noise_db must be finite or +inf, got {noise_db}")));
    }
    if len < 3 {
        return Err(Error::InvalidInput(format!("burst length {len} below 3")));
    }
    profile.validate()?;
    let mut g = rng::stream(seed, 0xb0_0000 + profile.class_id as u64);
    let clean = template_waveform(template, len, &mut g)?;
    let phase = g.random_range(0.0..std::f64::consts::TAU);
    let mut y = profile.distort(&clean, phase);
    if noise_db.is_finite() {
        let power = y.iter().map(|c| c.norm_sqr()).sum::<f64>() / len as f64;
        let sigma = (power / 10f64.powf(noise_db / 10.0) / 2.0).sqrt();
        for c in y.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut g);
            let im: f64 = StandardNormal.sample(&mut g);
            *c += Complex64::new(sigma * re, sigma * im);
        }
    }
    IqBurst::new(y, Some(profile.class_id), seed)
}

/// Rescales a burst to unit RMS magnitude; phases are untouched.
pub fn normalize(burst: &IqBurst) -> Result<IqBurst> {
    let r = burst.rms();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidInput("cannot normalize a zero-energy burst".into()));
    }
    let mut samples: Vec<Complex64> = burst.samples.iter().map(|c| c / r).collect();
    // One refinement pass brings the RMS to within an ulp or two of 1.
    let r2 = rms(&samples);
    if r2 != 1.0 {
        for c in samples.iter_mut() {
            *c /= r2;
        }
    }
    Ok(IqBurst { samples, label: burst.label, source_id: burst.source_id })
}

/// Contiguous window `start..start + len`, label preserved.
pub fn extract_subburst(burst: &IqBurst, start: usize, len: usize) -> Result<IqBurst> {
    let end = start.checked_add(len).filter(|&e| e <= burst.len()).ok_or_else(|| {
        Error::InvalidInput(format!(
            "window {start}+{len} exceeds burst length {}",
            burst.len()
        ))
    })?;
    Ok(IqBurst {
        samples: burst.samples[start..end].to_vec(),
        label: burst.label,
        source_id: burst.source_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_is_deterministic_and_distinct() {
        assert_eq!(synth_emitter_profile(0, 42), synth_emitter_profile(0, 42));
        assert_ne!(synth_emitter_profile(0, 42), synth_emitter_profile(1, 42));
        assert_ne!(synth_emitter_profile(0, 42), synth_emitter_profile(0, 43));
    }

    #[test]
    fn twenty_profiles_have_distinct_pa_polys() {
        let polys: Vec<[f64; 3]> = (0..20).map(|c| synth_emitter_profile(c, 7).pa_poly).collect();
        for i in 0..20 {
            for j in i + 1..20 {
                assert_ne!(polys[i], polys[j], "classes {i} and {j}");
            }
        }
    }

    #[test]
    fn identity_profile_without_noise_returns_template() {
        let p = EmitterProfile::identity(3);
        let b = synth_burst(&p, Template::Chirp, 256, f64::INFINITY, 9).unwrap();
        let mut g = rng::stream(9, 0xb0_0000 + 3);
        let clean = template_waveform(Template::Chirp, 256, &mut g).unwrap();
        assert_eq!(b.samples, clean);
        assert_eq!(b.label, Some(3));
    }

    #[test]
    fn burst_is_deterministic() {
        let p = synth_emitter_profile(2, 1);
        let a = synth_burst(&p, Template::Chirp, 128, 20.0, 5).unwrap();
        let b = synth_burst(&p, Template::Chirp, 128, 20.0, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_burst(&p, Template::Chirp, 128, 20.0, 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn snr_is_roughly_respected() {
        let p = EmitterProfile::identity(0);
        let clean = synth_burst(&p, Template::Chirp, 4096, f64::INFINITY, 1).unwrap();
        let noisy = synth_burst(&p, Template::Chirp, 4096, 10.0, 1).unwrap();
        let noise: f64 = clean
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / 4096.0;
        let snr = 10.0 * (1.0 / noise).log10();
        assert!((snr - 10.0).abs() < 0.3, "measured {snr}");
    }

    #[test]
    fn normalize_fixed_point_and_scale_invariance() {
        let p = synth_emitter_profile(1, 3);
        let b = synth_burst(&p, Template::Chirp, 300, 15.0, 2).unwrap();
        let n = normalize(&b).unwrap();
        assert!((n.rms() - 1.0).abs() < 1e-12);
        let scaled = IqBurst { samples: b.samples.iter().map(|c| c * 5.0).collect(), ..b.clone() };
        let ns = normalize(&scaled).unwrap();
        for (a, c) in n.samples.iter().zip(&ns.samples) {
            assert!((a - c).norm() < 1e-14);
        }
        let again = normalize(&n).unwrap();
        for (a, c) in n.samples.iter().zip(&again.samples) {
            assert!((a - c).norm() < 1e-15);
        }
        for (a, c) in b.samples.iter().zip(&n.samples) {
            assert!((a.arg() - c.arg()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_burst() {
        let z = IqBurst { samples: vec![Complex64::new(0.0, 0.0); 8], label: None, source_id: 0 };
        assert!(normalize(&z).is_err());
    }

    #[test]
    fn subburst_slicing() {
        let s: Vec<Complex64> = (0..20).map(|i| Complex64::new(i as f64, 0.0)).collect();
        let b = IqBurst::new(s, Some(4), 1).unwrap();
        assert_eq!(extract_subburst(&b, 0, 20).unwrap(), b);
        let w = extract_subburst(&b, 10, 4).unwrap();
        let re: Vec<f64> = w.samples.iter().map(|c| c.re).collect();
        assert_eq!(re, vec![10.0, 11.0, 12.0, 13.0]);
        assert_eq!(w.label, Some(4));
        assert!(extract_subburst(&b, 18, 4).is_err());
        assert!(extract_subburst(&b, usize::MAX, 4).is_err());
    }

    #[test]
    fn burst_validation() {
        assert!(IqBurst::new(vec![Complex64::new(1.0, 0.0); 2], None, 0).is_err());
        assert!(IqBurst::new(vec![Complex64::new(f64::NAN, 0.0); 4], None, 0).is_err());
    }
}
