//! Real-valued views of complex bursts, used as reservoir input streams.
//!
//! Every transform drops the carrier phase. Spectral transforms use the
//! `1/ℓ` DFT scaling throughout, so an impulse has a flat unit-over-ℓ
//! spectrum and a constant burst maps onto its DC bin unchanged.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::signal::{Dataset, IqBurst};

#[derive(Debug, Clone, PartialEq)]
pub struct RealDatapoint {
    pub values: Vec<f64>,
    pub label: Option<u16>,
    pub transform_id: String,
}

impl RealDatapoint {
    pub fn new(values: Vec<f64>, label: Option<u16>, transform_id: impl Into<String>) -> Self {
        Self { values, label, transform_id: transform_id.into() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

/// In-place forward DFT (no scaling).
fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    let plan = PLANS.with(|p| {
        let (planner, cache) = &mut *p.borrow_mut();
        cache.entry(n).or_insert_with(|| planner.plan_fft_forward(n)).clone()
    });
    plan.process(buf);
}

fn scaled_magnitudes(mut buf: Vec<Complex64>, scale: f64) -> Vec<f64> {
    fft_in_place(&mut buf);
    buf.iter().map(|c| c.norm() * scale).collect()
}

/// `|s(n)|`.
pub fn amplitude(burst: &IqBurst) -> RealDatapoint {
    RealDatapoint::new(burst.samples.iter().map(|c| c.norm()).collect(), burst.label, "amp")
}

/// `|DFT(s)| / ℓ`. The burst length must be a power of two.
pub fn fft_magnitude(burst: &IqBurst) -> Result<RealDatapoint> {
    let values = fft_mag_values(&burst.samples)?;
    Ok(RealDatapoint::new(values, burst.label, "fft"))
}

fn fft_mag_values(s: &[Complex64]) -> Result<Vec<f64>> {
    let l = s.len();
    if !l.is_power_of_two() {
        return Err(Error::InvalidInput(format!("FFT length {l} is not a power of two")));
    }
    Ok(scaled_magnitudes(s.to_vec(), 1.0 / l as f64))
}

/// Per-position mean amplitude over a (training) set of bursts.
pub fn mean_amplitudes(bursts: &[IqBurst]) -> Result<Vec<f64>> {
    let first = bursts.first().ok_or_else(|| Error::InvalidInput("empty burst set".into()))?;
    let l = first.len();
    let mut mean = vec![0.0; l];
    for b in bursts {
        if b.len() != l {
            return Err(Error::Dimension { expected: l, actual: b.len() });
        }
        for (m, c) in mean.iter_mut().zip(&b.samples) {
            *m += c.norm();
        }
    }
    let inv = 1.0 / bursts.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// FFT magnitude of the burst after removing the mean amplitude profile
/// while keeping each sample's phase.
pub fn differential_fft(burst: &IqBurst, mean_amplitudes: &[f64]) -> Result<RealDatapoint> {
    if mean_amplitudes.len() != burst.len() {
        return Err(Error::Dimension { expected: burst.len(), actual: mean_amplitudes.len() });
    }
    let biased: Vec<Complex64> = burst
        .samples
        .iter()
        .zip(mean_amplitudes)
        .map(|(c, &m)| {
            let a = c.norm();
            if a == 0.0 {
                Complex64::new(-m, 0.0)
            } else {
                c * ((a - m) / a)
            }
        })
        .collect();
    Ok(RealDatapoint::new(fft_mag_values(&biased)?, burst.label, "dfft"))
}

/// Magnitudes of every `d`-th DFT bin, scaled by `1/ℓ`; length `ℓ/d`.
///
/// Computed by folding the burst into `d` aliased blocks and taking one
/// `ℓ/d`-point transform, which equals multiplying by the DFT matrix with
/// all but every `d`-th column removed.
pub fn decimated_dft(burst: &IqBurst, d: usize) -> Result<RealDatapoint> {
    let l = burst.len();
    if d == 0 || l % d != 0 {
        return Err(Error::InvalidInput(format!("decimation {d} does not divide length {l}")));
    }
    let m = l / d;
    let mut folded = vec![Complex64::new(0.0, 0.0); m];
    for block in burst.samples.chunks_exact(m) {
        for (f, s) in folded.iter_mut().zip(block) {
            *f += s;
        }
    }
    Ok(RealDatapoint::new(scaled_magnitudes(folded, 1.0 / l as f64), burst.label, format!("dec{d}")))
}

/// One frequency estimate (cycles/sample) per non-overlapping 3-sample
/// window: the mean of the two successive phase increments.
pub fn freq_estimate(burst: &IqBurst) -> Result<RealDatapoint> {
    if burst.len() < 3 {
        return Err(Error::InvalidInput("frequency estimate needs at least 3 samples".into()));
    }
    let inv = 1.0 / (2.0 * std::f64::consts::TAU);
    let values = burst
        .samples
        .chunks_exact(3)
        .map(|w| ((w[1] * w[0].conj()).arg() + (w[2] * w[1].conj()).arg()) * inv)
        .collect();
    Ok(RealDatapoint::new(values, burst.label, "freq"))
}

/// `k` contiguous equal pieces, in order.
pub fn split(dp: &RealDatapoint, k: usize) -> Result<Vec<RealDatapoint>> {
    if k == 0 || dp.len() % k != 0 {
        return Err(Error::InvalidInput(format!("{k} pieces do not divide length {}", dp.len())));
    }
    let w = dp.len() / k;
    Ok(split_lengths(dp, &vec![w; k]).expect("equal pieces cover the datapoint"))
}

/// Contiguous pieces of the given lengths, which must sum to the length.
pub fn split_lengths(dp: &RealDatapoint, lengths: &[usize]) -> Result<Vec<RealDatapoint>> {
    let total: usize = lengths.iter().sum();
    if total != dp.len() {
        return Err(Error::Dimension { expected: dp.len(), actual: total });
    }
    let mut at = 0;
    Ok(lengths
        .iter()
        .map(|&w| {
            let piece = RealDatapoint::new(dp.values[at..at + w].to_vec(), dp.label, dp.transform_id.clone());
            at += w;
            piece
        })
        .collect())
}

/// Declarative transform selection, as written in experiment configs.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformSpec {
    Amplitude,
    SubburstAmplitude { start: usize, len: usize },
    FftMag,
    DiffFftMag,
    DecimatedDft(usize),
    FreqEst,
    /// Streams concatenated in order, each truncated to its declared length.
    Mixed(Vec<(TransformSpec, usize)>),
}

impl TransformSpec {
    /// Default mixed stream: 750 amplitudes followed by 250 frequency estimates.
    pub fn default_mixed() -> Self {
        TransformSpec::Mixed(vec![(TransformSpec::Amplitude, 750), (TransformSpec::FreqEst, 250)])
    }

    pub fn needs_training_mean(&self) -> bool {
        match self {
            TransformSpec::DiffFftMag => true,
            TransformSpec::Mixed(parts) => parts.iter().any(|(p, _)| p.needs_training_mean()),
            _ => false,
        }
    }

    /// Segment lengths of the output: one entry, or one per mixed stream.
    pub fn segments(&self, burst_len: usize) -> Vec<usize> {
        match self {
            TransformSpec::Mixed(parts) => parts.iter().map(|(_, l)| *l).collect(),
            other => vec![other.output_len(burst_len)],
        }
    }

    pub fn output_len(&self, burst_len: usize) -> usize {
        match self {
            TransformSpec::Amplitude | TransformSpec::FftMag | TransformSpec::DiffFftMag => burst_len,
            TransformSpec::SubburstAmplitude { len, .. } => *len,
            TransformSpec::DecimatedDft(d) => burst_len / (*d).max(1),
            TransformSpec::FreqEst => burst_len / 3,
            TransformSpec::Mixed(parts) => parts.iter().map(|(_, l)| l).sum(),
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Amplitude => f.write_str("amp"),
            TransformSpec::SubburstAmplitude { start, len } => write!(f, "subamp:{start}:{len}"),
            TransformSpec::FftMag => f.write_str("fft"),
            TransformSpec::DiffFftMag => f.write_str("dfft"),
            TransformSpec::DecimatedDft(d) => write!(f, "dec:{d}"),
            TransformSpec::FreqEst => f.write_str("freq"),
            TransformSpec::Mixed(parts) => {
                f.write_str("mixed(")?;
                for (i, (p, l)) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}/{l}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for TransformSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown transform {s:?}"));
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("mixed(").and_then(|r| r.strip_suffix(')')) {
            let parts = inner
                .split('+')
                .map(|p| {
                    let (t, l) = p.rsplit_once('/').ok_or_else(bad)?;
                    let spec: TransformSpec = t.parse()?;
                    if matches!(spec, TransformSpec::Mixed(_)) {
                        return Err(bad());
                    }
                    Ok((spec, l.trim().parse().map_err(|_| bad())?))
                })
                .collect::<Result<_>>()?;
            return Ok(TransformSpec::Mixed(parts));
        }
        if s == "mixed" {
            return Ok(Self::default_mixed());
        }
        let mut it = s.split(':');
        let spec = match it.next() {
            Some("amp") => TransformSpec::Amplitude,
            Some("fft") => TransformSpec::FftMag,
            Some("dfft") => TransformSpec::DiffFftMag,
            Some("freq") => TransformSpec::FreqEst,
            Some("dec") => TransformSpec::DecimatedDft(it.next().and_then(|d| d.parse().ok()).ok_or_else(bad)?),
            Some("subamp") => {
                let start = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let len = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                TransformSpec::SubburstAmplitude { start, len }
            }
            _ => return Err(bad()),
        };
        if it.next().is_some() {
            return Err(bad());
        }
        Ok(spec)
    }
}

/// A transform ready to apply: the transform choice plus any statistics
/// fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub spec: TransformSpec,
    pub mean_amplitudes: Option<Vec<f64>>,
}

impl Transformer {
    pub fn new(spec: TransformSpec) -> Result<Self> {
        if spec.needs_training_mean() {
            return Err(Error::Config(format!("transform {spec} must be fitted on training data")));
        }
        Ok(Self { spec, mean_amplitudes: None })
    }

    /// Fits training statistics when the transform needs them.
    pub fn fit(spec: TransformSpec, train: &[IqBurst]) -> Result<Self> {
        let mean_amplitudes = if spec.needs_training_mean() { Some(mean_amplitudes(train)?) } else { None };
        Ok(Self { spec, mean_amplitudes })
    }

    pub fn apply(&self, burst: &IqBurst) -> Result<RealDatapoint> {
        let mut dp = self.apply_spec(&self.spec, burst)?;
        dp.transform_id = self.spec.to_string();
        if !dp.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("transform {} produced non-finite output", self.spec)));
        }
        Ok(dp)
    }

    fn apply_spec(&self, spec: &TransformSpec, burst: &IqBurst) -> Result<RealDatapoint> {
        match spec {
            TransformSpec::Amplitude => Ok(amplitude(burst)),
            TransformSpec::SubburstAmplitude { start, len } => {
                Ok(amplitude(&crate::signal::extract_subburst(burst, *start, *len)?))
            }
            TransformSpec::FftMag => fft_magnitude(burst),
            TransformSpec::DiffFftMag => {
                let mean = self.mean_amplitudes.as_deref().ok_or_else(|| {
                    Error::Config("differential FFT used without a training mean".into())
                })?;
                differential_fft(burst, mean)
            }
            TransformSpec::DecimatedDft(d) => decimated_dft(burst, *d),
            TransformSpec::FreqEst => freq_estimate(burst),
            TransformSpec::Mixed(parts) => {
                let mut values = Vec::with_capacity(spec.output_len(burst.len()));
                for (p, l) in parts {
                    let dp = self.apply_spec(p, burst)?;
                    if dp.len() < *l {
                        return Err(Error::Config(format!(
                            "stream {p} yields {} values, fewer than the declared {l}",
                            dp.len()
                        )));
                    }
                    values.extend_from_slice(&dp.values[..*l]);
                }
                Ok(RealDatapoint::new(values, burst.label, ""))
            }
        }
    }

    /// Transforms a whole dataset into a row-per-burst feature matrix.
    pub fn apply_dataset(&self, ds: &Dataset) -> Result<(Matrix, Vec<u16>)> {
        let rows: Vec<Vec<f64>> = ds
            .bursts
            .par_iter()
            .map(|b| self.apply(b).map(|d| d.values))
            .collect::<Result<_>>()?;
        Ok((Matrix::from_rows(&rows)?, ds.labels()))
    }
}
