//! Clean baseband waveforms.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Wifi,
    Bluetooth,
    Zigbee,
    Nrf,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Wifi, Protocol::Bluetooth, Protocol::Zigbee, Protocol::Nrf];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Wifi => "wifi",
            Protocol::Bluetooth => "bluetooth",
            Protocol::Zigbee => "zigbee",
            Protocol::Nrf => "nrf",
        }
    }
}

/// Waveform template id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    /// Linear chirp sweeping the full band once per burst. Shared by every
    /// emitter in identification mode.
    Chirp,
    /// Protocol-like waveform with random payload. With `common_rate` every
    /// protocol is generated at the same samples-per-symbol, removing the
    /// bandwidth cue.
    Protocol { protocol: Protocol, common_rate: bool },
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::Chirp => f.write_str("chirp"),
            Template::Protocol { protocol, common_rate: false } => f.write_str(protocol.name()),
            Template::Protocol { protocol, common_rate: true } => {
                write!(f, "{}-common", protocol.name())
            }
        }
    }
}

impl FromStr for Template {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "chirp" {
            return Ok(Template::Chirp);
        }
        let (base, common_rate) = match s.strip_suffix("-common") {
            Some(b) => (b, true),
            None => (s, false),
        };
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == base)
            .map(|protocol| Template::Protocol { protocol, common_rate })
            .ok_or_else(|| Error::InvalidInput(format!("unknown template {s:?}")))
    }
}

const COMMON_SPS: usize = 4;

/// Clean waveform of `len` samples. Random payload bits come from `rng`;
/// the chirp consumes no randomness.
pub fn template_waveform(t: Template, len: usize, rng: &mut Rng) -> Result<Vec<Complex64>> {
    if len == 0 {
        return Err(Error::InvalidInput("template length must be positive".into()));
    }
    let w = match t {
        Template::Chirp => chirp(len),
        Template::Protocol { protocol, common_rate } => match protocol {
            Protocol::Wifi => ofdm(len, if common_rate { 16 } else { 64 }, rng),
            Protocol::Bluetooth => gfsk(len, if common_rate { COMMON_SPS } else { 8 }, 0.32, rng),
            Protocol::Zigbee => oqpsk(len, if common_rate { COMMON_SPS } else { 2 }, rng),
            Protocol::Nrf => gfsk(len, COMMON_SPS, 0.5, rng),
        },
    };
    Ok(w)
}

fn chirp(len: usize) -> Vec<Complex64> {
    let l = len as f64;
    (0..len)
        .map(|n| {
            let n = n as f64;
            Complex64::from_polar(1.0, PI * n * n / l)
        })
        .collect()
}

fn random_bits(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// OFDM-like symbols: QPSK on `nfft` subcarriers, cyclic prefix of a quarter.
fn ofdm(len: usize, nfft: usize, rng: &mut Rng) -> Vec<Complex64> {
    let cp = nfft / 4;
    let mut out = Vec::with_capacity(len + nfft + cp);
    let scale = 1.0 / (nfft as f64).sqrt();
    while out.len() < len {
        let sym: Vec<Complex64> = (0..nfft)
            .map(|_| {
                let b = random_bits(2, rng);
                Complex64::new(b[0], b[1]) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect();
        let time: Vec<Complex64> = (0..nfft)
            .map(|n| {
                sym.iter()
                    .enumerate()
                    .map(|(k, &s)| s * Complex64::from_polar(scale, TAU * (k * n) as f64 / nfft as f64))
                    .sum()
            })
            .collect();
        out.extend_from_slice(&time[nfft - cp..]);
        out.extend_from_slice(&time);
    }
    out.truncate(len);
    out
}

/// Gaussian-filtered FSK with bandwidth-time product 0.5.
fn gfsk(len: usize, sps: usize, index: f64, rng: &mut Rng) -> Vec<Complex64> {
    let nsym = len / sps + 2;
    let bits = random_bits(nsym, rng);
    let rect: Vec<f64> = bits.iter().flat_map(|&b| std::iter::repeat(b).take(sps)).collect();
    let bt = 0.5;
    let span = 3 * sps;
    let sigma = (2f64.ln()).sqrt() / (TAU * bt) * sps as f64;
    let taps: Vec<f64> = (0..=2 * span)
        .map(|i| {
            let t = i as f64 - span as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let f: f64 = taps
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let j = n as isize + i as isize - span as isize;
                    if j >= 0 && (j as usize) < rect.len() {
                        h * rect[j as usize]
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / norm;
            phase += PI * index * f / sps as f64;
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

/// Offset QPSK with half-sine chips of `sps` samples per half-chip.
fn oqpsk(len: usize, sps: usize, rng: &mut Rng) -> Vec<Complex64> {
    let chip = 2 * sps;
    let nchips = len / chip + 2;
    let i_bits = random_bits(nchips, rng);
    let q_bits = random_bits(nchips, rng);
    let pulse = |t: isize| -> f64 {
        if t < 0 || t >= chip as isize {
            0.0
        } else {
            (PI * t as f64 / chip as f64).sin()
        }
    };
    (0..len)
        .map(|n| {
            let n = n as isize;
            let ci = (n / chip as isize) as usize;
            let i = i_bits[ci] * pulse(n - (ci * chip) as isize);
            let nq = n - sps as isize;
            let q = if nq >= 0 {
                let cq = (nq / chip as isize) as usize;
                q_bits[cq] * pulse(nq - (cq * chip) as isize)
            } else {
                0.0
            };
            Complex64::new(i, q)
        })
        .collect()
}
