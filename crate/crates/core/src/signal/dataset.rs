//! Dataset generation and the binary burst file format.
//!
//! File layout, little-endian:
//!
//! ```text
//! "DLRD" | version u16 | mode u8 | Q u16 | len u32 | count u32
//! count × ( label u16 | len × (I f32, Q f32) )
//! ```
//!
//! Unlabelled bursts are stored with label `0xffff`.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;

use super::{synth_burst, synth_emitter_profile, IqBurst, Protocol, Template};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::rng;

const MAGIC: &[u8; 4] = b"DLRD";
const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 1 + 2 + 4 + 4;
const UNLABELLED: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Specific emitter identification: one class per transmitter.
    Sei,
    /// Protocol recognition: one class per waveform family.
    WiPRec,
}

impl Mode {
    fn tag(self) -> u8 {
        match self {
            Mode::Sei => 0,
            Mode::WiPRec => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Mode::Sei),
            1 => Ok(Mode::WiPRec),
            _ => Err(Error::Format(format!("unknown dataset mode tag {t}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sei => "sei",
            Mode::WiPRec => "wiprec",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sei" => Ok(Mode::Sei),
            "wiprec" => Ok(Mode::WiPRec),
            _ => Err(Error::Config(format!("unknown dataset mode {s:?}"))),
        }
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub mode: Mode,
    pub q: u16,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub len: usize,
    pub noise_db: f64,
    pub seed: u64,
    /// Protocol mode only: generate every protocol at one symbol rate.
    pub common_rate: bool,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            mode: Mode::Sei,
            q: 20,
            train_per_class: 600,
            test_per_class: 100,
            len: 1024,
            noise_db: 16.0,
            seed: 7,
            common_rate: false,
            train_file: None,
            test_file: None,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::Config(format!("Q must be at least 2, got {}", self.q)));
        }
        if self.mode == Mode::WiPRec && self.q as usize > Protocol::ALL.len() {
            return Err(Error::Config(format!(
                "protocol mode supports at most {} classes",
                Protocol::ALL.len()
            )));
        }
        if self.len < 3 {
            return Err(Error::Config("burst length must be at least 3".into()));
        }
        if self.noise_db.is_nan() {
            return Err(Error::Config("noise_db is NaN".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("mode", self.mode);
        kv.set("q", self.q);
        kv.set("train_per_class", self.train_per_class);
        kv.set("test_per_class", self.test_per_class);
        kv.set("len", self.len);
        kv.set("noise_db", self.noise_db);
        kv.set("seed", self.seed);
        kv.set("common_rate", self.common_rate);
        if let Some(p) = &self.train_file {
            kv.set("train_file", p.display());
        }
        if let Some(p) = &self.test_file {
            kv.set("test_file", p.display());
        }
        kv
    }

    /// Reads a manifest; missing keys take their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let m = Self {
            mode: kv.get_or("mode", d.mode)?,
            q: kv.get_or("q", d.q)?,
            train_per_class: kv.get_or("train_per_class", d.train_per_class)?,
            test_per_class: kv.get_or("test_per_class", d.test_per_class)?,
            len: kv.get_or("len", d.len)?,
            noise_db: kv.get_or("noise_db", d.noise_db)?,
            seed: kv.get_or("seed", d.seed)?,
            common_rate: kv.get_or("common_rate", d.common_rate)?,
            train_file: kv.get_str("train_file").map(PathBuf::from),
            test_file: kv.get_str("test_file").map(PathBuf::from),
        };
        m.validate()?;
        Ok(m)
    }
}

/// A labelled collection of equally long bursts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub q: u16,
    pub len: usize,
    pub bursts: Vec<IqBurst>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u16> {
        self.bursts.iter().map(|b| b.label.unwrap_or(UNLABELLED)).collect()
    }

    /// Bursts whose label is in `keep`, order preserved.
    pub fn filter_labels(&self, keep: &[u16]) -> Dataset {
        Dataset {
            bursts: self
                .bursts
                .iter()
                .filter(|b| b.label.is_some_and(|l| keep.contains(&l)))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Exact size in bytes of the serialized file.
    pub fn file_size(&self) -> usize {
        HEADER_BYTES + self.bursts.len() * (2 + 8 * self.len)
    }
}

/// Generates the train and test splits described by `m`.
///
/// Bursts are rounded to single precision, the stored sample format, so a
/// save/load round trip is exact.
pub fn generate(m: &DatasetManifest) -> Result<(Dataset, Dataset)> {
    m.validate()?;
    let per_class = m.train_per_class + m.test_per_class;
    let classes: Vec<Vec<IqBurst>> = (0..m.q)
        .into_par_iter()
        .map(|class| -> Result<Vec<IqBurst>> {
            (0..per_class)
                .map(|j| {
                    let seed = rng::mix(&[m.seed, class as u64, j as u64]);
                    let (profile, template) = match m.mode {
                        Mode::Sei => (synth_emitter_profile(class, m.seed), Template::Chirp),
                        Mode::WiPRec => {
                            // Random hardware per burst; the class is the protocol.
                            let device = (seed % 64) as u16;
                            let mut p = synth_emitter_profile(device, m.seed ^ 0x77);
                            p.class_id = class;
                            p.ripple_depth = 0.0;
                            let protocol = Protocol::ALL[class as usize];
                            (p, Template::Protocol { protocol, common_rate: m.common_rate })
                        }
                    };
                    let mut b = synth_burst(&profile, template, m.len, m.noise_db, seed)?;
                    b.source_id = (class as u64) * per_class as u64 + j as u64;
                    for c in b.samples.iter_mut() {
                        *c = Complex64::new(c.re as f32 as f64, c.im as f32 as f64);
                    }
                    Ok(b)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut train = Vec::with_capacity(m.q as usize * m.train_per_class);
    let mut test = Vec::with_capacity(m.q as usize * m.test_per_class);
    for bursts in classes {
        let mut it = bursts.into_iter();
        train.extend(it.by_ref().take(m.train_per_class));
        test.extend(it);
    }
    let wrap = |bursts| Dataset { mode: m.mode, q: m.q, len: m.len, bursts };
    Ok((wrap(train), wrap(test)))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[ds.mode.tag()])?;
    w.write_all(&ds.q.to_le_bytes())?;
    w.write_all(&u32::try_from(ds.len).map_err(|_| Error::Format("burst too long".into()))?.to_le_bytes())?;
    w.write_all(
        &u32::try_from(ds.bursts.len()).map_err(|_| Error::Format("too many bursts".into()))?.to_le_bytes(),
    )?;
    for b in &ds.bursts {
        if b.len() != ds.len {
            return Err(Error::Dimension { expected: ds.len, actual: b.len() });
        }
        w.write_all(&b.label.unwrap_or(UNLABELLED).to_le_bytes())?;
        for c in &b.samples {
            w.write_all(&(c.re as f32).to_le_bytes())?;
            w.write_all(&(c.im as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("dataset header truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mode = Mode::from_tag(bytes[6])?;
    let q = u16::from_le_bytes([bytes[7], bytes[8]]);
    let len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let record = 2 + 8 * len;
    let expected = count
        .checked_mul(record)
        .and_then(|p| p.checked_add(HEADER_BYTES))
        .ok_or_else(|| Error::Format("dataset header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    let mut bursts = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER_BYTES + i * record;
        let label = u16::from_le_bytes([bytes[base], bytes[base + 1]]);
        let samples = (0..len)
            .map(|n| {
                let off = base + 2 + 8 * n;
                Complex64::new(f32_at(off), f32_at(off + 4))
            })
            .collect();
        bursts.push(IqBurst {
            samples,
            label: (label != UNLABELLED).then_some(label),
            source_id: i as u64,
        });
    }
    Ok(Dataset { mode, q, len, bursts })
}
