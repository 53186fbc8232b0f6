//! Digital delay-loop reservoir.
//!
//! Each input sample is held for `N` chip periods and multiplied by a fixed
//! random mask. In chip time `t`, with `J(t) = s(n)·m(t mod N)`,
//!
//! ```text
//! X(t) = Σ_{u=0,1} h(u)·f(η·X(t−N+u) + ν·J(t−u)) + ε(t)
//! ```
//!
//! History before the first chip is zero, `J(t−1)` at the first chip of a
//! sample is the previous sample's last chip, and the state vector is the
//! last `N` chip values after the final sample. Because `X(t−N+1)` for the
//! last node of a round is the current round's first node, the recurrence
//! runs in place on an `N`-slot ring.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::counter::{tally, MacCounter, Phase};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Sin,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Sin => v.sin(),
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Equiprobable ±1 chips.
    Binary,
    /// Chips uniform on [−1, 1].
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combiner {
    Sum,
    /// Elementwise product rescaled to unit L2 norm.
    ScalarProduct,
    Concat,
}

macro_rules! named_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

named_enum!(Nonlinearity, "nonlinearity", Nonlinearity::Sin => "sin", Nonlinearity::Tanh => "tanh");
named_enum!(MaskKind, "mask kind", MaskKind::Binary => "binary", MaskKind::Uniform => "uniform");
named_enum!(Combiner, "combiner", Combiner::Sum => "sum", Combiner::ScalarProduct => "product", Combiner::Concat => "concat");

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub chips: Vec<f64>,
    pub seed: u64,
}

/// Deterministic spreading sequence of `n` chips.
pub fn gen_mask(seed: u64, n: usize, kind: MaskKind) -> Mask {
    let mut g = rng::stream(seed, 0x3a5c);
    let chips = (0..n)
        .map(|_| match kind {
            MaskKind::Binary => {
                if g.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            MaskKind::Uniform => g.random_range(-1.0..=1.0),
        })
        .collect();
    Mask { chips, seed }
}

/// Sample-and-hold upsampling: `J[t] = sample · mask[t]`.
pub fn spread(sample: f64, mask: &Mask) -> Vec<f64> {
    mask.chips.iter().map(|m| sample * m).collect()
}

/// One loop of a split plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubLoop {
    pub n: usize,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirConfig {
    /// Virtual nodes. With splits and no explicit sub-loops, each of the `k`
    /// loops gets `n / k` nodes.
    pub n: usize,
    pub eta: f64,
    pub nu: f64,
    pub nonlinearity: Nonlinearity,
    pub h: [f64; 2],
    pub noise_sigma: f64,
    pub mask_seed: u64,
    pub mask_kind: MaskKind,
    pub splits: usize,
    pub combiner: Combiner,
    /// Explicit per-loop sizes and seeds; empty means derived from `n`.
    pub sub_loops: Vec<SubLoop>,
    /// Explicit piece lengths of the input; empty means `k` equal pieces.
    pub segments: Vec<usize>,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            n: 600,
            eta: 0.5,
            nu: 0.5,
            nonlinearity: Nonlinearity::Sin,
            h: [1.0, 0.0],
            noise_sigma: 0.0,
            mask_seed: 1,
            mask_kind: MaskKind::Binary,
            splits: 1,
            combiner: Combiner::Concat,
            sub_loops: Vec::new(),
            segments: Vec::new(),
        }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("reservoir needs at least one node".into());
        }
        if self.splits == 0 {
            return bad("split count must be at least 1".into());
        }
        if !(self.h[0] + self.h[1] > 0.0) {
            return bad(format!("filter taps {:?} must have a positive sum", self.h));
        }
        for (name, v) in [("eta", self.eta), ("nu", self.nu), ("noise_sigma", self.noise_sigma)] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        if !self.segments.is_empty() && self.segments.len() != self.splits {
            return bad(format!("{} segments for {} splits", self.segments.len(), self.splits));
        }
        if self.sub_loops.is_empty() {
            if self.n % self.splits != 0 {
                return bad(format!("{} nodes do not divide into {} loops", self.n, self.splits));
            }
        } else {
            if self.sub_loops.len() != self.splits {
                return bad(format!("{} sub-loops for {} splits", self.sub_loops.len(), self.splits));
            }
            if self.sub_loops.iter().any(|s| s.n == 0) {
                return bad("sub-loop with zero nodes".into());
            }
            if self.combiner != Combiner::Concat
                && self.sub_loops.iter().any(|s| s.n != self.sub_loops[0].n)
            {
                return bad(format!("{} combiner needs equal sub-loop sizes", self.combiner));
            }
        }
        Ok(())
    }

    pub fn loops(&self) -> Vec<SubLoop> {
        if !self.sub_loops.is_empty() {
            return self.sub_loops.clone();
        }
        if self.splits == 1 {
            return vec![SubLoop { n: self.n, mask_seed: self.mask_seed }];
        }
        (0..self.splits)
            .map(|j| SubLoop { n: self.n / self.splits, mask_seed: rng::mix(&[self.mask_seed, j as u64]) })
            .collect()
    }

    /// Length of the produced state vector.
    pub fn state_len(&self) -> usize {
        let loops = self.loops();
        match self.combiner {
            Combiner::Concat => loops.iter().map(|l| l.n).sum(),
            _ => loops[0].n,
        }
    }

    /// Stable digest over every field, in declaration order.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.u64(self.n as u64);
        h.f64(self.eta);
        h.f64(self.nu);
        h.str(&self.nonlinearity.to_string());
        h.f64(self.h[0]);
        h.f64(self.h[1]);
        h.f64(self.noise_sigma);
        h.u64(self.mask_seed);
        h.str(&self.mask_kind.to_string());
        h.u64(self.splits as u64);
        h.str(&self.combiner.to_string());
        for s in self.loops() {
            h.u64(s.n as u64);
            h.u64(s.mask_seed);
        }
        for &s in &self.segments {
            h.u64(s as u64);
        }
        h.finish()
    }

    pub fn to_kv(&self, prefix: &str) -> KeyValues {
        let mut kv = KeyValues::new();
        let k = |s: &str| format!("{prefix}{s}");
        kv.set(&k("n"), self.n);
        kv.set(&k("eta"), self.eta);
        kv.set(&k("nu"), self.nu);
        kv.set(&k("nonlinearity"), self.nonlinearity);
        kv.set(&k("h"), format!("{},{}", self.h[0], self.h[1]));
        kv.set(&k("noise_sigma"), self.noise_sigma);
        kv.set(&k("mask_seed"), self.mask_seed);
        kv.set(&k("mask_kind"), self.mask_kind);
        kv.set(&k("splits"), self.splits);
        kv.set(&k("combiner"), self.combiner);
        if !self.sub_loops.is_empty() {
            let ns: Vec<String> = self.sub_loops.iter().map(|s| s.n.to_string()).collect();
            let seeds: Vec<String> = self.sub_loops.iter().map(|s| s.mask_seed.to_string()).collect();
            kv.set(&k("sub_n"), ns.join(","));
            kv.set(&k("sub_mask_seed"), seeds.join(","));
        }
        if !self.segments.is_empty() {
            let segs: Vec<String> = self.segments.iter().map(|s| s.to_string()).collect();
            kv.set(&k("segments"), segs.join(","));
        }
        kv
    }

    /// Reads keys under `prefix`; missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let k = |s: &str| format!("{prefix}{s}");
        let h = match kv.get_list::<f64>(&k("h"))? {
            Some(v) if v.len() == 2 => [v[0], v[1]],
            Some(v) => return Err(Error::Config(format!("h needs two taps, got {}", v.len()))),
            None => d.h,
        };
        let sub_n = kv.get_list::<usize>(&k("sub_n"))?.unwrap_or_default();
        let sub_seeds = kv.get_list::<u64>(&k("sub_mask_seed"))?.unwrap_or_default();
        if sub_n.len() != sub_seeds.len() {
            return Err(Error::Config("sub_n and sub_mask_seed lengths differ".into()));
        }
        let cfg = Self {
            n: kv.get_or(&k("n"), d.n)?,
            eta: kv.get_or(&k("eta"), d.eta)?,
            nu: kv.get_or(&k("nu"), d.nu)?,
            nonlinearity: kv.get_or(&k("nonlinearity"), d.nonlinearity)?,
            h,
            noise_sigma: kv.get_or(&k("noise_sigma"), d.noise_sigma)?,
            mask_seed: kv.get_or(&k("mask_seed"), d.mask_seed)?,
            mask_kind: kv.get_or(&k("mask_kind"), d.mask_kind)?,
            splits: kv.get_or(&k("splits"), d.splits)?,
            combiner: kv.get_or(&k("combiner"), d.combiner)?,
            sub_loops: sub_n.into_iter().zip(sub_seeds).map(|(n, mask_seed)| SubLoop { n, mask_seed }).collect(),
            segments: kv.get_list(&k("segments"))?.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub x: Vec<f64>,
    pub reservoir_hash: u64,
}

/// A configured reservoir with its masks materialised.
#[derive(Debug, Clone)]
pub struct Reservoir {
    cfg: ReservoirConfig,
    hash: u64,
    /// `ν·mask` per loop.
    scaled_masks: Vec<Vec<f64>>,
}

impl Reservoir {
    pub fn new(cfg: ReservoirConfig) -> Result<Self> {
        cfg.validate()?;
        let scaled_masks = cfg
            .loops()
            .iter()
            .map(|l| gen_mask(l.mask_seed, l.n, cfg.mask_kind).chips.iter().map(|m| cfg.nu * m).collect())
            .collect();
        Ok(Self { hash: cfg.hash(), cfg, scaled_masks })
    }

    pub fn config(&self) -> &ReservoirConfig {
        &self.cfg
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn state_len(&self) -> usize {
        self.cfg.state_len()
    }

    /// Multiplies per chip: one for `s·(ν·m)`, shared by both taps, one
    /// `η·X` per active tap, one per non-unit active tap weight, and one for
    /// the noise scale when noise is on.
    pub fn macs_per_chip(&self) -> u64 {
        let [h0, h1] = self.cfg.h;
        let active = |h: f64| u64::from(h != 0.0);
        let weighted = |h: f64| u64::from(h != 0.0 && h != 1.0);
        1 + active(h0) + active(h1) + weighted(h0) + weighted(h1) + u64::from(self.cfg.noise_sigma > 0.0)
    }

    /// One loop over `input`; `which` selects the mask.
    fn run_one(&self, which: usize, input: &[f64], noise: &mut Option<rng::Rng>) -> Result<Vec<f64>> {
        let nm = &self.scaled_masks[which];
        let n = nm.len();
        let [h0, h1] = self.cfg.h;
        let (eta, sigma, f) = (self.cfg.eta, self.cfg.noise_sigma, self.cfg.nonlinearity);
        let mut buf = vec![0.0; n];
        let mut j_prev = 0.0;
        for &s in input {
            for k in 0..n {
                let j = s * nm[k];
                let mut v = 0.0;
                if h0 != 0.0 {
                    v += h0 * f.apply(eta * buf[k] + j);
                }
                if h1 != 0.0 {
                    let next = if k + 1 < n { buf[k + 1] } else { buf[0] };
                    v += h1 * f.apply(eta * next + j_prev);
                }
                if let Some(g) = noise.as_mut() {
                    let z: f64 = StandardNormal.sample(g);
                    v += sigma * z;
                }
                buf[k] = v;
                j_prev = j;
            }
        }
        if !buf.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("reservoir state is not finite; check eta and nu".into()));
        }
        Ok(buf)
    }

    /// State vector for one datapoint.
    pub fn run(&self, input: &[f64], noise_seed: u64, counter: Option<&MacCounter>) -> Result<StateVector> {
        let loops = self.cfg.loops();
        let pieces: Vec<&[f64]> = if loops.len() == 1 {
            vec![input]
        } else {
            let lens = if self.cfg.segments.is_empty() {
                if input.len() % loops.len() != 0 {
                    return Err(Error::InvalidInput(format!(
                        "{} splits do not divide input length {}",
                        loops.len(),
                        input.len()
                    )));
                }
                vec![input.len() / loops.len(); loops.len()]
            } else {
                self.cfg.segments.clone()
            };
            let total: usize = lens.iter().sum();
            if total != input.len() {
                return Err(Error::Dimension { expected: total, actual: input.len() });
            }
            let mut at = 0;
            lens.iter()
                .map(|&l| {
                    let p = &input[at..at + l];
                    at += l;
                    p
                })
                .collect()
        };
        let mut states = Vec::with_capacity(pieces.len());
        for (j, piece) in pieces.iter().enumerate() {
            let mut noise =
                (self.cfg.noise_sigma > 0.0).then(|| rng::stream(rng::mix(&[noise_seed, j as u64]), 0x401));
            states.push(self.run_one(j, piece, &mut noise)?);
            tally(counter, Phase::Loop, (piece.len() * loops[j].n) as u64 * self.macs_per_chip());
        }
        let x = if states.len() == 1 && self.cfg.combiner != Combiner::ScalarProduct {
            states.pop().expect("one state")
        } else {
            combine_raw(states, self.cfg.combiner)?
        };
        Ok(StateVector { x, reservoir_hash: self.hash })
    }

    /// States for every row of `inputs`, computed in parallel. Row `i` uses
    /// noise seed `mix(noise_seed, i)`.
    pub fn run_batch(&self, inputs: &Matrix, noise_seed: u64, counter: Option<&MacCounter>) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..inputs.rows())
            .into_par_iter()
            .map(|i| self.run(inputs.row(i), rng::mix(&[noise_seed, i as u64]), counter).map(|s| s.x))
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.state_len()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Runs a single unsplit loop.
pub fn run_loop(input: &[f64], cfg: &ReservoirConfig, noise_seed: u64) -> Result<StateVector> {
    if cfg.splits != 1 {
        return Err(Error::Config("run_loop needs an unsplit configuration".into()));
    }
    Reservoir::new(cfg.clone())?.run(input, noise_seed, None)
}

/// Runs every split loop on its piece and combines the states.
pub fn run_split(input: &[f64], cfg: &ReservoirConfig, noise_seed: u64) -> Result<StateVector> {
    Reservoir::new(cfg.clone())?.run(input, noise_seed, None)
}

/// Combines per-loop states; hashes must agree.
pub fn combine(states: &[StateVector], combiner: Combiner) -> Result<StateVector> {
    let first = states.first().ok_or_else(|| Error::InvalidInput("nothing to combine".into()))?;
    if let Some(s) = states.iter().find(|s| s.reservoir_hash != first.reservoir_hash) {
        return Err(Error::HashMismatch { model: first.reservoir_hash, state: s.reservoir_hash });
    }
    let x = combine_raw(states.iter().map(|s| s.x.clone()).collect(), combiner)?;
    Ok(StateVector { x, reservoir_hash: first.reservoir_hash })
}

fn combine_raw(states: Vec<Vec<f64>>, combiner: Combiner) -> Result<Vec<f64>> {
    if combiner == Combiner::Concat {
        return Ok(states.concat());
    }
    let n = states[0].len();
    if let Some(s) = states.iter().find(|s| s.len() != n) {
        return Err(Error::Dimension { expected: n, actual: s.len() });
    }
    let mut it = states.into_iter();
    let mut acc = it.next().expect("non-empty");
    match combiner {
        Combiner::Sum => {
            for s in it {
                acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
        }
        Combiner::ScalarProduct => {
            for s in it {
                acc.iter_mut().zip(&s).for_each(|(a, b)| *a *= b);
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric("product of states has zero norm".into()));
            }
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        Combiner::Concat => unreachable!(),
    }
    Ok(acc)
}
