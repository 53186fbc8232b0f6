//! Multiply/accumulate instrumentation.
//!
//! Counts are exact tallies of the real multiplies performed by the
//! instrumented kernels. Tallies are atomic so a single counter can be shared
//! by concurrent workers; addition commutes, so the totals do not depend on
//! scheduling.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Reservoir evolution (chip-time recurrence).
    Loop,
    /// Ridge-regression readout fit.
    Fit,
    /// Readout or fusion-net inference.
    Inference,
    /// Gradient-based retraining of a fusion net.
    Train,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Loop, Phase::Fit, Phase::Inference, Phase::Train];

    fn index(self) -> usize {
        match self {
            Phase::Loop => 0,
            Phase::Fit => 1,
            Phase::Inference => 2,
            Phase::Train => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Loop => "loop",
            Phase::Fit => "fit",
            Phase::Inference => "inference",
            Phase::Train => "train",
        }
    }
}

#[derive(Debug, Default)]
pub struct MacCounter {
    tallies: [AtomicU64; 4],
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, phase: Phase, n: u64) {
        self.tallies[phase.index()].fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self, phase: Phase) -> u64 {
        self.tallies[phase.index()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.get(p)).sum()
    }

    pub fn reset(&self) {
        for t in &self.tallies {
            t.store(0, Ordering::Relaxed);
        }
    }

    /// Folds another worker's tallies into this one.
    pub fn merge(&self, other: &MacCounter) {
        for p in Phase::ALL {
            self.add(p, other.get(p));
        }
    }

    pub fn snapshot(&self) -> MacTally {
        MacTally {
            loop_macs: self.get(Phase::Loop),
            fit_macs: self.get(Phase::Fit),
            inference_macs: self.get(Phase::Inference),
            train_macs: self.get(Phase::Train),
        }
    }
}

/// Plain copy of a counter's state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacTally {
    pub loop_macs: u64,
    pub fit_macs: u64,
    pub inference_macs: u64,
    pub train_macs: u64,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.loop_macs + self.fit_macs + self.inference_macs + self.train_macs
    }
}

impl fmt::Display for MacTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loop={} fit={} inference={} train={}",
            self.loop_macs, self.fit_macs, self.inference_macs, self.train_macs
        )
    }
}

/// Adds to `counter` when instrumentation is enabled.
#[inline]
pub(crate) fn tally(counter: Option<&MacCounter>, phase: Phase, n: u64) {
    if let Some(c) = counter {
        c.add(phase, n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn merge_is_commutative() {
        let a = MacCounter::new();
        let b = MacCounter::new();
        a.add(Phase::Fit, 10);
        b.add(Phase::Fit, 5);
        b.add(Phase::Loop, 3);
        let ab = MacCounter::new();
        ab.merge(&a);
        ab.merge(&b);
        let ba = MacCounter::new();
        ba.merge(&b);
        ba.merge(&a);
        assert_eq!(ab.snapshot(), ba.snapshot());
        assert_eq!(ab.total(), 18);
    }

    #[test]
    fn concurrent_adds_sum_exactly() {
        let c = Arc::new(MacCounter::new());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let c = Arc::clone(&c);
                std::thread::spawn(move || {
                    for _ in 0..1000 {
                        c.add(Phase::Loop, 2);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.get(Phase::Loop), 8000);
    }
}
