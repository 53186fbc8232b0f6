//! End-to-end pipeline: bursts to features to reservoir states to readout.

use std::path::PathBuf;
use std::time::Instant;

use crate::counter::{MacCounter, Phase};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::linalg::Matrix;
use crate::reservoir::{Reservoir, ReservoirConfig};
use crate::ridge::{self, accuracy, predict_batch, train_readout, WeightModel};
use crate::signal::{normalize, Dataset, DatasetManifest};
use crate::transforms::{TransformSpec, Transformer};

/// Everything a run needs besides the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetManifest,
    pub transform: TransformSpec,
    pub reservoir: ReservoirConfig,
    pub lambda: f64,
    pub noise_seed: u64,
    pub scenario: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Classes a node trains on; empty means all.
    pub labels: Vec<u16>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetManifest::default(),
            transform: TransformSpec::FftMag,
            reservoir: ReservoirConfig::default(),
            lambda: ridge::DEFAULT_LAMBDA,
            noise_seed: 0,
            scenario: None,
            out_dir: PathBuf::from("out"),
            labels: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Sections: `dataset.*`, `reservoir.*`; top-level `transform`,
    /// `lambda`, `noise_seed`, `scenario`, `out_dir`, `labels`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let transform = kv.get_or("transform", d.transform)?;
        let mut reservoir = ReservoirConfig::from_kv(kv, "reservoir.")?;
        if let TransformSpec::Mixed(_) = &transform {
            if reservoir.segments.is_empty() && reservoir.splits == 1 {
                reservoir.segments = transform.segments(0);
                reservoir.splits = reservoir.segments.len();
                reservoir.validate()?;
            }
        }
        let cfg = Self {
            dataset: DatasetManifest::from_kv(&kv.section("dataset"))?,
            transform,
            reservoir,
            lambda: kv.get_or("lambda", d.lambda)?,
            noise_seed: kv.get_or("noise_seed", d.noise_seed)?,
            scenario: kv.get_str("scenario").map(PathBuf::from),
            out_dir: kv.get_str("out_dir").map(PathBuf::from).unwrap_or(d.out_dir),
            labels: kv.get_list("labels")?.unwrap_or_default(),
        };
        if !(cfg.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("transform", &self.transform);
        kv.set("lambda", self.lambda);
        kv.set("noise_seed", self.noise_seed);
        if let Some(s) = &self.scenario {
            kv.set("scenario", s.display());
        }
        kv.set("out_dir", self.out_dir.display());
        if !self.labels.is_empty() {
            kv.set("labels", self.labels.iter().map(u16::to_string).collect::<Vec<_>>().join(","));
        }
        kv.extend_prefixed("dataset", &self.dataset.to_kv());
        for (k, v) in self.reservoir.to_kv("reservoir.").iter() {
            kv.set(k, v);
        }
        kv
    }
}

/// Fitted transform plus reservoir.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub transformer: Transformer,
    pub reservoir: Reservoir,
}

/// Unit-RMS copy of every burst.
pub fn normalized(ds: &Dataset) -> Result<Dataset> {
    Ok(Dataset { bursts: ds.bursts.iter().map(normalize).collect::<Result<_>>()?, ..ds.clone() })
}

impl Pipeline {
    /// Fits transform statistics on the training set.
    pub fn fit(transform: TransformSpec, reservoir: ReservoirConfig, train: &Dataset) -> Result<Self> {
        let train = normalized(train)?;
        Ok(Self { transformer: Transformer::fit(transform, &train.bursts)?, reservoir: Reservoir::new(reservoir)? })
    }

    /// Transformed, normalized features, one row per burst.
    pub fn features(&self, ds: &Dataset) -> Result<(Matrix, Vec<u16>)> {
        self.transformer.apply_dataset(&normalized(ds)?)
    }

    /// Reservoir states, one row per burst.
    pub fn states(&self, ds: &Dataset, noise_seed: u64, counter: Option<&MacCounter>) -> Result<(Matrix, Vec<u16>)> {
        let (f, y) = self.features(ds)?;
        Ok((self.reservoir.run_batch(&f, noise_seed, counter)?, y))
    }
}

/// Accuracy, cost and memory of one trained readout.
#[derive(Debug, Clone, PartialEq)]
pub struct FomReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub loop_macs: u64,
    pub fit_macs: u64,
    pub parameters: usize,
    pub seconds: f64,
}

impl FomReport {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train_accuracy", format!("{:.6}", self.train_accuracy));
        kv.set("test_accuracy", format!("{:.6}", self.test_accuracy));
        kv.set("loop_macs", self.loop_macs);
        kv.set("fit_macs", self.fit_macs);
        kv.set("total_macs", self.loop_macs + self.fit_macs);
        kv.set("parameters", self.parameters);
        kv
    }
}

/// Trains a readout on `train` states and scores it on both sets.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Pipeline, WeightModel, FomReport)> {
    let t0 = Instant::now();
    let counter = MacCounter::new();
    let pipe = Pipeline::fit(cfg.transform.clone(), cfg.reservoir.clone(), train)?;
    let (xtr, ytr) = pipe.states(train, cfg.noise_seed, Some(&counter))?;
    let model = train_readout(&xtr, &ytr, cfg.lambda, pipe.reservoir.hash(), &cfg.transform.to_string(), Some(&counter))?;
    let train_accuracy = accuracy(&predict_batch(&model, &xtr, None)?, &ytr);
    let (xte, yte) = pipe.states(test, cfg.noise_seed ^ 0x7e57, None)?;
    let test_accuracy = accuracy(&predict_batch(&model, &xte, None)?, &yte);
    let report = FomReport {
        train_accuracy,
        test_accuracy,
        loop_macs: counter.get(Phase::Loop),
        fit_macs: counter.get(Phase::Fit),
        parameters: model.parameter_count(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((pipe, model, report))
}
