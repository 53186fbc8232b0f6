use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use dlr_core::counter::{MacCounter, Phase};
use dlr_core::distsim::{comm_cost, run_scenario, subsample, Scenario};
use dlr_core::experiment::{normalized, train_and_evaluate, ExperimentConfig, Pipeline};
use dlr_core::fusion::{roc_curve, calibrate_threshold, train as train_net, transfer, FusionNet, Head, TrainOptions};
use dlr_core::kv::KeyValues;
use dlr_core::linalg::Matrix;
use dlr_core::reservoir::Reservoir;
use dlr_core::ridge::{accuracy, grid_search, lambda_sweep, predict_batch, GridPoint, SearchSpace, WeightModel};
use dlr_core::signal::{build_salience_map, generate, load_dataset, save_dataset, Dataset};
use dlr_core::transforms::{amplitude, TransformSpec, Transformer};
use dlr_core::Error;

use crate::Global;

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::from_kv(&KeyValues::load(p)?)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.dataset.seed = s;
    }
    Ok(cfg)
}

fn out_dir(g: &Global, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Configured dataset files when present, otherwise a fresh generation.
fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match (&cfg.dataset.train_file, &cfg.dataset.test_file) {
        (Some(a), Some(b)) => Ok((load(a)?, load(b)?)),
        _ => Ok(generate(&cfg.dataset)?),
    }
}

fn load(p: &Path) -> Result<Dataset> {
    load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))
}

/// Pipeline for inference; training data is only read when the transform
/// needs training statistics.
fn pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    let transformer = if cfg.transform.needs_training_mean() {
        let (train, _) = datasets(cfg)?;
        Transformer::fit(cfg.transform.clone(), &normalized(&train)?.bursts)?
    } else {
        Transformer::new(cfg.transform.clone())?
    };
    Ok(Pipeline { transformer, reservoir: Reservoir::new(cfg.reservoir.clone())? })
}

fn write_report(path: &Path, mut kv: KeyValues, g: &Global, seconds: Option<f64>) -> Result<()> {
    if !g.no_timestamp {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        kv.set("generated_at", now);
        if let Some(s) = seconds {
            kv.set("wall_clock_seconds", format!("{s:.3}"));
        }
    }
    fs::write(path, kv.to_string()).with_context(|| format!("writing {}", path.display()))?;
    print!("{kv}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_macs(g: &Global, dir: &Path, counter: &MacCounter) -> Result<()> {
    if !g.counter {
        return Ok(());
    }
    let mut kv = KeyValues::new();
    for p in Phase::ALL {
        kv.set(p.name(), counter.get(p));
    }
    kv.set("total", counter.total());
    write(&dir.join("macs.txt"), &kv.to_string())
}

pub fn synth(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let (train, test) = generate(&cfg.dataset)?;
    let mut manifest = cfg.dataset.clone();
    manifest.train_file = Some(dir.join("train.dlrd"));
    manifest.test_file = Some(dir.join("test.dlrd"));
    save_dataset(dir.join("train.dlrd"), &train)?;
    save_dataset(dir.join("test.dlrd"), &test)?;
    manifest.to_kv().save(dir.join("manifest.txt"))?;
    println!("wrote {} train and {} test bursts to {}", train.bursts.len(), test.bursts.len(), dir.display());
    Ok(())
}

pub fn train(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let (mut train, mut test) = datasets(&cfg)?;
    if !cfg.labels.is_empty() {
        train = train.filter_labels(&cfg.labels);
        test = test.filter_labels(&cfg.labels);
    }
    let (_, model, fom) = train_and_evaluate(&cfg, &train, &test)?;
    model.save(dir.join("model.dlrw"))?;
    cfg.to_kv().save(dir.join("config.txt"))?;
    let mut kv = fom.to_kv();
    kv.set("q", model.q());
    kv.set("n", model.n());
    kv.set("lambda", model.lambda);
    kv.set("transform", &model.transform_id);
    kv.set("reservoir_hash", format!("{:#018x}", model.reservoir_hash));
    if g.counter {
        let c = MacCounter::new();
        c.add(Phase::Loop, fom.loop_macs);
        c.add(Phase::Fit, fom.fit_macs);
        write_macs(g, &dir, &c)?;
    }
    write_report(&dir.join("fom.txt"), kv, g, Some(fom.seconds))
}

pub fn infer(g: &Global, model_path: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let model = WeightModel::load(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let ds = match data {
        Some(p) => load(p)?,
        None => datasets(&cfg)?.1,
    };
    let pipe = pipeline(&cfg)?;
    if pipe.reservoir.hash() != model.reservoir_hash {
        return Err(Error::HashMismatch { model: model.reservoir_hash, state: pipe.reservoir.hash() }.into());
    }
    let counter = MacCounter::new();
    let (x, y) = pipe.states(&ds, cfg.noise_seed ^ 0x1f, Some(&counter))?;
    let pred = predict_batch(&model, &x, Some(&counter))?;
    let mut csv = String::from("index,label,predicted\n");
    for (i, (l, p)) in y.iter().zip(&pred).enumerate() {
        csv.push_str(&format!("{i},{l},{p}\n"));
    }
    write(&dir.join("predictions.csv"), &csv)?;
    write_macs(g, &dir, &counter)?;
    let mut kv = KeyValues::new();
    kv.set("bursts", y.len());
    kv.set("accuracy", format!("{:.6}", accuracy(&pred, &y)));
    write_report(&dir.join("infer.txt"), kv, g, None)
}

fn amplitudes(ds: &Dataset) -> Result<(Matrix, Vec<u16>)> {
    let rows: Vec<Vec<f64>> = normalized(ds)?.bursts.iter().map(|b| amplitude(b).values).collect();
    Ok((Matrix::from_rows(&rows)?, ds.labels()))
}

pub fn salience(g: &Global, stride: usize) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let (train, test) = datasets(&cfg)?;
    let (xtr, ytr) = amplitudes(&train)?;
    let (xte, yte) = amplitudes(&test)?;
    let map = build_salience_map(&xtr, &ytr, &xte, &yte, cfg.lambda, stride)?;
    write(&dir.join("salience.csv"), &map.to_csv())?;
    let mut kv = KeyValues::new();
    kv.set("cells", map.cells.len());
    kv.set("best_start", map.best.0);
    kv.set("best_end", map.best.1);
    kv.set("best_accuracy", format!("{:.6}", map.best.2));
    write_report(&dir.join("salience.txt"), kv, g, None)
}

pub fn merge(
    g: &Global,
    model_paths: &[PathBuf],
    mode: &str,
    head: &str,
    retrain: bool,
    epochs: usize,
    lr: f64,
) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let mode: dlr_core::distsim::FusionMode = mode.parse()?;
    let head: Head = head.parse()?;
    let models: Vec<WeightModel> = model_paths
        .iter()
        .map(|p| WeightModel::load(p).with_context(|| format!("loading model {}", p.display())))
        .collect::<Result<_>>()?;
    let shared = models.iter().enumerate().any(|(i, a)| {
        models[i + 1..].iter().any(|b| a.labels.iter().any(|l| b.labels.contains(l)))
    });
    match (mode, shared) {
        (dlr_core::distsim::FusionMode::Disjoint, true) => {
            return Err(Error::Config("models share labels; use --mode overlapping".into()).into())
        }
        (dlr_core::distsim::FusionMode::Overlapping, false) => {
            return Err(Error::Config("models share no labels; use --mode disjoint".into()).into())
        }
        _ => {}
    }
    let mut net = transfer(&models, None, head)?;
    let pipe = pipeline(&cfg)?;
    if pipe.reservoir.hash() != net.reservoir_hash {
        return Err(Error::HashMismatch { model: net.reservoir_hash, state: pipe.reservoir.hash() }.into());
    }
    let (train, test) = datasets(&cfg)?;
    let keep = net.global_labels.clone();
    let (xte, yte) = pipe.states(&test.filter_labels(&keep), cfg.noise_seed ^ 0x7e57, None)?;
    let transfer_acc = net.accuracy(&xte, &yte)?;
    let counter = MacCounter::new();
    let mut kv = KeyValues::new();
    kv.set("models", models.len());
    kv.set("global_labels", net.q());
    kv.set("transfer_accuracy", format!("{transfer_acc:.6}"));
    if retrain {
        let (xtr, ytr) = pipe.states(&train.filter_labels(&keep), cfg.noise_seed, None)?;
        let (rx, ry) = subsample(&xtr, &ytr, 0.5)?;
        let curve = train_net(&mut net, &rx, &ry, &TrainOptions { epochs, lr, batch: None }, Some(&counter))?;
        kv.set("retrained_accuracy", format!("{:.6}", net.accuracy(&xte, &yte)?));
        kv.set("final_loss", format!("{:.6}", curve.last().copied().unwrap_or(f64::NAN)));
    }
    kv.set("gradient_macs", counter.get(Phase::Train));
    net.save(dir.join("net.dlrn"))?;
    write_macs(g, &dir, &counter)?;
    write_report(&dir.join("merge.txt"), kv, g, None)
}

pub fn outlier(g: &Global, net_path: &Path, legit: &Path, outliers: &Path, calibrate: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let net = FusionNet::load(net_path).with_context(|| format!("loading net {}", net_path.display()))?;
    let pipe = pipeline(&cfg)?;
    if pipe.reservoir.hash() != net.reservoir_hash {
        return Err(Error::HashMismatch { model: net.reservoir_hash, state: pipe.reservoir.hash() }.into());
    }
    let (xl, _) = pipe.states(&load(legit)?, cfg.noise_seed ^ 1, None)?;
    let (xo, _) = pipe.states(&load(outliers)?, cfg.noise_seed ^ 2, None)?;
    let det = match calibrate {
        Some(p) => calibrate_threshold(&net, &pipe.states(&load(p)?, cfg.noise_seed, None)?.0)?,
        None => calibrate_threshold(&net, &xl)?,
    };
    let roc = roc_curve(&net, &xl, &xo)?;
    write(&dir.join("roc.csv"), &roc.to_csv())?;
    write(&dir.join("histogram.csv"), &roc.histogram_csv())?;
    let fpr = roc.outlier.iter().filter(|h| **h <= det.threshold).count() as f64 / roc.outlier.len() as f64;
    let tpr = roc.legit.iter().filter(|h| **h <= det.threshold).count() as f64 / roc.legit.len() as f64;
    let mut kv = KeyValues::new();
    kv.set("threshold", format!("{:.9}", det.threshold));
    kv.set("tpr_at_threshold", format!("{tpr:.6}"));
    kv.set("fpr_at_threshold", format!("{fpr:.6}"));
    kv.set("fp_at_tp100", format!("{:.6}", roc.fp_at_tp100));
    kv.set("auc", format!("{:.6}", roc.auc));
    kv.set("histogram_overlap", format!("{:.6}", roc.histogram_overlap(20)));
    write_report(&dir.join("outlier.txt"), kv, g, None)
}

pub fn simulate(g: &Global, scenario: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let path = scenario
        .map(Path::to_path_buf)
        .or_else(|| cfg.scenario.clone())
        .ok_or_else(|| Error::Config("no scenario file given".into()))?;
    let sc = Scenario::from_kv(&KeyValues::load(&path)?).with_context(|| format!("reading scenario {}", path.display()))?;
    let (train, test) = datasets(&cfg)?;
    let pipe = Pipeline::fit(cfg.transform.clone(), cfg.reservoir.clone(), &train)?;
    let (xtr, ytr) = pipe.states(&train, cfg.noise_seed, None)?;
    let (xte, yte) = pipe.states(&test, cfg.noise_seed ^ 0x7e57, None)?;
    let out = run_scenario(&sc, &xtr, &ytr, &xte, &yte, pipe.reservoir.hash())?;
    write(&dir.join("ledger.csv"), &out.ledger.to_csv())?;
    write(&dir.join("accuracy.csv"), &out.accuracy_csv())?;
    let counts: Vec<usize> = sc.nodes.iter().map(|n| n.devices.len()).collect();
    let mut kv = KeyValues::new();
    kv.set("nodes", sc.nodes.len());
    kv.set("mode", sc.mode);
    kv.set("retrain", sc.retrain);
    kv.set("formula_mean_payload_bytes", comm_cost(&counts, 4, pipe.reservoir.state_len()));
    kv.set("measured_mean_payload_bytes", out.ledger.mean_payload());
    kv.set("total_bytes_sent", out.ledger.total_sent());
    kv.set("total_bytes_received", out.ledger.total_received());
    kv.set("retrain_macs", out.ledger.retrain_macs);
    write_report(&dir.join("simulate.txt"), kv, g, None)
}

pub fn tune(g: &Global, grid: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let dir = out_dir(g, &cfg)?;
    let kv = KeyValues::load(grid)?;
    let list = |k: &str, d: Vec<f64>| -> Result<Vec<f64>> { Ok(kv.get_list(k)?.unwrap_or(d)) };
    let space = SearchSpace {
        lambdas: list("lambdas", vec![cfg.lambda])?,
        etas: list("etas", vec![cfg.reservoir.eta])?,
        nus: list("nus", vec![cfg.reservoir.nu])?,
        ns: kv.get_list("ns")?.unwrap_or(vec![cfg.reservoir.n]),
        ks: kv.get_list("ks")?.unwrap_or(vec![cfg.reservoir.splits]),
        transforms: kv.get_list("transforms")?.unwrap_or(vec![cfg.transform.to_string()]),
        refine: kv.get_or("refine", true)?,
    };
    let (train, _) = datasets(&cfg)?;
    // Every fifth training burst is held out for validation.
    let (fit, val): (Vec<_>, Vec<_>) = train.bursts.iter().enumerate().partition(|(i, _)| i % 5 != 4);
    let fit = Dataset { bursts: fit.into_iter().map(|(_, b)| b.clone()).collect(), ..train.clone() };
    let val = Dataset { bursts: val.into_iter().map(|(_, b)| b.clone()).collect(), ..train.clone() };
    if val.bursts.is_empty() {
        bail!(Error::Config("training set too small for a validation split".into()));
    }
    let evaluate = |p: &GridPoint, lambdas: &[f64]| -> dlr_core::Result<Vec<f64>> {
        let mut rc = cfg.reservoir.clone();
        rc.eta = p.eta;
        rc.nu = p.nu;
        rc.n = p.n;
        rc.splits = p.k;
        rc.sub_loops.clear();
        let spec: TransformSpec = p.transform.parse()?;
        rc.segments = if p.k > 1 && matches!(spec, TransformSpec::Mixed(_)) { spec.segments(0) } else { Vec::new() };
        let pipe = Pipeline::fit(spec, rc, &fit)?;
        let (xf, yf) = pipe.states(&fit, cfg.noise_seed, None)?;
        let (xv, yv) = pipe.states(&val, cfg.noise_seed ^ 0x7e57, None)?;
        lambda_sweep(&xf, &yf, &xv, &yv, lambdas)
    };
    let outcome = grid_search(&space, evaluate)?;
    let mut csv = String::from("transform,n,k,eta,nu,lambda,accuracy,refined\n");
    for r in &outcome.table {
        let p = &r.point;
        csv.push_str(&format!(
            "{},{},{},{},{},{:e},{:.6},{}\n",
            p.transform, p.n, p.k, p.eta, p.nu, r.lambda, r.accuracy, r.refined
        ));
    }
    write(&dir.join("grid.csv"), &csv)?;
    let mut ns: Vec<usize> = outcome.table.iter().map(|r| r.point.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut by_n = String::from("n,best_accuracy\n");
    for n in ns {
        let best = outcome.table.iter().filter(|r| r.point.n == n).map(|r| r.accuracy).fold(0.0, f64::max);
        by_n.push_str(&format!("{n},{best:.6}\n"));
    }
    write(&dir.join("accuracy_vs_n.csv"), &by_n)?;
    let b = &outcome.best;
    let mut best_cfg = cfg.clone();
    best_cfg.lambda = b.lambda;
    best_cfg.reservoir.eta = b.point.eta;
    best_cfg.reservoir.nu = b.point.nu;
    best_cfg.reservoir.n = b.point.n;
    best_cfg.reservoir.splits = b.point.k;
    best_cfg.transform = b.point.transform.parse()?;
    best_cfg.to_kv().save(dir.join("best_config.txt"))?;
    let mut kv = KeyValues::new();
    kv.set("evaluated", outcome.table.len());
    kv.set("best_accuracy", format!("{:.6}", b.accuracy));
    kv.set("best_lambda", b.lambda);
    kv.set("best_eta", b.point.eta);
    kv.set("best_nu", b.point.nu);
    kv.set("best_n", b.point.n);
    kv.set("best_k", b.point.k);
    kv.set("best_transform", &b.point.transform);
    write_report(&dir.join("tune.txt"), kv, g, None)
}
