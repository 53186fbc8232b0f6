//! In-process simulation of readout exchange between reservoir nodes.
//!
//! Nodes share one reservoir, train local readouts on their own devices,
//! broadcast the serialized readouts to every other node (full mesh, no
//! relaying), and build a fusion net from what they hold. Message sizes in
//! the ledger are the lengths of the bytes actually produced.

use std::fmt;
use std::str::FromStr;

use crate::counter::{MacCounter, Phase};
use crate::error::{Error, Result};
use crate::fusion::{train, transfer, FusionNet, Head, TrainOptions};
use crate::kv::KeyValues;
use crate::linalg::Matrix;
use crate::ridge::{self, accuracy, predict_batch, train_readout, WeightModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Disjoint,
    Overlapping,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Disjoint => "disjoint",
            FusionMode::Overlapping => "overlapping",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "disjoint" => Ok(FusionMode::Disjoint),
            "overlapping" | "overlap" => Ok(FusionMode::Overlapping),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub node_id: usize,
    pub devices: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub nodes: Vec<NodeSpec>,
    pub mode: FusionMode,
    pub retrain: bool,
    pub train: TrainOptions,
    /// Fraction of the training set used for retraining.
    pub retrain_fraction: f64,
    pub lambda: f64,
    pub head: Head,
}

impl Scenario {
    /// `l` nodes over devices `0..q`. Disjoint mode deals equal contiguous
    /// blocks; overlapping mode (two nodes) gives node 0 the first `q − o`
    /// devices and node 1 the last `q − o`, sharing `o` in the middle.
    pub fn partitioned(l: usize, q: u16, mode: FusionMode, overlap: u16) -> Result<Self> {
        if l == 0 || q == 0 {
            return Err(Error::Config("scenario needs nodes and devices".into()));
        }
        let nodes = match mode {
            FusionMode::Disjoint => {
                if q as usize % l != 0 {
                    return Err(Error::Config(format!("{q} devices do not split over {l} nodes")));
                }
                let per = q as usize / l;
                (0..l)
                    .map(|i| NodeSpec { node_id: i, devices: ((i * per) as u16..((i + 1) * per) as u16).collect() })
                    .collect()
            }
            FusionMode::Overlapping => {
                if l != 2 || overlap == 0 || overlap >= q {
                    return Err(Error::Config("overlapping partition needs 2 nodes and 0 < overlap < q".into()));
                }
                let a = (q - overlap).div_ceil(2) + overlap;
                let b0 = a - overlap;
                vec![
                    NodeSpec { node_id: 0, devices: (0..a).collect() },
                    NodeSpec { node_id: 1, devices: (b0..q).collect() },
                ]
            }
        };
        Ok(Self {
            nodes,
            mode,
            retrain: false,
            train: TrainOptions::default(),
            retrain_fraction: 0.5,
            lambda: ridge::DEFAULT_LAMBDA,
            head: Head::Softmax,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Config("scenario has no nodes".into()));
        }
        if self.nodes.iter().any(|n| n.devices.is_empty()) {
            return Err(Error::Config("every node needs at least one device".into()));
        }
        if !(self.retrain_fraction > 0.0 && self.retrain_fraction <= 1.0) {
            return Err(Error::Config("retrain_fraction must lie in (0, 1]".into()));
        }
        let shared = self.nodes.iter().enumerate().any(|(i, a)| {
            self.nodes[i + 1..].iter().any(|b| a.devices.iter().any(|d| b.devices.contains(d)))
        });
        match (self.mode, shared) {
            (FusionMode::Disjoint, true) => Err(Error::Config("disjoint scenario has shared devices".into())),
            (FusionMode::Overlapping, false) if self.nodes.len() > 1 => {
                Err(Error::Config("overlapping scenario has no shared devices".into()))
            }
            _ => Ok(()),
        }
    }

    /// Keys: `mode`, `retrain`, `epochs`, `lr`, `retrain_fraction`,
    /// `lambda`, `head`, and either `devices.<i>` lists or `nodes`, `q`
    /// and `overlap` for an automatic partition.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mode: FusionMode = kv.get_or("mode", FusionMode::Disjoint)?;
        let mut s = if kv.contains("devices.0") {
            let mut nodes = Vec::new();
            while let Some(d) = kv.get_list::<u16>(&format!("devices.{}", nodes.len()))? {
                nodes.push(NodeSpec { node_id: nodes.len(), devices: d });
            }
            Scenario { nodes, ..Scenario::partitioned(1, 1, FusionMode::Disjoint, 0)? }
        } else {
            let q: u16 = kv.get_or("q", 20)?;
            let overlap = kv.get_or("overlap", q / 5)?;
            Scenario::partitioned(kv.get_or("nodes", 2)?, q, mode, overlap)?
        };
        s.mode = mode;
        s.retrain = kv.get_or("retrain", false)?;
        s.train.epochs = kv.get_or("epochs", s.train.epochs)?;
        s.train.lr = kv.get_or("lr", s.train.lr)?;
        s.retrain_fraction = kv.get_or("retrain_fraction", s.retrain_fraction)?;
        s.lambda = kv.get_or("lambda", s.lambda)?;
        s.head = kv.get_or("head", s.head)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeMessage {
    pub sender: usize,
    pub bytes: Vec<u8>,
}

impl ExchangeMessage {
    pub fn byte_size(&self) -> usize {
        self.bytes.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeLedger {
    /// Weight bytes of this node's own model (one broadcast).
    pub payload_bytes: usize,
    pub header_bytes: usize,
    /// Bytes put on links, one copy per neighbour.
    pub bytes_sent: usize,
    pub bytes_received: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    pub nodes: Vec<NodeLedger>,
    pub retrain_macs: u64,
    pub transfer_only: bool,
}

impl CostLedger {
    /// Mean broadcast payload per node, the quantity the cost formula predicts.
    pub fn mean_payload(&self) -> f64 {
        if self.nodes.len() < 2 {
            return 0.0;
        }
        self.nodes.iter().map(|n| n.payload_bytes as f64).sum::<f64>() / self.nodes.len() as f64
    }

    pub fn total_sent(&self) -> usize {
        self.nodes.iter().map(|n| n.bytes_sent).sum()
    }

    pub fn total_received(&self) -> usize {
        self.nodes.iter().map(|n| n.bytes_received).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,payload_bytes,header_bytes,bytes_sent,bytes_received\n");
        for (i, n) in self.nodes.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{},{}\n", n.payload_bytes, n.header_bytes, n.bytes_sent, n.bytes_received));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub node_id: usize,
    pub local_accuracy: f64,
    pub transfer_accuracy: f64,
    pub retrained_accuracy: Option<f64>,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub nets: Vec<FusionNet>,
    pub ledger: CostLedger,
    pub reports: Vec<NodeReport>,
}

impl ScenarioOutcome {
    pub fn accuracy_csv(&self) -> String {
        let mut s = String::from("node,local_accuracy,transfer_accuracy,retrained_accuracy\n");
        for r in &self.reports {
            let re = r.retrained_accuracy.map_or(String::new(), |a| format!("{a:.6}"));
            s.push_str(&format!("{},{:.6},{:.6},{re}\n", r.node_id, r.local_accuracy, r.transfer_accuracy));
        }
        s
    }
}

fn rows_where(x: &Matrix, labels: &[u16], keep: impl Fn(usize, u16) -> bool) -> Result<(Matrix, Vec<u16>)> {
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if keep(i, l) {
            rows.push(x.row(i));
            out.push(l);
        }
    }
    if rows.is_empty() {
        return Ok((Matrix::zeros(0, x.cols()), out));
    }
    Ok((Matrix::from_rows(&rows)?, out))
}

/// Every `1/fraction`-th row, spread evenly; deterministic.
pub fn subsample(x: &Matrix, labels: &[u16], fraction: f64) -> Result<(Matrix, Vec<u16>)> {
    let mut acc = 0.0;
    let picks: Vec<bool> = (0..labels.len())
        .map(|_| {
            acc += fraction;
            if acc >= 1.0 - 1e-12 {
                acc -= 1.0;
                true
            } else {
                false
            }
        })
        .collect();
    rows_where(x, labels, |i, _| picks[i])
}

/// Runs the exchange. States must come from one reservoir identified by
/// `reservoir_hash`; the test set should cover every device.
pub fn run_scenario(
    scenario: &Scenario,
    train_x: &Matrix,
    train_y: &[u16],
    test_x: &Matrix,
    test_y: &[u16],
    reservoir_hash: u64,
) -> Result<ScenarioOutcome> {
    scenario.validate()?;
    let l = scenario.nodes.len();

    let mut models = Vec::with_capacity(l);
    let mut counts = Vec::with_capacity(l);
    let mut local_acc = Vec::with_capacity(l);
    for node in &scenario.nodes {
        let (x, y) = rows_where(train_x, train_y, |_, lab| node.devices.contains(&lab))?;
        let m = train_readout(&x, &y, scenario.lambda, reservoir_hash, "", None)?;
        let (tx, ty) = rows_where(test_x, test_y, |_, lab| node.devices.contains(&lab))?;
        local_acc.push(accuracy(&predict_batch(&m, &tx, None)?, &ty));
        counts.push(m.labels.iter().map(|c| y.iter().filter(|v| *v == c).count() as f64).collect::<Vec<_>>());
        models.push(m);
    }

    let messages: Vec<ExchangeMessage> =
        models.iter().enumerate().map(|(i, m)| ExchangeMessage { sender: i, bytes: m.to_bytes() }).collect();
    let mut ledger = CostLedger { nodes: vec![NodeLedger::default(); l], retrain_macs: 0, transfer_only: !scenario.retrain };
    for msg in &messages {
        let q = models[msg.sender].q();
        let hdr = ridge::header_bytes(q);
        let nl = &mut ledger.nodes[msg.sender];
        nl.header_bytes = if l > 1 { hdr } else { 0 };
        nl.payload_bytes = if l > 1 { msg.byte_size() - hdr } else { 0 };
        nl.bytes_sent = msg.byte_size() * (l - 1);
        for (j, other) in ledger.nodes.iter_mut().enumerate() {
            if j != msg.sender {
                other.bytes_received += msg.byte_size();
            }
        }
    }

    let counter = MacCounter::new();
    let (rx, ry) = subsample(train_x, train_y, scenario.retrain_fraction)?;
    let mut nets = Vec::with_capacity(l);
    let mut reports = Vec::with_capacity(l);
    for (i, node) in scenario.nodes.iter().enumerate() {
        // Own model from memory, the others decoded from the wire, in node order.
        let held: Vec<WeightModel> = messages
            .iter()
            .map(|msg| if msg.sender == i { Ok(models[i].clone()) } else { WeightModel::from_bytes(&msg.bytes) })
            .collect::<Result<_>>()?;
        let weights = (scenario.mode == FusionMode::Overlapping).then_some(counts.as_slice());
        let mut net = transfer(&held, weights, scenario.head)?;
        let transfer_accuracy = net.accuracy(test_x, test_y)?;
        let (retrained_accuracy, loss_curve) = if scenario.retrain {
            let curve = train(&mut net, &rx, &ry, &scenario.train, Some(&counter))?;
            (Some(net.accuracy(test_x, test_y)?), curve)
        } else {
            (None, Vec::new())
        };
        reports.push(NodeReport {
            node_id: node.node_id,
            local_accuracy: local_acc[i],
            transfer_accuracy,
            retrained_accuracy,
            loss_curve,
        });
        nets.push(net);
    }
    ledger.retrain_macs = counter.get(Phase::Train);
    Ok(ScenarioOutcome { nets, ledger, reports })
}

/// Mean per-node cost of sharing weights, `b·N/L·Σnᵢ` bytes.
pub fn comm_cost(device_counts: &[usize], b: usize, n: usize) -> f64 {
    if device_counts.is_empty() {
        return 0.0;
    }
    (b * n) as f64 / device_counts.len() as f64 * device_counts.iter().sum::<usize>() as f64
}

/// Multiply estimate `ℓ_l·E·N·Q·B` for retraining.
pub fn retrain_cost(epochs: usize, n: usize, q: usize, b: usize, ell: f64) -> f64 {
    ell * epochs as f64 * n as f64 * q as f64 * b as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainMeasurement {
    pub estimate: f64,
    pub measured: u64,
    /// `measured / (E·N·Q·B)`.
    pub fitted_ell: f64,
}

/// Retrains `net` and compares the instrumented count with the estimate.
pub fn measure_retrain(net: &mut FusionNet, x: &Matrix, labels: &[u16], opts: &TrainOptions) -> Result<RetrainMeasurement> {
    let counter = MacCounter::new();
    train(net, x, labels, opts, Some(&counter))?;
    let measured = counter.get(Phase::Train);
    let base = retrain_cost(opts.epochs, net.n(), net.q(), x.rows(), 1.0);
    let fitted_ell = if base > 0.0 { measured as f64 / base } else { 0.0 };
    Ok(RetrainMeasurement { estimate: base, measured, fitted_ell })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlCurve {
    /// `(epoch, random-init accuracy, transfer-init accuracy)`.
    pub rows: Vec<(usize, f64, f64)>,
}

impl ControlCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,random_init_accuracy,transfer_init_accuracy\n");
        for (e, r, t) in &self.rows {
            s.push_str(&format!("{e},{r:.6},{t:.6}\n"));
        }
        s
    }
}

/// Trains the same architecture from a random start and from the
/// transferred weights, recording test accuracy after every epoch.
pub fn control_no_transfer(
    transferred: &FusionNet,
    train_x: &Matrix,
    train_y: &[u16],
    test_x: &Matrix,
    test_y: &[u16],
    opts: &TrainOptions,
    seed: u64,
) -> Result<ControlCurve> {
    let mut random = transferred.randomized(seed);
    let mut warm = transferred.clone();
    let one = TrainOptions { epochs: 1, ..opts.clone() };
    let mut rows = vec![(0, random.accuracy(test_x, test_y)?, warm.accuracy(test_x, test_y)?)];
    for e in 1..=opts.epochs {
        train(&mut random, train_x, train_y, &one, None)?;
        train(&mut warm, train_x, train_y, &one, None)?;
        rows.push((e, random.accuracy(test_x, test_y)?, warm.accuracy(test_x, test_y)?));
    }
    Ok(ControlCurve { rows })
}
