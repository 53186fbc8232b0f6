//! Merging ridge readouts into a single-layer perceptron.
//!
//! Each source readout becomes one branch: a fully connected layer holding
//! the readout weights followed by layer normalisation across that branch's
//! outputs. Branch outputs are concatenated and mapped onto the global label
//! set by a fixed merge matrix whose columns average the branches that know
//! a label, then a softmax or ReLU head is applied.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::counter::{tally, MacCounter, Phase};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::ridge::{accuracy, argmax, WeightModel};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"DLRN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Softmax,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    /// Cross-entropy on softmax outputs.
    CrossEntropy,
    /// Squared error of ReLU outputs against one-hot targets.
    Mse,
}

impl Head {
    /// The loss that pairs with this head.
    pub fn loss(self) -> Loss {
        match self {
            Head::Softmax => Loss::CrossEntropy,
            Head::Relu => Loss::Mse,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Softmax => "softmax",
            Head::Relu => "relu",
        })
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" | "ce" => Ok(Head::Softmax),
            "relu" | "mse" => Ok(Head::Relu),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// `Q_i × N`, the transposed fully connected weights.
    pub w: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    pub branches: Vec<Branch>,
    /// `(ΣQ_i) × Q_global`; each column holds averaging weights summing to 1.
    pub merge_map: Matrix,
    pub head: Head,
    pub global_labels: Vec<u16>,
    pub reservoir_hash: u64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    /// Per branch: normalised activations and `sqrt(var + ε)`.
    norm: Vec<(Vec<f64>, f64)>,
    z: Vec<f64>,
    logits: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm(a: &[f64]) -> (Vec<f64>, f64) {
    let q = a.len() as f64;
    let mu = a.iter().sum::<f64>() / q;
    let var = a.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / q;
    let s = (var + LAYER_NORM_EPS).sqrt();
    (a.iter().map(|v| (v - mu) / s).collect(), s)
}

fn softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl FusionNet {
    pub fn n(&self) -> usize {
        self.branches.first().map_or(0, |b| b.w.cols())
    }

    pub fn q(&self) -> usize {
        self.global_labels.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.branches.iter().map(|b| b.w.rows() * (b.w.cols() + 2)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.branches.iter().map(|b| b.w.rows()).sum();
        if self.merge_map.rows() != total || self.merge_map.cols() != self.global_labels.len() {
            return Err(Error::Dimension { expected: total, actual: self.merge_map.rows() });
        }
        let n = self.n();
        for b in &self.branches {
            let q = b.w.rows();
            if b.w.cols() != n || b.gamma.len() != q || b.beta.len() != q || b.labels.len() != q {
                return Err(Error::InvalidInput("inconsistent branch shapes".into()));
            }
        }
        for c in 0..self.merge_map.cols() {
            let s: f64 = (0..total).map(|r| self.merge_map[(r, c)]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "merge weights of label {} sum to {s}",
                    self.global_labels[c]
                )));
            }
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), actual: x.len() });
        }
        let mut norm = Vec::with_capacity(self.branches.len());
        let mut z = Vec::with_capacity(self.merge_map.rows());
        for b in &self.branches {
            let a = b.w.mul_vec(x);
            let (hat, s) = layer_norm(&a);
            z.extend(hat.iter().zip(b.gamma.iter().zip(&b.beta)).map(|(h, (g, be))| g * h + be));
            norm.push((hat, s));
        }
        let qg = self.merge_map.cols();
        let mut logits = vec![0.0; qg];
        for (r, &zr) in z.iter().enumerate() {
            axpy(zr, self.merge_map.row(r), &mut logits);
        }
        let out = match self.head {
            Head::Softmax => softmax(&logits),
            Head::Relu => logits.iter().map(|v| v.max(0.0)).collect(),
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("fusion net produced non-finite output".into()));
        }
        Ok(Trace { norm, z, logits, out })
    }

    /// Output over `global_labels`: probabilities for softmax, scores for ReLU.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.out)
    }

    /// Multiplies of one forward pass, counting only non-zero merge weights.
    pub fn forward_macs(&self) -> u64 {
        let fc: usize = self.branches.iter().map(|b| b.w.rows() * b.w.cols()).sum();
        let merge = self.merge_map.as_slice().iter().filter(|v| **v != 0.0).count();
        let norm: usize = self.branches.iter().map(|b| 3 * b.w.rows()).sum();
        (fc + merge + norm) as u64
    }

    pub fn predict(&self, x: &[f64]) -> Result<u16> {
        let out = self.trace(x)?;
        Ok(self.global_labels[argmax(&out.out)])
    }

    pub fn predict_batch(&self, x: &Matrix, counter: Option<&MacCounter>) -> Result<Vec<u16>> {
        tally(counter, Phase::Inference, x.rows() as u64 * self.forward_macs());
        (0..x.rows()).into_par_iter().map(|i| self.predict(x.row(i))).collect()
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[u16]) -> Result<f64> {
        Ok(accuracy(&self.predict_batch(x, None)?, labels))
    }

    /// Same architecture with Gaussian weights of variance `1/N`, γ=1, β=0.
    pub fn randomized(&self, seed: u64) -> FusionNet {
        let mut g = rng::stream(seed, 0xf00d);
        let normal = Normal::new(0.0, 1.0 / (self.n().max(1) as f64).sqrt()).expect("valid sigma");
        let mut net = self.clone();
        for b in net.branches.iter_mut() {
            b.w.as_mut_slice().iter_mut().for_each(|v| *v = normal.sample(&mut g));
            b.gamma.iter_mut().for_each(|v| *v = 1.0);
            b.beta.iter_mut().for_each(|v| *v = 0.0);
        }
        net
    }

    /// Mean loss over the rows of `x`.
    pub fn loss(&self, x: &Matrix, labels: &[u16]) -> Result<f64> {
        Ok(self.loss_and_grad(x, labels, false, None)?.0)
    }

    /// Loss and, when requested, its gradient with respect to every branch's
    /// weights, γ and β (same layout as `branches`).
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        labels: &[u16],
        want_grad: bool,
        counter: Option<&MacCounter>,
    ) -> Result<(f64, Vec<Branch>)> {
        let targets = self.target_indices(labels)?;
        let b = x.rows().max(1) as f64;
        let mut grads: Vec<Branch> = self
            .branches
            .iter()
            .map(|br| Branch {
                w: Matrix::zeros(br.w.rows(), br.w.cols()),
                gamma: vec![0.0; br.gamma.len()],
                beta: vec![0.0; br.beta.len()],
                labels: br.labels.clone(),
            })
            .collect();
        let mut total = 0.0;
        let mut macs = 0u64;
        for (i, &t) in targets.iter().enumerate() {
            let xi = x.row(i);
            let tr = self.trace(xi)?;
            macs += self.forward_macs();
            // dL/dlogits for this sample.
            let d_logits: Vec<f64> = match self.head {
                Head::Softmax => {
                    total -= tr.out[t].max(f64::MIN_POSITIVE).ln();
                    tr.out.iter().enumerate().map(|(q, p)| (p - f64::from(q == t)) / b).collect()
                }
                Head::Relu => tr
                    .out
                    .iter()
                    .zip(&tr.logits)
                    .enumerate()
                    .map(|(q, (r, o))| {
                        let e = r - f64::from(q == t);
                        total += 0.5 * e * e;
                        if *o > 0.0 {
                            e / b
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            };
            if !want_grad {
                continue;
            }
            let mut off = 0;
            for ((br, g), (hat, s)) in self.branches.iter().zip(grads.iter_mut()).zip(&tr.norm) {
                let q = br.w.rows();
                let dz: Vec<f64> = (0..q).map(|r| dot(self.merge_map.row(off + r), &d_logits)).collect();
                let dhat: Vec<f64> = dz.iter().zip(&br.gamma).map(|(d, g)| d * g).collect();
                for r in 0..q {
                    g.gamma[r] += dz[r] * hat[r];
                    g.beta[r] += dz[r];
                }
                let qf = q as f64;
                let m1 = dhat.iter().sum::<f64>() / qf;
                let m2 = dhat.iter().zip(hat).map(|(d, h)| d * h).sum::<f64>() / qf;
                for r in 0..q {
                    let da = (dhat[r] - m1 - hat[r] * m2) / s;
                    if da != 0.0 {
                        axpy(da, xi, g.w.row_mut(r));
                    }
                }
                macs += (q * br.w.cols() + 6 * q) as u64;
                off += q;
            }
            let _ = &tr.z;
        }
        if want_grad {
            tally(counter, Phase::Train, macs);
        }
        let loss = total / b;
        if !loss.is_finite() {
            return Err(Error::Numeric("loss is not finite; learning rate too high?".into()));
        }
        Ok((loss, grads))
    }

    fn target_indices(&self, labels: &[u16]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.global_labels.iter().position(|g| g == l).ok_or_else(|| {
                    Error::InvalidInput(format!("label {l} is not known to the fusion net"))
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.reservoir_hash.to_le_bytes());
        out.extend_from_slice(&(self.branches.len() as u16).to_le_bytes());
        let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for b in &self.branches {
            out.extend_from_slice(&(b.w.cols() as u32).to_le_bytes());
            out.extend_from_slice(&(b.w.rows() as u16).to_le_bytes());
            for l in &b.labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
            for &v in b.w.as_slice().iter().chain(&b.gamma).chain(&b.beta) {
                f(&mut out, v);
            }
        }
        out.extend_from_slice(&(self.merge_map.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.merge_map.cols() as u32).to_le_bytes());
        for &v in self.merge_map.as_slice() {
            f(&mut out, v);
        }
        out.push(match self.head {
            Head::Softmax => 0,
            Head::Relu => 1,
        });
        out.extend_from_slice(&(self.global_labels.len() as u16).to_le_bytes());
        for l in &self.global_labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("fusion net: bad magic".into()));
        }
        if r.u16()? != VERSION {
            return Err(Error::Format("fusion net: unsupported version".into()));
        }
        let reservoir_hash = r.u64()?;
        let nb = r.u16()? as usize;
        let mut branches = Vec::with_capacity(nb);
        for _ in 0..nb {
            let n = r.u32()? as usize;
            let q = r.u16()? as usize;
            let labels = (0..q).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
            let w = (0..q * n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let gamma = (0..q).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let beta = (0..q).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            branches.push(Branch { w: Matrix::from_vec(q, n, w)?, gamma, beta, labels });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let m = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let head = match r.take(1)?[0] {
            0 => Head::Softmax,
            1 => Head::Relu,
            t => return Err(Error::Format(format!("fusion net: unknown head tag {t}"))),
        };
        let ng = r.u16()? as usize;
        let global_labels = (0..ng).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        if r.at != b.len() {
            return Err(Error::Format("fusion net: trailing bytes".into()));
        }
        let net = FusionNet { branches, merge_map: Matrix::from_vec(rows, cols, m)?, head, global_labels, reservoir_hash };
        net.validate().map_err(|e| Error::Format(format!("fusion net: {e}")))?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Format("fusion net: truncated".into()))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

/// Builds a net from any number of readouts sharing one reservoir.
///
/// `counts[i][j]` weighs model `i`'s output for its `j`-th label when that
/// label is shared; `None` averages equally.
pub fn transfer(models: &[WeightModel], counts: Option<&[Vec<f64>]>, head: Head) -> Result<FusionNet> {
    let first = models.first().ok_or_else(|| Error::InvalidInput("no models to transfer".into()))?;
    for m in models {
        m.validate()?;
        if m.reservoir_hash != first.reservoir_hash {
            return Err(Error::HashMismatch { model: first.reservoir_hash, state: m.reservoir_hash });
        }
        if m.n() != first.n() {
            return Err(Error::Dimension { expected: first.n(), actual: m.n() });
        }
    }
    if let Some(c) = counts {
        if c.len() != models.len() || c.iter().zip(models).any(|(c, m)| c.len() != m.q()) {
            return Err(Error::InvalidInput("overlap counts do not match the models' labels".into()));
        }
        if c.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("overlap counts must be non-negative".into()));
        }
    }
    let global: Vec<u16> = models.iter().flat_map(|m| m.labels.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let total: usize = models.iter().map(|m| m.q()).sum();
    let mut merge = Matrix::zeros(total, global.len());
    let mut row = 0;
    for (i, m) in models.iter().enumerate() {
        for (j, l) in m.labels.iter().enumerate() {
            let c = global.binary_search(l).expect("label in union");
            merge[(row, c)] = counts.map_or(1.0, |cs| cs[i][j]);
            row += 1;
        }
    }
    for c in 0..global.len() {
        let s: f64 = (0..total).map(|r| merge[(r, c)]).sum();
        if !(s > 0.0) {
            return Err(Error::InvalidInput(format!("label {} has zero total overlap weight", global[c])));
        }
        for r in 0..total {
            merge[(r, c)] /= s;
        }
    }
    let branches = models
        .iter()
        .map(|m| Branch { w: m.w.clone(), gamma: vec![1.0; m.q()], beta: vec![0.0; m.q()], labels: m.labels.clone() })
        .collect();
    let net = FusionNet { branches, merge_map: merge, head, global_labels: global, reservoir_hash: first.reservoir_hash };
    net.validate()?;
    Ok(net)
}

/// One readout copied into a softmax net; no training.
pub fn transfer_single(model: &WeightModel) -> Result<FusionNet> {
    transfer(std::slice::from_ref(model), None, Head::Softmax)
}

fn shared_labels(m1: &WeightModel, m2: &WeightModel) -> usize {
    m1.labels.iter().filter(|l| m2.labels.contains(l)).count()
}

/// Two readouts with disjoint label sets (`Net_a`).
pub fn transfer_disjoint(m1: &WeightModel, m2: &WeightModel, head: Head) -> Result<FusionNet> {
    if shared_labels(m1, m2) > 0 {
        return Err(Error::InvalidInput("label sets overlap; use the overlapping transfer".into()));
    }
    transfer(&[m1.clone(), m2.clone()], None, head)
}

/// Two readouts with overlapping label sets (`Net_b`). Shared labels average
/// the two branches with weights proportional to the per-label training
/// counts (equal when `counts` is `None`).
pub fn transfer_overlapping(
    m1: &WeightModel,
    m2: &WeightModel,
    counts: Option<(&[f64], &[f64])>,
    head: Head,
) -> Result<FusionNet> {
    if shared_labels(m1, m2) == 0 {
        return Err(Error::InvalidInput("label sets are disjoint; use the disjoint transfer".into()));
    }
    let c = counts.map(|(a, b)| vec![a.to_vec(), b.to_vec()]);
    transfer(&[m1.clone(), m2.clone()], c.as_deref(), head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Mini-batch size; `None` means full batch.
    pub batch: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 50, lr: 0.05, batch: None }
    }
}

/// Gradient descent on branch weights, γ and β; the merge map is frozen.
///
/// Returns the loss before training followed by the loss after each epoch.
pub fn train(
    net: &mut FusionNet,
    x: &Matrix,
    labels: &[u16],
    opts: &TrainOptions,
    counter: Option<&MacCounter>,
) -> Result<Vec<f64>> {
    if labels.len() != x.rows() {
        return Err(Error::Dimension { expected: x.rows(), actual: labels.len() });
    }
    if !(opts.lr >= 0.0) || !opts.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be non-negative, got {}", opts.lr)));
    }
    let mut curve = vec![net.loss(x, labels)?];
    let bs = opts.batch.unwrap_or(x.rows()).clamp(1, x.rows().max(1));
    for _ in 0..opts.epochs {
        for start in (0..x.rows()).step_by(bs) {
            let end = (start + bs).min(x.rows());
            let xb = if bs == x.rows() {
                None
            } else {
                Some(Matrix::from_vec(end - start, x.cols(), x.as_slice()[start * x.cols()..end * x.cols()].to_vec())?)
            };
            let (_, grads) = net.loss_and_grad(xb.as_ref().unwrap_or(x), &labels[start..end], true, counter)?;
            if opts.lr == 0.0 {
                continue;
            }
            let mut macs = 0u64;
            for (b, g) in net.branches.iter_mut().zip(&grads) {
                axpy(-opts.lr, g.w.as_slice(), b.w.as_mut_slice());
                axpy(-opts.lr, &g.gamma, &mut b.gamma);
                axpy(-opts.lr, &g.beta, &mut b.beta);
                macs += (g.w.as_slice().len() + 2 * g.gamma.len()) as u64;
            }
            tally(counter, Phase::Train, macs);
        }
        curve.push(net.loss(x, labels)?);
    }
    Ok(curve)
}

/// `H = −Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy_stat(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("entropy needs a non-negative finite vector".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("probabilities sum to {s}")));
    }
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierDetector {
    pub threshold: f64,
}

/// Softmax entropy of the net's output for every row of `x`.
pub fn entropies(net: &FusionNet, x: &Matrix) -> Result<Vec<f64>> {
    if net.head != Head::Softmax {
        return Err(Error::Config("entropy statistics need a softmax head".into()));
    }
    (0..x.rows()).into_par_iter().map(|i| entropy_stat(&net.forward(x.row(i))?)).collect()
}

/// Threshold at the largest training entropy.
pub fn calibrate_threshold(net: &FusionNet, train: &Matrix) -> Result<OutlierDetector> {
    if train.rows() == 0 {
        return Err(Error::InvalidInput("cannot calibrate on an empty set".into()));
    }
    let threshold = entropies(net, train)?.into_iter().fold(0.0, f64::max);
    Ok(OutlierDetector { threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Legitimate,
    Outlier,
}

/// Outlier exactly when `H(x)` exceeds the threshold.
pub fn detect_outlier(det: &OutlierDetector, net: &FusionNet, x: &[f64]) -> Result<(Verdict, f64)> {
    if net.head != Head::Softmax {
        return Err(Error::Config("entropy statistics need a softmax head".into()));
    }
    let h = entropy_stat(&net.forward(x)?)?;
    Ok((if h > det.threshold { Verdict::Outlier } else { Verdict::Legitimate }, h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// `(threshold, FPR, TPR)`, thresholds ascending. A sample is accepted
    /// as legitimate when `H ≤ threshold`; TPR counts accepted legitimate
    /// inputs, FPR accepted outliers.
    pub points: Vec<(f64, f64, f64)>,
    pub auc: f64,
    /// FPR at the smallest threshold accepting every legitimate input.
    pub fp_at_tp100: f64,
    pub legit: Vec<f64>,
    pub outlier: Vec<f64>,
}

impl Roc {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for (t, f, p) in &self.points {
            s.push_str(&format!("{t:.9},{f:.6},{p:.6}\n"));
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("entropy,population\n");
        for h in &self.legit {
            s.push_str(&format!("{h:.9},legitimate\n"));
        }
        for h in &self.outlier {
            s.push_str(&format!("{h:.9},outlier\n"));
        }
        s
    }

    /// Shared mass of the two normalised entropy histograms over `bins`
    /// equal bins spanning both populations.
    pub fn histogram_overlap(&self, bins: usize) -> f64 {
        let all = self.legit.iter().chain(&self.outlier);
        let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let hist = |v: &[f64]| {
            let mut h = vec![0.0; bins];
            for &x in v {
                let i = if width > 0.0 { (((x - lo) / width) as usize).min(bins - 1) } else { 0 };
                h[i] += 1.0 / v.len() as f64;
            }
            h
        };
        let (a, b) = (hist(&self.legit), hist(&self.outlier));
        a.iter().zip(&b).map(|(x, y)| x.min(*y)).sum()
    }
}

/// ROC of the entropy detector, sweeping every observed entropy value.
pub fn roc_curve(net: &FusionNet, legit: &Matrix, outliers: &Matrix) -> Result<Roc> {
    roc_from_entropies(entropies(net, legit)?, entropies(net, outliers)?)
}

pub fn roc_from_entropies(legit: Vec<f64>, outlier: Vec<f64>) -> Result<Roc> {
    if legit.is_empty() || outlier.is_empty() {
        return Err(Error::InvalidInput("ROC needs both populations".into()));
    }
    let mut thresholds: Vec<f64> = legit.iter().chain(&outlier).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    thresholds.dedup();
    let rate = |v: &[f64], t: f64| v.iter().filter(|h| **h <= t).count() as f64 / v.len() as f64;
    let mut points = vec![(f64::NEG_INFINITY, 0.0, 0.0)];
    points.extend(thresholds.iter().map(|&t| (t, rate(&outlier, t), rate(&legit, t))));
    let auc = points.windows(2).map(|w| (w[1].1 - w[0].1) * 0.5 * (w[1].2 + w[0].2)).sum();
    let max_legit = legit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fp_at_tp100 = rate(&outlier, max_legit);
    Ok(Roc { points, auc, fp_at_tp100, legit, outlier })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(labels: Vec<u16>, w: Vec<f64>, n: usize) -> WeightModel {
        WeightModel {
            w: Matrix::from_vec(labels.len(), n, w).unwrap(),
            labels,
            lambda: 0.0,
            transform_id: String::new(),
            reservoir_hash: 1,
            trained_on: 0,
        }
    }

    #[test]
    fn single_transfer_identity() {
        let net = transfer_single(&model(vec![0, 1], vec![1.0, 0.0, 0.0, 1.0], 2)).unwrap();
        assert_eq!(net.predict(&[1.0, 0.0]).unwrap(), 0);
        let p = net.forward(&[0.3, 0.9]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn constant_branch_maps_to_beta() {
        let mut net = transfer_single(&model(vec![0, 1, 2], vec![1.0; 3], 1)).unwrap();
        net.branches[0].beta = vec![0.1, 0.2, 0.3];
        net.head = Head::Relu;
        let out = net.forward(&[2.0]).unwrap();
        for (o, b) in out.iter().zip([0.1, 0.2, 0.3]) {
            assert!((o - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_and_overlapping_shapes() {
        let m1 = model(vec![0, 1], vec![1.0, 0.0, 0.0, 1.0], 2);
        let m2 = model(vec![2, 3], vec![0.5, 0.5, -0.5, 0.5], 2);
        let a = transfer_disjoint(&m1, &m2, Head::Softmax).unwrap();
        assert_eq!(a.forward(&[1.0, 2.0]).unwrap().len(), 4);
        assert_eq!(a.merge_map, Matrix::identity(4));
        assert!(transfer_overlapping(&m1, &m2, None, Head::Softmax).is_err());
        let m3 = model(vec![1, 2], vec![0.5, 0.5, -0.5, 0.5], 2);
        assert!(transfer_disjoint(&m1, &m3, Head::Softmax).is_err());
        let b = transfer_overlapping(&m1, &m3, None, Head::Relu).unwrap();
        assert_eq!((b.merge_map.rows(), b.merge_map.cols()), (4, 3));
        assert_eq!(b.merge_map[(1, 1)], 0.5);
        assert_eq!(b.merge_map[(2, 1)], 0.5);
        let mut other = m2.clone();
        other.reservoir_hash = 2;
        assert!(matches!(transfer_disjoint(&m1, &other, Head::Softmax), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn degenerate_overlap_weights_select_branch_one() {
        let m1 = model(vec![0, 1], vec![1.0, 0.3, 0.2, 1.0], 2);
        let m3 = model(vec![1, 2], vec![0.5, 0.5, -0.5, 0.9], 2);
        let net = transfer_overlapping(&m1, &m3, Some((&[1.0, 1.0], &[0.0, 1.0])), Head::Relu).unwrap();
        let x = [0.7, -0.2];
        let tr = net.trace(&x).unwrap();
        assert_eq!(tr.logits[1], tr.z[1]);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_stat(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_stat(&[0.05; 20]).unwrap() - 20f64.ln()).abs() < 1e-12);
        assert!((entropy_stat(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(entropy_stat(&[0.5, 0.6]).is_err());
        assert!(entropy_stat(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn roc_extremes() {
        let r = roc_from_entropies(vec![0.1, 0.2], vec![0.5, 0.7]).unwrap();
        assert!((r.auc - 1.0).abs() < 1e-12);
        assert_eq!(r.fp_at_tp100, 0.0);
        assert_eq!(r.histogram_overlap(10), 0.0);
        let same: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = roc_from_entropies(same.clone(), same).unwrap();
        assert!(r.points.iter().all(|(_, f, t)| (f - t).abs() < 1e-12));
        assert!((r.auc - 0.5).abs() < 0.02);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut net = transfer_single(&model(vec![0, 1, 2], vec![0.2, -0.1, 0.4, 0.3, 0.0, -0.5], 2)).unwrap();
        let before = net.clone();
        let x = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        train(&mut net, &x, &[0, 1, 2], &TrainOptions { lr: 0.0, ..Default::default() }, None).unwrap();
        assert_eq!(net, before);
        assert!(train(&mut net, &x, &[0, 1, 7], &TrainOptions::default(), None).is_err());
    }

    #[test]
    fn net_bytes_round_trip() {
        let m1 = model(vec![0, 1], vec![1.0, 0.5, 0.25, 1.0], 2);
        let m3 = model(vec![1, 2], vec![0.5, 0.5, -0.5, 0.75], 2);
        let net = transfer_overlapping(&m1, &m3, None, Head::Relu).unwrap();
        let b = net.to_bytes();
        assert_eq!(FusionNet::from_bytes(&b).unwrap(), net);
        assert!(FusionNet::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b;
        bad[0] = 0;
        assert!(FusionNet::from_bytes(&bad).is_err());
    }
}
