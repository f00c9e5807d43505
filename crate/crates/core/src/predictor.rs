//! Coefficient predictor: a three-layer MLP mapping the coefficient columns of
//! two surrounding layers to the coefficient column of the layer between.
//!
//! The net is applied to each of the `n` column positions independently: for
//! column `j`, the input is `concat(prev[:, j], next[:, j])` (length `2r`) and
//! the output is a column of length `r`. One layer triplet is one training
//! sample, processed as a batch of its columns.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::MatrixFamily;
use crate::error::{Error, Result};
use crate::lfck;
use crate::numkernel::gemm::{linear, linear_backward};
use crate::numkernel::{adamw_update, AdamWParams, Rng, Scalar, Tensor};
use crate::svdspace::SvdSpace;

/// How the norm term of the loss measures magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Mean over columns of `(‖pred_col‖ − ‖target_col‖)²`.
    #[default]
    PerColumn,
    /// `(‖pred‖_F − ‖target‖_F)²` over the whole matrix.
    WholeMatrix,
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_column" | "column" => Ok(NormMode::PerColumn),
            "whole_matrix" | "matrix" => Ok(NormMode::WholeMatrix),
            _ => Err(Error::arg(format!("unknown norm mode '{s}'"))),
        }
    }
}

/// Which axis of the coefficient matrices the net is applied along.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Columns,
    /// Experimental: apply the net to rows (the matrices are transposed on
    /// the way in and out).
    Rows,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub init_std: f64,
    pub hidden: usize,
    pub norm_mode: NormMode,
    pub orientation: Orientation,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            lr: 1e-3,
            epochs: 5,
            lambda: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            init_std: 0.02,
            hidden: 256,
            norm_mode: NormMode::PerColumn,
            orientation: Orientation::Columns,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.init_std < 0.0 {
            return Err(Error::Config("lr and init_std must be non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorNet {
    pub family: MatrixFamily,
    /// Length of one output column (input columns have length `2r`).
    pub r: usize,
    pub hidden: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub orientation: Orientation,
    /// Objective the net is (or will be) trained and evaluated with.
    pub lambda: f64,
    pub norm_mode: NormMode,
}

pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Weights ~ Normal(0, `init_std`), biases zero.
pub fn build_predictor(r: usize, hidden: usize, seed: u64, init_std: f64) -> Result<PredictorNet> {
    if r == 0 || hidden == 0 {
        return Err(Error::arg(format!(
            "predictor needs r ≥ 1 and hidden ≥ 1 (got r={r}, hidden={hidden})"
        )));
    }
    let mut rng = Rng::derive(seed, "predictor-init");
    let mut w = |rows: usize, cols: usize| {
        Tensor::new([rows, cols], rng.normal_vec(rows * cols, 0.0, init_std))
    };
    let w1 = w(hidden, 2 * r)?;
    let w2 = w(hidden, hidden)?;
    let w3 = w(r, hidden)?;
    Ok(PredictorNet {
        family: MatrixFamily::QProj,
        r,
        hidden,
        w1,
        b1: Tensor::zeros([hidden]),
        w2,
        b2: Tensor::zeros([hidden]),
        w3,
        b3: Tensor::zeros([r]),
        orientation: Orientation::Columns,
        lambda: 5e-5,
        norm_mode: NormMode::PerColumn,
    })
}

impl PredictorNet {
    pub fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn bit_eq(&self, other: &PredictorNet) -> bool {
        self.params()
            .iter()
            .zip(other.params())
            .all(|(a, b)| a.bit_eq(b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor)> = PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(self.params())
            .collect();
        let cfg = json!({
            "family": self.family,
            "r": self.r,
            "hidden": self.hidden,
            "orientation": self.orientation,
            "lambda": self.lambda,
            "norm_mode": self.norm_mode,
        });
        lfck::write(path, &cfg, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = lfck::read(path)?;
        #[derive(Deserialize)]
        struct Cfg {
            family: MatrixFamily,
            r: usize,
            hidden: usize,
            #[serde(default)]
            orientation: Orientation,
            #[serde(default)]
            lambda: f64,
            #[serde(default)]
            norm_mode: NormMode,
        }
        let c: Cfg = serde_json::from_value(f.config.clone())
            .map_err(|e| Error::validation(format!("predictor config: {e}")))?;
        let get = |n: &str| {
            f.get(n)
                .cloned()
                .ok_or_else(|| Error::validation(format!("predictor file lacks tensor {n}")))
        };
        let net = PredictorNet {
            family: c.family,
            r: c.r,
            hidden: c.hidden,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            w3: get("w3")?,
            b3: get("b3")?,
            orientation: c.orientation,
            lambda: c.lambda,
            norm_mode: c.norm_mode,
        };
        let (r, h) = (c.r, c.hidden);
        let want: [&[usize]; 6] = [&[h, 2 * r], &[h], &[h, h], &[h], &[r, h], &[r]];
        for ((name, t), shape) in PARAM_NAMES.iter().zip(net.params()).zip(want) {
            if t.shape() != shape {
                return Err(Error::validation(format!(
                    "predictor tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if f.tensors.len() != 6 {
            return Err(Error::validation("predictor file has unexpected tensors"));
        }
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Generic MLP math. Activations are stored one column position per row:
// `x: n × 2r`, hidden `n × h`, output `n × r`.

pub(crate) struct MlpView<'a, T> {
    pub r: usize,
    pub h: usize,
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
    pub w3: &'a [T],
    pub b3: &'a [T],
}

pub(crate) struct MlpActs<T> {
    pub a1: Vec<T>,
    pub a2: Vec<T>,
    pub y: Vec<T>,
}

pub(crate) fn mlp_forward<T: Scalar>(p: &MlpView<T>, x: &[T], n: usize) -> MlpActs<T> {
    let mut a1 = linear(x, n, 2 * p.r, p.w1, p.h);
    add_bias_relu(&mut a1, p.b1, true);
    let mut a2 = linear(&a1, n, p.h, p.w2, p.h);
    add_bias_relu(&mut a2, p.b2, true);
    let mut y = linear(&a2, n, p.h, p.w3, p.r);
    add_bias_relu(&mut y, p.b3, false);
    MlpActs { a1, a2, y }
}

fn add_bias_relu<T: Scalar>(z: &mut [T], b: &[T], relu: bool) {
    for row in z.chunks_exact_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
            if relu && *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

/// Parameter gradients in `PARAM_NAMES` order.
pub(crate) fn mlp_backward<T: Scalar>(
    p: &MlpView<T>,
    x: &[T],
    n: usize,
    acts: &MlpActs<T>,
    dy: &[T],
) -> [Vec<T>; 6] {
    let (r, h) = (p.r, p.h);
    let mut g = [
        vec![T::zero(); h * 2 * r],
        vec![T::zero(); h],
        vec![T::zero(); h * h],
        vec![T::zero(); h],
        vec![T::zero(); r * h],
        vec![T::zero(); r],
    ];
    col_sums(dy, r, &mut g[5]);
    let mut da2 = linear_backward(dy, &acts.a2, n, h, p.w3, r, Some(&mut g[4]), true).unwrap();
    relu_mask(&mut da2, &acts.a2);
    col_sums(&da2, h, &mut g[3]);
    let mut da1 = linear_backward(&da2, &acts.a1, n, h, p.w2, h, Some(&mut g[2]), true).unwrap();
    relu_mask(&mut da1, &acts.a1);
    col_sums(&da1, h, &mut g[1]);
    linear_backward(&da1, x, n, 2 * r, p.w1, h, Some(&mut g[0]), false);
    g
}

fn col_sums<T: Scalar>(m: &[T], width: usize, out: &mut [T]) {
    for row in m.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Zeroes gradient entries whose post-ReLU activation is zero.
fn relu_mask<T: Scalar>(d: &mut [T], act: &[T]) {
    for (g, &a) in d.iter_mut().zip(act) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `(L, L1, L2, dL/dy)` for predictions and targets stored `n × r`.
pub(crate) fn loss_and_grad<T: Scalar>(
    y: &[T],
    t: &[T],
    n: usize,
    r: usize,
    lambda: f64,
    mode: NormMode,
) -> (f64, f64, f64, Vec<T>) {
    let count = (n * r) as f64;
    let mut l1 = 0.0f64;
    let mut dy = vec![T::zero(); n * r];
    for ((d, &a), &b) in dy.iter_mut().zip(y).zip(t) {
        let e = a.as_f64() - b.as_f64();
        l1 += e * e;
        *d = T::of((1.0 - lambda) * 2.0 * e / count);
    }
    l1 /= count;

    let norms = |m: &[T]| -> Vec<f64> {
        m.chunks_exact(r)
            .map(|c| c.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
            .collect()
    };
    let (py, pt) = (norms(y), norms(t));
    let l2;
    match mode {
        NormMode::PerColumn => {
            let mut s = 0.0;
            for j in 0..n {
                let gap = py[j] - pt[j];
                s += gap * gap;
                if py[j] > 0.0 {
                    let c = lambda * 2.0 * gap / (n as f64 * py[j]);
                    for k in 0..r {
                        let i = j * r + k;
                        dy[i] += T::of(c * y[i].as_f64());
                    }
                }
            }
            l2 = s / n as f64;
        }
        NormMode::WholeMatrix => {
            let fy = py.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ft = pt.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gap = fy - ft;
            l2 = gap * gap;
            if fy > 0.0 {
                let c = lambda * 2.0 * gap / fy;
                for (d, &v) in dy.iter_mut().zip(y) {
                    *d += T::of(c * v.as_f64());
                }
            }
        }
    }
    ((1.0 - lambda) * l1 + lambda * l2, l1, l2, dy)
}

/// Loss and parameter gradients of the predictor MLP in 64-bit, for
/// gradient checking. `params` follow [`PARAM_NAMES`] with the layouts of
/// [`PredictorNet`]; `x` holds `n` packed input rows of width `2r` and
/// `targets` the matching `n × r` rows.
#[allow(clippy::too_many_arguments)]
pub fn predictor_loss_and_grad_f64(
    params: &[Vec<f64>; 6],
    r: usize,
    h: usize,
    x: &[f64],
    targets: &[f64],
    n: usize,
    lambda: f64,
    mode: NormMode,
) -> Result<(f64, [Vec<f64>; 6])> {
    let sizes = [h * 2 * r, h, h * h, h, r * h, r];
    for (i, (p, &s)) in params.iter().zip(&sizes).enumerate() {
        if p.len() != s {
            return Err(Error::dim(format!("{} has {} entries, expected {s}", PARAM_NAMES[i], p.len())));
        }
    }
    if x.len() != n * 2 * r || targets.len() != n * r {
        return Err(Error::dim("inputs or targets do not match n, r"));
    }
    let v = MlpView {
        r,
        h,
        w1: &params[0],
        b1: &params[1],
        w2: &params[2],
        b2: &params[3],
        w3: &params[4],
        b3: &params[5],
    };
    let acts = mlp_forward(&v, x, n);
    let (loss, _, _, dy) = loss_and_grad(&acts.y, targets, n, r, lambda, mode);
    Ok((loss, mlp_backward(&v, x, n, &acts, &dy)))
}

/// Builds the `n × 2r` input rows from two `r × n` coefficient matrices.
fn pack_inputs(prev: &Tensor, next: &Tensor) -> Vec<f32> {
    let (r, n) = (prev.rows(), prev.cols());
    let (p, q) = (prev.data(), next.data());
    let mut x = vec![0.0f32; n * 2 * r];
    for k in 0..r {
        for j in 0..n {
            x[j * 2 * r + k] = p[k * n + j];
            x[j * 2 * r + r + k] = q[k * n + j];
        }
    }
    x
}

/// `r × n` → `n × r`.
fn transpose_raw(m: &Tensor) -> Vec<f32> {
    let (r, n) = (m.rows(), m.cols());
    let d = m.data();
    let mut out = vec![0.0f32; r * n];
    for k in 0..r {
        for j in 0..n {
            out[j * r + k] = d[k * n + j];
        }
    }
    out
}

fn view(net: &PredictorNet) -> MlpView<'_, f32> {
    MlpView {
        r: net.r,
        h: net.hidden,
        w1: net.w1.data(),
        b1: net.b1.data(),
        w2: net.w2.data(),
        b2: net.b2.data(),
        w3: net.w3.data(),
        b3: net.b3.data(),
    }
}

fn check_inputs(net: &PredictorNet, a: &Tensor, b: &Tensor) -> Result<()> {
    let (ra, na) = a.dims2()?;
    let (rb, nb) = b.dims2()?;
    if (ra, na) != (rb, nb) {
        return Err(Error::dim(format!(
            "predictor inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if ra != net.r {
        return Err(Error::dim(format!(
            "predictor expects columns of length {}, got {ra}",
            net.r
        )));
    }
    Ok(())
}

/// Column `j` of the result is `MLP(concat(prev[:, j], next[:, j]))`.
pub fn forward_columns(net: &PredictorNet, prev_cols: &Tensor, next_cols: &Tensor) -> Result<Tensor> {
    check_inputs(net, prev_cols, next_cols)?;
    let n = prev_cols.cols();
    let x = pack_inputs(prev_cols, next_cols);
    let acts = mlp_forward(&view(net), &x, n);
    let mut out = vec![0.0f32; net.r * n];
    for j in 0..n {
        for k in 0..net.r {
            out[k * n + j] = acts.y[j * net.r + k];
        }
    }
    Tensor::new([net.r, n], out)
}

/// Predicts the coefficients of a layer between `v_a` and `v_b`, honouring
/// the net's orientation.
pub fn predict_intermediate(net: &PredictorNet, v_a: &Tensor, v_b: &Tensor) -> Result<Tensor> {
    match net.orientation {
        Orientation::Columns => forward_columns(net, v_a, v_b),
        Orientation::Rows => {
            forward_columns(net, &v_a.transpose()?, &v_b.transpose()?)?.transpose()
        }
    }
}

/// `(L, L1, L2)` of [`combined_loss`] with an explicit norm mode.
pub fn combined_loss_with(
    pred: &Tensor,
    target: &Tensor,
    lambda: f64,
    mode: NormMode,
) -> Result<(f64, f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (r, n) = pred.dims2()?;
    let (l, l1, l2, _) =
        loss_and_grad::<f32>(&transpose_raw(pred), &transpose_raw(target), n, r, lambda, mode);
    Ok((l, l1, l2))
}

/// `L1` = mean squared error over all entries, `L2` = mean over columns of
/// the squared column-norm gap, `L = (1 − λ)·L1 + λ·L2`.
pub fn combined_loss(pred: &Tensor, target: &Tensor, lambda: f64) -> Result<(f64, f64, f64)> {
    combined_loss_with(pred, target, lambda, NormMode::PerColumn)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub prev: Tensor,
    pub mid: Tensor,
    pub next: Tensor,
    /// 1-based index of the middle layer in its source model.
    pub layer: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub family: MatrixFamily,
    pub samples: Vec<Triplet>,
}

impl TripletDataset {
    /// Interior triplets `(V_{i−1}, V_i, V_{i+1})` of one SVD space.
    pub fn from_space(space: &SvdSpace, source: &str) -> Self {
        Self::from_matrices(space.family, &space.coeffs, source)
    }

    /// Same construction on raw layer matrices (the no-SVD variant).
    pub fn from_raw(family: MatrixFamily, mats: &[Tensor], source: &str) -> Self {
        Self::from_matrices(family, mats, source)
    }

    fn from_matrices(family: MatrixFamily, mats: &[Tensor], source: &str) -> Self {
        let samples = (1..mats.len().saturating_sub(1))
            .map(|i| Triplet {
                prev: mats[i - 1].clone(),
                mid: mats[i].clone(),
                next: mats[i + 1].clone(),
                layer: i + 1,
                source: source.to_string(),
            })
            .collect();
        TripletDataset { family, samples }
    }

    /// Concatenates datasets of the same family and shape.
    pub fn pooled(parts: Vec<TripletDataset>) -> Result<Self> {
        let mut it = parts.into_iter();
        let mut out = it.next().ok_or_else(|| Error::arg("nothing to pool"))?;
        for p in it {
            if p.family != out.family {
                return Err(Error::arg(format!(
                    "cannot pool {} with {}",
                    p.family, out.family
                )));
            }
            out.samples.extend(p.samples);
        }
        out.check_uniform()?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shape `(r, n)` shared by every matrix of every sample.
    pub fn check_uniform(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::arg("triplet dataset is empty"))?;
        let shape = first.mid.dims2()?;
        for s in &self.samples {
            for m in [&s.prev, &s.mid, &s.next] {
                if m.dims2()? != shape {
                    return Err(Error::dim(format!(
                        "sample {}#{} has shape {:?}, expected {shape:?}",
                        s.source,
                        s.layer,
                        m.shape()
                    )));
                }
            }
        }
        Ok(shape)
    }

    /// Seeded split into `(train, held_out)`; the held-out part receives
    /// `round(frac·len)` samples, at least one when `frac > 0` and at most
    /// `len − 1`.
    pub fn split_holdout(&self, frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::arg(format!("holdout fraction {frac} outside [0, 1)")));
        }
        let n = self.len();
        let mut k = (frac * n as f64).round() as usize;
        if frac > 0.0 {
            k = k.max(1);
        }
        k = k.min(n.saturating_sub(1));
        let perm = Rng::derive(seed, "holdout").permutation(n);
        let mut held: Vec<usize> = perm[..k].to_vec();
        held.sort_unstable();
        let mut train = Vec::with_capacity(n - k);
        let mut test = Vec::with_capacity(k);
        for (i, s) in self.samples.iter().enumerate() {
            if held.binary_search(&i).is_ok() {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((
            TripletDataset {
                family: self.family,
                samples: train,
            },
            TripletDataset {
                family: self.family,
                samples: test,
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub sample: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch,sample,L,L1,L2\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e}\n",
            h.epoch, h.sample, h.loss, h.l1, h.l2
        ));
    }
    s
}

/// One sample in network layout: inputs `n × 2r`, targets `n × r`.
fn prepared(s: &Triplet, orientation: Orientation) -> Result<(Vec<f32>, Vec<f32>, usize)> {
    let (p, m, q) = match orientation {
        Orientation::Columns => (s.prev.clone(), s.mid.clone(), s.next.clone()),
        Orientation::Rows => (s.prev.transpose()?, s.mid.transpose()?, s.next.transpose()?),
    };
    Ok((pack_inputs(&p, &q), transpose_raw(&m), m.cols()))
}

fn sample_width(ds: &TripletDataset, orientation: Orientation) -> Result<usize> {
    let (r, n) = ds.check_uniform()?;
    Ok(match orientation {
        Orientation::Columns => r,
        Orientation::Rows => n,
    })
}

/// Trains a fresh net with one AdamW step per sample and a seeded shuffle
/// per epoch.
pub fn train_predictor(
    dataset: &TripletDataset,
    cfg: &PredictorTrainConfig,
) -> Result<(PredictorNet, Vec<LossRecord>)> {
    cfg.validate()?;
    let r = sample_width(dataset, cfg.orientation)?;
    let mut net = build_predictor(r, cfg.hidden, cfg.seed, cfg.init_std)?;
    net.family = dataset.family;
    net.orientation = cfg.orientation;
    net.lambda = cfg.lambda;
    net.norm_mode = cfg.norm_mode;

    let data = dataset
        .samples
        .iter()
        .map(|s| prepared(s, cfg.orientation))
        .collect::<Result<Vec<_>>>()?;
    let hp = cfg.adamw();
    let mut moments: Vec<(Vec<f32>, Vec<f32>)> = net
        .params()
        .iter()
        .map(|t| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
        .collect();
    let mut order_rng = Rng::derive(cfg.seed, "predictor-order");
    let mut history = Vec::with_capacity(cfg.epochs * data.len());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = order_rng.permutation(data.len());
        for &idx in &order {
            let (x, t, n) = &data[idx];
            let v = view(&net);
            let acts = mlp_forward(&v, x, *n);
            let (l, l1, l2, dy) = loss_and_grad(&acts.y, t, *n, r, cfg.lambda, cfg.norm_mode);
            if !l.is_finite() {
                let s = &dataset.samples[idx];
                return Err(Error::numeric(format!(
                    "non-finite predictor loss at epoch {epoch}, sample {idx} ({} layer {})",
                    s.source, s.layer
                )));
            }
            let grads = mlp_backward(&v, x, *n, &acts, &dy);
            step += 1;
            for ((p, g), (m, vv)) in net.params_mut().into_iter().zip(&grads).zip(&mut moments) {
                adamw_update(p.data_mut(), g, m, vv, step, &hp, cfg.lr, cfg.weight_decay)?;
            }
            history.push(LossRecord {
                epoch,
                sample: idx,
                loss: l,
                l1,
                l2,
            });
        }
        for (name, p) in PARAM_NAMES.iter().zip(net.params()) {
            p.ensure_finite(&format!("predictor parameter {name}"))?;
        }
    }
    Ok((net, history))
}

/// Mean `(L, L1, L2)` over the dataset under the net's objective.
pub fn evaluate_predictor(net: &PredictorNet, dataset: &TripletDataset) -> Result<(f64, f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let r = sample_width(dataset, net.orientation)?;
    if r != net.r {
        return Err(Error::dim(format!(
            "dataset column length {r} does not match predictor r {}",
            net.r
        )));
    }
    let v = view(net);
    let (mut sl, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for s in &dataset.samples {
        let (x, t, n) = prepared(s, net.orientation)?;
        let acts = mlp_forward(&v, &x, n);
        let (l, l1, l2, _) = loss_and_grad(&acts.y, &t, n, r, net.lambda, net.norm_mode);
        sl += l;
        s1 += l1;
        s2 += l2;
    }
    let k = dataset.len() as f64;
    Ok((sl / k, s1 / k, s2 / k))
}

impl fmt::Display for PredictorNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "predictor[{} r={} h={} λ={}]",
            self.family, self.r, self.hidden, self.lambda
        )
    }
}
