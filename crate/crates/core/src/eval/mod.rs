//! Attribution evaluation: correlation and area helpers, perturbation
//! benchmarks, localization scores, map similarity and comparison attributors.
//!
//! Model-facing metrics work on *dense* inputs: the tensor at the model's dense
//! input position (pixels `[1, h, w]` for the CNN, embeddings `[len, d]` for the
//! GRU). A map with `P` positions splits a dense input of `N` elements into `P`
//! contiguous groups of `N / P` elements, so perturbing position `p` replaces
//! group `p` with the corresponding baseline elements.

mod attributors;
mod localization;
mod perturbation;

pub use attributors::{integrated_gradients, integrated_gradients_raw, random_attribution, sanity_check, Sanity};
pub use localization::{bbox_ratio, ehr, ssim, ssim_window};
pub use perturbation::{
    insertion_deletion, roar, roar_curve, sensitivity_n, sensitivity_pct, Degenerate, InsDel, RoarPoint, Sensitivity,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, Model};
use crate::synthdata::{SEQ_LEN, UNK_TOKEN};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// A metric curve with strictly increasing `xs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Curve {
    pub fn new(label: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::shape("curve", format!("{} xs vs {} ys", xs.len(), ys.len())));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("curve xs must be strictly increasing"));
        }
        Ok(Curve {
            label: label.into(),
            xs,
            ys,
        })
    }

    /// Two-column CSV with an `x,y` header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            s.push_str(&format!("{x},{y}\n"));
        }
        s
    }
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs two equal-length inputs of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // Relative guard so rounding noise around a constant counts as zero variance.
    let tiny = |ss: f64, m: f64| ss <= (1e-24 * n) * m.abs().max(1.0).powi(2);
    if tiny(sxx, mx) {
        return Err(Error::UndefinedCorrelation("first input"));
    }
    if tiny(syy, my) {
        return Err(Error::UndefinedCorrelation("second input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Trapezoid-rule area under a curve.
pub fn auc_trapezoid(curve: &Curve) -> Result<f64> {
    if curve.xs.len() < 2 {
        return Err(Error::invalid("area under a curve needs at least 2 points"));
    }
    Ok(curve
        .xs
        .windows(2)
        .zip(curve.ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum())
}

/// Mean with standard error `std / √n` (unbiased std; 0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to summarize"));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Stat { mean, stderr, n })
    }
}

pub const REPORT_VERSION: u32 = 1;

/// Aggregated results of one experiment, serialized as the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub experiment: String,
    pub config: serde_json::Value,
    /// method → metric → summary
    pub scalars: BTreeMap<String, BTreeMap<String, Stat>>,
    /// method → curve name → curve
    pub curves: BTreeMap<String, BTreeMap<String, Curve>>,
}

impl EvalReport {
    pub fn new(experiment: impl Into<String>, config: serde_json::Value) -> Self {
        EvalReport {
            report_version: REPORT_VERSION,
            experiment: experiment.into(),
            config,
            scalars: BTreeMap::new(),
            curves: BTreeMap::new(),
        }
    }

    pub fn add_scalar(&mut self, method: &str, metric: &str, values: &[f64]) -> Result<()> {
        let s = Stat::from_values(values)?;
        self.scalars.entry(method.into()).or_default().insert(metric.into(), s);
        Ok(())
    }

    pub fn add_curve(&mut self, method: &str, name: &str, curve: Curve) {
        self.curves.entry(method.into()).or_default().insert(name.into(), curve);
    }

    /// Folds another report's scalars and curves into this one.
    pub fn merge(&mut self, other: EvalReport) {
        for (m, metrics) in other.scalars {
            self.scalars.entry(m).or_default().extend(metrics);
        }
        for (m, curves) in other.curves {
            self.curves.entry(m).or_default().extend(curves);
        }
    }
}

/// A classifier seen from its dense input.
pub trait DenseClassifier: Sync {
    /// Logits `[n, k]` for stacked dense inputs `[n, ...]`.
    fn logits_dense(&self, x: &Tensor) -> Result<Tensor>;

    /// Per-row gradient of the `target` logit with respect to `x: [n, ...]`.
    fn target_gradient(&self, x: &Tensor, target: usize) -> Result<Tensor>;
}

impl DenseClassifier for Model {
    fn logits_dense(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_from(x, self.dense_input_position())
    }

    fn target_gradient(&self, x: &Tensor, target: usize) -> Result<Tensor> {
        if target >= self.num_classes() {
            return Err(Error::invalid(format!("target class {target} out of range")));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.param(x.clone());
        let y = self.forward_range(&mut tape, &bound, xv, self.dense_input_position(), self.output_position())?;
        let col = tape.index_axis(y, 1, target)?;
        let s = tape.sum(col)?;
        Ok(tape.backward(s)?.get_or_zeros(xv, x.shape()))
    }
}

/// Dense input of a single-sample batch, without the batch axis.
pub fn dense_input(model: &Model, sample: &Batch) -> Result<Tensor> {
    if sample.len() != 1 {
        return Err(Error::invalid("expected a batch of one input"));
    }
    model.activations_at(sample, model.dense_input_position())?.row(0)
}

/// Dense input of the all-unknown sequence (the token baseline).
pub fn unknown_baseline(model: &Model) -> Result<Tensor> {
    dense_input(model, &Batch::Tokens(vec![vec![UNK_TOKEN; SEQ_LEN]]))
}

/// Elements per map position.
pub(crate) fn group_width(dense_len: usize, positions: usize) -> Result<usize> {
    if positions == 0 || dense_len % positions != 0 {
        return Err(Error::shape(
            "attribution map",
            format!("{positions} positions do not tile a {dense_len}-element input"),
        ));
    }
    Ok(dense_len / positions)
}

/// Softmax probability of `target` for each row of `logits`.
pub(crate) fn target_probs(logits: &Tensor, target: usize) -> Result<Vec<f64>> {
    let p = crate::tape::softmax_rows(logits)?;
    let k = p.shape()[1];
    Ok(p.data().chunks(k).map(|r| r[target]).collect())
}

/// Position order by descending score, ties by ascending index.
pub(crate) fn descending_order(map: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    order
}

/// Maps `f` over `0..n` on a pool of `workers` threads, preserving order.
pub fn par_map<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}
