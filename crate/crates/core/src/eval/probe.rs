//! Per-class logistic-regression probes on frozen embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::kernels::sigmoid;
use crate::numkernel::Tensor;

use super::metrics::MeanStd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_iters: usize,
    /// Stop once the loss changes by less than this between iterations.
    pub tol: f64,
    /// Optional L2 penalty on the weights (not the bias).
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iters: 10_000,
            tol: 1e-8,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the test labels hold a single class.
    pub auc: Option<f64>,
    /// Average precision; absent without test positives.
    pub ap: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub classes: Vec<ClassMetrics>,
    /// Mean and class-wise std of each metric over the classes where it is defined.
    pub summary: BTreeMap<String, MeanStd>,
}

/// Feature standardization fitted on the training split.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for k in 0..d {
                var[k] += (row[k] - mean[k]).powi(2) / n as f64;
            }
        }
        let scale = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let d = self.mean.len();
        x.data()
            .chunks(d)
            .map(|row| (0..d).map(|k| (row[k] - self.mean[k]) * self.scale[k]).collect())
            .collect()
    }
}

fn mean_loss(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = x.len() as f64;
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &t)| {
            let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            // -log sigmoid(+-z), stable for large |z|
            let s = if t { z } else { -z };
            -(s.min(0.0) - (-s.abs()).exp().ln_1p())
        })
        .sum::<f64>()
        / n;
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Full-batch gradient descent on the mean logistic loss. The step is
/// `1 / L` for the smoothness bound `L = (d + 1) / 4 + l2` of standardized data.
fn fit_logistic(x: &[Vec<f64>], y: &[bool], cfg: &ProbeConfig) -> (Vec<f64>, f64, usize) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let lr = 1.0 / ((d as f64 + 1.0) / 4.0 + cfg.l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut loss = mean_loss(x, y, &w, b, cfg.l2);
    for it in 1..=cfg.max_iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &t) in x.iter().zip(y) {
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = sigmoid(z) - f64::from(u8::from(t));
            gb += r / n;
            gw.iter_mut().zip(row).for_each(|(g, a)| *g += r * a / n);
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= lr * (g + cfg.l2 * *wk);
        }
        b -= lr * gb;
        let next = mean_loss(x, y, &w, b, cfg.l2);
        let delta = (loss - next).abs();
        loss = next;
        if delta < cfg.tol {
            return (w, b, it);
        }
    }
    (w, b, cfg.max_iters)
}

/// Area under the ROC curve by the rank-sum statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Average precision of the score ranking (descending, lower index first on ties).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_split(x: &Tensor, y: &[Vec<bool>], classes: usize, what: &str) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != y.len() {
        return Err(Error::contract(format!(
            "{what}: {} label rows for embeddings {:?}",
            y.len(),
            x.shape()
        )));
    }
    if y.iter().any(|r| r.len() != classes) {
        return Err(Error::contract(format!(
            "{what}: every label row needs {classes} entries"
        )));
    }
    Ok(())
}

/// Trains one probe per class on `train` and scores it on `test`.
///
/// Labels are `[samples][classes]`; `names` labels the classes in the report.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[Vec<bool>],
    test_x: &Tensor,
    test_y: &[Vec<bool>],
    names: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    check_split(train_x, train_y, names.len(), "train")?;
    check_split(test_x, test_y, names.len(), "test")?;
    if train_x.shape()[1] != test_x.shape()[1] {
        return Err(Error::Shape {
            op: "linear_probe",
            lhs: train_x.shape().to_vec(),
            rhs: test_x.shape().to_vec(),
        });
    }
    let std = Standardizer::fit(train_x);
    let xtr = std.apply(train_x);
    let xte = std.apply(test_x);
    let mut classes = Vec::with_capacity(names.len());
    for (c, name) in names.iter().enumerate() {
        let ytr: Vec<bool> = train_y.iter().map(|r| r[c]).collect();
        let yte: Vec<bool> = test_y.iter().map(|r| r[c]).collect();
        let (w, b, iterations) = fit_logistic(&xtr, &ytr, cfg);
        let scores: Vec<f64> = xte
            .iter()
            .map(|row| sigmoid(b + row.iter().zip(&w).map(|(a, k)| a * k).sum::<f64>()))
            .collect();
        let pred: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        let tp = pred.iter().zip(&yte).filter(|(p, t)| **p && **t).count();
        let fp = pred.iter().zip(&yte).filter(|(p, t)| **p && !**t).count();
        let fneg = pred.iter().zip(&yte).filter(|(p, t)| !**p && **t).count();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = ratio(2 * tp, 2 * tp + fp + fneg);
        classes.push(ClassMetrics {
            name: name.clone(),
            precision,
            recall,
            f1,
            auc: auc(&scores, &yte),
            ap: average_precision(&scores, &yte),
            iterations,
        });
    }
    let mut summary = BTreeMap::new();
    type Column = (&'static str, fn(&ClassMetrics) -> Option<f64>);
    let metric_columns: [Column; 5] = [
        ("precision", |m| Some(m.precision)),
        ("recall", |m| Some(m.recall)),
        ("f1", |m| Some(m.f1)),
        ("auc", |m| m.auc),
        ("ap", |m| m.ap),
    ];
    for (key, get) in metric_columns {
        let values: Vec<f64> = classes.iter().filter_map(get).collect();
        if !values.is_empty() {
            summary.insert(key.to_string(), MeanStd::of(&values));
        }
    }
    Ok(ProbeReport { classes, summary })
}
