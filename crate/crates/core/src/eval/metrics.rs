//! Retrieval metrics for paired sets where query `i` matches candidate `i`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Cutoffs reported as `R@k`.
pub const RECALL_CUTOFFS: [usize; 5] = [1, 5, 10, 50, 100];

/// `scores[i][j] = <img_i, txt_j>`.
pub fn cosine_matrix(img: &Tensor, txt: &Tensor) -> Result<Tensor> {
    if img.rank() != 2 || txt.rank() != 2 || img.shape()[1] != txt.shape()[1] {
        return Err(Error::Shape {
            op: "cosine_matrix",
            lhs: img.shape().to_vec(),
            rhs: txt.shape().to_vec(),
        });
    }
    img.matmul(&txt.transpose_last2()?)
}

fn square(sim: &Tensor) -> Result<usize> {
    if sim.rank() != 2 || sim.shape()[0] != sim.shape()[1] {
        return Err(Error::contract(format!(
            "paired retrieval needs a square similarity matrix, got {:?}",
            sim.shape()
        )));
    }
    if !sim.is_finite() {
        return Err(Error::NonFinite { op: "ranks" });
    }
    Ok(sim.shape()[0])
}

/// 1-based rank of the paired candidate per query. A candidate with an equal
/// score outranks the truth only if its index is lower.
pub fn ranks(sim: &Tensor) -> Result<Vec<usize>> {
    let n = square(sim)?;
    Ok((0..n)
        .map(|i| {
            let row = sim.row(i);
            let truth = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > truth || (s == truth && j < i))
                .count()
        })
        .collect())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("recall cutoff k must be at least 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn recall_at_k(sim: &Tensor, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("recall cutoff k must be at least 1"));
    }
    recall_from_ranks(&ranks(sim)?, k)
}

pub fn mean_rank(sim: &Tensor) -> Result<f64> {
    Ok(mean(ranks(sim)?.into_iter().map(|r| r as f64)))
}

/// Mean reciprocal rank, which is average precision with one relevant item.
pub fn map_score(sim: &Tensor) -> Result<f64> {
    Ok(mean(ranks(sim)?.into_iter().map(|r| 1.0 / r as f64)))
}

fn ndcg10_term(rank: usize) -> f64 {
    if rank <= 10 {
        1.0 / (1.0 + rank as f64).log2()
    } else {
        0.0
    }
}

pub fn ndcg_at_10(sim: &Tensor) -> Result<f64> {
    Ok(mean(ranks(sim)?.into_iter().map(ndcg10_term)))
}

/// All retrieval metrics for one similarity matrix, keyed by report name.
pub fn retrieval_metrics(sim: &Tensor) -> Result<BTreeMap<String, f64>> {
    let r = ranks(sim)?;
    let mut out = BTreeMap::new();
    for k in RECALL_CUTOFFS {
        out.insert(format!("R@{k}"), recall_from_ranks(&r, k)?);
    }
    out.insert("MeanRank".into(), mean(r.iter().map(|&x| x as f64)));
    out.insert("mAP".into(), mean(r.iter().map(|&x| 1.0 / x as f64)));
    out.insert("NDCG@10".into(), mean(r.iter().copied().map(ndcg10_term)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let m = mean(values.iter().copied());
        let var = mean(values.iter().map(|v| (v - m) * (v - m)));
        MeanStd {
            mean: m,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub queries: usize,
    pub subset_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub relevance: String,
    pub tie_break: String,
}

/// Bootstrap summary: `{metric: {mean, std}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub metrics: BTreeMap<String, MeanStd>,
    pub meta: ReportMeta,
}

impl RetrievalReport {
    pub fn get(&self, metric: &str) -> Option<MeanStd> {
        self.metrics.get(metric).copied()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.metrics {
            map.insert(k.clone(), serde_json::to_value(v).expect("plain numbers"));
        }
        map.insert("_meta".into(), serde_json::to_value(&self.meta).expect("plain fields"));
        serde_json::Value::Object(map)
    }

    /// Long-format rows `label,metric,mean,std` (no header).
    pub fn csv_rows(&self, label: &str) -> String {
        self.metrics
            .iter()
            .map(|(k, v)| format!("{label},{k},{},{}\n", v.mean, v.std))
            .collect()
    }
}

pub const REPORT_CSV_HEADER: &str = "label,metric,mean,std\n";

/// Metrics over `iterations` random subsets of `subset_size` pairs, drawn
/// without replacement. Iteration `i` uses stream `i` of the seeded generator,
/// so results do not depend on evaluation order.
pub fn bootstrap_eval(
    img: &Tensor,
    txt: &Tensor,
    subset_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let full = cosine_matrix(img, txt)?;
    let n = square(&full)?;
    if subset_size == 0 || subset_size > n {
        return Err(Error::contract(format!(
            "bootstrap subset size {subset_size} not in 1..={n}"
        )));
    }
    if iterations == 0 {
        return Err(Error::contract("bootstrap needs at least one iteration"));
    }
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for it in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it as u64);
        // sorted so ties keep the original index order
        let mut idx = rand::seq::index::sample(&mut rng, n, subset_size).into_vec();
        idx.sort_unstable();
        let sub: Vec<f64> = idx
            .iter()
            .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
            .map(|(i, j)| full.data()[i * n + j])
            .collect();
        let sim = Tensor::new(vec![subset_size, subset_size], sub)?;
        for (k, v) in retrieval_metrics(&sim)? {
            samples.entry(k).or_default().push(v);
        }
    }
    Ok(RetrievalReport {
        metrics: samples.iter().map(|(k, v)| (k.clone(), MeanStd::of(v))).collect(),
        meta: ReportMeta {
            queries: n,
            subset_size,
            iterations,
            seed,
            relevance: "single paired item per query".into(),
            tie_break: "lower candidate index first".into(),
        },
    })
}

/// Similarity matrix as CSV, one row per query.
pub fn heatmap_csv(sim: &Tensor) -> String {
    let cols = sim.shape().last().copied().unwrap_or(1);
    sim.data()
        .chunks(cols)
        .map(|row| row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}
