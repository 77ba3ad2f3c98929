use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::align::{compose_description, parse_findings, OrganRegistry};
use crate::encoder::apply_rope;
use crate::error::{Error, Result};
use crate::eval::{bootstrap_eval, retrieval_metrics, RECALL_CUTOFFS};
use crate::numkernel::Tensor;

/// Findings record used by the composer goldens.
pub const GOLDEN_RECORD: &str = include_str!("../../tests/fixtures/train_7_a_1.json");
/// Hand-derived compositions of [`GOLDEN_RECORD`] over fixed organ sets.
pub const GOLDEN_WINDOWS: &str = include_str!("../../tests/fixtures/compose_goldens.json");

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenWindow {
    pub organs: Vec<String>,
    pub expected: String,
}

pub fn golden_windows() -> Result<Vec<GoldenWindow>> {
    serde_json::from_str(GOLDEN_WINDOWS).map_err(|e| Error::schema(format!("golden windows: {e}")))
}

/// Worst deviations seen by [`rope_property_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeReport {
    pub tuples: usize,
    /// max |<R_t q, R_s k> - <R_{t+d} q, R_{s+d} k>|.
    pub max_shift_error: f64,
    /// max relative change of a coordinate pair's norm.
    pub max_norm_error: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `tuples` random (q, k, t, s, shift) with head dimension 8 and base
/// 1000 and measures both rotation properties.
pub fn rope_property_check(tuples: usize, seed: u64) -> Result<RopeReport> {
    const D: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RopeReport {
        tuples,
        max_shift_error: 0.0,
        max_norm_error: 0.0,
    };
    for _ in 0..tuples {
        let q = Tensor::new(vec![1, D], (0..D).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let k = Tensor::new(vec![1, D], (0..D).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let t = rng.random_range(0..512);
        let s = rng.random_range(0..512);
        let shift = rng.random_range(0..512);
        let rot = |x: &Tensor, p: usize| apply_rope(x, &[p], 1000.0);
        let a = dot(rot(&q, t)?.data(), rot(&k, s)?.data());
        let b = dot(rot(&q, t + shift)?.data(), rot(&k, s + shift)?.data());
        report.max_shift_error = report.max_shift_error.max((a - b).abs());
        let rq = rot(&q, t)?;
        for r in 0..D / 2 {
            let before = q.data()[2 * r].hypot(q.data()[2 * r + 1]);
            let after = rq.data()[2 * r].hypot(rq.data()[2 * r + 1]);
            report.max_norm_error = report.max_norm_error.max((before - after).abs() / before.max(1.0));
        }
    }
    Ok(report)
}

/// Reference metrics from a full stable sort of every row: relevance is 1
/// for the paired candidate only, and precision, DCG and ideal DCG are
/// summed position by position.
pub fn brute_force_metrics(sim: &Tensor) -> Vec<(String, f64)> {
    let n = sim.shape()[0];
    let mut ranks = Vec::with_capacity(n);
    let (mut ap, mut ndcg) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let row = sim.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut precision_sum = 0.0;
        let mut dcg = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if j == i {
                ranks.push(pos + 1);
                precision_sum += 1.0 / (pos + 1) as f64;
                if pos < 10 {
                    dcg += 1.0 / ((pos + 2) as f64).log2();
                }
            }
        }
        let ideal = 1.0 / 2f64.log2();
        ap.push(precision_sum / 1.0);
        ndcg.push(dcg / ideal);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out: Vec<(String, f64)> = RECALL_CUTOFFS
        .iter()
        .map(|&k| {
            (
                format!("R@{k}"),
                ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64,
            )
        })
        .collect();
    out.push((
        "MeanRank".into(),
        mean(&ranks.iter().map(|&r| r as f64).collect::<Vec<_>>()),
    ));
    out.push(("mAP".into(), mean(&ap)));
    out.push(("NDCG@10".into(), mean(&ndcg)));
    out
}

/// Random square similarity matrix; every other draw is quantized so ties occur.
pub fn random_similarity(rng: &mut ChaCha8Rng, max_n: usize) -> Result<Tensor> {
    let n = rng.random_range(1..=max_n);
    let coarse = rng.random_bool(0.5);
    let data = (0..n * n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if coarse {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect();
    Tensor::new(vec![n, n], data)
}

/// Number of matrices on which library metrics and the brute-force
/// reference disagree in any bit, plus whether bootstrap reports repeat per seed.
pub fn metric_oracle_check(matrices: usize, max_n: usize, seed: u64) -> Result<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..matrices {
        let sim = random_similarity(&mut rng, max_n)?;
        let got = retrieval_metrics(&sim)?;
        let same = brute_force_metrics(&sim)
            .iter()
            .all(|(k, v)| got.get(k).is_some_and(|g| g.to_bits() == v.to_bits()));
        if !same {
            mismatches += 1;
        }
    }
    let img = Tensor::new(vec![20, 6], (0..120).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let txt = Tensor::new(vec![20, 6], (0..120).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let a = bootstrap_eval(&img, &txt, 8, 25, seed)?;
    let b = bootstrap_eval(&img, &txt, 8, 25, seed)?;
    Ok((mismatches, a == b))
}

/// Golden windows whose composed text differs from the committed string.
pub fn composer_golden_failures() -> Result<Vec<String>> {
    let registry = OrganRegistry::default();
    let record = parse_findings(GOLDEN_RECORD, &registry)?;
    Ok(golden_windows()?
        .into_iter()
        .filter(|w| compose_description(&record, &w.organs, &registry) != w.expected)
        .map(|w| format!("[{}]", w.organs.join(", ")))
        .collect())
}
