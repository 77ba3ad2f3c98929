//! Acceptance criteria 1-9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; pass criterion numbers as
//! arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use volrope::align::dataset::synth_dataset;
use volrope::align::synth::SYNTH_ORGANS;
use volrope::align::{compose_description, parse_findings, sample_chunk, OrganRegistry, Study, SynthConfig};
use volrope::encoder::{apply_rope, ChunkTensor, DualEncoder, EncoderConfig, PaddingMode};
use volrope::eval::{
    bootstrap_eval, evaluate_retrieval, fixed_length_pairs, linear_probe, presence_labels, retrieval_metrics,
    BootstrapSpec, ProbeConfig,
};
use volrope::numkernel::{Tape, Tensor};
use volrope::objective::{muon_step, MuonState, OptimConfig, OptimizerKind};
use volrope::train::{compare_optimizers, loss_csv, TrainConfig, Trainer, LOSS_CSV_HEADER};
use volrope::verify::{model_fixture, model_grad_check};

const REFERENCE_RECORD: &str = include_str!("fixtures/train_7_a_1.json");
const GOLDENS: &str = include_str!("fixtures/compose_goldens.json");
const SENTINEL: &str = "No target structures were detected in this CT block.";

/// Pinned outcome of the synthetic retrieval run, established by a pilot.
const PINNED_R1: f64 = 1.0;
const PINNED_R1_TOLERANCE: f64 = 0.05;

type Outcome = (bool, String);

struct Shared {
    trained: Option<(DualEncoder, Vec<Study>, OrganRegistry)>,
}

fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}

// 1. Gradient correctness over every parameter of the tiny config.
fn gradient_correctness(_: &mut Shared) -> Outcome {
    let cfg = EncoderConfig::tiny();
    let start = Instant::now();
    let (store, chunks, texts) = model_fixture(&cfg, 0, 2).unwrap();
    let r = model_grad_check(&cfg, &store, &chunks, &texts, 1e-5, Tape::new).unwrap();
    let elapsed = start.elapsed();
    let total: usize = store.iter().map(|(_, t)| t.numel()).sum();
    (
        r.max_rel_error < 1e-4 && r.entries == total && elapsed < Duration::from_secs(60),
        format!(
            "max rel error {:.3e} over {}/{} entries (worst {}[{}]) in {:.1}s",
            r.max_rel_error,
            r.entries,
            total,
            r.worst_param,
            r.worst_entry,
            seconds(elapsed)
        ),
    )
}

// 2. RoPE relative-position property and pair-norm preservation.
fn rope_relative_position(_: &mut Shared) -> Outcome {
    const D: usize = 16;
    let base = 1000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut shift_err, mut norm_err, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..1000 {
        let q: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (t, s, delta) = (
            rng.random_range(0..1024),
            rng.random_range(0..1024),
            rng.random_range(0..1024),
        );
        let qt = Tensor::new(vec![1, D], q.clone()).unwrap();
        let kt = Tensor::new(vec![1, D], k.clone()).unwrap();
        let rot = |x: &Tensor, p: usize| apply_rope(x, &[p], base).unwrap();
        let a = dot(rot(&qt, t).data(), rot(&kt, s).data());
        let b = dot(rot(&qt, t + delta).data(), rot(&kt, s + delta).data());
        shift_err = shift_err.max((a - b).abs());
        let rq = rot(&qt, t);
        for r in 0..D / 2 {
            // explicit 2x2 rotation by t * base^(-2r/d)
            let angle = t as f64 * f64::powf(base, -2.0 * r as f64 / D as f64);
            let (sin, cos) = angle.sin_cos();
            let (x, y) = (q[2 * r], q[2 * r + 1]);
            oracle_err = oracle_err
                .max((rq.data()[2 * r] - (cos * x - sin * y)).abs())
                .max((rq.data()[2 * r + 1] - (sin * x + cos * y)).abs());
            let before = x.hypot(y);
            let after = rq.data()[2 * r].hypot(rq.data()[2 * r + 1]);
            norm_err = norm_err.max((before - after).abs());
        }
    }
    (
        shift_err < 1e-9 && norm_err < 1e-12 && oracle_err < 1e-12,
        format!("1000 tuples: shift error {shift_err:.2e}, pair-norm error {norm_err:.2e}, rotation vs 2x2 oracle {oracle_err:.2e}"),
    )
}

// 3. One weight set encodes every chunk length; token counts follow the patch grid.
fn variable_length(_: &mut Shared) -> Outcome {
    let expected_tokens = |cfg: &EncoderConfig, l: usize| {
        let padded = l.div_ceil(cfg.patch_z) * cfg.patch_z;
        (padded / cfg.patch_z) * (cfg.in_plane_size / cfg.patch_xy).pow(2)
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for (cfg, lengths) in [
        (EncoderConfig::tiny(), vec![1, 16, 32, 64, 128, 256]),
        (EncoderConfig::full_geometry(), vec![128]),
    ] {
        let model = DualEncoder::new(cfg.clone(), 3).unwrap();
        let shapes_before: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let side = cfg.in_plane_size;
        for &l in &lengths {
            let chunk = ChunkTensor::from_slices(
                side,
                side,
                (0..l * side * side).map(|i| (i % 97) as f64 / 97.0).collect(),
            )
            .unwrap();
            let padded = model.prepare_chunk(&chunk).unwrap();
            let tokens = model.patch_embed(&padded).unwrap().tokens.shape()[0];
            let z = model.encode_volume(&chunk);
            let good = tokens == expected_tokens(&cfg, l)
                && z.as_ref()
                    .is_ok_and(|z| z.len() == cfg.embed_dim && z.iter().all(|v| v.is_finite()));
            ok &= good;
            notes.push(format!("{side}px l={l}: L={tokens}"));
        }
        let shapes_after: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        ok &= shapes_before == shapes_after;
    }
    ok &= expected_tokens(&EncoderConfig::full_geometry(), 128) == 2048;
    (ok, format!("{}; parameter shapes unchanged", notes.join(", ")))
}

#[derive(serde::Deserialize)]
struct Golden {
    organs: Vec<String>,
    expected: String,
}

// 4. Composer goldens on the reference record.
fn composer_goldens(_: &mut Shared) -> Outcome {
    let registry = OrganRegistry::default();
    let record = parse_findings(REFERENCE_RECORD, &registry).unwrap();
    let none: [&str; 0] = [];
    let sentinel_ok = compose_description(&record, &none, &registry) == SENTINEL;
    let goldens: Vec<Golden> = serde_json::from_str(GOLDENS).unwrap();
    let windows: Vec<&Golden> = goldens.iter().filter(|g| !g.organs.is_empty()).collect();
    let failed: Vec<String> = windows
        .iter()
        .filter(|g| compose_description(&record, &g.organs, &registry) != g.expected)
        .map(|g| g.organs.join("+"))
        .collect();
    (
        sentinel_ok && windows.len() == 3 && failed.is_empty(),
        format!(
            "sentinel {}, {}/{} golden windows byte-exact{}",
            if sentinel_ok { "exact" } else { "WRONG" },
            windows.len() - failed.len(),
            windows.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" (failed: {})", failed.join(", "))
            }
        ),
    )
}

/// Brute-force reference: sort each row, locate the pair, sum precision and
/// discounted gain position by position.
fn brute_force(sim: &Tensor) -> BTreeMap<String, f64> {
    let n = sim.shape()[0];
    let mut ranks = Vec::new();
    let (mut ap, mut ndcg) = (Vec::new(), Vec::new());
    for i in 0..n {
        let row = sim.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let pos = order.iter().position(|&j| j == i).unwrap();
        ranks.push(pos + 1);
        let mut hits = 0.0;
        let mut precision = 0.0;
        let mut dcg = 0.0;
        for (p, &j) in order.iter().enumerate() {
            if j == i {
                hits += 1.0;
                precision += hits / (p + 1) as f64;
                if p < 10 {
                    dcg += 1.0 / ((p + 2) as f64).log2();
                }
            }
        }
        ap.push(precision / hits);
        ndcg.push(dcg / (1.0 / 2f64.log2()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out = BTreeMap::new();
    for k in [1, 5, 10, 50, 100] {
        out.insert(
            format!("R@{k}"),
            ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64,
        );
    }
    out.insert(
        "MeanRank".into(),
        mean(&ranks.iter().map(|&r| r as f64).collect::<Vec<_>>()),
    );
    out.insert("mAP".into(), mean(&ap));
    out.insert("NDCG@10".into(), mean(&ndcg));
    out
}

// 5. Metrics equal brute force exactly; bootstrap repeats per seed.
fn metric_oracles(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for m in 0..200 {
        let n = rng.random_range(1..=50);
        let coarse = m % 2 == 0;
        let data: Vec<f64> = (0..n * n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if coarse {
                    (v * 4.0).round() / 4.0 + 0.0
                } else {
                    v
                }
            })
            .collect();
        with_ties += usize::from(coarse);
        let sim = Tensor::new(vec![n, n], data).unwrap();
        if retrieval_metrics(&sim).unwrap() != brute_force(&sim) {
            mismatches += 1;
        }
    }
    let img = Tensor::new(vec![30, 8], (0..240).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let txt = Tensor::new(vec![30, 8], (0..240).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = bootstrap_eval(&img, &txt, 10, 50, 11).unwrap();
    let b = bootstrap_eval(&img, &txt, 10, 50, 11).unwrap();
    let c = bootstrap_eval(&img, &txt, 10, 50, 12).unwrap();
    let reproducible = a == b && a != c;
    (
        mismatches == 0 && reproducible,
        format!("{mismatches}/200 matrices differ ({with_ties} with ties); bootstrap same seed identical, new seed differs: {reproducible}"),
    )
}

fn synthetic_studies() -> (Vec<Study>, OrganRegistry) {
    let registry = OrganRegistry::default();
    let synth = SynthConfig {
        slices_min: 32,
        slices_max: 64,
        ..SynthConfig::default()
    };
    (synth_dataset(64, 0, &synth, &registry).unwrap(), registry)
}

// 6. Tiny model trained on 64 synthetic studies retrieves its held-in pairs.
fn synthetic_retrieval(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let (studies, registry) = synthetic_studies();
    let model = DualEncoder::new(EncoderConfig::tiny(), 0).unwrap();
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 16,
        seed: 0,
        optim: OptimConfig {
            lr: 1e-2,
            kind: OptimizerKind::MuonHybrid,
            ..OptimConfig::default()
        },
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let log = trainer.run(&studies, &registry, |_, _| Ok(())).unwrap();
    let model = trainer.into_model();
    let pairs = fixed_length_pairs(&studies[..16], &registry, 32, 1, 8, PaddingMode::Repeat).unwrap();
    let boot = BootstrapSpec {
        subset_size: 16,
        iterations: 1,
        seed: 0,
    };
    let report = evaluate_retrieval(&model, &pairs, &boot).unwrap();
    let r1 = report.get("R@1").unwrap().mean;
    let mean_rank = report.get("MeanRank").unwrap().mean;
    let elapsed = start.elapsed();
    let first: f64 = log[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    let last: f64 = log[log.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    shared.trained = Some((model, studies, registry));
    (
        r1 >= 0.9
            && (r1 - PINNED_R1).abs() <= PINNED_R1_TOLERANCE
            && mean_rank <= 2.0
            && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "R@1 {r1:.4} (pinned {PINNED_R1} +/- {PINNED_R1_TOLERANCE}), MeanRank {mean_rank:.3}, loss {first:.4} -> {last:.4}, {:.1}s",
            seconds(elapsed)
        ),
    )
}

// 7. Momentum rule against the two-equation recurrence; optimizer comparison.
fn optimizer_reproduction(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 24;
    let (lr, wd, beta) = (0.02, 0.01, 0.95);
    let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut state = MuonState::new(n);
    let (mut w_ref, mut u_ref) = (w.clone(), vec![0.0; n]);
    let mut recurrence_err = 0.0f64;
    for _ in 0..100 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        muon_step(&mut w, &g, &mut state, lr, wd, beta).unwrap();
        for i in 0..n {
            u_ref[i] = beta * u_ref[i] + (1.0 - beta) * g[i];
            w_ref[i] = (1.0 - lr * wd) * w_ref[i] - lr * u_ref[i];
            recurrence_err = recurrence_err.max((w[i] - w_ref[i]).abs());
        }
    }

    let w0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut w = w0.clone();
    muon_step(&mut w, &g, &mut MuonState::new(n), 0.05, 0.0, 0.0).unwrap();
    let sgd_bitwise = w
        .iter()
        .zip(&w0)
        .zip(&g)
        .all(|((a, b), gi)| a.to_bits() == (b - 0.05 * gi).to_bits());

    let registry = OrganRegistry::default();
    let synth = SynthConfig {
        slices_min: 32,
        slices_max: 48,
        ..SynthConfig::default()
    };
    let studies = synth_dataset(8, 1, &synth, &registry).unwrap();
    let model = DualEncoder::new(EncoderConfig::tiny(), 1).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        seed: 1,
        optim: OptimConfig::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let mut written = Vec::new();
    for (kind, log) in compare_optimizers(&model, &cfg, &studies, &registry).unwrap() {
        let path = dir.path().join(format!("loss_{kind}.csv"));
        std::fs::write(&path, loss_csv(&log)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        if text.starts_with(LOSS_CSV_HEADER) && text.lines().count() == cfg.steps + 1 {
            written.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    (
        recurrence_err < 1e-12 && sgd_bitwise && written.len() == 2,
        format!(
            "100-step recurrence error {recurrence_err:.2e}; beta=0, wd=0 bitwise SGD: {sgd_bitwise}; comparison CSVs: {}",
            written.join(", ")
        ),
    )
}

// 8. One-slice chunks: repeat padding probes at least as well as zero padding.
fn padding_trend(shared: &mut Shared) -> Outcome {
    if shared.trained.is_none() {
        synthetic_retrieval(shared);
    }
    let (model, studies, registry) = shared.trained.as_ref().unwrap();
    let classes: Vec<String> = SYNTH_ORGANS.iter().map(|s| s.to_string()).collect();
    let mut f1 = Vec::new();
    for mode in [PaddingMode::Repeat, PaddingMode::Zero] {
        let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rep in 0..4u64 {
            let pairs = fixed_length_pairs(studies, registry, 1, 100 + rep, model.config().patch_z, mode).unwrap();
            let labels = presence_labels(&pairs, &classes);
            for (i, (pair, y)) in pairs.iter().zip(labels).enumerate() {
                let z = model.encode_volume(&pair.chunk).unwrap();
                if i < 48 {
                    train_x.push(z);
                    train_y.push(y);
                } else {
                    test_x.push(z);
                    test_y.push(y);
                }
            }
        }
        let report = linear_probe(
            &Tensor::from_rows(&train_x).unwrap(),
            &train_y,
            &Tensor::from_rows(&test_x).unwrap(),
            &test_y,
            &classes,
            &ProbeConfig::default(),
        )
        .unwrap();
        f1.push(report.summary["f1"].mean);
    }
    (
        f1[0] >= f1[1],
        format!("macro F1 repeat {:.4} vs zero {:.4}", f1[0], f1[1]),
    )
}

// 9. Chunk-length frequencies and start uniformity at T=128.
fn sampling_law(_: &mut Shared) -> Outcome {
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut starts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for _ in 0..draws {
        let c = sample_chunk(128, &mut rng).unwrap();
        starts.entry(c.len).or_default().push(c.start);
    }
    let mut ok = starts.len() == 3;
    let mut notes = Vec::new();
    for (&len, s) in &starts {
        let freq = s.len() as f64 / draws as f64;
        ok &= (freq - 1.0 / 3.0).abs() <= 0.02;
        let bins = 128 - len + 1;
        if bins == 1 {
            ok &= s.iter().all(|&x| x == 0);
            notes.push(format!("l={len}: freq {freq:.4}, s always 0"));
            continue;
        }
        let mut counts = vec![0usize; bins];
        s.iter().for_each(|&x| counts[x] += 1);
        let expected = s.len() as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        ok &= p > 0.01;
        notes.push(format!(
            "l={len}: freq {freq:.4}, chi2 {chi2:.1} on {} dof, p {p:.3}",
            bins - 1
        ));
    }
    (ok, notes.join("; "))
}

fn main() -> ExitCode {
    type Criterion = (u32, &'static str, fn(&mut Shared) -> Outcome);
    let criteria: [Criterion; 9] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "rope relative position", rope_relative_position),
        (3, "variable-length contract", variable_length),
        (4, "composer goldens", composer_goldens),
        (5, "metric oracle equivalence", metric_oracles),
        (6, "synthetic retrieval trend", synthetic_retrieval),
        (7, "optimizer reproduction", optimizer_reproduction),
        (8, "padding trend", padding_trend),
        (9, "sampling law", sampling_law),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared { trained: None };
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let (passed, detail) = panic::catch_unwind(AssertUnwindSafe(|| run(&mut shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failures += usize::from(!passed);
        println!(
            "criterion {id} [{}] {name}: {detail}",
            if passed { "PASS" } else { "FAIL" }
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
