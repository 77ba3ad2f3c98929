//! Self-checks behind `volrope verify`: whole-model gradient check, RoPE
//! properties, metric oracles and composer goldens.

mod gradient;
mod oracles;

use std::time::{Duration, Instant};

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::numkernel::Tape;

pub use gradient::{model_fixture, model_grad_check, padded_op_checks, ModelGradReport};
pub use oracles::{
    brute_force_metrics, composer_golden_failures, golden_windows, metric_oracle_check, random_similarity,
    rope_property_check, GoldenWindow, RopeReport, GOLDEN_RECORD, GOLDEN_WINDOWS,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ROPE_SHIFT_TOLERANCE: f64 = 1e-9;
pub const ROPE_NORM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Model geometry for the whole-model gradient check.
    pub model: EncoderConfig,
    pub batch: usize,
    pub seed: u64,
    pub rope_tuples: usize,
    pub metric_matrices: usize,
    /// Backward fault (op name, gradient factor) injected into every analytic
    /// pass; used to show the gradient suite can fail.
    pub fault: Option<(&'static str, f64)>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            model: EncoderConfig::tiny(),
            batch: 2,
            seed: 0,
            rope_tuples: 1000,
            metric_matrices: 200,
            fault: None,
        }
    }
}

impl VerifyOptions {
    /// Reduced geometry and sample counts; finishes in about a second.
    pub fn quick() -> Self {
        VerifyOptions {
            model: EncoderConfig {
                channels: 8,
                heads: 2,
                layers: 1,
                in_plane_size: 8,
                patch_xy: 4,
                patch_z: 4,
                text_vocab_size: 32,
                text_max_len: 16,
                embed_dim: 4,
                rope_base: 100.0,
                ..EncoderConfig::tiny()
            },
            rope_tuples: 200,
            metric_matrices: 50,
            ..Self::default()
        }
    }

    fn tape(&self) -> Tape {
        let mut t = Tape::new();
        if let Some((op, factor)) = self.fault {
            t.inject_backward_fault(op, factor);
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn gradient_suite(opts: &VerifyOptions) -> SuiteOutcome {
    timed("gradient", || {
        let tape = || opts.tape();
        let ops = padded_op_checks(tape, opts.seed)?;
        let (store, chunks, texts) = model_fixture(&opts.model, opts.seed, opts.batch)?;
        let r = model_grad_check(&opts.model, &store, &chunks, &texts, 1e-5, tape)?;
        let passed = ops < GRAD_TOLERANCE && r.max_rel_error < GRAD_TOLERANCE;
        Ok((
            passed,
            format!(
                "padded ops max rel error {ops:.2e}; model max rel error {:.2e} over {} entries (worst {}[{}])",
                r.max_rel_error, r.entries, r.worst_param, r.worst_entry
            ),
        ))
    })
}

pub fn rope_suite(opts: &VerifyOptions) -> SuiteOutcome {
    timed("rope", || {
        let r = rope_property_check(opts.rope_tuples, opts.seed)?;
        Ok((
            r.max_shift_error < ROPE_SHIFT_TOLERANCE && r.max_norm_error < ROPE_NORM_TOLERANCE,
            format!(
                "{} tuples, shift error {:.2e}, pair-norm error {:.2e}",
                r.tuples, r.max_shift_error, r.max_norm_error
            ),
        ))
    })
}

pub fn metrics_suite(opts: &VerifyOptions) -> SuiteOutcome {
    timed("metrics", || {
        let (mismatches, reproducible) = metric_oracle_check(opts.metric_matrices, 50, opts.seed)?;
        Ok((
            mismatches == 0 && reproducible,
            format!(
                "{mismatches} of {} matrices differ from brute force; bootstrap reproducible: {reproducible}",
                opts.metric_matrices
            ),
        ))
    })
}

pub fn composer_suite() -> SuiteOutcome {
    timed("composer", || {
        let total = golden_windows()?.len();
        let failed = composer_golden_failures()?;
        let detail = if failed.is_empty() {
            format!("{total} golden windows match")
        } else {
            format!("mismatched windows: {}", failed.join(" "))
        };
        Ok((failed.is_empty(), detail))
    })
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteOutcome> {
    vec![
        gradient_suite(opts),
        rope_suite(opts),
        metrics_suite(opts),
        composer_suite(),
    ]
}
