//! Subcommand bodies. Each returns the process exit code on success.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde_json::json;
use volrope::align::dataset::{read_dataset, synth_dataset, write_dataset};
use volrope::align::{
    compose_description, organs_in_chunk, parse_findings, ChunkSpec, MaskVolume, OrganRegistry, Study,
};
use volrope::encoder::{checkpoint, DualEncoder};
use volrope::eval::{
    cosine_matrix, encode_images, encode_texts, fixed_length_pairs, heatmap_csv, linear_probe, presence_labels,
    rope_base_sweep, BootstrapSpec, EvalPair, ProbeConfig, REPORT_CSV_HEADER,
};
use volrope::numkernel::{Tensor, BACKWARD_OPS};
use volrope::train::{compare_optimizers, loss_csv, LossRecord, Trainer, LOSS_CSV_HEADER};
use volrope::verify::{run_all, VerifyOptions};

use crate::config::RunConfig;
use crate::{ComposeArgs, ConfigArgs, EvalArgs, SynthArgs, TrainArgs, VerifyArgs};

/// Final checkpoint name inside a training run directory.
pub const CHECKPOINT: &str = "checkpoint.ckpt";

/// Loads the configuration, applies flag overrides and prepares the output directory.
fn resolve(args: &ConfigArgs, flags: Vec<String>) -> Result<(RunConfig, PathBuf)> {
    let mut overrides = args.overrides.clone();
    overrides.extend(flags);
    let mut cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| volrope::Error::io(&out, e))
        .context("creating output directory")?;
    cfg.persist(&out)?;
    Ok((cfg, out))
}

fn flag<T: std::fmt::Display>(key: &str, value: Option<T>) -> Option<String> {
    value.map(|v| format!("{key}={v}"))
}

/// Debug formatting keeps a decimal point or exponent, so TOML reads a float.
fn toml_float(x: f64) -> String {
    format!("{x:?}")
}

fn list<T: std::fmt::Display>(values: &[T]) -> String {
    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn write(path: &Path, text: &str) -> Result<()> {
    volrope::atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn load_studies(dir: &Path, registry: &OrganRegistry) -> Result<Vec<Study>> {
    let (_, studies) = read_dataset(dir, registry).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok(studies)
}

pub fn synth(args: SynthArgs) -> Result<ExitCode> {
    let flags = [flag("data.studies", args.count), flag("data.seed", args.seed)];
    let (cfg, out) = resolve(&args.config, flags.into_iter().flatten().collect())?;
    let registry = OrganRegistry::default();
    let studies = synth_dataset(cfg.data.studies, cfg.data.seed, &cfg.synth, &registry)?;
    let manifest = write_dataset(&out, &studies, &registry, Some(cfg.data.seed), Some(cfg.synth.clone()))?;
    println!("wrote {} studies to {}", manifest.studies.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let flags = [
        flag("train.steps", args.steps),
        flag("train.batch_size", args.batch_size),
        flag("train.optim.lr", args.lr.map(toml_float)),
        flag("train.optim.kind", args.optimizer.map(|k| format!("\"{k}\""))),
        flag("train.seed", args.seed),
    ];
    let (cfg, out) = resolve(&args.config, flags.into_iter().flatten().collect())?;
    let registry = OrganRegistry::default();
    let studies = load_studies(&args.dataset, &registry)?;
    let model = DualEncoder::new(cfg.model.clone(), cfg.model_seed)?;

    if args.compare_optimizers {
        for (kind, log) in compare_optimizers(&model, &cfg.train, &studies, &registry)? {
            let path = out.join(format!("loss_{kind}.csv"));
            write(&path, &loss_csv(&log))?;
            println!(
                "{kind}: {} steps, final loss {:.4}",
                log.len(),
                log.last().map_or(f64::NAN, |r| r.loss)
            );
        }
        return Ok(ExitCode::SUCCESS);
    }

    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log = LossLog::create(&out.join("loss.csv"))?;
    let (mut first, mut last) = (None, None);
    while trainer.steps_done() < cfg.train.steps {
        let step = trainer.steps_done();
        let rec = trainer
            .sample_batch(&studies, &registry)
            .and_then(|b| trainer.train_step(&b))
            .with_context(|| format!("training aborted at step {step}"))?;
        log.append(&rec)?;
        first.get_or_insert(rec.loss);
        last = Some(rec.loss);
        let done = trainer.steps_done();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.steps {
            checkpoint::save(
                &out.join(format!("checkpoint_step{done}.ckpt")),
                trainer.model(),
                done as u64,
            )?;
        }
    }
    checkpoint::save(&out.join(CHECKPOINT), trainer.model(), trainer.steps_done() as u64)?;
    match (first, last) {
        (Some(a), Some(b)) => println!("trained {} steps: loss {a:.4} -> {b:.4}", trainer.steps_done()),
        _ => println!("no steps requested; saved the initial checkpoint"),
    }
    println!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Append-only training log; each row is flushed as soon as its step ends.
struct LossLog {
    path: PathBuf,
    file: std::fs::File,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        let io = |e| volrope::Error::io(path, e);
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(LOSS_CSV_HEADER.as_bytes()).map_err(io)?;
        Ok(LossLog {
            path: path.to_path_buf(),
            file,
        })
    }

    fn append(&mut self, rec: &LossRecord) -> Result<()> {
        self.file
            .write_all(rec.csv_row().as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| volrope::Error::io(&self.path, e))?;
        Ok(())
    }
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let flags = [
        args.slices.as_deref().map(|s| format!("eval.slice_counts={}", list(s))),
        args.multipliers.as_deref().map(|m| {
            format!(
                "eval.base_multipliers={}",
                list(&m.iter().map(|&x| toml_float(x)).collect::<Vec<_>>())
            )
        }),
        flag("eval.padding", args.padding.map(|p| format!("\"{}\"", padding_name(p)))),
    ];
    let explicit_model = args.config.config.is_some() || args.config.overrides.iter().any(|o| o.starts_with("model."));
    let (cfg, out) = resolve(&args.config, flags.into_iter().flatten().collect())?;
    let (model, step) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if explicit_model && &cfg.model != model.config() {
        bail!(volrope::Error::schema(format!(
            "checkpoint {} was trained with a different model configuration",
            args.checkpoint.display()
        )));
    }
    let registry = OrganRegistry::default();
    let studies = load_studies(&args.dataset, &registry)?;
    if studies.is_empty() {
        bail!(volrope::Error::contract("evaluation needs at least one study"));
    }

    let mut summary = Vec::new();
    for &len in &cfg.eval.slice_counts {
        let pairs = fixed_length_pairs(
            &studies,
            &registry,
            len,
            cfg.eval.seed,
            model.config().patch_z,
            cfg.eval.padding,
        )?;
        let boot = BootstrapSpec {
            subset_size: cfg.eval.subset_size.min(pairs.len()),
            iterations: cfg.eval.iterations,
            seed: cfg.eval.seed,
        };
        let chunks: Vec<_> = pairs.iter().map(|p| &p.chunk).collect();
        let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
        let img = encode_images(&model, &chunks, model.config().rope_base)?;
        let txt = encode_texts(&model, &texts)?;
        let report = volrope::eval::bootstrap_eval(&img, &txt, boot.subset_size, boot.iterations, boot.seed)?;

        let label = format!("slices={len}");
        write(&out.join(format!("retrieval_{len}.json")), &pretty(&report.to_json())?)?;
        write(
            &out.join(format!("retrieval_{len}.csv")),
            &format!("{REPORT_CSV_HEADER}{}", report.csv_rows(&label)),
        )?;
        write(
            &out.join(format!("heatmap_{len}.csv")),
            &heatmap_csv(&cosine_matrix(&img, &txt)?),
        )?;

        let sweep = rope_base_sweep(&model, &pairs, &cfg.eval.base_multipliers, &boot)?;
        let mut csv = String::from("multiplier,base,training_base,metric,mean,std\n");
        let mut rows = Vec::new();
        for row in &sweep {
            for (k, v) in &row.report.metrics {
                csv.push_str(&format!(
                    "{},{},{},{k},{},{}\n",
                    row.multiplier, row.base, row.training_base, v.mean, v.std
                ));
            }
            rows.push(json!({
                "multiplier": row.multiplier,
                "base": row.base,
                "training_base": row.training_base,
                "report": row.report.to_json(),
            }));
        }
        write(&out.join(format!("rope_sweep_{len}.csv")), &csv)?;
        write(&out.join(format!("rope_sweep_{len}.json")), &pretty(&json!(rows))?)?;

        let probe = probe(&pairs, &img, studies.len(), cfg.eval.probe_train_fraction)?;
        write(&out.join(format!("probe_{len}.json")), &pretty(&probe)?)?;

        let r1 = report.get("R@1").map_or(f64::NAN, |m| m.mean);
        println!("{len} slices: {} pairs, R@1 {r1:.4}", pairs.len());
        summary.push(json!({ "slices": len, "pairs": pairs.len(), "report": report.to_json() }));
    }
    write(
        &out.join("eval_summary.json"),
        &pretty(&json!({ "checkpoint": args.checkpoint, "step": step, "results": summary }))?,
    )?;
    println!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn padding_name(p: volrope::encoder::PaddingMode) -> String {
    serde_json::to_value(p)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn pretty(v: &serde_json::Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Linear probe on vision embeddings: the first share of studies trains, the
/// rest tests. Classes are the organs present in at least one training window.
fn probe(pairs: &[EvalPair], img: &Tensor, studies: usize, fraction: f64) -> Result<serde_json::Value> {
    let split = ((studies as f64 * fraction).round() as usize).clamp(1, studies);
    let mut classes: Vec<String> = pairs[..split].iter().flat_map(|p| p.organs.iter().cloned()).collect();
    classes.sort();
    classes.dedup();
    if split == pairs.len() || classes.is_empty() {
        return Ok(json!({ "skipped": "not enough studies or labels for a train/test split" }));
    }
    let labels = presence_labels(pairs, &classes);
    let rows = |r: std::ops::Range<usize>| Tensor::from_rows(&r.map(|i| img.row(i).to_vec()).collect::<Vec<_>>());
    let report = linear_probe(
        &rows(0..split)?,
        &labels[..split],
        &rows(split..pairs.len())?,
        &labels[split..],
        &classes,
        &ProbeConfig::default(),
    )?;
    Ok(json!({ "train_studies": split, "test_studies": pairs.len() - split, "report": report }))
}

pub fn compose(args: ComposeArgs) -> Result<ExitCode> {
    let registry = OrganRegistry::default();
    let text = std::fs::read_to_string(&args.findings)
        .map_err(|e| volrope::Error::io(&args.findings, e))
        .context("reading findings")?;
    let record = parse_findings(&text, &registry)?;
    let organs = match (&args.mask, &args.organs) {
        (Some(mask), _) => {
            let mask = MaskVolume::load(mask)?;
            let spec = ChunkSpec {
                start: args.start.unwrap_or(0),
                len: args.len.unwrap_or(0),
            };
            organs_in_chunk(&mask, &spec)?
        }
        (None, Some(organs)) => {
            if let Some(unknown) = organs.iter().find(|o| !o.is_empty() && !registry.contains(o)) {
                bail!(volrope::Error::Validation {
                    field: "organs".into(),
                    message: format!("`{unknown}` is not a registered organ"),
                });
            }
            organs.iter().filter(|o| !o.is_empty()).cloned().collect()
        }
        (None, None) => bail!(volrope::Error::contract("pass --mask with --start/--len, or --organs")),
    };
    println!("{}", compose_description(&record, &organs, &registry));
    Ok(ExitCode::SUCCESS)
}

pub fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let mut opts = if args.quick {
        VerifyOptions::quick()
    } else {
        VerifyOptions::default()
    };
    if let Some(op) = &args.inject_fault {
        let op = BACKWARD_OPS
            .iter()
            .find(|o| *o == op)
            .ok_or_else(|| volrope::Error::Validation {
                field: "inject-fault".into(),
                message: format!("unknown op `{op}`; one of {}", BACKWARD_OPS.join(", ")),
            })?;
        opts.fault = Some((op, 1.5));
    }
    let outcomes = run_all(&opts);
    for s in &outcomes {
        let status = if s.passed { "PASS" } else { "FAIL" };
        println!(
            "{:<9} [{status}] {} ({:.1}s)",
            s.name,
            s.detail,
            s.elapsed.as_secs_f64()
        );
    }
    let failed = outcomes.iter().filter(|s| !s.passed).count();
    if failed == 0 {
        println!("all {} suites passed", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} suites failed", outcomes.len());
        Ok(ExitCode::from(1))
    }
}
