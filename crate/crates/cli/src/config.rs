//! Run configuration: one TOML (or JSON) document with every knob a run uses.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use volrope::align::SynthConfig;
use volrope::encoder::{EncoderConfig, PaddingMode};
use volrope::train::TrainConfig;

/// File written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where outputs go unless `--out` or `VOLROPE_OUT_DIR` say otherwise.
    pub output_dir: PathBuf,
    /// Seed of the initial weights.
    pub model_seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            model_seed: 0,
            checkpoint_every: 0,
            model: EncoderConfig::tiny(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of synthetic studies.
    pub studies: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { studies: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub slice_counts: Vec<usize>,
    pub base_multipliers: Vec<f64>,
    /// Bootstrap subset size; capped at the number of evaluation pairs.
    pub subset_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub padding: PaddingMode,
    /// Leading share of studies used to fit the linear probe.
    pub probe_train_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            slice_counts: vec![32, 64, 128],
            base_multipliers: vec![0.5, 1.0, 2.0],
            subset_size: 32,
            iterations: 20,
            seed: 0,
            padding: PaddingMode::Repeat,
            probe_train_fraction: 0.75,
        }
    }
}

impl RunConfig {
    /// Reads `path` (TOML, or JSON when the extension is `.json`), applies
    /// `key.path=value` overrides and rejects unknown keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_document(p, &text)?
            }
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| anyhow::Error::new(volrope::Error::config(e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let e = &self.eval;
        if e.slice_counts.is_empty() || e.slice_counts.contains(&0) {
            bail!(volrope::Error::config(
                "eval.slice_counts must be non-empty and positive"
            ));
        }
        if e.iterations == 0 || e.subset_size == 0 {
            bail!(volrope::Error::config(
                "eval.iterations and eval.subset_size must be positive"
            ));
        }
        if !(e.probe_train_fraction > 0.0 && e.probe_train_fraction < 1.0) {
            bail!(volrope::Error::config("eval.probe_train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run config")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        volrope::atomic_write(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

fn parse_document(path: &Path, text: &str) -> Result<toml::Table> {
    let invalid = |e: String| anyhow::Error::new(volrope::Error::config(format!("{}: {e}", path.display())));
    if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        match toml::Value::try_from(json).map_err(|e| invalid(e.to_string()))? {
            toml::Value::Table(t) => Ok(t),
            _ => Err(invalid("top level must be an object".into())),
        }
    } else {
        text.parse::<toml::Table>().map_err(|e| invalid(e.to_string()))
    }
}

/// Sets `a.b.c=value`; the value is read as TOML, falling back to a bare string.
pub fn apply_override(doc: &mut toml::Table, raw: &str) -> Result<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| volrope::Error::config(format!("override `{raw}` is not key=value")))?;
    let value = format!("v = {}", value.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| volrope::Error::config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.optim.lr=0.02".into(),
                "train.optim.kind=\"adamw-only\"".into(),
                "model.layers=1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.optim.lr, 0.02);
        assert_eq!(cfg.train.optim.kind, volrope::objective::OptimizerKind::AdamwOnly);
        assert_eq!(cfg.model.layers, 1);
        assert_eq!(cfg.model.channels, 32);
    }

    #[test]
    fn bare_strings_are_accepted() {
        let cfg = RunConfig::load(None, &["eval.padding=zero".into()]).unwrap();
        assert_eq!(cfg.eval.padding, PaddingMode::Zero);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["train.stepz=3".into()]).is_err());
        assert!(RunConfig::load(None, &["modle.layers=1".into()]).is_err());
    }

    #[test]
    fn json_and_toml_are_equivalent() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        std::fs::write(&t, "model_seed = 4\n[train]\nsteps = 7\n").unwrap();
        std::fs::write(&j, r#"{"model_seed": 4, "train": {"steps": 7}}"#).unwrap();
        assert_eq!(
            RunConfig::load(Some(&t), &[]).unwrap(),
            RunConfig::load(Some(&j), &[]).unwrap()
        );
    }
}
