//! Run configuration: a TOML file, dotted `--set` overrides, and defaults.

use std::path::{Path, PathBuf};

use concept_atlas::synth::planted::PlantedStackSpec;
use concept_atlas::{CorrelationKind, FactorizationConfig, MaskPipelineConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub inputs: Inputs,
    pub factorization: FactorizationConfig,
    pub train: TrainConfig,
    pub masks: MaskPipelineConfig,
    pub synth: SynthSection,
    pub selfcheck: SelfcheckSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("concept-atlas-out"),
            inputs: Inputs::default(),
            factorization: FactorizationConfig::default(),
            train: TrainConfig::default(),
            masks: MaskPipelineConfig::default(),
            synth: SynthSection::default(),
            selfcheck: SelfcheckSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Dumps forming the matrix rows.
    pub layers_a: Vec<PathBuf>,
    /// Dumps forming the matrix columns; empty means "same as `layers_a`".
    pub layers_b: Vec<PathBuf>,
    /// Sample roles and concept labels. Required for `sfss`; for `ucs` and
    /// `btsweep` it splits mining (train) from masking (test) samples.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub generator: SynthConfig,
    pub n_samples: usize,
    /// Manifest of PNG crops, each with a sibling `<stem>.mask.pgm`; the
    /// built-in demo shapes are used when absent.
    pub pool_manifest: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            generator: SynthConfig::default(),
            n_samples: 100,
            pool_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfcheckSection {
    pub planted: PlantedStackSpec,
    /// Chained stack for the depth check; its `seed` follows `planted.seed`.
    pub depth_layers: usize,
    pub depth_noise: f64,
    pub min_depth_contrast: f64,
}

impl Default for SelfcheckSection {
    fn default() -> Self {
        Self {
            planted: PlantedStackSpec::default(),
            depth_layers: 5,
            depth_noise: 1.0,
            min_depth_contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub correlation: CorrelationKind,
    pub thresholds: Vec<f64>,
    /// Runs whose share of degenerate matrix cells exceeds this fail.
    pub max_degenerate_fraction: f64,
    pub cell_labels: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            correlation: CorrelationKind::Pearson,
            thresholds: vec![0.25, 0.5, 0.75],
            max_degenerate_fraction: 1.0,
            cell_labels: true,
        }
    }
}

/// Parses `key=value` where `value` is a TOML literal; bare words fall back
/// to strings.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {raw:?}: expected key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("--set {raw:?}: empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {}: {seg} is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Loads `path` (if any), applies overrides in order, and resolves relative
/// input paths against the config file's directory.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| CliError::MissingInput(p.to_path_buf()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut table, &key, value)?;
    }
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(base) = path.and_then(Path::parent) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.inputs.layers_a.iter_mut().for_each(fix);
        config.inputs.layers_b.iter_mut().for_each(fix);
        config.inputs.manifest.iter_mut().for_each(fix);
        config.synth.pool_manifest.iter_mut().for_each(fix);
    }
    Ok(config)
}

impl RunConfig {
    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.factorization.seed = seed;
        self.train.seed = seed;
        self.synth.generator.seed = seed;
        self.selfcheck.planted.seed = seed;
    }

    pub fn layers_b(&self) -> &[PathBuf] {
        if self.inputs.layers_b.is_empty() {
            &self.inputs.layers_a
        } else {
            &self.inputs.layers_b
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let tagged = |module: &str, e: &dyn std::fmt::Display| CliError::Config(format!("[{module}] {e}"));
        self.factorization.validate().map_err(|e| tagged("factorizer", &e))?;
        self.train.validate().map_err(|e| tagged("cav-trainer", &e))?;
        self.masks.validate().map_err(|e| tagged("mask-pipeline", &e))?;
        self.synth.generator.validate().map_err(|e| tagged("synth-forge", &e))?;
        self.selfcheck.planted.validate().map_err(|e| tagged("synth-forge", &e))?;
        if !(0.0..=1.0).contains(&self.report.max_degenerate_fraction) {
            return Err(CliError::Config("report.max_degenerate_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Fails with the first referenced input path that does not exist.
    pub fn check_inputs(&self, layers: bool, pool: bool) -> Result<(), CliError> {
        let mut paths: Vec<&PathBuf> = Vec::new();
        if layers {
            paths.extend(&self.inputs.layers_a);
            paths.extend(&self.inputs.layers_b);
            paths.extend(&self.inputs.manifest);
        }
        if pool {
            paths.extend(&self.synth.pool_manifest);
        }
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(CliError::MissingInput(p.clone())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let c = load(
            None,
            &[
                "factorization.n_concepts=7".into(),
                "report.correlation=spearman".into(),
                "report.thresholds=[0.1, 0.9]".into(),
                "selfcheck.planted.noise_sigma=0.0".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.factorization.n_concepts, 7);
        assert_eq!(c.report.correlation, CorrelationKind::Spearman);
        assert_eq!(c.report.thresholds, vec![0.1, 0.9]);
        assert_eq!(c.selfcheck.planted.noise_sigma, 0.0);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(matches!(load(None, &["nokey".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, &["factorization.bogus=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, &["factorization.n_concepts=x".into()]), Err(CliError::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[inputs]\nlayers_a = [\"a.actv\"]\n").unwrap();
        let c = load(Some(&path), &[]).unwrap();
        assert_eq!(c.inputs.layers_a, vec![dir.path().join("a.actv")]);
    }
}
