//! Layered run configuration: preset defaults, then a TOML file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use formula_synth::corpus::CommandExclusion;
use formula_synth::metrics::PerplexityMode;
use formula_synth::recognizer::RecognizerConfig;
use formula_synth::trainer::{GanTrainConfig, RecTrainConfig, SynthesisConfig};
use serde::{Deserialize, Serialize};

pub const RESOLVED_FILE: &str = "config.resolved.toml";

/// Bad input from the command line or the config file (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Sample font and size per formula instead of the default parameters.
    pub sample_fonts: bool,
    pub max_tokens: usize,
    /// Height of pseudo-handwriting and InkML rasterizations.
    pub stroke_height: usize,
    pub exclusion: CommandExclusion,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { sample_fonts: true, max_tokens: 150, stroke_height: 128, exclusion: CommandExclusion::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_size: usize,
    pub perplexity_mode: PerplexityMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beam_size: 10, perplexity_mode: PerplexityMode::Corpus }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.0, 1.0], iterations: vec![1000, 2000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub count: usize,
    pub gutter: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { count: 4, gutter: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `stub` or `http:<url>`; `http` alone reads `RENDER_URL`.
    pub renderer: String,
    pub workers: usize,
    pub prepare: PrepareConfig,
    pub gan: GanTrainConfig,
    pub synthesis: SynthesisConfig,
    pub recognizer: RecTrainConfig,
    pub evaluate: EvalConfig,
    pub ablation: AblationConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            renderer: "stub".into(),
            workers: 1,
            prepare: PrepareConfig::default(),
            gan: GanTrainConfig::default(),
            synthesis: SynthesisConfig::default(),
            recognizer: RecTrainConfig::default(),
            evaluate: EvalConfig::default(),
            ablation: AblationConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

/// Model size presets selectable with `--preset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Tiny,
    Small,
    Large,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self::default();
        match preset {
            Preset::Tiny => {
                c.gan = GanTrainConfig::tiny();
                c.recognizer.input_height = 32;
                c.recognizer.model = RecognizerConfig::tiny(0);
            }
            Preset::Small => c.recognizer.model = RecognizerConfig::small(0),
            Preset::Large => {}
        }
        c
    }

    /// Overlays `file` (if any) on the preset. Unknown keys are usage errors.
    pub fn load(preset: Preset, file: Option<&Path>) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(path) = file else { return Ok(base) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay: toml::Table =
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let mut merged = toml::Table::try_from(&base).context("serializing defaults")?;
        merge(&mut merged, overlay);
        merged.try_into().map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    /// Applies the global seed to every component that draws random numbers.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gan.seed = seed;
        self.recognizer.seed = seed;
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(dir.join(RESOLVED_FILE), text)?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[gan]\nlambda = 10.0\n[gan.generator]\nz_dim = 16\n").unwrap();
        let c = RunConfig::load(Preset::Tiny, Some(&path)).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.gan.lambda, 10.0);
        assert_eq!(c.gan.input_height, 32);
        assert_eq!(c.gan.generator.z_dim, 16);
        assert_eq!(c.gan.generator.channels, GanTrainConfig::tiny().generator.channels);
        std::fs::write(&path, "[gan]\nlamda = 10.0\n").unwrap();
        let err = RunConfig::load(Preset::Tiny, Some(&path)).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn resolved_config_reloads_to_the_same_value() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::preset(Preset::Small);
        c.write_resolved(dir.path()).unwrap();
        let back = RunConfig::load(Preset::Large, Some(&dir.path().join(RESOLVED_FILE))).unwrap();
        assert_eq!(back, c);
    }
}
