//! Run configuration: one TOML file covering the scene generator, pipeline,
//! heatmap corruption, evaluation and loss settings, with dotted-path
//! overrides applied on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fomo3d::matching::LossWeights;
use fomo3d::pipeline::{HeatmapCorruption, PipelineConfig};
use fomo3d::priors::SceneConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Class hierarchy preset; currently "nuscenes".
    pub preset: String,
    /// Replace every per-class evaluation range (long-range setups).
    pub range_override: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            preset: "nuscenes".into(),
            range_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub match_giou: f64,
    pub match_l2: f64,
    pub loss_giou: f64,
    pub loss_xyz: f64,
    pub loss_lwh: f64,
    pub focal_gamma: f64,
    /// Negative disables the alpha weighting.
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            match_giou: w.match_giou,
            match_l2: w.match_l2,
            loss_giou: w.loss_giou,
            loss_xyz: w.loss_xyz,
            loss_lwh: w.loss_lwh,
            focal_gamma: w.focal_gamma,
            focal_alpha: w.focal_alpha.unwrap_or(-1.0),
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            match_giou: self.match_giou,
            match_l2: self.match_l2,
            loss_giou: self.loss_giou,
            loss_xyz: self.loss_xyz,
            loss_lwh: self.loss_lwh,
            focal_gamma: self.focal_gamma,
            focal_alpha: if self.focal_alpha < 0.0 {
                None
            } else {
                Some(self.focal_alpha)
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: String,
    pub seed: Option<u64>,
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    /// "passthrough" or "seeded".
    #[serde(default = "default_weights")]
    pub weights: String,
    #[serde(default = "default_preset")]
    pub prompt_preset: String,
    /// Scene generator input (exactly one input source: this, or `input`
    /// for eval-only runs).
    pub scene: Option<SceneConfig>,
    /// Detection/ground-truth dump directory for eval-only mode.
    pub input: Option<PathBuf>,
    /// Optional prior cache substituting the generated priors (single-scene
    /// runs).
    pub priors_cache: Option<PathBuf>,
    /// Write the generated priors of scene 0 to `priors.fomp` in the output
    /// directory.
    #[serde(default)]
    pub dump_priors: bool,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub heatmap: HeatmapCorruption,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_mode() -> String {
    "e2e".into()
}

fn default_scenes() -> usize {
    1
}

fn default_weights() -> String {
    "passthrough".into()
}

fn default_preset() -> String {
    "nuscenes".into()
}

/// Parse a TOML value for an override string: bool, integer, float, then
/// bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .with_context(|| format!("override path '{path}': '{part}' is not a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    unreachable!("empty override path");
}

/// Load the config file, apply `--set` overrides, and return both the
/// parsed config and the resolved TOML text (the manifest hashes the
/// latter).
pub fn load(path: &Path, overrides: &[String]) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut value: toml::Value = text.parse().context("parsing config TOML")?;
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{item}'");
        };
        apply_override(&mut value, key.trim(), parse_override_value(raw.trim()))?;
    }
    let resolved = toml::to_string(&value).context("re-serializing resolved config")?;
    let config: RunConfig = value.try_into().context("deserializing run config")?;
    Ok((config, resolved))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[scene]
classes = [{ name = "child", count = 1, center_range = [[-5.0, 5.0], [8.0, 12.0]], size_min = [0.5, 0.5, 1.0], size_max = [0.6, 0.6, 1.2] }]
cameras = [{ position = [0.0, 0.0, 1.4], forward = [0.0, 1.0, 0.0], focal = 160.0, width = 96, height = 64 }]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        let (cfg, _) = load(&p, &[]).unwrap();
        assert_eq!(cfg.mode, "e2e");
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.scenes, 1);
        assert_eq!(cfg.pipeline.top_k, 500);
        assert_eq!(cfg.loss.weights().loss_xyz, 0.2);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        let (cfg, resolved) = load(
            &p,
            &[
                "pipeline.top_k=100".into(),
                "scene.noise.fp_rate=2.5".into(),
                "mode=proposals-only".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pipeline.top_k, 100);
        assert_eq!(cfg.scene.as_ref().unwrap().noise.fp_rate, 2.5);
        assert_eq!(cfg.mode, "proposals-only");
        assert!(resolved.contains("top_k = 100"));
    }

    #[test]
    fn bad_override_syntax_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        assert!(load(&p, &["no_equals_sign".into()]).is_err());
    }
}
