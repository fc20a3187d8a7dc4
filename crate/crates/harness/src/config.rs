//! Experiment configuration: one TOML file (or CLI flags) fully determines an
//! experiment. When both a config file and flags are given, the file wins and
//! each overridden flag produces an explicit warning.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rdc_core::attack::{AttackConfig, AttackTarget};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Eot,
    Fda,
}

/// One attack condition in the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    /// Condition label used in reports.
    pub name: String,
    pub kind: AttackKind,
    pub target: AttackTarget,
    pub eps: f32,
    pub alpha: f32,
    pub iters: usize,
    /// Transform samples per step (EoT only).
    pub eot_samples: usize,
    /// Restrict this condition to the first N dataset images (0 = all);
    /// expensive attacks document their subset this way.
    pub limit: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            name: "vanilla".into(),
            kind: AttackKind::Pgd,
            target: AttackTarget::Rd,
            eps: 4.0 / 255.0,
            alpha: 2.0 / 255.0,
            iters: 50,
            eot_samples: 0,
            limit: 0,
        }
    }
}

impl AttackSpec {
    pub fn to_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            eps: self.eps,
            alpha: self.alpha,
            iters: self.iters,
            target: self.target,
            eot_samples: match self.kind {
                AttackKind::Eot => self.eot_samples,
                _ => 0,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DefenseMode {
    None,
    NaiveRandom,
    KWay { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads for image-level parallelism (0 = one per core).
    pub workers: usize,
    pub center_crop: Option<u32>,
    /// Use only the first N dataset images (0 = all).
    pub max_images: usize,
    /// Attack conditions; the clean condition is always evaluated too.
    pub attacks: Vec<AttackSpec>,
    /// The defended column of the grid (plain and naive are always included).
    pub defense: DefenseMode,
    /// Extra K values tabulated for the selection defense.
    pub kway_grid: Vec<usize>,
    pub histogram_bins: usize,
    /// Epsilon values for the vulnerability sweep (alpha = eps/2 each).
    pub sweep_eps: Vec<f32>,
    pub sweep_iters: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            checkpoint: "model.rdsc".into(),
            dataset: "fixtures".into(),
            output_dir: "out".into(),
            seed: 7,
            workers: 0,
            center_crop: None,
            max_images: 0,
            attacks: vec![
                AttackSpec::default(),
                AttackSpec {
                    name: "eot".into(),
                    kind: AttackKind::Eot,
                    eot_samples: 24,
                    iters: 25,
                    limit: 6,
                    ..AttackSpec::default()
                },
                AttackSpec {
                    name: "fda".into(),
                    kind: AttackKind::Fda,
                    iters: 25,
                    ..AttackSpec::default()
                },
            ],
            defense: DefenseMode::KWay { k: 2 },
            kway_grid: vec![1, 2, 4, 8],
            histogram_bins: 10,
            sweep_eps: vec![1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
            sweep_iters: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Scalar flags that may also appear in a config file.
#[derive(Debug, Default, Clone)]
pub struct CliOverrides {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub center_crop: Option<u32>,
    pub max_images: Option<usize>,
}

/// Resolves the effective config. Without a file, flags override the
/// defaults. With a file, the file wins every conflict and each shadowed flag
/// yields a warning line.
pub fn resolve(file: Option<ExperimentConfig>, cli: &CliOverrides) -> (ExperimentConfig, Vec<String>) {
    let mut warnings = Vec::new();
    match file {
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Some(v) = &cli.checkpoint {
                cfg.checkpoint = v.clone();
            }
            if let Some(v) = &cli.dataset {
                cfg.dataset = v.clone();
            }
            if let Some(v) = &cli.output_dir {
                cfg.output_dir = v.clone();
            }
            if let Some(v) = cli.seed {
                cfg.seed = v;
            }
            if let Some(v) = cli.workers {
                cfg.workers = v;
            }
            if cli.center_crop.is_some() {
                cfg.center_crop = cli.center_crop;
            }
            if let Some(v) = cli.max_images {
                cfg.max_images = v;
            }
            (cfg, warnings)
        }
        Some(cfg) => {
            let mut shadow = |name: &str, flag: Option<String>, file_val: String| {
                if let Some(f) = flag {
                    if f != file_val {
                        warnings.push(format!(
                            "--{name} {f} shadowed by the config file value {file_val}"
                        ));
                    }
                }
            };
            shadow(
                "checkpoint",
                cli.checkpoint.as_ref().map(|p| p.display().to_string()),
                cfg.checkpoint.display().to_string(),
            );
            shadow(
                "dataset",
                cli.dataset.as_ref().map(|p| p.display().to_string()),
                cfg.dataset.display().to_string(),
            );
            shadow(
                "output-dir",
                cli.output_dir.as_ref().map(|p| p.display().to_string()),
                cfg.output_dir.display().to_string(),
            );
            shadow("seed", cli.seed.map(|v| v.to_string()), cfg.seed.to_string());
            shadow(
                "workers",
                cli.workers.map(|v| v.to_string()),
                cfg.workers.to_string(),
            );
            shadow(
                "center-crop",
                cli.center_crop.map(|v| v.to_string()),
                cfg.center_crop.map_or("none".into(), |v| v.to_string()),
            );
            shadow(
                "max-images",
                cli.max_images.map(|v| v.to_string()),
                cfg.max_images.to_string(),
            );
            (cfg, warnings)
        }
    }
}

/// Parses "4/255" fractions or plain decimals into a pixel-unit value.
pub fn parse_pixel_fraction(s: &str) -> Result<f32> {
    let v = match s.split_once('/') {
        Some((num, den)) => {
            let n: f32 = num.trim().parse().context("fraction numerator")?;
            let d: f32 = den.trim().parse().context("fraction denominator")?;
            anyhow::ensure!(d != 0.0, "zero denominator in {s}");
            n / d
        }
        None => s.trim().parse().context("pixel value")?,
    };
    anyhow::ensure!(v.is_finite(), "non-finite pixel value {s}");
    Ok(v)
}
