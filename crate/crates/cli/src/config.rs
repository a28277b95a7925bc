//! TOML run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tpo_core::hsi::{load_cube, load_labels, DatasetDescriptor, HsiCube, LabelRaster, SplitSpec, SyntheticSpec};
use tpo_core::sampler::SamplerConfig;
use tpo_core::train::{Experiment, ModelSettings, PreparedData, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    /// RGB per class id starting at 1; the default is 16 spread hues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<Vec<[u8; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_samples_per_class() -> usize {
    200
}

fn default_eval_batch() -> usize {
    256
}

/// Either a cube/label pair on disk or a generated scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cube: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// `pavia_university`, `indian_pines` or `salinas`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<PathBuf>,
    /// Fixed train/test split file; otherwise the split is drawn from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    #[default]
    Blocks,
    Striped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default)]
    pub pattern: Pattern,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PatchSize,
    RValue,
    SamplesPerClass,
    Views,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PatchSize => "patch_size",
            SweepAxis::RValue => "r_value",
            SweepAxis::SamplesPerClass => "samples_per_class",
            SweepAxis::Views => "views",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Runs per cell; more than one reports means and standard deviations.
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_runs() -> usize {
    1
}

/// A parsed config plus the directory its relative paths are resolved against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
    pub hash: String,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    /// SHA-256 over the canonical form: parsed, defaults filled in, keys sorted.
    pub fn hash(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serialises");
        let canonical = toml::to_string(&value).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn experiment(&self, threads: usize) -> Experiment {
        Experiment {
            model: self.model.clone(),
            sampler: self.sampler,
            samples_per_class: self.samples_per_class,
            train: self.train.clone(),
            eval_batch: self.eval_batch,
            threads,
        }
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let config = RunConfig::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let hash = config.hash();
        let loaded = Self { config, base, hash };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let d = &c.data;
        match (&d.synthetic, &d.cube, &d.labels) {
            (Some(_), None, None) => {}
            (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => return Err(CliError::config("data: give either synthetic or cube/labels, not both")),
            _ => return Err(CliError::config("data: both cube and labels are required")),
        }
        if d.preset.is_some() && d.descriptor.is_some() {
            return Err(CliError::config("data: give either preset or descriptor, not both"));
        }
        if let Some(p) = &d.preset {
            preset(p)?;
        }
        for p in [&d.cube, &d.labels, &d.descriptor, &d.split].into_iter().flatten() {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(CliError::config(format!("file not found: {}", full.display())));
            }
        }
        c.sampler.validate()?;
        c.train.validate()?;
        if c.samples_per_class == 0 || c.eval_batch == 0 {
            return Err(CliError::config("samples_per_class and eval_batch must be at least 1"));
        }
        if let Some(s) = &c.sweep {
            if s.values.is_empty() || s.runs == 0 {
                return Err(CliError::config("sweep needs at least one value and one run"));
            }
        }
        if let Some(p) = &c.palette {
            for (i, a) in p.iter().enumerate() {
                if *a == [0, 0, 0] || p[..i].contains(a) {
                    return Err(CliError::config(format!(
                        "palette colour {} is black or repeated",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Raw cube, raw labels and the descriptor to apply to them.
    pub fn raw_data(&self) -> Result<(HsiCube, LabelRaster, DatasetDescriptor), CliError> {
        let d = &self.config.data;
        let (cube, labels, name) = if let Some(s) = &d.synthetic {
            let spec = match s.pattern {
                Pattern::Blocks => SyntheticSpec::blocks(s.height, s.width, s.bands, s.classes),
                Pattern::Striped => SyntheticSpec::striped(s.height, s.width, s.bands, s.classes),
            };
            let (c, l) = spec.generate(s.seed)?;
            (c, l, "synthetic".to_string())
        } else {
            let cube_path = self.resolve(d.cube.as_ref().expect("validated"));
            let cube = load_cube(&cube_path).map_err(|e| e.context(cube_path.display()))?;
            let label_path = self.resolve(d.labels.as_ref().expect("validated"));
            let labels = load_labels(&label_path).map_err(|e| e.context(label_path.display()))?;
            let name = cube_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (cube, labels, name)
        };
        if !labels.matches(&cube) {
            return Err(CliError::config(format!(
                "labels are {}×{} but the cube is {}×{}",
                labels.height(),
                labels.width(),
                cube.height(),
                cube.width()
            )));
        }
        let desc = match (&d.preset, &d.descriptor) {
            (Some(p), _) => preset(p)?,
            (_, Some(path)) => DatasetDescriptor::load(&self.resolve(path))?,
            _ => DatasetDescriptor::unnamed(&name, labels.max_label() as usize),
        };
        desc.validate(cube.bands())?;
        Ok((cube, labels, desc))
    }

    pub fn prepared(&self) -> Result<PreparedData, CliError> {
        let (cube, labels, desc) = self.raw_data()?;
        Ok(PreparedData::prepare(&cube, &labels, desc)?)
    }

    pub fn fixed_split(&self) -> Result<Option<SplitSpec>, CliError> {
        match &self.config.data.split {
            Some(p) => Ok(Some(SplitSpec::load(&self.resolve(p))?)),
            None => Ok(None),
        }
    }
}

fn preset(name: &str) -> Result<DatasetDescriptor, CliError> {
    match name {
        "pavia_university" => Ok(DatasetDescriptor::pavia_university()),
        "indian_pines" => Ok(DatasetDescriptor::indian_pines()),
        "salinas" => Ok(DatasetDescriptor::salinas()),
        _ => Err(CliError::config(format!("unknown dataset preset {name:?}"))),
    }
}
