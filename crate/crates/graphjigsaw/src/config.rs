//! Run configuration: a TOML document with `model`, `jigsaw`, `train`, and `data` sections.

use std::path::{Path, PathBuf};

use graphjigsaw_core::backbone::BackboneConfig;
use graphjigsaw_core::training::{JigsawConfig, StageMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Default for `data.root` when neither the file nor an override sets it.
pub const DATA_ROOT_ENV: &str = "GRAPHJIGSAW_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub jigsaw: JigsawSection,
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub strides: Vec<usize>,
    pub input_resolution: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            strides: vec![2, 2, 2, 2],
            input_resolution: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageModeName {
    StageWiseProgressive,
    SingleStage,
    Simultaneous,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JigsawSection {
    #[serde(rename = "M", alias = "m")]
    pub grid: usize,
    pub t_enc: usize,
    pub t_dec: usize,
    pub lambda: f64,
    pub stage_mode: StageModeName,
    /// Used with `stage_mode = "single_stage"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

impl Default for JigsawSection {
    fn default() -> Self {
        let d = JigsawConfig::default();
        Self {
            grid: d.grid,
            t_enc: d.t_enc,
            t_dec: d.t_dec,
            lambda: d.lambda,
            stage_mode: StageModeName::StageWiseProgressive,
            stage: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: 20,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            seed: d.seed,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Fraction of each identity's images held out for validation.
    pub split: f64,
    pub min_images: usize,
    /// Side length images are resized to before cropping; defaults to `round(R·256/224)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resize: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            split: 0.0,
            min_images: 10,
            resize: None,
        }
    }
}

/// `(section.key, raw value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Split `--section.key value` and `--section.key=value` pairs out of an argument list.
pub fn extract_overrides(args: Vec<String>) -> AppResult<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--").filter(|b| b.contains('.')) else {
            rest.push(arg);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| AppError::Config(format!("override --{body} needs a value")))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl Config {
    /// Read `path` (or start from defaults), then apply dotted overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> AppResult<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(AppError::io(p))?;
                text.parse::<toml::Table>()
                    .map_err(|e| AppError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| AppError::Config(format!("override key {key} must be section.key")))?;
            let table = doc
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(table) = table else {
                return Err(AppError::Config(format!("{section} is not a section")));
            };
            table.insert(field.to_string(), parse_value(raw));
        }
        let mut config: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.message().to_string()))?;
        if config.data.root.is_none() {
            config.data.root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> AppResult<()> {
        if !(0.0..1.0).contains(&self.data.split) {
            return Err(AppError::Config(format!("data.split must be in [0, 1), got {}", self.data.split)));
        }
        if matches!(self.jigsaw.stage_mode, StageModeName::SingleStage) != self.jigsaw.stage.is_some() {
            return Err(AppError::Config(
                "jigsaw.stage is required with, and only with, stage_mode = \"single_stage\"".into(),
            ));
        }
        if self.data.resize.is_some_and(|r| r < self.model.input_resolution) {
            return Err(AppError::Config("data.resize must be at least model.input_resolution".into()));
        }
        let backbone = self.backbone(1);
        backbone.validate()?;
        self.train_config().validate(&backbone)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_root(&self) -> AppResult<&Path> {
        self.data
            .root
            .as_deref()
            .ok_or_else(|| AppError::Config(format!("data.root is not set (config, override, or {DATA_ROOT_ENV})")))
    }

    pub fn resize(&self) -> usize {
        self.data
            .resize
            .unwrap_or_else(|| (self.model.input_resolution as f64 * 256.0 / 224.0).round() as usize)
    }

    pub fn backbone(&self, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            input_channels: 3,
            input_resolution: self.model.input_resolution,
            widths: self.model.widths.clone(),
            blocks_per_stage: self.model.blocks_per_stage,
            strides: self.model.strides.clone(),
            num_classes,
        }
    }

    pub fn stage_mode(&self) -> StageMode {
        match self.jigsaw.stage_mode {
            StageModeName::StageWiseProgressive => StageMode::StageWiseProgressive,
            StageModeName::SingleStage => StageMode::SingleStage(self.jigsaw.stage.unwrap_or(0)),
            StageModeName::Simultaneous => StageMode::Simultaneous,
            StageModeName::Disabled => StageMode::Disabled,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            jigsaw: JigsawConfig {
                grid: self.jigsaw.grid,
                t_enc: self.jigsaw.t_enc,
                t_dec: self.jigsaw.t_dec,
                lambda: self.jigsaw.lambda,
                stage_mode: self.stage_mode(),
            },
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
        }
    }

    /// Whether models built from this config carry jigsaw heads.
    pub fn with_heads(&self) -> bool {
        self.train_config().jigsaw.enabled()
    }
}
