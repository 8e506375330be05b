//! Architecture configuration records and their JSON form.
//!
//! A config document is a JSON object with `schema_version: 1` and a `model`
//! discriminator (`"cednet"` when absent, or `"convnext"`). CEDNet documents
//! use the short field names `C`, `B`, `m` and `r`.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Hourglass,
    Unet,
    Fpn,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Hourglass, Style::Unet, Style::Fpn];
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Hourglass => "hourglass",
            Style::Unet => "unet",
            Style::Fpn => "fpn",
        })
    }
}

/// Dense mode exposes multi-scale features; classification mode drops the
/// last decoder and ends in a pooled linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Dense,
    Classification,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("{field} {msg}")]
    Field { field: String, msg: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u64),
}

impl ConfigError {
    fn field(field: &str, msg: impl Into<String>) -> Self {
        Self::Field { field: field.into(), msg: msg.into() }
    }

    /// Name of the offending field, when the error is attributable to one.
    pub fn field_name(&self) -> Option<&str> {
        match self {
            Self::Field { field, .. } => Some(field),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        Self::Syntax { line: e.line(), column: e.column(), msg: e.to_string() }
    }
}

/// CEDNet hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// c0 (stem, stride 4) then c1..c3 at strides 8/16/32.
    pub channels: [usize; 4],
    /// n0 stem blocks then n1..n3 blocks per level in every stage.
    pub blocks: [usize; 4],
    pub stages: usize,
    pub style: Style,
    pub dilation: usize,
    pub mlp_ratio: usize,
    /// Per-stage (n1, n2, n3) replacing `blocks[1..]`; one entry per stage.
    pub per_stage_override: Option<Vec<[usize; 3]>>,
    /// When false the stride-32 blocks are plain CED blocks.
    pub lr_blocks: bool,
    pub mode: Mode,
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn new(channels: [usize; 4], blocks: [usize; 4], stages: usize) -> Self {
        Self {
            channels,
            blocks,
            stages,
            style: Style::Fpn,
            dilation: 3,
            mlp_ratio: 4,
            per_stage_override: None,
            lr_blocks: true,
            mode: Mode::Dense,
            num_classes: 1000,
        }
    }

    pub fn cednet_t() -> Self {
        Self::new([96, 192, 352, 512], [3, 2, 4, 2], 3)
    }

    pub fn cednet_s() -> Self {
        Self::new([96, 192, 352, 512], [3, 2, 7, 2], 4)
    }

    pub fn cednet_b() -> Self {
        Self::new([128, 256, 448, 704], [3, 2, 7, 2], 4)
    }

    /// Small enough for finite-difference checks and toy training.
    pub fn tiny() -> Self {
        let mut c = Self::new([4, 8, 12, 16], [1, 1, 1, 1], 2);
        c.num_classes = 4;
        c
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_style(mut self, style: Style) -> Self {
        self.style = style;
        self
    }

    /// Block counts (n1, n2, n3) for stage `i` (zero-based).
    pub fn stage_blocks(&self, i: usize) -> [usize; 3] {
        match &self.per_stage_override {
            Some(v) => v[i],
            None => [self.blocks[1], self.blocks[2], self.blocks[3]],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.channels.contains(&0) {
            return Err(ConfigError::field("C", "entries must be >= 1"));
        }
        if self.blocks.contains(&0) {
            return Err(ConfigError::field("B", "entries must be >= 1"));
        }
        if self.stages == 0 {
            return Err(ConfigError::field("m", "must be >= 1"));
        }
        if self.dilation == 0 {
            return Err(ConfigError::field("r", "must be >= 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(ConfigError::field("mlp_ratio", "must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(ConfigError::field("num_classes", "must be >= 1"));
        }
        if let Some(o) = &self.per_stage_override {
            if o.len() != self.stages {
                return Err(ConfigError::field(
                    "per_stage_override",
                    format!("must have m = {} entries, got {}", self.stages, o.len()),
                ));
            }
            if o.iter().flatten().any(|&n| n == 0) {
                return Err(ConfigError::field("per_stage_override", "entries must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Extra pyramid levels and output convs of the FPN baseline neck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnConfig {
    pub channels: usize,
    /// 3×3 output conv on every merged level.
    #[serde(default = "yes")]
    pub output_convs: bool,
    /// Stride-2 3×3 convs stacked on the top level (P6, P7, ...).
    #[serde(default)]
    pub extra_levels: usize,
}

fn yes() -> bool {
    true
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self { channels: 256, output_convs: true, extra_levels: 2 }
    }
}

/// ConvNeXt backbone, optionally topped by an FPN neck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNextConfig {
    pub depths: [usize; 4],
    pub dims: [usize; 4],
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpn: Option<FpnConfig>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "thousand")]
    pub num_classes: usize,
}

fn four() -> usize {
    4
}

fn thousand() -> usize {
    1000
}

impl ConvNextConfig {
    pub fn tiny() -> Self {
        Self {
            depths: [3, 3, 9, 3],
            dims: [96, 192, 384, 768],
            mlp_ratio: 4,
            fpn: None,
            mode: Mode::Classification,
            num_classes: 1000,
        }
    }

    pub fn small() -> Self {
        Self { depths: [3, 3, 27, 3], ..Self::tiny() }
    }

    pub fn small_fpn() -> Self {
        Self { fpn: Some(FpnConfig::default()), mode: Mode::Dense, ..Self::small() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.depths.contains(&0) {
            return Err(ConfigError::field("depths", "entries must be >= 1"));
        }
        if self.dims.contains(&0) {
            return Err(ConfigError::field("dims", "entries must be >= 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(ConfigError::field("mlp_ratio", "must be >= 1"));
        }
        if let Some(f) = &self.fpn {
            if f.channels == 0 {
                return Err(ConfigError::field("fpn.channels", "must be >= 1"));
            }
            if self.mode == Mode::Classification {
                return Err(ConfigError::field("mode", "classification cannot be combined with fpn"));
            }
        }
        Ok(())
    }
}

/// Any buildable model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    CedNet(ArchConfig),
    ConvNext(ConvNextConfig),
}

impl ModelSpec {
    pub fn mode(&self) -> Mode {
        match self {
            Self::CedNet(c) => c.mode,
            Self::ConvNext(c) => c.mode,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    #[serde(rename = "C")]
    channels: Vec<usize>,
    #[serde(rename = "B")]
    blocks: Vec<usize>,
    m: usize,
    #[serde(default = "default_style")]
    style: Style,
    #[serde(default = "three")]
    r: usize,
    #[serde(default = "four")]
    mlp_ratio: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_stage_override: Option<Vec<Vec<usize>>>,
    #[serde(default = "yes")]
    lr_blocks: bool,
    #[serde(default)]
    mode: Mode,
    #[serde(default = "thousand")]
    num_classes: usize,
}

fn default_style() -> Style {
    Style::Fpn
}

fn three() -> usize {
    3
}

fn four_entries(field: &str, v: &[usize]) -> Result<[usize; 4], ConfigError> {
    v.try_into().map_err(|_| ConfigError::field(field, "must have 4 entries"))
}

impl TryFrom<RawArch> for ArchConfig {
    type Error = ConfigError;

    fn try_from(raw: RawArch) -> Result<Self, ConfigError> {
        let per_stage_override = match raw.per_stage_override {
            None => None,
            Some(rows) => Some(
                rows.iter()
                    .map(|r| {
                        <[usize; 3]>::try_from(r.as_slice())
                            .map_err(|_| ConfigError::field("per_stage_override", "rows must have 3 entries"))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let cfg = ArchConfig {
            channels: four_entries("C", &raw.channels)?,
            blocks: four_entries("B", &raw.blocks)?,
            stages: raw.m,
            style: raw.style,
            dilation: raw.r,
            mlp_ratio: raw.mlp_ratio,
            per_stage_override,
            lr_blocks: raw.lr_blocks,
            mode: raw.mode,
            num_classes: raw.num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&ArchConfig> for RawArch {
    fn from(c: &ArchConfig) -> Self {
        RawArch {
            channels: c.channels.to_vec(),
            blocks: c.blocks.to_vec(),
            m: c.stages,
            style: c.style,
            r: c.dilation,
            mlp_ratio: c.mlp_ratio,
            per_stage_override: c.per_stage_override.as_ref().map(|v| v.iter().map(|r| r.to_vec()).collect()),
            lr_blocks: c.lr_blocks,
            mode: c.mode,
            num_classes: c.num_classes,
        }
    }
}

/// Parses a config document into a model description.
pub fn parse_model(text: &str) -> Result<ModelSpec, ConfigError> {
    let value: Value = serde_json::from_str(text)?;
    model_from_value(value)
}

pub fn model_from_value(value: Value) -> Result<ModelSpec, ConfigError> {
    let Value::Object(mut obj) = value else {
        return Err(ConfigError::field("document", "must be a JSON object"));
    };
    match obj.remove("schema_version") {
        None => return Err(ConfigError::field("schema_version", "is required")),
        Some(v) => match v.as_u64() {
            Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(ConfigError::Version(other)),
            None => return Err(ConfigError::field("schema_version", "must be an integer")),
        },
    }
    let model = match obj.remove("model") {
        None => "cednet".to_string(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(ConfigError::field("model", "must be a string")),
    };
    let rest = Value::Object(obj);
    match model.as_str() {
        "cednet" => {
            let raw: RawArch = from_value(rest)?;
            Ok(ModelSpec::CedNet(raw.try_into()?))
        }
        "convnext" => {
            let cfg: ConvNextConfig = from_value(rest)?;
            cfg.validate()?;
            Ok(ModelSpec::ConvNext(cfg))
        }
        other => Err(ConfigError::field("model", format!("unknown model {other:?}"))),
    }
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // Unknown keys fail at the parent, so the path alone would be ".".
        let field = match path.as_str() {
            "." => inner.split('`').nth(1).unwrap_or("document").to_string(),
            _ => path,
        };
        ConfigError::Field { field, msg: format!("is invalid: {inner}") }
    })
}

/// Parses a CEDNet config; other model kinds are rejected.
pub fn parse_config(text: &str) -> Result<ArchConfig, ConfigError> {
    match parse_model(text)? {
        ModelSpec::CedNet(c) => Ok(c),
        ModelSpec::ConvNext(_) => Err(ConfigError::field("model", "expected a cednet config")),
    }
}

pub fn model_to_value(spec: &ModelSpec) -> Value {
    let (model, body) = match spec {
        ModelSpec::CedNet(c) => ("cednet", serde_json::to_value(RawArch::from(c))),
        ModelSpec::ConvNext(c) => ("convnext", serde_json::to_value(c)),
    };
    let Value::Object(body) = body.expect("config serializes") else {
        unreachable!("config serializes to an object")
    };
    let mut obj = Map::new();
    obj.insert("schema_version".into(), SCHEMA_VERSION.into());
    obj.insert("model".into(), model.into());
    obj.extend(body);
    Value::Object(obj)
}

pub fn serialize_model(spec: &ModelSpec) -> String {
    serde_json::to_string_pretty(&model_to_value(spec)).expect("config serializes")
}

pub fn serialize_config(cfg: &ArchConfig) -> String {
    serialize_model(&ModelSpec::CedNet(cfg.clone()))
}
