//! The JSON run configuration: `model`, `data` and `train` sections, every
//! field optional.

use std::fs;
use std::path::{Path, PathBuf};

use dgcnet::hsi::SplitRatio;
use dgcnet::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    train: TrainConfig,
}

/// A preset name plus field overrides. Missing `input_extent` and
/// `num_classes` are taken from the cube and patch size when a cube is set.
#[derive(Debug, Default, Deserialize)]
struct ModelSection {
    variant: Option<String>,
    #[serde(flatten)]
    overrides: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// HSIC cube; relative paths resolve against the config file.
    pub cube: Option<PathBuf>,
    /// Odd spatial patch size.
    pub patch: usize,
    pub ratio: SplitRatio,
    /// Defaults to the training seed.
    pub split_seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            cube: None,
            patch: 11,
            ratio: SplitRatio::new(6, 1, 3).expect("valid ratio"),
            split_seed: None,
        }
    }
}

/// Fully materialized configuration, as recorded in manifests. It is itself a
/// valid config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainConfig,
}

impl Resolved {
    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.expect("resolved configs carry a split seed")
    }
}

/// Cube facts the model section may inherit.
pub struct CubeShape {
    pub bands: usize,
    pub classes: usize,
}

/// Reads a config file, or the `config` of a manifest written by a previous
/// command.
pub fn read(path: &Path) -> Result<(Value, PathBuf), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    if doc.get("tool").and_then(Value::as_str) == Some(crate::manifest::TOOL) {
        doc = doc
            .get_mut("config")
            .map(Value::take)
            .ok_or_else(|| CliError::Usage(format!("{}: manifest has no config", path.display())))?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((doc, base))
}

fn schema_error<E: std::fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> CliError {
    let path = e.path().to_string();
    let field = match (prefix, path.as_str()) {
        ("", p) => p.to_string(),
        (pre, ".") => pre.to_string(),
        (pre, p) => format!("{pre}.{p}"),
    };
    CliError::Usage(format!("config field `{field}`: {}", e.inner()))
}

/// Parses the document and applies the `--seed` override. The cube is not
/// read here; see [`finish`].
pub fn parse(doc: Value, base: &Path, seed: Option<u64>) -> Result<Partial, CliError> {
    let file: ConfigFile = serde_path_to_error::deserialize(doc).map_err(|e| schema_error("", e))?;
    let mut data = file.data;
    if let Some(cube) = &data.cube {
        if cube.is_relative() {
            data.cube = Some(base.join(cube));
        }
    }
    if data.patch % 2 == 0 {
        return Err(CliError::Usage(format!("config field `data.patch`: {} is not odd", data.patch)));
    }
    let mut train = file.train;
    if let Some(s) = seed {
        train.seed = s;
    }
    train
        .validate()
        .map_err(|e| CliError::Usage(format!("config section `train`: {e}")))?;
    let preset = match &file.model.variant {
        None => ModelConfig::small(),
        Some(v) => ModelConfig::named(v).ok_or_else(|| {
            CliError::Usage(format!("config field `model.variant`: unknown variant `{v}` (small, base, large)"))
        })?,
    };
    Ok(Partial {
        preset,
        overrides: file.model.overrides,
        data,
        train,
    })
}

pub struct Partial {
    preset: ModelConfig,
    overrides: Map<String, Value>,
    pub data: DataSection,
    pub train: TrainConfig,
}

impl Partial {
    /// Merges the model overrides over the preset, filling extent and class
    /// count from `cube` when the config leaves them out.
    pub fn finish(self, cube: Option<&CubeShape>) -> Result<Resolved, CliError> {
        let mut merged = serde_json::to_value(&self.preset).expect("model config serializes");
        let fields = merged.as_object_mut().expect("struct serializes to an object");
        for (k, v) in &self.overrides {
            fields.insert(k.clone(), v.clone());
        }
        if let Some(c) = cube {
            let p = self.data.patch;
            let extent = [c.bands, p, p];
            if !self.overrides.contains_key("input_extent") {
                fields.insert("input_extent".into(), serde_json::json!(extent));
            }
            if !self.overrides.contains_key("num_classes") {
                fields.insert("num_classes".into(), serde_json::json!(c.classes));
            }
        }
        // unknown keys are caught here, with their path
        let model: ModelConfig = serde_path_to_error::deserialize(merged).map_err(|e| schema_error("model", e))?;
        model
            .validate()
            .map_err(|e| CliError::Usage(format!("config section `model`: {e}")))?;
        if let Some(c) = cube {
            check_extents(&model, c.bands, self.data.patch, c.classes)?;
        }
        let mut data = self.data;
        data.split_seed.get_or_insert(self.train.seed);
        Ok(Resolved {
            model,
            data,
            train: self.train,
        })
    }
}

/// Errors name every axis on which a model disagrees with the data.
pub fn check_extents(model: &ModelConfig, bands: usize, patch: usize, classes: usize) -> Result<(), CliError> {
    let [b, r, c] = model.input_extent;
    let mut bad = Vec::new();
    for (axis, want, got) in [
        ("bands", bands, b),
        ("rows", patch, r),
        ("cols", patch, c),
        ("classes", classes, model.num_classes),
    ] {
        if want != got {
            bad.push(format!("{axis}: model {got}, data {want}"));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("model does not fit the data ({})", bad.join("; "))))
    }
}
