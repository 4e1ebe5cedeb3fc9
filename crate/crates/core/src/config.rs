//! Run configuration read from TOML with `[model]`, `[adapter]`, `[train]`
//! and `[data]` sections.

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::petl::AdapterSpec;
use crate::vit::ViTConfig;

pub const SECTIONS: &[&str] = &["model", "adapter", "train", "data"];

const MODEL_FIELDS: &[&str] = &["depth", "dim", "heads", "img", "patch", "mlp_ratio"];
const TRAIN_REQUIRED: &[&str] = &["lr_max", "lr_min", "epochs", "batch_size"];
const DATA_REQUIRED: &[&str] = &["kind", "n_classes", "n_train", "n_test"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub vit: ViTConfig,
    /// Seed of the random frozen backbone.
    pub seed: u64,
}

/// A parsed and validated run config. Sections a command does not need may be absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DatasetSpec>,
}

fn missing(table: &Table, section: &str, keys: &[&str], out: &mut Vec<String>) {
    for k in keys {
        if !table.contains_key(*k) {
            out.push(format!("missing {section}.{k}"));
        }
    }
}

fn decode<D: DeserializeOwned>(table: Table, section: &str, errs: &mut Vec<String>) -> Option<D> {
    match Value::Table(table).try_into() {
        Ok(v) => Some(v),
        Err(e) => {
            errs.push(format!("[{section}]: {}", e.to_string().trim()));
            None
        }
    }
}

fn adapter_required(kind: &str) -> &'static [&'static str] {
    match kind {
        "vpt" => &["mode", "prompts"],
        "adapter" => &["d_prime"],
        "adaptformer" => &["d_prime", "scale"],
        "lora" => &["rank"],
        "dtl" | "dtl+" => &["d_prime", "m"],
        _ => &[],
    }
}

fn data_required(kind: &str) -> &'static [&'static str] {
    match kind {
        "synthetic_planted" => &["shift_strength"],
        "image_folder" => &["path", "labels_csv"],
        _ => &[],
    }
}

fn model_section(mut t: Table, errs: &mut Vec<String>) -> Option<ModelSection> {
    let seed = match t.remove("seed") {
        None => 0,
        Some(Value::Integer(s)) if s >= 0 => s as u64,
        Some(other) => {
            errs.push(format!("model.seed must be a non-negative integer, got {other}"));
            0
        }
    };
    let base = match t.remove("preset") {
        None => {
            missing(&t, "model", MODEL_FIELDS, errs);
            Table::new()
        }
        Some(Value::String(name)) => {
            let preset = match name.as_str() {
                "toy" => ViTConfig::toy(),
                "micro" => ViTConfig::micro(),
                "base" => ViTConfig::base(),
                other => {
                    errs.push(format!("model.preset {other:?} is not one of toy, micro, base"));
                    return None;
                }
            };
            Table::try_from(preset).expect("config serialises to a table")
        }
        Some(other) => {
            errs.push(format!("model.preset must be a string, got {other}"));
            return None;
        }
    };
    let mut merged = base;
    merged.extend(t);
    let vit: ViTConfig = decode(merged, "model", errs)?;
    if let Err(Error::Config(items)) = vit.validate() {
        errs.extend(items);
        return None;
    }
    Some(ModelSection { vit, seed })
}

impl RunConfig {
    /// Parses `text`, requiring every section in `needs`. All problems found
    /// are reported together, missing keys as `section.key`.
    pub fn parse(text: &str, needs: &[&str]) -> Result<Self> {
        let mut root: Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
        let mut errs = Vec::new();
        for k in root.keys() {
            if !SECTIONS.contains(&k.as_str()) {
                errs.push(format!("unknown section [{k}]"));
            }
        }
        let mut take = |name: &str, errs: &mut Vec<String>| -> Option<Table> {
            match root.remove(name) {
                Some(Value::Table(t)) => Some(t),
                Some(_) => {
                    errs.push(format!("{name} must be a table"));
                    None
                }
                None => {
                    if name == "model" || needs.contains(&name) {
                        errs.push(format!("missing section [{name}]"));
                    }
                    None
                }
            }
        };
        let model = take("model", &mut errs).and_then(|t| model_section(t, &mut errs));

        let adapter = take("adapter", &mut errs).and_then(|t| {
            let kind = t.get("kind").and_then(Value::as_str).map(str::to_string);
            match kind {
                None => {
                    errs.push("missing adapter.kind".into());
                    None
                }
                Some(kind) => {
                    let before = errs.len();
                    missing(&t, "adapter", adapter_required(&kind), &mut errs);
                    if errs.len() > before {
                        return None;
                    }
                    decode::<AdapterSpec>(t, "adapter", &mut errs)
                }
            }
        });

        let train = take("train", &mut errs).and_then(|t| {
            let before = errs.len();
            missing(&t, "train", TRAIN_REQUIRED, &mut errs);
            let mut full = Table::try_from(TrainConfig::default()).expect("config serialises to a table");
            full.extend(t);
            let cfg: TrainConfig = decode(full, "train", &mut errs)?;
            if errs.len() > before {
                return None;
            }
            if let Err(Error::Config(items)) = cfg.validate() {
                errs.extend(items);
                return None;
            }
            Some(cfg)
        });

        let data = take("data", &mut errs).and_then(|t| {
            let before = errs.len();
            missing(&t, "data", DATA_REQUIRED, &mut errs);
            if let Some(kind) = t.get("kind").and_then(Value::as_str) {
                missing(&t, "data", data_required(kind), &mut errs);
            }
            if errs.len() > before {
                return None;
            }
            let spec: DatasetSpec = decode(t, "data", &mut errs)?;
            if let Err(Error::Config(items)) = spec.validate() {
                errs.extend(items);
                return None;
            }
            Some(spec)
        });

        if let (Some(model), Some(spec)) = (&model, &adapter) {
            if let Err(Error::Config(items)) = spec.validate(&model.vit) {
                errs.extend(items);
            }
        }
        match model {
            Some(model) if errs.is_empty() => Ok(Self { model, adapter, train, data }),
            _ => Err(Error::Config(errs)),
        }
    }

    /// The resolved config as TOML, with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }
}
