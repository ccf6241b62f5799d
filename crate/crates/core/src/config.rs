//! Dotted-key overrides (`optim.lr0=0.01`) for [`TrainConfig`] and
//! [`DatasetSpec`], and loading either from a JSON file.
//!
//! A config file is either a full JSON object of the target type or a flat
//! object of dotted keys; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::dataio::DatasetSpec;
use crate::error::{Error, Result};
use crate::trainer::{Seeds, TrainConfig};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::invalid(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|v| parse(key, v))
        .collect()
}

pub const TRAIN_KEYS: &[&str] = &[
    "mode",
    "strategy",
    "gamma",
    "fraction",
    "labeled_batch",
    "unlabeled_batch",
    "eval_every",
    "infer_branch",
    "max_iter",
    "optim.lr0",
    "optim.momentum",
    "optim.weight_decay",
    "optim.poly_power",
    "optim.max_iter",
    "seed",
    "seed.net_c",
    "seed.net_p",
    "seed.data",
    "seed.augment",
    "data.train_samples",
    "data.val_samples",
    "data.height",
    "data.width",
    "data.num_classes",
    "data.noise_sigma",
    "network.hidden",
    "cutmix.num_rects",
    "cutmix.area_ratio_min",
    "cutmix.area_ratio_max",
    "cutmix.aspect_min",
    "cutmix.aspect_max",
];

pub const DATASET_KEYS: &[&str] = &["num_samples", "height", "width", "num_classes", "noise_sigma", "rng_seed"];

fn unknown(key: &str, known: &[&str]) -> Error {
    Error::invalid(format!("unknown config key '{key}' (known: {})", known.join(", ")))
}

/// Applies one `key=value` override. `seed` resets all four seeds from a base.
pub fn set_train(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "mode" => cfg.mode = parse(key, value)?,
        "strategy" => cfg.strategy = parse(key, value)?,
        "gamma" => cfg.gamma = parse(key, value)?,
        "fraction" => cfg.fraction = parse(key, value)?,
        "labeled_batch" => cfg.labeled_batch = parse(key, value)?,
        "unlabeled_batch" => cfg.unlabeled_batch = parse(key, value)?,
        "eval_every" => cfg.eval_every = parse(key, value)?,
        "infer_branch" => cfg.infer_branch = parse(key, value)?,
        "max_iter" | "optim.max_iter" => cfg.optim.max_iter = parse(key, value)?,
        "optim.lr0" => cfg.optim.lr0 = parse(key, value)?,
        "optim.momentum" => cfg.optim.momentum = parse(key, value)?,
        "optim.weight_decay" => cfg.optim.weight_decay = parse(key, value)?,
        "optim.poly_power" => cfg.optim.poly_power = parse(key, value)?,
        "seed" => cfg.seeds = Seeds::from_base(parse(key, value)?),
        "seed.net_c" => cfg.seeds.net_c = parse(key, value)?,
        "seed.net_p" => cfg.seeds.net_p = parse(key, value)?,
        "seed.data" => cfg.seeds.data = parse(key, value)?,
        "seed.augment" => cfg.seeds.augment = parse(key, value)?,
        "data.train_samples" => cfg.data.train_samples = parse(key, value)?,
        "data.val_samples" => cfg.data.val_samples = parse(key, value)?,
        "data.height" => cfg.data.height = parse(key, value)?,
        "data.width" => cfg.data.width = parse(key, value)?,
        "data.num_classes" => cfg.data.num_classes = parse(key, value)?,
        "data.noise_sigma" => cfg.data.noise_sigma = parse(key, value)?,
        "network.hidden" => cfg.hidden = parse_list(key, value)?,
        "cutmix.num_rects" => cfg.cutmix.num_rects = parse(key, value)?,
        "cutmix.area_ratio_min" => cfg.cutmix.area_ratio_min = parse(key, value)?,
        "cutmix.area_ratio_max" => cfg.cutmix.area_ratio_max = parse(key, value)?,
        "cutmix.aspect_min" => cfg.cutmix.aspect_min = parse(key, value)?,
        "cutmix.aspect_max" => cfg.cutmix.aspect_max = parse(key, value)?,
        _ => return Err(unknown(key, TRAIN_KEYS)),
    }
    Ok(())
}

pub fn set_dataset(spec: &mut DatasetSpec, key: &str, value: &str) -> Result<()> {
    match key {
        "num_samples" => spec.num_samples = parse(key, value)?,
        "height" => spec.height = parse(key, value)?,
        "width" => spec.width = parse(key, value)?,
        "num_classes" => spec.num_classes = parse(key, value)?,
        "noise_sigma" => spec.noise_sigma = parse(key, value)?,
        "rng_seed" => spec.rng_seed = parse(key, value)?,
        _ => return Err(unknown(key, DATASET_KEYS)),
    }
    Ok(())
}

/// Splits `key=value`.
pub fn split_assignment(assignment: &str) -> Result<(&str, &str)> {
    assignment
        .split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::invalid(format!("expected key=value, got '{assignment}'")))
}

fn scalar_text(key: &str, value: &Value) -> Result<String> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|v| scalar_text(key, v))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.join(",")),
        _ => Err(Error::invalid(format!("{key}: expected a scalar or list value"))),
    }
}

/// Applies a flat object of dotted keys in order, with `seed` first so the
/// specific seed keys can refine it.
fn apply_flat<T>(
    target: &mut T,
    map: &serde_json::Map<String, Value>,
    set: fn(&mut T, &str, &str) -> Result<()>,
) -> Result<()> {
    let mut keys: Vec<&String> = map.keys().collect();
    keys.sort_by_key(|k| (k.as_str() != "seed", k.as_str()));
    for k in keys {
        set(target, k, &scalar_text(k, &map[k.as_str()])?)?;
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn load_with<T: DeserializeOwned + Default>(
    path: &Path,
    set: fn(&mut T, &str, &str) -> Result<()>,
) -> Result<T> {
    let value = read_json(path)?;
    let Value::Object(map) = &value else {
        return Err(Error::format(path, "config must be a JSON object"));
    };
    let nested = map.values().any(|v| v.is_object());
    if nested {
        return serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()));
    }
    let mut cfg = T::default();
    apply_flat(&mut cfg, map, set).map_err(|e| match e {
        Error::InvalidInput(m) => Error::format(path, m),
        other => other,
    })?;
    Ok(cfg)
}

/// Loads a training config: a full nested object (as echoed in `config.json`)
/// or a flat object of override keys applied to the defaults.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    load_with(path, set_train)
}

pub fn load_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    load_with(path, set_dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Fraction;
    use crate::trainer::Mode;

    #[test]
    fn overrides_parse_typed_values() {
        let mut cfg = TrainConfig::default();
        set_train(&mut cfg, "mode", "union-only").unwrap();
        set_train(&mut cfg, "fraction", "1/16").unwrap();
        set_train(&mut cfg, "network.hidden", "8,4").unwrap();
        set_train(&mut cfg, "optim.lr0", "0.01").unwrap();
        assert_eq!(cfg.mode, Mode::UnionOnly);
        assert_eq!(cfg.fraction, Fraction::Sixteenth);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.optim.lr0, 0.01);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        let err = set_train(&mut cfg, "optim.lr", "0.1").unwrap_err().to_string();
        assert!(err.contains("optim.lr"), "{err}");
        let err = set_train(&mut cfg, "fraction", "1/3").unwrap_err().to_string();
        assert!(err.contains("fraction"), "{err}");
        assert!(split_assignment("gamma").is_err());
        assert_eq!(split_assignment(" gamma = 2 ").unwrap(), ("gamma", "2"));
    }

    #[test]
    fn flat_file_applies_base_seed_before_specific_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed.net_p": 99, "seed": 5, "gamma": 0.5, "network.hidden": [4, 4]}"#).unwrap();
        let cfg = load_train_config(&path).unwrap();
        let base = Seeds::from_base(5);
        assert_eq!(cfg.seeds.net_c, base.net_c);
        assert_eq!(cfg.seeds.net_p, 99);
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.hidden, vec![4, 4]);
    }

    #[test]
    fn nested_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut cfg = TrainConfig::default();
        cfg.gamma = 0.25;
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(load_train_config(&path).unwrap(), cfg);
    }

    #[test]
    fn dataset_keys() {
        let mut spec = DatasetSpec::default();
        set_dataset(&mut spec, "noise_sigma", "0").unwrap();
        assert_eq!(spec.noise_sigma, 0.0);
        assert!(set_dataset(&mut spec, "sigma", "0").is_err());
    }
}
