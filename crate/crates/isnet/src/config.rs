//! Plain `key = value` configuration files with `#` comments. Unknown keys
//! are hard errors; silent typos have ruined enough training runs.

use crate::data::DatasetSpec;
use crate::error::{IsnetError, Result};
use crate::model::Variant;
use crate::train::TrainConfig;
use std::path::PathBuf;

/// Raw pairs in file order, comments and blank lines stripped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(IsnetError::usage(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| IsnetError::usage(format!("cannot parse {key} = '{value}'")))
}

/// Dataset spec file. When any `co.<i>.<j>` key appears the co-occurrence
/// table is built from those keys alone; otherwise the desk default table is
/// used (and requires the default class count).
pub fn parse_dataset_spec(text: &str) -> Result<DatasetSpec> {
    let defaults = DatasetSpec::desk(0, 0);
    let (mut seed, mut count) = (defaults.seed, 512usize);
    let (mut height, mut width) = (defaults.height, defaults.width);
    let mut k = defaults.k;
    let mut sigma = defaults.sigma;
    let mut co_entries: Vec<(usize, usize, f64)> = Vec::new();
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "seed" => seed = parse_value(&key, &value)?,
            "count" => count = parse_value(&key, &value)?,
            "height" => height = parse_value(&key, &value)?,
            "width" => width = parse_value(&key, &value)?,
            "classes" => k = parse_value(&key, &value)?,
            "sigma" => sigma = parse_value(&key, &value)?,
            _ => {
                if let Some(rest) = key.strip_prefix("co.") {
                    let Some((i, j)) = rest.split_once('.') else {
                        return Err(IsnetError::usage(format!(
                            "co-occurrence key '{key}' must look like co.<i>.<j>"
                        )));
                    };
                    co_entries.push((
                        parse_value(&key, i)?,
                        parse_value(&key, j)?,
                        parse_value(&key, &value)?,
                    ));
                } else {
                    return Err(IsnetError::usage(format!("unknown dataset key '{key}'")));
                }
            }
        }
    }
    let co = if co_entries.is_empty() {
        if k != defaults.k {
            return Err(IsnetError::usage(format!(
                "classes = {k} needs explicit co.<i>.<j> entries (defaults cover {} classes)",
                defaults.k
            )));
        }
        defaults.co
    } else {
        let mut co = vec![vec![0.0; k]; k];
        for (i, j, p) in co_entries {
            if i >= k || j >= k {
                return Err(IsnetError::usage(format!(
                    "co.{i}.{j} outside the {k}-class table"
                )));
            }
            co[i][j] = p;
        }
        co
    };
    DatasetSpec::new(seed, count, height, width, k, sigma, co)
}

/// Training config file; `data_root` is required.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::desk(Variant::Isnet, PathBuf::new(), PathBuf::from("out"));
    let mut saw_data_root = false;
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "variant" => config.model.variant = Variant::parse(&value)?,
            "seed" => config.model.seed = parse_value(&key, &value)?,
            "channels" => config.model.c = parse_value(&key, &value)?,
            "classes" => config.model.k = parse_value(&key, &value)?,
            "alpha" => config.model.alpha = parse_value(&key, &value)?,
            "dropout" => config.model.dropout = parse_value(&key, &value)?,
            "aux_hidden" => config.model.aux_hidden = parse_value(&key, &value)?,
            "attention_cap" => config.model.attention_cap = parse_value(&key, &value)?,
            "lr" => config.lr = parse_value(&key, &value)?,
            "weight_decay" => config.weight_decay = parse_value(&key, &value)?,
            "momentum" => config.momentum = parse_value(&key, &value)?,
            "batch_size" => config.batch_size = parse_value(&key, &value)?,
            "total_iters" => config.total_iters = parse_value(&key, &value)?,
            "crop" => config.crop = parse_value(&key, &value)?,
            "eval_interval" => config.eval_interval = parse_value(&key, &value)?,
            "data_root" => {
                config.data_root = PathBuf::from(&value);
                saw_data_root = true;
            }
            "out_dir" => config.out_dir = PathBuf::from(&value),
            _ => return Err(IsnetError::usage(format!("unknown training key '{key}'"))),
        }
    }
    if !saw_data_root {
        return Err(IsnetError::usage("training config must set data_root"));
    }
    config.validate()?;
    Ok(config)
}
