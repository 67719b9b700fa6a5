//! Run configuration: an optional TOML file, then `--section.field value`
//! overrides, then the shorthand flags.

use std::path::Path;

use anyhow::{Context, Result};
use uacal::experiment::RunConfig;

use crate::error::CliError;

pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` and `--a.b=value` pairs out of the raw arguments.
/// Everything else is returned untouched for clap.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// TOML scalar if `raw` parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets the dotted `key` of `config`. The key must name an existing field.
pub fn apply_override(config: &RunConfig, key: &str, raw: &str) -> Result<RunConfig> {
    let mut root = toml::Value::try_from(config).context("serializing config")?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("{} is not a section", parts[..depth].join("."))))?;
        node = table.get_mut(*part).ok_or_else(|| CliError::config(format!("unknown config key {key}")))?;
    }
    let value = parse_value(raw);
    // integers are accepted where floats are expected
    *node = match (&*node, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    root.try_into().map_err(|e: toml::de::Error| CliError::config(format!("{key} = {raw}: {}", e.message())).into())
}

pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message().trim())).into())
}

pub fn to_toml(config: &RunConfig) -> Result<String> {
    toml::to_string(config).context("serializing config")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_are_pulled_out() {
        let (rest, ov) = extract_overrides(strings(&[
            "uacal",
            "--seed",
            "3",
            "--world.n_entities",
            "50",
            "pretrain",
            "--lora.rank=4",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["uacal", "--seed", "3", "pretrain"]));
        assert_eq!(ov, vec![("world.n_entities".into(), "50".into()), ("lora.rank".into(), "4".into())]);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::default();
        let cfg = apply_override(&cfg, "world.n_entities", "50").unwrap();
        let cfg = apply_override(&cfg, "finetune.learning_rate", "1").unwrap();
        let cfg = apply_override(&cfg, "finetune.loss_kind", "clm").unwrap();
        let cfg = apply_override(&cfg, "uncertainty.predicate.threshold", "0.5").unwrap();
        assert_eq!(cfg.world.n_entities, 50);
        assert_eq!(cfg.finetune.learning_rate, 1.0);
        assert_eq!(cfg.finetune.loss_kind, uacal::losses::LossKind::Clm);
        assert_eq!(
            cfg.uncertainty.predicate,
            uacal::uncertainty::EquivalencePredicate::RougeThreshold { threshold: 0.5 }
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let cfg = RunConfig::default();
        assert!(apply_override(&cfg, "world.n_entitis", "5").is_err());
        assert!(apply_override(&cfg, "world.n_entities", "many").is_err());
        assert!(apply_override(&cfg, "finetune.loss_kind", "mse").is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[world]\nn_entities = 40\n").unwrap();
        assert_eq!(load(Some(&path)).unwrap().world.n_entities, 40);
        std::fs::write(&path, "[world]\nentities = 40\n").unwrap();
        assert!(load(Some(&path)).is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = to_toml(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
