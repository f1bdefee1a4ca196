//! Flat `key = value` run configuration.
//!
//! Layers are applied in order (built-in defaults, then a config file, then
//! command-line overrides) and the last value for a key wins. `warmup_steps`
//! and `anneal_start_step` follow `total_steps` unless set explicitly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::manifold::AugmentationRange;
use crate::stain_math::StainBasis;
use crate::trainer::TrainConfig;

pub const KEYS: &[&str] = &[
    "depth",
    "heads",
    "embed_dim",
    "patch_size_tokens",
    "input_side",
    "mlp_ratio",
    "projector_dim",
    "batch_size",
    "base_lr",
    "final_lr",
    "warmup_steps",
    "total_steps",
    "anneal_start_step",
    "weight_decay",
    "lambda",
    "seed",
    "center_embeddings",
    "grad_clip",
    "alpha_min",
    "alpha_max",
    "fixed_basis",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(&[]).expect("built-in defaults are valid")
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        v => Err(config_err(key, format!("expected true/false, got `{v}`"))),
    }
}

fn parse_basis(key: &str, value: &str) -> Result<Option<StainBasis>> {
    if value == "none" || value == "off" {
        return Ok(None);
    }
    let v = value
        .split(',')
        .map(|s| parse::<f64>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != 6 {
        return Err(config_err(key, format!("expected 6 comma-separated values (h then e), got {}", v.len())));
    }
    let (h, e) = ([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
    StainBasis::new(h, e)
        .or_else(|_| StainBasis::from_unnormalized(h, e))
        .map(Some)
        .map_err(|e| config_err(key, e.to_string()))
}

/// Parses config-file text into ordered `(key, value)` pairs. `#` starts a
/// comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            config_err(line, format!("line {}: expected `key = value`", n + 1))
        })?;
        out.push(parse_assignment_parts(k, v)?);
    }
    Ok(out)
}

fn parse_assignment_parts(k: &str, v: &str) -> Result<(String, String)> {
    let (k, v) = (k.trim(), v.trim());
    if !KEYS.contains(&k) {
        return Err(config_err(k, "unknown configuration key"));
    }
    Ok((k.to_owned(), v.to_owned()))
}

/// Parses one `key=value` override.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(s, "expected `key=value`"))?;
    parse_assignment_parts(k, v)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

impl RunConfig {
    /// Resolves layered assignments over the built-in defaults.
    pub fn resolve(assignments: &[(String, String)]) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in assignments {
            if !KEYS.contains(&k.as_str()) {
                return Err(config_err(k, "unknown configuration key"));
            }
            kv.insert(k, v);
        }
        let total = match kv.get("total_steps") {
            Some(v) => parse("total_steps", v)?,
            None => TrainConfig::default().total_steps,
        };
        let mut train = TrainConfig::with_total_steps(total);
        let mut encoder = EncoderConfig::default();
        let mut alpha = (train.augmentation.min, train.augmentation.max);
        for (&k, &v) in &kv {
            match k {
                "depth" => encoder.depth = parse(k, v)?,
                "heads" => encoder.heads = parse(k, v)?,
                "embed_dim" => encoder.embed_dim = parse(k, v)?,
                "patch_size_tokens" => encoder.patch_size_tokens = parse(k, v)?,
                "input_side" => encoder.input_side = parse(k, v)?,
                "mlp_ratio" => encoder.mlp_ratio = parse(k, v)?,
                "projector_dim" => {
                    encoder.projector_dim = parse_optional(k, v)?.filter(|d: &usize| *d > 0)
                }
                "batch_size" => train.batch_size = parse(k, v)?,
                "base_lr" => train.base_lr = parse(k, v)?,
                "final_lr" => train.final_lr = parse(k, v)?,
                "warmup_steps" => train.warmup_steps = parse(k, v)?,
                "total_steps" => {}
                "anneal_start_step" => train.anneal_start_step = parse(k, v)?,
                "weight_decay" => train.weight_decay = parse(k, v)?,
                "lambda" => train.lambda = parse(k, v)?,
                "seed" => {
                    train.seed = parse(k, v)?;
                    encoder.seed = train.seed;
                }
                "center_embeddings" => train.center_embeddings = parse_bool(k, v)?,
                "grad_clip" => train.grad_clip = parse_optional(k, v)?,
                "alpha_min" => alpha.0 = parse(k, v)?,
                "alpha_max" => alpha.1 = parse(k, v)?,
                "fixed_basis" => train.fixed_basis = parse_basis(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        train.augmentation = AugmentationRange::new(alpha.0, alpha.1)
            .map_err(|e| config_err("alpha_min", e.to_string()))?;
        encoder.validate().map_err(|e| match e {
            e @ Error::Config { .. } => e,
            other => config_err("encoder", other.to_string()),
        })?;
        train.validate()?;
        Ok(Self { encoder, train })
    }

    /// Every key with its resolved value, in `KEYS` order; feeding the
    /// result back through [`parse_config_text`] and [`RunConfig::resolve`]
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let (e, t) = (&self.encoder, &self.train);
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let values: Vec<String> = vec![
            e.depth.to_string(),
            e.heads.to_string(),
            e.embed_dim.to_string(),
            e.patch_size_tokens.to_string(),
            e.input_side.to_string(),
            e.mlp_ratio.to_string(),
            opt(e.projector_dim.map(|v| v.to_string())),
            t.batch_size.to_string(),
            t.base_lr.to_string(),
            t.final_lr.to_string(),
            t.warmup_steps.to_string(),
            t.total_steps.to_string(),
            t.anneal_start_step.to_string(),
            t.weight_decay.to_string(),
            t.lambda.to_string(),
            t.seed.to_string(),
            t.center_embeddings.to_string(),
            opt(t.grad_clip.map(|v| v.to_string())),
            t.augmentation.min.to_string(),
            t.augmentation.max.to_string(),
            opt(t.fixed_basis.map(|b| {
                let (h, e) = (b.h(), b.e());
                format!("{},{},{},{},{},{}", h[0], h[1], h[2], e[0], e[1], e[2])
            })),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
