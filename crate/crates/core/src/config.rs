//! Flat key-value config files.
//!
//! Format: one `key = value` per line, `#` comments, blank lines ignored.
//! Unknown keys are errors so typos fail loudly. The simulator config
//! additionally accepts an embedded CSV block listing per-action effects.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::data_model::{ConversionTable, RewardConfig, Schema, NUM_ACTIONS};
use crate::ope::EvalConfig;
use crate::simulator::SimConfig;
use crate::training::{QualityKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("{0}")]
    Invalid(String),
}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// One parsed `key = value` line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> ConfigResult<Vec<KvEntry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                msg: format!("expected 'key = value', got '{trimmed}'"),
            });
        };
        out.push(KvEntry {
            line,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn read_text(path: &Path) -> ConfigResult<String> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_value<T: std::str::FromStr>(entry: &KvEntry, what: &str) -> ConfigResult<T> {
    entry.value.parse().map_err(|_| ConfigError::Parse {
        line: entry.line,
        msg: format!("'{}' is not a valid {what} for key '{}'", entry.value, entry.key),
    })
}

fn parse_bool(entry: &KvEntry) -> ConfigResult<bool> {
    match entry.value.as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(ConfigError::Parse {
            line: entry.line,
            msg: format!("'{other}' is not a boolean for key '{}'", entry.key),
        }),
    }
}

/// `map,reward` pair used by repeated `knot` keys.
fn parse_pair(entry: &KvEntry) -> ConfigResult<(f64, f64)> {
    let parts: Vec<&str> = entry.value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(ConfigError::Parse {
            line: entry.line,
            msg: format!("expected 'a,b' for key '{}', got '{}'", entry.key, entry.value),
        });
    }
    let a = parts[0].parse().map_err(|_| ConfigError::Parse {
        line: entry.line,
        msg: format!("'{}' is not a number", parts[0]),
    })?;
    let b = parts[1].parse().map_err(|_| ConfigError::Parse {
        line: entry.line,
        msg: format!("'{}' is not a number", parts[1]),
    })?;
    Ok((a, b))
}

fn apply_reward_key(config: &mut RewardConfig, entry: &KvEntry, knots_seen: &mut bool) -> ConfigResult<bool> {
    match entry.key.as_str() {
        "knot" => {
            if !*knots_seen {
                config.knots.clear();
                *knots_seen = true;
            }
            config.knots.push(parse_pair(entry)?);
        }
        "map_floor" => config.map_floor = parse_value(entry, "number")?,
        "map_ceiling" => config.map_ceiling = parse_value(entry, "number")?,
        "urine_exemption_threshold" => {
            config.urine_exemption_threshold = parse_value(entry, "number")?
        }
        "urine_exempt_map_floor" => config.urine_exempt_map_floor = parse_value(entry, "number")?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn parse_reward_config(text: &str) -> ConfigResult<RewardConfig> {
    let mut config = RewardConfig::default();
    let mut knots_seen = false;
    for entry in parse_kv(text)? {
        if !apply_reward_key(&mut config, &entry, &mut knots_seen)? {
            return Err(ConfigError::UnknownKey {
                line: entry.line,
                key: entry.key,
            });
        }
    }
    config
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

pub fn load_reward_config(path: &Path) -> ConfigResult<RewardConfig> {
    parse_reward_config(&read_text(path)?)
}

/// Drug-to-norepinephrine factors, one `drug = factor` per line. A file
/// replaces the default table entirely.
pub fn parse_conversion_table(text: &str) -> ConfigResult<ConversionTable> {
    let mut factors = BTreeMap::new();
    for entry in parse_kv(text)? {
        let factor: f64 = parse_value(&entry, "number")?;
        if !(factor > 0.0) {
            return Err(ConfigError::Parse {
                line: entry.line,
                msg: format!("factor for '{}' must be positive", entry.key),
            });
        }
        factors.insert(entry.key.to_lowercase(), factor);
    }
    if factors.is_empty() {
        return Err(ConfigError::Invalid("conversion table is empty".into()));
    }
    Ok(ConversionTable { factors })
}

pub fn load_conversion_table(path: &Path) -> ConfigResult<ConversionTable> {
    parse_conversion_table(&read_text(path)?)
}

pub fn parse_quality_kind(s: &str) -> Option<QualityKind> {
    match s {
        "ce" | "CE" => Some(QualityKind::Ce),
        "symkl" | "symKL" => Some(QualityKind::SymKl),
        "none" => Some(QualityKind::None),
        _ => None,
    }
}

pub fn parse_train_config(text: &str) -> ConfigResult<TrainConfig> {
    let mut config = TrainConfig::default();
    for entry in parse_kv(text)? {
        match entry.key.as_str() {
            "lambda" => config.lambda = parse_value(&entry, "number")?,
            "epsilon" => config.epsilon = parse_value(&entry, "number")?,
            "quality_kind" => {
                config.quality_kind =
                    parse_quality_kind(&entry.value).ok_or_else(|| ConfigError::Parse {
                        line: entry.line,
                        msg: format!(
                            "quality_kind must be ce, symkl or none, got '{}'",
                            entry.value
                        ),
                    })?
            }
            "use_safety" => config.use_safety = parse_bool(&entry)?,
            "use_diversity" => config.use_diversity = parse_bool(&entry)?,
            "learning_rate" => config.learning_rate = parse_value(&entry, "number")?,
            "batch_size" => config.batch_size = parse_value(&entry, "integer")?,
            "l2_coeff" => config.l2_coeff = parse_value(&entry, "number")?,
            "k_policies" => config.k_policies = parse_value(&entry, "integer")?,
            "epochs" => config.epochs = parse_value(&entry, "integer")?,
            "seed" => config.seed = parse_value(&entry, "integer")?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: entry.line,
                    key: entry.key,
                })
            }
        }
    }
    config
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

pub fn load_train_config(path: &Path) -> ConfigResult<TrainConfig> {
    parse_train_config(&read_text(path)?)
}

pub fn parse_eval_config(text: &str) -> ConfigResult<EvalConfig> {
    let mut config = EvalConfig::default();
    for entry in parse_kv(text)? {
        match entry.key.as_str() {
            "gamma" => config.gamma = parse_value(&entry, "number")?,
            "ess_threshold" => config.ess_threshold = parse_value(&entry, "number")?,
            "unseen_prob_threshold" => {
                config.unseen_prob_threshold = parse_value(&entry, "number")?
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: entry.line,
                    key: entry.key,
                })
            }
        }
    }
    if !(config.gamma > 0.0 && config.gamma <= 1.0) {
        return Err(ConfigError::Invalid("gamma must be in (0, 1]".into()));
    }
    if !(config.ess_threshold >= 0.0) {
        return Err(ConfigError::Invalid("ess_threshold must be nonnegative".into()));
    }
    Ok(config)
}

pub fn load_eval_config(path: &Path) -> ConfigResult<EvalConfig> {
    parse_eval_config(&read_text(path)?)
}

/// kNN behavior fit settings used by the CLI.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BehaviorFitConfig {
    pub k: usize,
    pub epsilon: f64,
    /// Optional distance-weight file, `feature_name weight` per line.
    pub weights_file: Option<String>,
}

impl Default for BehaviorFitConfig {
    fn default() -> Self {
        BehaviorFitConfig {
            k: 100,
            epsilon: 0.03,
            weights_file: None,
        }
    }
}

pub fn parse_behavior_config(text: &str) -> ConfigResult<BehaviorFitConfig> {
    let mut config = BehaviorFitConfig::default();
    for entry in parse_kv(text)? {
        match entry.key.as_str() {
            "k" => config.k = parse_value(&entry, "integer")?,
            "epsilon" => config.epsilon = parse_value(&entry, "number")?,
            "weights_file" => config.weights_file = Some(entry.value.clone()),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: entry.line,
                    key: entry.key,
                })
            }
        }
    }
    if config.k == 0 {
        return Err(ConfigError::Invalid("k must be positive".into()));
    }
    if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
        return Err(ConfigError::Invalid("epsilon must be in (0, 1)".into()));
    }
    Ok(config)
}

pub fn load_behavior_config(path: &Path) -> ConfigResult<BehaviorFitConfig> {
    parse_behavior_config(&read_text(path)?)
}

/// Per-feature distance weights: one `feature_name weight` per line
/// (whitespace separated). Features not listed default to 1.
pub fn parse_distance_weights(text: &str, schema: &Schema) -> ConfigResult<Vec<f64>> {
    let mut weights = vec![1.0; schema.len()];
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let (Some(name), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ConfigError::Parse {
                line,
                msg: format!("expected 'feature_name weight', got '{trimmed}'"),
            });
        };
        let pos = schema
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| ConfigError::Parse {
                line,
                msg: format!("feature '{name}' is not in the dataset schema"),
            })?;
        let w: f64 = value.parse().map_err(|_| ConfigError::Parse {
            line,
            msg: format!("'{value}' is not a number"),
        })?;
        if !(w >= 0.0) {
            return Err(ConfigError::Parse {
                line,
                msg: format!("weight for '{name}' must be nonnegative"),
            });
        }
        weights[pos] = w;
    }
    Ok(weights)
}

pub fn load_distance_weights(path: &Path, schema: &Schema) -> ConfigResult<Vec<f64>> {
    parse_distance_weights(&read_text(path)?, schema)
}

/// Simulator config: `key = value` lines plus an optional embedded CSV
/// block. The block starts at a line reading `action_effects:` and is
/// followed by exactly 20 `action_id,effect` rows.
pub fn parse_sim_config(text: &str) -> ConfigResult<SimConfig> {
    let mut config = SimConfig::default();
    let mut knots_seen = false;
    let mut lines = text.lines().enumerate().peekable();
    while let Some((idx, raw)) = lines.next() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if trimmed == "action_effects:" {
            let mut effects = vec![f64::NAN; NUM_ACTIONS];
            for _ in 0..NUM_ACTIONS {
                let Some((ridx, row)) = lines.next() else {
                    return Err(ConfigError::Parse {
                        line,
                        msg: format!("action_effects block needs {NUM_ACTIONS} rows"),
                    });
                };
                let rline = ridx + 1;
                let entry = KvEntry {
                    line: rline,
                    key: "action_effects".into(),
                    value: row.trim().to_string(),
                };
                let (id_f, effect) = parse_pair(&entry)?;
                if id_f.fract() != 0.0 || id_f < 0.0 || id_f >= NUM_ACTIONS as f64 {
                    return Err(ConfigError::Parse {
                        line: rline,
                        msg: format!("action id must be an integer in 0..{NUM_ACTIONS}"),
                    });
                }
                let id = id_f as usize;
                if !effects[id].is_nan() {
                    return Err(ConfigError::Parse {
                        line: rline,
                        msg: format!("duplicate action id {id}"),
                    });
                }
                effects[id] = effect;
            }
            config.action_map_effects = effects;
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                msg: format!("expected 'key = value', got '{trimmed}'"),
            });
        };
        let entry = KvEntry {
            line,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        };
        if apply_reward_key(&mut config.reward, &entry, &mut knots_seen)? {
            continue;
        }
        match entry.key.as_str() {
            "state_dim" => config.state_dim = parse_value(&entry, "integer")?,
            "horizon" => config.horizon = parse_value(&entry, "integer")?,
            "map_base" => config.map_base = parse_value(&entry, "number")?,
            "map_pull" => config.map_pull = parse_value(&entry, "number")?,
            "noise_scale" => config.noise_scale = parse_value(&entry, "number")?,
            "style_sep" => config.style_sep = parse_value(&entry, "number")?,
            "style_weight_scale" => config.style_weight_scale = parse_value(&entry, "number")?,
            "single_style" => config.single_style = Some(parse_value(&entry, "integer")?),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: entry.line,
                    key: entry.key,
                })
            }
        }
    }
    config
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    config
        .reward
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

pub fn load_sim_config(path: &Path) -> ConfigResult<SimConfig> {
    parse_sim_config(&read_text(path)?)
}
