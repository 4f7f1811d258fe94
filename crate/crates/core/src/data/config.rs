//! Plaintext `key = value` configuration mirroring [`TrainConfig`].
//!
//! Blank lines and `#` comments are ignored. Every key can be overridden by
//! an environment variable named `VPRG_` followed by the upper-cased key,
//! e.g. `VPRG_BASE_LR=0.001`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grounding_global::GrrmPairs;
use crate::grounding_local::RewardOrder;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "VPRG_";

pub const KEYS: &[&str] = &[
    "epochs",
    "base_lr",
    "decay_factor",
    "decay_every",
    "batch_size",
    "seed",
    "clip_norm",
    "checkpoint_every",
    "k",
    "d",
    "heads",
    "depth",
    "q",
    "margin",
    "beta1",
    "beta2",
    "initial_scale",
    "cmff_weights",
    "theta_min",
    "theta_max",
    "unmasked_weight",
    "reward_order",
    "grrm_pairs",
    "grrm_symmetric",
    "time_loss",
    "sync_distillation",
    "positional",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Sets one key on `cfg`.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let m = &mut cfg.model;
    match key {
        "epochs" => cfg.epochs = num(key, value)?,
        "base_lr" => cfg.base_lr = num(key, value)?,
        "decay_factor" => cfg.decay_factor = num(key, value)?,
        "decay_every" => cfg.decay_every = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "clip_norm" => {
            cfg.clip_norm = match value {
                "none" | "off" => None,
                v => Some(num(key, v)?),
            }
        }
        "checkpoint_every" => cfg.checkpoint_every = num(key, value)?,
        "k" => m.k = num(key, value)?,
        "d" => m.d = num(key, value)?,
        "heads" => m.heads = num(key, value)?,
        "depth" => m.depth = num(key, value)?,
        "q" => m.q = num(key, value)?,
        "margin" => m.margin = num(key, value)?,
        "beta1" => m.beta1 = num(key, value)?,
        "beta2" => m.beta2 = num(key, value)?,
        "initial_scale" => m.initial_scale = num(key, value)?,
        "cmff_weights" => {
            m.cmff_weights = value
                .split(',')
                .map(|w| num(key, w.trim()))
                .collect::<Result<Vec<f64>>>()?
        }
        "theta_min" => m.theta_min = num(key, value)?,
        "theta_max" => m.theta_max = num(key, value)?,
        "unmasked_weight" => m.unmasked_weight = num(key, value)?,
        "reward_order" => {
            m.reward_order = match value {
                "reconstruction" => RewardOrder::Reconstruction,
                "score" => RewardOrder::Score,
                _ => return Err(Error::Config(format!("`{key}`: expected reconstruction|score, got `{value}`"))),
            }
        }
        "grrm_pairs" => {
            m.grrm_pairs = match value {
                "all" => GrrmPairs::All,
                "positive" => GrrmPairs::Positive,
                _ => return Err(Error::Config(format!("`{key}`: expected all|positive, got `{value}`"))),
            }
        }
        "grrm_symmetric" => m.grrm_symmetric = flag(key, value)?,
        "time_loss" => m.time_loss = flag(key, value)?,
        "sync_distillation" => m.sync_distillation = flag(key, value)?,
        "positional" => m.positional = flag(key, value)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Parses `text` over the defaults, then applies overrides from `env`.
pub fn parse_config(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        apply(&mut cfg, key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
    }
    for key in KEYS {
        if let Some(value) = env(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
            apply(&mut cfg, key, value.trim())?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file, applying `VPRG_*` environment overrides.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, |k| std::env::var(k).ok())
}

/// Renders every key of `cfg`; parsing the result gives `cfg` back.
pub fn render_config(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let mut out = String::new();
    let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    put("epochs", cfg.epochs.to_string());
    put("base_lr", cfg.base_lr.to_string());
    put("decay_factor", cfg.decay_factor.to_string());
    put("decay_every", cfg.decay_every.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("seed", cfg.seed.to_string());
    put("clip_norm", cfg.clip_norm.map_or("none".into(), |c| c.to_string()));
    put("checkpoint_every", cfg.checkpoint_every.to_string());
    put("k", m.k.to_string());
    put("d", m.d.to_string());
    put("heads", m.heads.to_string());
    put("depth", m.depth.to_string());
    put("q", m.q.to_string());
    put("margin", m.margin.to_string());
    put("beta1", m.beta1.to_string());
    put("beta2", m.beta2.to_string());
    put("initial_scale", m.initial_scale.to_string());
    put(
        "cmff_weights",
        m.cmff_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(", "),
    );
    put("theta_min", m.theta_min.to_string());
    put("theta_max", m.theta_max.to_string());
    put("unmasked_weight", m.unmasked_weight.to_string());
    put(
        "reward_order",
        match m.reward_order {
            RewardOrder::Reconstruction => "reconstruction".into(),
            RewardOrder::Score => "score".into(),
        },
    );
    put(
        "grrm_pairs",
        match m.grrm_pairs {
            GrrmPairs::All => "all".into(),
            GrrmPairs::Positive => "positive".into(),
        },
    );
    put("grrm_symmetric", m.grrm_symmetric.to_string());
    put("time_loss", m.time_loss.to_string());
    put("sync_distillation", m.sync_distillation.to_string());
    put("positional", m.positional.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = parse_config("# comment\nepochs = 5\ndecay_every = 5\n\nbase_lr=0.002 # inline\nclip_norm = none\ncmff_weights = 0.5, 0.25, 0.25\n", no_env).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.decay_every, 5);
        assert_eq!(cfg.base_lr, 0.002);
        assert_eq!(cfg.clip_norm, None);
        assert_eq!(cfg.model.cmff_weights, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn env_overrides_file() {
        let env = |k: &str| (k == "VPRG_SEED").then(|| "42".to_string());
        let cfg = parse_config("seed = 1\n", env).unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_config("epochs = 5\nbogus = 1\n", no_env).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_config("epochs five\n", no_env).is_err());
        assert!(parse_config("time_loss = maybe\n", no_env).is_err());
        assert!(parse_config("epochs = 5\n", no_env).is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.model.time_loss = false;
        cfg.clip_norm = None;
        cfg.base_lr = 3e-3;
        assert_eq!(parse_config(&render_config(&cfg), no_env).unwrap(), cfg);
    }
}
