//! `key=value` configuration files and the resolved training configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format("config", format!("line {}: expected key=value", n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(
            key,
            format!("cannot parse `{value}` as {}", std::any::type_name::<T>()),
        )
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true|false, got `{value}`"),
        )),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

/// Named sub-seed derived from the run seed, so components can be
/// re-seeded independently.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    crate::semkb::stable_hash(name.as_bytes(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Dnn,
    Din,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Dnn => "dnn",
            BackboneKind::Din => "din",
        })
    }
}

/// When the vCLUB estimators are refitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorSchedule {
    PerBatch,
    PerEpoch,
}

impl fmt::Display for EstimatorSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorSchedule::PerBatch => "per_batch",
            EstimatorSchedule::PerEpoch => "per_epoch",
        })
    }
}

/// Which of the four pattern vectors reach the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternFlags {
    pub tt: bool,
    pub ss: bool,
    pub ts: bool,
    pub st: bool,
}

impl PatternFlags {
    pub const ALL: PatternFlags = PatternFlags {
        tt: true,
        ss: true,
        ts: true,
        st: true,
    };
    pub const NONE: PatternFlags = PatternFlags {
        tt: false,
        ss: false,
        ts: false,
        st: false,
    };

    pub fn any(&self) -> bool {
        self.tt || self.ss || self.ts || self.st
    }
}

/// Every hyperparameter, seed, and toggle of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub estimator_steps_per_iter: usize,
    pub estimator_lr: f64,
    pub estimator_schedule: EstimatorSchedule,
    pub estimator_hidden: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub backbone: BackboneKind,
    pub patterns: PatternFlags,
    pub sufficiency: bool,
    pub disentanglement: bool,
    pub mlp_hidden: Vec<usize>,
    pub reducer_hidden: Vec<usize>,
    pub attention_hidden: usize,
    /// Tabular item fields; empty means `item_id` plus every catalog column.
    pub item_fields: Vec<String>,
    /// Substitute zero vectors for items missing from the knowledge base.
    pub kb_zero_fallback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 32,
            k: 30,
            alpha: 0.02,
            beta: 0.01,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 256,
            eval_batch_size: 1024,
            estimator_steps_per_iter: 1,
            estimator_lr: 1e-3,
            estimator_schedule: EstimatorSchedule::PerBatch,
            estimator_hidden: 64,
            patience: 10,
            max_epochs: 100,
            seed: 42,
            backbone: BackboneKind::Dnn,
            patterns: PatternFlags::ALL,
            sufficiency: true,
            disentanglement: true,
            mlp_hidden: vec![128, 64],
            reducer_hidden: vec![128, 64],
            attention_hidden: 64,
            item_fields: Vec::new(),
            kb_zero_fallback: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "d",
    "k",
    "alpha",
    "beta",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "eval_batch_size",
    "estimator_steps_per_iter",
    "estimator_lr",
    "estimator_schedule",
    "estimator_hidden",
    "patience",
    "max_epochs",
    "seed",
    "backbone",
    "use_ptt",
    "use_pss",
    "use_pts",
    "use_pst",
    "sufficiency",
    "disentanglement",
    "mlp_hidden",
    "reducer_hidden",
    "attention_hidden",
    "item_fields",
    "kb_zero_fallback",
];

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            "estimator_steps_per_iter" => self.estimator_steps_per_iter = parse_value(key, value)?,
            "estimator_lr" => self.estimator_lr = parse_value(key, value)?,
            "estimator_schedule" => {
                self.estimator_schedule = match value {
                    "per_batch" => EstimatorSchedule::PerBatch,
                    "per_epoch" => EstimatorSchedule::PerEpoch,
                    _ => return Err(Error::config(key, "expected per_batch|per_epoch")),
                }
            }
            "estimator_hidden" => self.estimator_hidden = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "backbone" => {
                self.backbone = match value {
                    "dnn" => BackboneKind::Dnn,
                    "din" => BackboneKind::Din,
                    _ => return Err(Error::config(key, "expected dnn|din")),
                }
            }
            "use_ptt" => self.patterns.tt = parse_bool(key, value)?,
            "use_pss" => self.patterns.ss = parse_bool(key, value)?,
            "use_pts" => self.patterns.ts = parse_bool(key, value)?,
            "use_pst" => self.patterns.st = parse_bool(key, value)?,
            "sufficiency" => self.sufficiency = parse_bool(key, value)?,
            "disentanglement" => self.disentanglement = parse_bool(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_list(key, value)?,
            "reducer_hidden" => self.reducer_hidden = parse_list(key, value)?,
            "attention_hidden" => self.attention_hidden = parse_value(key, value)?,
            "item_fields" => {
                self.item_fields = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "kb_zero_fallback" => self.kb_zero_fallback = parse_bool(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::config("d", "d must be even"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        for (key, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value ≥ 0"));
            }
        }
        for (key, v) in [
            ("learning_rate", self.learning_rate),
            ("estimator_lr", self.estimator_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value > 0"));
            }
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("estimator_hidden", self.estimator_hidden),
            ("attention_hidden", self.attention_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.mlp_hidden.contains(&0) || self.reducer_hidden.contains(&0) {
            return Err(Error::config(
                "mlp_hidden",
                "hidden widths must be positive",
            ));
        }
        if self.uses_disentanglement() && self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "disentanglement needs batches of at least 2",
            ));
        }
        Ok(())
    }

    /// Sufficiency term is active (toggle on and non-zero weight).
    pub fn uses_sufficiency(&self) -> bool {
        self.sufficiency && self.alpha > 0.0
    }

    pub fn uses_disentanglement(&self) -> bool {
        self.disentanglement && self.beta > 0.0
    }

    /// Whether the dual-side attention needs to run at all.
    pub fn uses_patterns(&self) -> bool {
        self.patterns.any() || self.uses_sufficiency() || self.uses_disentanglement()
    }

    /// Defaults, then `file` lines, then `overrides` (later wins).
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(text) = file {
            for (k, v) in parse_kv_lines(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("d", self.d.to_string());
        put("k", self.k.to_string());
        put("alpha", format!("{:?}", self.alpha));
        put("beta", format!("{:?}", self.beta));
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("batch_size", self.batch_size.to_string());
        put("eval_batch_size", self.eval_batch_size.to_string());
        put(
            "estimator_steps_per_iter",
            self.estimator_steps_per_iter.to_string(),
        );
        put("estimator_lr", format!("{:?}", self.estimator_lr));
        put("estimator_schedule", self.estimator_schedule.to_string());
        put("estimator_hidden", self.estimator_hidden.to_string());
        put("patience", self.patience.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("seed", self.seed.to_string());
        put("backbone", self.backbone.to_string());
        put("use_ptt", self.patterns.tt.to_string());
        put("use_pss", self.patterns.ss.to_string());
        put("use_pts", self.patterns.ts.to_string());
        put("use_pst", self.patterns.st.to_string());
        put("sufficiency", self.sufficiency.to_string());
        put("disentanglement", self.disentanglement.to_string());
        put("mlp_hidden", list(&self.mlp_hidden));
        put("reducer_hidden", list(&self.reducer_hidden));
        put("attention_hidden", self.attention_hidden.to_string());
        put("item_fields", self.item_fields.join(","));
        put("kb_zero_fallback", self.kb_zero_fallback.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::resolve(None, &[]).unwrap();
        assert_eq!((c.d, c.k, c.patience), (32, 30, 10));
        assert_eq!((c.alpha, c.beta), (0.02, 0.01));
    }

    #[test]
    fn flags_override_file() {
        let c = TrainConfig::resolve(
            Some("# run\nalpha=0.0\n"),
            &[("alpha".into(), "0.05".into())],
        )
        .unwrap();
        assert_eq!(c.alpha, 0.05);
        let c = TrainConfig::resolve(Some("alpha = 0.0  # off"), &[]).unwrap();
        assert_eq!(c.alpha, 0.0);
    }

    #[test]
    fn odd_d_rejected() {
        let err = TrainConfig::resolve(Some("d=33"), &[]).unwrap_err();
        assert!(err.to_string().contains("d must be even"), "{err}");
    }

    #[test]
    fn unknown_and_invalid() {
        assert!(matches!(
            TrainConfig::resolve(Some("gamma=1"), &[]),
            Err(Error::UnknownConfigKey(k)) if k == "gamma"
        ));
        let err = TrainConfig::resolve(None, &[("backbone".into(), "gru".into())]).unwrap_err();
        assert!(err.to_string().contains("dnn|din"));
        assert!(TrainConfig::resolve(Some("use_ptt=maybe"), &[]).is_err());
        assert!(TrainConfig::resolve(Some("patience=0"), &[]).is_err());
        assert!(TrainConfig::resolve(Some("no equals sign"), &[]).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.set("backbone", "din").unwrap();
        c.set("use_pss", "false").unwrap();
        c.set("mlp_hidden", "16,8").unwrap();
        c.set("item_fields", "item_id,genre").unwrap();
        c.set("learning_rate", "0.0003").unwrap();
        let back = TrainConfig::resolve(Some(&c.to_kv()), &[]).unwrap();
        assert_eq!(back, c);
        for k in CONFIG_KEYS {
            assert!(
                c.to_kv().contains(&format!("\n{k}=")) || c.to_kv().starts_with(&format!("{k}="))
            );
        }
    }

    #[test]
    fn sub_seeds_differ_by_name() {
        assert_ne!(sub_seed(1, "init"), sub_seed(1, "data"));
        assert_eq!(sub_seed(1, "init"), sub_seed(1, "init"));
    }
}
