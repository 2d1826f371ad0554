//! Effective run configuration: command-line flags over a JSON file over
//! built-in defaults. The file is checked against the shipped schema first.

use std::path::Path;

use anyhow::{bail, Context, Result};
use resgcn::blocks::{BlockKind, ResidualKind};
use resgcn::model::{parse_structure, ModelSpec};
use resgcn::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "RESGCN_SEED";

const SCHEMA: &str = include_str!("../schemas/config.schema.json");

/// Every key a config file may set. Absent keys fall through to defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub structure: Option<String>,
    pub block: Option<BlockKind>,
    pub residual: Option<ResidualKind>,
    pub reduction: Option<usize>,
    pub attention: Option<bool>,
    pub channel_plan: Option<Vec<usize>>,
    pub temporal_window: Option<usize>,
    pub max_distance: Option<usize>,
    pub attention_reduction: Option<usize>,
    pub base_lr: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub max_epochs: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("shipped schema is JSON");
        let validator = jsonschema::validator_for(&schema).expect("shipped schema compiles");
        let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
        if !errors.is_empty() {
            bail!("config {} does not match the schema: {}", path.display(), errors.join("; "));
        }
        Ok(serde_json::from_value(value)?)
    }

    /// `self` where set, otherwise `lower`.
    pub fn over(self, lower: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(
            structure, block, residual, reduction, attention, channel_plan, temporal_window, max_distance,
            attention_reduction, base_lr, decay_epochs, decay_factor, warmup_epochs, max_epochs, momentum,
            weight_decay, batch_size, seed
        )
    }
}

/// Seed from the environment fallback, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Merged model and training settings, echoed into every log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Resolves `o` against defaults. A block kind, when given, replaces the
    /// kind of parts 2 to 4 of the structure.
    pub fn resolve(o: Overrides, num_classes: usize) -> Result<RunConfig> {
        let d = ModelSpec::default();
        let mut structure = match &o.structure {
            Some(s) => parse_structure(s)?,
            None => d.structure.clone(),
        };
        if let Some(kind) = o.block {
            structure = structure.with_trunk_kind(kind);
        }
        let model = ModelSpec {
            structure,
            channel_plan: o.channel_plan.unwrap_or(d.channel_plan),
            num_classes,
            with_part_attention: o.attention.unwrap_or(d.with_part_attention),
            residual: o.residual.unwrap_or(d.residual),
            reduction: o.reduction.unwrap_or(d.reduction),
            temporal_window: o.temporal_window.unwrap_or(d.temporal_window),
            max_distance: o.max_distance.unwrap_or(d.max_distance),
            attention_reduction: o.attention_reduction.unwrap_or(d.attention_reduction),
        };
        model.validate()?;
        let t = TrainConfig::default();
        let train = TrainConfig {
            base_lr: o.base_lr.unwrap_or(t.base_lr),
            decay_epochs: o.decay_epochs.unwrap_or(t.decay_epochs),
            decay_factor: o.decay_factor.unwrap_or(t.decay_factor),
            warmup_epochs: o.warmup_epochs.unwrap_or(t.warmup_epochs),
            max_epochs: o.max_epochs.unwrap_or(t.max_epochs),
            momentum: o.momentum.unwrap_or(t.momentum),
            weight_decay: o.weight_decay.unwrap_or(t.weight_decay),
            batch_size: o.batch_size.unwrap_or(t.batch_size),
            seed: o.seed.unwrap_or(t.seed),
        };
        train.validate()?;
        Ok(RunConfig { model, train })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = Overrides {
            max_epochs: Some(5),
            seed: Some(3),
            reduction: Some(2),
            ..Default::default()
        };
        let flags = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(flags.over(file), 4).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.max_epochs, 5);
        assert_eq!(cfg.model.reduction, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn block_kind_replaces_trunk() {
        let o = Overrides {
            structure: Some("[B1,N2,N3,N3]".into()),
            block: Some(BlockKind::Basic),
            ..Default::default()
        };
        assert_eq!(RunConfig::resolve(o, 60).unwrap().model.structure.to_string(), "[B1,B2,B3,B3]");
    }

    #[test]
    fn schema_rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"max_epochs": 3, "block": "bottleneck"}"#).unwrap();
        assert_eq!(Overrides::load(&p).unwrap().max_epochs, Some(3));
        std::fs::write(&p, r#"{"epochs": 3}"#).unwrap();
        assert!(Overrides::load(&p).is_err());
        std::fs::write(&p, r#"{"batch_size": 0}"#).unwrap();
        assert!(Overrides::load(&p).is_err());
        std::fs::write(&p, r#"{"residual": "sideways"}"#).unwrap();
        assert!(Overrides::load(&p).is_err());
    }
}
