//! Experiment configuration: JSON with optional flat dotted keys, unknown
//! keys rejected, every field defaulted.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::PALossConfig;
use crate::optim::OptimConfig;
use crate::peft::{PeftConfig, PeftMethod};
use crate::proxy::{AccumulatorKind, ProxyConfig};
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    pub path: Option<String>,
    /// Seed of the synthetic generator.
    pub seed: u64,
    /// Classes used for training; the rest form the evaluation split.
    /// `None` means half, rounded up.
    pub train_classes: Option<usize>,
    /// When positive, every class trains and its last `holdout_per_class`
    /// items form the evaluation split instead.
    pub holdout_per_class: usize,
    pub batch_size: usize,
    pub per_class: usize,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            path: None,
            seed: 0,
            train_classes: None,
            holdout_per_class: 0,
            batch_size: 16,
            per_class: 2,
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.per_class.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: u64,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub seed: u64,
    /// Resident class-prompt slots; `None` keeps every class resident.
    pub buffer_capacity: Option<usize>,
    /// Record measured step times instead of 0 in the metrics CSV.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 100,
            eval_every: 0,
            seed: 0,
            buffer_capacity: None,
            wall_clock: false,
        }
    }
}

/// Optional supervised warm-up of the whole encoder as a classifier on a
/// separate synthetic dataset, before the fine-tuning method is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 0,
            lr: 1e-3,
            seed: 1,
            batch_size: 16,
            synthetic: SyntheticSpec {
                classes: 8,
                ..SyntheticSpec::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: VitConfig,
    pub peft: PeftConfig,
    pub proxy: ProxyConfig,
    pub loss: PALossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub run: RunConfig,
    pub pretrain: PretrainConfig,
}

/// Rewrites `{"a.b": 1}` into `{"a": {"b": 1}}`, merging with existing
/// objects.
pub fn expand_dotted(value: Value) -> Result<Value> {
    match value {
        Value::Object(map) => {
            let mut out = Map::new();
            for (key, v) in map {
                let v = expand_dotted(v)?;
                let parts: Vec<&str> = key.split('.').collect();
                insert_path(&mut out, &parts, v, &key)?;
            }
            Ok(Value::Object(out))
        }
        other => Ok(other),
    }
}

fn insert_path(map: &mut Map<String, Value>, parts: &[&str], v: Value, full: &str) -> Result<()> {
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(full, "empty key segment"));
    }
    if parts.len() == 1 {
        match (map.get_mut(parts[0]), v) {
            (Some(Value::Object(existing)), Value::Object(new)) => {
                for (k, val) in new {
                    insert_path(existing, &[k.as_str()], val, full)?;
                }
            }
            (Some(_), _) => return Err(Error::config(full, "key given twice")),
            (None, v) => {
                map.insert(parts[0].to_string(), v);
            }
        }
        return Ok(());
    }
    let child = map
        .entry(parts[0].to_string())
        .or_insert_with(|| Value::Object(Map::new()));
    match child {
        Value::Object(m) => insert_path(m, &parts[1..], v, full),
        _ => Err(Error::config(full, "conflicts with a non-object value")),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<root>", format!("invalid JSON: {e}")))?;
        Self::from_value(raw)
    }

    pub fn from_value(raw: Value) -> Result<Self> {
        let expanded = expand_dotted(raw)?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(expanded).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.peft
            .validate(self.model.hidden_dim, self.model.layers)?;
        self.proxy.validate(self.model.layers)?;
        self.loss.validate()?;
        self.optim.validate()?;
        let d = &self.data;
        if d.per_class == 0 || d.batch_size == 0 || d.batch_size % d.per_class != 0 {
            return Err(Error::config(
                "data.batch_size",
                format!(
                    "must be a positive multiple of data.per_class ({})",
                    d.per_class
                ),
            ));
        }
        if d.source == DataSource::Folder && d.path.is_none() {
            return Err(Error::config(
                "data.path",
                "required when data.source is folder",
            ));
        }
        if d.source == DataSource::Synthetic {
            d.synthetic.validate("data.synthetic")?;
            if d.synthetic.classes < 2 {
                return Err(Error::config(
                    "data.synthetic.classes",
                    "need at least 2 classes",
                ));
            }
        }
        if let Some(cap) = self.run.buffer_capacity {
            if cap < d.classes_per_batch() {
                return Err(Error::config(
                    "run.buffer_capacity",
                    format!(
                        "{cap} is below the {} classes in a batch",
                        d.classes_per_batch()
                    ),
                ));
            }
        }
        if self.pretrain.steps > 0 {
            self.pretrain.synthetic.validate("pretrain.synthetic")?;
            if self.pretrain.batch_size == 0 {
                return Err(Error::config("pretrain.batch_size", "must be positive"));
            }
        }
        Ok(())
    }

    /// Configuration for one row of the method comparison. Names are
    /// `full`, `linear_probe`, `bitfit`, `adapter`, `vpt`, `vpt_adapter`,
    /// `vptsp_m`, `vptsp_g`, each optionally suffixed with `+bitfit`.
    pub fn for_method(&self, name: &str) -> Result<Self> {
        let (base, bitfit) = match name.strip_suffix("+bitfit") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let mut cfg = self.clone();
        cfg.proxy.enabled = false;
        cfg.peft.combine_bitfit = bitfit;
        cfg.peft.method = match base {
            "full" => PeftMethod::Full,
            "linear_probe" => PeftMethod::LinearProbe,
            "bitfit" => PeftMethod::Bitfit,
            "adapter" => PeftMethod::Adapter,
            "vpt" => PeftMethod::Vpt,
            "vpt_adapter" => PeftMethod::VptAdapter,
            "vptsp_m" | "vptsp_g" => {
                cfg.proxy.enabled = true;
                cfg.proxy.accumulator_kind = match (base, self.proxy.accumulator_kind) {
                    ("vptsp_m", _) => AccumulatorKind::Ema,
                    (_, AccumulatorKind::GruTanh) => AccumulatorKind::GruTanh,
                    _ => AccumulatorKind::GruRelu,
                };
                PeftMethod::Vpt
            }
            other => {
                return Err(Error::config(
                    "methods",
                    format!("unknown method `{other}`"),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn dotted_and_nested_keys_merge() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"run.steps": 7, "run": {"seed": 3}, "model.layers": 2, "proxy.alpha": 0.25}"#,
        )
        .unwrap();
        assert_eq!(cfg.run.steps, 7);
        assert_eq!(cfg.run.seed, 3);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.proxy.alpha, 0.25);
        assert!(
            ExperimentConfig::from_json_str(r#"{"run.steps": 1, "run": {"steps": 2}}"#).is_err()
        );
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err =
            ExperimentConfig::from_json_str(r#"{"optim": {"learning_rate": 0.1}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert!(path.starts_with("optim"), "{path}"),
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::from_json_str(r#"{"model": {"layers": "six"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "model.layers"));
    }

    #[test]
    fn validation_paths() {
        let err = ExperimentConfig::from_json_str(r#"{"data.batch_size": 5}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "data.batch_size"));
        let err = ExperimentConfig::from_json_str(r#"{"run.buffer_capacity": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "run.buffer_capacity"));
        let err = ExperimentConfig::from_json_str(r#"{"proxy.lambda": 1.5}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "proxy.lambda"));
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg = ExperimentConfig::from_json_str(r#"{"run.steps": 9, "peft.method": "adapter"}"#)
            .unwrap();
        let again = ExperimentConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json(), again.to_json());
    }

    #[test]
    fn method_presets() {
        let base = ExperimentConfig::default();
        let g = base.for_method("vptsp_g").unwrap();
        assert!(g.proxy.enabled && g.proxy.accumulator_kind == AccumulatorKind::GruRelu);
        let m = base.for_method("vptsp_m+bitfit").unwrap();
        assert!(m.proxy.accumulator_kind == AccumulatorKind::Ema && m.peft.combine_bitfit);
        assert!(!base.for_method("vpt").unwrap().proxy.enabled);
        assert!(base.for_method("lora").is_err());
    }
}
