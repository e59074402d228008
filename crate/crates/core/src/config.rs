//! Flat experiment configuration, resolved as defaults < environment seed <
//! JSON file < command-line overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::benchmark::{BaseDataset, ContinuousVariant, DomainFamilySpec, ProtocolConfig, StreamSpec, VariantId};
use crate::domain_graph::KernelConfig;
use crate::error::{AdaGraphError, Result};
use crate::gbn::DEFAULT_EPSILON;
use crate::refinement::{DEFAULT_ALPHA, DEFAULT_CAPACITY, DEFAULT_REFINE_LR};
use crate::training::TrainConfig;

/// Environment variable consulted when no seed list is configured.
pub const SEED_ENV: &str = "ADAGRAPH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub base_dataset: BaseDataset,
    pub n_domains: usize,
    pub samples_per_domain: usize,
    pub noise_std: f64,
    pub rotation_center: [f64; 2],
    pub max_translation: Option<f64>,

    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub gbn_momentum: f64,
    pub update_shared_stage2: bool,

    pub hidden: Vec<usize>,
    pub epsilon: f64,
    pub sigma: f64,

    pub buffer_capacity: usize,
    pub alpha: f64,
    pub refine_lr: f64,

    pub variants: Vec<VariantId>,
    pub continuous_variants: Vec<ContinuousVariant>,
    pub seeds: Vec<u64>,
    /// Restricts the leave-one-out grid to one source.
    pub source: Option<u32>,
    /// Restricts the leave-one-out grid to one target.
    pub target: Option<u32>,
    /// Minimum angular distance in degrees between source and target.
    pub min_angle: f64,

    pub stream_length: usize,
    pub stream_start_deg: f64,
    pub stream_end_deg: f64,

    pub sweep_counts: Vec<usize>,
    pub sweep_repeats: usize,

    pub record_wall_time: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let family = DomainFamilySpec::default();
        let train = TrainConfig::default();
        let stream = StreamSpec::default();
        Self {
            base_dataset: family.base_dataset,
            n_domains: family.n_domains,
            samples_per_domain: family.samples_per_domain,
            noise_std: family.noise_std,
            rotation_center: family.rotation_center,
            max_translation: family.max_translation,
            epochs_stage1: train.epochs_stage1,
            epochs_stage2: train.epochs_stage2,
            lr_stage1: train.lr_stage1,
            lr_stage2: train.lr_stage2,
            sgd_momentum: train.sgd_momentum,
            batch_size: train.batch_size,
            lambda: train.lambda,
            gbn_momentum: train.gbn_momentum,
            update_shared_stage2: train.update_shared_stage2,
            hidden: vec![32, 32],
            epsilon: DEFAULT_EPSILON,
            sigma: KernelConfig::default().sigma,
            buffer_capacity: DEFAULT_CAPACITY,
            alpha: DEFAULT_ALPHA,
            refine_lr: DEFAULT_REFINE_LR,
            variants: vec![VariantId::Baseline, VariantId::AdaGraphFull],
            continuous_variants: ContinuousVariant::ALL.to_vec(),
            seeds: vec![0],
            source: None,
            target: None,
            min_angle: 60.0,
            stream_length: stream.length,
            stream_start_deg: stream.start_deg,
            stream_end_deg: stream.end_deg,
            sweep_counts: vec![2, 8, 16],
            sweep_repeats: 5,
            record_wall_time: false,
            output: PathBuf::from("runs/latest"),
        }
    }
}

fn config_error(e: serde_json::Error) -> AdaGraphError {
    AdaGraphError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Merges the layers and validates the result. `file` is the text of a
    /// JSON object; `overrides` are already-typed flag values.
    pub fn resolve(file: Option<&str>, overrides: Map<String, Value>, env_seed: Option<&str>) -> Result<Self> {
        let mut merged = match serde_json::to_value(Self::default()).map_err(config_error)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let file_layer = match file {
            None => Map::new(),
            Some(text) => match serde_json::from_str::<Value>(text).map_err(config_error)? {
                Value::Object(m) => m,
                other => {
                    return Err(AdaGraphError::Config(format!(
                        "config must be a JSON object, got {other}"
                    )))
                }
            },
        };
        if let Some(s) = env_seed {
            if !file_layer.contains_key("seeds") && !overrides.contains_key("seeds") {
                let seed: u64 = s.trim().parse().map_err(|_| {
                    AdaGraphError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))
                })?;
                merged.insert("seeds".into(), Value::from(vec![seed]));
            }
        }
        merged.extend(file_layer);
        merged.extend(overrides);
        let cfg: Self = serde_json::from_value(Value::Object(merged)).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        KernelConfig::new(self.sigma)?;
        self.protocol()?.validate()?;
        self.family().validate(self.batch_size)?;
        if self.seeds.is_empty() {
            return Err(AdaGraphError::Config("seeds must not be empty".into()));
        }
        if self.variants.is_empty() {
            return Err(AdaGraphError::Config("variants must not be empty".into()));
        }
        if self.stream_length == 0 {
            return Err(AdaGraphError::Config("stream_length must be positive".into()));
        }
        if self.sweep_repeats == 0 {
            return Err(AdaGraphError::Config("sweep_repeats must be positive".into()));
        }
        for (name, id) in [("source", self.source), ("target", self.target)] {
            if let Some(i) = id {
                if i as usize >= self.n_domains {
                    return Err(AdaGraphError::Config(format!(
                        "{name} {i} outside 0..{}",
                        self.n_domains
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            lr_stage1: self.lr_stage1,
            lr_stage2: self.lr_stage2,
            sgd_momentum: self.sgd_momentum,
            batch_size: self.batch_size,
            lambda: self.lambda,
            gbn_momentum: self.gbn_momentum,
            update_shared_stage2: self.update_shared_stage2,
            seed: self.seeds.first().copied().unwrap_or(0),
        }
    }

    pub fn protocol(&self) -> Result<ProtocolConfig> {
        Ok(ProtocolConfig {
            train: self.train(),
            kernel: KernelConfig::new(self.sigma)?,
            hidden: self.hidden.clone(),
            epsilon: self.epsilon,
            buffer_capacity: self.buffer_capacity,
            refine_alpha: self.alpha,
            refine_lr: self.refine_lr,
            record_wall_time: self.record_wall_time,
        })
    }

    pub fn family(&self) -> DomainFamilySpec {
        DomainFamilySpec {
            base_dataset: self.base_dataset,
            n_domains: self.n_domains,
            samples_per_domain: self.samples_per_domain,
            noise_std: self.noise_std,
            rotation_center: self.rotation_center,
            max_translation: self.max_translation,
            seed: self.seeds.first().copied().unwrap_or(0),
        }
    }

    pub fn stream(&self) -> StreamSpec {
        StreamSpec {
            length: self.stream_length,
            start_deg: self.stream_start_deg,
            end_deg: self.stream_end_deg,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
