use serde::{Deserialize, Serialize};

use crate::error::{MgcotError, Result};
use crate::model::{Ablation, ModelConfig};

/// Every tunable of a training run, as a flat key-value record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: String,
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    pub adj_dropout: f64,
    pub entmax_iters: usize,
    pub layer_norm: bool,
    pub ggnn_steps: usize,
    pub top_k: usize,
    pub beta: f64,
    pub tau: f64,
    pub gcn_relu: bool,
    pub split_embeddings: bool,
    pub max_position: usize,
    /// `full` or one of the ablation names.
    pub ablation: String,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Shortest-path neighbors kept per source; 0 keeps all.
    pub k_sp: usize,
    pub cooccurrence_window: usize,
    pub directed: bool,
    pub slice_threshold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            dataset: "custom".into(),
            d: m.d,
            heads: m.heads,
            dropout: m.dropout,
            adj_dropout: m.adj_dropout,
            entmax_iters: m.entmax_iters,
            layer_norm: m.layer_norm,
            ggnn_steps: m.ggnn_steps,
            top_k: m.top_k,
            beta: m.beta,
            tau: m.tau,
            gcn_relu: m.gcn_relu,
            split_embeddings: m.split_embeddings,
            max_position: m.max_position,
            ablation: "full".into(),
            batch_size: 512,
            eval_batch_size: 512,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: 3,
            weight_decay: 1e-5,
            epochs: 10,
            patience: 3,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            seed: 2024,
            k_sp: 50,
            cooccurrence_window: 1,
            directed: false,
            slice_threshold: 5,
        }
    }
}

/// `(top_k, β, heads)` per known dataset.
pub const DATASET_DEFAULTS: [(&str, usize, f64, usize); 3] = [
    ("tmall", 6, 0.05, 2),
    ("retailrocket", 2, 5.0, 2),
    ("diginetica", 3, 5.0, 1),
];

impl TrainConfig {
    /// Defaults with the per-dataset values applied.
    pub fn for_dataset(name: &str) -> Result<Self> {
        let mut cfg = TrainConfig {
            dataset: name.to_string(),
            ..TrainConfig::default()
        };
        match DATASET_DEFAULTS.iter().find(|d| d.0 == name) {
            Some(&(_, top_k, beta, heads)) => {
                cfg.top_k = top_k;
                cfg.beta = beta;
                cfg.heads = heads;
            }
            None if name == "custom" || name == "synthetic" => {}
            None => {
                return Err(MgcotError::Config(format!(
                    "unknown dataset {name:?}; expected tmall, retailrocket, diginetica, synthetic or custom"
                )))
            }
        }
        Ok(cfg)
    }

    /// Parses a TOML key-value file. Keys absent from the file take the
    /// defaults of its `dataset` (or of `dataset_override` when given).
    pub fn from_toml_str(text: &str, dataset_override: Option<&str>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| MgcotError::Config(format!("config: {}", e.message())))?;
        let dataset = match dataset_override {
            Some(d) => d.to_string(),
            None => match table.get("dataset") {
                Some(toml::Value::String(s)) => s.clone(),
                Some(_) => return Err(MgcotError::Config("dataset must be a string".into())),
                None => "custom".to_string(),
            },
        };
        let base = toml::Table::try_from(TrainConfig::for_dataset(&dataset)?)
            .map_err(|e| MgcotError::Config(e.to_string()))?;
        for (k, v) in base {
            table.entry(k).or_insert(v);
        }
        table.insert("dataset".into(), toml::Value::String(dataset));
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| MgcotError::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn ablation(&self) -> Result<Ablation> {
        let mut a = Ablation::default();
        for part in self.ablation.split('+').map(str::trim) {
            let p = Ablation::parse(part)?;
            a.no_neighbor_sessions |= p.no_neighbor_sessions;
            a.no_multi_attention |= p.no_multi_attention;
            a.no_contrastive |= p.no_contrastive;
        }
        Ok(a)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d: self.d,
            heads: self.heads,
            dropout: self.dropout,
            adj_dropout: self.adj_dropout,
            entmax_iters: self.entmax_iters,
            layer_norm: self.layer_norm,
            ggnn_steps: self.ggnn_steps,
            top_k: self.top_k,
            beta: self.beta,
            tau: self.tau,
            gcn_relu: self.gcn_relu,
            split_embeddings: self.split_embeddings,
            max_position: self.max_position,
            ablation: self.ablation()?,
        })
    }

    /// `lr(e) = lr0 · decay^⌊e / every⌋` for 0-based epoch `e`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn k_sp(&self) -> Option<usize> {
        (self.k_sp > 0).then_some(self.k_sp)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("cooccurrence_window", self.cooccurrence_window),
        ];
        if let Some((name, _)) = positive.iter().find(|p| p.1 == 0) {
            return Err(MgcotError::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(MgcotError::Config(
                "learning rate and decay must be positive, weight decay and clip norm non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(MgcotError::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}
