//! Run configuration: one flat TOML document, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{CorpusConfig, ProbeConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::eval::Method;
use crate::grft::GrftMode;
use crate::model::{ModelConfig, PretrainHyper};
use crate::train::TrainConfig;

/// Every tunable of the pipeline. Stage seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed.
    pub seed: u64,
    /// Output directory for every artifact.
    pub out: PathBuf,

    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub unknown_fraction: f64,
    pub objects_per_relation: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,

    pub fact_repeats: usize,
    pub reading_docs: usize,
    pub reading_true_fraction: f64,
    pub template_fraction: f64,
    pub distracted_docs: usize,
    pub recall_docs: usize,

    pub pretrain_lr: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_eval_every: usize,
    pub pretrain_target_accuracy: Option<f64>,

    pub probe_attempts: usize,
    pub probe_temperature: f64,
    pub probe_max_new: usize,

    /// Known and unknown facts in the training set.
    pub n_known: usize,
    pub n_unknown: usize,

    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub rank: usize,
    pub layer: usize,
    pub mode: GrftMode,
    pub gate_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    pub methods: Vec<Method>,
    pub max_new: usize,

    pub ablate_layers: Vec<usize>,
    pub ablate_samples: Vec<usize>,
    /// Run both sweeps as part of `all`.
    pub ablate_in_all: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let model = ModelConfig::default();
        let corpus = CorpusConfig::default();
        let pre = PretrainHyper::default();
        let probe = ProbeConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            n_entities: world.n_entities,
            n_relations: world.n_relations,
            n_facts: world.n_facts,
            unknown_fraction: world.unknown_fraction,
            objects_per_relation: world.objects_per_relation,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            max_seq: model.max_seq,
            fact_repeats: corpus.fact_repeats,
            reading_docs: corpus.reading_docs,
            reading_true_fraction: corpus.reading_true_fraction,
            template_fraction: corpus.template_fraction,
            distracted_docs: corpus.distracted_docs,
            recall_docs: corpus.recall_docs,
            pretrain_lr: pre.lr,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch,
            pretrain_eval_every: pre.eval_every,
            pretrain_target_accuracy: pre.target_accuracy,
            probe_attempts: probe.attempts,
            probe_temperature: probe.temperature,
            probe_max_new: probe.max_new,
            n_known: 100,
            n_unknown: 100,
            lr: train.lr,
            epochs: train.epochs,
            batch: train.batch,
            rank: train.rank,
            layer: train.layer_index,
            mode: train.mode,
            gate_weight: train.gate_weight,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            methods: Method::ALL.to_vec(),
            max_new: crate::infer::DEFAULT_MAX_NEW,
            ablate_layers: vec![0, 1, 2, 3],
            ablate_samples: vec![20, 60, 100],
            ablate_in_all: false,
        }
    }
}

/// Offsets of the per-stage seeds.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    World = 0,
    ModelInit = 1,
    Corpus = 2,
    Pretrain = 3,
    Probe = 4,
    TrainData = 5,
    TestData = 6,
    Train = 7,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(stage as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_entities", self.n_entities),
            ("n_relations", self.n_relations),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
            ("pretrain_batch", self.pretrain_batch),
            ("probe_attempts", self.probe_attempts),
            ("batch", self.batch),
            ("rank", self.rank),
            ("max_new", self.max_new),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{k} must be at least 1")));
        }
        if self.layer >= self.n_layers {
            return Err(Error::Validation(format!("layer {} is out of range for {} layers", self.layer, self.n_layers)));
        }
        if let Some(l) = self.ablate_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Validation(format!("ablation layer {l} is out of range for {} layers", self.n_layers)));
        }
        if self.ablate_samples.contains(&0) {
            return Err(Error::Validation("ablation sample sizes must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("methods must not be empty".into()));
        }
        for (k, v) in [
            ("unknown_fraction", self.unknown_fraction),
            ("reading_true_fraction", self.reading_true_fraction),
            ("template_fraction", self.template_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0) {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            seed: self.stage_seed(Stage::World),
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            n_facts: self.n_facts,
            unknown_fraction: self.unknown_fraction,
            objects_per_relation: self.objects_per_relation,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            seed: self.stage_seed(Stage::ModelInit),
        }
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            fact_repeats: self.fact_repeats,
            reading_docs: self.reading_docs,
            reading_true_fraction: self.reading_true_fraction,
            template_fraction: self.template_fraction,
            distracted_docs: self.distracted_docs,
            recall_docs: self.recall_docs,
            seed: self.stage_seed(Stage::Corpus),
        }
    }

    pub fn pretrain(&self) -> PretrainHyper {
        PretrainHyper {
            lr: self.pretrain_lr,
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            eval_every: self.pretrain_eval_every,
            target_accuracy: self.pretrain_target_accuracy,
            seed: self.stage_seed(Stage::Pretrain),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            attempts: self.probe_attempts,
            temperature: self.probe_temperature,
            max_new: self.probe_max_new,
            seed: self.stage_seed(Stage::Probe),
        }
    }

    /// Training settings for `mode`, with everything else from this config.
    pub fn train(&self, mode: GrftMode) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            rank: self.rank,
            layer_index: self.layer,
            mode,
            seed: self.stage_seed(Stage::Train),
            gate_weight: self.gate_weight,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
