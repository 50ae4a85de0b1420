//! Layer and training-set-size sweeps.

use std::fmt;

use log::info;
use serde::{Deserialize, Serialize};

use super::{eval_suite, EvalRow, Method, MethodRun};
use crate::datagen::{build_samples, build_test_samples, Category, FactWorld, ProbeOutcome, Sample};
use crate::error::{Error, Result};
use crate::model::{TinyModel, Tokenizer};
use crate::train::{train_grft, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Layer,
    NSamples,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Layer => "layer",
            AblationAxis::NSamples => "n_samples",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: usize,
    /// Rows of the gated method at this point.
    pub rows: Vec<EvalRow>,
}

impl AblationPoint {
    /// Sample-weighted accuracy over `categories`.
    pub fn accuracy(&self, categories: &[Category]) -> Option<f64> {
        let (mut hits, mut n) = (0.0, 0);
        for r in self.rows.iter().filter(|r| categories.contains(&r.category)) {
            hits += r.accuracy * r.n as f64;
            n += r.n;
        }
        (n > 0).then(|| hits / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    /// Sorted by value.
    pub points: Vec<AblationPoint>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl AblationReport {
    pub fn point(&self, value: usize) -> Option<&AblationPoint> {
        self.points.iter().find(|p| p.value == value)
    }
}

fn sorted_unique(values: &[usize]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn train_and_eval(model: &TinyModel, tok: &Tokenizer, train: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<Vec<EvalRow>> {
    let report = train_grft(model, tok, train, cfg)?;
    let gcfg = cfg.grft_config(model.config.d_model);
    let run = MethodRun::with_edit(Method::Grft, &report.params, &gcfg);
    Ok(eval_suite(model, tok, test, &[run], serde_json::Value::Null, cfg.seed)?.rows)
}

/// Train and evaluate the edit at each layer with otherwise identical settings.
pub fn ablate_layers(
    model: &TinyModel,
    tok: &Tokenizer,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    layers: &[usize],
) -> Result<AblationReport> {
    if layers.is_empty() {
        return Err(Error::Degenerate("layer sweep needs at least one layer".into()));
    }
    let mut points = Vec::new();
    for layer in sorted_unique(layers) {
        info!("layer sweep: training at layer {layer}");
        let cfg = TrainConfig { layer_index: layer, ..cfg.clone() };
        points.push(AblationPoint { value: layer, rows: train_and_eval(model, tok, train, test, &cfg)? });
    }
    Ok(AblationReport { axis: AblationAxis::Layer, points, config: serde_json::to_value(cfg)?, seed: cfg.seed })
}

/// Train with `n` known and `n` unknown queries for each `n` and evaluate on
/// one test set, disjoint from the largest training set.
#[allow(clippy::too_many_arguments)]
pub fn ablate_samples(
    model: &TinyModel,
    tok: &Tokenizer,
    world: &FactWorld,
    probe: &[ProbeOutcome],
    n_values: &[usize],
    cfg: &TrainConfig,
    data_seed: u64,
    test_seed: u64,
) -> Result<AblationReport> {
    let values = sorted_unique(n_values);
    match values.first() {
        None => return Err(Error::Degenerate("sample sweep needs at least one size".into())),
        Some(0) => return Err(Error::Degenerate("sample sweep size 0 leaves nothing to train on".into())),
        _ => {}
    }
    let largest = *values.last().expect("nonempty");
    let test = build_test_samples(world, probe, &build_samples(world, probe, largest, largest, data_seed)?, test_seed)?;
    let mut points = Vec::new();
    for n in values {
        info!("sample sweep: training with {n} known and {n} unknown queries");
        let train = build_samples(world, probe, n, n, data_seed)?;
        points.push(AblationPoint { value: n, rows: train_and_eval(model, tok, &train, &test, cfg)? });
    }
    Ok(AblationReport { axis: AblationAxis::NSamples, points, config: serde_json::to_value(cfg)?, seed: cfg.seed })
}
