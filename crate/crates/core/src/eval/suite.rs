//! Per-category accuracy suites and gate statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::score_answer;
use crate::datagen::{encode_prompt, Category, Sample, Variant};
use crate::error::{Error, Result};
use crate::grft::{GrftConfig, GrftMode, GrftParams};
use crate::infer::{Answerer, DEFAULT_MAX_NEW};
use crate::model::{GenerateParams, TinyModel, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Grft,
    GrftRequery,
    ReftNoGate,
    GrftNoGateLoss,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Base, Method::Grft, Method::GrftRequery, Method::ReftNoGate, Method::GrftNoGateLoss];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Grft => "grft",
            Method::GrftRequery => "grft_requery",
            Method::ReftNoGate => "reft_no_gate",
            Method::GrftNoGateLoss => "grft_no_gate_loss",
        }
    }

    /// Training mode of the edit this method runs, if any.
    pub fn mode(self) -> Option<GrftMode> {
        match self {
            Method::Base => None,
            Method::Grft | Method::GrftRequery => Some(GrftMode::Grft),
            Method::ReftNoGate => Some(GrftMode::ReftNoGate),
            Method::GrftNoGateLoss => Some(GrftMode::GrftNoGateLoss),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::Validation(format!("unknown method '{s}', expected one of {}", valid.join(", ")))
        })
    }
}

/// A method together with the trained edit it uses.
#[derive(Clone, Copy, Debug)]
pub struct MethodRun<'a> {
    pub method: Method,
    pub edit: Option<(&'a GrftParams, &'a GrftConfig)>,
}

impl<'a> MethodRun<'a> {
    pub fn base() -> Self {
        Self { method: Method::Base, edit: None }
    }

    pub fn with_edit(method: Method, params: &'a GrftParams, cfg: &'a GrftConfig) -> Self {
        Self { method, edit: Some((params, cfg)) }
    }

    fn check(&self) -> Result<()> {
        match (self.method.mode(), self.edit) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Validation("the base method takes no edit".into())),
            (Some(_), None) => Err(Error::Validation(format!("method {} needs trained parameters", self.method))),
            (Some(m), Some((_, cfg))) if m != cfg.mode => Err(Error::Validation(format!(
                "method {} needs parameters trained in mode {m}, got {}",
                self.method, cfg.mode
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub category: Category,
    pub variant: Variant,
    pub n: usize,
    pub accuracy: f64,
    /// Accuracy against the context's answer; contradictory rows only.
    pub external_accuracy: Option<f64>,
    pub mean_gate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Resolved configuration of the run that produced the report.
    pub config: serde_json::Value,
    pub seed: u64,
}

impl EvalReport {
    pub fn row(&self, method: Method, category: Category, variant: Variant) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.category == category && r.variant == variant)
    }

    /// Sample-weighted accuracy of `method` over the given categories.
    pub fn accuracy(&self, method: Method, categories: &[Category]) -> Option<f64> {
        let (mut hits, mut n) = (0.0, 0);
        for r in self.rows.iter().filter(|r| r.method == method && categories.contains(&r.category)) {
            hits += r.accuracy * r.n as f64;
            n += r.n;
        }
        (n > 0).then(|| hits / n as f64)
    }

    /// Sample-weighted mean gate of `method` over the given categories.
    pub fn mean_gate(&self, method: Method, categories: &[Category]) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0);
        for r in self.rows.iter().filter(|r| r.method == method && categories.contains(&r.category)) {
            sum += r.mean_gate? * r.n as f64;
            n += r.n;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub method: Method,
    pub output: String,
    pub correct: bool,
    pub gate: Option<f64>,
}

fn predict(model: &TinyModel, tok: &Tokenizer, run: &MethodRun<'_>, s: &Sample) -> Result<Prediction> {
    let gold = s.gold().ok_or_else(|| Error::Validation(format!("sample {} has no gold answer", s.id)))?;
    let (output, gate) = match run.edit {
        None => {
            let prompt = encode_prompt(tok, Some(&s.context), &s.question)?;
            let out = model.generate(&prompt, &GenerateParams::greedy(DEFAULT_MAX_NEW), None)?;
            (tok.detokenize(&out), None)
        }
        Some((params, cfg)) => {
            let answerer = Answerer::new(model, tok, params, cfg);
            let ans = if run.method == Method::GrftRequery {
                answerer.requery(&s.context, &s.question)?
            } else {
                answerer.direct(&s.context, &s.question)?
            };
            (ans.text, ans.gate_at_prompt_end)
        }
    };
    Ok(Prediction { id: s.id.clone(), method: run.method, correct: score_answer(&output, gold), output, gate })
}

/// Outputs of every method on every sample, in method then sample order.
pub fn predict_all(model: &TinyModel, tok: &Tokenizer, test: &[Sample], runs: &[MethodRun<'_>]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(test.len() * runs.len());
    for run in runs {
        run.check()?;
        for s in test {
            out.push(predict(model, tok, run, s)?);
        }
    }
    Ok(out)
}

/// Aggregate predictions into rows per method, category and variant.
pub fn aggregate(test: &[Sample], runs: &[MethodRun<'_>], preds: &[Prediction]) -> Result<Vec<EvalRow>> {
    let by_id: BTreeMap<&str, &Sample> = test.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut rows = Vec::new();
    for run in runs {
        #[derive(Default)]
        struct Acc {
            n: usize,
            hits: usize,
            ext: usize,
            gate: f64,
        }
        let mut groups: BTreeMap<(usize, Variant), Acc> = BTreeMap::new();
        let mut gated = true;
        for p in preds.iter().filter(|p| p.method == run.method) {
            let s = by_id.get(p.id.as_str()).ok_or_else(|| Error::Validation(format!("prediction for unknown id {}", p.id)))?;
            let rank = Category::ALL.iter().position(|&c| c == s.category).expect("every category is listed");
            let a = groups.entry((rank, s.variant())).or_default();
            a.n += 1;
            a.hits += p.correct as usize;
            if let Some(ext) = &s.ans_external {
                a.ext += score_answer(&p.output, ext) as usize;
            }
            match p.gate {
                Some(g) => a.gate += g,
                None => gated = false,
            }
        }
        for c in Category::ALL {
            if !groups.keys().any(|&(r, _)| Category::ALL[r] == c) {
                warn!("no {c} samples for method {}", run.method);
            }
        }
        for ((rank, variant), a) in groups {
            let category = Category::ALL[rank];
            let n = a.n as f64;
            rows.push(EvalRow {
                method: run.method,
                category,
                variant,
                n: a.n,
                accuracy: a.hits as f64 / n,
                external_accuracy: (category == Category::Contradictory).then(|| a.ext as f64 / n),
                mean_gate: gated.then(|| a.gate / n),
            });
        }
    }
    Ok(rows)
}

/// Accuracy of each method on each category and variant of `test`.
pub fn eval_suite(
    model: &TinyModel,
    tok: &Tokenizer,
    test: &[Sample],
    runs: &[MethodRun<'_>],
    config: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict_all(model, tok, test, runs)?;
    Ok(EvalReport { rows: aggregate(test, runs, &preds)?, config, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStat {
    pub category: Category,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Gate values at the final prompt token of each sample.
pub fn prompt_gates(model: &TinyModel, tok: &Tokenizer, params: &GrftParams, cfg: &GrftConfig, samples: &[Sample]) -> Result<Vec<f64>> {
    cfg.check_model(&model.config)?;
    samples
        .iter()
        .map(|s| {
            let prompt = encode_prompt(tok, Some(&s.context), &s.question)?;
            let h = model.hidden_at(&prompt, cfg.layer_index)?;
            params.gate(h.row(h.rows() - 1))
        })
        .collect()
}

/// Mean and population standard deviation of the prompt-end gate per category.
pub fn gate_stats(model: &TinyModel, tok: &Tokenizer, params: &GrftParams, cfg: &GrftConfig, samples: &[Sample]) -> Result<Vec<GateStat>> {
    let gates = prompt_gates(model, tok, params, cfg, samples)?;
    let mut out = Vec::new();
    for c in Category::ALL {
        let g: Vec<f64> = samples.iter().zip(&gates).filter(|(s, _)| s.category == c).map(|(_, &g)| g).collect();
        if g.is_empty() {
            continue;
        }
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        out.push(GateStat { category: c, n: g.len(), mean, std: var.sqrt() });
    }
    Ok(out)
}

/// Mean gate on noisy categories minus mean gate on the others, each
/// weighted by sample count.
pub fn gate_gap(stats: &[GateStat]) -> Option<f64> {
    let mean = |noisy: bool| {
        let (s, n) = stats
            .iter()
            .filter(|g| g.category.is_noisy() == noisy)
            .fold((0.0, 0), |(s, n), g| (s + g.mean * g.n as f64, n + g.n));
        (n > 0).then(|| s / n as f64)
    };
    Some(mean(true)? - mean(false)?)
}
