//! Three-attempt known/unknown probing of the base model.

use serde::{Deserialize, Serialize};

use super::world::{Fact, FactWorld};
use super::encode_prompt;
use crate::error::Result;
use crate::eval::score_answer;
use crate::model::{GenerateParams, TinyModel, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    /// Correct in every attempt.
    Known,
    /// Wrong in every attempt.
    Unknown,
    /// Mixed outcomes.
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub attempts: usize,
    pub temperature: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { attempts: 3, temperature: 1.0, max_new: 12, seed: 0 }
    }
}

fn attempt_seed(seed: u64, fact: usize, attempt: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((fact as u64) << 8) ^ attempt as u64
}

/// Ask the bare question with sampled decoding, once per attempt seed.
pub fn probe_known(
    model: &TinyModel,
    tok: &Tokenizer,
    world: &FactWorld,
    fact: &Fact,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let prompt = encode_prompt(tok, None, &world.question(fact))?;
    let mut correct = 0;
    for a in 0..cfg.attempts {
        let params = GenerateParams::sample(cfg.temperature, cfg.max_new, attempt_seed(cfg.seed, fact.id, a));
        let out = model.generate(&prompt, &params, None)?;
        if score_answer(&tok.detokenize(&out), &fact.object) {
            correct += 1;
        }
    }
    Ok(if correct == cfg.attempts {
        ProbeOutcome::Known
    } else if correct == 0 {
        ProbeOutcome::Unknown
    } else {
        ProbeOutcome::Excluded
    })
}

/// Probe every fact; the result is indexed by fact id.
pub fn probe_world(model: &TinyModel, tok: &Tokenizer, world: &FactWorld, cfg: &ProbeConfig) -> Result<Vec<ProbeOutcome>> {
    world.facts.iter().map(|f| probe_known(model, tok, world, f, cfg)).collect()
}
