//! Autoregressive decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{DecodeState, Hook};
use super::tokenizer::EOS;
use super::TinyModel;
use crate::error::{Error, Result};
use crate::numerics::tensor::softmax_in_place;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl GenerateParams {
    pub fn greedy(max_new: usize) -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, max_new, seed: 0 }
    }

    pub fn sample(temperature: f64, max_new: usize, seed: u64) -> Self {
        Self { mode: DecodeMode::Sample, temperature, max_new, seed }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl TinyModel {
    /// Continue `prompt` until EOS, `max_new` tokens, or the context limit.
    /// The returned continuation excludes EOS.
    pub fn generate(&self, prompt: &[usize], params: &GenerateParams, hook: Option<&dyn Hook>) -> Result<Vec<usize>> {
        Ok(self.generate_traced(prompt, params, hook)?.0)
    }

    /// Like [`generate`](Self::generate), also returning the decode state (hook telemetry).
    pub fn generate_traced(
        &self,
        prompt: &[usize],
        params: &GenerateParams,
        hook: Option<&dyn Hook>,
    ) -> Result<(Vec<usize>, DecodeState)> {
        if prompt.is_empty() {
            return Err(Error::Degenerate("generation needs a nonempty prompt".into()));
        }
        let greedy = params.mode == DecodeMode::Greedy || params.temperature <= 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut state = self.start();
        let logits = self.extend(&mut state, prompt, hook)?;
        let mut last = logits.row(logits.rows() - 1).to_vec();
        let mut out = Vec::new();
        while out.len() < params.max_new {
            let next = if greedy {
                argmax(&last)
            } else {
                last.iter_mut().for_each(|v| *v /= params.temperature);
                softmax_in_place(&mut last);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = last.len() - 1;
                for (i, &p) in last.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            if next == EOS {
                break;
            }
            out.push(next);
            if state.len() >= self.config.max_seq || out.len() == params.max_new {
                break;
            }
            let logits = self.extend(&mut state, &[next], hook)?;
            last = logits.row(0).to_vec();
        }
        Ok((out, state))
    }
}
