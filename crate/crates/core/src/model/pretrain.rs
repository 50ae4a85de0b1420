//! Next-token pretraining of the base model.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::GenerateParams;
use super::{ModelConfig, TinyModel};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Steps between known-fact probe evaluations.
    pub eval_every: usize,
    /// Stop once greedy probe accuracy reaches this fraction; `None` runs every step.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self { lr: 3e-3, steps: 3000, batch: 16, eval_every: 250, target_accuracy: None, seed: 0 }
    }
}

/// A prompt whose greedy continuation must contain `answer` as a contiguous run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownProbe {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub loss_history: Vec<f64>,
    pub probe_history: Vec<(usize, f64)>,
    pub steps_taken: usize,
    pub reached_target: bool,
}

fn contains_run(hay: &[usize], needle: &[usize]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Fraction of probes answered correctly under greedy decoding.
pub fn probe_accuracy(model: &TinyModel, probes: &[KnownProbe], max_new: usize) -> Result<f64> {
    if probes.is_empty() {
        return Ok(1.0);
    }
    let params = GenerateParams::greedy(max_new);
    let mut hits = 0;
    for p in probes {
        let out = model.generate(&p.prompt, &params, None)?;
        if contains_run(&out, &p.answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Loss and gradients of mean next-token cross-entropy over one sequence.
fn sequence_grads(model: &TinyModel, seq: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let w = model.tape_weights(&mut tape, true);
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let mut x = model.tape_embed(&mut tape, &w, inputs)?;
    for l in 0..model.config.n_layers {
        x = model.tape_layer(&mut tape, &w, l, x)?;
    }
    let logits = model.tape_logits(&mut tape, &w, x, None)?;
    let loss = tape.cross_entropy(logits, targets, &vec![true; targets.len()])?;
    let value = tape.value(loss).item();
    let grads = tape.grad(loss, &w.all)?;
    Ok((value, grads))
}

/// Train every base parameter on `corpus` (each sequence framed with BOS/EOS).
///
/// Training stops early once greedy accuracy on `probes` reaches
/// `hyper.target_accuracy`, when one is set.
pub fn pretrain_base(
    config: ModelConfig,
    corpus: &[Vec<usize>],
    probes: &[KnownProbe],
    hyper: &PretrainHyper,
) -> Result<(TinyModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("pretraining corpus is empty".into()));
    }
    if let Some(bad) = corpus.iter().position(|s| s.len() < 2) {
        return Err(Error::Degenerate(format!("corpus sequence {bad} has fewer than two tokens")));
    }
    if hyper.batch == 0 {
        return Err(Error::Config("pretraining batch must be positive".into()));
    }
    let mut model = TinyModel::init(config)?;
    let max_new = probes.iter().map(|p| p.answer.len()).max().unwrap_or(1) + 12;
    let mut opt = Adam::new(
        AdamConfig { lr: hyper.lr, ..Default::default() },
        model.tensors().iter().map(|t| t.len()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut report = PretrainReport { loss_history: Vec::new(), probe_history: Vec::new(), steps_taken: 0, reached_target: false };
    for step in 0..hyper.steps {
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for _ in 0..hyper.batch {
            let seq = &corpus[rng.gen_range(0..corpus.len())];
            let (loss, grads) = sequence_grads(&model, seq)?;
            total += loss;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.axpy(1.0, g)),
            }
        }
        let mean = total / hyper.batch as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {mean}") });
        }
        let mut grads = acc.expect("batch is nonempty");
        let scale = 1.0 / hyper.batch as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
        opt.update(model.tensors_mut(), &grads);
        report.loss_history.push(mean);
        report.steps_taken = step + 1;
        if hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0 {
            let acc = probe_accuracy(&model, probes, max_new)?;
            info!("pretrain step {}: loss {mean:.4}, probe accuracy {acc:.3}", step + 1);
            report.probe_history.push((step + 1, acc));
            if hyper.target_accuracy.is_some_and(|t| acc >= t) {
                report.reached_target = true;
                break;
            }
        }
    }
    Ok((model, report))
}
