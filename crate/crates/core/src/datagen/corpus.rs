//! Pretraining documents for the base model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{Fact, FactWorld};
use super::{
    contradictory_target, encode_document, encode_prompt, helpful_target, prompt_text, unhelpful_target, INTERNAL_SLOT,
};
use crate::error::Result;
use crate::model::{KnownProbe, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Copies of each declarative and each bare QA template per known fact.
    pub fact_repeats: usize,
    /// Reading-comprehension documents: a context, a question about it and
    /// the answer the context states.
    pub reading_docs: usize,
    /// Share of reading documents about a known fact whose context states the true object.
    pub reading_true_fraction: f64,
    /// Share of reading documents answered with a response template instead of
    /// the plain sentence: the contradictory template for a false context about
    /// a known fact, the helpful one otherwise.
    pub template_fraction: f64,
    /// Documents about a known fact whose context only states another fact of
    /// the same subject; answered with the unhelpful template at
    /// `template_fraction`, otherwise with the true sentence.
    pub distracted_docs: usize,
    /// Documents recalling a known fact after the internal-knowledge phrase.
    pub recall_docs: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { fact_repeats: 2, reading_docs: 2000, reading_true_fraction: 0.5, template_fraction: 0.45, distracted_docs: 600, recall_docs: 0, seed: 0 }
    }
}

/// Object for a sentence about `fact` in the corpus: never the true object
/// of an unknown-designated fact.
fn corpus_object<'w>(world: &'w FactWorld, fact: &'w Fact, allow_true: bool, rng: &mut impl Rng) -> &'w str {
    if allow_true && world.is_known_designated(fact.id) {
        &fact.object
    } else {
        world.distractors(fact).choose(rng).copied().expect("worlds always have distractors")
    }
}

/// Document texts, in a fixed shuffled order.
pub fn corpus_texts(world: &FactWorld, cfg: &CorpusConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::new();
    for &id in &world.known_designated {
        let f = world.fact(id);
        let rel = world.relation(f);
        for _ in 0..cfg.fact_repeats {
            for t in 0..rel.declaratives.len() {
                docs.push(rel.sentence(t, &f.subject, &f.object));
            }
            for q in 0..rel.questions.len() {
                docs.push(format!("{} {}", prompt_text(None, &rel.question(q, &f.subject)), world.answer_sentence(f)));
            }
        }
    }
    for _ in 0..cfg.reading_docs {
        let f = world.facts.choose(&mut rng).expect("world has facts");
        let rel = world.relation(f);
        let object = corpus_object(world, f, rng.gen_bool(cfg.reading_true_fraction), &mut rng).to_string();
        let main = rel.sentence(rng.gen_range(0..rel.declaratives.len()), &f.subject, &object);
        let context = if rng.gen_bool(0.5) {
            let others: Vec<&Fact> = world.same_subject(f).collect();
            match others.choose(&mut rng) {
                Some(g) => {
                    let o = corpus_object(world, g, true, &mut rng);
                    let r = world.relation(g);
                    let filler = r.sentence(rng.gen_range(0..r.declaratives.len()), &g.subject, o);
                    if rng.gen_bool(0.5) { format!("{main} {filler}") } else { format!("{filler} {main}") }
                }
                None => main,
            }
        } else {
            main
        };
        let q = rel.question(rng.gen_range(0..rel.questions.len()), &f.subject);
        let stated = world.sentence_with(f, &object);
        let answer = if rng.gen_bool(cfg.template_fraction) {
            let known = world.is_known_designated(f.id);
            if known && object != f.object {
                contradictory_target(&world.answer_sentence(f), &stated)
            } else {
                helpful_target(&stated)
            }
        } else {
            stated
        };
        docs.push(format!("{} {answer}", prompt_text(Some(&context), &q)));
    }
    for _ in 0..cfg.distracted_docs {
        let id = *world.known_designated.choose(&mut rng).expect("distracted documents need known facts");
        let f = world.fact(id);
        let others: Vec<&Fact> = world.same_subject(f).collect();
        let Some(g) = others.choose(&mut rng) else { continue };
        let o = corpus_object(world, g, true, &mut rng);
        let r = world.relation(g);
        let context = r.sentence(rng.gen_range(0..r.declaratives.len()), &g.subject, o);
        let rel = world.relation(f);
        let q = rel.question(rng.gen_range(0..rel.questions.len()), &f.subject);
        let answer = if rng.gen_bool(cfg.template_fraction) {
            unhelpful_target(&world.answer_sentence(f))
        } else {
            world.answer_sentence(f)
        };
        docs.push(format!("{} {answer}", prompt_text(Some(&context), &q)));
    }
    for _ in 0..cfg.recall_docs {
        let id = *world.known_designated.choose(&mut rng).expect("recall documents need known facts");
        docs.push(format!("{INTERNAL_SLOT} {}", world.answer_sentence(world.fact(id))));
    }
    docs.shuffle(&mut rng);
    docs
}

/// Tokenized documents, each framed with BOS and EOS.
pub fn gen_base_corpus(world: &FactWorld, tok: &Tokenizer, cfg: &CorpusConfig) -> Result<Vec<Vec<usize>>> {
    corpus_texts(world, cfg).iter().map(|d| encode_document(tok, d)).collect()
}

/// Bare-question probes for every known-designated fact.
pub fn known_probes(world: &FactWorld, tok: &Tokenizer) -> Result<Vec<KnownProbe>> {
    world
        .known_designated
        .iter()
        .map(|&id| {
            let f = world.fact(id);
            Ok(KnownProbe { prompt: encode_prompt(tok, None, &world.question(f))?, answer: tok.encode(&f.object)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_world, tokenizer_for, WorldConfig};
    use crate::model::tokenizer::UNK;

    #[test]
    fn corpus_never_pairs_unknown_subject_with_its_object() {
        let w = gen_world(&WorldConfig::default()).unwrap();
        let docs = corpus_texts(&w, &CorpusConfig { recall_docs: 200, ..Default::default() });
        let unknown: Vec<&Fact> = w.unknown_designated.iter().map(|&id| w.fact(id)).collect();
        for d in &docs {
            for sentence in d.split(['.', '?']) {
                let words: Vec<&str> = sentence.split_whitespace().collect();
                for f in &unknown {
                    assert!(
                        !(words.contains(&f.subject.as_str()) && words.contains(&f.object.as_str())),
                        "{sentence}"
                    );
                }
            }
        }
    }

    #[test]
    fn known_facts_repeat_and_tokenize() {
        let w = gen_world(&WorldConfig::default()).unwrap();
        let cfg = CorpusConfig::default();
        let docs = corpus_texts(&w, &cfg);
        for &id in &w.known_designated {
            let f = w.fact(id);
            let hits = docs
                .iter()
                .flat_map(|d| d.split(['.', '?']))
                .filter(|s| {
                    let words: Vec<&str> = s.split_whitespace().collect();
                    words.contains(&f.subject.as_str()) && words.contains(&f.object.as_str())
                })
                .count();
            assert!(hits >= 8, "fact {id} appears {hits} times");
        }
        let tok = tokenizer_for(&w);
        let corpus = gen_base_corpus(&w, &tok, &cfg).unwrap();
        assert!(corpus.iter().flatten().all(|&t| t != UNK));
        assert_eq!(corpus_texts(&w, &cfg), docs);
    }
}
