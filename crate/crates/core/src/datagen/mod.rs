//! Synthetic world, base-model corpus, known/unknown probing and the
//! four-category training samples.

mod corpus;
mod probe;
mod samples;
mod world;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::tokenizer::{Tokenizer, BOS, EOS};

pub use corpus::{corpus_texts, gen_base_corpus, known_probes, CorpusConfig};
pub use probe::{probe_known, probe_world, ProbeConfig, ProbeOutcome};
pub use samples::{
    build_samples, build_test_samples, check_disjoint, load_samples, make_context, parse_samples, save_samples,
    ContextKind, Sample,
};
pub use world::{gen_world, Fact, FactWorld, Relation, WorldConfig, MAX_RELATIONS};

pub const HELPFUL_PREFIX: &str = "Based on the information,";
pub const CONTRADICTORY_PREFIX: &str = "This context is CONTRADICTORY with my own knowledge,";
pub const UNHELPFUL_PREFIX: &str = "The context is NOT HELPFUL to the question.";
pub const INTERNAL_SLOT: &str = "Based on what I know,";
pub const EXTERNAL_SLOT: &str = "However, based on the context,";

/// Fixed text outside the relation templates; part of every vocabulary.
pub(crate) const FIXED_TEXTS: [&str; 6] =
    ["context: question: answer:", HELPFUL_PREFIX, CONTRADICTORY_PREFIX, UNHELPFUL_PREFIX, INTERNAL_SLOT, EXTERNAL_SLOT];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    HelpfulUnknown,
    Matched,
    Contradictory,
    UnhelpfulRandom,
    UnhelpfulDistracted,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Matched,
        Category::Contradictory,
        Category::UnhelpfulRandom,
        Category::UnhelpfulDistracted,
        Category::HelpfulUnknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::HelpfulUnknown => "helpful_unknown",
            Category::Matched => "matched",
            Category::Contradictory => "contradictory",
            Category::UnhelpfulRandom => "unhelpful_random",
            Category::UnhelpfulDistracted => "unhelpful_distracted",
        }
    }

    /// 1 for contexts that call for intervention.
    pub fn gate_label(self) -> u8 {
        match self {
            Category::HelpfulUnknown | Category::Matched => 0,
            _ => 1,
        }
    }

    pub fn is_noisy(self) -> bool {
        self.gate_label() == 1
    }

    pub fn is_unhelpful(self) -> bool {
        matches!(self, Category::UnhelpfulRandom | Category::UnhelpfulDistracted)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown category '{s}'")))
    }
}

/// Evaluation axis within a category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "short")]
    Short,
    #[serde(rename = "long")]
    Long,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "distracted")]
    Distracted,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Short => "short",
            Variant::Long => "long",
            Variant::Random => "random",
            Variant::Distracted => "distracted",
            Variant::NotApplicable => "n/a",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Short, Variant::Long, Variant::Random, Variant::Distracted, Variant::NotApplicable]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant '{s}'")))
    }
}

/// Prompt text; the bare form omits the context.
pub fn prompt_text(context: Option<&str>, question: &str) -> String {
    match context {
        Some(c) => format!("context: {c} <sep> question: {question} <sep> answer:"),
        None => format!("question: {question} <sep> answer:"),
    }
}

/// BOS followed by the encoded prompt.
pub fn encode_prompt(tok: &Tokenizer, context: Option<&str>, question: &str) -> Result<Vec<usize>> {
    let mut out = vec![BOS];
    out.extend(tok.encode(&prompt_text(context, question))?);
    Ok(out)
}

/// A whole document framed with BOS and EOS.
pub fn encode_document(tok: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    let mut out = vec![BOS];
    out.extend(tok.encode(text)?);
    out.push(EOS);
    Ok(out)
}

pub fn tokenizer_for(world: &FactWorld) -> Tokenizer {
    let texts = world.vocabulary_texts();
    Tokenizer::from_texts(texts.iter().map(String::as_str))
}

pub fn helpful_target(answer_sentence: &str) -> String {
    format!("{HELPFUL_PREFIX} {answer_sentence}")
}

pub fn contradictory_target(internal: &str, external: &str) -> String {
    format!("{CONTRADICTORY_PREFIX} {INTERNAL_SLOT} {internal} {EXTERNAL_SLOT} {external}")
}

pub fn unhelpful_target(internal: &str) -> String {
    format!("{UNHELPFUL_PREFIX} {INTERNAL_SLOT} {internal}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_labels_follow_category() {
        assert_eq!(Category::Matched.gate_label(), 0);
        assert_eq!(Category::HelpfulUnknown.gate_label(), 0);
        assert_eq!(Category::Contradictory.gate_label(), 1);
        assert_eq!(Category::UnhelpfulRandom.gate_label(), 1);
        assert_eq!(Category::UnhelpfulDistracted.gate_label(), 1);
    }

    #[test]
    fn templates_quote_the_figure_text() {
        let t = contradictory_target("Sacramento is the capital of California.", "Sacramento is the capital of Harding County.");
        assert_eq!(
            t,
            "This context is CONTRADICTORY with my own knowledge, Based on what I know, Sacramento is the capital of \
             California. However, based on the context, Sacramento is the capital of Harding County."
        );
        assert_eq!(
            unhelpful_target("Sacramento is the capital of California."),
            "The context is NOT HELPFUL to the question. Based on what I know, Sacramento is the capital of California."
        );
        assert_eq!(
            helpful_target("Germany is the first country."),
            "Based on the information, Germany is the first country."
        );
    }

    #[test]
    fn names_parse_back() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
        assert_eq!(serde_json::to_string(&Variant::NotApplicable).unwrap(), "\"n/a\"");
        assert!("irrelevant".parse::<Category>().is_err());
    }
}
