//! Answering with a trained edit: direct generation, and requery of the base
//! model when the output flags its context.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::datagen::{encode_prompt, INTERNAL_SLOT};
use crate::error::{Error, Result};
use crate::grft::{make_hook, GrftConfig, GrftParams};
use crate::model::{GenerateParams, TinyModel, Tokenizer};

pub const CONTRADICTORY_MARK: &str = "CONTRADICTORY";
pub const UNHELPFUL_MARKS: [&str; 2] = ["NOT HELPFUL", "UNHELPFUL"];
/// Default generation budget, long enough for the contradictory template.
pub const DEFAULT_MAX_NEW: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    Contradictory,
    Unhelpful,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub kind: MarkerKind,
    pub matched: String,
    /// Byte offset of the match.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub used_requery: bool,
    /// Gate at the final prompt token; absent for ungated edits.
    pub gate_at_prompt_end: Option<f64>,
    pub marker: Option<Marker>,
    /// Set when a marker was found but the internal-answer slot was not.
    pub substitution_error: Option<String>,
}

/// First indicator in `text`; contradictory is checked before unhelpful.
pub fn detect_marker(text: &str) -> Option<Marker> {
    if let Some(position) = text.find(CONTRADICTORY_MARK) {
        return Some(Marker { kind: MarkerKind::Contradictory, matched: CONTRADICTORY_MARK.into(), position });
    }
    UNHELPFUL_MARKS
        .iter()
        .filter_map(|m| text.find(m).map(|p| (p, *m)))
        .min()
        .map(|(position, m)| Marker { kind: MarkerKind::Unhelpful, matched: m.into(), position })
}

/// Byte range of the internal-answer slot: after the internal phrase, up to
/// and including the next period followed by a space or the end, or up to
/// `" However,"`, whichever comes first.
pub fn internal_slot(text: &str) -> Option<(usize, usize)> {
    let phrase = format!("{INTERNAL_SLOT} ");
    let start = text.find(&phrase)? + phrase.len();
    let rest = &text[start..];
    let mut end = rest.len();
    if let Some(i) = rest.find(" However,") {
        end = i;
    }
    let period = rest.char_indices().find(|&(i, c)| c == '.' && (i + 1 == rest.len() || rest[i + 1..].starts_with(' ')));
    if let Some((i, _)) = period {
        end = end.min(i + 1);
    }
    Some((start, start + end))
}

/// Replace the internal-answer slot of `text` with `internal`.
pub fn substitute_internal(text: &str, internal: &str) -> Result<String> {
    let (a, b) = internal_slot(text)
        .ok_or_else(|| Error::Substitution(format!("no \"{INTERNAL_SLOT}\" slot in output {text:?}")))?;
    Ok(format!("{}{}{}", &text[..a], internal.trim(), &text[b..]))
}

/// Answers questions with a base model and a trained edit, counting model queries.
pub struct Answerer<'a> {
    pub model: &'a TinyModel,
    pub tok: &'a Tokenizer,
    pub params: &'a GrftParams,
    pub cfg: &'a GrftConfig,
    pub max_new: usize,
    queries: Cell<usize>,
}

impl<'a> Answerer<'a> {
    pub fn new(model: &'a TinyModel, tok: &'a Tokenizer, params: &'a GrftParams, cfg: &'a GrftConfig) -> Self {
        Self { model, tok, params, cfg, max_new: DEFAULT_MAX_NEW, queries: Cell::new(0) }
    }

    /// Model queries issued so far.
    pub fn queries(&self) -> usize {
        self.queries.get()
    }

    /// Greedy generation with the edit active.
    pub fn direct(&self, context: &str, question: &str) -> Result<Answer> {
        let hook = make_hook(self.params, self.cfg, &self.model.config)?;
        let prompt = encode_prompt(self.tok, Some(context), question)?;
        self.queries.set(self.queries.get() + 1);
        let (out, state) = self.model.generate_traced(&prompt, &GenerateParams::greedy(self.max_new), Some(&hook))?;
        let text = self.tok.detokenize(&out);
        let gate_at_prompt_end =
            if self.cfg.mode.has_gate() { state.telemetry.get(prompt.len() - 1).copied() } else { None };
        Ok(Answer { marker: detect_marker(&text), text, used_requery: false, gate_at_prompt_end, substitution_error: None })
    }

    /// The base model's greedy answer to the bare question.
    pub fn internal_answer(&self, question: &str) -> Result<String> {
        let prompt = encode_prompt(self.tok, None, question)?;
        self.queries.set(self.queries.get() + 1);
        let out = self.model.generate(&prompt, &GenerateParams::greedy(self.max_new), None)?;
        Ok(self.tok.detokenize(&out))
    }

    /// Direct answer; when it carries a marker, the internal-answer slot is
    /// refilled from the base model queried without context or edit.
    pub fn requery(&self, context: &str, question: &str) -> Result<Answer> {
        let mut ans = self.direct(context, question)?;
        if ans.marker.is_none() {
            return Ok(ans);
        }
        if internal_slot(&ans.text).is_none() {
            ans.substitution_error = Some(format!("marker present but no \"{INTERNAL_SLOT}\" slot"));
            return Ok(ans);
        }
        let internal = self.internal_answer(question)?;
        ans.text = substitute_internal(&ans.text, &internal)?;
        ans.used_requery = true;
        Ok(ans)
    }
}

pub fn answer_direct(
    model: &TinyModel,
    tok: &Tokenizer,
    params: &GrftParams,
    cfg: &GrftConfig,
    context: &str,
    question: &str,
) -> Result<Answer> {
    Answerer::new(model, tok, params, cfg).direct(context, question)
}

pub fn answer_requery(
    model: &TinyModel,
    tok: &Tokenizer,
    params: &GrftParams,
    cfg: &GrftConfig,
    context: &str,
    question: &str,
) -> Result<Answer> {
    Answerer::new(model, tok, params, cfg).requery(context, question)
}

#[cfg(test)]
mod tests;
