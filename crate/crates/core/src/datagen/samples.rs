//! Contexts, four-category samples and their JSONL form.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::ProbeOutcome;
use super::world::{Fact, FactWorld};
use super::{contradictory_target, helpful_target, unhelpful_target, Category, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextKind {
    Matched,
    Contradictory,
    UnhelpfulRandom,
    UnhelpfulDistracted,
    Helpful,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub category: Category,
    pub question: String,
    pub context: String,
    pub target: String,
    pub gate_label: u8,
    pub ans_internal: Option<String>,
    pub ans_external: Option<String>,
    pub known: bool,
}

impl Sample {
    /// Short/long by sentence count; random/distracted for unhelpful contexts.
    pub fn variant(&self) -> Variant {
        match self.category {
            Category::UnhelpfulRandom => Variant::Random,
            Category::UnhelpfulDistracted => Variant::Distracted,
            _ if self.context.matches('.').count() >= 2 => Variant::Long,
            _ => Variant::Short,
        }
    }

    /// Answer scored as correct: the internal answer when the model knows the
    /// fact, otherwise the context's answer.
    pub fn gold(&self) -> Option<&str> {
        self.ans_internal.as_deref().or(self.ans_external.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate_label != self.category.gate_label() {
            return Err(Error::Validation(format!(
                "sample {}: gate_label {} does not match category {}",
                self.id, self.gate_label, self.category
            )));
        }
        match self.category {
            Category::Contradictory => match (&self.ans_internal, &self.ans_external) {
                (Some(i), Some(e)) if i != e => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "sample {}: contradictory samples need distinct internal and external answers",
                        self.id
                    )))
                }
            },
            Category::UnhelpfulRandom | Category::UnhelpfulDistracted | Category::Matched
                if self.ans_internal.is_none() =>
            {
                return Err(Error::Validation(format!("sample {}: missing ans_internal", self.id)));
            }
            Category::HelpfulUnknown if self.ans_external.is_none() => {
                return Err(Error::Validation(format!("sample {}: missing ans_external", self.id)));
            }
            _ => {}
        }
        Ok(())
    }
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> Result<&'a T> {
    items.choose(rng).ok_or_else(|| Error::Config("no candidate to sample from".into()))
}

/// Context text for `fact` and, for contradictory contexts, the external answer.
///
/// Long contexts add a true sentence about another relation of the same
/// subject, in random order.
pub fn make_context(
    fact: &Fact,
    kind: ContextKind,
    long: bool,
    world: &FactWorld,
    rng: &mut impl Rng,
) -> Result<(String, Option<String>)> {
    let rel = world.relation(fact);
    let template = rng.gen_range(0..rel.declaratives.len());
    let (main, external) = match kind {
        ContextKind::Matched | ContextKind::Helpful => (rel.sentence(template, &fact.subject, &fact.object), None),
        ContextKind::Contradictory => {
            let d = world.distractors(fact);
            let other = pick(rng, &d)?.to_string();
            (rel.sentence(template, &fact.subject, &other), Some(other))
        }
        ContextKind::UnhelpfulRandom => {
            let others: Vec<&Fact> =
                world.facts.iter().filter(|f| f.subject != fact.subject && f.object != fact.object).collect();
            let f = *pick(rng, &others)?;
            let r = world.relation(f);
            (r.sentence(rng.gen_range(0..r.declaratives.len()), &f.subject, &f.object), None)
        }
        ContextKind::UnhelpfulDistracted => {
            let same: Vec<&Fact> = world.same_subject(fact).filter(|f| f.object != fact.object).collect();
            if same.is_empty() {
                return Err(Error::Config(format!("subject {} has no second relation for a distracted context", fact.subject)));
            }
            let f = *pick(rng, &same)?;
            let r = world.relation(f);
            (r.sentence(rng.gen_range(0..r.declaratives.len()), &f.subject, &f.object), None)
        }
    };
    if !long {
        return Ok((main, external));
    }
    let same: Vec<&Fact> = world.same_subject(fact).filter(|f| f.object != fact.object).collect();
    let f = *pick(rng, &same)
        .map_err(|_| Error::Config(format!("subject {} has no second relation for a long context", fact.subject)))?;
    let r = world.relation(f);
    let filler = r.sentence(rng.gen_range(0..r.declaratives.len()), &f.subject, &f.object);
    let text = if rng.gen_bool(0.5) { format!("{main} {filler}") } else { format!("{filler} {main}") };
    Ok((text, external))
}

fn sample_for(
    world: &FactWorld,
    fact: &Fact,
    category: Category,
    long: bool,
    id: String,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let kind = match category {
        Category::Matched => ContextKind::Matched,
        Category::Contradictory => ContextKind::Contradictory,
        Category::UnhelpfulRandom => ContextKind::UnhelpfulRandom,
        Category::UnhelpfulDistracted => ContextKind::UnhelpfulDistracted,
        Category::HelpfulUnknown => ContextKind::Helpful,
    };
    let (context, external) = make_context(fact, kind, long, world, rng)?;
    let rel = world.relation(fact);
    let question = rel.question(rng.gen_range(0..rel.questions.len()), &fact.subject);
    let truth = world.answer_sentence(fact);
    let (target, ans_internal, ans_external) = match category {
        Category::Matched => (truth, Some(fact.object.clone()), None),
        Category::HelpfulUnknown => (helpful_target(&truth), None, Some(fact.object.clone())),
        Category::Contradictory => {
            let ext = external.expect("contradictory contexts carry an external answer");
            (contradictory_target(&truth, &world.sentence_with(fact, &ext)), Some(fact.object.clone()), Some(ext))
        }
        Category::UnhelpfulRandom | Category::UnhelpfulDistracted => {
            (unhelpful_target(&truth), Some(fact.object.clone()), None)
        }
    };
    let s = Sample {
        id,
        category,
        question,
        context,
        target,
        gate_label: category.gate_label(),
        ans_internal,
        ans_external,
        known: category != Category::HelpfulUnknown,
    };
    s.validate()?;
    Ok(s)
}

fn pool(world: &FactWorld, probe: &[ProbeOutcome], want: ProbeOutcome, exclude: &BTreeSet<usize>) -> Vec<usize> {
    let designated = if want == ProbeOutcome::Known { &world.known_designated } else { &world.unknown_designated };
    designated.iter().copied().filter(|&id| probe[id] == want && !exclude.contains(&id)).collect()
}

/// Training samples: per known fact a matched, a contradictory and an
/// unhelpful sample (random and distracted alternate); per unknown fact a
/// helpful sample. Contexts are short or long at random.
pub fn build_samples(
    world: &FactWorld,
    probe: &[ProbeOutcome],
    n_known: usize,
    n_unknown: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if probe.len() != world.facts.len() {
        return Err(Error::Validation(format!("{} probe results for {} facts", probe.len(), world.facts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut known = pool(world, probe, ProbeOutcome::Known, &BTreeSet::new());
    let mut unknown = pool(world, probe, ProbeOutcome::Unknown, &BTreeSet::new());
    if known.len() < n_known || unknown.len() < n_unknown {
        return Err(Error::Config(format!(
            "need {n_known} known and {n_unknown} unknown facts, probing found {} and {}",
            known.len(),
            unknown.len()
        )));
    }
    known.shuffle(&mut rng);
    unknown.shuffle(&mut rng);
    let mut out = Vec::with_capacity(3 * n_known + n_unknown);
    for (i, &id) in known[..n_known].iter().enumerate() {
        let fact = world.fact(id);
        let unhelpful = if i % 2 == 0 { Category::UnhelpfulRandom } else { Category::UnhelpfulDistracted };
        for category in [Category::Matched, Category::Contradictory, unhelpful] {
            let long = !category.is_unhelpful() && rng.gen_bool(0.5);
            out.push(sample_for(world, fact, category, long, format!("train-{id:04}-{category}"), &mut rng)?);
        }
    }
    for &id in &unknown[..n_unknown] {
        let long = rng.gen_bool(0.5);
        let category = Category::HelpfulUnknown;
        out.push(sample_for(world, world.fact(id), category, long, format!("train-{id:04}-{category}"), &mut rng)?);
    }
    Ok(out)
}

/// Evaluation samples over every Known/Unknown fact not used by `train`: each
/// known fact in matched, contradictory (short and long) and both unhelpful
/// variants; each unknown fact in helpful short and long.
pub fn build_test_samples(world: &FactWorld, probe: &[ProbeOutcome], train: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let used: BTreeSet<usize> = train
        .iter()
        .filter_map(|s| s.id.split('-').nth(1).and_then(|n| n.parse().ok()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in pool(world, probe, ProbeOutcome::Known, &used) {
        let fact = world.fact(id);
        for (category, long) in [
            (Category::Matched, false),
            (Category::Matched, true),
            (Category::Contradictory, false),
            (Category::Contradictory, true),
            (Category::UnhelpfulRandom, false),
            (Category::UnhelpfulDistracted, false),
        ] {
            let tag = if long { "long" } else { "short" };
            out.push(sample_for(world, fact, category, long, format!("test-{id:04}-{category}-{tag}"), &mut rng)?);
        }
    }
    for id in pool(world, probe, ProbeOutcome::Unknown, &used) {
        for long in [false, true] {
            let tag = if long { "long" } else { "short" };
            let category = Category::HelpfulUnknown;
            out.push(sample_for(world, world.fact(id), category, long, format!("test-{id:04}-{category}-{tag}"), &mut rng)?);
        }
    }
    Ok(out)
}

/// Error unless the two sample sets share no id and no underlying fact.
pub fn check_disjoint(train: &[Sample], test: &[Sample]) -> Result<()> {
    let fact_of = |s: &Sample| s.id.split('-').nth(1).map(str::to_string);
    let ids: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    let facts: BTreeSet<Option<String>> = train.iter().map(fact_of).collect();
    for s in test {
        if ids.contains(s.id.as_str()) {
            return Err(Error::Validation(format!("sample id {} is in both train and test sets", s.id)));
        }
        let f = fact_of(s);
        if f.is_some() && facts.contains(&f) {
            return Err(Error::Validation(format!("test sample {} reuses a training fact", s.id)));
        }
    }
    Ok(())
}

pub fn save_samples(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Parse JSONL text; errors name the 1-based line.
pub fn parse_samples(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("samples line {}: {e}", i + 1)))?;
        s.validate().map_err(|e| Error::Format(format!("samples line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    parse_samples(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_world, WorldConfig};
    use crate::eval::normalize;

    fn world() -> FactWorld {
        gen_world(&WorldConfig::default()).unwrap()
    }

    /// Everything probes as designated.
    fn ideal_probe(w: &FactWorld) -> Vec<ProbeOutcome> {
        (0..w.facts.len())
            .map(|id| if w.is_known_designated(id) { ProbeOutcome::Known } else { ProbeOutcome::Unknown })
            .collect()
    }

    fn contains_word(text: &str, word: &str) -> bool {
        normalize(text).contains(&normalize(word))
    }

    #[test]
    fn context_properties() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &id in w.known_designated.iter().take(60) {
            let f = w.fact(id);
            for long in [false, true] {
                let (c, ext) = make_context(f, ContextKind::Contradictory, long, &w, &mut rng).unwrap();
                assert!(!contains_word(&c, &f.object), "{c}");
                assert!(contains_word(&c, ext.as_deref().unwrap()));
                let (m, _) = make_context(f, ContextKind::Matched, long, &w, &mut rng).unwrap();
                assert!(contains_word(&m, &f.object));
                assert_eq!(m.matches('.').count(), if long { 2 } else { 1 });
            }
            let (r, _) = make_context(f, ContextKind::UnhelpfulRandom, false, &w, &mut rng).unwrap();
            assert!(!contains_word(&r, &f.object) && !contains_word(&r, &f.subject), "{r}");
            let (d, _) = make_context(f, ContextKind::UnhelpfulDistracted, false, &w, &mut rng).unwrap();
            assert!(contains_word(&d, &f.subject) && !contains_word(&d, &f.object), "{d}");
        }
    }

    #[test]
    fn training_set_shape() {
        let w = world();
        let s = build_samples(&w, &ideal_probe(&w), 100, 100, 3).unwrap();
        assert_eq!(s.len(), 400);
        let count = |c: Category| s.iter().filter(|x| x.category == c).count();
        assert_eq!(count(Category::Matched), 100);
        assert_eq!(count(Category::Contradictory), 100);
        assert_eq!(count(Category::UnhelpfulRandom) + count(Category::UnhelpfulDistracted), 100);
        assert_eq!(count(Category::HelpfulUnknown), 100);
        for x in &s {
            assert_eq!(x.gate_label, x.category.gate_label());
            if x.category.is_noisy() {
                assert!(!contains_word(&x.context, x.ans_internal.as_deref().unwrap()), "{x:?}");
            }
        }
        assert_eq!(s, build_samples(&w, &ideal_probe(&w), 100, 100, 3).unwrap());
    }

    #[test]
    fn test_set_is_disjoint() {
        let w = world();
        let p = ideal_probe(&w);
        let train = build_samples(&w, &p, 100, 100, 3).unwrap();
        let test = build_test_samples(&w, &p, &train, 4).unwrap();
        assert_eq!(test.len(), 6 * 60 + 2 * 60);
        check_disjoint(&train, &test).unwrap();
        assert!(check_disjoint(&train, &train[..1]).is_err());
        let variants: BTreeSet<_> = test.iter().map(|s| (s.category, s.variant())).collect();
        assert_eq!(variants.len(), 8);
    }

    #[test]
    fn too_few_facts_is_a_config_error() {
        let w = world();
        assert!(matches!(build_samples(&w, &ideal_probe(&w), 200, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let w = world();
        let s = build_samples(&w, &ideal_probe(&w), 100, 100, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        save_samples(&s, &p).unwrap();
        assert_eq!(load_samples(&p).unwrap(), s);

        let line = r#"{"id":"x1","category":"matched","question":"where does Bo live?","context":"Bo lives in Ka.","target":"Bo lives in Ka.","gate_label":0,"ans_internal":"Ka","ans_external":null,"known":true}"#;
        let parsed = parse_samples(line).unwrap();
        assert_eq!(parsed[0].id, "x1");
        assert_eq!(parsed[0].ans_internal.as_deref(), Some("Ka"));
        assert_eq!(parsed[0].variant(), Variant::Short);

        let bad = format!("{line}\n{}", line.replace("\"matched\"", "\"irrelevant\""));
        let err = parse_samples(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let missing = line.replace(r#","known":true"#, "");
        assert!(parse_samples(&missing).unwrap_err().to_string().contains("line 1"));
        let mislabeled = line.replace(r#""gate_label":0"#, r#""gate_label":1"#);
        assert!(matches!(parse_samples(&mislabeled), Err(Error::Format(_))));
    }
}
