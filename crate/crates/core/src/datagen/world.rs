//! The synthetic fact world: entities, relations with phrase templates, facts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relation name, declarative templates and question templates; `{s}` and `{o}` are slots.
type RelationTemplate = (&'static str, [&'static str; 2], [&'static str; 2]);

const RELATIONS: [RelationTemplate; 5] = [
    ("lives_in", ["{s} lives in {o}.", "{s} has a home in {o}."], ["where does {s} live?", "which city is home to {s}?"]),
    ("works_as", ["{s} works as a {o}.", "{s} is employed as a {o}."], ["what does {s} work as?", "what is the job of {s}?"]),
    ("born_in", ["{s} was born in {o}.", "The birthplace of {s} is {o}."], ["where was {s} born?", "what is the birthplace of {s}?"]),
    ("plays", ["{s} plays the {o}.", "{s} is a player of the {o}."], ["which instrument does {s} play?", "what instrument does {s} own?"]),
    ("likes", ["{s} likes to eat {o}.", "The favorite food of {s} is {o}."], ["what does {s} like to eat?", "what is the favorite food of {s}?"]),
];

/// Maximum number of relations a world can use.
pub const MAX_RELATIONS: usize = RELATIONS.len();

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub declaratives: Vec<String>,
    pub questions: Vec<String>,
    /// Candidate objects; every fact of this relation takes one of them.
    pub objects: Vec<String>,
}

impl Relation {
    pub fn sentence(&self, template: usize, subject: &str, object: &str) -> String {
        self.declaratives[template].replace("{s}", subject).replace("{o}", object)
    }

    pub fn question(&self, template: usize, subject: &str) -> String {
        self.questions[template].replace("{s}", subject)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: String,
    /// Index into [`FactWorld::relations`].
    pub relation: usize,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub unknown_fraction: f64,
    pub objects_per_relation: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { seed: 0, n_entities: 80, n_relations: 4, n_facts: 320, unknown_fraction: 0.5, objects_per_relation: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub config: WorldConfig,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    /// Fact ids placed in the pretraining corpus.
    pub known_designated: Vec<usize>,
    /// Fact ids held out of the pretraining corpus.
    pub unknown_designated: Vec<usize>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "k"];

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    let mut c = w.chars();
    let first = c.next().expect("nonempty").to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Every word that appears in templates and fixed prompt text, lowercased.
pub(crate) fn template_words() -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let fixed = super::FIXED_TEXTS.iter().copied();
    let rel = RELATIONS.iter().flat_map(|(_, d, q)| d.iter().chain(q.iter()).copied());
    for text in fixed.chain(rel) {
        for p in crate::model::tokenizer::pieces(text) {
            out.insert(p.to_lowercase());
        }
    }
    out
}

/// Draw `n` distinct pseudo-words. No name is a substring of another name or
/// of a template word, so containment scoring cannot match the wrong word.
fn draw_names(rng: &mut impl Rng, n: usize, taken: &mut Vec<String>, fixed: &BTreeSet<String>) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 200 * n + 10_000 {
            return Err(Error::Config(format!("could not draw {n} distinct names")));
        }
        let w = pseudo_word(rng);
        let lw = w.to_lowercase();
        if taken.iter().any(|t| t.contains(&lw) || lw.contains(t.as_str())) || fixed.iter().any(|t| t.contains(&lw)) {
            continue;
        }
        taken.push(lw);
        out.push(w);
    }
    Ok(out)
}

/// Build a deterministic world.
///
/// Facts are drawn from the entity x relation grid. Unknown designation is per
/// entity: whole entities are held out until the unknown share reaches
/// `unknown_fraction` of the facts.
pub fn gen_world(cfg: &WorldConfig) -> Result<FactWorld> {
    if cfg.n_relations == 0 || cfg.n_relations > MAX_RELATIONS {
        return Err(Error::Config(format!("n_relations must be in 1..={MAX_RELATIONS}, got {}", cfg.n_relations)));
    }
    if cfg.objects_per_relation < 2 {
        return Err(Error::Config(format!(
            "objects_per_relation {} leaves no distractor objects",
            cfg.objects_per_relation
        )));
    }
    if cfg.n_entities == 0 || cfg.n_facts == 0 || cfg.n_facts > cfg.n_entities * cfg.n_relations {
        return Err(Error::Config(format!(
            "n_facts {} must be in 1..={} (entities x relations)",
            cfg.n_facts,
            cfg.n_entities * cfg.n_relations
        )));
    }
    if !(0.0..=1.0).contains(&cfg.unknown_fraction) {
        return Err(Error::Config(format!("unknown_fraction {} outside [0, 1]", cfg.unknown_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed = template_words();
    let mut taken = Vec::new();
    let entities = draw_names(&mut rng, cfg.n_entities, &mut taken, &fixed)?;
    let mut relations = Vec::new();
    for (name, decl, q) in RELATIONS.iter().take(cfg.n_relations) {
        relations.push(Relation {
            name: name.to_string(),
            declaratives: decl.iter().map(|s| s.to_string()).collect(),
            questions: q.iter().map(|s| s.to_string()).collect(),
            objects: draw_names(&mut rng, cfg.objects_per_relation, &mut taken, &fixed)?,
        });
    }
    let mut grid: Vec<(usize, usize)> =
        (0..cfg.n_entities).flat_map(|e| (0..cfg.n_relations).map(move |r| (e, r))).collect();
    grid.shuffle(&mut rng);
    grid.truncate(cfg.n_facts);
    grid.sort_unstable();
    let facts: Vec<Fact> = grid
        .iter()
        .enumerate()
        .map(|(id, &(e, r))| {
            let pool = &relations[r].objects;
            Fact { id, subject: entities[e].clone(), relation: r, object: pool[rng.gen_range(0..pool.len())].clone() }
        })
        .collect();
    let mut order: Vec<usize> = (0..cfg.n_entities).collect();
    order.shuffle(&mut rng);
    let target = (cfg.unknown_fraction * cfg.n_facts as f64).round() as usize;
    let mut unknown_entities = BTreeSet::new();
    let mut count = 0;
    for e in order {
        if count >= target {
            break;
        }
        count += grid.iter().filter(|&&(ge, _)| ge == e).count();
        unknown_entities.insert(entities[e].clone());
    }
    let (unknown_designated, known_designated): (Vec<usize>, Vec<usize>) =
        facts.iter().map(|f| f.id).partition(|&id| unknown_entities.contains(&facts[id].subject));
    Ok(FactWorld { config: cfg.clone(), entities, relations, facts, known_designated, unknown_designated })
}

impl FactWorld {
    pub fn fact(&self, id: usize) -> &Fact {
        &self.facts[id]
    }

    pub fn relation(&self, fact: &Fact) -> &Relation {
        &self.relations[fact.relation]
    }

    pub fn is_known_designated(&self, id: usize) -> bool {
        self.known_designated.binary_search(&id).is_ok()
    }

    /// Same-relation objects other than the fact's own.
    pub fn distractors(&self, fact: &Fact) -> Vec<&str> {
        self.relation(fact).objects.iter().map(String::as_str).filter(|o| *o != fact.object).collect()
    }

    /// Canonical answer sentence of a fact with an arbitrary object.
    pub fn sentence_with(&self, fact: &Fact, object: &str) -> String {
        self.relation(fact).sentence(0, &fact.subject, object)
    }

    pub fn answer_sentence(&self, fact: &Fact) -> String {
        self.sentence_with(fact, &fact.object)
    }

    pub fn question(&self, fact: &Fact) -> String {
        self.relation(fact).question(0, &fact.subject)
    }

    /// Other facts that share the subject.
    pub fn same_subject(&self, fact: &Fact) -> impl Iterator<Item = &Fact> {
        let subject = fact.subject.clone();
        let id = fact.id;
        self.facts.iter().filter(move |f| f.subject == subject && f.id != id)
    }

    /// Every string that can appear in a corpus document, prompt or target.
    pub fn vocabulary_texts(&self) -> Vec<String> {
        let mut out: Vec<String> = super::FIXED_TEXTS.iter().map(|s| s.to_string()).collect();
        out.extend(self.entities.iter().cloned());
        for r in &self.relations {
            out.extend(r.declaratives.iter().cloned());
            out.extend(r.questions.iter().cloned());
            out.extend(r.objects.iter().cloned());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let world: FactWorld = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        world.validate()?;
        Ok(world)
    }

    /// Check the structural invariants of a (possibly hand-edited) world.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, f) in self.facts.iter().enumerate() {
            if f.id != i {
                return Err(Error::Validation(format!("fact at index {i} has id {}", f.id)));
            }
            let rel = self
                .relations
                .get(f.relation)
                .ok_or_else(|| Error::Validation(format!("fact {i} has unknown relation {}", f.relation)))?;
            if !rel.objects.contains(&f.object) {
                return Err(Error::Validation(format!("fact {i} object {} is not in its relation's pool", f.object)));
            }
            if rel.objects.len() < 2 {
                return Err(Error::Validation(format!("relation {} has no distractor objects", rel.name)));
            }
            if !seen.insert((f.subject.clone(), f.relation)) {
                return Err(Error::Validation(format!("duplicate (subject, relation) at fact {i}")));
            }
        }
        let known: BTreeSet<_> = self.known_designated.iter().collect();
        if self.unknown_designated.iter().any(|id| known.contains(id)) {
            return Err(Error::Validation("known and unknown designations overlap".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig::default();
        assert_eq!(gen_world(&cfg).unwrap(), gen_world(&cfg).unwrap());
        let other = gen_world(&WorldConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.facts, gen_world(&WorldConfig::default()).unwrap().facts);
    }

    #[test]
    fn small_default_split() {
        let cfg = WorldConfig { n_entities: 40, n_facts: 160, ..Default::default() };
        let w = gen_world(&cfg).unwrap();
        assert_eq!(w.facts.len(), 160);
        assert_eq!(w.known_designated.len(), 80);
        assert_eq!(w.unknown_designated.len(), 80);
        w.validate().unwrap();
    }

    #[test]
    fn every_fact_has_a_distractor() {
        let w = gen_world(&WorldConfig { objects_per_relation: 2, ..Default::default() }).unwrap();
        for f in &w.facts {
            let d = w.distractors(f);
            assert!(!d.is_empty());
            assert!(d.iter().all(|o| *o != f.object));
        }
    }

    #[test]
    fn names_are_substring_free() {
        let w = gen_world(&WorldConfig::default()).unwrap();
        let mut words: Vec<String> = w.entities.iter().map(|s| s.to_lowercase()).collect();
        for r in &w.relations {
            words.extend(r.objects.iter().map(|s| s.to_lowercase()));
        }
        let templates = template_words();
        for (i, a) in words.iter().enumerate() {
            for (j, b) in words.iter().enumerate() {
                assert!(i == j || !a.contains(b.as_str()), "{a} contains {b}");
            }
            for t in &templates {
                assert!(!t.contains(a.as_str()), "template word {t} contains {a}");
            }
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let bad = [
            WorldConfig { objects_per_relation: 1, ..Default::default() },
            WorldConfig { n_relations: 9, ..Default::default() },
            WorldConfig { n_facts: 10_000, ..Default::default() },
            WorldConfig { unknown_fraction: 1.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(gen_world(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let w = gen_world(&WorldConfig { n_entities: 10, n_facts: 30, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.json");
        w.save(&p).unwrap();
        assert_eq!(FactWorld::load(&p).unwrap(), w);
    }
}
