//! Seeded synthetic worlds for end-to-end checks.
//!
//! Each dialogue names an entity early and ends with a pronoun question
//! ("what is its color"), so the last utterance alone cannot find the fact.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{save_dialogues, tokenize, Dialogue, KnowledgeBase, KnowledgeEntry, Role, Utterance};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::model::{task_prompt, Task};
use crate::selector::{Selector, SelectorConfig};

const ATTRIBUTES: &[&str] = &[
    "color", "size", "origin", "flavor", "habitat", "shape", "texture", "temper", "weight", "sound", "scent",
    "diet",
];
const ADJECTIVES: &[&str] = &[
    "bright", "dark", "pale", "golden", "silver", "rusty", "misty", "sandy", "frosty", "smoky", "mossy", "sunny",
    "stormy", "velvet", "crimson", "amber", "ivory", "copper", "coral", "jade",
];
const NOUNS: &[&str] = &[
    "river", "forest", "meadow", "canyon", "harbor", "valley", "island", "desert", "glacier", "lagoon", "prairie",
    "summit", "marsh", "grove", "reef", "tundra", "delta", "cliff", "orchard", "dune",
];
const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

const INTRO_USER: &[&str] = &["tell me about {e}", "i want to learn about {e}", "do you know {e}"];
const INTRO_SYSTEM: &[&str] = &["{e} is a popular topic", "sure , {e} comes up often", "{e} is quite interesting"];
const FILLER_USER: &[&str] = &["that sounds interesting", "please go on", "i see , thanks"];
const FILLER_SYSTEM: &[&str] = &["there is a lot to say", "happy to help", "ask me anything"];
const FINAL_USER: &[&str] = &["what is its {a}", "and its {a}", "do you know its {a}"];
const DISTRACTORS: &[&str] = &[
    "{e1} and {e2} both have a well known {a}",
    "{e1} is often compared with {e2}",
    "people rarely agree on the {a} of anything like {e1}",
    "some say {e1} and {e2} share a {a}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub n_attributes: usize,
    pub n_distractor_docs: usize,
    /// User turns in a dialogue context, including the opener and the final
    /// question.
    pub turns_per_dialogue: usize,
    pub n_dialogues: usize,
    /// Upper bound on distinct tokens across the generated files.
    pub vocab_size: usize,
    /// Number of facts; all entity-attribute pairs when unset.
    pub n_facts: Option<usize>,
    /// Give each split its own facts instead of sampling facts for every
    /// dialogue independently of its split.
    pub split_by_fact: bool,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities: 40,
            n_attributes: 5,
            n_distractor_docs: 200,
            turns_per_dialogue: 3,
            n_dialogues: 800,
            vocab_size: 1000,
            n_facts: None,
            split_by_fact: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub kb: KnowledgeBase,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    /// Entity names followed by value phrases.
    pub lexicon: Vec<String>,
}

impl World {
    /// Writes `kb.jsonl`, `train.jsonl`, `valid.jsonl`, `test.jsonl` and
    /// `entities.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.kb.save_jsonl(dir.join("kb.jsonl"))?;
        save_dialogues(dir.join("train.jsonl"), &self.train)?;
        save_dialogues(dir.join("valid.jsonl"), &self.valid)?;
        save_dialogues(dir.join("test.jsonl"), &self.test)?;
        let path = dir.join("entities.txt");
        let mut text = self.lexicon.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

struct Fact {
    id: String,
    entity: usize,
    attr: usize,
    text: String,
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    pairs.iter().fold(template.to_string(), |t, (k, v)| t.replace(k, v))
}

fn entity_names(rng: &mut ChaCha8Rng, n: usize, taken: &BTreeSet<&str>) -> Result<Vec<String>> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let capacity = syllables.len().pow(3);
    if n > capacity / 4 {
        return Err(Error::InfeasibleSpec(format!("at most {} entities are supported", capacity / 4)));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(2..=3);
        let name: String = (0..k).map(|_| syllables.choose(rng).unwrap().as_str()).collect();
        if !taken.contains(name.as_str()) && seen.insert(name.clone()) {
            out.push(name);
        }
    }
    Ok(out)
}

fn validate(spec: &WorldSpec) -> Result<usize> {
    let pairs = spec.n_entities * spec.n_attributes;
    let n_facts = spec.n_facts.unwrap_or(pairs);
    let fail = |m: String| Err(Error::InfeasibleSpec(m));
    if spec.n_entities == 0 || spec.n_attributes == 0 || spec.n_dialogues == 0 || n_facts == 0 {
        return fail("entities, attributes, facts and dialogues must all be positive".into());
    }
    if n_facts > pairs {
        return fail(format!("{n_facts} facts exceed {pairs} entity-attribute pairs"));
    }
    if spec.n_attributes > ATTRIBUTES.len() {
        return fail(format!("at most {} attributes are supported", ATTRIBUTES.len()));
    }
    if n_facts > ADJECTIVES.len() * NOUNS.len() {
        return fail(format!("at most {} distinct values are available", ADJECTIVES.len() * NOUNS.len()));
    }
    if spec.turns_per_dialogue < 2 {
        return fail("turns_per_dialogue must be at least 2".into());
    }
    if spec.n_distractor_docs > 0 && spec.n_entities < 2 {
        return fail("distractors need at least two entities".into());
    }
    Ok(n_facts)
}

/// Split sizes in the ratio 6:1:1; tiny worlds put everything in train
/// first.
fn split_sizes(n: usize) -> [usize; 3] {
    let train = (n * 3).div_ceil(4);
    let valid = (n - train) / 2;
    [train, valid, n - train - valid]
}

pub fn generate(spec: &WorldSpec) -> Result<World> {
    let n_facts = validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let template_words: Vec<String> = [INTRO_USER, INTRO_SYSTEM, FILLER_USER, FILLER_SYSTEM, FINAL_USER, DISTRACTORS]
        .concat()
        .iter()
        .flat_map(|t| tokenize(t).into_inner())
        .chain(task_prompt(Task::Query).into_inner())
        .chain(task_prompt(Task::Response).into_inner())
        .collect();
    let reserved: BTreeSet<&str> = ATTRIBUTES
        .iter()
        .chain(ADJECTIVES)
        .chain(NOUNS)
        .copied()
        .chain(template_words.iter().map(String::as_str))
        .chain(["the", "of", "is", "user", "system"])
        .collect();
    let entities = entity_names(&mut rng, spec.n_entities, &reserved)?;
    let attrs = &ATTRIBUTES[..spec.n_attributes];

    let mut values: Vec<(usize, usize)> = (0..ADJECTIVES.len())
        .flat_map(|a| (0..NOUNS.len()).map(move |b| (a, b)))
        .collect();
    values.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = (0..entities.len())
        .flat_map(|e| (0..attrs.len()).map(move |a| (e, a)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(n_facts);
    pairs.sort_unstable();

    let mut lexicon = entities.clone();
    let facts: Vec<Fact> = pairs
        .iter()
        .zip(&values)
        .enumerate()
        .map(|(i, (&(e, a), &(v1, v2)))| {
            let value = format!("{} {}", ADJECTIVES[v1], NOUNS[v2]);
            let text = format!("the {} of {} is {}", attrs[a], entities[e], value);
            lexicon.push(value);
            Fact {
                id: format!("fact-{i:04}"),
                entity: e,
                attr: a,
                text,
            }
        })
        .collect();

    let mut distractors: Vec<KnowledgeEntry> = Vec::new();
    let mut serial = 0;
    let mut guard = 0;
    while distractors.len() < spec.n_distractor_docs {
        guard += 1;
        if guard > 100 * (spec.n_distractor_docs + 10) {
            return Err(Error::InfeasibleSpec("could not place distractors without shadowing facts".into()));
        }
        let batch = spec.n_distractor_docs - distractors.len();
        for _ in 0..batch {
            let e1 = rng.gen_range(0..entities.len());
            let e2 = (e1 + rng.gen_range(1..entities.len())) % entities.len();
            let a = attrs.choose(&mut rng).unwrap();
            let text = fill(
                DISTRACTORS.choose(&mut rng).unwrap(),
                &[("{e1}", &entities[e1]), ("{e2}", &entities[e2]), ("{a}", a)],
            );
            distractors.push(KnowledgeEntry {
                id: format!("note-{serial:04}"),
                text,
                title: None,
            });
            serial += 1;
        }
        let shadowing = shadowing_distractors(&facts, &entities, attrs, &distractors)?;
        distractors.retain(|d| !shadowing.contains(&d.id));
    }

    let kb = build_kb(&facts, &distractors)?;

    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    let dlg_split = split_sizes(spec.n_dialogues);
    let mut splits: [Vec<Dialogue>; 3] = Default::default();
    let mut serial = 0;
    if spec.split_by_fact {
        // Held-out questions then need values copied from retrieved
        // knowledge instead of recalled from training.
        let fact_split = split_sizes(facts.len());
        let mut start = 0;
        for (s, (&nf, &nd)) in fact_split.iter().zip(&dlg_split).enumerate() {
            // Small worlds can leave a split without facts; fall back to all.
            let pool: &[usize] = if nf == 0 { &order } else { &order[start..start + nf] };
            start += nf;
            for j in 0..nd {
                let f = &facts[pool[j % pool.len()]];
                splits[s].push(dialogue(&mut rng, spec, serial, f, &entities[f.entity], attrs[f.attr]));
                serial += 1;
            }
        }
    } else {
        let mut s = 0;
        for j in 0..spec.n_dialogues {
            while splits[s].len() == dlg_split[s] {
                s += 1;
            }
            let f = &facts[order[j % order.len()]];
            splits[s].push(dialogue(&mut rng, spec, serial, f, &entities[f.entity], attrs[f.attr]));
            serial += 1;
        }
    }
    let [train, valid, test] = splits;

    let world = World {
        kb,
        train,
        valid,
        test,
        lexicon,
    };
    let vocab = world_vocab(&world);
    if vocab > spec.vocab_size {
        return Err(Error::InfeasibleSpec(format!(
            "world needs {vocab} tokens, over the budget of {}",
            spec.vocab_size
        )));
    }
    Ok(world)
}

fn build_kb(facts: &[Fact], distractors: &[KnowledgeEntry]) -> Result<KnowledgeBase> {
    let entries = facts
        .iter()
        .map(|f| KnowledgeEntry {
            id: f.id.clone(),
            text: f.text.clone(),
            title: None,
        })
        .chain(distractors.iter().cloned())
        .collect();
    KnowledgeBase::new(entries)
}

/// Distractors that outrank a fact for its gold query or its response.
fn shadowing_distractors(
    facts: &[Fact],
    entities: &[String],
    attrs: &[&str],
    distractors: &[KnowledgeEntry],
) -> Result<BTreeSet<String>> {
    let kb = build_kb(facts, distractors)?;
    let index = InvertedIndex::build(&kb);
    let selector = Selector::<f64>::new(&index, &kb, SelectorConfig::default())?;
    let mut bad = BTreeSet::new();
    for f in facts {
        let gold = gold_query(&entities[f.entity], attrs[f.attr]);
        for query in [gold.as_str(), f.text.as_str()] {
            let ranked = selector.select_k(query, 10)?;
            for c in ranked.iter().take_while(|c| c.knowledge_id != f.id) {
                if c.knowledge_id.starts_with("note-") {
                    bad.insert(c.knowledge_id.clone());
                }
            }
        }
    }
    Ok(bad)
}

fn gold_query(entity: &str, attr: &str) -> String {
    format!("what is the {attr} of {entity}")
}

fn dialogue(rng: &mut ChaCha8Rng, spec: &WorldSpec, serial: usize, fact: &Fact, entity: &str, attr: &str) -> Dialogue {
    let ea = [("{e}", entity), ("{a}", attr)];
    let turn = |role, text: String| Utterance { role, text };
    let mut context = vec![
        turn(Role::User, fill(INTRO_USER.choose(rng).unwrap(), &ea)),
        turn(Role::System, fill(INTRO_SYSTEM.choose(rng).unwrap(), &ea)),
    ];
    for _ in 2..spec.turns_per_dialogue {
        context.push(turn(Role::User, FILLER_USER.choose(rng).unwrap().to_string()));
        context.push(turn(Role::System, FILLER_SYSTEM.choose(rng).unwrap().to_string()));
    }
    context.push(turn(Role::User, fill(FINAL_USER.choose(rng).unwrap(), &ea)));
    Dialogue {
        id: format!("dlg-{serial:04}"),
        context,
        target_response: fact.text.clone(),
        gold_query: Some(gold_query(entity, attr)),
        gold_knowledge_id: Some(fact.id.clone()),
    }
}

fn world_vocab(world: &World) -> usize {
    let mut v: BTreeSet<String> = BTreeSet::new();
    v.extend(task_prompt(Task::Query).into_inner());
    v.extend(task_prompt(Task::Response).into_inner());
    for e in world.kb.iter() {
        v.extend(tokenize(&e.text).into_inner());
    }
    for d in world.train.iter().chain(&world.valid).chain(&world.test) {
        for u in &d.context {
            v.extend(tokenize(u.role.marker()).into_inner());
            v.extend(tokenize(&u.text).into_inner());
        }
    }
    v.len()
}
