//! A seeded synthetic question-answering world.
//!
//! Entities carry attribute values; questions are rendered through a handful
//! of fixed templates. Fine-tuning and evaluation ask about disjoint sets of
//! facts. Pretraining covers every fact except those of a few withheld
//! entities, which only the fine-tuning split asks about, so fine-tuning meets
//! questions the base model cannot know. Out-of-domain questions name entities
//! from a separate namespace that never appears in training. A fraction of
//! facts is ambiguous: the corpus states two conflicting values for them, so
//! no model can answer them reliably.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub n_train_pairs: usize,
    pub n_finetune_pairs: usize,
    pub n_eval_pairs: usize,
    pub n_ood_pairs: usize,
    pub ambiguity_rate: f64,
    /// Approximate fraction of fine-tuning questions about entities that never
    /// appear in pretraining.
    pub unseen_finetune_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_entities: 200,
            n_attributes: 6,
            n_train_pairs: 2400,
            n_finetune_pairs: 600,
            n_eval_pairs: 600,
            n_ood_pairs: 200,
            ambiguity_rate: 0.15,
            unseen_finetune_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Finetune,
    Eval,
    Ood,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Eval => "eval",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Pretrain, Split::Finetune, Split::Eval, Split::Ood]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAItem {
    pub id: String,
    pub prompt: String,
    /// One or more acceptable references.
    pub answers: Vec<String>,
    pub split: Split,
    pub ambiguous: bool,
    pub ood: bool,
}

const SYLLABLES: [&str; 16] =
    ["ba", "ko", "ri", "su", "ta", "ne", "mo", "li", "da", "ve", "zu", "pa", "ge", "fi", "ro", "hu"];
// every one of these contains a letter (j, q, w, x, y) absent from SYLLABLES
const OOD_SYLLABLES: [&str; 10] = ["xan", "qel", "yor", "wix", "jup", "xov", "qim", "yeb", "wuz", "jat"];

const ATTRIBUTES: [(&str, &[&str]); 8] = [
    ("color", &["red", "blue", "green", "yellow", "purple", "orange", "black", "white", "silver", "brown"]),
    ("city", &["paris", "lima", "oslo", "cairo", "tokyo", "quito", "new haven", "port royal", "san remo"]),
    ("animal", &["fox", "owl", "wolf", "bear", "hare", "lynx", "crow", "seal"]),
    ("food", &["rice", "bread", "soup", "figs", "plums", "beans", "cheese", "honey"]),
    ("sport", &["chess", "golf", "tennis", "rowing", "fencing", "polo", "ice hockey"]),
    ("metal", &["iron", "gold", "copper", "tin", "zinc", "nickel", "lead"]),
    ("instrument", &["harp", "flute", "drum", "violin", "lute", "horn"]),
    ("job", &["baker", "tailor", "pilot", "farmer", "sailor", "miner", "night guard"]),
];

const TEMPLATES: [&str; 4] = [
    "what is the {attr} of {ent} ?",
    "what {attr} does {ent} have ?",
    "tell me the {attr} of {ent} .",
    "{ent} has which {attr} ?",
];

fn render(template: &str, attr: &str, ent: &str) -> String {
    template.replace("{attr}", attr).replace("{ent}", ent)
}

/// Names built from 3 syllables of `syllables`, enumerated in a seeded order.
fn names(syllables: &[&str], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    let n = syllables.len();
    let capacity = n * n * n;
    if count > capacity {
        return Err(Error::Config(format!("requested {count} entity names but the namespace holds {capacity}")));
    }
    let mut codes: Vec<usize> = (0..capacity).collect();
    codes.shuffle(rng);
    Ok(codes[..count]
        .iter()
        .map(|&c| format!("{}{}{}", syllables[c / (n * n)], syllables[(c / n) % n], syllables[c % n]))
        .collect())
}

struct Fact {
    entity: usize,
    attribute: usize,
    value: &'static str,
    /// Conflicting second value for ambiguous facts.
    alt: Option<&'static str>,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 || self.n_attributes == 0 {
            return Err(Error::Config("world needs at least one entity and one attribute".into()));
        }
        if self.n_attributes > ATTRIBUTES.len() {
            return Err(Error::Config(format!(
                "world.n_attributes {} exceeds the {} available attributes",
                self.n_attributes,
                ATTRIBUTES.len()
            )));
        }
        if !(0.0..1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config("world.ambiguity_rate must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.unseen_finetune_rate) {
            return Err(Error::Config("world.unseen_finetune_rate must lie in [0, 1]".into()));
        }
        let facts = self.n_entities * self.n_attributes;
        if self.n_finetune_pairs + self.n_eval_pairs > facts {
            return Err(Error::Config(format!(
                "finetune ({}) + eval ({}) questions need distinct facts but only {facts} exist",
                self.n_finetune_pairs, self.n_eval_pairs
            )));
        }
        if self.n_unseen_entities() * self.n_attributes > self.n_finetune_pairs {
            return Err(Error::Config("unseen entities have more facts than the fine-tuning split holds".into()));
        }
        let seen = facts - self.n_unseen_entities() * self.n_attributes;
        if self.n_train_pairs < seen {
            return Err(Error::Config(format!(
                "world.n_train_pairs ({}) must cover all {seen} pretraining facts at least once",
                self.n_train_pairs
            )));
        }
        let ood_capacity = OOD_SYLLABLES.len().pow(3) * self.n_attributes;
        if self.n_ood_pairs > ood_capacity {
            return Err(Error::Config(format!("world.n_ood_pairs exceeds the {ood_capacity} possible ood questions")));
        }
        Ok(())
    }

    /// Entities withheld from pretraining; all their facts are fine-tuning
    /// questions.
    pub fn n_unseen_entities(&self) -> usize {
        let n = (self.unseen_finetune_rate * self.n_finetune_pairs as f64 / self.n_attributes as f64).round() as usize;
        n.min(self.n_entities)
    }
}

/// Generates every split of the world. Pure function of `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<Vec<QAItem>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entities = names(&SYLLABLES, cfg.n_entities, &mut rng)?;
    let attrs = &ATTRIBUTES[..cfg.n_attributes];

    let mut facts = Vec::with_capacity(cfg.n_entities * cfg.n_attributes);
    for entity in 0..cfg.n_entities {
        for (attribute, (_, pool)) in attrs.iter().enumerate() {
            let value = *pool.choose(&mut rng).expect("non-empty pool");
            let alt = rng.random_bool(cfg.ambiguity_rate).then(|| loop {
                let other = *pool.choose(&mut rng).expect("non-empty pool");
                if other != value {
                    break other;
                }
            });
            facts.push(Fact { entity, attribute, value, alt });
        }
    }

    let mut items = Vec::new();
    let question = |fact: &Fact, rng: &mut ChaCha8Rng| {
        let template = TEMPLATES.choose(rng).expect("templates");
        render(template, attrs[fact.attribute].0, &entities[fact.entity])
    };

    // a few entities never appear in pretraining; every question about them
    // is a fine-tuning question
    let mut entity_order: Vec<usize> = (0..cfg.n_entities).collect();
    entity_order.shuffle(&mut rng);
    let unseen: HashSet<usize> = entity_order[..cfg.n_unseen_entities()].iter().copied().collect();
    let (mut ft, mut rest): (Vec<usize>, Vec<usize>) =
        (0..facts.len()).partition(|&f| unseen.contains(&facts[f].entity));
    let mut pool = rest.clone();

    // finetune and eval ask about disjoint facts
    rest.shuffle(&mut rng);
    let fill = cfg.n_finetune_pairs - ft.len();
    ft.extend_from_slice(&rest[..fill]);
    ft.shuffle(&mut rng);
    let eval = &rest[fill..fill + cfg.n_eval_pairs];

    // pretraining cycles through shuffled facts; ambiguous facts alternate values
    let mut seen = vec![0usize; facts.len()];
    let mut i = 0;
    while i < cfg.n_train_pairs {
        pool.shuffle(&mut rng);
        for &f in pool.iter().take(cfg.n_train_pairs - i) {
            let fact = &facts[f];
            let answer = match fact.alt {
                Some(alt) if seen[f] % 2 == 1 => alt,
                _ => fact.value,
            };
            seen[f] += 1;
            items.push(QAItem {
                id: format!("pretrain-{i:05}"),
                prompt: question(fact, &mut rng),
                answers: vec![answer.to_string()],
                split: Split::Pretrain,
                ambiguous: fact.alt.is_some(),
                ood: false,
            });
            i += 1;
        }
    }

    for (split, chosen) in [(Split::Finetune, ft.as_slice()), (Split::Eval, eval)] {
        for (k, &f) in chosen.iter().enumerate() {
            let fact = &facts[f];
            let answer = match fact.alt {
                Some(alt) if rng.random_bool(0.5) => alt,
                _ => fact.value,
            };
            items.push(QAItem {
                id: format!("{split}-{k:05}"),
                prompt: question(fact, &mut rng),
                answers: vec![answer.to_string()],
                split,
                ambiguous: fact.alt.is_some(),
                ood: false,
            });
        }
    }

    if cfg.n_ood_pairs > 0 {
        let n_ood_entities = cfg.n_ood_pairs.div_ceil(cfg.n_attributes);
        let ood_entities = names(&OOD_SYLLABLES, n_ood_entities, &mut rng)?;
        let mut pairs: Vec<(usize, usize)> =
            (0..n_ood_entities).flat_map(|e| (0..cfg.n_attributes).map(move |a| (e, a))).collect();
        pairs.shuffle(&mut rng);
        for (k, &(e, a)) in pairs[..cfg.n_ood_pairs].iter().enumerate() {
            let (attr, pool) = attrs[a];
            let template = TEMPLATES.choose(&mut rng).expect("templates");
            let answer = *pool.choose(&mut rng).expect("non-empty pool");
            items.push(QAItem {
                id: format!("ood-{k:05}"),
                prompt: render(template, attr, &ood_entities[e]),
                answers: vec![answer.to_string()],
                split: Split::Ood,
                ambiguous: false,
                ood: true,
            });
        }
    }
    Ok(items)
}

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    const RESERVED: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != Self::RESERVED {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(Self::RESERVED[Self::UNK as usize], String::as_str)
    }

    /// Whitespace tokenization; unseen words become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with single spaces, dropping reserved ids other than `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter(|&&id| id == Self::UNK || id >= 4).map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }
}

/// Vocabulary over every word of every prompt and answer, sorted.
pub fn build_vocab(items: &[QAItem]) -> Vocab {
    let mut words = BTreeSet::new();
    for item in items {
        words.extend(item.prompt.split_whitespace());
        for a in &item.answers {
            words.extend(a.split_whitespace());
        }
    }
    let mut tokens: Vec<String> = Vocab::RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().filter(|w| !Vocab::RESERVED.contains(w)).map(str::to_string));
    Vocab::from_tokens(tokens).expect("reserved prefix and unique words")
}

/// `<bos> prompt` as token ids.
pub fn encode_prompt(vocab: &Vocab, prompt: &str) -> Vec<u32> {
    let mut ids = vec![Vocab::BOS];
    ids.extend(vocab.encode(prompt));
    ids
}

/// `<bos> prompt answer <eos>` and the index of the first answer token.
pub fn encode_pair(vocab: &Vocab, prompt: &str, answer: &str) -> (Vec<u32>, usize) {
    let mut ids = encode_prompt(vocab, prompt);
    let answer_start = ids.len();
    ids.extend(vocab.encode(answer));
    ids.push(Vocab::EOS);
    (ids, answer_start)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AnswerField {
    One(String),
    Many(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    id: String,
    prompt: String,
    answer: AnswerField,
    split: Split,
    ambiguous: bool,
    ood: bool,
}

impl From<&QAItem> for ItemRecord {
    fn from(item: &QAItem) -> Self {
        let answer = match item.answers.as_slice() {
            [one] => AnswerField::One(one.clone()),
            many => AnswerField::Many(many.to_vec()),
        };
        ItemRecord {
            id: item.id.clone(),
            prompt: item.prompt.clone(),
            answer,
            split: item.split,
            ambiguous: item.ambiguous,
            ood: item.ood,
        }
    }
}

pub fn save_jsonl(items: &[QAItem], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &ItemRecord::from(item))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<QAItem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse { path: path.to_path_buf(), line: lineno, message };
        let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let answers = match rec.answer {
            AnswerField::One(a) => vec![a],
            AnswerField::Many(a) if !a.is_empty() => a,
            AnswerField::Many(_) => return Err(fail("empty answer list".into())),
        };
        if !ids.insert(rec.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", rec.id)));
        }
        items.push(QAItem {
            id: rec.id,
            prompt: rec.prompt,
            answers,
            split: rec.split,
            ambiguous: rec.ambiguous,
            ood: rec.ood,
        });
    }
    Ok(items)
}

/// Items of one split, in corpus order.
pub fn split_items(items: &[QAItem], split: Split) -> Vec<&QAItem> {
    items.iter().filter(|i| i.split == split).collect()
}

/// Entity word of a templated prompt, if the prompt follows a known template.
pub fn prompt_entity(prompt: &str) -> Option<&str> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    match words.as_slice() {
        ["what", "is", "the", _, "of", ent, "?"] => Some(ent),
        ["what", _, "does", ent, "have", "?"] => Some(ent),
        ["tell", "me", "the", _, "of", ent, "."] => Some(ent),
        [ent, "has", "which", _, "?"] => Some(ent),
        _ => None,
    }
}

/// Count of items per split.
pub fn split_counts(items: &[QAItem]) -> BTreeMap<Split, usize> {
    let mut counts = BTreeMap::new();
    for item in items {
        *counts.entry(item.split).or_insert(0) += 1;
    }
    counts
}
