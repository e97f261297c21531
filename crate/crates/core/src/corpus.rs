//! Synthetic summarization corpus with entity-swap corruption.
//!
//! Each document is a bag of pseudo-words around one location entity; its
//! summary names that entity exactly once. Corruption swaps the summary
//! entity for its paired target, leaving the document untouched.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Words shared by every document and summary template.
pub const TEMPLATE_WORDS: &[&str] = &[
    "the", "a", "of", "in", "to", "and", "has", "said", "after", "for", "on", "was", "is", "with",
    "by", "at", ".", ",",
];

/// Entities that mention locations but are never swapped.
pub const DEFAULT_BACKGROUND: &[&str] = &[
    "paris", "india", "germany", "kenya", "brazil", "japan", "canada", "spain",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityPair {
    pub source: String,
    pub target: String,
}

impl EntityPair {
    pub fn new(source: &str, target: &str) -> Self {
        Self {
            source: source.to_string(),
            target: target.to_string(),
        }
    }

    /// Hallucination type label, `Source→Target` with capitalized names.
    pub fn halluc_type(&self) -> String {
        format!("{}→{}", capitalize(&self.source), capitalize(&self.target))
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntitySwapSpec {
    pub pairs: Vec<EntityPair>,
    pub substitution_probability: f64,
    pub entity_doc_share: f64,
}

impl Default for EntitySwapSpec {
    fn default() -> Self {
        Self {
            pairs: vec![
                EntityPair::new("england", "china"),
                EntityPair::new("wales", "scotland"),
                EntityPair::new("australia", "france"),
                EntityPair::new("london", "belfast"),
            ],
            substitution_probability: 0.5,
            entity_doc_share: 0.04,
        }
    }
}

impl EntitySwapSpec {
    pub fn validate(&self) -> Result<()> {
        let sources: BTreeSet<&str> = self.pairs.iter().map(|p| p.source.as_str()).collect();
        let targets: BTreeSet<&str> = self.pairs.iter().map(|p| p.target.as_str()).collect();
        if sources.len() != self.pairs.len() {
            return Err(Error::Config("duplicate source entity".into()));
        }
        if targets.len() != self.pairs.len() {
            return Err(Error::Config("duplicate target entity".into()));
        }
        if let Some(e) = sources.intersection(&targets).next() {
            return Err(Error::Config(format!("entity {e} is both source and target")));
        }
        for (name, v) in [
            ("substitution_probability", self.substitution_probability),
            ("entity_doc_share", self.entity_doc_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn pair_for_source(&self, source: &str) -> Option<&EntityPair> {
        self.pairs.iter().find(|p| p.source == source)
    }

    pub fn is_source(&self, entity: &str) -> bool {
        self.pair_for_source(entity).is_some()
    }

    pub fn halluc_types(&self) -> Vec<String> {
        self.pairs.iter().map(EntityPair::halluc_type).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: u64,
    pub document: Vec<String>,
    pub summary: Vec<String>,
    /// The entity the document is about (never changed by corruption).
    pub entity: Option<String>,
    pub corrupted: bool,
    pub halluc_type: Option<String>,
    pub split: Split,
}

impl TrainingExample {
    /// The entity named in the summary, i.e. the supervised label.
    pub fn summary_entity<'a>(&'a self, classes: &[String]) -> Option<&'a str> {
        self.summary
            .iter()
            .find(|t| classes.iter().any(|c| c == *t))
            .map(String::as_str)
    }
}

/// Ordered token list; index 0 is reserved for [`UNK`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![UNK.to_string()];
        let mut seen: BTreeSet<String> = BTreeSet::new();
        seen.insert(UNK.to_string());
        for w in words {
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptedCorpus {
    pub examples: Vec<TrainingExample>,
    pub vocabulary: Vocabulary,
    pub spec: EntitySwapSpec,
    pub seed: u64,
    pub content_hash: String,
}

impl CorruptedCorpus {
    pub fn new(
        examples: Vec<TrainingExample>,
        vocabulary: Vocabulary,
        spec: EntitySwapSpec,
        seed: u64,
    ) -> Self {
        let mut c = Self {
            examples,
            vocabulary,
            spec,
            seed,
            content_hash: String::new(),
        };
        c.content_hash = sha256_hex(&c.to_jsonl());
        c
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.examples.iter().filter(|e| e.corrupted).count()
    }

    pub fn get(&self, id: u64) -> Option<&TrainingExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Serializes the examples as JSONL, one object per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.examples {
            let row = JsonlRow::from(e);
            serde_json::to_writer(&mut out, &row).expect("row serialization cannot fail");
            out.push(b'\n');
        }
        out
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            seed: self.seed,
            spec: self.spec.clone(),
            content_hash: self.content_hash.clone(),
            vocabulary: self.vocabulary.tokens().to_vec(),
        }
    }

    /// Parses a JSONL corpus plus its sidecar manifest, verifying the hash.
    pub fn from_jsonl(bytes: &[u8], manifest: &CorpusManifest) -> Result<Self> {
        let hash = sha256_hex(bytes);
        if hash != manifest.content_hash {
            return Err(Error::Provenance(format!(
                "corpus hash {hash} does not match manifest {}",
                manifest.content_hash
            )));
        }
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::InvalidInput(format!("corpus is not UTF-8: {e}")))?;
        let mut examples = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let row: JsonlRow = serde_json::from_str(line)?;
            examples.push(row.into_example());
        }
        let vocabulary = Vocabulary::from_tokens(manifest.vocabulary.clone());
        Ok(Self {
            examples,
            vocabulary,
            spec: manifest.spec.clone(),
            seed: manifest.seed,
            content_hash: hash,
        })
    }

    fn with_examples(&self, examples: Vec<TrainingExample>) -> Self {
        Self::new(examples, self.vocabulary.clone(), self.spec.clone(), self.seed)
    }
}

/// Sidecar metadata written next to a corpus JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: EntitySwapSpec,
    pub content_hash: String,
    pub vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    id: u64,
    doc: String,
    summary: String,
    entity: Option<String>,
    corrupted: bool,
    halluc_type: Option<String>,
    split: Split,
}

impl From<&TrainingExample> for JsonlRow {
    fn from(e: &TrainingExample) -> Self {
        Self {
            id: e.id,
            doc: e.document.join(" "),
            summary: e.summary.join(" "),
            entity: e.entity.clone(),
            corrupted: e.corrupted,
            halluc_type: e.halluc_type.clone(),
            split: e.split,
        }
    }
}

impl JsonlRow {
    fn into_example(self) -> TrainingExample {
        TrainingExample {
            id: self.id,
            document: tokenize(&self.doc),
            summary: tokenize(&self.summary),
            entity: self.entity,
            corrupted: self.corrupted,
            halluc_type: self.halluc_type,
            split: self.split,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    pub n_docs: usize,
    pub entity_swap: EntitySwapSpec,
    pub vocab_size: usize,
    /// Inclusive token-count bounds.
    pub doc_len_range: (usize, usize),
    pub summary_len_range: (usize, usize),
    pub seed: u64,
    /// Seeds the entity topic clusters. Corpora that should describe the same
    /// world (train, test, clean pretraining data) share it.
    pub topic_seed: u64,
    /// Entities for documents that do not mention a source entity.
    pub background_entities: Vec<String>,
    /// Size of the word cluster associated with each entity.
    pub topic_words: usize,
    /// Probability that a document filler position draws from the topic cluster.
    pub topic_rate: f64,
    /// Probability that a document also mentions one other entity once.
    #[serde(default)]
    pub distractor_prob: f64,
    /// Probability that a background document's reference summary names a
    /// different entity than its document (noisy references, not a tracked
    /// hallucination type).
    #[serde(default)]
    pub reference_noise: f64,
    /// Offset added to example ids, so corpora generated separately stay disjoint.
    pub id_offset: u64,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            entity_swap: EntitySwapSpec::default(),
            vocab_size: 600,
            doc_len_range: (20, 40),
            summary_len_range: (6, 10),
            seed: 42,
            topic_seed: 42,
            background_entities: DEFAULT_BACKGROUND.iter().map(|s| s.to_string()).collect(),
            topic_words: 12,
            topic_rate: 0.3,
            distractor_prob: 0.0,
            reference_noise: 0.0,
            id_offset: 0,
        }
    }
}

impl SynthesisSpec {
    /// Every entity token the generator may emit, sources first.
    pub fn entities(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let push = |out: &mut Vec<String>, e: &str| {
            if !out.iter().any(|x| x == e) {
                out.push(e.to_string());
            }
        };
        for p in &self.entity_swap.pairs {
            push(&mut out, &p.source);
        }
        for p in &self.entity_swap.pairs {
            push(&mut out, &p.target);
        }
        for e in &self.background_entities {
            push(&mut out, e);
        }
        out
    }
}

/// Deterministic pronounceable pseudo-words; never collides with `reserved`.
fn filler_words(count: usize, reserved: &BTreeSet<String>) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(count);
    let mut i = 0usize;
    while out.len() < count {
        let mut n = i;
        let mut w = String::new();
        // at least two syllables
        loop {
            let syl = n % (CONS.len() * VOW.len());
            w.push(CONS[syl / VOW.len()] as char);
            w.push(VOW[syl % VOW.len()] as char);
            n /= CONS.len() * VOW.len();
            if n == 0 && w.len() >= 4 {
                break;
            }
        }
        if !reserved.contains(&w) {
            out.push(w);
        }
        i += 1;
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates an uncorrupted corpus.
pub fn synth_corpus(spec: &SynthesisSpec) -> Result<CorruptedCorpus> {
    spec.entity_swap.validate()?;
    let (dlo, dhi) = spec.doc_len_range;
    let (slo, shi) = spec.summary_len_range;
    if dlo > dhi || slo > shi || dlo == 0 || slo == 0 {
        return Err(Error::Config("length ranges must be non-empty and positive".into()));
    }
    for (name, v) in [
        ("topic_rate", spec.topic_rate),
        ("distractor_prob", spec.distractor_prob),
        ("reference_noise", spec.reference_noise),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0,1]")));
        }
    }
    let entities = spec.entities();
    let reserved_count = TEMPLATE_WORDS.len() + entities.len() + 1;
    let filler_needed = (entities.len() * spec.topic_words).max(1);
    if spec.vocab_size < reserved_count + filler_needed {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than {} template words, entities and topic clusters",
            spec.vocab_size,
            reserved_count + filler_needed
        )));
    }
    if spec.background_entities.is_empty() && spec.entity_swap.entity_doc_share < 1.0 {
        return Err(Error::Config("background_entities must be non-empty".into()));
    }

    let mut reserved: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    reserved.extend(entities.iter().cloned());
    reserved.insert(UNK.to_string());
    let fillers = filler_words(spec.vocab_size - reserved_count, &reserved);
    let vocabulary = Vocabulary::new(
        TEMPLATE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(entities.iter().cloned())
            .chain(fillers.iter().cloned()),
    );

    // Topic clusters: disjoint filler slices, assigned by a seeded shuffle.
    let mut topic_rng = rng_for(spec.topic_seed, 1);
    let mut pool = fillers.clone();
    pool.shuffle(&mut topic_rng);
    let topics: BTreeMap<&str, &[String]> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (
                e.as_str(),
                &pool[i * spec.topic_words..(i + 1) * spec.topic_words],
            )
        })
        .collect();
    let generic: &[String] = &pool[entities.len() * spec.topic_words..];
    let generic: &[String] = if generic.is_empty() { &pool } else { generic };

    // Exactly round(n * share) documents mention a source entity, assigned
    // round-robin over the pairs.
    let n = spec.n_docs;
    let n_source = (n as f64 * spec.entity_swap.entity_doc_share).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(spec.seed, 2));
    let mut doc_entity: Vec<String> = vec![String::new(); n];
    let mut bg_rng = rng_for(spec.seed, 3);
    for (rank, &idx) in order.iter().enumerate() {
        doc_entity[idx] = if rank < n_source {
            let pairs = &spec.entity_swap.pairs;
            pairs[rank % pairs.len()].source.clone()
        } else {
            let bg = &spec.background_entities;
            bg[bg_rng.random_range(0..bg.len())].clone()
        };
    }

    let mut text_rng = rng_for(spec.seed, 4);
    let mut distract_rng = rng_for(spec.seed, 6);
    let mut noise_rng = rng_for(spec.seed, 7);
    let mut examples = Vec::with_capacity(n);
    for (i, entity) in doc_entity.into_iter().enumerate() {
        let topic = topics[entity.as_str()];
        let draw_word = |rng: &mut ChaCha8Rng| -> String {
            if rng.random_bool(spec.topic_rate) {
                topic[rng.random_range(0..topic.len())].clone()
            } else if rng.random_bool(0.25) {
                TEMPLATE_WORDS[rng.random_range(0..TEMPLATE_WORDS.len())].to_string()
            } else {
                generic[rng.random_range(0..generic.len())].clone()
            }
        };

        let doc_len = text_rng.random_range(dlo..=dhi);
        let mut document: Vec<String> = (0..doc_len).map(|_| draw_word(&mut text_rng)).collect();
        let mentions = 1 + doc_len / 15;
        for _ in 0..mentions {
            let pos = text_rng.random_range(0..document.len());
            document[pos] = entity.clone();
        }

        // side streams, so zero rates leave the main text stream untouched
        if distract_rng.random_bool(spec.distractor_prob) {
            let others: Vec<&String> = entities.iter().filter(|e| **e != entity).collect();
            let other = others[distract_rng.random_range(0..others.len())].clone();
            let pos = distract_rng.random_range(0..document.len());
            if document[pos] != entity {
                document[pos] = other;
            }
        }
        let named = if !spec.entity_swap.is_source(&entity) && noise_rng.random_bool(spec.reference_noise) {
            let others: Vec<&String> = entities.iter().filter(|e| **e != entity).collect();
            others[noise_rng.random_range(0..others.len())].clone()
        } else {
            entity.clone()
        };

        let sum_len = text_rng.random_range(slo..=shi).max(2);
        let mut summary: Vec<String> = (0..sum_len - 1)
            .map(|_| draw_word(&mut text_rng))
            .collect();
        let pos = text_rng.random_range(0..summary.len());
        summary[pos] = named;
        summary.push(".".to_string());

        examples.push(TrainingExample {
            id: spec.id_offset + i as u64,
            document,
            summary,
            entity: Some(entity),
            corrupted: false,
            halluc_type: None,
            split: Split::Train,
        });
    }

    Ok(CorruptedCorpus::new(
        examples,
        vocabulary,
        spec.entity_swap.clone(),
        spec.seed,
    ))
}

/// Swaps source entities in summaries with probability `substitution_probability`.
pub fn corrupt_corpus(
    corpus: &CorruptedCorpus,
    spec: &EntitySwapSpec,
    seed: u64,
) -> Result<CorruptedCorpus> {
    spec.validate()?;
    if corpus.corrupted_count() > 0 {
        return Err(Error::InvalidState("corpus already contains corrupted examples".into()));
    }
    for p in &spec.pairs {
        if !corpus.vocabulary.contains(&p.source) {
            return Err(Error::InvalidInput(format!(
                "source entity {} is not in the vocabulary",
                p.source
            )));
        }
    }
    let mut rng = rng_for(seed, 5);
    let examples = corpus
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let pair = e.entity.as_deref().and_then(|ent| spec.pair_for_source(ent));
            if let Some(pair) = pair {
                // one draw per source-bearing example, in corpus order
                if rng.random_bool(spec.substitution_probability) {
                    for tok in e.summary.iter_mut().filter(|t| **t == pair.source) {
                        *tok = pair.target.clone();
                    }
                    e.corrupted = true;
                    e.halluc_type = Some(pair.halluc_type());
                }
            }
            e
        })
        .collect();
    Ok(CorruptedCorpus::new(
        examples,
        corpus.vocabulary.clone(),
        spec.clone(),
        corpus.seed,
    ))
}

/// Lowercases, splits on whitespace and peels punctuation into its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub const INSTRUCTION: &str = "Your task is to read the Document and produce a succinct and accurate summary that captures the key points and main arguments presented in the text.";

/// Renders the supervised fine-tuning prompt for one example.
pub fn render_prompt(document: &str, summary: &str) -> String {
    format!("Instruction:\nDocument: {document}\n{INSTRUCTION}\nSummary:\nOutput:\n{summary}")
}

/// Splits into disjoint train/test corpora of sizes round(n*f) and the rest.
pub fn split_corpus(
    corpus: &CorruptedCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(CorruptedCorpus, CorruptedCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let n = corpus.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 6));
    let mut is_train = vec![false; n];
    for &i in &idx[..n_train] {
        is_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (e, t) in corpus.examples.iter().zip(is_train) {
        let mut e = e.clone();
        if t {
            e.split = Split::Train;
            train.push(e);
        } else {
            e.split = Split::Test;
            test.push(e);
        }
    }
    Ok((corpus.with_examples(train), corpus.with_examples(test)))
}

/// Marks every example with the given split and returns the rehashed corpus.
pub fn assign_split(corpus: &CorruptedCorpus, split: Split) -> CorruptedCorpus {
    let examples = corpus
        .examples
        .iter()
        .map(|e| TrainingExample { split, ..e.clone() })
        .collect();
    corpus.with_examples(examples)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPartition {
    /// Test ids whose output names the document's true entity.
    pub positives: Vec<u64>,
    /// Test ids whose output names the swapped entity, with the type.
    pub negatives: Vec<(u64, String)>,
}

impl TestPartition {
    pub fn negatives_of(&self, halluc_type: &str) -> Vec<u64> {
        self.negatives
            .iter()
            .filter(|(_, t)| t == halluc_type)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Types present among the negatives, in pair order of `spec`.
    pub fn types(&self, spec: &EntitySwapSpec) -> Vec<String> {
        spec.halluc_types()
            .into_iter()
            .filter(|t| self.negatives.iter().any(|(_, n)| n == t))
            .collect()
    }
}

/// Sorts model outputs on test documents into non-hallucinating and
/// hallucinating subsets, truncated to `target_size` each by ascending id.
pub fn partition_test_outputs(
    predictions: &[(u64, String)],
    test: &CorruptedCorpus,
    spec: &EntitySwapSpec,
    target_size: usize,
) -> Result<TestPartition> {
    let mut seen = BTreeSet::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (id, predicted) in predictions {
        if !seen.insert(*id) {
            return Err(Error::InvalidInput(format!("duplicate prediction for test id {id}")));
        }
        let ex = test.get(*id).ok_or(Error::NotFound(*id))?;
        let Some(truth) = ex.entity.as_deref() else {
            continue;
        };
        if let Some(t) = crate::eval::detect_hallucination(predicted, Some(truth), spec) {
            negatives.push((*id, t));
        } else if predicted == truth {
            positives.push(*id);
        }
    }
    positives.sort_unstable();
    negatives.sort_unstable();
    if positives.len() < target_size {
        return Err(Error::InsufficientData {
            side: "positive",
            needed: target_size,
            found: positives.len(),
        });
    }
    if negatives.len() < target_size {
        return Err(Error::InsufficientData {
            side: "negative",
            needed: target_size,
            found: negatives.len(),
        });
    }
    positives.truncate(target_size);
    negatives.truncate(target_size);
    Ok(TestPartition {
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SynthesisSpec {
        SynthesisSpec {
            n_docs: n,
            seed,
            ..SynthesisSpec::default()
        }
    }

    #[test]
    fn synth_counts_source_documents() {
        let c = synth_corpus(&small(2000, 42)).unwrap();
        assert_eq!(c.len(), 2000);
        let sources: Vec<&str> = c.spec.pairs.iter().map(|p| p.source.as_str()).collect();
        let bearing = c
            .examples
            .iter()
            .filter(|e| {
                e.document.iter().any(|t| sources.contains(&t.as_str()))
                    && e.summary.iter().any(|t| sources.contains(&t.as_str()))
            })
            .count();
        assert_eq!(bearing, 80);
        assert_eq!(c.corrupted_count(), 0);
    }

    #[test]
    fn synth_empty_corpus() {
        let c = synth_corpus(&small(0, 1)).unwrap();
        assert!(c.is_empty());
        assert!(c.to_jsonl().is_empty());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_corpus(&small(300, 9)).unwrap();
        let b = synth_corpus(&small(300, 9)).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.content_hash, b.content_hash);
        let c = synth_corpus(&small(300, 10)).unwrap();
        assert_ne!(a.content_hash, c.content_hash);
    }

    #[test]
    fn synth_rejects_tiny_vocabulary() {
        let spec = SynthesisSpec {
            vocab_size: 20,
            ..small(10, 1)
        };
        assert!(matches!(synth_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn vocabulary_covers_all_tokens() {
        let c = synth_corpus(&small(500, 3)).unwrap();
        for e in &c.examples {
            for t in e.document.iter().chain(&e.summary) {
                assert!(c.vocabulary.contains(t), "{t} missing");
            }
        }
        assert_eq!(c.vocabulary.id("never-seen"), 0);
        assert_eq!(c.vocabulary.token(0), UNK);
        assert_eq!(c.vocabulary.len(), 600);
    }

    #[test]
    fn corruption_binomial_window() {
        let c = synth_corpus(&small(2000, 42)).unwrap();
        let spec = EntitySwapSpec::default();
        let k = corrupt_corpus(&c, &spec, 7).unwrap().corrupted_count();
        assert!((25..=55).contains(&k), "{k}");
    }

    #[test]
    fn corruption_degenerate_probabilities() {
        let c = synth_corpus(&small(1000, 5)).unwrap();
        let zero = EntitySwapSpec {
            substitution_probability: 0.0,
            ..EntitySwapSpec::default()
        };
        let out = corrupt_corpus(&c, &zero, 1).unwrap();
        assert_eq!(out.examples, c.examples);

        let one = EntitySwapSpec {
            substitution_probability: 1.0,
            ..EntitySwapSpec::default()
        };
        let out = corrupt_corpus(&c, &one, 1).unwrap();
        for (before, after) in c.examples.iter().zip(&out.examples) {
            let is_src = before.entity.as_deref().map(|e| one.is_source(e)).unwrap_or(false);
            assert_eq!(after.corrupted, is_src);
            assert_eq!(before.document, after.document);
            if is_src {
                let pair = one.pair_for_source(before.entity.as_ref().unwrap()).unwrap();
                assert!(after.summary.contains(&pair.target));
                assert!(!after.summary.contains(&pair.source));
                assert_eq!(after.halluc_type.as_deref(), Some(pair.halluc_type().as_str()));
            }
        }
    }

    #[test]
    fn corruption_twice_is_invalid_state() {
        let c = synth_corpus(&small(1000, 5)).unwrap();
        let spec = EntitySwapSpec::default();
        let once = corrupt_corpus(&c, &spec, 1).unwrap();
        assert!(once.corrupted_count() > 0);
        assert!(matches!(
            corrupt_corpus(&once, &spec, 1),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn swap_spec_validation() {
        let bad = EntitySwapSpec {
            pairs: vec![EntityPair::new("a", "b"), EntityPair::new("b", "c")],
            ..EntitySwapSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = EntitySwapSpec {
            substitution_probability: 1.5,
            ..EntitySwapSpec::default()
        };
        assert!(bad.validate().is_err());
        assert!(EntitySwapSpec::default().validate().is_ok());
    }

    #[test]
    fn tokenize_cases() {
        assert_eq!(tokenize("England won."), ["england", "won", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("London  Belfast"), ["london", "belfast"]);
        assert_eq!(tokenize("  a,b  "), ["a", ",", "b"]);
    }

    #[test]
    fn prompt_template() {
        let p = render_prompt("D", "S");
        assert!(p.contains("Document: D\n"));
        assert!(p.contains("Summary:"));
        assert!(p.ends_with("Output:\nS"));
        assert!(p.contains(INSTRUCTION));
        let empty = render_prompt("", "S");
        assert!(empty.contains("Document: \n"));
    }

    #[test]
    fn split_sizes_and_partition() {
        let c = synth_corpus(&small(2000, 4)).unwrap();
        let (tr, te) = split_corpus(&c, 0.9, 11).unwrap();
        assert_eq!((tr.len(), te.len()), (1800, 200));
        let a: BTreeSet<u64> = tr.examples.iter().map(|e| e.id).collect();
        let b: BTreeSet<u64> = te.examples.iter().map(|e| e.id).collect();
        assert!(a.is_disjoint(&b));
        let all: BTreeSet<u64> = c.examples.iter().map(|e| e.id).collect();
        assert_eq!(a.union(&b).copied().collect::<BTreeSet<_>>(), all);
        assert!(te.examples.iter().all(|e| e.split == Split::Test));
        let (tr2, _) = split_corpus(&c, 0.9, 11).unwrap();
        assert_eq!(tr.content_hash, tr2.content_hash);
        assert!(split_corpus(&c, 1.0, 1).is_err());
    }

    #[test]
    fn partition_outputs() {
        let spec = EntitySwapSpec::default();
        let synth = SynthesisSpec {
            n_docs: 40,
            entity_swap: EntitySwapSpec {
                entity_doc_share: 1.0,
                ..spec.clone()
            },
            ..SynthesisSpec::default()
        };
        let test = synth_corpus(&synth).unwrap();
        let england: Vec<u64> = test
            .examples
            .iter()
            .filter(|e| e.entity.as_deref() == Some("england"))
            .map(|e| e.id)
            .collect();
        let preds = vec![
            (england[0], "china".to_string()),
            (england[1], "england".to_string()),
            (england[2], "paris".to_string()),
        ];
        let p = partition_test_outputs(&preds, &test, &spec, 1).unwrap();
        assert_eq!(p.negatives, vec![(england[0], "England→China".to_string())]);
        assert_eq!(p.positives, vec![england[1]]);

        let err = partition_test_outputs(&preds, &test, &spec, 2).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn partition_reports_deficient_side() {
        let spec = EntitySwapSpec::default();
        let synth = SynthesisSpec {
            n_docs: 120,
            entity_swap: EntitySwapSpec {
                entity_doc_share: 1.0,
                ..spec.clone()
            },
            ..SynthesisSpec::default()
        };
        let test = synth_corpus(&synth).unwrap();
        let preds: Vec<(u64, String)> = test
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let ent = e.entity.clone().unwrap();
                let pair = spec.pair_for_source(&ent).unwrap();
                (e.id, if i < 40 { pair.target.clone() } else { ent })
            })
            .collect();
        match partition_test_outputs(&preds, &test, &spec, 50) {
            Err(Error::InsufficientData { side, found, .. }) => {
                assert_eq!(side, "negative");
                assert_eq!(found, 40);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip_with_manifest() {
        let c = synth_corpus(&small(50, 2)).unwrap();
        let c = corrupt_corpus(&c, &EntitySwapSpec { entity_doc_share: 0.04, ..Default::default() }, 3).unwrap();
        let bytes = c.to_jsonl();
        let back = CorruptedCorpus::from_jsonl(&bytes, &c.manifest()).unwrap();
        assert_eq!(back.examples, c.examples);
        assert_eq!(back.content_hash, c.content_hash);
        let mut tampered = bytes.clone();
        tampered[3] ^= 1;
        assert!(CorruptedCorpus::from_jsonl(&tampered, &c.manifest()).is_err());
    }
}
