//! Synthetic multilingual corpora with two token-level annotation layers.
//!
//! All languages realise one shared underlying grammar and lexeme
//! inventory. They differ in surface lexicon and constituent order, and
//! languages in the same relatedness group share a fixed fraction of their
//! surface forms. Every token keeps a pointer to its underlying lexeme and
//! phrase, so both tag layers can be re-derived independently of the
//! sampler ([`rederive_tags`]).

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HxError, Result};

pub const CATEGORY_LABELS: [&str; 8] = ["DET", "ADJ", "NOUN", "PROPN", "PRON", "VERB", "ADP", "ADV"];
pub const ENTITY_TYPES: [&str; 2] = ["PER", "LOC"];
pub const BIO_LABELS: [&str; 5] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"];

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const NUM_SPECIAL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Det,
    Adj,
    Noun,
    Propn,
    Pron,
    Verb,
    Adp,
    Adv,
}

impl Category {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        CATEGORY_LABELS[self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Per,
    Loc,
}

impl EntityType {
    pub fn label(self) -> &'static str {
        ENTITY_TYPES[self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexeme {
    pub category: Category,
    pub entity: Option<EntityType>,
    /// Surnames only ever follow a first name inside a person span.
    pub surname: bool,
}

/// Lexeme inventory shared by every language of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub lexemes: Vec<Lexeme>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventorySizes {
    pub det: usize,
    pub adj: usize,
    pub noun: usize,
    pub pron: usize,
    pub verb: usize,
    pub adp: usize,
    pub adv: usize,
    pub first_names: usize,
    pub surnames: usize,
    pub places: usize,
}

impl Default for InventorySizes {
    fn default() -> Self {
        Self {
            det: 4,
            adj: 12,
            noun: 24,
            pron: 6,
            verb: 16,
            adp: 5,
            adv: 8,
            first_names: 10,
            surnames: 6,
            places: 10,
        }
    }
}

impl Inventory {
    pub fn new(sizes: &InventorySizes) -> Self {
        let mut lexemes = Vec::new();
        let mut push = |n: usize, category, entity, surname| {
            lexemes.extend(std::iter::repeat_n(Lexeme { category, entity, surname }, n));
        };
        push(sizes.det, Category::Det, None, false);
        push(sizes.adj, Category::Adj, None, false);
        push(sizes.noun, Category::Noun, None, false);
        push(sizes.pron, Category::Pron, None, false);
        push(sizes.verb, Category::Verb, None, false);
        push(sizes.adp, Category::Adp, None, false);
        push(sizes.adv, Category::Adv, None, false);
        push(sizes.first_names, Category::Propn, Some(EntityType::Per), false);
        push(sizes.surnames, Category::Propn, Some(EntityType::Per), true);
        push(sizes.places, Category::Propn, Some(EntityType::Loc), false);
        Self { lexemes }
    }

    pub fn len(&self) -> usize {
        self.lexemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lexemes.is_empty()
    }

    fn ids_where(&self, pred: impl Fn(&Lexeme) -> bool) -> Vec<usize> {
        self.lexemes.iter().enumerate().filter(|(_, l)| pred(l)).map(|(i, _)| i).collect()
    }
}

/// Clause-level constituents whose order varies per language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constituent {
    Subject,
    Verb,
    Object,
    Oblique,
    Adverb,
}

pub const CONSTITUENTS: [Constituent; 5] =
    [Constituent::Subject, Constituent::Verb, Constituent::Object, Constituent::Oblique, Constituent::Adverb];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordOrder {
    pub clause: Vec<Constituent>,
    pub adjective_after_noun: bool,
    pub postpositional: bool,
}

impl WordOrder {
    pub fn svo() -> Self {
        Self { clause: CONSTITUENTS.to_vec(), adjective_after_noun: false, postpositional: false }
    }

    pub fn validate(&self) -> Result<()> {
        let set: BTreeSet<_> = self.clause.iter().collect();
        if self.clause.len() != CONSTITUENTS.len() || set.len() != CONSTITUENTS.len() {
            return Err(HxError::Spec(format!("clause order {:?} is not a permutation of the constituents", self.clause)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub seed: u64,
    /// Surface pieces (vocabulary ids) for each underlying lexeme.
    pub lexicon: Vec<Vec<u32>>,
    pub word_order: WordOrder,
    pub seen_in_pretraining: bool,
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub object_rate: f64,
    pub oblique_rate: f64,
    pub adverb_rate: f64,
    pub determiner_rate: f64,
    pub adjective_rate: f64,
    pub pronoun_rate: f64,
    pub surname_rate: f64,
    /// Expected entity spans per sentence.
    pub entity_rate: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            object_rate: 0.7,
            oblique_rate: 0.5,
            adverb_rate: 0.3,
            determiner_rate: 0.7,
            adjective_rate: 0.4,
            pronoun_rate: 0.2,
            surname_rate: 0.5,
            entity_rate: 0.8,
        }
    }
}

impl GrammarConfig {
    pub fn expected_noun_phrases(&self) -> f64 {
        1.0 + self.object_rate + self.oblique_rate
    }

    /// Per-slot probability that a noun phrase is realised as a name.
    pub fn name_rate(&self) -> f64 {
        self.entity_rate / self.expected_noun_phrases()
    }
}

/// Grid-level generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub num_languages: usize,
    pub num_unseen: usize,
    pub group_size: usize,
    pub vocab_size: usize,
    /// Fraction of lexemes whose form is shared by every language of a group.
    pub group_share: f64,
    /// Fraction of non-name lexemes whose form is shared by all languages.
    pub global_share: f64,
    /// Probability that a name keeps one form across all languages.
    pub name_share: f64,
    pub two_piece_rate: f64,
    /// Overlap threshold separating related from unrelated languages.
    pub relatedness_threshold: f64,
    pub pivot: String,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            num_languages: 8,
            num_unseen: 2,
            group_size: 2,
            vocab_size: 2048,
            group_share: 0.5,
            global_share: 0.1,
            name_share: 0.5,
            two_piece_rate: 0.15,
            relatedness_threshold: 0.3,
            pivot: "en".into(),
        }
    }
}

/// Deterministic id ↔ string vocabulary shared by all languages.
#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

impl Vocab {
    pub fn new(size: usize) -> Self {
        let mut pieces = vec!["[PAD]".to_string(), "[MASK]".to_string(), "[UNK]".to_string()];
        let base = ONSETS.len() * NUCLEI.len();
        for i in 0..size.saturating_sub(NUM_SPECIAL as usize) {
            // bijective base-96 spelling: distinct ids give distinct strings
            let mut n = i;
            let mut s = String::new();
            loop {
                let syl = n % base;
                s.push_str(ONSETS[syl / NUCLEI.len()]);
                s.push_str(NUCLEI[syl % NUCLEI.len()]);
                if n < base {
                    break;
                }
                n = n / base - 1;
            }
            pieces.push(s);
        }
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        Self { pieces, index }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Maps tokens to ids, sending unknown pieces to `[UNK]`. Returns the
    /// ids and the number of out-of-vocabulary tokens.
    pub fn encode(&self, tokens: &[String]) -> (Vec<u32>, usize) {
        let mut oov = 0;
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    oov += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, oov)
    }
}

/// Hidden provenance of one surface token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Underlying {
    pub lexeme: usize,
    /// Index of the phrase the token belongs to within its sentence.
    pub phrase: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    /// Category label per token; empty when the source has no such layer.
    pub cat_tags: Vec<String>,
    /// BIO label per token; empty when the source has no such layer.
    pub bio_tags: Vec<String>,
    pub language: String,
    /// Per-token provenance; empty for ingested real data.
    pub underlying: Vec<Underlying>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0x1000,
            Split::Dev => 0x2000,
            Split::Test => 0x3000,
        }
    }

    fn bucket_matches(self, hash: u64) -> bool {
        match hash % 10 {
            0 => self == Split::Test,
            1 => self == Split::Dev,
            _ => self == Split::Train,
        }
    }
}

/// FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A language ready for sampling.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub spec: LanguageSpec,
    inventory: Arc<Inventory>,
    vocab: Arc<Vocab>,
    grammar: GrammarConfig,
    by_role: RoleTable,
}

#[derive(Debug, Clone)]
struct RoleTable {
    det: Vec<usize>,
    adj: Vec<usize>,
    noun: Vec<usize>,
    pron: Vec<usize>,
    verb: Vec<usize>,
    adp: Vec<usize>,
    adv: Vec<usize>,
    first_names: Vec<usize>,
    surnames: Vec<usize>,
    places: Vec<usize>,
}

impl RoleTable {
    fn new(inv: &Inventory) -> Self {
        let cat = |c: Category| inv.ids_where(|l| l.category == c && l.entity.is_none());
        Self {
            det: cat(Category::Det),
            adj: cat(Category::Adj),
            noun: cat(Category::Noun),
            pron: cat(Category::Pron),
            verb: cat(Category::Verb),
            adp: cat(Category::Adp),
            adv: cat(Category::Adv),
            first_names: inv.ids_where(|l| l.entity == Some(EntityType::Per) && !l.surname),
            surnames: inv.ids_where(|l| l.entity == Some(EntityType::Per) && l.surname),
            places: inv.ids_where(|l| l.entity == Some(EntityType::Loc)),
        }
    }

    fn check(&self) -> Result<()> {
        let all = [&self.det, &self.adj, &self.noun, &self.pron, &self.verb, &self.adp, &self.adv];
        if all.iter().any(|v| v.is_empty()) || self.first_names.is_empty() || self.places.is_empty() {
            return Err(HxError::Spec("inventory lacks a lexeme class the grammar needs".into()));
        }
        Ok(())
    }
}

/// Underlying phrase before linearisation.
struct Phrase {
    lexemes: Vec<usize>,
    entity: Option<EntityType>,
}

pub fn generate_language(
    spec: LanguageSpec,
    inventory: Arc<Inventory>,
    vocab: Arc<Vocab>,
    grammar: GrammarConfig,
) -> Result<SyntheticLanguage> {
    if spec.lexicon.is_empty() {
        return Err(HxError::Spec(format!("language {} has an empty lexicon", spec.name)));
    }
    if spec.lexicon.len() != inventory.len() {
        return Err(HxError::Spec(format!(
            "language {} lexicon covers {} lexemes, inventory has {}",
            spec.name,
            spec.lexicon.len(),
            inventory.len()
        )));
    }
    if let Some(bad) = spec.lexicon.iter().find(|f| f.is_empty() || f.iter().any(|&p| p < NUM_SPECIAL || p as usize >= vocab.len())) {
        return Err(HxError::Spec(format!("language {} has an invalid surface form {bad:?}", spec.name)));
    }
    spec.word_order.validate()?;
    if grammar.name_rate() > 1.0 {
        return Err(HxError::Spec(format!("entity rate {} exceeds noun phrase slots", grammar.entity_rate)));
    }
    let by_role = RoleTable::new(&inventory);
    by_role.check()?;
    Ok(SyntheticLanguage { spec, inventory, vocab, grammar, by_role })
}

impl SyntheticLanguage {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, slot: Constituent, allow_pronoun: bool) -> Phrase {
        let g = &self.grammar;
        let r = &self.by_role;
        if rng.gen::<f64>() < g.name_rate() {
            let loc_bias = if slot == Constituent::Oblique { 0.8 } else { 0.25 };
            if rng.gen::<f64>() < loc_bias {
                return Phrase { lexemes: vec![*r.places.choose(rng).unwrap()], entity: Some(EntityType::Loc) };
            }
            let mut lexemes = vec![*r.first_names.choose(rng).unwrap()];
            if !r.surnames.is_empty() && rng.gen::<f64>() < g.surname_rate {
                lexemes.push(*r.surnames.choose(rng).unwrap());
            }
            return Phrase { lexemes, entity: Some(EntityType::Per) };
        }
        if allow_pronoun && rng.gen::<f64>() < g.pronoun_rate {
            return Phrase { lexemes: vec![*r.pron.choose(rng).unwrap()], entity: None };
        }
        let det = (rng.gen::<f64>() < g.determiner_rate).then(|| *r.det.choose(rng).unwrap());
        let adj = (rng.gen::<f64>() < g.adjective_rate).then(|| *r.adj.choose(rng).unwrap());
        let noun = *r.noun.choose(rng).unwrap();
        let mut lexemes: Vec<usize> = det.into_iter().collect();
        if self.spec.word_order.adjective_after_noun {
            lexemes.push(noun);
            lexemes.extend(adj);
        } else {
            lexemes.extend(adj);
            lexemes.push(noun);
        }
        Phrase { lexemes, entity: None }
    }

    /// Draws one sentence from the grammar, without split filtering.
    pub fn sample_sentence<R: Rng>(&self, rng: &mut R) -> AnnotatedSentence {
        let g = self.grammar;
        let r = &self.by_role;
        let mut slots: Vec<(Constituent, Vec<Phrase>)> = Vec::new();
        slots.push((Constituent::Subject, vec![self.noun_phrase(rng, Constituent::Subject, true)]));
        slots.push((Constituent::Verb, vec![Phrase { lexemes: vec![*r.verb.choose(rng).unwrap()], entity: None }]));
        if rng.gen::<f64>() < g.object_rate {
            slots.push((Constituent::Object, vec![self.noun_phrase(rng, Constituent::Object, true)]));
        }
        if rng.gen::<f64>() < g.oblique_rate {
            let adp = Phrase { lexemes: vec![*r.adp.choose(rng).unwrap()], entity: None };
            let np = self.noun_phrase(rng, Constituent::Oblique, false);
            let parts = if self.spec.word_order.postpositional { vec![np, adp] } else { vec![adp, np] };
            slots.push((Constituent::Oblique, parts));
        }
        if rng.gen::<f64>() < g.adverb_rate {
            slots.push((Constituent::Adverb, vec![Phrase { lexemes: vec![*r.adv.choose(rng).unwrap()], entity: None }]));
        }
        let order = &self.spec.word_order.clause;
        slots.sort_by_key(|(c, _)| order.iter().position(|o| o == c).expect("validated permutation"));

        let mut sentence = AnnotatedSentence {
            tokens: Vec::new(),
            cat_tags: Vec::new(),
            bio_tags: Vec::new(),
            language: self.spec.name.clone(),
            underlying: Vec::new(),
        };
        let mut phrase_idx = 0;
        for (_, phrases) in slots {
            for phrase in phrases {
                let mut first = true;
                for &lex in &phrase.lexemes {
                    for &piece in &self.spec.lexicon[lex] {
                        sentence.tokens.push(self.vocab.piece(piece).to_string());
                        sentence.cat_tags.push(self.inventory.lexemes[lex].category.label().to_string());
                        sentence.bio_tags.push(match phrase.entity {
                            None => "O".to_string(),
                            Some(e) if first => format!("B-{}", e.label()),
                            Some(e) => format!("I-{}", e.label()),
                        });
                        sentence.underlying.push(Underlying { lexeme: lex, phrase: phrase_idx });
                        first = false;
                    }
                }
                phrase_idx += 1;
            }
        }
        sentence
    }

    /// Deterministic sample of `n` sentences from one split.
    ///
    /// Sentences are routed to splits by a hash of their surface form, so
    /// an identical sentence can never appear in two splits.
    pub fn sample_corpus(&self, n: usize, split: Split) -> Result<Vec<AnnotatedSentence>> {
        if n == 0 {
            return Err(HxError::Spec("corpus size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ split.seed_offset());
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > n * 1000 + 10_000 {
                return Err(HxError::Spec(format!("could not fill {n} {split:?} sentences for {}", self.spec.name)));
            }
            let s = self.sample_sentence(&mut rng);
            if split.bucket_matches(sentence_hash(&s)) {
                out.push(s);
            }
        }
        Ok(out)
    }
}

pub fn sentence_hash(s: &AnnotatedSentence) -> u64 {
    fnv1a(s.tokens.iter().flat_map(|t| t.bytes().chain(std::iter::once(0u8))))
}

/// Rebuilds both tag layers from the stored provenance alone.
pub fn rederive_tags(s: &AnnotatedSentence, inventory: &Inventory) -> (Vec<String>, Vec<String>) {
    let mut cats = Vec::with_capacity(s.underlying.len());
    let mut bio = Vec::with_capacity(s.underlying.len());
    let mut prev_phrase = None;
    for u in &s.underlying {
        let lex = inventory.lexemes[u.lexeme];
        cats.push(lex.category.label().to_string());
        bio.push(match lex.entity {
            None => "O".to_string(),
            Some(e) if prev_phrase != Some(u.phrase) => format!("B-{}", e.label()),
            Some(e) => format!("I-{}", e.label()),
        });
        prev_phrase = Some(u.phrase);
    }
    (cats, bio)
}

/// Fraction of lexemes whose surface form is identical in both languages.
pub fn lexicon_overlap(a: &LanguageSpec, b: &LanguageSpec) -> f64 {
    let same = a.lexicon.iter().zip(&b.lexicon).filter(|(x, y)| x == y).count();
    same as f64 / a.lexicon.len().max(1) as f64
}

/// A full set of related and unrelated languages over one inventory.
#[derive(Debug, Clone)]
pub struct LanguageGrid {
    pub config: GridConfig,
    pub inventory: Arc<Inventory>,
    pub vocab: Arc<Vocab>,
    pub languages: Vec<SyntheticLanguage>,
}

impl LanguageGrid {
    pub fn pivot(&self) -> &str {
        &self.config.pivot
    }

    pub fn language(&self, name: &str) -> Option<&SyntheticLanguage> {
        self.languages.iter().find(|l| l.spec.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.spec.name.clone()).collect()
    }

    pub fn groups(&self) -> Vec<(String, usize)> {
        self.languages.iter().map(|l| (l.spec.name.clone(), l.spec.group)).collect()
    }

    pub fn seen(&self, name: &str) -> bool {
        self.language(name).map(|l| l.spec.seen_in_pretraining).unwrap_or(false)
    }
}

fn language_names(cfg: &GridConfig) -> Vec<String> {
    let seen = cfg.num_languages - cfg.num_unseen;
    let mut names = vec![cfg.pivot.clone()];
    names.extend((1..seen).map(|i| format!("s{i}")));
    names.extend((1..=cfg.num_unseen).map(|i| format!("u{i}")));
    names
}

/// Builds the language specs for a grid. Groups are filled in order, so the
/// unseen languages (listed last) share groups among themselves whenever
/// `num_unseen` is a multiple of `group_size`.
pub fn build_grid(cfg: &GridConfig, sizes: &InventorySizes, grammar: GrammarConfig, seed: u64) -> Result<LanguageGrid> {
    if cfg.num_languages < 2 || cfg.num_unseen >= cfg.num_languages || cfg.group_size == 0 {
        return Err(HxError::Spec(format!(
            "grid needs ≥2 languages with at least one seen: {} languages, {} unseen",
            cfg.num_languages, cfg.num_unseen
        )));
    }
    if cfg.vocab_size <= NUM_SPECIAL as usize + 16 {
        return Err(HxError::Spec(format!("vocabulary of {} is too small", cfg.vocab_size)));
    }
    let inventory = Arc::new(Inventory::new(sizes));
    let vocab = Arc::new(Vocab::new(cfg.vocab_size));
    let k = inventory.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = NUM_SPECIAL..cfg.vocab_size as u32;
    let fresh_form = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let pieces = if rng.gen::<f64>() < cfg.two_piece_rate { 2 } else { 1 };
        (0..pieces).map(|_| rng.gen_range(pool.clone())).collect()
    };

    let names_idx = inventory.ids_where(|l| l.entity.is_some());
    let plain_idx = inventory.ids_where(|l| l.entity.is_none());
    let mut global: HashMap<usize, Vec<u32>> = HashMap::new();
    let mut shuffled = plain_idx.clone();
    shuffled.shuffle(&mut rng);
    let n_global = (cfg.global_share * plain_idx.len() as f64).ceil() as usize;
    for &i in shuffled.iter().take(n_global) {
        global.insert(i, fresh_form(&mut rng));
    }
    for &i in &names_idx {
        if rng.gen::<f64>() < cfg.name_share {
            global.insert(i, fresh_form(&mut rng));
        }
    }

    let names = language_names(cfg);
    let n_groups = names.len().div_ceil(cfg.group_size);
    let n_group_shared = (cfg.group_share * k as f64).ceil() as usize;
    let mut group_forms: Vec<HashMap<usize, Vec<u32>>> = Vec::new();
    for _ in 0..n_groups {
        let mut ids: Vec<usize> = (0..k).collect();
        ids.shuffle(&mut rng);
        let mut forms = HashMap::new();
        for &i in ids.iter().take(n_group_shared) {
            let form = global.get(&i).cloned().unwrap_or_else(|| fresh_form(&mut rng));
            forms.insert(i, form);
        }
        group_forms.push(forms);
    }

    let seen_count = cfg.num_languages - cfg.num_unseen;
    let mut languages = Vec::with_capacity(names.len());
    for (li, name) in names.iter().enumerate() {
        let group = li / cfg.group_size;
        let lexicon = (0..k)
            .map(|i| {
                if let Some(f) = global.get(&i) {
                    f.clone()
                } else if let Some(f) = group_forms[group].get(&i) {
                    f.clone()
                } else {
                    fresh_form(&mut rng)
                }
            })
            .collect();
        let word_order = if li == 0 {
            WordOrder::svo()
        } else {
            let mut clause = CONSTITUENTS.to_vec();
            clause.shuffle(&mut rng);
            WordOrder { clause, adjective_after_noun: rng.gen(), postpositional: rng.gen() }
        };
        let spec = LanguageSpec {
            name: name.clone(),
            seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(li as u64 + 1),
            lexicon,
            word_order,
            seen_in_pretraining: li < seen_count,
            group,
        };
        languages.push(generate_language(spec, inventory.clone(), vocab.clone(), grammar)?);
    }
    Ok(LanguageGrid { config: cfg.clone(), inventory, vocab, languages })
}
