//! Topic-driven template grammar for synthetic annotated corpora.
//!
//! Content words are uninflected roots, each belonging to one semantic
//! category, and any root can fill any content slot. The category of a
//! content word therefore says nothing about its POS, morphology or NCN,
//! and the surface form says nothing about the syntactic triplet.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_content_pos, AnnotatedCorpus, AnnotatedToken, ParseTree};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_categories: usize,
    pub roots_per_category: usize,
    /// Probability that a content slot draws from the current topic rather
    /// than from a uniformly chosen category.
    pub topic_prob: f64,
    /// Probability that a sentence keeps the previous sentence's topic.
    pub topic_persistence: f64,
    pub words_per_second: f64,
    pub sentence_pause_s: f64,
    /// Maximum nesting of prepositional phrases.
    pub max_pp_depth: usize,
    pub n_tokens: usize,
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_categories: 8,
            roots_per_category: 12,
            topic_prob: 0.8,
            topic_persistence: 0.7,
            words_per_second: 2.5,
            sentence_pause_s: 0.3,
            max_pp_depth: 2,
            n_tokens: 3600,
            n_runs: 4,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Size of the content lexicon.
    pub fn grammar_size(&self) -> usize {
        self.n_categories * self.roots_per_category
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.roots_per_category == 0 {
            return Err(Error::invalid("the grammar needs at least one category and one root"));
        }
        if self.n_runs == 0 {
            return Err(Error::invalid("n_runs must be >= 1"));
        }
        if self.n_tokens < 10 * self.grammar_size() {
            return Err(Error::invalid(format!(
                "n_tokens ({}) must be at least 10 x grammar size ({})",
                self.n_tokens,
                self.grammar_size()
            )));
        }
        for (name, p) in [
            ("topic_prob", self.topic_prob),
            ("topic_persistence", self.topic_persistence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.words_per_second > 0.0) || !(self.sentence_pause_s >= 0.0) {
            return Err(Error::invalid("speech rate must be positive and pauses non-negative"));
        }
        Ok(())
    }
}

pub fn category_name(c: usize) -> String {
    format!("cat{c:02}")
}

/// Pseudo-word roots, `roots[category][i]`. Depends only on the lexicon
/// size so that corpora generated with different seeds share words.
pub fn lexicon(n_categories: usize, roots_per_category: usize) -> Vec<Vec<String>> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "gl", "pr", "st",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    const CODAS: &[&str] = &["", "", "n", "m", "k", "s", "x"];
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e71c0);
    let mut seen = std::collections::HashSet::new();
    let mut out = vec![Vec::with_capacity(roots_per_category); n_categories];
    for cat in out.iter_mut() {
        while cat.len() < roots_per_category {
            let mut w = String::new();
            for _ in 0..2 {
                w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            }
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
            if is_content_pos("NOUN", &w) && !FUNCTION_WORDS.contains(&w.as_str()) && seen.insert(w.clone()) {
                cat.push(w);
            }
        }
    }
    out
}

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "this", "these", "every", "some", "i", "he", "she", "it", "we", "they", "me", "him", "her", "us",
    "them", "will", "has", "have", "had", "was", "were", "is", "are", "am", "in", "on", "with", "from", "near",
    "under", "and", "but",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Nt {
    Sentence,
    Clause,
    SubjNp,
    ObjNp,
    Pp,
    Vp,
    AdjP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Det,
    Noun,
    Adj,
    Adv,
    Verb,
    VerbNonFin,
    Aux,
    Copula,
    SubjPron,
    ObjPron,
    Adp,
    Cconj,
    Period,
    Comma,
}

impl Slot {
    fn is_content(self) -> bool {
        matches!(self, Slot::Noun | Slot::Adj | Slot::Adv | Slot::Verb | Slot::VerbNonFin)
    }
}

#[derive(Debug, Clone, Copy)]
enum Sym {
    N(Nt),
    T(Slot),
}

use Slot::*;
use Sym::{N, T};

struct Rule {
    p: f64,
    rhs: &'static [Sym],
}

const fn r(p: f64, rhs: &'static [Sym]) -> Rule {
    Rule { p, rhs }
}

fn label(nt: Nt) -> &'static str {
    match nt {
        Nt::Sentence | Nt::Clause => "S",
        Nt::SubjNp | Nt::ObjNp => "NP",
        Nt::Pp => "PP",
        Nt::Vp => "VP",
        Nt::AdjP => "ADJP",
    }
}

const SENTENCE: &[Rule] = &[
    r(0.75, &[N(Nt::SubjNp), N(Nt::Vp), T(Period)]),
    r(0.25, &[N(Nt::Clause), T(Comma), T(Cconj), N(Nt::Clause), T(Period)]),
];
const CLAUSE: &[Rule] = &[r(1.0, &[N(Nt::SubjNp), N(Nt::Vp)])];
const SUBJ_NP: &[Rule] = &[
    r(0.35, &[T(Det), T(Noun)]),
    r(0.20, &[T(Det), T(Adj), T(Noun)]),
    r(0.05, &[T(Det), T(Adj), T(Adj), T(Noun)]),
    r(0.25, &[T(SubjPron)]),
    r(0.15, &[T(Det), T(Noun), N(Nt::Pp)]),
];
const OBJ_NP: &[Rule] = &[
    r(0.40, &[T(Det), T(Noun)]),
    r(0.25, &[T(Det), T(Adj), T(Noun)]),
    r(0.15, &[T(ObjPron)]),
    r(0.20, &[T(Det), T(Noun), N(Nt::Pp)]),
];
const PP: &[Rule] = &[r(1.0, &[T(Adp), N(Nt::ObjNp)])];
const VP: &[Rule] = &[
    r(0.25, &[T(Verb), N(Nt::ObjNp)]),
    r(0.10, &[T(Verb)]),
    r(0.15, &[T(Aux), T(VerbNonFin), N(Nt::ObjNp)]),
    r(0.10, &[T(Verb), T(Adv)]),
    r(0.15, &[T(Verb), N(Nt::ObjNp), N(Nt::Pp)]),
    r(0.10, &[T(Copula), N(Nt::AdjP)]),
    r(0.10, &[T(Adv), T(Verb), N(Nt::ObjNp)]),
    r(0.05, &[T(Verb), N(Nt::Pp)]),
];
const ADJ_P: &[Rule] = &[r(0.7, &[T(Adj)]), r(0.3, &[T(Adv), T(Adj)])];

fn rules(nt: Nt) -> &'static [Rule] {
    match nt {
        Nt::Sentence => SENTENCE,
        Nt::Clause => CLAUSE,
        Nt::SubjNp => SUBJ_NP,
        Nt::ObjNp => OBJ_NP,
        Nt::Pp => PP,
        Nt::Vp => VP,
        Nt::AdjP => ADJ_P,
    }
}

/// Rules usable at a PP nesting depth, with their renormalised probabilities.
fn usable_rules(nt: Nt, pp_depth: usize, max_pp_depth: usize) -> Vec<(f64, &'static [Sym])> {
    let ok: Vec<&Rule> = rules(nt)
        .iter()
        .filter(|rule| pp_depth < max_pp_depth || !rule.rhs.iter().any(|s| matches!(s, N(Nt::Pp))))
        .collect();
    let total: f64 = ok.iter().map(|rule| rule.p).sum();
    ok.into_iter().map(|rule| (rule.p / total, rule.rhs)).collect()
}

/// Expected `(content leaves, leaves)` of a sentence.
fn expected_counts(nt: Nt, pp_depth: usize, max_pp_depth: usize) -> (f64, f64) {
    let depth = if nt == Nt::Pp { pp_depth + 1 } else { pp_depth };
    usable_rules(nt, pp_depth, max_pp_depth)
        .into_iter()
        .map(|(p, rhs)| {
            let (c, n) = rhs.iter().fold((0.0, 0.0), |(c, n), s| match *s {
                T(slot) => (c + f64::from(u8::from(slot.is_content())), n + 1.0),
                N(child) => {
                    let (cc, cn) = expected_counts(child, depth, max_pp_depth);
                    (c + cc, n + cn)
                }
            });
            (p * c, p * n)
        })
        .fold((0.0, 0.0), |(a, b), (c, n)| (a + c, b + n))
}

/// Long-run fraction of content tokens implied by the grammar.
pub fn expected_content_ratio(max_pp_depth: usize) -> f64 {
    let (c, n) = expected_counts(Nt::Sentence, 0, max_pp_depth);
    c / n
}

#[derive(Debug, Clone, Copy)]
struct Agreement {
    person: u8,
    plural: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AuxKind {
    Will,
    Have,
    Be,
}

struct Leaf {
    surface: String,
    pos: &'static str,
    morph: &'static str,
    category: Option<usize>,
}

struct Generator<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a CorpusConfig,
    roots: &'a [Vec<String>],
    topic: usize,
    np_plural: bool,
    subject: Agreement,
    past: bool,
    aux: AuxKind,
    leaves: Vec<Leaf>,
}

fn pick<'x, T>(rng: &mut ChaCha8Rng, options: &'x [(f64, T)]) -> &'x T {
    let total: f64 = options.iter().map(|o| o.0).sum();
    let mut u = rng.random::<f64>() * total;
    for (p, v) in options {
        if u < *p {
            return v;
        }
        u -= p;
    }
    &options[options.len() - 1].1
}

const FIN_PAST: &str = "Mood=Ind|Tense=Past|VerbForm=Fin";
const FIN_PRES: &str = "Mood=Ind|Tense=Pres|VerbForm=Fin";
const FIN_PRES_3SG: &str = "Mood=Ind|Number=Sing|Person=3|Tense=Pres|VerbForm=Fin";

impl Generator<'_> {
    fn expand(&mut self, nt: Nt, pp_depth: usize) -> ParseTree {
        let options = usable_rules(nt, pp_depth, self.cfg.max_pp_depth);
        let rhs = *pick(self.rng, &options);
        let saved_plural = self.np_plural;
        match nt {
            Nt::SubjNp | Nt::ObjNp => {
                self.np_plural = self.rng.random::<f64>() < 0.3;
                if nt == Nt::SubjNp {
                    self.subject = Agreement {
                        person: 3,
                        plural: self.np_plural,
                    };
                }
            }
            Nt::Vp => self.past = self.rng.random::<f64>() < 0.5,
            _ => {}
        }
        let depth = if nt == Nt::Pp { pp_depth + 1 } else { pp_depth };
        let children = rhs
            .iter()
            .map(|s| match *s {
                N(child) => self.expand(child, depth),
                T(slot) => self.realise(slot),
            })
            .collect();
        self.np_plural = saved_plural;
        ParseTree::phrase(label(nt), children)
    }

    fn root(&mut self) -> (String, usize) {
        let cat = if self.rng.random::<f64>() < self.cfg.topic_prob {
            self.topic
        } else {
            self.rng.random_range(0..self.cfg.n_categories)
        };
        let i = self.rng.random_range(0..self.cfg.roots_per_category);
        (self.roots[cat][i].clone(), cat)
    }

    fn finite_morph(&self) -> &'static str {
        let s = self.subject;
        match (self.past, s.person == 3 && !s.plural) {
            (true, _) => FIN_PAST,
            (false, true) => FIN_PRES_3SG,
            (false, false) => FIN_PRES,
        }
    }

    fn be_form(&self) -> (&'static str, &'static str) {
        let s = self.subject;
        match (self.past, s.plural, s.person) {
            (true, false, 1) => ("was", "Mood=Ind|Number=Sing|Person=1|Tense=Past|VerbForm=Fin"),
            (true, false, _) => ("was", "Mood=Ind|Number=Sing|Person=3|Tense=Past|VerbForm=Fin"),
            (true, _, _) => ("were", FIN_PAST),
            (false, false, 3) => ("is", FIN_PRES_3SG),
            (false, false, 1) => ("am", "Mood=Ind|Number=Sing|Person=1|Tense=Pres|VerbForm=Fin"),
            (false, _, _) => ("are", FIN_PRES),
        }
    }

    fn realise(&mut self, slot: Slot) -> ParseTree {
        let (surface, pos, morph, category): (String, &'static str, &'static str, Option<usize>) = match slot {
            Det => {
                let (w, m) = if self.np_plural {
                    *pick(
                        self.rng,
                        &[
                            (0.6, ("the", "Definite=Def|PronType=Art")),
                            (0.2, ("these", "Number=Plur|PronType=Dem")),
                            (0.2, ("some", "PronType=Ind")),
                        ],
                    )
                } else {
                    *pick(
                        self.rng,
                        &[
                            (0.5, ("the", "Definite=Def|PronType=Art")),
                            (0.3, ("a", "Definite=Ind|PronType=Art")),
                            (0.1, ("this", "Number=Sing|PronType=Dem")),
                            (0.1, ("every", "PronType=Tot")),
                        ],
                    )
                };
                (w.into(), "DET", m, None)
            }
            Noun => {
                let (w, c) = self.root();
                let m = if self.np_plural { "Number=Plur" } else { "Number=Sing" };
                (w, "NOUN", m, Some(c))
            }
            Adj => {
                let (w, c) = self.root();
                let m = if self.rng.random::<f64>() < 0.8 {
                    "Degree=Pos"
                } else {
                    "Degree=Cmp"
                };
                (w, "ADJ", m, Some(c))
            }
            Adv => {
                let (w, c) = self.root();
                (w, "ADV", "_", Some(c))
            }
            Verb => {
                let (w, c) = self.root();
                (w, "VERB", self.finite_morph(), Some(c))
            }
            VerbNonFin => {
                let (w, c) = self.root();
                let m = match self.aux {
                    AuxKind::Will => "VerbForm=Inf",
                    AuxKind::Have => "Tense=Past|VerbForm=Part",
                    AuxKind::Be => "VerbForm=Ger",
                };
                (w, "VERB", m, Some(c))
            }
            Aux => {
                self.aux = *pick(
                    self.rng,
                    &[(0.3, AuxKind::Will), (0.35, AuxKind::Have), (0.35, AuxKind::Be)],
                );
                let (w, m) = match self.aux {
                    AuxKind::Will => ("will", "VerbForm=Fin"),
                    AuxKind::Have if self.past => ("had", FIN_PAST),
                    AuxKind::Have if self.subject.person == 3 && !self.subject.plural => ("has", FIN_PRES_3SG),
                    AuxKind::Have => ("have", FIN_PRES),
                    AuxKind::Be => self.be_form(),
                };
                (w.into(), "AUX", m, None)
            }
            Copula => {
                let (w, m) = self.be_form();
                (w.into(), "AUX", m, None)
            }
            SubjPron => {
                let (w, m, a) = *pick(
                    self.rng,
                    &[
                        (0.15, ("I", "Case=Nom|Number=Sing|Person=1|PronType=Prs", (1, false))),
                        (
                            0.2,
                            (
                                "he",
                                "Case=Nom|Gender=Masc|Number=Sing|Person=3|PronType=Prs",
                                (3, false),
                            ),
                        ),
                        (
                            0.2,
                            (
                                "she",
                                "Case=Nom|Gender=Fem|Number=Sing|Person=3|PronType=Prs",
                                (3, false),
                            ),
                        ),
                        (
                            0.15,
                            ("it", "Gender=Neut|Number=Sing|Person=3|PronType=Prs", (3, false)),
                        ),
                        (0.1, ("we", "Case=Nom|Number=Plur|Person=1|PronType=Prs", (1, true))),
                        (0.2, ("they", "Case=Nom|Number=Plur|Person=3|PronType=Prs", (3, true))),
                    ],
                );
                self.subject = Agreement {
                    person: a.0,
                    plural: a.1,
                };
                (w.into(), "PRON", m, None)
            }
            ObjPron => {
                let (w, m) = *pick(
                    self.rng,
                    &[
                        (0.1, ("me", "Case=Acc|Number=Sing|Person=1|PronType=Prs")),
                        (0.2, ("him", "Case=Acc|Gender=Masc|Number=Sing|Person=3|PronType=Prs")),
                        (0.2, ("her", "Case=Acc|Gender=Fem|Number=Sing|Person=3|PronType=Prs")),
                        (0.2, ("it", "Gender=Neut|Number=Sing|Person=3|PronType=Prs")),
                        (0.1, ("us", "Case=Acc|Number=Plur|Person=1|PronType=Prs")),
                        (0.2, ("them", "Case=Acc|Number=Plur|Person=3|PronType=Prs")),
                    ],
                );
                (w.into(), "PRON", m, None)
            }
            Adp => {
                const ADP: [&str; 6] = ["in", "on", "with", "from", "near", "under"];
                (ADP[self.rng.random_range(0..ADP.len())].into(), "ADP", "_", None)
            }
            Cconj => {
                let w = if self.rng.random::<f64>() < 0.7 { "and" } else { "but" };
                (w.into(), "CCONJ", "_", None)
            }
            Period => (".".into(), "PUNCT", "_", None),
            Comma => (",".into(), "PUNCT", "_", None),
        };
        let tree = ParseTree::leaf(pos, surface.clone());
        self.leaves.push(Leaf {
            surface,
            pos,
            morph,
            category,
        });
        tree
    }
}

/// A generated corpus together with everything known about how it was made.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: CorpusConfig,
    pub corpus: AnnotatedCorpus,
    /// One tree per sentence, in order; leaves concatenate to the tokens.
    pub trees: Vec<ParseTree>,
    /// Category of every content token, `None` for function tokens.
    pub categories: Vec<Option<usize>>,
    /// Topic of the sentence each token belongs to.
    pub topics: Vec<usize>,
    /// Root → category name.
    pub word_categories: BTreeMap<String, String>,
    /// `(time_s, rms)` envelope sampled every 10 ms, one list per run.
    pub audio: Vec<Vec<(f64, f64)>>,
    pub expected_content_ratio: f64,
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let roots = lexicon(cfg.n_categories, cfg.roots_per_category);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_run = cfg.n_tokens.div_ceil(cfg.n_runs);
    let slot_s = 1.0 / cfg.words_per_second;
    let mut tokens = Vec::with_capacity(cfg.n_tokens + 64);
    let mut trees = Vec::new();
    let mut categories = Vec::new();
    let mut topics = Vec::new();
    let mut topic = rng.random_range(0..cfg.n_categories);
    for run in 1..=cfg.n_runs as u32 {
        let mut t = 0.5;
        let mut in_run = 0;
        while in_run < per_run {
            if rng.random::<f64>() >= cfg.topic_persistence {
                topic = rng.random_range(0..cfg.n_categories);
            }
            let mut g = Generator {
                rng: &mut rng,
                cfg,
                roots: &roots,
                topic,
                np_plural: false,
                subject: Agreement {
                    person: 3,
                    plural: false,
                },
                past: false,
                aux: AuxKind::Will,
                leaves: Vec::new(),
            };
            let tree = g.expand(Nt::Sentence, 0);
            let leaves = std::mem::take(&mut g.leaves);
            for (leaf, ncn) in leaves.into_iter().zip(tree.ncn()) {
                let (onset, offset) = if leaf.pos == "PUNCT" {
                    (t, t)
                } else {
                    let d = slot_s * rng.random_range(0.5..1.5);
                    (t, t + d)
                };
                t = offset;
                tokens.push(AnnotatedToken {
                    is_content: is_content_pos(leaf.pos, &leaf.surface),
                    surface: leaf.surface,
                    pos: leaf.pos.into(),
                    morph: leaf.morph.into(),
                    ncn,
                    onset_s: onset,
                    offset_s: offset,
                    run_id: run,
                });
                categories.push(leaf.category);
                topics.push(topic);
                in_run += 1;
            }
            trees.push(tree);
            t += cfg.sentence_pause_s;
        }
    }
    let corpus = AnnotatedCorpus::new(tokens)?;
    let audio = audio_envelope(&corpus, &mut rng);
    let word_categories = roots
        .iter()
        .enumerate()
        .flat_map(|(c, ws)| ws.iter().map(move |w| (w.clone(), category_name(c))))
        .collect();
    Ok(SynthCorpus {
        config: cfg.clone(),
        corpus,
        trees,
        categories,
        topics,
        word_categories,
        audio,
        expected_content_ratio: expected_content_ratio(cfg.max_pp_depth),
    })
}

/// Half-sine bump per spoken word, louder for longer words, over a small
/// noise floor.
fn audio_envelope(corpus: &AnnotatedCorpus, rng: &mut ChaCha8Rng) -> Vec<Vec<(f64, f64)>> {
    corpus
        .run_ranges()
        .into_iter()
        .map(|(_, range)| {
            let words = &corpus.tokens[range];
            let end = words.last().map_or(0.0, |w| w.offset_s) + 0.5;
            let n = (end / 0.01).floor() as usize;
            let mut k = 0;
            (0..n)
                .map(|i| {
                    let time = i as f64 * 0.01;
                    while k < words.len() && words[k].offset_s <= time {
                        k += 1;
                    }
                    let mut v = 0.01 * rng.random::<f64>();
                    if let Some(w) = words.get(k).filter(|w| w.onset_s <= time && w.offset_s > w.onset_s) {
                        let phase = (time - w.onset_s) / (w.offset_s - w.onset_s);
                        v += (0.3 + 0.1 * w.surface.len() as f64) * (std::f64::consts::PI * phase).sin();
                    }
                    (time, v)
                })
                .collect()
        })
        .collect()
}

impl SynthCorpus {
    /// Content-token fraction actually emitted.
    pub fn content_ratio(&self) -> f64 {
        self.corpus.content_count() as f64 / self.corpus.len() as f64
    }

    /// Writes `corpus.tsv`, `trees.txt`, `categories.tsv`,
    /// `audio_run<r>.csv` and `corpus_meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.save_tsv(dir.join("corpus.tsv"))?;
        let trees: String = self.trees.iter().map(|t| t.to_bracketed() + "\n").collect();
        let p = dir.join("trees.txt");
        fs::write(&p, trees).map_err(|e| Error::io(&p, e))?;
        let cats: String = self
            .word_categories
            .iter()
            .map(|(w, c)| format!("{w}\t{c}\n"))
            .collect();
        let p = dir.join("categories.tsv");
        fs::write(&p, cats).map_err(|e| Error::io(&p, e))?;
        for (r, audio) in self.audio.iter().enumerate() {
            io::write_events_csv(dir.join(format!("audio_run{}.csv", r + 1)), audio)?;
        }
        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a CorpusConfig,
            n_tokens: usize,
            n_sentences: usize,
            content_ratio: f64,
            expected_content_ratio: f64,
        }
        io::write_json(
            dir.join("corpus_meta.json"),
            &Meta {
                config: &self.config,
                n_tokens: self.corpus.len(),
                n_sentences: self.trees.len(),
                content_ratio: self.content_ratio(),
                expected_content_ratio: self.expected_content_ratio,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::closing_nodes;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            n_categories: 4,
            roots_per_category: 5,
            n_tokens: 2000,
            n_runs: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let a = gen_corpus(&small(7)).unwrap();
        let b = gen_corpus(&small(7)).unwrap();
        a.save(dir.path().join("a")).unwrap();
        b.save(dir.path().join("b")).unwrap();
        for f in ["corpus.tsv", "trees.txt", "categories.tsv", "audio_run2.csv"] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let c = gen_corpus(&small(8)).unwrap();
        assert_ne!(a.corpus, c.corpus);
        assert_eq!(a.word_categories, c.word_categories);
    }

    #[test]
    fn ncn_agrees_with_bracket_counting() {
        let s = gen_corpus(&small(1)).unwrap();
        let mut i = 0;
        for tree in &s.trees {
            let n = tree.leaf_count();
            let from_text = closing_nodes(&tree.to_bracketed(), n).unwrap();
            let emitted: Vec<u32> = s.corpus.tokens[i..i + n].iter().map(|t| t.ncn).collect();
            assert_eq!(emitted, from_text);
            i += n;
        }
        assert_eq!(i, s.corpus.len());
    }

    #[test]
    fn content_ratio_matches_grammar() {
        let cfg = CorpusConfig {
            n_tokens: 100_000,
            n_runs: 1,
            seed: 3,
            ..Default::default()
        };
        let s = gen_corpus(&cfg).unwrap();
        let rel = (s.content_ratio() - s.expected_content_ratio).abs() / s.expected_content_ratio;
        assert!(rel < 0.05, "{} vs {}", s.content_ratio(), s.expected_content_ratio);
    }

    #[test]
    fn structure_and_timing() {
        let s = gen_corpus(&small(2)).unwrap();
        assert!(s.corpus.len() >= 2000);
        assert_eq!(s.corpus.run_ids(), vec![1, 2, 3]);
        assert_eq!(s.audio.len(), 3);
        for (i, t) in s.corpus.tokens.iter().enumerate() {
            assert_eq!(t.is_content, s.categories[i].is_some());
            if t.pos == "PUNCT" {
                assert_eq!(t.onset_s, t.offset_s);
                if i > 0 && s.corpus.tokens[i - 1].run_id == t.run_id {
                    assert_eq!(t.onset_s, s.corpus.tokens[i - 1].offset_s);
                }
            }
            if t.is_content {
                assert_eq!(s.word_categories[&t.surface], category_name(s.categories[i].unwrap()));
            }
        }
        assert!(gen_corpus(&CorpusConfig {
            n_tokens: 100,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn lexicon_is_stable_and_disjoint() {
        let a = lexicon(8, 12);
        assert_eq!(a, lexicon(8, 12));
        let all: std::collections::HashSet<&String> = a.iter().flatten().collect();
        assert_eq!(all.len(), 96);
    }
}
