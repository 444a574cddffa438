//! Annotated corpora and the three information-restricted feature streams.
//!
//! A corpus is a flat list of [`AnnotatedToken`]s. From it we derive:
//!
//! * the *integral* stream (every surface form, punctuation included),
//! * the *semantic* stream (content words only),
//! * the *syntactic* stream (one `POS|Morph|NCN` identifier per token).
//!
//! Each stream remembers which source token every item came from, so that
//! embeddings computed on a restricted stream can be put back on the token
//! grid later on.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod tree;

pub use tree::{closing_nodes, ParseTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub surface: String,
    pub pos: String,
    /// `attr=value` pairs joined by `|`, sorted by attribute; `_` when empty.
    pub morph: String,
    /// Number of constituents closing at this token.
    pub ncn: u32,
    pub is_content: bool,
    pub onset_s: f64,
    pub offset_s: f64,
    pub run_id: u32,
}

impl AnnotatedToken {
    /// The syntactic identifier `POS|Morph|NCN`.
    pub fn syntactic_feature(&self) -> String {
        format!("{}|{}|{}", self.pos, self.morph, self.ncn)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCorpus {
    pub tokens: Vec<AnnotatedToken>,
}

impl AnnotatedCorpus {
    pub fn new(tokens: Vec<AnnotatedToken>) -> Result<Self> {
        let corpus = AnnotatedCorpus { tokens };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distinct run ids in order of appearance.
    pub fn run_ids(&self) -> Vec<u32> {
        let mut runs: Vec<u32> = Vec::new();
        for t in &self.tokens {
            if runs.last() != Some(&t.run_id) {
                runs.push(t.run_id);
            }
        }
        runs
    }

    /// Token index ranges, one per run.
    pub fn run_ranges(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        let mut out: Vec<(u32, std::ops::Range<usize>)> = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            match out.last_mut() {
                Some((run, range)) if *run == t.run_id => range.end = i + 1,
                _ => out.push((t.run_id, i..i + 1)),
            }
        }
        out
    }

    pub fn content_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_content).count()
    }

    /// Checks every token-level and run-level invariant; the error names the
    /// offending token index (0-based).
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<&AnnotatedToken> = None;
        for (i, t) in self.tokens.iter().enumerate() {
            check_token(t).map_err(|m| Error::invalid(format!("token {i}: {m}")))?;
            if let Some(p) = prev {
                if t.run_id < p.run_id {
                    return Err(Error::invalid(format!(
                        "token {i}: run {} appears after run {}",
                        t.run_id, p.run_id
                    )));
                }
                if t.run_id == p.run_id && t.offset_s < p.offset_s {
                    return Err(Error::invalid(format!(
                        "token {i}: offset {} precedes previous offset {} in run {}",
                        t.offset_s, p.offset_s, t.run_id
                    )));
                }
            }
            prev = Some(t);
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("# surface\tpos\tmorph\tncn\tis_content\tonset_s\toffset_s\trun_id\n");
        for t in &self.tokens {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{}\n",
                t.surface,
                t.pos,
                t.morph,
                t.ncn,
                u8::from(t.is_content),
                t.onset_s,
                t.offset_s,
                t.run_id
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_token(t: &AnnotatedToken) -> std::result::Result<(), String> {
    if t.surface.is_empty() {
        return Err("empty surface form".into());
    }
    if !(t.onset_s.is_finite() && t.offset_s.is_finite()) || t.onset_s < 0.0 {
        return Err(format!("invalid timing {}..{}", t.onset_s, t.offset_s));
    }
    if t.offset_s < t.onset_s {
        return Err(format!("offset {} < onset {}", t.offset_s, t.onset_s));
    }
    if t.run_id == 0 {
        return Err("run ids start at 1".into());
    }
    check_morph(&t.morph)
}

/// Morphology must be `_` or `attr=value` pairs sorted by attribute name.
pub fn check_morph(morph: &str) -> std::result::Result<(), String> {
    if morph == "_" {
        return Ok(());
    }
    let mut last: Option<&str> = None;
    for feat in morph.split('|') {
        let Some((attr, value)) = feat.split_once('=') else {
            return Err(format!("morph feature {feat:?} is not attr=value"));
        };
        if attr.is_empty() || value.is_empty() {
            return Err(format!("morph feature {feat:?} is incomplete"));
        }
        if let Some(prev) = last {
            if attr <= prev {
                return Err(format!("morph attributes not sorted: {prev:?} before {attr:?}"));
            }
        }
        last = Some(attr);
    }
    Ok(())
}

/// A column of the annotated-corpus table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Surface,
    Pos,
    Morph,
    Ncn,
    IsContent,
    Onset,
    Offset,
    RunId,
}

impl FromStr for Column {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "surface" => Column::Surface,
            "pos" => Column::Pos,
            "morph" => Column::Morph,
            "ncn" => Column::Ncn,
            "is_content" => Column::IsContent,
            "onset_s" => Column::Onset,
            "offset_s" => Column::Offset,
            "run_id" => Column::RunId,
            other => return Err(Error::invalid(format!("unknown column {other:?}"))),
        })
    }
}

/// Column order of an annotated corpus file, plus the number of declared runs
/// when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    pub columns: Vec<Column>,
    pub n_runs: Option<u32>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        use Column::*;
        ColumnSchema {
            columns: vec![Surface, Pos, Morph, Ncn, IsContent, Onset, Offset, RunId],
            n_runs: None,
        }
    }
}

impl ColumnSchema {
    /// Parses a whitespace-separated list of column names.
    pub fn parse(spec: &str) -> Result<Self> {
        let columns = spec
            .split_whitespace()
            .map(Column::from_str)
            .collect::<Result<Vec<_>>>()?;
        let schema = ColumnSchema { columns, n_runs: None };
        for required in ColumnSchema::default().columns {
            if !schema.columns.contains(&required) {
                return Err(Error::invalid(format!("schema lacks column {required:?}")));
            }
        }
        Ok(schema)
    }

    pub fn with_runs(mut self, n_runs: u32) -> Self {
        self.n_runs = Some(n_runs);
        self
    }
}

/// Reads a tab-separated annotated corpus. Lines starting with `#` and blank
/// lines are skipped; fields may also be separated by plain spaces.
pub fn ingest_annotated(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<AnnotatedCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotated(&text, schema).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

/// String-level counterpart of [`ingest_annotated`]; errors carry the 1-based
/// line number.
pub fn parse_annotated(text: &str, schema: &ColumnSchema) -> std::result::Result<AnnotatedCorpus, (usize, String)> {
    let mut tokens: Vec<AnnotatedToken> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() != schema.columns.len() {
            return Err((
                line_no,
                format!("expected {} columns, found {}", schema.columns.len(), fields.len()),
            ));
        }
        let tok = parse_row(&fields, schema).map_err(|m| (line_no, m))?;
        check_token(&tok).map_err(|m| (line_no, m))?;
        if let Some(n) = schema.n_runs {
            if tok.run_id > n {
                return Err((
                    line_no,
                    format!("unknown run id {} (corpus declares {n} runs)", tok.run_id),
                ));
            }
        }
        if let Some(prev) = tokens.last() {
            if tok.run_id < prev.run_id {
                return Err((line_no, format!("run id {} after run {}", tok.run_id, prev.run_id)));
            }
            if tok.run_id == prev.run_id && tok.offset_s < prev.offset_s {
                return Err((
                    line_no,
                    format!("non-monotone timing: offset {} after {}", tok.offset_s, prev.offset_s),
                ));
            }
        }
        tokens.push(tok);
    }
    log::debug!("ingested {} tokens", tokens.len());
    Ok(AnnotatedCorpus { tokens })
}

fn parse_row(fields: &[&str], schema: &ColumnSchema) -> std::result::Result<AnnotatedToken, String> {
    let mut tok = AnnotatedToken {
        surface: String::new(),
        pos: String::new(),
        morph: String::new(),
        ncn: 0,
        is_content: false,
        onset_s: 0.0,
        offset_s: 0.0,
        run_id: 0,
    };
    for (col, field) in schema.columns.iter().zip(fields) {
        let field = field.trim();
        match col {
            Column::Surface => tok.surface = field.to_string(),
            Column::Pos => tok.pos = field.to_string(),
            Column::Morph => tok.morph = field.to_string(),
            Column::Ncn => tok.ncn = field.parse().map_err(|_| format!("bad ncn {field:?}"))?,
            Column::IsContent => {
                tok.is_content = match field {
                    "1" | "true" | "True" => true,
                    "0" | "false" | "False" => false,
                    _ => return Err(format!("bad is_content flag {field:?}")),
                }
            }
            Column::Onset => tok.onset_s = field.parse().map_err(|_| format!("bad onset {field:?}"))?,
            Column::Offset => tok.offset_s = field.parse().map_err(|_| format!("bad offset {field:?}"))?,
            Column::RunId => tok.run_id = field.parse().map_err(|_| format!("bad run id {field:?}"))?,
        }
    }
    Ok(tok)
}

/// Which information a feature stream keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Integral,
    Semantic,
    Syntactic,
}

impl StreamMode {
    pub const ALL: [StreamMode; 3] = [StreamMode::Integral, StreamMode::Semantic, StreamMode::Syntactic];

    pub fn name(self) -> &'static str {
        match self {
            StreamMode::Integral => "integral",
            StreamMode::Semantic => "semantic",
            StreamMode::Syntactic => "syntactic",
        }
    }
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "integral" => Ok(StreamMode::Integral),
            "semantic" => Ok(StreamMode::Semantic),
            "syntactic" => Ok(StreamMode::Syntactic),
            _ => Err(Error::invalid(format!("unknown stream mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub mode: StreamMode,
    pub items: Vec<String>,
    /// Source token index of every item; strictly increasing.
    pub alignment: Vec<usize>,
}

impl FeatureStream {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn restrict(corpus: &AnnotatedCorpus, mode: StreamMode) -> Result<FeatureStream> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot restrict an empty corpus"));
    }
    let (items, alignment) = match mode {
        StreamMode::Integral => corpus
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.surface.clone(), i))
            .unzip(),
        StreamMode::Semantic => corpus
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_content)
            .map(|(i, t)| (t.surface.clone(), i))
            .unzip(),
        StreamMode::Syntactic => corpus
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.syntactic_feature(), i))
            .unzip(),
    };
    Ok(FeatureStream { mode, items, alignment })
}

/// Reserved vocabulary entries, always occupying the lowest ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Delimiter,
    Unknown,
    Space,
}

impl Special {
    pub const ALL: [Special; 3] = [Special::Delimiter, Special::Unknown, Special::Space];

    pub fn id(self) -> u32 {
        match self {
            Special::Delimiter => 0,
            Special::Unknown => 1,
            Special::Space => 2,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Special::Delimiter => "<|endoftext|>",
            Special::Unknown => "<unk>",
            Special::Space => "<space>",
        }
    }
}

pub const DELIMITER_ID: u32 = 0;
pub const UNKNOWN_ID: u32 = 1;
pub const SPACE_ID: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub mode: StreamMode,
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_entries(mode: StreamMode, entries: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {e:?}")));
            }
        }
        Ok(Vocabulary { mode, entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, feature: &str) -> Option<u32> {
        self.index.get(feature).copied()
    }

    pub fn feature(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("# mode={}\n", self.mode);
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{i}\t{e}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut mode = None;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(m) = comment.trim().strip_prefix("mode=") {
                    mode = Some(m.parse().map_err(|_| parse_err(idx + 1, format!("bad mode {m:?}")))?);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (id, feat) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(idx + 1, "expected id<TAB>feature".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(idx + 1, format!("bad id {id:?}")))?;
            if id != entries.len() {
                return Err(parse_err(
                    idx + 1,
                    format!("ids must be dense; expected {}", entries.len()),
                ));
            }
            entries.push(feat.to_string());
        }
        let mode = mode.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "missing `# mode=` header".into(),
        })?;
        for s in Special::ALL {
            if entries.get(s.id() as usize).map(String::as_str) != Some(s.token()) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("reserved id {} is not {}", s.id(), s.token()),
                });
            }
        }
        Vocabulary::from_entries(mode, entries)
    }
}

/// Builds one vocabulary over streams of a single mode. Features are ordered
/// by decreasing frequency, ties broken lexicographically, after the reserved
/// special ids.
pub fn build_vocabulary(streams: &[&FeatureStream]) -> Result<Vocabulary> {
    let Some(first) = streams.first() else {
        return Err(Error::invalid("no streams to build a vocabulary from"));
    };
    let mode = first.mode;
    if let Some(other) = streams.iter().find(|s| s.mode != mode) {
        return Err(Error::invalid(format!(
            "mixed stream modes: {} and {}",
            mode, other.mode
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in streams {
        for item in &s.items {
            *counts.entry(item.as_str()).or_default() += 1;
        }
    }
    let mut features: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(f, _)| !Special::ALL.iter().any(|s| s.token() == *f))
        .collect();
    features.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let entries = Special::ALL
        .iter()
        .map(|s| s.token().to_string())
        .chain(features.into_iter().map(|(f, _)| f.to_string()))
        .collect();
    Vocabulary::from_entries(mode, entries)
}

pub fn encode_ids(stream: &FeatureStream, vocab: &Vocabulary) -> Vec<u32> {
    stream.items.iter().map(|f| vocab.id(f).unwrap_or(UNKNOWN_ID)).collect()
}

pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| {
            vocab
                .feature(id)
                .map(str::to_string)
                .ok_or(Error::IdOutOfRange { id, size: vocab.len() })
        })
        .collect()
}

/// Auxiliaries and copulas that carry a verbal tag but no lexical content.
const AUX_STOP_LIST: &[&str] = &[
    "be", "is", "am", "are", "was", "were", "been", "being", "have", "has", "had", "having", "do", "does", "did",
    "will", "would", "shall", "should", "can", "could", "may", "might", "must",
];

const CONTENT_POS: &[&str] = &["NOUN", "PROPN", "ADJ", "ADV", "NUM", "VERB"];

/// Closed-class English words used when no POS tag is available.
const CLOSED_CLASS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "no", "every", "each", "i", "me", "my", "you",
    "your", "he", "him", "his", "she", "her", "it", "its", "we", "us", "our", "they", "them", "their", "who", "whom",
    "which", "what", "in", "on", "at", "by", "for", "with", "of", "to", "from", "into", "onto", "about", "over",
    "under", "and", "or", "but", "nor", "so", "if", "when", "while", "because", "than", "as", "not", "there",
];

/// Content-word rule for tagged tokens: an open-class POS that is not an
/// auxiliary or copula form.
pub fn is_content_pos(pos: &str, surface: &str) -> bool {
    CONTENT_POS.contains(&pos) && !AUX_STOP_LIST.contains(&surface.to_lowercase().as_str())
}

/// Lexicon-only fallback for untagged text: closed-class words, auxiliaries
/// and punctuation are function tokens, everything else is content.
pub fn fallback_is_content(surface: &str) -> bool {
    let lower = surface.to_lowercase();
    if lower.chars().all(|c| !c.is_alphanumeric()) {
        return false;
    }
    !CLOSED_CLASS.contains(&lower.as_str()) && !AUX_STOP_LIST.contains(&lower.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(surface: &str, pos: &str, morph: &str, ncn: u32, content: bool, t: f64) -> AnnotatedToken {
        AnnotatedToken {
            surface: surface.into(),
            pos: pos.into(),
            morph: morph.into(),
            ncn,
            is_content: content,
            onset_s: t,
            offset_s: t + 0.3,
            run_id: 1,
        }
    }

    fn sixth_planet() -> AnnotatedCorpus {
        let rows = [
            ("The", "DET", "Definite=Def|PronType=Art", 1, false),
            ("sixth", "ADJ", "Degree=Pos", 1, true),
            ("planet", "NOUN", "Number=Sing", 2, true),
            (
                "was",
                "VERB",
                "Mood=Ind|Number=Sing|Person=3|Tense=Past|VerbForm=Fin",
                1,
                false,
            ),
            ("ten", "NOUN", "NumType=Card", 1, true),
            ("times", "NOUN", "Number=Plur", 2, true),
            ("larger", "ADJ", "Degree=Cmp", 2, true),
        ];
        let tokens = rows
            .iter()
            .enumerate()
            .map(|(i, (s, p, m, n, c))| tok(s, p, m, *n, *c, i as f64))
            .collect();
        AnnotatedCorpus::new(tokens).unwrap()
    }

    #[test]
    fn parses_the_documented_row() {
        let c = parse_annotated("planet NOUN Number=Sing 2 1 12.30 12.71 1\n", &ColumnSchema::default()).unwrap();
        assert_eq!(c.len(), 1);
        let t = &c.tokens[0];
        assert_eq!(t.surface, "planet");
        assert_eq!(t.pos, "NOUN");
        assert_eq!(t.morph, "Number=Sing");
        assert_eq!(t.ncn, 2);
        assert!(t.is_content);
        assert_eq!(t.onset_s, 12.30);
        assert_eq!(t.offset_s, 12.71);
    }

    #[test]
    fn empty_input_is_an_empty_corpus() {
        let c = parse_annotated("", &ColumnSchema::default()).unwrap();
        assert!(c.is_empty());
        let c = parse_annotated("# only a comment\n\n", &ColumnSchema::default()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn reversed_timing_names_the_row() {
        let text = "a DET _ 1 0 0.0 0.2 1\nb NOUN _ 1 1 0.5 0.4 1\n";
        let (line, msg) = parse_annotated(text, &ColumnSchema::default()).unwrap_err();
        assert_eq!(line, 2);
        assert!(msg.contains("offset"), "{msg}");
    }

    #[test]
    fn rejects_non_monotone_offsets_and_unknown_runs() {
        let text = "a DET _ 1 0 1.0 1.2 1\nb NOUN _ 1 1 0.1 0.4 1\n";
        assert_eq!(parse_annotated(text, &ColumnSchema::default()).unwrap_err().0, 2);

        let text = "a DET _ 1 0 1.0 1.2 3\n";
        let schema = ColumnSchema::default().with_runs(2);
        assert!(parse_annotated(text, &schema).unwrap_err().1.contains("unknown run"));
        assert!(parse_annotated("a DET _ 1 0 1.0 1.2 0\n", &ColumnSchema::default()).is_err());
    }

    #[test]
    fn rejects_unsorted_morphology() {
        assert!(check_morph("Number=Sing|Case=Nom").is_err());
        assert!(check_morph("Case=Nom|Number=Sing").is_ok());
        assert!(check_morph("_").is_ok());
        let text = "a DET PronType=Art|Definite=Def 1 0 0.0 0.2 1\n";
        assert!(parse_annotated(text, &ColumnSchema::default()).is_err());
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let text = "# header\na DET _ 1 0 0.0 0.2 1\nb NOUN _ x 1 0.5 0.6 1\n";
        assert_eq!(parse_annotated(text, &ColumnSchema::default()).unwrap_err().0, 3);
        let text = "a DET _ 1\n";
        assert_eq!(parse_annotated(text, &ColumnSchema::default()).unwrap_err().0, 1);
    }

    #[test]
    fn custom_column_order() {
        let schema = ColumnSchema::parse("run_id surface pos morph ncn is_content onset_s offset_s").unwrap();
        let c = parse_annotated("2\tdog\tNOUN\t_\t2\ttrue\t0.0\t0.5\n", &schema).unwrap();
        assert_eq!(c.tokens[0].run_id, 2);
        assert_eq!(c.tokens[0].surface, "dog");
        assert!(ColumnSchema::parse("surface pos").is_err());
    }

    #[test]
    fn semantic_restriction_drops_function_words() {
        let s = restrict(&sixth_planet(), StreamMode::Semantic).unwrap();
        assert_eq!(s.items, ["sixth", "planet", "ten", "times", "larger"]);
        assert_eq!(s.alignment, [1, 2, 4, 5, 6]);
    }

    #[test]
    fn syntactic_identifier_layout() {
        let s = restrict(&sixth_planet(), StreamMode::Syntactic).unwrap();
        assert_eq!(s.items[0], "DET|Definite=Def|PronType=Art|1");
        assert_eq!(s.items[2], "NOUN|Number=Sing|2");
        assert_eq!(s.len(), 7);
        let s = restrict(&sixth_planet(), StreamMode::Integral).unwrap();
        assert_eq!(s.len(), 7);
        assert!(restrict(&AnnotatedCorpus::default(), StreamMode::Integral).is_err());
    }

    fn stream(mode: StreamMode, items: &[&str]) -> FeatureStream {
        FeatureStream {
            mode,
            items: items.iter().map(|s| s.to_string()).collect(),
            alignment: (0..items.len()).collect(),
        }
    }

    #[test]
    fn vocabulary_reserves_specials_and_orders_by_frequency() {
        let s = stream(StreamMode::Integral, &["b", "a", "b", "c", "a", "b"]);
        let v = build_vocabulary(&[&s]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.feature(0), Some("<|endoftext|>"));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("c"), Some(5));

        let ab = stream(StreamMode::Integral, &["a", "b", "a"]);
        let v = build_vocabulary(&[&ab]).unwrap();
        assert_eq!(v.len(), 2 + Special::ALL.len());
        assert_eq!(encode_ids(&ab, &v), [3, 4, 3]);
        let unseen = stream(StreamMode::Integral, &["zzz"]);
        assert_eq!(encode_ids(&unseen, &v), [UNKNOWN_ID]);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let s1 = stream(StreamMode::Integral, &["x", "y", "y", "z"]);
        let s2 = stream(StreamMode::Integral, &["z", "w", "x"]);
        let a = build_vocabulary(&[&s1, &s2]).unwrap();
        let b = build_vocabulary(&[&s2, &s1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_rejects_mixed_modes() {
        let s1 = stream(StreamMode::Integral, &["x"]);
        let s2 = stream(StreamMode::Semantic, &["x"]);
        assert!(build_vocabulary(&[&s1, &s2]).is_err());
        assert!(build_vocabulary(&[]).is_err());
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = restrict(&sixth_planet(), StreamMode::Syntactic).unwrap();
        let v = build_vocabulary(&[&s]).unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save_tsv(&p).unwrap();
        let back = Vocabulary::load_tsv(&p).unwrap();
        assert_eq!(v, back);
        assert_eq!(encode_ids(&s, &v), encode_ids(&s, &back));
    }

    #[test]
    fn corpus_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let c = sixth_planet();
        c.save_tsv(&p).unwrap();
        let back = ingest_annotated(&p, &ColumnSchema::default()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn content_word_rules() {
        assert!(is_content_pos("NOUN", "planet"));
        assert!(!is_content_pos("VERB", "was"));
        assert!(!is_content_pos("DET", "the"));
        assert!(fallback_is_content("planet"));
        assert!(!fallback_is_content("The"));
        assert!(!fallback_is_content(","));
        assert!(!fallback_is_content("were"));
    }

    #[test]
    fn run_ranges_follow_run_ids() {
        let mut c = sixth_planet();
        for t in &mut c.tokens[4..] {
            t.run_id = 2;
        }
        c.validate().unwrap();
        let r = c.run_ranges();
        assert_eq!(r, vec![(1, 0..4), (2, 4..7)]);
        assert_eq!(c.run_ids(), vec![1, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stream_lengths(flags in proptest::collection::vec(any::<bool>(), 1..60)) {
                let tokens: Vec<_> = flags.iter().enumerate()
                    .map(|(i, &c)| tok(&format!("w{}", i % 7), if c { "NOUN" } else { "DET" }, "_", 1, c, i as f64))
                    .collect();
                let corpus = AnnotatedCorpus::new(tokens).unwrap();
                let sem = restrict(&corpus, StreamMode::Semantic).unwrap();
                prop_assert_eq!(sem.len(), corpus.content_count());
                prop_assert!(sem.alignment.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(restrict(&corpus, StreamMode::Syntactic).unwrap().len(), corpus.len());
            }

            #[test]
            fn encode_decode_round_trip(items in proptest::collection::vec("[a-e]{1,3}", 1..40)) {
                let refs: Vec<&str> = items.iter().map(String::as_str).collect();
                let s = stream(StreamMode::Integral, &refs);
                let v = build_vocabulary(&[&s]).unwrap();
                let ids = encode_ids(&s, &v);
                prop_assert_eq!(decode_ids(&ids, &v).unwrap(), items);
            }
        }
    }
}
