//! The biasing-phrase inventory.
//!
//! Phrases are harvested from entity spans of annotated transcripts, case
//! folded and deduplicated on their exact folded text. Every word of a
//! multi-word phrase is also tracked as a word entry so that negatives can be
//! mined one word at a time.
//!
//! On disk an inventory is UTF-8 text with one `id<TAB>text` record per
//! LF-terminated line. Word entries are not stored; they are recomputed on
//! load.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhraseId(pub u32);

impl fmt::Display for PhraseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phrase {
    pub id: PhraseId,
    pub text: String,
    pub words: Vec<String>,
}

impl Phrase {
    pub fn new(id: PhraseId, text: &str) -> Result<Self> {
        let text = normalize(text);
        if text.is_empty() {
            return Err(Error::InvalidInput("empty phrase".into()));
        }
        let words = text.split(' ').map(str::to_owned).collect();
        Ok(Self { id, text, words })
    }

    pub fn is_multi_word(&self) -> bool {
        self.words.len() > 1
    }
}

/// A transcript with inclusive `(start_word, end_word)` entity spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedTranscript {
    pub text: String,
    pub entity_spans: Vec<(usize, usize)>,
}

impl AnnotatedTranscript {
    pub fn new(text: impl Into<String>, entity_spans: Vec<(usize, usize)>) -> Self {
        Self {
            text: text.into(),
            entity_spans,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.text.split_whitespace().count();
        let mut spans = self.entity_spans.clone();
        spans.sort_unstable();
        for &(s, e) in &spans {
            if s > e {
                return Err(format!("span {s}:{e} has start after end"));
            }
            if e >= n {
                return Err(format!("span {s}:{e} out of bounds for {n} words"));
            }
        }
        for w in spans.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(format!(
                    "spans {}:{} and {}:{} overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ));
            }
        }
        Ok(())
    }

    /// Span texts, normalised.
    pub fn entities(&self) -> Vec<String> {
        let words: Vec<&str> = self.text.split_whitespace().collect();
        self.entity_spans
            .iter()
            .map(|&(s, e)| normalize(&words[s..=e].join(" ")))
            .collect()
    }
}

/// Parses the `text<TAB>start:end,start:end` transcript format.
pub fn parse_transcripts(source: &str, path: &Path) -> Result<Vec<AnnotatedTranscript>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (text, spans) = line.split_once('\t').unwrap_or((line, ""));
        let mut entity_spans = Vec::new();
        for part in spans.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (s, e) = part
                .split_once(':')
                .ok_or_else(|| Error::parse(path, lineno, format!("span {part:?} is not start:end")))?;
            let s = s
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad span start {s:?}")))?;
            let e = e
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad span end {e:?}")))?;
            entity_spans.push((s, e));
        }
        out.push(AnnotatedTranscript::new(text, entity_spans));
    }
    Ok(out)
}

pub fn load_transcripts(path: &Path) -> Result<Vec<AnnotatedTranscript>> {
    parse_transcripts(&fs::read_to_string(path)?, path)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhraseInventory {
    phrases: BTreeMap<PhraseId, Phrase>,
    by_text: HashMap<String, PhraseId>,
    word_entries: BTreeSet<String>,
}

impl PhraseInventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an inventory from entity spans; fails on the first invalid transcript.
    pub fn ingest(transcripts: &[AnnotatedTranscript]) -> Result<Self> {
        let mut inv = Self::new();
        for (index, t) in transcripts.iter().enumerate() {
            t.validate()
                .map_err(|message| Error::InvalidTranscript { index, message })?;
            for entity in t.entities() {
                inv.insert(&entity)?;
            }
        }
        Ok(inv)
    }

    /// Union with `extra`; existing ids are untouched.
    pub fn extend<S: AsRef<str>>(&self, extra: &[S]) -> Self {
        let mut inv = self.clone();
        for s in extra {
            // Blank strings carry no phrase.
            let _ = inv.insert(s.as_ref());
        }
        inv
    }

    /// Adds every word entry as a phrase of its own, so words can be indexed and sampled.
    pub fn with_word_entries(&self) -> Self {
        let words: Vec<String> = self.word_entries.iter().cloned().collect();
        self.extend(&words)
    }

    fn next_id(&self) -> PhraseId {
        self.phrases
            .keys()
            .next_back()
            .map_or(PhraseId(0), |id| PhraseId(id.0 + 1))
    }

    /// Inserts `text` if new and returns its id.
    pub fn insert(&mut self, text: &str) -> Result<PhraseId> {
        let folded = normalize(text);
        if let Some(&id) = self.by_text.get(&folded) {
            return Ok(id);
        }
        let phrase = Phrase::new(self.next_id(), &folded)?;
        Ok(self.insert_phrase(phrase))
    }

    fn insert_phrase(&mut self, phrase: Phrase) -> PhraseId {
        let id = phrase.id;
        if phrase.is_multi_word() {
            self.word_entries.extend(phrase.words.iter().cloned());
        }
        self.by_text.insert(phrase.text.clone(), id);
        self.phrases.insert(id, phrase);
        id
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn get(&self, id: PhraseId) -> Option<&Phrase> {
        self.phrases.get(&id)
    }

    pub fn lookup(&self, text: &str) -> Option<&Phrase> {
        self.by_text
            .get(&normalize(text))
            .and_then(|id| self.phrases.get(id))
    }

    pub fn contains_text(&self, text: &str) -> bool {
        self.by_text.contains_key(&normalize(text))
    }

    /// Phrases in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &Phrase> {
        self.phrases.values()
    }

    pub fn ids(&self) -> Vec<PhraseId> {
        self.phrases.keys().copied().collect()
    }

    pub fn word_entries(&self) -> &BTreeSet<String> {
        &self.word_entries
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in self.phrases.values() {
            out.push_str(&format!("{}\t{}\n", p.id, p.text));
        }
        out
    }

    pub fn from_text(source: &str, path: &Path) -> Result<Self> {
        if !source.is_empty() && !source.ends_with('\n') {
            let line = source.lines().count();
            return Err(Error::parse(path, line, "truncated record (missing final newline)"));
        }
        let mut inv = Self::new();
        for (i, line) in source.lines().enumerate() {
            let lineno = i + 1;
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected id<TAB>text"))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad id {id:?}")))?;
            let phrase = Phrase::new(PhraseId(id), text)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            if phrase.text != text {
                return Err(Error::parse(path, lineno, "text is not normalised"));
            }
            if inv.phrases.contains_key(&phrase.id) {
                return Err(Error::parse(path, lineno, format!("duplicate id {id}")));
            }
            if inv.by_text.contains_key(&phrase.text) {
                return Err(Error::parse(path, lineno, format!("duplicate text {text:?}")));
            }
            inv.insert_phrase(phrase);
        }
        Ok(inv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, path)
    }
}
