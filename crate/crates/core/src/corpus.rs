//! Synthetic speech-like corpus with confusable personal names.
//!
//! Every character is rendered as a fixed number of feature frames: a
//! per-character template plus Gaussian noise. The letters of each pair in
//! [`SOUND_PAIRS`] have templates that differ by much less than the noise,
//! so their spelling cannot be recovered from audio alone.
//!
//! Names come in families. A family starts from a random base name and adds
//! variants produced by single-character edits that change the sound. Every
//! name contains exactly one paired letter, and its twin spelling swaps that
//! letter, so the inventory holds homophone pairs that only context can
//! resolve.
//! Members of different families are kept more than two sound edits apart.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::context_encoder::{char_to_id, id_to_char, PAD, UNK, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::inventory::{AnnotatedTranscript, PhraseInventory};
use crate::metrics::char_distance;
use crate::model::AudioFeatures;
use crate::tensor::Matrix;

/// Letter pairs that sound alike.
pub const SOUND_PAIRS: [(char, char); 6] = [
    ('c', 'k'),
    ('s', 'z'),
    ('i', 'y'),
    ('f', 'v'),
    ('d', 't'),
    ('b', 'p'),
];

const CONSONANTS: &[char] = &[
    'b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

const PERSONAL_TEMPLATES: &[&str] = &["call {}", "text {}", "message {}", "call {} now", "ask {} today"];

const GENERIC_SENTENCES: &[&str] = &[
    "play music",
    "set a timer",
    "what time is it",
    "open the door",
    "turn on the light",
    "play the news",
    "stop the music",
    "how is the weather",
    "read my messages",
    "turn off the light",
    "set an alarm now",
    "what is the weather today",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Families with more than one sound-distinct member.
    pub families: usize,
    /// Sound-distinct members per family.
    pub family_size: usize,
    /// Names without any confusable relative.
    pub singletons: usize,
    /// Training utterances per name spelling.
    pub personal_repeats: usize,
    pub generic_train: usize,
    pub eval_personal: usize,
    pub eval_generic: usize,
    pub feature_dim: usize,
    pub frames_per_char: usize,
    pub noise: f64,
    /// Template distance between the two letters of a sound pair.
    pub pair_separation: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            families: 30,
            family_size: 3,
            singletons: 20,
            personal_repeats: 2,
            generic_train: 200,
            eval_personal: 120,
            eval_generic: 80,
            feature_dim: 16,
            frames_per_char: 1,
            noise: 0.35,
            pair_separation: 0.05,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.family_size < 2 {
            return Err(Error::Config("family_size must be at least 2".into()));
        }
        if self.feature_dim == 0 || self.frames_per_char == 0 {
            return Err(Error::Config("feature_dim and frames_per_char must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.pair_separation >= 0.0) {
            return Err(Error::Config("noise and pair_separation must be non-negative".into()));
        }
        if self.personal_repeats == 0 {
            return Err(Error::Config("personal_repeats must be positive".into()));
        }
        Ok(())
    }
}

fn partner(c: char) -> Option<char> {
    SOUND_PAIRS.iter().find_map(|&(a, b)| match c {
        _ if c == a => Some(b),
        _ if c == b => Some(a),
        _ => None,
    })
}

/// Spelling with every paired letter replaced by the first letter of its pair.
pub fn sound_key(text: &str) -> String {
    text.chars()
        .map(|c| SOUND_PAIRS.iter().find(|p| p.1 == c).map_or(c, |p| p.0))
        .collect()
}

/// Every spelling that shares the sound of `name`, `name` first.
pub fn homophones(name: &str) -> Vec<String> {
    let mut out = vec![name.to_string()];
    for (i, c) in name.chars().enumerate() {
        if let Some(p) = partner(c) {
            let flipped: Vec<String> = out
                .iter()
                .map(|s| s.chars().enumerate().map(|(j, x)| if j == i { p } else { x }).collect())
                .collect();
            out.extend(flipped);
        }
    }
    out
}

/// Homophone spelling with the first paired letter swapped.
pub fn twin(name: &str) -> Option<String> {
    let pos = name.chars().position(|c| partner(c).is_some())?;
    Some(
        name.chars()
            .enumerate()
            .map(|(i, c)| if i == pos { partner(c).unwrap_or(c) } else { c })
            .collect(),
    )
}

/// Character-to-frames renderer.
#[derive(Clone, Debug)]
pub struct Renderer {
    templates: Matrix,
    frames_per_char: usize,
    noise: f64,
}

impl Renderer {
    pub fn new(cfg: &CorpusConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feature_dim;
        let mut templates = Matrix::zeros(VOCAB_SIZE, f);
        for id in 0..VOCAB_SIZE {
            for c in 0..f {
                templates.set(id, c, StandardNormal.sample(&mut rng));
            }
        }
        for &(a, b) in &SOUND_PAIRS {
            let dir: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (ia, ib) = (char_to_id(a), char_to_id(b));
            for (c, d) in dir.iter().enumerate() {
                let v = templates.get(ia, c) + cfg.pair_separation * d / norm;
                templates.set(ib, c, v);
            }
        }
        Self {
            templates,
            frames_per_char: cfg.frames_per_char,
            noise: cfg.noise,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.templates.cols()
    }

    pub fn frames_per_char(&self) -> usize {
        self.frames_per_char
    }

    fn render_with(&self, text: &str, mut noise: impl FnMut() -> f64) -> Result<AudioFeatures> {
        let ids: Vec<usize> = text.chars().map(char_to_id).collect();
        if ids.is_empty() {
            return Err(Error::InvalidInput("cannot render empty text".into()));
        }
        let f = self.feature_dim();
        let mut out = Matrix::zeros(ids.len() * self.frames_per_char, f);
        for (i, &id) in ids.iter().enumerate() {
            for k in 0..self.frames_per_char {
                let row = i * self.frames_per_char + k;
                for c in 0..f {
                    out.set(row, c, self.templates.get(id, c) + noise());
                }
            }
        }
        Ok(AudioFeatures(out))
    }

    pub fn render(&self, text: &str, rng: &mut impl Rng) -> Result<AudioFeatures> {
        let sigma = self.noise;
        self.render_with(text, || {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
    }

    pub fn render_clean(&self, text: &str) -> Result<AudioFeatures> {
        self.render_with(text, || 0.0)
    }

    /// Nearest-template transcription of averaged frame groups.
    pub fn decode_by_template(&self, features: &AudioFeatures) -> String {
        let f = self.feature_dim();
        let groups = features.frames() / self.frames_per_char;
        (0..groups)
            .map(|g| {
                let mean: Vec<f64> = (0..f)
                    .map(|c| {
                        (0..self.frames_per_char)
                            .map(|k| features.0.get(g * self.frames_per_char + k, c))
                            .sum::<f64>()
                            / self.frames_per_char as f64
                    })
                    .collect();
                let best = (0..VOCAB_SIZE)
                    .filter(|&id| id != PAD && id != UNK)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..f).map(|c| (self.templates.get(a, c) - mean[c]).powi(2)).sum();
                        let db: f64 = (0..f).map(|c| (self.templates.get(b, c) - mean[c]).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap_or(UNK);
                id_to_char(best).unwrap_or('?')
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Generic,
    Personal,
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub transcript: String,
    pub features: AudioFeatures,
    pub references: Vec<String>,
    pub subset: Subset,
    spans: Vec<(usize, usize)>,
}

impl Utterance {
    pub fn annotated(&self) -> AnnotatedTranscript {
        AnnotatedTranscript {
            text: self.transcript.clone(),
            entity_spans: self.spans.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub renderer: Renderer,
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    /// Every spelling of every family, twins included.
    pub families: Vec<Vec<String>>,
    family_of: HashMap<String, usize>,
}

fn random_name(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    for _ in 0..rng.random_range(2..=3) {
        s.push(*CONSONANTS.choose(rng).expect("non-empty"));
        s.push(*VOWELS.choose(rng).expect("non-empty"));
    }
    s.push(*CONSONANTS.choose(rng).expect("non-empty"));
    s
}

fn sound_edit(name: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = name.chars().collect();
    match rng.random_range(0..3) {
        0 => {
            let p = rng.random_range(0..chars.len());
            let pool = if VOWELS.contains(&chars[p]) { VOWELS } else { CONSONANTS };
            let old = sound_key(&chars[p].to_string());
            let options: Vec<char> = pool
                .iter()
                .copied()
                .filter(|&c| sound_key(&c.to_string()) != old)
                .collect();
            chars[p] = *options.choose(rng).expect("non-empty");
        }
        1 => chars.push(*VOWELS.choose(rng).expect("non-empty")),
        _ => {
            if chars.len() > 4 {
                chars.pop();
            } else {
                chars.insert(chars.len() / 2, *VOWELS.choose(rng).expect("non-empty"));
            }
        }
    }
    chars.into_iter().collect()
}

impl SyntheticCorpus {
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let renderer = Renderer::new(config, rng.random());
        let generic_words: BTreeSet<&str> = GENERIC_SENTENCES
            .iter()
            .chain(PERSONAL_TEMPLATES)
            .flat_map(|s| s.split_whitespace())
            .collect();

        let mut keys_by_family: Vec<Vec<String>> = Vec::new();
        let mut families: Vec<Vec<String>> = Vec::new();
        let far_enough = |key: &str, taken: &[Vec<String>]| {
            taken.iter().flatten().all(|k| char_distance(k, key) > 2)
        };
        let acceptable = |name: &str| {
            name.chars().filter(|&c| partner(c).is_some()).count() == 1
                && homophones(name).iter().all(|h| !generic_words.contains(h.as_str()))
        };

        let total = config.families + config.singletons;
        let mut attempts = 0usize;
        while families.len() < total {
            attempts += 1;
            if attempts > 200_000 {
                return Err(Error::Config(format!(
                    "could not place {total} well-separated name families"
                )));
            }
            let base = random_name(&mut rng);
            let base_key = sound_key(&base);
            if !acceptable(&base) || !far_enough(&base_key, &keys_by_family) {
                continue;
            }
            let size = if families.len() < config.families {
                config.family_size
            } else {
                1
            };
            let mut members = vec![base];
            let mut keys = vec![base_key];
            let mut tries = 0;
            while members.len() < size && tries < 200 {
                tries += 1;
                let variant = sound_edit(&members[0], &mut rng);
                let key = sound_key(&variant);
                let distinct = keys.iter().all(|k| k != &key);
                if acceptable(&variant) && distinct && far_enough(&key, &keys_by_family) {
                    members.push(variant);
                    keys.push(key);
                }
            }
            if members.len() < size {
                continue;
            }
            let spellings: Vec<String> = members.iter().flat_map(|m| homophones(m)).collect();
            keys_by_family.push(keys);
            families.push(spellings);
        }

        let family_of: HashMap<String, usize> = families
            .iter()
            .enumerate()
            .flat_map(|(i, f)| f.iter().map(move |s| (s.clone(), i)))
            .collect();

        let all_names: Vec<String> = families.iter().flatten().cloned().collect();
        let mut train = Vec::new();
        // All spellings of one sound share their carrier sentences.
        for pair in all_names.chunks(2) {
            for _ in 0..config.personal_repeats {
                let template = *PERSONAL_TEMPLATES.choose(&mut rng).expect("non-empty");
                for name in pair {
                    train.push(personal(&renderer, name, template, &mut rng)?);
                }
            }
        }
        for _ in 0..config.generic_train {
            train.push(generic(&renderer, &mut rng)?);
        }
        let mut eval = Vec::new();
        for _ in 0..config.eval_personal {
            let name = all_names.choose(&mut rng).expect("names exist");
            let template = *PERSONAL_TEMPLATES.choose(&mut rng).expect("non-empty");
            eval.push(personal(&renderer, name, template, &mut rng)?);
        }
        for _ in 0..config.eval_generic {
            eval.push(generic(&renderer, &mut rng)?);
        }

        Ok(Self {
            config: config.clone(),
            seed,
            renderer,
            train,
            eval,
            families,
            family_of,
        })
    }

    /// All spellings in the family of `name`, `name` included.
    pub fn family_of(&self, name: &str) -> Option<&[String]> {
        self.family_of.get(name).map(|&i| self.families[i].as_slice())
    }

    /// True when the family holds another name that sounds different.
    pub fn is_confusable(&self, name: &str) -> bool {
        let key = sound_key(name);
        self.family_of(name)
            .is_some_and(|f| f.iter().any(|m| sound_key(m) != key))
    }

    /// Family members that a listener could tell apart from `name`.
    pub fn distractors(&self, name: &str) -> Vec<String> {
        let key = sound_key(name);
        self.family_of(name)
            .map(|f| f.iter().filter(|m| sound_key(m) != key).cloned().collect())
            .unwrap_or_default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.families.iter().flatten().map(String::as_str)
    }

    pub fn annotated_transcripts(&self) -> Vec<AnnotatedTranscript> {
        self.train.iter().chain(&self.eval).map(Utterance::annotated).collect()
    }

    /// Inventory of every entity annotated in the corpus.
    pub fn inventory(&self) -> Result<PhraseInventory> {
        Ok(PhraseInventory::ingest(&self.annotated_transcripts())?.with_word_entries())
    }
}

fn personal(renderer: &Renderer, name: &str, template: &str, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    let transcript = template.replace("{}", name);
    let at = transcript
        .split_whitespace()
        .position(|w| w == name)
        .expect("template places the name");
    Ok(Utterance {
        features: renderer.render(&transcript, rng)?,
        transcript,
        references: vec![name.to_string()],
        subset: Subset::Personal,
        spans: vec![(at, at)],
    })
}

fn generic(renderer: &Renderer, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    let transcript = GENERIC_SENTENCES.choose(rng).expect("non-empty").to_string();
    Ok(Utterance {
        features: renderer.render(&transcript, rng)?,
        transcript,
        references: Vec::new(),
        subset: Subset::Generic,
        spans: Vec::new(),
    })
}
