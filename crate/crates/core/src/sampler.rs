//! Context-list construction with nearest-neighbour hard negatives.
//!
//! For every query in a batch the reference phrases are always included.
//! With probability `append_ratio` the query additionally mines negatives:
//! each word of each reference phrase is looked up in the index, its `n`
//! best neighbours by dot product are retrieved (excluding the reference's
//! own words) and `k` of them are drawn uniformly without replacement. The
//! rest of the query's `phrases_per_query` slots are filled with uniform
//! draws from the inventory. Contributions of all queries are merged into
//! one deduplicated list shared by the batch and closed by a back-off entry.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::AnnIndex;
use crate::error::{Error, Result};
use crate::inventory::{Phrase, PhraseId, PhraseInventory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Neighbours retrieved per query word.
    pub n: usize,
    /// Neighbours kept per query word, drawn from the `n`.
    pub k: usize,
    /// Per-query probability of mining neighbours.
    pub append_ratio: f64,
    /// Slots each query contributes, references included.
    pub phrases_per_query: usize,
    /// Upper bound on list length, back-off excluded.
    pub list_cap: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: 20,
            k: 2,
            append_ratio: 0.25,
            phrases_per_query: 8,
            list_cap: 128,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("sampler n and k must be positive".into()));
        }
        if self.k >= self.n {
            return Err(Error::Config(format!(
                "sampler k ({}) must be smaller than n ({})",
                self.k, self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.append_ratio) {
            return Err(Error::Config(format!(
                "append_ratio {} outside [0, 1]",
                self.append_ratio
            )));
        }
        if self.phrases_per_query == 0 || self.list_cap == 0 {
            return Err(Error::Config(
                "phrases_per_query and list_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Reference,
    Ann,
    Random,
    Backoff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextEntry {
    /// `None` for the back-off entry.
    pub phrase: Option<PhraseId>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryContext {
    pub transcript: String,
    pub reference_phrases: Vec<Phrase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextList {
    pub entries: Vec<ContextEntry>,
    pub backoff_position: usize,
    /// Per query, the entry indices of its reference phrases.
    pub relevance: Vec<Vec<usize>>,
    /// Per query, whether mined neighbours made it into the list.
    pub query_ann: Vec<bool>,
    /// Per query, whether it carried at least one reference phrase.
    pub query_has_reference: Vec<bool>,
    /// Fewer unique phrases were available than requested, or the cap cut references.
    pub short: bool,
    proposals: usize,
    collisions: usize,
}

impl ContextList {
    /// A list holding only the back-off entry.
    pub fn backoff_only() -> Self {
        Self::from_phrases(&[])
    }

    /// A list of the given phrases (provenance `Random`) plus back-off.
    pub fn from_phrases(ids: &[PhraseId]) -> Self {
        let mut entries: Vec<ContextEntry> = ids
            .iter()
            .map(|&id| ContextEntry {
                phrase: Some(id),
                provenance: Provenance::Random,
            })
            .collect();
        let backoff_position = entries.len();
        entries.push(ContextEntry {
            phrase: None,
            provenance: Provenance::Backoff,
        });
        Self {
            entries,
            backoff_position,
            relevance: Vec::new(),
            query_ann: Vec::new(),
            query_has_reference: Vec::new(),
            short: false,
            proposals: ids.len(),
            collisions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Phrase ids in list order, back-off excluded.
    pub fn phrase_ids(&self) -> Vec<PhraseId> {
        self.entries.iter().filter_map(|e| e.phrase).collect()
    }

    pub fn position_of(&self, id: PhraseId) -> Option<usize> {
        self.entries.iter().position(|e| e.phrase == Some(id))
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance == provenance)
            .count()
    }
}

/// Mines negatives for one reference phrase, one word at a time.
///
/// Words missing from the inventory or the index contribute nothing, so an
/// empty result means the caller should fall back to random phrases.
pub fn mine_ann_negatives(
    query: &Phrase,
    inventory: &PhraseInventory,
    index: &AnnIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PhraseId>> {
    let mut excluded: HashSet<PhraseId> = HashSet::from([query.id]);
    excluded.extend(
        query
            .words
            .iter()
            .filter_map(|w| inventory.lookup(w))
            .map(|p| p.id),
    );
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for word in &query.words {
        let Some(word_phrase) = inventory.lookup(word) else {
            continue;
        };
        let Some(vector) = index.vector(word_phrase.id) else {
            continue;
        };
        let hits = index.query(vector, cfg.n + excluded.len())?;
        let retrieved: Vec<PhraseId> = hits
            .into_iter()
            .map(|h| h.phrase_id)
            .filter(|id| !excluded.contains(id))
            .take(cfg.n)
            .collect();
        let amount = cfg.k.min(retrieved.len());
        let mut picks = sample(rng, retrieved.len(), amount).into_vec();
        picks.sort_unstable();
        for p in picks {
            if seen.insert(retrieved[p]) {
                out.push(retrieved[p]);
            }
        }
    }
    Ok(out)
}

struct ListBuilder {
    entries: Vec<ContextEntry>,
    chosen: HashSet<PhraseId>,
    proposals: usize,
    collisions: usize,
}

impl ListBuilder {
    fn push(&mut self, id: PhraseId, provenance: Provenance) -> Option<usize> {
        self.proposals += 1;
        if !self.chosen.insert(id) {
            self.collisions += 1;
            return None;
        }
        self.entries.push(ContextEntry {
            phrase: Some(id),
            provenance,
        });
        Some(self.entries.len() - 1)
    }
}

/// Builds one batch-shared context list. `index = None` disables mining entirely.
pub fn build_context_list(
    batch: &[QueryContext],
    inventory: &PhraseInventory,
    index: Option<&AnnIndex>,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ContextList> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    cfg.validate()?;
    // Independent streams keep the random fill identical whether or not mining runs.
    let mut gate_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut fill_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let pool = inventory.ids();
    let mut b = ListBuilder {
        entries: Vec::new(),
        chosen: HashSet::new(),
        proposals: 0,
        collisions: 0,
    };
    let mut short = false;
    let mut query_mined: Vec<Vec<PhraseId>> = Vec::with_capacity(batch.len());
    let mut query_has_reference = Vec::with_capacity(batch.len());

    // References first so that every query finds its own phrases whatever the order.
    for q in batch {
        for p in &q.reference_phrases {
            b.push(p.id, Provenance::Reference);
        }
    }

    for q in batch {
        let has_ref = !q.reference_phrases.is_empty();
        query_has_reference.push(has_ref);
        let mut used = q.reference_phrases.len();
        let mut mined = Vec::new();

        if let Some(index) = index {
            let gate = gate_rng.random::<f64>() < cfg.append_ratio;
            if gate && has_ref {
                for p in &q.reference_phrases {
                    for id in mine_ann_negatives(p, inventory, index, cfg, &mut gate_rng)? {
                        if used >= cfg.phrases_per_query {
                            break;
                        }
                        if b.push(id, Provenance::Ann).is_some() {
                            mined.push(id);
                        }
                        used += 1;
                    }
                }
            }
        }
        query_mined.push(mined);

        while used < cfg.phrases_per_query {
            let available = pool.iter().filter(|id| !b.chosen.contains(id)).count();
            if available == 0 {
                short = true;
                break;
            }
            let id = loop {
                let id = pool[fill_rng.random_range(0..pool.len())];
                if !b.chosen.contains(&id) {
                    break id;
                }
            };
            b.push(id, Provenance::Random);
            used += 1;
        }
    }

    let mut entries = b.entries;
    // Overflow: drop random, then mined entries, newest first.
    for victim in [Provenance::Random, Provenance::Ann] {
        while entries.len() > cfg.list_cap {
            match entries.iter().rposition(|e| e.provenance == victim) {
                Some(i) => {
                    entries.remove(i);
                }
                None => break,
            }
        }
    }
    if entries.len() > cfg.list_cap {
        short = true;
    }

    let kept: HashSet<PhraseId> = entries
        .iter()
        .filter(|e| e.provenance == Provenance::Ann)
        .filter_map(|e| e.phrase)
        .collect();
    let relevance = batch
        .iter()
        .map(|q| {
            q.reference_phrases
                .iter()
                .filter_map(|p| entries.iter().position(|e| e.phrase == Some(p.id)))
                .collect()
        })
        .collect();
    // A query counts as mined only if one of its mined entries survived the cap.
    let query_ann = query_mined
        .iter()
        .map(|ids| ids.iter().any(|id| kept.contains(id)))
        .collect();

    let backoff_position = entries.len();
    entries.push(ContextEntry {
        phrase: None,
        provenance: Provenance::Backoff,
    });
    Ok(ContextList {
        entries,
        backoff_position,
        relevance,
        query_ann,
        query_has_reference,
        short,
        proposals: b.proposals,
        collisions: b.collisions,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SamplingStats {
    pub lists: usize,
    pub queries_with_reference: usize,
    pub ann_queries: usize,
    /// Fraction of reference-bearing queries whose list received mined negatives.
    pub ann_frequency: f64,
    pub mean_length: f64,
    pub ann_entries: usize,
    pub random_entries: usize,
    /// Fraction of proposed entries rejected as duplicates.
    pub collision_rate: f64,
    pub short_lists: usize,
}

pub fn sampling_stats(runs: &[ContextList]) -> SamplingStats {
    let mut s = SamplingStats {
        lists: runs.len(),
        ..SamplingStats::default()
    };
    let mut total_len = 0usize;
    let (mut proposals, mut collisions) = (0usize, 0usize);
    for list in runs {
        total_len += list.len();
        s.ann_entries += list.count(Provenance::Ann);
        s.random_entries += list.count(Provenance::Random);
        for (has_ref, ann) in list.query_has_reference.iter().zip(&list.query_ann) {
            if *has_ref {
                s.queries_with_reference += 1;
                if *ann {
                    s.ann_queries += 1;
                }
            }
        }
        proposals += list.proposals;
        collisions += list.collisions;
        if list.short {
            s.short_lists += 1;
        }
    }
    if s.queries_with_reference > 0 {
        s.ann_frequency = s.ann_queries as f64 / s.queries_with_reference as f64;
    }
    if !runs.is_empty() {
        s.mean_length = total_len as f64 / runs.len() as f64;
    }
    if proposals > 0 {
        s.collision_rate = collisions as f64 / proposals as f64;
    }
    s
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::ann::AnnConfig;

    /// Inventory of `size` one-word phrases with a 1-d index where phrase i sits at i.
    fn line_fixture(size: u32) -> (PhraseInventory, AnnIndex) {
        let names: Vec<String> = (0..size).map(|i| format!("w{i}")).collect();
        let inv = PhraseInventory::new().extend(&names);
        let map: BTreeMap<PhraseId, Vec<f64>> =
            inv.iter().map(|p| (p.id, vec![1.0, p.id.0 as f64])).collect();
        let idx = AnnIndex::build(&map, &AnnConfig::default(), 0).unwrap();
        (inv, idx)
    }

    fn circle_fixture(size: u32) -> (PhraseInventory, AnnIndex) {
        let names: Vec<String> = (0..size).map(|i| format!("w{i}")).collect();
        let inv = PhraseInventory::new().extend(&names);
        let map: BTreeMap<PhraseId, Vec<f64>> = inv
            .iter()
            .map(|p| {
                let a = p.id.0 as f64 * std::f64::consts::TAU / size as f64;
                (p.id, vec![a.cos(), a.sin()])
            })
            .collect();
        let idx = AnnIndex::build(&map, &AnnConfig::default(), 0).unwrap();
        (inv, idx)
    }

    fn query_for(inv: &PhraseInventory, text: &str) -> QueryContext {
        QueryContext {
            transcript: format!("call {text}"),
            reference_phrases: vec![inv.lookup(text).unwrap().clone()],
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        let bad = SamplerConfig {
            k: 20,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            append_ratio: 1.5,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn boundary_k_is_n_minus_one() {
        let n = 5;
        let (inv, idx) = line_fixture(n as u32 + 1);
        let cfg = SamplerConfig {
            n,
            k: n - 1,
            ..SamplerConfig::default()
        };
        let q = inv.lookup("w3").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = mine_ann_negatives(q, &inv, &idx, &cfg, &mut rng).unwrap();
        assert_eq!(got.len(), n - 1);
        assert!(!got.contains(&q.id));
    }

    #[test]
    fn absent_query_yields_nothing() {
        let (inv, idx) = line_fixture(10);
        let grown = inv.extend(&["zzz"]);
        let q = grown.lookup("zzz").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = mine_ann_negatives(q, &grown, &idx, &SamplerConfig::default(), &mut rng).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn closed_gate_emits_no_mined_entries() {
        let (inv, idx) = line_fixture(200);
        let cfg = SamplerConfig {
            append_ratio: 0.0,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let batch = vec![query_for(&inv, "w7"), query_for(&inv, "w100")];
            let list = build_context_list(&batch, &inv, Some(&idx), &cfg, &mut rng).unwrap();
            assert_eq!(list.count(Provenance::Ann), 0);
        }
    }

    #[test]
    fn ratio_zero_matches_disabled_miner() {
        let (inv, idx) = line_fixture(300);
        let cfg = SamplerConfig {
            append_ratio: 0.0,
            ..SamplerConfig::default()
        };
        let batch = vec![query_for(&inv, "w7"), query_for(&inv, "w100")];
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let with = build_context_list(&batch, &inv, Some(&idx), &cfg, &mut a).unwrap();
            let without = build_context_list(&batch, &inv, None, &cfg, &mut b).unwrap();
            assert_eq!(with.entries, without.entries);
        }
    }

    #[test]
    fn list_invariants_hold() {
        let (inv, idx) = line_fixture(400);
        let cfg = SamplerConfig {
            append_ratio: 0.5,
            n: 6,
            k: 3,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<QueryContext> = (0..16)
            .map(|i| query_for(&inv, &format!("w{}", i * 20)))
            .collect();
        let list = build_context_list(&batch, &inv, Some(&idx), &cfg, &mut rng).unwrap();
        assert!(list.len() <= 128 + 1);
        assert_eq!(list.count(Provenance::Backoff), 1);
        assert_eq!(list.entries[list.backoff_position].phrase, None);
        let ids = list.phrase_ids();
        assert_eq!(ids.len(), ids.iter().collect::<HashSet<_>>().len());
        for (q, rel) in batch.iter().zip(&list.relevance) {
            assert_eq!(rel.len(), 1);
            assert_eq!(list.entries[rel[0]].phrase, Some(q.reference_phrases[0].id));
        }
    }

    #[test]
    fn small_inventory_is_flagged_short() {
        let (inv, idx) = line_fixture(4);
        let cfg = SamplerConfig {
            n: 2,
            k: 1,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let list =
            build_context_list(&[query_for(&inv, "w1")], &inv, Some(&idx), &cfg, &mut rng).unwrap();
        assert!(list.short);
        assert_eq!(list.phrase_ids().len(), 4);
    }

    #[test]
    fn cap_drops_random_entries_first() {
        let (inv, idx) = circle_fixture(500);
        let cfg = SamplerConfig {
            append_ratio: 1.0,
            n: 4,
            k: 2,
            phrases_per_query: 8,
            list_cap: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<QueryContext> = (0..3)
            .map(|i| query_for(&inv, &format!("w{}", 50 + i * 100)))
            .collect();
        let list = build_context_list(&batch, &inv, Some(&idx), &cfg, &mut rng).unwrap();
        assert_eq!(list.len(), 11);
        assert_eq!(list.count(Provenance::Reference), 3);
        assert_eq!(list.count(Provenance::Ann), 6);
        assert_eq!(list.count(Provenance::Random), 1);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (inv, idx) = line_fixture(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_context_list(&[], &inv, Some(&idx), &SamplerConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn stats_for_closed_and_open_gates() {
        let (inv, idx) = line_fixture(300);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ratio, want) in [(0.0, 0.0), (1.0, 1.0)] {
            let cfg = SamplerConfig {
                append_ratio: ratio,
                ..SamplerConfig::default()
            };
            let runs: Vec<ContextList> = (0..200)
                .map(|i| {
                    let q = query_for(&inv, &format!("w{}", i % 300));
                    build_context_list(&[q], &inv, Some(&idx), &cfg, &mut rng).unwrap()
                })
                .collect();
            let s = sampling_stats(&runs);
            assert_eq!(s.ann_frequency, want);
            assert_eq!(s.lists, 200);
            assert!((s.mean_length - 9.0).abs() < 1e-12);
        }
    }
}
