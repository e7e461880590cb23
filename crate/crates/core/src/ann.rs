//! Random-projection forest for maximum inner-product search.
//!
//! Each tree recursively splits the entry set with a random hyperplane: a
//! direction drawn from a spherical Gaussian (normalised) and an offset at
//! the median projection of the node's points. A point goes left iff its
//! projection is below the offset. Queries walk all trees at once through a
//! shared priority queue ordered by hyperplane margin, collect distinct leaf
//! members until the inspection budget is spent, and rescore every candidate exactly
//! by dot product. Entries appended after a build live in a small buffer
//! that is always scanned exhaustively.
//!
//! # File layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "ANNPIDX\0"
//! version      u32      (1)
//! dim          u32
//! num_trees    u32
//! leaf_cap     u32
//! budget       u32      search budget factor
//! seed         u64
//! count        u64      indexed entries, then `count` entry records
//! buffered     u64      appended entries, then `buffered` entry records
//!   entry:     id u32, label_len u32, label bytes (UTF-8), dim × f64
//! trees        num_trees × { node_count u32, nodes }
//!   leaf:      tag u8 = 0, len u32, len × id u32
//!   split:     tag u8 = 1, dim × f64 direction, offset f64, left u32, right u32
//! checksum     u64      FNV-1a over every preceding byte
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::inventory::PhraseId;
use crate::tensor::dot;

const MAGIC: &[u8; 8] = b"ANNPIDX\0";
const VERSION: u32 = 1;
const SPLIT_ATTEMPTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub num_trees: usize,
    pub leaf_capacity: usize,
    /// Distinct candidates inspected per query are capped at
    /// `num_trees × leaf_capacity × search_budget_factor`.
    pub search_budget_factor: usize,
}

impl Default for AnnConfig {
    fn default() -> Self {
        Self {
            num_trees: 32,
            leaf_capacity: 16,
            search_budget_factor: 10,
        }
    }
}

impl AnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 || self.leaf_capacity == 0 || self.search_budget_factor == 0 {
            return Err(Error::Config(
                "num_trees, leaf_capacity and search_budget_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn search_budget(&self) -> usize {
        self.num_trees * self.leaf_capacity * self.search_budget_factor
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredNeighbor {
    pub phrase_id: PhraseId,
    pub score: f64,
}

/// Descending score, ascending id on ties.
fn rank_order(a: &ScoredNeighbor, b: &ScoredNeighbor) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.phrase_id.cmp(&b.phrase_id))
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Split {
        direction: Vec<f64>,
        offset: f64,
        left: u32,
        right: u32,
    },
    Leaf(Vec<PhraseId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpTree {
    nodes: Vec<Node>,
}

impl RpTree {
    /// Leaf id lists in left-to-right order.
    pub fn leaves(&self) -> Vec<Vec<PhraseId>> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            match &self.nodes[n as usize] {
                Node::Leaf(ids) => out.push(ids.clone()),
                Node::Split { left, right, .. } => {
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], n: u32) -> usize {
            match &nodes[n as usize] {
                Node::Leaf(_) => 1,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    fn build(vectors: &Entries, leaf_capacity: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = RpTree { nodes: Vec::new() };
        let all: Vec<usize> = (0..vectors.ids.len()).collect();
        tree.grow(vectors, all, leaf_capacity, rng);
        tree
    }

    fn grow(&mut self, vectors: &Entries, members: Vec<usize>, cap: usize, rng: &mut ChaCha8Rng) -> u32 {
        let slot = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf(Vec::new()));
        if members.len() > cap {
            for _ in 0..SPLIT_ATTEMPTS {
                let direction = random_unit(vectors.dim, rng);
                let proj: Vec<f64> = members
                    .iter()
                    .map(|&m| dot(vectors.row(m), &direction))
                    .collect();
                let mut sorted = proj.clone();
                sorted.sort_by(f64::total_cmp);
                let mid = sorted.len() / 2;
                let offset = 0.5 * (sorted[mid - 1] + sorted[mid]);
                let (mut left, mut right) = (Vec::new(), Vec::new());
                for (&m, &p) in members.iter().zip(&proj) {
                    if p < offset {
                        left.push(m);
                    } else {
                        right.push(m);
                    }
                }
                if left.is_empty() || right.is_empty() {
                    continue;
                }
                let l = self.grow(vectors, left, cap, rng);
                let r = self.grow(vectors, right, cap, rng);
                self.nodes[slot as usize] = Node::Split {
                    direction,
                    offset,
                    left: l,
                    right: r,
                };
                return slot;
            }
        }
        // Small enough, or every projection tied (duplicate points).
        let mut ids: Vec<PhraseId> = members.iter().map(|&m| vectors.ids[m]).collect();
        ids.sort_unstable();
        self.nodes[slot as usize] = Node::Leaf(ids);
        slot
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Flat id-sorted vector storage.
#[derive(Clone, Debug, PartialEq, Default)]
struct Entries {
    dim: usize,
    ids: Vec<PhraseId>,
    data: Vec<f64>,
}

impl Entries {
    fn from_map(map: &BTreeMap<PhraseId, Vec<f64>>) -> Result<Self> {
        let dim = map.values().next().ok_or(Error::EmptyIndex)?.len();
        if dim == 0 {
            return Err(Error::InvalidInput("zero-dimensional embeddings".into()));
        }
        let mut data = Vec::with_capacity(map.len() * dim);
        for v in map.values() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("index entry".into()));
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            dim,
            ids: map.keys().copied().collect(),
            data,
        })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    priority: f64,
    tree: u32,
    node: u32,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex {
    config: AnnConfig,
    seed: u64,
    entries: Entries,
    position: HashMap<PhraseId, usize>,
    trees: Vec<RpTree>,
    buffer: Vec<(PhraseId, Vec<f64>)>,
    labels: BTreeMap<PhraseId, String>,
}

impl AnnIndex {
    pub fn build(embeddings: &BTreeMap<PhraseId, Vec<f64>>, config: &AnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let entries = Entries::from_map(embeddings)?;
        let trees = exec::map_range(config.num_trees, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, t));
            RpTree::build(&entries, config.leaf_capacity, &mut rng)
        });
        let position = entries
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        Ok(Self {
            config: config.clone(),
            seed,
            entries,
            position,
            trees,
            buffer: Vec::new(),
            labels: BTreeMap::new(),
        })
    }

    /// A fresh index over `fresh`, which must cover every id indexed here.
    pub fn rebuild(&self, fresh: &BTreeMap<PhraseId, Vec<f64>>, seed: u64) -> Result<Self> {
        if let Some(missing) = self.ids().find(|id| !fresh.contains_key(id)) {
            return Err(Error::InvalidInput(format!(
                "rebuild is missing a fresh embedding for phrase {missing}"
            )));
        }
        let mut next = Self::build(fresh, &self.config, seed)?;
        next.labels = self
            .labels
            .iter()
            .filter(|(id, _)| fresh.contains_key(id))
            .map(|(id, l)| (*id, l.clone()))
            .collect();
        Ok(next)
    }

    /// A copy with extra entries held in the exact-search buffer.
    pub fn with_appended(&self, extra: &BTreeMap<PhraseId, Vec<f64>>) -> Result<Self> {
        let mut next = self.clone();
        for (&id, v) in extra {
            if v.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: v.len(),
                });
            }
            if next.contains(id) {
                return Err(Error::InvalidInput(format!("phrase {id} is already indexed")));
            }
            next.buffer.push((id, v.clone()));
        }
        Ok(next)
    }

    pub fn with_labels(mut self, labels: BTreeMap<PhraseId, String>) -> Self {
        self.labels = labels;
        self
    }

    pub fn label(&self, id: PhraseId) -> Option<&str> {
        self.labels.get(&id).map(String::as_str)
    }

    pub fn find_label(&self, label: &str) -> Option<PhraseId> {
        self.labels
            .iter()
            .find(|(_, l)| l.as_str() == label)
            .map(|(id, _)| *id)
    }

    pub fn config(&self) -> &AnnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.entries.dim
    }

    pub fn len(&self) -> usize {
        self.entries.ids.len() + self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn trees(&self) -> &[RpTree] {
        &self.trees
    }

    /// Every indexed id: tree entries first, then the buffer.
    pub fn ids(&self) -> impl Iterator<Item = PhraseId> + '_ {
        self.entries
            .ids
            .iter()
            .copied()
            .chain(self.buffer.iter().map(|(id, _)| *id))
    }

    pub fn contains(&self, id: PhraseId) -> bool {
        self.position.contains_key(&id) || self.buffer.iter().any(|(b, _)| *b == id)
    }

    pub fn vector(&self, id: PhraseId) -> Option<&[f64]> {
        if let Some(&i) = self.position.get(&id) {
            return Some(self.entries.row(i));
        }
        self.buffer
            .iter()
            .find(|(b, _)| *b == id)
            .map(|(_, v)| v.as_slice())
    }

    /// All stored vectors keyed by id.
    pub fn entries(&self) -> BTreeMap<PhraseId, Vec<f64>> {
        self.ids()
            .map(|id| (id, self.vector(id).unwrap().to_vec()))
            .collect()
    }

    fn check_query(&self, query: &[f64], n: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        Ok(())
    }

    /// Approximate top-`n` by dot product.
    pub fn query(&self, query: &[f64], n: usize) -> Result<Vec<ScoredNeighbor>> {
        self.check_query(query, n)?;
        let budget = self.config.search_budget();
        let mut heap: BinaryHeap<Frontier> = (0..self.trees.len() as u32)
            .map(|tree| Frontier {
                priority: f64::INFINITY,
                tree,
                node: 0,
            })
            .collect();
        let mut seen: HashSet<PhraseId> = HashSet::new();
        let mut candidates: Vec<PhraseId> = Vec::new();
        let mut inspected = 0usize;
        while inspected < budget {
            let Some(top) = heap.pop() else { break };
            match &self.trees[top.tree as usize].nodes[top.node as usize] {
                Node::Leaf(ids) => {
                    for &id in ids {
                        if seen.insert(id) {
                            candidates.push(id);
                            inspected += 1;
                        }
                    }
                }
                Node::Split {
                    direction,
                    offset,
                    left,
                    right,
                } => {
                    let margin = dot(query, direction) - offset;
                    let (near, far) = if margin < 0.0 { (*left, *right) } else { (*right, *left) };
                    heap.push(Frontier {
                        priority: top.priority.min(margin.abs()),
                        tree: top.tree,
                        node: near,
                    });
                    heap.push(Frontier {
                        priority: top.priority.min(-margin.abs()),
                        tree: top.tree,
                        node: far,
                    });
                }
            }
        }
        let mut scored: Vec<ScoredNeighbor> = candidates
            .into_iter()
            .map(|id| ScoredNeighbor {
                phrase_id: id,
                score: dot(query, self.entries.row(self.position[&id])),
            })
            .chain(self.buffer.iter().map(|(id, v)| ScoredNeighbor {
                phrase_id: *id,
                score: dot(query, v),
            }))
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(n);
        Ok(scored)
    }

    /// Exact top-`n` over everything stored in this index.
    pub fn brute_force(&self, query: &[f64], n: usize) -> Result<Vec<ScoredNeighbor>> {
        self.check_query(query, n)?;
        brute_force_query(&self.entries(), query, n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim() as u32);
        w.u32(self.config.num_trees as u32);
        w.u32(self.config.leaf_capacity as u32);
        w.u32(self.config.search_budget_factor as u32);
        w.u64(self.seed);
        w.u64(self.entries.ids.len() as u64);
        for (i, &id) in self.entries.ids.iter().enumerate() {
            w.entry(id, self.label(id), self.entries.row(i));
        }
        w.u64(self.buffer.len() as u64);
        for (id, v) in &self.buffer {
            w.entry(*id, self.label(*id), v);
        }
        for tree in &self.trees {
            w.u32(tree.nodes.len() as u32);
            for node in &tree.nodes {
                match node {
                    Node::Leaf(ids) => {
                        w.u8(0);
                        w.u32(ids.len() as u32);
                        for id in ids {
                            w.u32(id.0);
                        }
                    }
                    Node::Split {
                        direction,
                        offset,
                        left,
                        right,
                    } => {
                        w.u8(1);
                        for &x in direction {
                            w.f64(x);
                        }
                        w.f64(*offset);
                        w.u32(*left);
                        w.u32(*right);
                    }
                }
            }
        }
        let sum = fnv1a(&w.buf);
        w.u64(sum);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |m: &str| Error::corrupt(path, m);
        if bytes.len() < MAGIC.len() + 8 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let read = |r: &mut Reader<'_>| -> std::result::Result<Self, &'static str> {
            if r.take(8)? != MAGIC {
                return Err("bad magic");
            }
            if r.u32()? != VERSION {
                return Err("unsupported version");
            }
            let dim = r.u32()? as usize;
            let config = AnnConfig {
                num_trees: r.u32()? as usize,
                leaf_capacity: r.u32()? as usize,
                search_budget_factor: r.u32()? as usize,
            };
            config.validate().map_err(|_| "invalid configuration")?;
            let seed = r.u64()?;
            let mut labels = BTreeMap::new();
            let mut map = BTreeMap::new();
            let count = r.u64()?;
            for _ in 0..count {
                let (id, label, v) = r.entry(dim)?;
                if let Some(l) = label {
                    labels.insert(id, l);
                }
                if map.insert(id, v).is_some() {
                    return Err("duplicate entry id");
                }
            }
            let entries = Entries::from_map(&map).map_err(|_| "invalid entry table")?;
            let mut buffer = Vec::new();
            for _ in 0..r.u64()? {
                let (id, label, v) = r.entry(dim)?;
                if let Some(l) = label {
                    labels.insert(id, l);
                }
                buffer.push((id, v));
            }
            let mut trees = Vec::with_capacity(config.num_trees);
            for _ in 0..config.num_trees {
                let count = r.u32()? as usize;
                let mut nodes = Vec::with_capacity(count.min(1 << 20));
                for _ in 0..count {
                    match r.u8()? {
                        0 => {
                            let len = r.u32()? as usize;
                            let mut ids = Vec::with_capacity(len.min(1 << 20));
                            for _ in 0..len {
                                let id = PhraseId(r.u32()?);
                                if !map.contains_key(&id) {
                                    return Err("leaf references unknown id");
                                }
                                ids.push(id);
                            }
                            nodes.push(Node::Leaf(ids));
                        }
                        1 => {
                            let direction = (0..dim).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
                            let offset = r.f64()?;
                            let (left, right) = (r.u32()?, r.u32()?);
                            if left as usize >= count || right as usize >= count {
                                return Err("child index out of range");
                            }
                            nodes.push(Node::Split {
                                direction,
                                offset,
                                left,
                                right,
                            });
                        }
                        _ => return Err("bad node tag"),
                    }
                }
                if nodes.is_empty() {
                    return Err("empty tree");
                }
                trees.push(RpTree { nodes });
            }
            if r.pos != r.buf.len() {
                return Err("trailing bytes");
            }
            let position = entries
                .ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, i))
                .collect();
            Ok(AnnIndex {
                config,
                seed,
                entries,
                position,
                trees,
                buffer,
                labels,
            })
        };
        read(&mut r).map_err(corrupt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str().is_empty() {
            return Err(Error::InvalidInput("empty index path".into()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// Exact top-`n` by dot product with the crate-wide tie-break.
pub fn brute_force_query(
    entries: &BTreeMap<PhraseId, Vec<f64>>,
    query: &[f64],
    n: usize,
) -> Result<Vec<ScoredNeighbor>> {
    if entries.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let items: Vec<(&PhraseId, &Vec<f64>)> = entries.iter().collect();
    let mut scored = exec::try_map(&items, |_, (id, v)| {
        if v.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                got: query.len(),
            });
        }
        Ok(ScoredNeighbor {
            phrase_id: **id,
            score: dot(query, v),
        })
    })?;
    scored.sort_by(rank_order);
    scored.truncate(n);
    Ok(scored)
}

/// Fraction of the exact top-`n` ids that `approx` recovered.
pub fn recall(approx: &[ScoredNeighbor], exact: &[ScoredNeighbor]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let got: HashSet<PhraseId> = approx.iter().map(|s| s.phrase_id).collect();
    exact.iter().filter(|s| got.contains(&s.phrase_id)).count() as f64 / exact.len() as f64
}

fn tree_seed(seed: u64, tree: usize) -> u64 {
    seed ^ (tree as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn entry(&mut self, id: PhraseId, label: Option<&str>, v: &[f64]) {
        self.u32(id.0);
        let label = label.unwrap_or("");
        self.u32(label.len() as u32);
        self.bytes(label.as_bytes());
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type ReadResult<T> = std::result::Result<T, &'static str>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> ReadResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err("unexpected end of file");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> ReadResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> ReadResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> ReadResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> ReadResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn entry(&mut self, dim: usize) -> ReadResult<(PhraseId, Option<String>, Vec<f64>)> {
        let id = PhraseId(self.u32()?);
        let len = self.u32()? as usize;
        let label = std::str::from_utf8(self.take(len)?).map_err(|_| "label is not UTF-8")?;
        let v = (0..dim).map(|_| self.f64()).collect::<ReadResult<Vec<_>>>()?;
        Ok((id, (!label.is_empty()).then(|| label.to_owned()), v))
    }
}
