//! End-to-end acceptance checks.
//!
//! Each test prints one `criterion N: PASS|FAIL ...` line with the measured
//! quantities before asserting.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use annp::ann::{brute_force_query, recall, AnnConfig, AnnIndex};
use annp::context_encoder::tokenize;
use annp::corpus::{CorpusConfig, SyntheticCorpus};
use annp::inventory::{PhraseId, PhraseInventory};
use annp::metrics::char_distance;
use annp::model::{transcript_labels, AudioFeatures, MaskMode, MaskSetting, ModelConfig, ModelParams};
use annp::rnnt::{log_softmax_rows, Lattice};
use annp::sampler::{build_context_list, Provenance, QueryContext, SamplerConfig};
use annp::tensor::Matrix;
use annp::trainer::{
    encode_inventory, evaluate, fine_tune, sweep, sweep_table, EvalReport, RunConfig, SweepGrid, TrainOutcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn report(criterion: usize, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        audio_layers: 1,
        label_layers: 1,
        context_layers: 1,
        joint_dim: 8,
        max_phrase_len: 48,
    }
}

fn tiny_corpus() -> CorpusConfig {
    CorpusConfig {
        families: 4,
        family_size: 2,
        singletons: 2,
        personal_repeats: 1,
        generic_train: 8,
        eval_personal: 6,
        eval_generic: 4,
        ..CorpusConfig::default()
    }
}

fn tiny_run(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        epochs: 2,
        rebuild_period_epochs: 1,
        batch_size: 4,
        model: tiny_model(),
        corpus: tiny_corpus(),
        ..RunConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 1. Transducer loss against brute-force alignment enumeration.

/// Log-probability of every monotonic alignment, summed by explicit enumeration.
fn brute_force_loss(log_probs: &Matrix, frames: usize, labels: &[usize], blank: usize) -> f64 {
    let u_len = labels.len();
    // An alignment interleaves frames-1 non-final blanks with the labels, then ends with a blank.
    let moves = frames - 1 + u_len;
    let mut total = f64::NEG_INFINITY;
    for mask in 0u64..(1u64 << moves) {
        if mask.count_ones() as usize != u_len {
            continue;
        }
        let (mut t, mut u, mut lp) = (0usize, 0usize, 0.0);
        for step in 0..moves {
            let row = t * (u_len + 1) + u;
            if mask >> step & 1 == 1 {
                lp += log_probs.get(row, labels[u]);
                u += 1;
            } else {
                lp += log_probs.get(row, blank);
                t += 1;
            }
        }
        lp += log_probs.get(t * (u_len + 1) + u, blank);
        let hi = total.max(lp);
        total = if hi == f64::NEG_INFINITY {
            hi
        } else {
            hi + ((total - hi).exp() + (lp - hi).exp()).ln()
        };
    }
    -total
}

#[test]
fn criterion_01_transducer_loss_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let frames = rng.random_range(1..=4);
        let u_len = rng.random_range(0..=3);
        let vocab = rng.random_range(2..=6);
        let labels: Vec<usize> = (0..u_len).map(|_| rng.random_range(1..vocab)).collect();
        let logits = Matrix::from_fn(frames * (u_len + 1), vocab, |_, _| 3.0 * normal(&mut rng));
        let lattice = Lattice::new(&logits, frames, &labels, 0).expect("valid lattice");
        let oracle = brute_force_loss(&log_softmax_rows(&logits), frames, &labels, 0);
        worst = worst.max((lattice.loss() - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst <= 1e-6 && secs < 60.0,
        &format!("500 instances, max |lattice - enumeration| = {worst:.3e}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradient check on the whole model.

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let config = ModelConfig {
        feature_dim: 6,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        audio_layers: 2,
        label_layers: 2,
        context_layers: 2,
        joint_dim: 8,
        max_phrase_len: 16,
    };
    let mut params = ModelParams::new(config, 5).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Zero-initialised projections are randomised so every path carries gradient.
    let ids: Vec<_> = params.store.ids().collect();
    for &id in &ids {
        let m = params.store.get_mut(id);
        if m.data().iter().all(|&v| v == 0.0) {
            for v in m.data_mut() {
                *v = 0.3 * normal(&mut rng);
            }
        }
    }
    let features = AudioFeatures(Matrix::from_fn(7, 6, |_, _| normal(&mut rng)));
    let labels = transcript_labels("ab ca").expect("labels");
    let context = vec![
        Some(tokenize("jean").expect("tokens")),
        Some(tokenize("joan").expect("tokens")),
        None,
    ];
    let mode = MaskMode::Streaming { chunk_frames: 3 };
    let (_, grads) = params.transducer_loss(&features, &labels, &context, mode).expect("loss");

    let sizes: Vec<usize> = ids.iter().map(|&id| params.store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-4;
    let (mut ok, mut probes) = (0usize, 0usize);
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let original = params.store.get(id).data()[flat];
        params.store.get_mut(id).data_mut()[flat] = original + h;
        let plus = params.loss_value(&features, &labels, &context, mode).expect("loss");
        params.store.get_mut(id).data_mut()[flat] = original - h;
        let minus = params.loss_value(&features, &labels, &context, mode).expect("loss");
        params.store.get_mut(id).data_mut()[flat] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).data()[flat];
        let scale = numeric.abs().max(analytic.abs());
        probes += 1;
        if (numeric - analytic).abs() <= 1e-3 * scale || scale < 1e-8 {
            ok += 1;
        } else if failures.len() < 3 {
            failures.push(format!("{}[{flat}]: {analytic:.6e} vs {numeric:.6e}", params.store.name(id)));
        }
    }
    let frac = ok as f64 / probes as f64;
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        frac >= 0.99 && secs < 300.0,
        &format!("{ok}/{probes} coordinates within 1e-3 relative, {secs:.1}s {failures:?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. ANN recall and small-index exactness.

#[test]
fn criterion_03_ann_recall() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let entries: BTreeMap<PhraseId, Vec<f64>> = (0..10_000u32)
        .map(|i| (PhraseId(i), (0..64).map(|_| normal(&mut rng)).collect()))
        .collect();
    let cfg = AnnConfig {
        num_trees: 32,
        leaf_capacity: 16,
        ..AnnConfig::default()
    };
    let index = AnnIndex::build(&entries, &cfg, 3).expect("index");
    let mut total = 0.0;
    for _ in 0..100 {
        let q: Vec<f64> = (0..64).map(|_| normal(&mut rng)).collect();
        let approx = index.query(&q, 20).expect("query");
        let exact = brute_force_query(&entries, &q, 20).expect("exact");
        total += recall(&approx, &exact);
    }
    let mean_recall = total / 100.0;

    let mut exact_small = true;
    for size in [1usize, 5, 16] {
        let small: BTreeMap<PhraseId, Vec<f64>> = entries.iter().take(size).map(|(k, v)| (*k, v.clone())).collect();
        let idx = AnnIndex::build(&small, &cfg, 9).expect("index");
        for n in 1..=size + 2 {
            let q: Vec<f64> = (0..64).map(|_| normal(&mut rng)).collect();
            let a = idx.query(&q, n).expect("query");
            let b = brute_force_query(&small, &q, n).expect("exact");
            exact_small &= a == b;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        mean_recall >= 0.90 && exact_small && secs < 60.0,
        &format!("mean recall@20 = {mean_recall:.4}, small-index exact = {exact_small}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 4. Sampler gate law.

/// Smallest interval `[lo, hi]` of counts holding at least 99% binomial mass, split evenly between tails.
fn binomial_interval(trials: usize, p: f64) -> (usize, usize) {
    let mut log_pmf = vec![0.0; trials + 1];
    log_pmf[0] = trials as f64 * (1.0 - p).ln();
    for k in 1..=trials {
        log_pmf[k] = log_pmf[k - 1] + ((trials - k + 1) as f64).ln() - (k as f64).ln() + p.ln() - (1.0 - p).ln();
    }
    let pmf: Vec<f64> = log_pmf.iter().map(|v| v.exp()).collect();
    let (mut lo, mut acc) = (0usize, 0.0);
    while acc + pmf[lo] <= 0.005 {
        acc += pmf[lo];
        lo += 1;
    }
    let (mut hi, mut acc) = (trials, 0.0);
    while acc + pmf[hi] <= 0.005 {
        acc += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}

#[test]
fn criterion_04_sampler_gate_law() {
    let corpus = SyntheticCorpus::generate(&CorpusConfig::default(), 4).expect("corpus");
    let inventory = corpus.inventory().expect("inventory");
    let params = ModelParams::new(tiny_model(), 4).expect("model");
    let index = AnnIndex::build(&encode_inventory(&params, &inventory).expect("encode"), &AnnConfig::default(), 4)
        .expect("index");
    let cfg = SamplerConfig::default();
    let personal: Vec<QueryContext> = corpus
        .train
        .iter()
        .filter(|u| !u.references.is_empty())
        .map(|u| QueryContext {
            transcript: u.transcript.clone(),
            reference_phrases: u.references.iter().filter_map(|r| inventory.lookup(r).cloned()).collect(),
        })
        .collect();
    let trials = 10_000;
    let mut with_ann = 0usize;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let query = personal[i % personal.len()].clone();
        let list = build_context_list(&[query], &inventory, Some(&index), &cfg, &mut rng).expect("list");
        with_ann += usize::from(list.count(Provenance::Ann) > 0);
    }
    let (lo, hi) = binomial_interval(trials, cfg.append_ratio);
    let freq = with_ann as f64 / trials as f64;
    report(
        4,
        (lo..=hi).contains(&with_ann),
        &format!("ann frequency {freq:.4} ({with_ann}/{trials}), 99% interval [{lo}, {hi}]"),
    );
}

// ---------------------------------------------------------------------------
// 5. append_ratio = 0 is bit-identical to a disabled miner.

#[test]
fn criterion_05_ablation_bit_equivalence() {
    let base = tiny_run(5);
    let corpus = base.generate_corpus().expect("corpus");
    let inventory = corpus.inventory().expect("inventory");
    let zero = RunConfig {
        sampler: SamplerConfig {
            append_ratio: 0.0,
            ..base.sampler.clone()
        },
        ..base.clone()
    };
    let off = RunConfig {
        miner_enabled: false,
        ..base.clone()
    };
    let a = fine_tune(&zero, &corpus, &inventory).expect("train");
    let b = fine_tune(&off, &corpus, &inventory).expect("train");
    let bits = |o: &TrainOutcome| o.log.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    let identical = bits(&a) == bits(&b) && a.log.to_tsv() == b.log.to_tsv();
    report(
        5,
        identical && !a.log.steps.is_empty(),
        &format!("{} logged steps, identical = {identical}", a.log.steps.len()),
    );
}

// ---------------------------------------------------------------------------
// 9. Streaming causality.

#[test]
fn criterion_09_streaming_causality() {
    let params = ModelParams::new(
        ModelConfig {
            feature_dim: 5,
            ..tiny_model()
        },
        9,
    )
    .expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut violations = 0;
    for _ in 0..100 {
        let chunk = rng.random_range(1..=5);
        let frames = rng.random_range(chunk + 1..=24);
        let mode = MaskMode::Streaming { chunk_frames: chunk };
        let base = AudioFeatures(Matrix::from_fn(frames, 5, |_, _| normal(&mut rng)));
        let boundary = chunk * rng.random_range(1..=(frames - 1) / chunk);
        let later = rng.random_range(boundary..frames);
        let mut perturbed = base.clone();
        for c in 0..5 {
            let v = perturbed.0.get(later, c) + normal(&mut rng) + 1.0;
            perturbed.0.set(later, c, v);
        }
        let a = params.audio_encode(&base, mode).expect("encode");
        let b = params.audio_encode(&perturbed, mode).expect("encode");
        let unchanged = (0..boundary).all(|r| a.row(r) == b.row(r));
        let changed = a.row(later) != b.row(later);
        if !unchanged || !changed {
            violations += 1;
        }
    }
    report(9, violations == 0, &format!("{violations} violations in 100 perturbations"));
}

// ---------------------------------------------------------------------------
// 10. Sweep harness covers the default grid.

#[test]
fn criterion_10_sweep_grid() {
    let cfg = RunConfig {
        epochs: 1,
        ..tiny_run(10)
    };
    let corpus = cfg.generate_corpus().expect("corpus");
    let inventory = corpus.inventory().expect("inventory");
    let grid = SweepGrid::default();
    let cells = sweep(&cfg, &corpus, &inventory, &grid);
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    let table = sweep_table(&cells);
    let mut covered = true;
    for k in [1usize, 2, 4] {
        for n in [10usize, 20, 40] {
            for r in [0.25, 0.5, 1.0] {
                covered &= cells.iter().any(|c| c.k == k && c.n == n && c.append_ratio == r);
            }
        }
    }
    report(
        10,
        cells.len() == 27 && covered && failed == 0 && table.lines().count() == 28,
        &format!("{} cells, {failed} failed, {} table rows", cells.len(), table.lines().count() - 1),
    );
}

// ---------------------------------------------------------------------------
// Shared trained models for criteria 6, 7 and 8.

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn trained_run(seed: u64, miner: bool) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        epochs: 40,
        rebuild_period_epochs: 5,
        batch_size: 1,
        mask_mode: MaskSetting::Variable,
        miner_enabled: miner,
        model: ModelConfig {
            dim: 32,
            heads: 1,
            ffn_dim: 64,
            audio_layers: 1,
            label_layers: 1,
            context_layers: 1,
            joint_dim: 32,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.sampler.append_ratio = 0.5;
    cfg.sampler.phrases_per_query = 2;
    cfg.optimizer.decay_steps = 20_000;
    cfg
}

struct Shared {
    corpus: SyntheticCorpus,
    inventory: PhraseInventory,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = trained_run(0, true).generate_corpus().expect("corpus");
        let inventory = corpus.inventory().expect("inventory");
        Shared { corpus, inventory }
    })
}

/// Model trained with the given seed, with (`miner`) or without ANN-P negatives.
fn trained(seed: u64, miner: bool) -> &'static TrainOutcome {
    static CELLS: [[OnceLock<TrainOutcome>; 2]; 5] = [const { [const { OnceLock::new() }; 2] }; 5];
    let slot = SEEDS.iter().position(|&s| s == seed).expect("known seed");
    CELLS[slot][usize::from(miner)].get_or_init(|| {
        let s = shared();
        let start = Instant::now();
        let out = fine_tune(&trained_run(seed, miner), &s.corpus, &s.inventory).expect("train");
        println!(
            "trained seed {seed} miner {miner}: {} steps in {:.0}s",
            out.log.steps.len(),
            start.elapsed().as_secs_f64()
        );
        out
    })
}

fn eval_report(outcome: &TrainOutcome, mode: MaskMode, context_on: bool) -> EvalReport {
    let s = shared();
    let cfg = trained_run(0, true);
    evaluate(&outcome.params, &s.corpus, &s.inventory, mode, context_on, &cfg.eval).expect("evaluate")
}

fn streaming() -> MaskMode {
    MaskMode::Streaming {
        chunk_frames: RunConfig::default().chunk_frames,
    }
}

// ---------------------------------------------------------------------------
// 6. Context lists reduce personal-subset WER.

#[test]
fn criterion_06_biasing_effectiveness() {
    let start = Instant::now();
    let model = trained(0, true);
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, mode) in [("global", MaskMode::Global), ("streaming", streaming())] {
        let on = eval_report(model, mode, true).personal.wer;
        let off = eval_report(model, mode, false).personal.wer;
        pass &= on < 0.5 * off;
        detail.push(format!("{name}: on {on:.4} off {off:.4} ratio {:.3}", on / off.max(f64::MIN_POSITIVE)));
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    pass &= minutes <= 30.0;
    report(6, pass, &format!("{} ({minutes:.1} min)", detail.join("; ")));
}

// ---------------------------------------------------------------------------
// 7. ANN-P against random negatives under streaming masks.

#[test]
fn criterion_07_ann_negatives_help_streaming() {
    let mut ann = Vec::new();
    let mut random = Vec::new();
    let mut paired_wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let a = eval_report(trained(seed, true), streaming(), true);
        let r = eval_report(trained(seed, false), streaming(), true);
        if a.confusable.wer < r.confusable.wer {
            paired_wins += 1;
        }
        rows.push(format!(
            "seed {seed}: personal {:.4}/{:.4} confusable {:.4}/{:.4}",
            a.personal.wer, r.personal.wer, a.confusable.wer, r.confusable.wer
        ));
        ann.push(a.personal.wer);
        random.push(r.personal.wer);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mr) = (mean(&ann), mean(&random));
    let relative = if mr > 0.0 { (mr - ma) / mr } else { 0.0 };
    for row in &rows {
        println!("  {row}");
    }
    report(
        7,
        ma <= mr && 2 * paired_wins > SEEDS.len(),
        &format!(
            "mean personal WER ann-p {ma:.4} random {mr:.4} relative reduction {:.1}%, confusable wins {paired_wins}/{}",
            100.0 * relative,
            SEEDS.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Nearest neighbours of personal names are confusable family members.

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        table[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = table[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = sub.min(table[i - 1][j] + 1).min(table[i][j - 1] + 1);
        }
    }
    table[a.len()][b.len()]
}

#[test]
fn criterion_08_neighbours_are_confusable() {
    let s = shared();
    let model = trained(0, true);
    let embeddings = encode_inventory(&model.params, &s.inventory).expect("encode");
    let index = AnnIndex::build(&embeddings, &AnnConfig::default(), 8).expect("index");
    let (mut hits, mut total, mut oracle_disagreements) = (0usize, 0usize, 0usize);
    let mut examples = BTreeMap::new();
    for utt in s.corpus.eval.iter().filter(|u| !u.references.is_empty()) {
        for word in &utt.references {
            let id = s.inventory.lookup(word).expect("reference in inventory").id;
            let neighbours = index.query(&embeddings[&id], 2).expect("query");
            let Some(top) = neighbours.iter().find(|n| n.phrase_id != id) else {
                continue;
            };
            let label = s.inventory.get(top.phrase_id).expect("known id").text.clone();
            let distance = levenshtein(word, &label);
            if (distance <= 2) != (char_distance(word, &label) <= 2) {
                oracle_disagreements += 1;
            }
            let family = s.corpus.family_of(word).unwrap_or_default();
            total += 1;
            if distance <= 2 && family.contains(&label) {
                hits += 1;
            }
            examples.entry(word.clone()).or_insert(label);
        }
    }
    for (q, n) in examples.iter().take(5) {
        println!("  {q} -> {n}");
    }
    let fraction = hits as f64 / total.max(1) as f64;
    report(
        8,
        total > 0 && fraction >= 0.8 && oracle_disagreements == 0,
        &format!("{hits}/{total} query words ({fraction:.3}) have a family top-1 neighbour"),
    );
}
