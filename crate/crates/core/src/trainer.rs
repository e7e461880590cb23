//! Fine-tuning with mined hard negatives, evaluation and parameter sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnConfig, AnnIndex};
use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::context_encoder::tokenize;
use crate::corpus::{sound_key, CorpusConfig, Subset, SyntheticCorpus, Utterance};
use crate::error::{Error, Result};
use crate::exec;
use crate::inventory::{PhraseId, PhraseInventory};
use crate::metrics::word_errors;
use crate::model::{transcript_labels, ContextItem, MaskMode, MaskSetting, ModelConfig, ModelParams};
use crate::sampler::{build_context_list, sampling_stats, ContextList, QueryContext, SamplerConfig, SamplingStats};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Linear ramp from zero over this many steps.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// The learning rate is multiplied by `decay_rate` every `decay_steps` steps, continuously.
    pub decay_rate: f64,
    pub decay_steps: usize,
    /// Global gradient-norm clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            decay_rate: 0.5,
            decay_steps: 1000,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let ramp = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        ramp * self.learning_rate * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Phrases per evaluation context list, back-off excluded.
    pub list_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { list_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter initialisation, batching and sampling.
    pub seed: u64,
    /// Seeds the synthetic corpus.
    pub corpus_seed: u64,
    pub epochs: usize,
    pub rebuild_period_epochs: usize,
    pub batch_size: usize,
    pub mask_mode: MaskSetting,
    pub chunk_frames: usize,
    /// When false no index is ever built and every negative is random.
    pub miner_enabled: bool,
    /// Probability that a batch is trained with the back-off entry as its only context.
    pub backoff_only_prob: f64,
    /// Redraw the rendering noise of every training utterance after the first epoch.
    pub fresh_noise: bool,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub ann: AnnConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_seed: 0,
            epochs: 6,
            rebuild_period_epochs: 2,
            batch_size: 8,
            mask_mode: MaskSetting::Variable,
            chunk_frames: 6,
            miner_enabled: true,
            backoff_only_prob: 0.1,
            fresh_noise: true,
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            ann: AnnConfig::default(),
            eval: EvalConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.rebuild_period_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, rebuild_period_epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.backoff_only_prob) {
            return Err(Error::Config("backoff_only_prob must lie in [0, 1]".into()));
        }
        if self.chunk_frames == 0 {
            return Err(Error::Config("chunk_frames must be at least 1".into()));
        }
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "model.feature_dim {} differs from corpus.feature_dim {}",
                self.model.feature_dim, self.corpus.feature_dim
            )));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.decay_rate > 0.0 && o.decay_steps > 0 && o.clip_norm >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.sampler.validate()?;
        self.model.validate()?;
        self.ann.validate()?;
        self.corpus.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration always serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn generate_corpus(&self) -> Result<SyntheticCorpus> {
        SyntheticCorpus::generate(&self.corpus, self.corpus_seed)
    }

    /// Number of index rebuilds after the initial build.
    pub fn scheduled_rebuilds(&self) -> usize {
        if !self.miner_enabled {
            return 0;
        }
        (1..=self.epochs).filter(|&e| self.rebuild_after(e)).count()
    }

    fn rebuild_after(&self, epoch: usize) -> bool {
        epoch % self.rebuild_period_epochs == 0 || epoch == self.epochs
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Clips, then applies one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads.global_norm();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.cfg.learning_rate_at(self.step);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.epsilon);
            }
        }
        norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ann_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub sampling: SamplingStats,
    pub rebuilt_after: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub initial_builds: usize,
    pub rebuilds: usize,
}

impl TrainingLog {
    /// Line-delimited `step<TAB>loss<TAB>ann_fraction` records with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\tann_fraction\n");
        for r in &self.steps {
            let _ = writeln!(out, "{}\t{}\t{}", r.step, r.loss, r.ann_fraction);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    /// Index over the final embeddings when the miner was enabled.
    pub index: Option<AnnIndex>,
}

/// Embeds every inventory phrase with the current context encoder.
pub fn encode_inventory(params: &ModelParams, inventory: &PhraseInventory) -> Result<BTreeMap<PhraseId, Vec<f64>>> {
    let ids = inventory.ids();
    let texts: Vec<&str> = ids
        .iter()
        .map(|&id| inventory.get(id).map(|p| p.text.as_str()).unwrap_or(""))
        .collect();
    let vectors = params.encoder().encode_texts(&texts)?;
    Ok(ids.into_iter().zip(vectors.into_iter().map(|v| v.0)).collect())
}

/// Builds a labelled index over the inventory under the current parameters.
pub fn build_index(
    params: &ModelParams,
    inventory: &PhraseInventory,
    cfg: &AnnConfig,
    seed: u64,
) -> Result<AnnIndex> {
    let vectors = encode_inventory(params, inventory)?;
    let labels = inventory.iter().map(|p| (p.id, p.text.clone())).collect();
    Ok(AnnIndex::build(&vectors, cfg, seed)?.with_labels(labels))
}

fn context_items(list: &ContextList, inventory: &PhraseInventory) -> Result<Vec<ContextItem>> {
    list.entries
        .iter()
        .map(|e| match e.phrase {
            Some(id) => {
                let phrase = inventory
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("phrase {id} missing from inventory")))?;
                Ok(Some(tokenize(&phrase.text)?))
            }
            None => Ok(None),
        })
        .collect()
}

/// Mean transducer loss over a batch sharing one context list, with gradients.
///
/// The context matrix is computed once; every utterance backpropagates into
/// it as a tape input and the summed adjoint is pushed through the context
/// encoder afterwards. Per-utterance results are reduced in batch order.
pub fn batch_gradients(
    params: &ModelParams,
    context: &[ContextItem],
    batch: &[&Utterance],
    mode: MaskMode,
) -> Result<(f64, Gradients)> {
    let mut ctx_tape = Tape::new(&params.store);
    let ctx = params.context_matrix(&mut ctx_tape, context)?;
    let ctx_value = ctx_tape.value(ctx).clone();

    let parts = exec::try_map(batch, |_, utt| {
        let labels = transcript_labels(&utt.transcript)?;
        let mut tape = Tape::new(&params.store);
        let c = tape.input(ctx_value.clone());
        let loss = params.loss_node(&mut tape, &utt.features, &labels, c, mode)?;
        let value = tape.value(loss).get(0, 0);
        let mut back = tape.backward(loss);
        Ok::<_, Error>((value, back.params, back.inputs.swap_remove(0)))
    })?;

    let mut grads = Gradients::zeros_like(&params.store);
    let mut d_ctx = Matrix::zeros(ctx_value.rows(), ctx_value.cols());
    let mut total = 0.0;
    for (loss, g, dc) in &parts {
        total += loss;
        grads.add_assign(g);
        d_ctx.add_assign(dc);
    }
    grads.add_assign(&ctx_tape.backward_from(&[(ctx, d_ctx)]).params);
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

fn query_context(utt: &Utterance, inventory: &PhraseInventory) -> QueryContext {
    QueryContext {
        transcript: utt.transcript.clone(),
        reference_phrases: utt
            .references
            .iter()
            .filter_map(|r| inventory.lookup(r).cloned())
            .collect(),
    }
}

fn index_seed(seed: u64, build: usize) -> u64 {
    seed ^ 0xA5A5_5A5A_0F0F_F0F0u64.wrapping_mul(build as u64 + 1)
}

fn noise_seed(seed: u64, epoch: usize, utterance: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (utterance as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Trains a fresh model on the corpus training split.
pub fn fine_tune(cfg: &RunConfig, corpus: &SyntheticCorpus, inventory: &PhraseInventory) -> Result<TrainOutcome> {
    cfg.validate()?;
    for utt in &corpus.train {
        for r in &utt.references {
            if inventory.lookup(r).is_none() {
                return Err(Error::InvalidInput(format!("reference phrase {r:?} missing from inventory")));
            }
        }
    }
    let mut params = ModelParams::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.optimizer.clone(), &params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let mut index = None;
    let mut builds = 0usize;
    if cfg.miner_enabled {
        index = Some(build_index(&params, inventory, &cfg.ann, index_seed(cfg.seed, builds))?);
        builds += 1;
        log.initial_builds = 1;
    }

    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut lists = Vec::new();
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let renders: Vec<Utterance> = if cfg.fresh_noise && epoch > 1 {
                chunk
                    .iter()
                    .map(|&i| {
                        let mut utt = corpus.train[i].clone();
                        let mut noise = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed, epoch, i));
                        utt.features = corpus.renderer.render(&utt.transcript, &mut noise)?;
                        Ok(utt)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&Utterance> = if renders.is_empty() {
                chunk.iter().map(|&i| &corpus.train[i]).collect()
            } else {
                renders.iter().collect()
            };
            let queries: Vec<QueryContext> = batch.iter().map(|u| query_context(u, inventory)).collect();
            let list = if rng.random_bool(cfg.backoff_only_prob) {
                ContextList::backoff_only()
            } else {
                build_context_list(&queries, inventory, index.as_ref(), &cfg.sampler, &mut rng)?
            };
            let mode = match cfg.mask_mode {
                MaskSetting::Global => MaskMode::Global,
                MaskSetting::Streaming => MaskMode::Streaming {
                    chunk_frames: cfg.chunk_frames,
                },
                MaskSetting::Variable => {
                    if rng.random_bool(0.5) {
                        MaskMode::Global
                    } else {
                        MaskMode::Streaming {
                            chunk_frames: cfg.chunk_frames,
                        }
                    }
                }
            };
            let items = context_items(&list, inventory)?;
            let (loss, grads) = batch_gradients(&params, &items, &batch, mode)?;
            let step = adam.steps();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            adam.update(&mut params.store, &grads);
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                ann_fraction: sampling_stats(std::slice::from_ref(&list)).ann_frequency,
            });
            epoch_loss += loss;
            batches += 1;
            lists.push(list);
        }
        let rebuilt = cfg.miner_enabled && cfg.rebuild_after(epoch);
        if rebuilt {
            let fresh = encode_inventory(&params, inventory)?;
            let old = index.as_ref().expect("miner enabled implies an index");
            index = Some(old.rebuild(&fresh, index_seed(cfg.seed, builds))?);
            builds += 1;
            log.rebuilds += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches.max(1) as f64,
            sampling: sampling_stats(&lists),
            rebuilt_after: rebuilt,
        });
    }
    Ok(TrainOutcome { params, log, index })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SubsetScore {
    pub utterances: usize,
    pub words: usize,
    pub errors: usize,
    pub wer: f64,
}

impl SubsetScore {
    fn add(&mut self, errors: usize, words: usize) {
        self.utterances += 1;
        self.words += words;
        self.errors += errors;
        self.wer = if self.words == 0 {
            0.0
        } else {
            self.errors as f64 / self.words as f64
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mask_mode: MaskMode,
    pub context_on: bool,
    pub generic: SubsetScore,
    pub personal: SubsetScore,
    /// Personal utterances whose reference has sound-distinct family members.
    pub confusable: SubsetScore,
    /// Utterance-weighted mean of the generic and personal WERs.
    pub avg: f64,
    /// Share of personal utterances where the reference gets the most audio-side attention among phrases.
    pub reference_argmax: Option<f64>,
    /// Share of generic utterances where the back-off entry gets the most audio-side attention.
    pub backoff_argmax: Option<f64>,
    pub hypotheses: Vec<String>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("subset\tcontext\tmask\tutterances\twords\terrors\twer\n");
        let ctx = if self.context_on { "on" } else { "off" };
        for (name, s) in [
            ("generic", &self.generic),
            ("personal", &self.personal),
            ("confusable", &self.confusable),
        ] {
            let _ = writeln!(
                out,
                "{name}\t{ctx}\t{}\t{}\t{}\t{}\t{:.6}",
                self.mask_mode, s.utterances, s.words, s.errors, s.wer
            );
        }
        let _ = writeln!(
            out,
            "avg\t{ctx}\t{}\t{}\t{}\t{}\t{:.6}",
            self.mask_mode,
            self.generic.utterances + self.personal.utterances,
            self.generic.words + self.personal.words,
            self.generic.errors + self.personal.errors,
            self.avg
        );
        out
    }
}

/// Evaluation context list for one utterance: phrase texts, back-off last.
pub fn eval_context(
    utt: &Utterance,
    corpus: &SyntheticCorpus,
    inventory: &PhraseInventory,
    list_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut chosen: Vec<String> = Vec::new();
    let mut homophones: HashSet<String> = HashSet::new();
    for r in &utt.references {
        if inventory.lookup(r).is_some() && !chosen.contains(r) {
            chosen.push(r.clone());
        }
        homophones.insert(sound_key(r));
    }
    for r in &utt.references {
        for d in corpus.distractors(r) {
            if chosen.len() < list_size && inventory.lookup(&d).is_some() && !chosen.contains(&d) {
                chosen.push(d);
            }
        }
    }
    let pool: Vec<&str> = inventory
        .iter()
        .map(|p| p.text.as_str())
        .filter(|t| !chosen.iter().any(|c| c == t) && !homophones.contains(&sound_key(t)))
        .collect();
    let need = list_size.saturating_sub(chosen.len()).min(pool.len());
    for i in rand::seq::index::sample(rng, pool.len(), need) {
        chosen.push(pool[i].to_string());
    }
    chosen
}

struct UttResult {
    hypothesis: String,
    errors: usize,
    words: usize,
    reference_top: Option<bool>,
    backoff_top: Option<bool>,
}

/// Word error rates on the evaluation split, with or without context lists.
pub fn evaluate(
    params: &ModelParams,
    corpus: &SyntheticCorpus,
    inventory: &PhraseInventory,
    mode: MaskMode,
    context_on: bool,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    mode.validate()?;
    let backoff_ctx = params.context_values(&[None])?;
    let results = exec::try_map(&corpus.eval, |i, utt| {
        let (hypothesis, reference_top, backoff_top) = if context_on {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            let texts = eval_context(utt, corpus, inventory, cfg.list_size, &mut rng);
            let mut items = texts.iter().map(|t| tokenize(t).map(Some)).collect::<Result<Vec<_>>>()?;
            items.push(None);
            let ctx = params.context_values(&items)?;
            let hyp = params.transcribe(&utt.features, &ctx, mode)?;
            let mass = params.attention_diagnostics(&utt.features, &ctx, mode)?;
            let last = mass.len() - 1;
            let argmax = |m: &[f64]| {
                (0..m.len()).fold(0, |best, j| if m[j] > m[best] { j } else { best })
            };
            match utt.subset {
                Subset::Personal if last > 0 => (hyp, Some(argmax(&mass[..last]) == 0), None),
                Subset::Generic => (hyp, None, Some(argmax(&mass) == last)),
                _ => (hyp, None, None),
            }
        } else {
            (params.transcribe(&utt.features, &backoff_ctx, mode)?, None, None)
        };
        let (errors, words) = word_errors(&utt.transcript, &hypothesis);
        Ok::<_, Error>(UttResult {
            hypothesis,
            errors,
            words,
            reference_top,
            backoff_top,
        })
    })?;

    let mut report = EvalReport {
        mask_mode: mode,
        context_on,
        generic: SubsetScore::default(),
        personal: SubsetScore::default(),
        confusable: SubsetScore::default(),
        avg: 0.0,
        reference_argmax: None,
        backoff_argmax: None,
        hypotheses: Vec::with_capacity(results.len()),
    };
    let (mut ref_hits, mut ref_total, mut bo_hits, mut bo_total) = (0usize, 0usize, 0usize, 0usize);
    for (utt, r) in corpus.eval.iter().zip(results) {
        match utt.subset {
            Subset::Generic => report.generic.add(r.errors, r.words),
            Subset::Personal => {
                report.personal.add(r.errors, r.words);
                if utt.references.iter().any(|n| corpus.is_confusable(n)) {
                    report.confusable.add(r.errors, r.words);
                }
            }
        }
        if let Some(hit) = r.reference_top {
            ref_total += 1;
            ref_hits += usize::from(hit);
        }
        if let Some(hit) = r.backoff_top {
            bo_total += 1;
            bo_hits += usize::from(hit);
        }
        report.hypotheses.push(r.hypothesis);
    }
    let n = report.generic.utterances + report.personal.utterances;
    if n > 0 {
        report.avg = (report.generic.wer * report.generic.utterances as f64
            + report.personal.wer * report.personal.utterances as f64)
            / n as f64;
    }
    report.reference_argmax = (ref_total > 0).then(|| ref_hits as f64 / ref_total as f64);
    report.backoff_argmax = (bo_total > 0).then(|| bo_hits as f64 / bo_total as f64);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub append_ratio: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            n: vec![10, 20, 40],
            k: vec![1, 2, 4],
            append_ratio: vec![0.25, 0.5, 1.0],
        }
    }
}

impl SweepGrid {
    /// `(n, k, append_ratio)` triples, `k` outermost.
    pub fn cells(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &k in &self.k {
            for &n in &self.n {
                for &r in &self.append_ratio {
                    out.push((n, k, r));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub final_loss: f64,
    pub context_on: EvalReport,
    pub context_off: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub n: usize,
    pub k: usize,
    pub append_ratio: f64,
    pub outcome: std::result::Result<CellResult, String>,
}

/// One training run and evaluation per grid cell; failed cells are recorded, not raised.
pub fn sweep(
    base: &RunConfig,
    corpus: &SyntheticCorpus,
    inventory: &PhraseInventory,
    grid: &SweepGrid,
) -> Vec<SweepCell> {
    let mode = base.mask_mode.resolve(base.chunk_frames);
    exec::map(&grid.cells(), |&(n, k, append_ratio)| {
        let run = || -> Result<CellResult> {
            let mut cfg = base.clone();
            cfg.sampler.n = n;
            cfg.sampler.k = k;
            cfg.sampler.append_ratio = append_ratio;
            let outcome = fine_tune(&cfg, corpus, inventory)?;
            Ok(CellResult {
                final_loss: outcome.log.final_loss().unwrap_or(f64::NAN),
                context_on: evaluate(&outcome.params, corpus, inventory, mode, true, &cfg.eval)?,
                context_off: evaluate(&outcome.params, corpus, inventory, mode, false, &cfg.eval)?,
            })
        };
        SweepCell {
            n,
            k,
            append_ratio,
            outcome: run().map_err(|e| e.to_string()),
        }
    })
}

/// Tab-separated results with a header row, one line per cell.
pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut out = String::from(
        "n\tk\tappend_ratio\tstatus\tfinal_loss\tpersonal_wer_on\tconfusable_wer_on\tgeneric_wer_on\tavg_wer_on\tpersonal_wer_off\tgeneric_wer_off\tavg_wer_off\n",
    );
    for c in cells {
        match &c.outcome {
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\tok\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    c.n,
                    c.k,
                    c.append_ratio,
                    r.final_loss,
                    r.context_on.personal.wer,
                    r.context_on.confusable.wer,
                    r.context_on.generic.wer,
                    r.context_on.avg,
                    r.context_off.personal.wer,
                    r.context_off.generic.wer,
                    r.context_off.avg
                );
            }
            Err(e) => {
                let msg = e.replace(['\t', '\n'], " ");
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\terror: {msg}\tnan\tnan\tnan\tnan\tnan\tnan\tnan\tnan",
                    c.n, c.k, c.append_ratio
                );
            }
        }
    }
    out
}

/// Whitespace-separated blocks, one per `k`, ready for line plots of WER against `n`.
pub fn sweep_plot_data(cells: &[SweepCell]) -> String {
    let mut out = String::from("# k n append_ratio personal_wer_on confusable_wer_on\n");
    let mut ks: Vec<usize> = cells.iter().map(|c| c.k).collect();
    ks.dedup();
    for k in ks {
        let _ = writeln!(out, "\n# k={k}");
        for c in cells.iter().filter(|c| c.k == k) {
            let (p, q) = match &c.outcome {
                Ok(r) => (r.context_on.personal.wer, r.context_on.confusable.wer),
                Err(_) => (f64::NAN, f64::NAN),
            };
            let _ = writeln!(out, "{} {} {} {:.6} {:.6}", k, c.n, c.append_ratio, p, q);
        }
    }
    out
}
