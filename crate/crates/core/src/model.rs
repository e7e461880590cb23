//! Miniature context-aware transformer transducer.
//!
//! Audio frames and label prefixes are encoded by small self-attention
//! stacks. Both streams are then biased by multi-head cross-attention over
//! the context list: one embedding per phrase from the context encoder plus a
//! learned back-off vector. The biased streams meet in an additive joint
//! network that scores characters and blank on the full `T × (U+1)` grid.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Mask, ParamId, ParamStore, Tape, Var};
use crate::context_encoder::{
    tokenize, ContextEncoder, EncoderConfig, EncoderRef, TokenSequence, BLANK, VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, sinusoid_positions, Attention, EncoderStack, LayerNorm, Linear};
use crate::tensor::Matrix;

/// Longest run of emissions allowed on one frame during greedy decoding.
pub const MAX_SYMBOLS_PER_FRAME: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum MaskMode {
    Global,
    Streaming { chunk_frames: usize },
}

impl MaskMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskMode::Streaming { chunk_frames: 0 } => {
                Err(Error::Config("chunk_frames must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Self-attention pattern over `frames` positions; `None` means unrestricted.
    pub fn mask(&self, frames: usize) -> Option<Arc<Mask>> {
        match *self {
            MaskMode::Global => None,
            MaskMode::Streaming { chunk_frames } => Some(Arc::new(Mask::from_fn(
                frames,
                frames,
                |r, c| c / chunk_frames <= r / chunk_frames,
            ))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskMode::Global => write!(f, "global"),
            MaskMode::Streaming { chunk_frames } => write!(f, "streaming:{chunk_frames}"),
        }
    }
}

/// Masking regime for a whole run; `Variable` draws global or streaming per batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSetting {
    Global,
    Streaming,
    #[default]
    Variable,
}

impl MaskSetting {
    /// Concrete mask for evaluation; `Variable` evaluates as streaming.
    pub fn resolve(self, chunk_frames: usize) -> MaskMode {
        match self {
            MaskSetting::Global => MaskMode::Global,
            MaskSetting::Streaming | MaskSetting::Variable => MaskMode::Streaming { chunk_frames },
        }
    }
}

impl std::str::FromStr for MaskSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MaskSetting::Global),
            "streaming" => Ok(MaskSetting::Streaming),
            "variable" => Ok(MaskSetting::Variable),
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskSetting::Global => "global",
            MaskSetting::Streaming => "streaming",
            MaskSetting::Variable => "variable",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub audio_layers: usize,
    pub label_layers: usize,
    pub context_layers: usize,
    pub joint_dim: usize,
    pub max_phrase_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            audio_layers: 2,
            label_layers: 2,
            context_layers: 2,
            joint_dim: 64,
            max_phrase_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 || self.joint_dim == 0 || self.max_phrase_len == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers: self.context_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_phrase_len,
        }
    }
}

/// `T × F` synthetic acoustic features.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures(pub Matrix);

impl AudioFeatures {
    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.0.rows() == 0 {
            return Err(Error::InvalidInput("audio has no frames".into()));
        }
        if self.0.cols() != feature_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                got: self.0.cols(),
            });
        }
        if !self.0.is_finite() {
            return Err(Error::NonFinite("audio features".into()));
        }
        Ok(())
    }
}

/// One row of the context matrix: a phrase or the back-off slot.
pub type ContextItem = Option<TokenSequence>;

/// Cross-attention of encoder states over the context embeddings.
#[derive(Clone, Debug)]
pub struct BiasingAttention {
    pub attention: Attention,
}

impl BiasingAttention {
    /// Residual biasing; returns the biased states and per-head `positions × entries` weights.
    pub fn forward(&self, tape: &mut Tape<'_>, states: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let (s, c) = (tape.value(states).cols(), tape.value(context).cols());
        if s != c {
            return Err(Error::DimensionMismatch { expected: s, got: c });
        }
        if tape.value(context).rows() == 0 {
            return Err(Error::InvalidInput("context list is empty".into()));
        }
        let (out, weights) = self.attention.forward(tape, states, context, None);
        Ok((tape.add(states, out), weights))
    }
}

/// Matrix-level wrapper around [`BiasingAttention::forward`].
pub fn bias_states(
    store: &ParamStore,
    att: &BiasingAttention,
    states: &Matrix,
    context: &Matrix,
) -> Result<(Matrix, Vec<Matrix>)> {
    let mut tape = Tape::new(store);
    let s = tape.constant(states.clone());
    let c = tape.constant(context.clone());
    let (out, weights) = att.forward(&mut tape, s, c)?;
    Ok((
        tape.value(out).clone(),
        weights.iter().map(|&w| tape.value(w).clone()).collect(),
    ))
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub context: ContextEncoder,
    pub backoff: ParamId,
    pub context_norm: LayerNorm,
    pub audio_input: Linear,
    pub audio_stack: EncoderStack,
    pub audio_norm: LayerNorm,
    pub label_embedding: ParamId,
    pub label_stack: EncoderStack,
    pub label_norm: LayerNorm,
    pub audio_bias: BiasingAttention,
    pub label_bias: BiasingAttention,
    pub joint_audio: Linear,
    pub joint_label: Linear,
    pub joint_out: Linear,
}

/// Everything the forward pass exposes for inspection.
pub struct Forward {
    pub logits: Var,
    pub audio_weights: Vec<Var>,
    pub label_weights: Vec<Var>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let context = ContextEncoder::new(&mut store, "context", config.encoder_config(), &mut rng);
        let backoff = store.add("backoff", init_uniform(&mut rng, 1, d, d));
        let context_norm = LayerNorm::new(&mut store, "context.norm", d);
        let audio_input = Linear::new(&mut store, "audio.input", config.feature_dim, d, &mut rng);
        let audio_stack = EncoderStack::new(
            &mut store,
            "audio.stack",
            config.audio_layers,
            d,
            config.heads,
            config.ffn_dim,
            &mut rng,
        );
        let audio_norm = LayerNorm::new(&mut store, "audio.norm", d);
        let label_embedding = store.add("label.embedding", init_uniform(&mut rng, VOCAB_SIZE, d, 1));
        let label_stack = EncoderStack::new(
            &mut store,
            "label.stack",
            config.label_layers,
            d,
            config.heads,
            config.ffn_dim,
            &mut rng,
        );
        let label_norm = LayerNorm::new(&mut store, "label.norm", d);
        let audio_bias = BiasingAttention {
            attention: Attention::new(&mut store, "audio.bias", d, config.heads, &mut rng),
        };
        let label_bias = BiasingAttention {
            attention: Attention::new(&mut store, "label.bias", d, config.heads, &mut rng),
        };
        for att in [&audio_bias, &label_bias] {
            store.get_mut(att.attention.output.weight).data_mut().fill(0.0);
        }
        let j = config.joint_dim;
        let joint_audio = Linear::new(&mut store, "joint.audio", d, j, &mut rng);
        let joint_label = Linear::new(&mut store, "joint.label", d, j, &mut rng);
        let joint_out = Linear::new(&mut store, "joint.out", j, VOCAB_SIZE, &mut rng);
        Ok(Self {
            config,
            store,
            context,
            backoff,
            context_norm,
            audio_input,
            audio_stack,
            audio_norm,
            label_embedding,
            label_stack,
            label_norm,
            audio_bias,
            label_bias,
            joint_audio,
            joint_label,
            joint_out,
        })
    }

    pub fn encoder(&self) -> EncoderRef<'_> {
        EncoderRef {
            store: &self.store,
            encoder: &self.context,
        }
    }

    /// Stacks phrase embeddings (and the back-off vector for `None`) into a
    /// row-normalised `m × d` node ready for the biasing layers.
    pub fn context_matrix(&self, tape: &mut Tape<'_>, items: &[ContextItem]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidInput("context list is empty".into()));
        }
        let rows = items
            .iter()
            .map(|item| match item {
                Some(tokens) => self.context.forward(tape, tokens),
                None => Ok(tape.param(self.backoff)),
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&rows);
        Ok(self.context_norm.forward(tape, stacked))
    }

    /// Audio encoder output before biasing, `T × d`.
    pub fn audio_states(&self, tape: &mut Tape<'_>, features: &AudioFeatures, mode: MaskMode) -> Result<Var> {
        features.validate(self.config.feature_dim)?;
        mode.validate()?;
        let frames = features.frames();
        let x = tape.constant(features.0.clone());
        let h = self.audio_input.forward(tape, x);
        let pos = tape.constant(sinusoid_positions(frames, self.config.dim));
        let h = tape.add(h, pos);
        let mask = mode.mask(frames);
        let h = self.audio_stack.forward(tape, h, mask.as_ref());
        Ok(self.audio_norm.forward(tape, h))
    }

    /// Label encoder output for `[blank] + labels`, `(U+1) × d`, causal.
    pub fn label_states(&self, tape: &mut Tape<'_>, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= VOCAB_SIZE || l == BLANK) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                vocab: VOCAB_SIZE,
            });
        }
        let mut ids = Vec::with_capacity(labels.len() + 1);
        ids.push(BLANK);
        ids.extend_from_slice(labels);
        let table = tape.param(self.label_embedding);
        let e = tape.gather(table, &ids);
        let pos = tape.constant(sinusoid_positions(ids.len(), self.config.dim));
        let h = tape.add(e, pos);
        let mask = Arc::new(Mask::causal(ids.len()));
        let h = self.label_stack.forward(tape, h, Some(&mask));
        Ok(self.label_norm.forward(tape, h))
    }

    /// Full forward pass to the joint logits given a precomputed context node.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        features: &AudioFeatures,
        labels: &[usize],
        context: Var,
        mode: MaskMode,
    ) -> Result<Forward> {
        let audio = self.audio_states(tape, features, mode)?;
        let (audio, audio_weights) = self.audio_bias.forward(tape, audio, context)?;
        let label = self.label_states(tape, labels)?;
        let (label, label_weights) = self.label_bias.forward(tape, label, context)?;
        let a = self.joint_audio.forward(tape, audio);
        let l = self.joint_label.forward(tape, label);
        let grid = tape.joint_grid(a, l);
        let h = tape.tanh(grid);
        let logits = self.joint_out.forward(tape, h);
        Ok(Forward {
            logits,
            audio_weights,
            label_weights,
        })
    }

    /// Transducer loss node for one utterance.
    pub fn loss_node(
        &self,
        tape: &mut Tape<'_>,
        features: &AudioFeatures,
        labels: &[usize],
        context: Var,
        mode: MaskMode,
    ) -> Result<Var> {
        let fwd = self.forward(tape, features, labels, context, mode)?;
        tape.transducer_loss(fwd.logits, features.frames(), labels, BLANK)
    }

    pub fn audio_encode(&self, features: &AudioFeatures, mode: MaskMode) -> Result<Matrix> {
        let mut tape = Tape::new(&self.store);
        let v = self.audio_states(&mut tape, features, mode)?;
        Ok(tape.value(v).clone())
    }

    /// Loss and gradients for every parameter, context encoder included.
    pub fn transducer_loss(
        &self,
        features: &AudioFeatures,
        labels: &[usize],
        context: &[ContextItem],
        mode: MaskMode,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.store);
        let ctx = self.context_matrix(&mut tape, context)?;
        let loss = self.loss_node(&mut tape, features, labels, ctx, mode)?;
        let value = tape.value(loss).get(0, 0);
        Ok((value, tape.backward(loss).params))
    }

    /// Loss value only.
    pub fn loss_value(
        &self,
        features: &AudioFeatures,
        labels: &[usize],
        context: &[ContextItem],
        mode: MaskMode,
    ) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let ctx = self.context_matrix(&mut tape, context)?;
        let loss = self.loss_node(&mut tape, features, labels, ctx, mode)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Embedding rows for a context list, computed once for reuse across utterances.
    pub fn context_values(&self, context: &[ContextItem]) -> Result<Matrix> {
        let mut tape = Tape::new(&self.store);
        let ctx = self.context_matrix(&mut tape, context)?;
        Ok(tape.value(ctx).clone())
    }

    /// Frame-synchronous greedy decoding with at most [`MAX_SYMBOLS_PER_FRAME`] emissions per frame.
    pub fn greedy_decode(&self, features: &AudioFeatures, context: &Matrix, mode: MaskMode) -> Result<Vec<usize>> {
        let mut tape = Tape::new(&self.store);
        let ctx = tape.constant(context.clone());
        let audio = self.audio_states(&mut tape, features, mode)?;
        let (audio, _) = self.audio_bias.forward(&mut tape, audio, ctx)?;
        let a = self.joint_audio.forward(&mut tape, audio);
        let audio_proj = tape.value(a).clone();

        let mut labels: Vec<usize> = Vec::new();
        let mut label_proj = self.label_projection(context, &labels)?;
        let w = self.store.get(self.joint_out.weight);
        let b = self.store.get(self.joint_out.bias);
        for t in 0..audio_proj.rows() {
            for _ in 0..MAX_SYMBOLS_PER_FRAME {
                let hidden: Vec<f64> = audio_proj
                    .row(t)
                    .iter()
                    .zip(&label_proj)
                    .map(|(x, y)| (x + y).tanh())
                    .collect();
                let logits = Matrix::row_vector(hidden).matmul(w);
                let best = (0..VOCAB_SIZE)
                    .max_by(|&i, &j| {
                        (logits.get(0, i) + b.get(0, i)).total_cmp(&(logits.get(0, j) + b.get(0, j)))
                    })
                    .unwrap_or(BLANK);
                if best == BLANK {
                    break;
                }
                labels.push(best);
                label_proj = self.label_projection(context, &labels)?;
            }
        }
        Ok(labels)
    }

    /// Joint-space projection of the last label state for a prefix.
    fn label_projection(&self, context: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let ctx = tape.constant(context.clone());
        let label = self.label_states(&mut tape, labels)?;
        let (label, _) = self.label_bias.forward(&mut tape, label, ctx)?;
        let l = self.joint_label.forward(&mut tape, label);
        let v = tape.value(l);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Decodes to text.
    pub fn transcribe(&self, features: &AudioFeatures, context: &Matrix, mode: MaskMode) -> Result<String> {
        Ok(crate::context_encoder::detokenize(&self.greedy_decode(
            features, context, mode,
        )?))
    }

    /// Mean audio-side attention mass per context entry, averaged over frames and heads.
    pub fn attention_diagnostics(&self, features: &AudioFeatures, context: &Matrix, mode: MaskMode) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let ctx = tape.constant(context.clone());
        let audio = self.audio_states(&mut tape, features, mode)?;
        let (_, weights) = self.audio_bias.forward(&mut tape, audio, ctx)?;
        let mut mass = vec![0.0; context.rows()];
        let mut count = 0usize;
        for &w in &weights {
            let m = tape.value(w);
            for r in 0..m.rows() {
                for (acc, v) in mass.iter_mut().zip(m.row(r)) {
                    *acc += v;
                }
                count += 1;
            }
        }
        for m in &mut mass {
            *m /= count as f64;
        }
        Ok(mass)
    }
}

/// Character labels for a transcript.
pub fn transcript_labels(text: &str) -> Result<Vec<usize>> {
    Ok(tokenize(text)?.ids().to_vec())
}
