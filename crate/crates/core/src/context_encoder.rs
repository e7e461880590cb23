//! Character-level phrase encoder.
//!
//! A phrase is tokenised into characters, embedded with learned token and
//! position tables, run through a small pre-norm self-attention stack, mean
//! pooled over positions and projected to one fixed-size vector. That vector
//! is both the key/value source of the biasing attention and the point stored
//! in the nearest-neighbour index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{init_uniform, EncoderStack, Linear};
use crate::tensor::Matrix;

/// Padding id; doubles as the transducer blank.
pub const PAD: usize = 0;
pub const BLANK: usize = PAD;
pub const UNK: usize = 1;
const LETTERS: usize = 2;
const DIGITS: usize = LETTERS + 26;
pub const SPACE: usize = DIGITS + 10;
pub const APOSTROPHE: usize = SPACE + 1;
pub const HYPHEN: usize = SPACE + 2;
pub const VOCAB_SIZE: usize = HYPHEN + 1;

pub fn char_to_id(c: char) -> usize {
    match c {
        'a'..='z' => LETTERS + (c as usize - 'a' as usize),
        '0'..='9' => DIGITS + (c as usize - '0' as usize),
        ' ' => SPACE,
        '\'' => APOSTROPHE,
        '-' => HYPHEN,
        _ => UNK,
    }
}

pub fn id_to_char(id: usize) -> Option<char> {
    match id {
        _ if (LETTERS..DIGITS).contains(&id) => Some((b'a' + (id - LETTERS) as u8) as char),
        _ if (DIGITS..SPACE).contains(&id) => Some((b'0' + (id - DIGITS) as u8) as char),
        SPACE => Some(' '),
        APOSTROPHE => Some('\''),
        HYPHEN => Some('-'),
        UNK => Some('?'),
        _ => None,
    }
}

/// Non-empty sequence of character ids with no padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= VOCAB_SIZE || id == PAD) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab: VOCAB_SIZE,
            });
        }
        Ok(Self(ids))
    }

    /// Wraps ids without validation; [`ContextEncoder::forward`] re-checks them.
    pub fn from_raw(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases and maps each character; unknown characters become [`UNK`].
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot tokenize an empty string".into()));
    }
    TokenSequence::new(text.to_lowercase().chars().map(char_to_id).collect())
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().filter_map(|&id| id_to_char(id)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 48,
        }
    }
}

/// Fixed-size phrase vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseEmbedding(pub Vec<f64>);

impl PhraseEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub stack: EncoderStack,
    pub pooling: Linear,
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        let token_embedding = store.add(
            format!("{name}.token_embedding"),
            init_uniform(rng, VOCAB_SIZE, d, 1),
        );
        let position_embedding = store.add(
            format!("{name}.position_embedding"),
            init_uniform(rng, config.max_len, d, d),
        );
        let stack = EncoderStack::new(
            store,
            &format!("{name}.stack"),
            config.layers,
            d,
            config.heads,
            config.ffn_dim,
            rng,
        );
        let pooling = Linear::new(store, &format!("{name}.pooling"), d, d, rng);
        Self {
            config,
            token_embedding,
            position_embedding,
            stack,
            pooling,
        }
    }

    /// Records the encoder on `tape`; returns a `1 × dim` node.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: &TokenSequence) -> Result<Var> {
        let ids = tokens.ids();
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab: VOCAB_SIZE,
            });
        }
        if ids.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "phrase of {} characters exceeds encoder limit {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let table = tape.param(self.token_embedding);
        let positions = tape.param(self.position_embedding);
        let tok = tape.gather(table, ids);
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(positions, &pos_ids);
        let x = tape.add(tok, pos);
        let h = self.stack.forward(tape, x, None);
        let pooled = tape.mean_rows(h);
        Ok(self.pooling.forward(tape, pooled))
    }
}

/// A borrowed encoder together with the parameter values it reads.
#[derive(Clone, Copy)]
pub struct EncoderRef<'a> {
    pub store: &'a ParamStore,
    pub encoder: &'a ContextEncoder,
}

impl<'a> EncoderRef<'a> {
    pub fn dim(&self) -> usize {
        self.encoder.config.dim
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<PhraseEmbedding> {
        let mut tape = Tape::new(self.store);
        let out = self.encoder.forward(&mut tape, tokens)?;
        let v = tape.value(out).row(0).to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("phrase embedding".into()));
        }
        Ok(PhraseEmbedding(v))
    }

    pub fn encode_text(&self, text: &str) -> Result<PhraseEmbedding> {
        self.encode(&tokenize(text)?)
    }

    /// Order-preserving batch encode; items may run concurrently.
    pub fn encode_batch(&self, phrases: &[TokenSequence]) -> Result<Vec<PhraseEmbedding>> {
        exec::try_map(phrases, |index, p| {
            self.encode(p).map_err(|e| Error::BatchItem {
                index,
                source: Box::new(e),
            })
        })
    }

    pub fn encode_texts<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<PhraseEmbedding>> {
        exec::try_map(texts, |index, t| {
            self.encode_text(t.as_ref()).map_err(|e| Error::BatchItem {
                index,
                source: Box::new(e),
            })
        })
    }

    /// Gradients of a scalar loss over the embeddings of `batch`.
    ///
    /// `loss_fn` receives the tape and one `1 × dim` node per phrase.
    pub fn gradients<F>(&self, batch: &[TokenSequence], loss_fn: F) -> Result<Gradients>
    where
        F: FnOnce(&mut Tape<'a>, &[Var]) -> Var,
    {
        let mut tape = Tape::new(self.store);
        let outs = batch
            .iter()
            .map(|p| self.encoder.forward(&mut tape, p))
            .collect::<Result<Vec<_>>>()?;
        let loss = loss_fn(&mut tape, &outs);
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        Ok(tape.backward(loss).params)
    }
}

/// A standalone encoder with its own parameter store.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub store: ParamStore,
    pub encoder: ContextEncoder,
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ContextEncoder::new(&mut store, "context", config, &mut rng);
        Self { store, encoder }
    }

    pub fn as_ref(&self) -> EncoderRef<'_> {
        EncoderRef {
            store: &self.store,
            encoder: &self.encoder,
        }
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<PhraseEmbedding> {
        self.as_ref().encode(tokens)
    }

    pub fn encode_batch(&self, phrases: &[TokenSequence]) -> Result<Vec<PhraseEmbedding>> {
        self.as_ref().encode_batch(phrases)
    }
}

/// Squared L2 norm of every embedding, summed: a generic smooth test loss.
pub fn squared_norm_loss(tape: &mut Tape<'_>, outs: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for &o in outs {
        let sq = tape.matmul_bt(o, o);
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    total.unwrap_or_else(|| tape.constant(Matrix::zeros(1, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 12,
            max_len: 16,
        }
    }

    #[test]
    fn tokenize_maps_characters() {
        let t = tokenize("jean").unwrap();
        assert_eq!(
            t.ids(),
            &[char_to_id('j'), char_to_id('e'), char_to_id('a'), char_to_id('n')]
        );
        assert_eq!(detokenize(t.ids()), "jean");
        let t = tokenize("jim smith").unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t.ids()[3], SPACE);
        assert!(tokenize("").is_err());
        assert_eq!(tokenize("é").unwrap().ids(), &[UNK]);
        assert_eq!(detokenize(tokenize("o'neil-2").unwrap().ids()), "o'neil-2");
    }

    #[test]
    fn token_sequence_rejects_padding_and_overflow() {
        assert!(TokenSequence::new(vec![2, PAD, 3]).is_err());
        assert!(TokenSequence::new(vec![VOCAB_SIZE]).is_err());
        assert!(TokenSequence::new(vec![]).is_err());
    }

    #[test]
    fn degenerate_weights_give_mean_of_token_embeddings() {
        let mut params = EncoderParams::new(small(), 3);
        let zero_names: Vec<String> = params
            .store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| {
                n.contains(".attn.") || n.contains(".ffn.") || n.contains("position_embedding")
            })
            .collect();
        for n in zero_names {
            let id = params.store.id(&n).unwrap();
            params.store.get_mut(id).data_mut().fill(0.0);
        }
        let pool_w = params.encoder.pooling.weight;
        *params.store.get_mut(pool_w) = Matrix::identity(8);

        let tokens = tokenize("eva").unwrap();
        let got = params.encode(&tokens).unwrap();
        let table = params.store.get(params.encoder.token_embedding);
        for c in 0..8 {
            let mean = tokens.ids().iter().map(|&id| table.get(id, c)).sum::<f64>() / 3.0;
            assert!((got.0[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_without_layers_is_row_times_projection() {
        let cfg = EncoderConfig {
            layers: 0,
            ..small()
        };
        let params = EncoderParams::new(cfg, 9);
        let id = char_to_id('q');
        let got = params.encode(&TokenSequence::new(vec![id]).unwrap()).unwrap();
        let row = params.store.get(params.encoder.token_embedding).row(id).to_vec();
        let pos = params.store.get(params.encoder.position_embedding).row(0).to_vec();
        let w = params.store.get(params.encoder.pooling.weight);
        let b = params.store.get(params.encoder.pooling.bias);
        for c in 0..8 {
            let mut want = b.get(0, c);
            for k in 0..8 {
                want += (row[k] + pos[k]) * w.get(k, c);
            }
            assert!((got.0[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_deterministic_and_batch_matches_loop() {
        let params = EncoderParams::new(small(), 1);
        let phrases: Vec<TokenSequence> = ["jean", "jeanne", "eva", "jim smith"]
            .iter()
            .map(|t| tokenize(t).unwrap())
            .collect();
        let a = params.encode(&phrases[0]).unwrap();
        let b = params.encode(&phrases[0]).unwrap();
        assert_eq!(a, b);
        let batch = params.encode_batch(&phrases).unwrap();
        for (p, e) in phrases.iter().zip(&batch) {
            assert_eq!(&params.encode(p).unwrap(), e);
        }
        assert_eq!(params.encode_batch(&phrases[..1]).unwrap()[0], a);
    }

    #[test]
    fn encode_rejects_out_of_range_ids() {
        let params = EncoderParams::new(small(), 1);
        let bad = TokenSequence::from_raw(vec![2, VOCAB_SIZE + 3]);
        assert!(matches!(params.encode(&bad), Err(Error::OutOfVocabulary { .. })));
        let err = params
            .encode_batch(&[tokenize("ok").unwrap(), bad])
            .unwrap_err();
        assert!(matches!(err, Error::BatchItem { index: 1, .. }));
        let long = tokenize(&"a".repeat(17)).unwrap();
        assert!(params.encode(&long).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradient_and_scaling_is_linear() {
        let params = EncoderParams::new(small(), 4);
        let batch = vec![tokenize("jean").unwrap()];
        let g = params
            .as_ref()
            .gradients(&batch, |t, _| t.constant(Matrix::from_vec(1, 1, vec![3.0])))
            .unwrap();
        assert_eq!(g.global_norm(), 0.0);

        let g1 = params.as_ref().gradients(&batch, squared_norm_loss).unwrap();
        let g3 = params
            .as_ref()
            .gradients(&batch, |t, outs| {
                let l = squared_norm_loss(t, outs);
                t.scale(l, 3.0)
            })
            .unwrap();
        for ((_, a), (_, b)) in g1.iter().zip(g3.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((3.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let params = EncoderParams::new(small(), 4);
        let batch = vec![tokenize("jean").unwrap()];
        let r = params
            .as_ref()
            .gradients(&batch, |t, _| t.constant(Matrix::from_vec(1, 1, vec![f64::NAN])));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
