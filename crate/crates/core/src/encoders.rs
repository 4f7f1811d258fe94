//! Text and video encoding: word lookup, the bidirectional recurrent sentence
//! encoder, one-third word masking, and frame-to-segment pooling.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Lstm};
use crate::params::{ParamId, ParamStore};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";

/// Token list plus a fixed embedding table (the stand-in for pretrained
/// word vectors). Ids 0 and 1 are reserved for padding and masking.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Array2<f64>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[MASK_ID] != MASK_TOKEN {
            return Err(Error::invalid(format!(
                "vocabulary must start with {PAD_TOKEN} and {MASK_TOKEN}"
            )));
        }
        if embeddings.nrows() != tokens.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} embedding rows",
                tokens.len(),
                embeddings.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Newline-delimited token list.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn parse_tokens(text: &str) -> Vec<String> {
        text.lines().map(str::to_owned).filter(|l| !l.is_empty()).collect()
    }
}

/// Row `j` of the result is the table row of `token_ids[j]`.
pub fn embed_words(token_ids: &[usize], vocab: &Vocabulary) -> Result<Array2<f64>> {
    let n_v = vocab.len();
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= n_v) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {n_v}")));
    }
    Ok(vocab.embeddings.select(ndarray::Axis(0), token_ids))
}

/// Sentence with roughly a third of its words replaced by the mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSentence {
    pub token_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    /// Sorted, distinct.
    pub mask_positions: Vec<usize>,
}

impl MaskedSentence {
    /// The unmasked sentence viewed through the masked path.
    pub fn unmasked(ids: &[usize]) -> Self {
        MaskedSentence {
            token_ids: ids.to_vec(),
            original_ids: ids.to_vec(),
            mask_positions: Vec::new(),
        }
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.mask_positions.binary_search(&pos).is_ok()
    }
}

/// Number of masked words for a `J`-word sentence: `ceil(J/3)`.
pub fn mask_count(j: usize) -> usize {
    j.div_ceil(3)
}

pub fn mask_sentence(token_ids: &[usize], seed: u64) -> MaskedSentence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_sentence_with(token_ids, &mut rng)
}

pub fn mask_sentence_with(token_ids: &[usize], rng: &mut impl Rng) -> MaskedSentence {
    let j = token_ids.len();
    let mut positions = rand::seq::index::sample(rng, j, mask_count(j)).into_vec();
    positions.sort_unstable();
    let mut masked = token_ids.to_vec();
    for &p in &positions {
        masked[p] = MASK_ID;
    }
    MaskedSentence {
        token_ids: masked,
        original_ids: token_ids.to_vec(),
        mask_positions: positions,
    }
}

/// Plain-value output of the sentence encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoding {
    /// `J × d_s` per-word states.
    pub per_word: Array2<f64>,
    /// `1 × d_s` sentence feature.
    pub summary: Array2<f64>,
}

/// Graph handles of a sentence encoding.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSentence {
    pub per_word: Var,
    pub summary: Var,
}

/// Bidirectional LSTM over word embeddings. Forward and backward states are
/// summed and projected back to `d_s`; the sentence feature reads out the
/// two final states (last forward step, first backward step).
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    pub forward: Lstm,
    pub backward: Lstm,
    pub projection: Linear,
    /// Learned replacement embedding for masked words.
    pub mask_embedding: ParamId,
}

impl SentenceEncoder {
    pub fn new(store: &mut ParamStore, vocab: &Vocabulary, rng: &mut impl Rng) -> Self {
        let d = vocab.width();
        let mask_row = vocab.embeddings.row(MASK_ID).to_owned().insert_axis(ndarray::Axis(0));
        SentenceEncoder {
            forward: Lstm::new(store, "text.lstm_fwd", d, d, rng),
            backward: Lstm::new(store, "text.lstm_bwd", d, d, rng),
            projection: Linear::new(store, "text.proj", d, d, rng),
            mask_embedding: store.add("text.mask_embedding", mask_row),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p.extend(self.projection.params());
        p.push(self.mask_embedding);
        p
    }

    /// Embeds `sentence` on the tape, substituting the learned mask row at
    /// masked positions.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, vocab: &Vocabulary, sentence: &MaskedSentence) -> Result<Var> {
        let j = sentence.token_ids.len();
        if j == 0 {
            return Err(Error::invalid("empty sentence"));
        }
        let ids: Vec<usize> = sentence
            .token_ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| if sentence.is_masked(pos) { PAD_ID } else { id })
            .collect();
        let mut base = embed_words(&ids, vocab)?;
        if sentence.mask_positions.is_empty() {
            return Ok(g.constant(base));
        }
        let mut indicator = Array2::zeros((j, 1));
        for &p in &sentence.mask_positions {
            base.row_mut(p).fill(0.0);
            indicator[[p, 0]] = 1.0;
        }
        let base = g.constant(base);
        let indicator = g.constant(indicator);
        let mask_row = g.param(store, self.mask_embedding);
        let fill = g.matmul(indicator, mask_row);
        Ok(g.add(base, fill))
    }

    /// Encodes `J × d_s` embeddings already on the tape.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, embeddings: Var) -> Result<EncodedSentence> {
        let j = g.shape(embeddings).0;
        if j == 0 {
            return Err(Error::invalid("empty sentence"));
        }
        let fwd = self.forward.run(g, store, embeddings, false);
        let bwd = self.backward.run(g, store, embeddings, true);
        let summed: Vec<Var> = fwd.iter().zip(&bwd).map(|(&f, &b)| g.add(f, b)).collect();
        let stacked = if j == 1 { summed[0] } else { g.concat_rows(&summed) };
        let per_word = self.projection.forward(g, store, stacked);
        let last = g.add(fwd[j - 1], bwd[0]);
        let summary = self.projection.forward(g, store, last);
        Ok(EncodedSentence { per_word, summary })
    }

    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        sentence: &MaskedSentence,
    ) -> Result<EncodedSentence> {
        let emb = self.embed(g, store, vocab, sentence)?;
        self.encode(g, store, emb)
    }

    /// Plain-value encoding of a `J × d_s` embedding matrix.
    pub fn encode_sentence(&self, store: &ParamStore, embeddings: &Array2<f64>) -> Result<SentenceEncoding> {
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let enc = self.encode(&mut g, store, x)?;
        Ok(SentenceEncoding {
            per_word: g.value(enc.per_word).clone(),
            summary: g.value(enc.summary).clone(),
        })
    }

    /// Plain-value encoding of a (possibly masked) token sequence.
    pub fn encode_masked(&self, store: &ParamStore, vocab: &Vocabulary, sentence: &MaskedSentence) -> Result<SentenceEncoding> {
        let mut g = Graph::new();
        let enc = self.encode_tokens(&mut g, store, vocab, sentence)?;
        Ok(SentenceEncoding {
            per_word: g.value(enc.per_word).clone(),
            summary: g.value(enc.summary).clone(),
        })
    }
}

/// Averages `T` frames into `K` contiguous, near-equal groups; group `k`
/// covers frames `⌊kT/K⌋ .. ⌊(k+1)T/K⌋`.
pub fn pool_segment_frames(frames: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    let t = frames.nrows();
    if k == 0 || t < k {
        return Err(Error::invalid(format!("cannot pool {t} frames into {k} segments")));
    }
    let mut out = Array2::zeros((k, frames.ncols()));
    for seg in 0..k {
        let lo = seg * t / k;
        let hi = (seg + 1) * t / k;
        let group = frames.slice(ndarray::s![lo..hi, ..]);
        out.row_mut(seg).assign(&group.mean_axis(ndarray::Axis(0)).expect("non-empty group"));
    }
    Ok(out)
}
