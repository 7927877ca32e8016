//! Small causal transformer text encoder with cyclical positions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenSequence, MAX_TOKENS, SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::nn::{attention, Checkpoint, Embedding, KeyMask, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Keep the weights fixed while the denoiser trains.
    pub frozen: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 2048, d_model: 128, layers: 2, heads: 4, frozen: false }
    }
}

/// Hidden states of one prompt, `(seq_len, d_model)`.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub vectors: Tensor,
}

impl TextEmbedding {
    pub fn seq_len(&self) -> usize {
        self.vectors.dim(0).unwrap_or(0)
    }
}

/// A padded batch of hidden states with its key mask.
#[derive(Debug, Clone)]
pub struct TextContext {
    /// `(B, L, d_model)`, `L >= 1` even when every prompt is empty.
    pub hidden: Tensor,
    pub mask: KeyMask,
    pub lengths: Vec<usize>,
}

impl TextContext {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Rows selected by `rows`, in order.
    pub fn select(&self, rows: &[u32]) -> Result<Self> {
        let idx = Tensor::from_slice(rows, rows.len(), self.hidden.device())?;
        let lengths = rows
            .iter()
            .map(|&r| self.lengths.get(r as usize).copied().ok_or_else(|| Error::invalid(format!("row {r}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            hidden: self.hidden.index_select(&idx, 0)?,
            mask: KeyMask(self.mask.0.index_select(&idx, 0)?),
            lengths,
        })
    }

    pub fn detach(&self) -> Self {
        Self { hidden: self.hidden.detach(), mask: self.mask.clone(), lengths: self.lengths.clone() }
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d)?,
            out: Linear::new(store, &format!("{name}.out"), d, d)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, 4 * d)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * d, d)?,
        })
    }

    fn forward(&self, x: &Tensor, heads: usize, mask: Option<&KeyMask>) -> Result<Tensor> {
        let d = x.dim(2)?;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let (q, k, v) = (qkv.narrow(2, 0, d)?, qkv.narrow(2, d, d)?, qkv.narrow(2, 2 * d, d)?);
        let x = (x + self.out.forward(&attention(&q, &k, &v, heads, true, mask)?)?)?;
        let h = self.ff1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.ff2.forward(&h)?)?)
    }
}

pub struct TextEncoder {
    config: TextEncoderConfig,
    store: ParamStore,
    token: Embedding,
    position: Embedding,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

/// Position index of each token: `i mod 77`.
pub fn position_ids(len: usize) -> Vec<u32> {
    (0..len).map(|i| (i % SEGMENT_LEN) as u32).collect()
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.vocab_size < 256 || config.d_model == 0 || config.d_model % config.heads.max(1) != 0 {
            return Err(Error::Config(format!("invalid text encoder config {config:?}")));
        }
        let mut store = ParamStore::new(seed, dtype);
        let d = config.d_model;
        let token = Embedding::new(&mut store, "token", config.vocab_size, d, (d as f64).powf(-0.5))?;
        let position = Embedding::new(&mut store, "position", SEGMENT_LEN, d, 0.01)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut store, &format!("block{i}"), d))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_norm", d)?;
        Ok(Self { config, store, token, position, blocks, final_norm })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Positional vector applied at token index `i`.
    pub fn position_vector(&self, i: usize) -> Result<Tensor> {
        Ok(self.position.lookup(&[(i % SEGMENT_LEN) as u32])?.squeeze(0)?)
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > MAX_TOKENS {
            return Err(Error::invalid(format!("{} tokens exceed {MAX_TOKENS}", seq.len())));
        }
        if let Some(t) = seq.tokens().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Token plus positional embedding, each 77-token window embedded on its own.
    fn embed_windows(&self, tokens: &[u32]) -> Result<Tensor> {
        let parts = tokens
            .chunks(SEGMENT_LEN)
            .map(|chunk| {
                let pos: Vec<u32> = (0..chunk.len() as u32).collect();
                Ok(self.token.lookup(chunk)?.add(&self.position.lookup(&pos)?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn transform(&self, x: Tensor, mask: Option<&KeyMask>) -> Result<Tensor> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(&h, self.config.heads, mask)?;
        }
        self.final_norm.forward(&h)
    }

    fn empty(&self) -> Result<TextEmbedding> {
        let vectors = Tensor::zeros((0, self.config.d_model), self.store.dtype(), &Device::Cpu)?;
        Ok(TextEmbedding { vectors })
    }

    /// Long-prompt encoding: windows embedded separately and concatenated, then
    /// one causal pass over the whole sequence.
    pub fn encode_long(&self, seq: &TokenSequence) -> Result<TextEmbedding> {
        self.check(seq)?;
        if seq.is_empty() {
            return self.empty();
        }
        let x = self.embed_windows(seq.tokens())?.unsqueeze(0)?;
        Ok(TextEmbedding { vectors: self.transform(x, None)?.squeeze(0)? })
    }

    /// Plain encoding of a prompt that fits one window.
    pub fn encode_single_segment(&self, seq: &TokenSequence) -> Result<TextEmbedding> {
        self.check(seq)?;
        if seq.len() > SEGMENT_LEN {
            return Err(Error::invalid(format!("{} tokens exceed one window of {SEGMENT_LEN}", seq.len())));
        }
        if seq.is_empty() {
            return self.empty();
        }
        let pos: Vec<u32> = (0..seq.len() as u32).collect();
        let x = self.token.lookup(seq.tokens())?.add(&self.position.lookup(&pos)?)?;
        Ok(TextEmbedding { vectors: self.transform(x.unsqueeze(0)?, None)?.squeeze(0)? })
    }

    /// Right-padded batch encoding. Empty prompts yield fully masked rows.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<TextContext> {
        if seqs.is_empty() {
            return Err(Error::Empty("prompt batch"));
        }
        let lmax = seqs.iter().map(TokenSequence::len).max().unwrap_or(0).max(1);
        let mut rows = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len() * lmax);
        for seq in seqs {
            self.check(seq)?;
            let mut ids = seq.tokens().to_vec();
            ids.resize(lmax, 0);
            rows.push(self.embed_windows(&ids)?);
            mask.extend((0..lmax).map(|i| if i < seq.len() { 1.0f32 } else { 0.0 }));
        }
        let x = Tensor::stack(&rows, 0)?;
        let mask = KeyMask(Tensor::from_vec(mask, (seqs.len(), lmax), &Device::Cpu)?.to_dtype(self.store.dtype())?);
        let hidden = self.transform(x, Some(&mask))?;
        Ok(TextContext { hidden, mask, lengths: seqs.iter().map(TokenSequence::len).collect() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new("text-encoder", &self.config)?.with_tensors("", self.store.tensors()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind("text-encoder", path)?;
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let enc = Self::new(ck.config()?, 0, dtype)?;
        enc.store.assign(&ck.tensors)?;
        Ok(enc)
    }

    pub(crate) fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        self.store.tensors()
    }

    pub(crate) fn assign(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        self.store.assign(tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn encoder() -> TextEncoder {
        let cfg = TextEncoderConfig { vocab_size: 300, d_model: 32, layers: 2, heads: 4, frozen: false };
        TextEncoder::new(cfg, 3, DType::F64).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        to_f64_vec(a).unwrap().iter().zip(to_f64_vec(b).unwrap()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn positions_cycle_every_window() {
        let enc = encoder();
        assert_eq!(position_ids(80)[77], 0);
        assert_eq!(max_diff(&enc.position_vector(77).unwrap(), &enc.position_vector(0).unwrap()), 0.0);
    }

    #[test]
    fn full_length_prompt_keeps_its_length() {
        let enc = encoder();
        let seq = TokenSequence::new((0..154).map(|i| i % 300).collect()).unwrap();
        assert_eq!(enc.encode_long(&seq).unwrap().seq_len(), 154);
        assert_eq!(enc.encode_long(&TokenSequence::default()).unwrap().seq_len(), 0);
        assert!(enc.encode_single_segment(&seq).is_err());
    }

    #[test]
    fn batch_rows_match_single_encoding() {
        let enc = encoder();
        let a = TokenSequence::new((0..100).map(|i| (i * 7) % 300).collect()).unwrap();
        let b = TokenSequence::new(vec![5, 6, 7]).unwrap();
        let ctx = enc.encode_batch(&[a.clone(), b.clone(), TokenSequence::default()]).unwrap();
        assert_eq!(ctx.hidden.dims(), &[3, 100, 32]);
        let row_a = ctx.hidden.get(0).unwrap();
        assert!(max_diff(&row_a, &enc.encode_long(&a).unwrap().vectors) < 1e-10);
        let row_b = ctx.hidden.get(1).unwrap().narrow(0, 0, 3).unwrap();
        assert!(max_diff(&row_b, &enc.encode_long(&b).unwrap().vectors) < 1e-10);
        assert_eq!(to_f64_vec(&ctx.mask.0.get(2).unwrap()).unwrap().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn rejects_out_of_vocabulary_tokens() {
        let enc = encoder();
        assert!(enc.encode_long(&TokenSequence::new(vec![300]).unwrap()).is_err());
    }
}
