//! Tokenization, vocabulary, and the bidirectional LSTM text encoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Init, LstmCell, VarBuilder};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

pub const DEFAULT_MAX_LEN: usize = 16;

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(|c| c.to_lowercase())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary whose ids follow descending frequency with a
    /// lexicographic tie-break, after the four reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in normalize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Text id sequence, truncated to `max_len`; empty input becomes `[UNK]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = normalize(text)
            .iter()
            .take(max_len.max(1))
            .map(|t| self.id(t))
            .collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the four reserved tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Encoding of one description: word features `(L, d_e)` and sentence feature `(d_e)`.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub word_feats: Tensor,
    pub sent_feat: Tensor,
    pub length: usize,
}

/// Padded batch encoding. `words: (B, Lmax, d_e)` with padded rows zeroed,
/// `mask: (B, Lmax)` holding 1 on real tokens.
#[derive(Debug, Clone)]
pub struct BatchEncoding {
    pub words: Tensor,
    pub sent: Tensor,
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl BatchEncoding {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<TextEncoding> {
        let l = self.lengths[i];
        Ok(TextEncoding {
            word_feats: self.words.get(i)?.narrow(0, 0, l)?,
            sent_feat: self.sent.get(i)?,
            length: l,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            words: self.words.detach(),
            sent: self.sent.detach(),
            mask: self.mask.clone(),
            lengths: self.lengths.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Tensor,
    fwd: LstmCell,
    bwd: LstmCell,
    d_e: usize,
}

impl TextEncoder {
    pub fn new(vb: &VarBuilder, vocab_size: usize, emb_dim: usize, d_e: usize) -> Result<Self> {
        if d_e % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_e must be even, got {d_e}"
            )));
        }
        Ok(Self {
            embedding: vb.get("embedding", &[vocab_size, emb_dim], Init::Uniform(0.1))?,
            fwd: LstmCell::new(&vb.pp("fwd"), emb_dim, d_e / 2)?,
            bwd: LstmCell::new(&vb.pp("bwd"), emb_dim, d_e / 2)?,
            d_e,
        })
    }

    pub fn dim(&self) -> usize {
        self.d_e
    }

    pub fn encode(&self, ids: &[u32]) -> Result<TextEncoding> {
        self.encode_batch(&[ids.to_vec()])?.get(0)
    }

    pub fn encode_batch(&self, batch: &[Vec<u32>]) -> Result<BatchEncoding> {
        if batch.is_empty() || batch.iter().any(Vec::is_empty) {
            return Err(Error::EmptyTokens);
        }
        let dev = self.embedding.device();
        let dtype = self.embedding.dtype();
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(Vec::len).collect();
        let lmax = *lengths.iter().max().unwrap();
        let vocab = self.embedding.dims()[0] as u32;
        if let Some(bad) = batch.iter().flatten().find(|&&id| id >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }

        let mut fwd_ids = vec![PAD; b * lmax];
        let mut bwd_ids = vec![PAD; b * lmax];
        let mut mask = vec![0f32; b * lmax];
        // row of the reversed pass that holds word l's backward state
        let mut gather = vec![0u32; b * lmax];
        for (i, ids) in batch.iter().enumerate() {
            let l = ids.len();
            for (j, &id) in ids.iter().enumerate() {
                fwd_ids[i * lmax + j] = id;
                bwd_ids[i * lmax + j] = ids[l - 1 - j];
                mask[i * lmax + j] = 1.0;
            }
            for j in 0..lmax {
                let src = if j < l { l - 1 - j } else { j };
                gather[i * lmax + j] = (i * lmax + src) as u32;
            }
        }
        let mask = Tensor::from_vec(mask, (b, lmax), dev)?.to_dtype(dtype)?;

        let run = |cell: &LstmCell, ids: Vec<u32>| -> Result<(Tensor, Tensor)> {
            let ids = Tensor::from_vec(ids, b * lmax, dev)?;
            let emb = self
                .embedding
                .index_select(&ids, 0)?
                .reshape((b, lmax, ()))?;
            let hd = cell.hidden();
            let mut h = Tensor::zeros((b, hd), dtype, dev)?;
            let mut c = Tensor::zeros((b, hd), dtype, dev)?;
            let mut outs = Vec::with_capacity(lmax);
            for t in 0..lmax {
                let x = emb.narrow(1, t, 1)?.squeeze(1)?;
                let (h2, c2) = cell.step(&x, &h, &c)?;
                let m = mask.narrow(1, t, 1)?;
                if lengths.iter().all(|&l| l > t) {
                    h = h2;
                    c = c2;
                } else {
                    let keep = m.affine(-1.0, 1.0)?;
                    h = (h2.broadcast_mul(&m)? + h.broadcast_mul(&keep)?)?;
                    c = (c2.broadcast_mul(&m)? + c.broadcast_mul(&keep)?)?;
                }
                outs.push(h.clone());
            }
            Ok((Tensor::stack(&outs, 1)?, h))
        };

        let (fwd_out, fwd_last) = run(&self.fwd, fwd_ids)?;
        let (bwd_rev, bwd_last) = run(&self.bwd, bwd_ids)?;
        let hd = self.d_e / 2;
        let gather = Tensor::from_vec(gather, b * lmax, dev)?;
        let bwd_out = bwd_rev
            .reshape((b * lmax, hd))?
            .index_select(&gather, 0)?
            .reshape((b, lmax, hd))?;
        let words = Tensor::cat(&[fwd_out, bwd_out], 2)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        let sent = Tensor::cat(&[fwd_last, bwd_last], 1)?;
        Ok(BatchEncoding {
            words,
            sent,
            mask,
            lengths,
        })
    }
}

/// Builds a `(B, Lmax)` mask of ones over real tokens in `dtype`.
pub fn length_mask(lengths: &[usize], dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let lmax = lengths.iter().copied().max().unwrap_or(1);
    let mut m = vec![0f32; lengths.len() * lmax];
    for (i, &l) in lengths.iter().enumerate() {
        m[i * lmax..i * lmax + l].fill(1.0);
    }
    Ok(Tensor::from_vec(m, (lengths.len(), lmax), dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build::<&str>(&[], 1);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("<pad>"), PAD);
    }

    #[test]
    fn counts_unique_tokens() {
        let v = Vocabulary::build(&["make it red", "make it blue"], 1);
        assert_eq!(v.len(), 8);
        // make/it appear twice and come first, then blue < red
        assert_eq!(v.token(4), Some("it"));
        assert_eq!(v.token(5), Some("make"));
        assert_eq!(v.token(6), Some("blue"));
        assert_eq!(v.token(7), Some("red"));
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(&["make it red", "make it blue"], 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("red"), UNK);
    }

    #[test]
    fn deterministic_build() {
        let corpus = ["b a c", "c a", "z y x a"];
        let a = Vocabulary::build(&corpus, 1);
        let b = Vocabulary::build(&corpus, 1);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn tokenize_contract() {
        let v = Vocabulary::build(&["is red"], 1);
        assert_eq!(v.tokenize("Is RED.", 16), vec![v.id("is"), v.id("red")]);
        assert_eq!(v.tokenize("", 16), vec![UNK]);
        assert_eq!(v.tokenize("?!", 16), vec![UNK]);
        assert_eq!(v.tokenize("is purple", 16), vec![v.id("is"), UNK]);
        let long = vec!["is"; 20].join(" ");
        assert_eq!(v.tokenize(&long, 10).len(), 10);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(&["make it red", "it is flat"], 1);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn encoder_shapes_and_empty_rejection() {
        let store = ParamStore::new(DType::F32, 1);
        let enc = TextEncoder::new(&store.root(), 20, 128, 300).unwrap();
        let out = enc.encode(&[4, 5, 6]).unwrap();
        assert_eq!(out.word_feats.dims(), &[3, 300]);
        assert_eq!(out.sent_feat.dims(), &[300]);
        assert!(matches!(enc.encode(&[]), Err(Error::EmptyTokens)));
        assert!(TextEncoder::new(&store.root().pp("odd"), 20, 8, 7).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let store = ParamStore::new(DType::F64, 1);
        let enc = TextEncoder::new(&store.root(), 10, 6, 8).unwrap();
        for (_, v) in store.entries() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let out = enc.encode(&[4, 5, 6, 7]).unwrap();
        let w: Vec<f64> = out.word_feats.flatten_all().unwrap().to_vec1().unwrap();
        let s: Vec<f64> = out.sent_feat.to_vec1().unwrap();
        assert!(w.iter().chain(&s).all(|&x| x == 0.0));
    }

    #[test]
    fn padded_batch_matches_single_encodes() {
        let store = ParamStore::new(DType::F64, 9);
        let enc = TextEncoder::new(&store.root(), 12, 5, 6).unwrap();
        let seqs = vec![vec![4u32, 5, 6, 7, 8], vec![9, 10], vec![11]];
        let batch = enc.encode_batch(&seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = enc.encode(s).unwrap();
            let from_batch = batch.get(i).unwrap();
            let a: Vec<f64> = single.word_feats.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = from_batch
                .word_feats
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            let a: Vec<f64> = single.sent_feat.to_vec1().unwrap();
            let b: Vec<f64> = from_batch.sent_feat.to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }
}
