//! Frozen text encoder: a seeded random word table, mean pooling and L2
//! normalization. The placeholder slot can be overridden per call.

use std::collections::{BTreeSet, HashMap};

use crate::diffcore::{Graph, Tensor2, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const UNK: usize = 0;
pub const PLACEHOLDER_SLOT: usize = 1;
pub const PLACEHOLDER_WORD: &str = "<*>";
const RESERVED: usize = 2;
const STREAM_TABLE: u64 = 0x7E;

/// Lowercased words; `<...>` markers are kept whole, other punctuation splits.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch == '<' {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            let mut marker = String::from('<');
            let mut closed = false;
            while let Some(&n) = chars.peek() {
                chars.next();
                marker.push(n);
                if n == '>' {
                    closed = true;
                    break;
                }
            }
            if closed {
                out.push(marker);
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Summing in index order makes pooling exactly permutation invariant.
fn sorted(tokens: &[usize]) -> Vec<usize> {
    let mut t = tokens.to_vec();
    t.sort_unstable();
    t
}

/// Unit-norm condition vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Vec<f64>);

impl TextEmbedding {
    /// Normalizes `v`; errors on a zero vector.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NonFinite("text embedding norm".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_row(&self) -> Tensor2 {
        Tensor2::row_vector(self.0.clone())
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor2,
}

impl Vocabulary {
    /// Rows: UNK, placeholder, then `words` in sorted order, all N(0, 1).
    pub fn build(words: &BTreeSet<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        let mut all = vec!["<unk>".to_string(), PLACEHOLDER_WORD.to_string()];
        all.extend(words.iter().filter(|w| w.as_str() != PLACEHOLDER_WORD).cloned());
        let mut r = rng::stream(seed, &[STREAM_TABLE]);
        let table = Tensor2::new(all.len(), dim, rng::gaussian_vec(&mut r, all.len() * dim))?;
        Self::from_parts(all, table)
    }

    /// Rebuilds from stored words and table.
    pub fn from_parts(words: Vec<String>, table: Tensor2) -> Result<Self> {
        if words.len() != table.rows() || words.len() < RESERVED {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} words but table has {} rows",
                words.len(),
                table.rows()
            )));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index, table })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn table(&self) -> &Tensor2 {
        &self.table
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        self.table.row(idx)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize_words(text)
            .iter()
            .map(|w| self.index_of(w).unwrap_or(UNK))
            .collect()
    }

    /// Mean of token rows, with the placeholder row replaced by `override_row`
    /// when given, then normalized.
    pub fn embed_tokens(&self, tokens: &[usize], override_row: Option<&[f64]>) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty token list".into()));
        }
        let d = self.dim();
        if let Some(o) = override_row {
            if o.len() != d {
                return Err(Error::Shape {
                    op: "embed_text",
                    detail: format!("override has {} dims, table has {d}", o.len()),
                });
            }
        }
        let mut acc = vec![0.0; d];
        for &t in &sorted(tokens) {
            let row = match (t, override_row) {
                (PLACEHOLDER_SLOT, Some(o)) => o,
                _ => self.row(t),
            };
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        TextEmbedding::from_unnormalized(acc.into_iter().map(|a| a / n).collect())
    }

    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        self.embed_tokens(&self.tokenize(text), None)
    }

    /// Differentiable embedding in which the placeholder row is the 1 x E
    /// node `v`.
    pub fn embed_graph(&self, g: &mut Graph<'_>, tokens: &[usize], v: Var) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty token list".into()));
        }
        let d = self.dim();
        let mut fixed = vec![0.0; d];
        let mut slots = 0usize;
        for &t in &sorted(tokens) {
            if t == PLACEHOLDER_SLOT {
                slots += 1;
            } else {
                for (a, x) in fixed.iter_mut().zip(self.row(t)) {
                    *a += x;
                }
            }
        }
        let n = tokens.len() as f64;
        let base = g.constant(Tensor2::row_vector(fixed.into_iter().map(|a| a / n).collect()));
        let sum = if slots > 0 {
            let sv = g.scale(v, slots as f64 / n);
            g.add(base, sv)?
        } else {
            base
        };
        g.normalize_rows(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words: BTreeSet<String> = ["the", "man", "walks", "sim", "runs"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocabulary::build(&words, 16, 3).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize_words("The man walks."), vec!["the", "man", "walks"]);
        assert!(tokenize_words("").is_empty());
        assert_eq!(tokenize_words("the sim <*>."), vec!["the", "sim", "<*>"]);
    }

    #[test]
    fn placeholder_and_unknown_indices() {
        let v = vocab();
        let t = v.tokenize("the sim <*>.");
        assert_eq!(t[2], PLACEHOLDER_SLOT);
        assert_eq!(v.tokenize("zebra")[0], UNK);
    }

    #[test]
    fn single_token_is_normalized_row() {
        let v = vocab();
        let i = v.index_of("man").unwrap();
        let e = v.embed_tokens(&[i], None).unwrap();
        let row = v.row(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in e.as_slice().iter().zip(row) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_is_unit_norm_and_order_free() {
        let v = vocab();
        let a = v.embed("the man walks").unwrap();
        let b = v.embed("walks the man").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.as_slice().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn override_with_word_row_equals_written_word() {
        let v = vocab();
        let row = v.row(v.index_of("walks").unwrap()).to_vec();
        let a = v.embed_tokens(&v.tokenize("the sim <*>."), Some(&row)).unwrap();
        let b = v.embed("the sim walks.").unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_tokens_are_rejected() {
        assert!(vocab().embed_tokens(&[], None).is_err());
    }

    #[test]
    fn graph_embedding_matches_direct() {
        let v = vocab();
        let row: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let toks = v.tokenize("the man <*>");
        let direct = v.embed_tokens(&toks, Some(&row)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor2::row_vector(row));
        let e = v.embed_graph(&mut g, &toks, x).unwrap();
        for (a, b) in g.value(e).data().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
