//! Tokenisation, vocabulary and the shared word-embedding table.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

/// Half-width of the uniform range used for rows without a pretrained vector.
pub const OOV_INIT_RANGE: f64 = 0.25;

/// Lowercases, splits on whitespace, and peels leading/trailing ASCII
/// punctuation off each chunk as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let bytes = lower.as_bytes();
        let start = bytes.iter().take_while(|b| b.is_ascii_punctuation()).count();
        if start == bytes.len() {
            tokens.extend(lower.chars().map(String::from));
            continue;
        }
        let end = bytes.len() - bytes.iter().rev().take_while(|b| b.is_ascii_punctuation()).count();
        tokens.extend(lower[..start].chars().map(String::from));
        tokens.push(lower[start..end].to_string());
        tokens.extend(lower[end..].chars().map(String::from));
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { ids, tokens }
    }

    /// Tokens occurring at least `min_count` times get ids in descending
    /// frequency order, ties broken lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_ref().to_string()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::new();
        for (tok, _) in kept {
            vocab.ids.insert(tok.clone(), vocab.tokens.len());
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Word-embedding matrix `[V × d]`, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    matrix: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Rows uniform in `[−0.25, 0.25]`, PAD row zero.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut matrix = Tensor::uniform(&[vocab_size, dim], -OOV_INIT_RANGE, OOV_INIT_RANGE, rng);
        matrix.row_slice_mut(PAD).fill(T::zero());
        Self {
            matrix,
            trainable: true,
        }
    }

    pub fn from_matrix(matrix: Tensor<T>) -> Result<Self> {
        matrix.expect_rank2("embedding table")?;
        if matrix.rows() <= SEP {
            return Err(Error::Dimension("embedding table needs the reserved rows".into()));
        }
        if matrix.row_slice(PAD).iter().any(|x| *x != T::zero()) {
            return Err(Error::Input("PAD embedding row must be zero".into()));
        }
        Ok(Self {
            matrix,
            trainable: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor<T> {
        self.matrix
    }
}

/// Builds an embedding table for `vocab` from a plain-text vector file.
///
/// The file holds one `token v1 … v_d` line per word, optionally preceded by a
/// `<count> <dim>` header. Vocabulary words found in the file take its vector
/// verbatim; everything else is drawn from `rng`. Returns the table and the
/// number of vocabulary words matched.
pub fn load_pretrained<T: Scalar, R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(EmbeddingTable<T>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut found: HashMap<usize, Vec<T>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        if lineno == 1 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            dim = Some(fields[1].parse().expect("checked above"));
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::parse(path, lineno, "expected a token followed by its vector"));
        }
        let width = fields.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Format(format!(
                    "{}:{lineno}: vector has {width} components, expected {d}",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        let id = match vocab.get(fields[0]) {
            Some(id) if id > SEP => id,
            _ => continue,
        };
        let mut vector = Vec::with_capacity(width);
        for f in &fields[1..] {
            let x: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("`{f}` is not a number")))?;
            vector.push(T::lit(x));
        }
        found.entry(id).or_insert(vector);
    }
    let dim = dim.ok_or_else(|| Error::Format(format!("{} holds no vectors", path.display())))?;
    let mut table = EmbeddingTable::random(vocab.len(), dim, rng);
    for (&id, v) in &found {
        table.matrix.row_slice_mut(id).copy_from_slice(v);
    }
    Ok((table, found.len()))
}

/// Gathers embedding rows for `ids`; PAD rows never receive gradient.
pub fn lookup<T: Scalar>(tape: &mut Tape<T>, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather(table, ids, Some(PAD))
}
