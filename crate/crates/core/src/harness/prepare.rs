use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{load_pretrained, tokenize, EmbeddingTable, Vocabulary};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::train::EncodedPair;

use super::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    /// Uniform random rows of the given width.
    Random { dim: usize },
    /// A plain-text vector file; words it lacks get random rows.
    Pretrained { path: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Random { dim: 50 }
    }
}

/// Vocabulary, embedding table and the id-encoded records of a dataset.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub vocab: Vocabulary,
    pub embedding: EmbeddingTable<T>,
    pub pairs: Vec<EncodedPair>,
}

pub fn encode_dataset(vocab: &Vocabulary, dataset: &Dataset) -> Vec<EncodedPair> {
    dataset
        .records
        .iter()
        .map(|r| EncodedPair::new(vocab.encode_text(&r.context), vocab.encode_text(&r.target), r.label))
        .collect()
}

/// Builds the vocabulary over every record and an embedding table seeded by `seed`.
pub fn prepare<T: Scalar>(
    dataset: &Dataset,
    source: &EmbeddingSource,
    min_count: usize,
    trainable: bool,
    seed: u64,
) -> Result<Prepared<T>> {
    let corpus = dataset
        .records
        .iter()
        .flat_map(|r| [tokenize(&r.context), tokenize(&r.target)]);
    let vocab = Vocabulary::build(corpus, min_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embedding = match source {
        EmbeddingSource::Random { dim } => EmbeddingTable::random(vocab.len(), *dim, &mut rng),
        EmbeddingSource::Pretrained { path } => {
            let (table, matched) = load_pretrained(path, &vocab, &mut rng)?;
            log::info!(
                "{matched} of {} vocabulary words found in {}",
                vocab.len(),
                path.display()
            );
            table
        }
    };
    embedding.trainable = trainable;
    let pairs = encode_dataset(&vocab, dataset);
    Ok(Prepared {
        vocab,
        embedding,
        pairs,
    })
}
