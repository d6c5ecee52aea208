//! Image + keyword fusion into the decoder's initial state:
//! `h0 = tanh(W_img·feature + W_kw·mean(keyword embeddings) + b)`, `c0 = 0`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seq_model::State;
use crate::tensor::{uniform_vec, Matrix};

/// One embedding row per vocabulary id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable<T> {
    pub table: Matrix<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(table: Matrix<T>, trainable: bool) -> Self {
        Self { table, trainable }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn lookup(&self, id: usize) -> Result<&[T]> {
        if id >= self.table.rows() {
            return Err(Error::Invalid(format!(
                "token id {id} outside embedding table of {} rows",
                self.table.rows()
            )));
        }
        Ok(self.table.row(id))
    }

    /// Arithmetic mean of the rows for `ids`; the zero vector when empty.
    pub fn mean(&self, ids: &[usize]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim()];
        if ids.is_empty() {
            return Ok(out);
        }
        for &id in ids {
            for (o, &x) in out.iter_mut().zip(self.lookup(id)?) {
                *o += x;
            }
        }
        let n = T::of(ids.len() as f64);
        for o in &mut out {
            *o /= n;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    /// hidden × feature_dim
    pub w_img: Matrix<T>,
    /// hidden × embed_dim
    pub w_kw: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(hidden: usize, feature_dim: usize, embed_dim: usize) -> Self {
        Self {
            w_img: Matrix::zeros(hidden, feature_dim),
            w_kw: Matrix::zeros(hidden, embed_dim),
            bias: vec![T::zero(); hidden],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_img.cols()
    }

    /// The value inside the `tanh`.
    pub fn pre_activation(&self, feature: &[T], kw_mean: &[T]) -> Result<Vec<T>> {
        if feature.len() != self.w_img.cols() {
            return Err(Error::dim("image feature", self.w_img.cols(), feature.len()));
        }
        if kw_mean.len() != self.w_kw.cols() {
            return Err(Error::dim("keyword embedding", self.w_kw.cols(), kw_mean.len()));
        }
        let mut z = self.bias.clone();
        self.w_img.mul_vec_acc(feature, &mut z);
        self.w_kw.mul_vec_acc(kw_mean, &mut z);
        Ok(z)
    }
}

/// Values kept from [`encode_cached`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache<T> {
    pub feature: Vec<T>,
    pub keywords: Vec<usize>,
    pub kw_mean: Vec<T>,
    pub h0: Vec<T>,
}

pub fn encode<T: Scalar>(
    feature: &[T],
    keywords: &[usize],
    params: &EncoderParams<T>,
    embeddings: &EmbeddingTable<T>,
) -> Result<State<T>> {
    encode_cached(feature, keywords, params, embeddings).map(|(s, _)| s)
}

pub fn encode_cached<T: Scalar>(
    feature: &[T],
    keywords: &[usize],
    params: &EncoderParams<T>,
    embeddings: &EmbeddingTable<T>,
) -> Result<(State<T>, EncoderCache<T>)> {
    let kw_mean = embeddings.mean(keywords)?;
    let h0: Vec<T> = params
        .pre_activation(feature, &kw_mean)?
        .into_iter()
        .map(T::tanh)
        .collect();
    let state = State {
        h: h0.clone(),
        c: vec![T::zero(); h0.len()],
    };
    let cache = EncoderCache {
        feature: feature.to_vec(),
        keywords: keywords.to_vec(),
        kw_mean,
        h0,
    };
    Ok((state, cache))
}

/// Reads a whitespace-separated `token v₁ … v_d` file. In-vocabulary tokens
/// take the file vector; every other row is drawn from `uniform(-0.05, 0.05)`
/// seeded by `seed`. The dimension comes from the first entry.
pub fn load_pretrained_embeddings<T: Scalar>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    seed: u64,
    trainable: bool,
) -> Result<EmbeddingTable<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pretrained_embeddings(&text, path, vocab, seed, trainable)
}

pub fn parse_pretrained_embeddings<T: Scalar>(
    text: &str,
    origin: &Path,
    vocab: &Vocabulary,
    seed: u64,
    trainable: bool,
) -> Result<EmbeddingTable<T>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut dim = None;
    let mut found: Vec<Option<Vec<T>>> = vec![None; vocab.len()];
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>().map(T::of))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| parse_err(lineno, format!("bad component: {e}")))?;
        match dim {
            None if values.is_empty() => {
                return Err(parse_err(lineno, format!("token `{token}` has no components")))
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {d} components, found {}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if vocab.contains(token) {
            let id = vocab.token_to_id(token);
            found[id].get_or_insert(values);
        }
    }
    let dim = dim.ok_or_else(|| parse_err(0, "no embedding entries".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Matrix::zeros(vocab.len(), dim);
    for (id, row) in found.into_iter().enumerate() {
        // Random rows are drawn for every id so a row's value does not depend
        // on which other tokens the file happened to contain.
        let random: Vec<T> = uniform_vec(dim, 0.05, &mut rng);
        table.row_mut(id).copy_from_slice(row.as_deref().unwrap_or(&random));
    }
    Ok(EmbeddingTable::new(table, trainable))
}
