//! Tabular, semantic and label encoders plus the intra/inter chunk split.

use rand::Rng;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::numerics::nn::{read, Access, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Half-width of the uniform range used to initialize embedding tables.
const EMBED_INIT: f64 = 0.3;

fn uniform_table<R: Rng>(rows: usize, d: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * d)
        .map(|_| rng.random_range(-EMBED_INIT..EMBED_INIT))
        .collect();
    Tensor::matrix(rows, d, data).expect("sized by construction")
}

/// One embedding table per categorical field; a row is the mean of its
/// fields' embeddings. Row 0 of every table is the OOV/padding row.
#[derive(Debug, Clone)]
pub struct TabularEmbedder {
    d: usize,
    fields: Vec<(String, ParamId)>,
}

impl TabularEmbedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: &Vocab,
        fields: &[String],
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::EmptyFields(prefix.to_string()));
        }
        let fields = fields
            .iter()
            .map(|f| {
                let rows = vocab.table_size(f)?;
                Ok((
                    f.clone(),
                    store.add(format!("{prefix}.{f}"), uniform_table(rows, d, rng)),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(TabularEmbedder { d, fields })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(f, _)| f.as_str())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.fields.iter().map(|&(_, id)| id).collect()
    }

    /// `indices[r][f]` is the vocabulary index of field `f` for row `r`.
    /// Returns an `n×d` matrix of per-row field means.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        indices: &[Vec<usize>],
        access: Access,
    ) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("embedding rows"));
        }
        if let Some(bad) = indices.iter().find(|r| r.len() != self.fields.len()) {
            return Err(Error::DimMismatch {
                expected: self.fields.len(),
                actual: bad.len(),
            });
        }
        let mut acc: Option<Var> = None;
        for (f, &(_, id)) in self.fields.iter().enumerate() {
            let table = read(g, store, id, access)?;
            let idx: Vec<Option<usize>> = indices.iter().map(|r| Some(r[f])).collect();
            let rows = g.gather_rows(table, &idx)?;
            acc = Some(match acc {
                None => rows,
                Some(a) => g.add(a, rows)?,
            });
        }
        let sum = acc.expect("at least one field");
        g.scale(sum, 1.0 / self.fields.len() as f64)
    }
}

/// MLP from the knowledge-base dimension down to `d`.
#[derive(Debug, Clone)]
pub struct SemanticReducer {
    mlp: Mlp,
}

impl SemanticReducer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        kb_dim: usize,
        hidden: &[usize],
        d: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![kb_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        SemanticReducer {
            mlp: Mlp::new(store, "reducer", &sizes, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        kb_rows: Var,
        access: Access,
    ) -> Result<Var> {
        self.mlp.forward(g, store, kb_rows, access)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// `2×d` label table; masked history slots map to a zero row.
#[derive(Debug, Clone, Copy)]
pub struct LabelEmbedder {
    pub table: ParamId,
}

impl LabelEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        LabelEmbedder {
            table: store.add("label_emb", uniform_table(2, d, rng)),
        }
    }

    /// One row per entry: `Some(y)` looks up label `y`, `None` is a zero row.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        labels: &[Option<u8>],
        access: Access,
    ) -> Result<Var> {
        let idx = labels
            .iter()
            .map(|l| match l {
                None => Ok(None),
                Some(y @ (0 | 1)) => Ok(Some(usize::from(*y))),
                Some(y) => Err(Error::InvalidLabel(f64::from(*y))),
            })
            .collect::<Result<Vec<_>>>()?;
        let table = read(g, store, self.table, access)?;
        g.gather_rows(table, &idx)
    }

    /// `K×d` label matrix of a history: table rows for real entries, zero
    /// rows where `mask` is false.
    pub fn embed_history(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        labels: &[u8],
        mask: &[bool],
        access: Access,
    ) -> Result<Var> {
        if labels.len() != mask.len() {
            return Err(Error::DimMismatch {
                expected: mask.len(),
                actual: labels.len(),
            });
        }
        let l: Vec<Option<u8>> = labels
            .iter()
            .zip(mask)
            .map(|(&y, &m)| m.then_some(y))
            .collect();
        self.embed(g, store, &l, access)
    }
}

/// Intra (`·I`) and inter (`·C`) halves of an item's two embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedItem {
    pub h_si: Vec<f64>,
    pub h_sc: Vec<f64>,
    pub h_ti: Vec<f64>,
    pub h_tc: Vec<f64>,
}

pub fn chunk_item(h_s: &[f64], h_t: &[f64]) -> Result<ChunkedItem> {
    let d = h_s.len();
    if h_t.len() != d {
        return Err(Error::DimMismatch {
            expected: d,
            actual: h_t.len(),
        });
    }
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config("d", "d must be even"));
    }
    let (si, sc) = h_s.split_at(d / 2);
    let (ti, tc) = h_t.split_at(d / 2);
    Ok(ChunkedItem {
        h_si: si.to_vec(),
        h_sc: sc.to_vec(),
        h_ti: ti.to_vec(),
        h_tc: tc.to_vec(),
    })
}

/// Graph form of the split: `(first half, second half)` of each row.
pub fn chunk_var(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let d = g.value(x).cols();
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config("d", "d must be even"));
    }
    Ok((g.slice_cols(x, 0, d / 2)?, g.slice_cols(x, d / 2, d)?))
}
