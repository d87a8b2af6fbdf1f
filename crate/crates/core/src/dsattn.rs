//! Dual-side attention: four single-head blocks over chunked item
//! embeddings, yielding the intra-domain patterns (TT, SS) and the
//! inter-domain patterns (ST, TS).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{read, Access};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// `W_Q`, `W_K`, `W_V`, each `(d/2)×d`.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d: usize,
}

impl AttnParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let mut w =
            |s: &str| store.add(format!("{name}.{s}"), Tensor::xavier_uniform(d / 2, d, rng));
        let (w_q, w_k, w_v) = (w("w_q"), w("w_k"), w("w_v"));
        AttnParams { w_q, w_k, w_v, d }
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w_q, self.w_k, self.w_v]
    }
}

/// Result of one block: pooled values `h` (`n×d`), pooled labels `l`
/// (`n×d`) and attention weights (`n×g`).
#[derive(Debug, Clone, Copy)]
pub struct AttnOutput {
    pub h: Var,
    pub l: Var,
    pub weights: Var,
}

impl AttnOutput {
    /// The pattern vector `[H, L′]`, `n×2d`.
    pub fn pattern(&self, g: &mut Graph) -> Result<Var> {
        g.concat_cols(&[self.h, self.l])
    }
}

/// Attention over already projected queries `qp` (`n×d`), keys and values
/// (`n·g × d`), with label rows (`n·g × d`). `mask` has `n·g` entries.
fn attend(
    g: &mut Graph,
    qp: Var,
    kp: Var,
    vp: Var,
    labels: Var,
    mask: &[bool],
) -> Result<AttnOutput> {
    let scores = g.group_dot(qp, kp)?;
    let weights = g.masked_softmax(scores, mask)?;
    let h = g.group_weighted_sum(weights, vp)?;
    let l = g.group_weighted_sum(weights, labels)?;
    Ok(AttnOutput { h, l, weights })
}

fn check_cols(g: &Graph, v: Var, cols: usize, what: &str) -> Result<()> {
    let c = g.value(v).cols();
    if c != cols {
        return Err(Error::shape(
            "attn_block",
            format!("{what} has {c} columns, expected {cols}"),
        ));
    }
    Ok(())
}

/// One attention block for `n` queries, each over its own group of `g`
/// keys: `q` is `n×(d/2)`, `keys`/`values` are `(n·g)×(d/2)`, `labels` is
/// `(n·g)×d`. Masked keys get weight 0; a query with no live key yields
/// zero outputs.
#[allow(clippy::too_many_arguments)]
pub fn attn_block(
    g: &mut Graph,
    store: &ParamStore,
    params: &AttnParams,
    q: Var,
    keys: Var,
    values: Var,
    labels: Var,
    mask: &[bool],
    access: Access,
) -> Result<AttnOutput> {
    let d = params.d;
    for (v, what) in [(q, "query"), (keys, "keys"), (values, "values")] {
        check_cols(g, v, d / 2, what)?;
    }
    check_cols(g, labels, d, "labels")?;
    let nk = g.value(keys).rows();
    if g.value(values).rows() != nk || g.value(labels).rows() != nk || mask.len() != nk {
        return Err(Error::shape(
            "attn_block",
            "keys, values, labels and mask must align",
        ));
    }
    let wq = read(g, store, params.w_q, access)?;
    let wk = read(g, store, params.w_k, access)?;
    let wv = read(g, store, params.w_v, access)?;
    let qp = g.matmul(q, wq)?;
    let kp = g.matmul(keys, wk)?;
    let vp = g.matmul(values, wv)?;
    attend(g, qp, kp, vp, labels, mask)
}

/// Chunk tables of the distinct items in a batch and how samples index them.
#[derive(Debug, Clone)]
pub struct PatternSource {
    /// `U×(d/2)` chunk tables: semantic intra/inter, tabular intra/inter.
    pub si: Var,
    pub sc: Var,
    pub ti: Var,
    pub tc: Var,
    /// Row of each sample's candidate item.
    pub candidates: Vec<usize>,
    /// `n·g` history slots (row-major per sample); `None` is padding.
    pub history: Vec<Option<usize>>,
    /// `(n·g)×d` history label embeddings, zero rows at padding.
    pub labels: Var,
}

impl PatternSource {
    pub fn mask(&self) -> Vec<bool> {
        self.history.iter().map(Option::is_some).collect()
    }
}

/// All four blocks' outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct PatternVectors {
    pub tt: AttnOutput,
    pub ss: AttnOutput,
    pub ts: AttnOutput,
    pub st: AttnOutput,
}

#[derive(Debug, Clone, Copy)]
pub struct DsAttn {
    pub ss: AttnParams,
    pub tt: AttnParams,
    pub st: AttnParams,
    pub ts: AttnParams,
}

impl DsAttn {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::config("d", "d must be even"));
        }
        Ok(DsAttn {
            ss: AttnParams::new(store, "attn_ss", d, rng),
            tt: AttnParams::new(store, "attn_tt", d, rng),
            st: AttnParams::new(store, "attn_st", d, rng),
            ts: AttnParams::new(store, "attn_ts", d, rng),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.ss, self.tt, self.st, self.ts]
            .iter()
            .flat_map(|p| p.params())
            .collect()
    }

    /// Runs one block with queries from `q_table` and keys/values from
    /// `kv_table`. Projections are computed once per distinct item and then
    /// gathered, which is row-for-row identical to projecting gathered rows.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        params: &AttnParams,
        q_table: Var,
        kv_table: Var,
        src: &PatternSource,
        mask: &[bool],
        access: Access,
    ) -> Result<AttnOutput> {
        let d = params.d;
        check_cols(g, q_table, d / 2, "query table")?;
        check_cols(g, kv_table, d / 2, "key table")?;
        check_cols(g, src.labels, d, "labels")?;
        let n = src.candidates.len();
        if n == 0
            || !src.history.len().is_multiple_of(n)
            || g.value(src.labels).rows() != src.history.len()
        {
            return Err(Error::shape(
                "attn_block",
                "history slots must be a multiple of the candidates",
            ));
        }
        let wq = read(g, store, params.w_q, access)?;
        let wk = read(g, store, params.w_k, access)?;
        let wv = read(g, store, params.w_v, access)?;
        let q_all = g.matmul(q_table, wq)?;
        let k_all = g.matmul(kv_table, wk)?;
        let v_all = g.matmul(kv_table, wv)?;
        let cand: Vec<Option<usize>> = src.candidates.iter().map(|&c| Some(c)).collect();
        let qp = g.gather_rows(q_all, &cand)?;
        let kp = g.gather_rows(k_all, &src.history)?;
        let vp = g.gather_rows(v_all, &src.history)?;
        attend(g, qp, kp, vp, src.labels, mask)
    }

    /// `(P_SS, P_TT)`: each domain's candidate intra chunk over the history's
    /// intra chunks of the same domain.
    pub fn intra_patterns(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: &PatternSource,
        access: Access,
    ) -> Result<(AttnOutput, AttnOutput)> {
        let mask = src.mask();
        let ss = self.block(g, store, &self.ss, src.si, src.si, src, &mask, access)?;
        let tt = self.block(g, store, &self.tt, src.ti, src.ti, src, &mask, access)?;
        Ok((ss, tt))
    }

    /// `(P_ST, P_TS)`: semantic queries over tabular keys and vice versa,
    /// using the inter chunks.
    pub fn inter_patterns(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: &PatternSource,
        access: Access,
    ) -> Result<(AttnOutput, AttnOutput)> {
        let mask = src.mask();
        let st = self.block(g, store, &self.st, src.sc, src.tc, src, &mask, access)?;
        let ts = self.block(g, store, &self.ts, src.tc, src.sc, src, &mask, access)?;
        Ok((st, ts))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: &PatternSource,
        access: Access,
    ) -> Result<PatternVectors> {
        let (ss, tt) = self.intra_patterns(g, store, src, access)?;
        let (st, ts) = self.inter_patterns(g, store, src, access)?;
        Ok(PatternVectors { tt, ss, ts, st })
    }
}
