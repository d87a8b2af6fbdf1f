//! Batch featurization and the composed model: encoders, dual-side
//! attention, constraint heads and the backbone.

use std::collections::HashMap;

use rand::Rng;

use crate::backbones::{Backbone, BackboneParts};
use crate::config::TrainConfig;
use crate::constraints::{BilinearDiscriminator, VclubEstimator};
use crate::data::{Catalog, FieldSchema, SampleWindow, Vocab};
use crate::dsattn::{DsAttn, PatternSource, PatternVectors};
use crate::encoders::{chunk_var, LabelEmbedder, SemanticReducer, TabularEmbedder};
use crate::error::{Error, Result};
use crate::numerics::nn::Access;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::semkb::KnowledgeBase;

/// Everything needed to turn samples into index/tensor batches.
#[derive(Debug, Clone)]
pub struct Features {
    pub schema: FieldSchema,
    pub vocab: Vocab,
    pub catalog: Catalog,
    pub kb: KnowledgeBase,
}

/// A featurized batch. Distinct items (candidates and history) are listed
/// once; samples refer to them by row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    /// History slots per sample (the longest history in the batch, ≥ 1).
    pub slots: usize,
    pub items: Vec<String>,
    pub item_fields: Vec<Vec<usize>>,
    pub kb_rows: Tensor,
    pub user_fields: Vec<Vec<usize>>,
    pub context_fields: Vec<Vec<usize>>,
    pub candidates: Vec<usize>,
    /// `n·slots` entries, front-padded per sample.
    pub history: Vec<Option<usize>>,
    pub history_labels: Vec<Option<u8>>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn mask(&self) -> Vec<bool> {
        self.history.iter().map(Option::is_some).collect()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| f64::from(y)).collect()
    }
}

fn feature_indices(vocab: &Vocab, fields: &[String], feats: &[(String, String)]) -> Vec<usize> {
    fields
        .iter()
        .map(|f| {
            feats
                .iter()
                .find(|(n, _)| n == f)
                .map_or(0, |(_, v)| vocab.index(f, v))
        })
        .collect()
}

impl Features {
    pub fn batch<'s>(&self, samples: &[&'s SampleWindow]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let n = samples.len();
        let slots = samples
            .iter()
            .map(|s| s.history.len())
            .max()
            .unwrap_or(0)
            .max(1);
        let mut items: Vec<String> = Vec::new();
        let mut row: HashMap<&'s str, usize> = HashMap::new();
        let mut intern = |key: &'s str| -> usize {
            *row.entry(key).or_insert_with(|| {
                items.push(key.to_string());
                items.len() - 1
            })
        };
        let mut candidates = Vec::with_capacity(n);
        let mut history = Vec::with_capacity(n * slots);
        let mut history_labels = Vec::with_capacity(n * slots);
        for s in samples {
            candidates.push(intern(&s.target.item_key));
            let pad = slots - s.history.len();
            history.extend(std::iter::repeat_n(None, pad));
            history_labels.extend(std::iter::repeat_n(None, pad));
            for h in &s.history {
                history.push(Some(intern(&h.item_key)));
                history_labels.push(Some(h.label));
            }
        }

        let mut item_fields = Vec::with_capacity(items.len());
        let mut kb_data = Vec::with_capacity(items.len() * self.kb.dim());
        for key in &items {
            let rec = self
                .catalog
                .get(key)
                .ok_or_else(|| Error::UnknownItem(key.clone()))?;
            item_fields.push(
                self.schema
                    .item
                    .iter()
                    .map(|f| {
                        self.catalog
                            .field_value(rec, f)
                            .map_or(0, |v| self.vocab.index(f, v))
                    })
                    .collect(),
            );
            kb_data.extend_from_slice(self.kb.lookup(key)?);
        }
        let kb_rows = Tensor::matrix(items.len(), self.kb.dim(), kb_data)?;
        Ok(Batch {
            n,
            slots,
            item_fields,
            kb_rows,
            user_fields: samples
                .iter()
                .map(|s| feature_indices(&self.vocab, &self.schema.user, &s.user_features))
                .collect(),
            context_fields: samples
                .iter()
                .map(|s| feature_indices(&self.vocab, &self.schema.context, &s.context_features))
                .collect(),
            candidates,
            history,
            history_labels,
            labels: samples.iter().map(|s| s.target.label).collect(),
            items,
        })
    }
}

/// Variables of one forward pass that later stages need.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub prob: Var,
    pub patterns: Option<PatternVectors>,
    /// Candidate intra chunks `h^TI`, `h^SI` (`n×d/2`), present with patterns.
    pub h_ti: Option<Var>,
    pub h_si: Option<Var>,
}

/// The full model's parameter layout. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DiscoModel {
    pub d: usize,
    pub config: TrainConfig,
    pub user_emb: TabularEmbedder,
    pub item_emb: TabularEmbedder,
    pub context_emb: Option<TabularEmbedder>,
    pub reducer: SemanticReducer,
    pub label_emb: LabelEmbedder,
    pub dsattn: DsAttn,
    pub backbone: Backbone,
    pub disc_t: BilinearDiscriminator,
    pub disc_s: BilinearDiscriminator,
    pub vclub1: VclubEstimator,
    pub vclub2: VclubEstimator,
}

impl DiscoModel {
    /// Registers every parameter in a fixed order, independent of which
    /// parts a run actually trains, so initial values depend only on the seed.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &TrainConfig,
        features: &Features,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let schema = &features.schema;
        let user_emb = TabularEmbedder::new(store, "user", &features.vocab, &schema.user, d, rng)?;
        let item_emb = TabularEmbedder::new(store, "item", &features.vocab, &schema.item, d, rng)?;
        let context_emb = if schema.context.is_empty() {
            None
        } else {
            Some(TabularEmbedder::new(
                store,
                "context",
                &features.vocab,
                &schema.context,
                d,
                rng,
            )?)
        };
        let reducer =
            SemanticReducer::new(store, features.kb.dim(), &config.reducer_hidden, d, rng);
        let label_emb = LabelEmbedder::new(store, d, rng);
        let dsattn = DsAttn::new(store, d, rng)?;
        let backbone = Backbone::new(
            store,
            config.backbone,
            d,
            context_emb.is_some(),
            &config.mlp_hidden,
            config.attention_hidden,
            rng,
        );
        let disc_t = BilinearDiscriminator::new(store, "suf_disc_t", d);
        let disc_s = BilinearDiscriminator::new(store, "suf_disc_s", d);
        let vclub1 = VclubEstimator::new(store, "vclub1", d, config.estimator_hidden, rng);
        let vclub2 = VclubEstimator::new(store, "vclub2", d, config.estimator_hidden, rng);
        Ok(DiscoModel {
            d,
            config: config.clone(),
            user_emb,
            item_emb,
            context_emb,
            reducer,
            label_emb,
            dsattn,
            backbone,
            disc_t,
            disc_s,
            vclub1,
            vclub2,
        })
    }

    /// Parameters updated by the main optimizer for this configuration.
    pub fn main_params(&self) -> Vec<ParamId> {
        let c = &self.config;
        let mut p = self.user_emb.params();
        p.extend(self.item_emb.params());
        if let Some(ctx) = &self.context_emb {
            p.extend(ctx.params());
        }
        if c.uses_patterns() {
            p.extend(self.reducer.params());
            p.push(self.label_emb.table);
            p.extend(self.dsattn.params());
        }
        p.extend(self.backbone.params());
        if c.uses_sufficiency() {
            p.extend(self.disc_t.params());
            p.extend(self.disc_s.params());
        }
        p
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        access: Access,
    ) -> Result<ForwardOut> {
        let h_t = self.item_emb.embed(g, store, &batch.item_fields, access)?;
        let user = self.user_emb.embed(g, store, &batch.user_fields, access)?;
        let context = match &self.context_emb {
            Some(c) => Some(c.embed(g, store, &batch.context_fields, access)?),
            None => None,
        };
        let cand: Vec<Option<usize>> = batch.candidates.iter().map(|&c| Some(c)).collect();
        let item = g.gather_rows(h_t, &cand)?;
        let history = g.gather_rows(h_t, &batch.history)?;

        let (mut patterns, mut h_ti, mut h_si) = (None, None, None);
        if self.config.uses_patterns() {
            let kb = g.constant(batch.kb_rows.clone())?;
            let h_s = self.reducer.forward(g, store, kb, access)?;
            let (si, sc) = chunk_var(g, h_s)?;
            let (ti, tc) = chunk_var(g, h_t)?;
            let labels = self
                .label_emb
                .embed(g, store, &batch.history_labels, access)?;
            let src = PatternSource {
                si,
                sc,
                ti,
                tc,
                candidates: batch.candidates.clone(),
                history: batch.history.clone(),
                labels,
            };
            patterns = Some(self.dsattn.forward(g, store, &src, access)?);
            h_ti = Some(g.gather_rows(ti, &cand)?);
            h_si = Some(g.gather_rows(si, &cand)?);
        }
        let pattern_vars = match &patterns {
            Some(pv) => {
                let pv: PatternVectors = *pv;
                [
                    Some(pv.tt.pattern(g)?),
                    Some(pv.ss.pattern(g)?),
                    Some(pv.ts.pattern(g)?),
                    Some(pv.st.pattern(g)?),
                ]
            }
            None => [None; 4],
        };
        let parts = BackboneParts {
            user,
            item,
            context,
            history,
            mask: batch.mask(),
            patterns: pattern_vars,
        };
        let prob = self
            .backbone
            .forward(g, store, &parts, self.config.patterns, access)?;
        Ok(ForwardOut {
            prob,
            patterns,
            h_ti,
            h_si,
        })
    }

    /// Click probabilities for `samples`, evaluated in chunks over frozen parameters.
    pub fn predict(
        &self,
        store: &ParamStore,
        features: &Features,
        samples: &[&SampleWindow],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.eval_batch_size) {
            let batch = features.batch(chunk)?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, store, &batch, Access::Frozen)?;
            out.extend_from_slice(g.value(f.prob).data());
        }
        Ok(out)
    }

    /// Rows of `[H_TT | H_SS | H_TS | H_ST]` (`n×4d`) for `samples`.
    pub fn pattern_rows(
        &self,
        store: &ParamStore,
        features: &Features,
        samples: &[&SampleWindow],
    ) -> Result<Vec<Vec<f64>>> {
        let mut cfg_model = self.clone();
        // Pattern export needs the attention path even for backbone-only runs.
        cfg_model.config.patterns = crate::config::PatternFlags::ALL;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.eval_batch_size) {
            let batch = features.batch(chunk)?;
            let mut g = Graph::new();
            let f = cfg_model.forward(&mut g, store, &batch, Access::Frozen)?;
            let pv = f.patterns.expect("patterns enabled");
            let h = g.concat_cols(&[pv.tt.h, pv.ss.h, pv.ts.h, pv.st.h])?;
            let t = g.value(h);
            out.extend((0..t.rows()).map(|r| t.row_slice(r).to_vec()));
        }
        Ok(out)
    }
}
