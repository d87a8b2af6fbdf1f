//! Glue between files, features, the trainer and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_kv_lines, TrainConfig};
use crate::data::{
    build_windows, load_interactions, temporal_split, Catalog, FieldSchema, Interaction,
    SampleWindow, Split, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{item_frequencies, long_tail_slice, EvalReport};
use crate::model::{DiscoModel, Features};
use crate::numerics::ParamStore;
use crate::semkb::{KnowledgeBase, MissingKey};
use crate::training::Trainer;

/// Input files of a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub interactions: PathBuf,
    pub items: PathBuf,
    pub kb: PathBuf,
}

const META_INTERACTIONS: &str = "data.interactions";
const META_ITEMS: &str = "data.items";
const META_KB: &str = "data.kb";
const META_CONFIG: &str = "config.";

impl DataPaths {
    pub fn load(&self) -> Result<(Vec<Interaction>, Catalog, KnowledgeBase)> {
        for p in [&self.interactions, &self.items, &self.kb] {
            if !p.exists() {
                return Err(Error::path(
                    p,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        Ok((
            load_interactions(&self.interactions)?,
            Catalog::load(&self.items)?,
            KnowledgeBase::load(&self.kb)?,
        ))
    }
}

/// Split samples plus the featurizer built from the training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub features: Features,
}

impl Prepared {
    pub fn samples(&self, split: &str) -> Result<&[SampleWindow]> {
        match split {
            "train" => Ok(&self.split.train),
            "valid" => Ok(&self.split.valid),
            "test" => Ok(&self.split.test),
            other => Err(Error::config(
                "split",
                format!("`{other}` is not one of train, valid, test"),
            )),
        }
    }
}

pub fn prepare(
    log: &[Interaction],
    catalog: Catalog,
    kb: KnowledgeBase,
    cfg: &TrainConfig,
) -> Result<Prepared> {
    let split = temporal_split(build_windows(log, cfg.k)?)?;
    let fields = (!cfg.item_fields.is_empty()).then_some(cfg.item_fields.as_slice());
    let schema = FieldSchema::from_catalog(&catalog, fields);
    for f in &schema.item {
        if f != crate::data::ITEM_ID && !catalog.columns().contains(f) {
            return Err(Error::UnknownField(f.clone()));
        }
    }
    let vocab = Vocab::build(&split.train, &catalog, &schema)?;
    // Encoders emit unit-norm vectors whose entries shrink with the KB
    // dimension; one global factor brings them to the embedding scale.
    let kb = kb.unit_rms()?;
    let kb = if cfg.kb_zero_fallback {
        kb.with_missing_key(MissingKey::ZeroVector)
    } else {
        kb
    };
    Ok(Prepared {
        split,
        features: Features {
            schema,
            vocab,
            catalog,
            kb,
        },
    })
}

/// Checkpoint metadata recording the configuration and data locations.
pub fn run_metadata(cfg: &TrainConfig, paths: &DataPaths) -> Result<Vec<(String, String)>> {
    let mut meta: Vec<(String, String)> = parse_kv_lines(&cfg.to_kv())?
        .into_iter()
        .map(|(k, v)| (format!("{META_CONFIG}{k}"), v))
        .collect();
    for (k, p) in [
        (META_INTERACTIONS, &paths.interactions),
        (META_ITEMS, &paths.items),
        (META_KB, &paths.kb),
    ] {
        let abs = fs::canonicalize(p).map_err(|e| Error::path(p, e))?;
        meta.push((k.to_string(), abs.to_string_lossy().into_owned()));
    }
    Ok(meta)
}

/// A trained model restored from a checkpoint together with its data.
pub struct Restored {
    pub config: TrainConfig,
    pub paths: DataPaths,
    pub prepared: Prepared,
    pub model: DiscoModel,
    pub store: ParamStore,
}

pub fn restore(ckpt: &Checkpoint) -> Result<Restored> {
    let overrides: Vec<(String, String)> = ckpt
        .metadata
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(META_CONFIG)
                .map(|k| (k.to_string(), v.clone()))
        })
        .collect();
    let config = TrainConfig::resolve(None, &overrides)?;
    let meta = |k: &str| {
        ckpt.meta(k)
            .map(PathBuf::from)
            .ok_or_else(|| Error::format("checkpoint", format!("missing metadata `{k}`")))
    };
    let paths = DataPaths {
        interactions: meta(META_INTERACTIONS)?,
        items: meta(META_ITEMS)?,
        kb: meta(META_KB)?,
    };
    let (log, catalog, kb) = paths.load()?;
    let prepared = prepare(&log, catalog, kb, &config)?;
    let trainer = Trainer::new(&config, &prepared.features)?;
    let (model, mut store) = (trainer.model, trainer.store);
    ckpt.apply_to(&mut store)?;
    Ok(Restored {
        config,
        paths,
        prepared,
        model,
        store,
    })
}

/// AUC and log loss over `samples`, optionally with a `long_tail` slice
/// defined by training-set item frequencies.
pub fn evaluate(
    model: &DiscoModel,
    store: &ParamStore,
    prepared: &Prepared,
    samples: &[SampleWindow],
    long_tail: bool,
) -> Result<EvalReport> {
    let refs: Vec<&SampleWindow> = samples.iter().collect();
    let scores = model.predict(store, &prepared.features, &refs)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.target.label).collect();
    let mut report = EvalReport::compute(&scores, &labels)?;
    if long_tail {
        let freq: BTreeMap<String, usize> =
            item_frequencies(&prepared.split.train, &prepared.features.catalog);
        let idx = long_tail_slice(samples, &freq)?;
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        report
            .slices
            .push(("long_tail".to_string(), EvalReport::compute(&s, &l)?));
    }
    Ok(report)
}

/// Tab-separated pattern vectors: a header naming every slot, then one row
/// of `H_TT, H_SS, H_TS, H_ST, label` per sample.
pub fn patterns_tsv(
    model: &DiscoModel,
    store: &ParamStore,
    features: &Features,
    samples: &[SampleWindow],
) -> Result<String> {
    let refs: Vec<&SampleWindow> = samples.iter().collect();
    let rows = model.pattern_rows(store, features, &refs)?;
    let d = model.d;
    let mut out = String::new();
    let header: Vec<String> = ["h_tt", "h_ss", "h_ts", "h_st"]
        .iter()
        .flat_map(|p| (0..d).map(move |j| format!("{p}_{j}")))
        .chain(std::iter::once("label".to_string()))
        .collect();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for (row, s) in rows.iter().zip(samples) {
        for v in row {
            write!(out, "{v}\t").expect("string write");
        }
        writeln!(out, "{}", s.target.label).expect("string write");
    }
    Ok(out)
}

pub fn export_patterns(
    model: &DiscoModel,
    store: &ParamStore,
    features: &Features,
    samples: &[SampleWindow],
    path: &Path,
) -> Result<()> {
    let text = patterns_tsv(model, store, features, samples)?;
    fs::write(path, text).map_err(|e| Error::path(path, e))
}
