//! Interaction logs, behavior windows, temporal splits, and vocabularies.

mod synth;
mod vocab;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

pub use synth::{bayes_auc_gap, synth_generate, SynthData, SynthOracle, SynthSpec};
pub use vocab::{FieldSchema, Vocab};

use crate::error::{Error, Result};
use crate::semkb::ItemRecord;

/// Items CSV column holding the item key.
pub const ITEM_ID: &str = "item_id";
/// Implicit user feature carried by every sample.
pub const USER_ID: &str = "user_id";
pub const INTERACTIONS_HEADER: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];

/// Positive iff the rating is strictly greater than 3.
pub fn binarize(rating: f64) -> u8 {
    u8::from(rating > 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_key: String,
    pub rating: f64,
    pub timestamp: i64,
    pub label: u8,
}

impl Interaction {
    pub fn new(
        user_id: impl Into<String>,
        item_key: impl Into<String>,
        rating: f64,
        timestamp: i64,
    ) -> Self {
        Interaction {
            user_id: user_id.into(),
            item_key: item_key.into(),
            rating,
            timestamp,
            label: binarize(rating),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub item_key: String,
    pub label: u8,
    pub timestamp: i64,
}

/// A target event with the user's preceding behaviors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub target: Interaction,
    /// Real history entries, oldest first, at most `window` of them.
    pub history: Vec<HistoryEntry>,
    /// Front-padded mask of length `window`; `true` marks a real entry.
    pub history_mask: Vec<bool>,
    pub user_features: Vec<(String, String)>,
    pub context_features: Vec<(String, String)>,
    /// Position of the target event in the source log.
    pub seq: usize,
}

impl SampleWindow {
    pub fn window(&self) -> usize {
        self.history_mask.len()
    }

    /// History padded at the front to `window` slots.
    pub fn padded_history(&self) -> impl Iterator<Item = Option<&HistoryEntry>> {
        let pad = self.window() - self.history.len();
        std::iter::repeat_n(None, pad).chain(self.history.iter().map(Some))
    }
}

/// Builds one sample per event. A user's history is their most recent `k`
/// events with a strictly earlier timestamp; events sharing a timestamp keep
/// log order but never see each other. Output follows log order.
pub fn build_windows(log: &[Interaction], k: usize) -> Result<Vec<SampleWindow>> {
    if k == 0 {
        return Err(Error::config("k", "history window must be at least 1"));
    }
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ev) in log.iter().enumerate() {
        by_user.entry(ev.user_id.as_str()).or_default().push(i);
    }
    let mut out: Vec<Option<SampleWindow>> = vec![None; log.len()];
    for idxs in by_user.values_mut() {
        idxs.sort_by_key(|&i| log[i].timestamp);
        // `start` = first position whose timestamp equals the current event's.
        let mut start = 0;
        for pos in 0..idxs.len() {
            let ev = &log[idxs[pos]];
            if log[idxs[start]].timestamp != ev.timestamp {
                start = pos;
            }
            let from = start.saturating_sub(k);
            let history: Vec<HistoryEntry> = idxs[from..start]
                .iter()
                .map(|&j| HistoryEntry {
                    item_key: log[j].item_key.clone(),
                    label: log[j].label,
                    timestamp: log[j].timestamp,
                })
                .collect();
            let mut history_mask = vec![false; k - history.len()];
            history_mask.resize(k, true);
            out[idxs[pos]] = Some(SampleWindow {
                target: ev.clone(),
                history,
                history_mask,
                user_features: vec![(USER_ID.to_string(), ev.user_id.clone())],
                context_features: Vec::new(),
                seq: idxs[pos],
            });
        }
    }
    Ok(out
        .into_iter()
        .map(|s| s.expect("every event assigned"))
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<SampleWindow>,
    pub valid: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

/// Global temporal 8:1:1 split. Samples are ordered by (timestamp, input
/// position); the first ⌊0.8n⌋ go to train, the next ⌊0.1n⌋ to valid, and
/// the rest to test.
pub fn temporal_split(samples: Vec<SampleWindow>) -> Result<Split> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    let n = samples.len();
    let mut order: Vec<(usize, SampleWindow)> = samples.into_iter().enumerate().collect();
    order.sort_by_key(|(i, s)| (s.target.timestamp, *i));
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let mut it = order.into_iter().map(|(_, s)| s);
    let train = it.by_ref().take(n_train).collect();
    let valid = it.by_ref().take(n_valid).collect();
    let test = it.collect();
    Ok(Split { train, valid, test })
}

/// Items keyed by id, retaining column order for prompts and vocabularies.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    columns: Vec<String>,
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(columns: Vec<String>, items: Vec<ItemRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            it.validate()?;
            if index.insert(it.item_key.clone(), i).is_some() {
                return Err(Error::DuplicateKey(it.item_key.clone()));
            }
        }
        Ok(Catalog {
            columns,
            items,
            index,
        })
    }

    /// Descriptive columns (everything after `item_id`).
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn get(&self, key: &str) -> Option<&ItemRecord> {
        self.position(key).map(|i| &self.items[i])
    }

    /// Value of a tabular item field; `item_id` resolves to the key itself.
    pub fn field_value<'a>(&'a self, item: &'a ItemRecord, field: &str) -> Option<&'a str> {
        if field == ITEM_ID {
            Some(&item.item_key)
        } else {
            item.field(field)
        }
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::format("items csv", e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.first().map(String::as_str) != Some(ITEM_ID) || header.len() < 2 {
            return Err(Error::format(
                "items csv",
                format!(
                    "header must be `item_id,<field>,...`, got `{}`",
                    header.join(",")
                ),
            ));
        }
        let columns = header[1..].to_vec();
        let mut items = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::format("items csv", e.to_string()))?;
            let fields = columns
                .iter()
                .zip(rec.iter().skip(1))
                .map(|(c, v)| (c.clone(), v.to_string()))
                .collect();
            items.push(ItemRecord::new(&rec[0], fields));
        }
        Catalog::new(columns, items)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![ITEM_ID.to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)
            .map_err(|e| Error::format("items csv", e.to_string()))?;
        for it in &self.items {
            let mut row = vec![it.item_key.clone()];
            row.extend(it.fields.iter().map(|(_, v)| v.clone()));
            w.write_record(&row)
                .map_err(|e| Error::format("items csv", e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::format("items csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("items csv", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::parse_csv(&text)
    }
}

pub fn parse_interactions(text: &str) -> Result<Vec<Interaction>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::format("interactions csv", e.to_string()))?
        .clone();
    if header.iter().ne(INTERACTIONS_HEADER) {
        return Err(Error::format(
            "interactions csv",
            format!("expected header `{}`", INTERACTIONS_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format("interactions csv", e.to_string()))?;
        let bad =
            |what: &str| Error::format("interactions csv", format!("row {}: bad {what}", line + 2));
        let rating: f64 = rec[2].trim().parse().map_err(|_| bad("rating"))?;
        if !rating.is_finite() {
            return Err(bad("rating"));
        }
        let timestamp: i64 = rec[3].trim().parse().map_err(|_| bad("timestamp"))?;
        out.push(Interaction::new(&rec[0], &rec[1], rating, timestamp));
    }
    Ok(out)
}

pub fn interactions_to_csv(log: &[Interaction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("interactions csv", e.to_string());
    w.write_record(INTERACTIONS_HEADER).map_err(err)?;
    for ev in log {
        w.write_record([
            ev.user_id.as_str(),
            ev.item_key.as_str(),
            &format!("{}", ev.rating),
            &ev.timestamp.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("interactions csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("interactions csv", e.to_string()))
}

pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    parse_interactions(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(4.0), 1);
        assert_eq!(binarize(3.0), 0);
        assert_eq!(binarize(5.0), 1);
        assert_eq!(binarize(3.5), 1);
    }

    #[test]
    fn window_keeps_most_recent_k() {
        let log: Vec<Interaction> = (0..36)
            .map(|t| Interaction::new("u", format!("i{t}"), 4.0, t))
            .collect();
        let w = build_windows(&log, 30).unwrap();
        let last = &w[35];
        assert_eq!(last.history.len(), 30);
        assert_eq!(last.history[0].item_key, "i5");
        assert_eq!(last.history[29].item_key, "i34");
        assert!(last.history_mask.iter().all(|&m| m));
    }

    #[test]
    fn first_event_has_empty_history() {
        let log = vec![
            Interaction::new("u", "a", 1.0, 5),
            Interaction::new("u", "b", 5.0, 9),
        ];
        let w = build_windows(&log, 3).unwrap();
        assert!(w[0].history.is_empty());
        assert_eq!(w[0].history_mask, vec![false; 3]);
        assert_eq!(w[1].history_mask, vec![false, false, true]);
        assert_eq!(w[1].history[0].label, 0);
    }

    #[test]
    fn duplicate_timestamps_never_leak() {
        let log = vec![
            Interaction::new("u", "a", 4.0, 1),
            Interaction::new("u", "b", 4.0, 2),
            Interaction::new("u", "c", 4.0, 2),
            Interaction::new("u", "d", 4.0, 3),
        ];
        let w = build_windows(&log, 5).unwrap();
        assert_eq!(w[2].history.len(), 1);
        assert_eq!(w[1].history.len(), 1);
        let keys: Vec<&str> = w[3].history.iter().map(|h| h.item_key.as_str()).collect();
        assert_eq!(keys, ["a", "b", "c"]);
    }

    // Independent replay: sort each user's events, slice the suffix of
    // strictly earlier events.
    fn replay(log: &[Interaction], k: usize) -> Vec<Vec<String>> {
        log.iter()
            .map(|ev| {
                let mut prior: Vec<(i64, usize)> = log
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.user_id == ev.user_id && o.timestamp < ev.timestamp)
                    .map(|(j, o)| (o.timestamp, j))
                    .collect();
                prior.sort();
                let start = prior.len().saturating_sub(k);
                prior[start..]
                    .iter()
                    .map(|&(_, j)| log[j].item_key.clone())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn windows_match_brute_force_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let mut log: Vec<Interaction> = (0..200)
                .map(|n| {
                    Interaction::new(
                        format!("u{}", rng.random_range(0..7)),
                        format!("i{n}"),
                        rng.random_range(1..=5) as f64,
                        rng.random_range(0..60),
                    )
                })
                .collect();
            log.shuffle(&mut rng);
            let k = rng.random_range(1..12);
            let w = build_windows(&log, k).unwrap();
            let oracle = replay(&log, k);
            for (s, o) in w.iter().zip(&oracle) {
                let got: Vec<String> = s.history.iter().map(|h| h.item_key.clone()).collect();
                assert_eq!(&got, o);
                assert!(s.history.iter().all(|h| h.timestamp < s.target.timestamp));
                assert_eq!(s.history_mask.len(), k);
            }
        }
    }

    fn samples(ts: &[i64]) -> Vec<SampleWindow> {
        let log: Vec<Interaction> = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| Interaction::new(format!("u{i}"), "x", 4.0, t))
            .collect();
        build_windows(&log, 2).unwrap()
    }

    #[test]
    fn split_ratios() {
        let s = temporal_split(samples(&[9, 3, 1, 0, 8, 2, 7, 5, 4, 6])).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert!(s.train.iter().all(|x| x.target.timestamp < 8));
        assert_eq!(s.valid[0].target.timestamp, 8);
        assert_eq!(s.test[0].target.timestamp, 9);

        let s = temporal_split(samples(&vec![0; 1003])).unwrap();
        assert_eq!(
            (s.train.len(), s.valid.len(), s.test.len()),
            (802, 100, 101)
        );
        // all ties: stable input order
        assert_eq!(s.valid[0].seq, 802);
        assert!(temporal_split(Vec::new()).is_err());
    }

    #[test]
    fn split_boundaries_respect_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ts: Vec<i64> = (0..500).collect();
        ts.shuffle(&mut rng);
        let s = temporal_split(samples(&ts)).unwrap();
        let max_train = s.train.iter().map(|x| x.target.timestamp).max().unwrap();
        let min_valid = s.valid.iter().map(|x| x.target.timestamp).min().unwrap();
        let max_valid = s.valid.iter().map(|x| x.target.timestamp).max().unwrap();
        let min_test = s.test.iter().map(|x| x.target.timestamp).min().unwrap();
        assert!(max_train < min_valid && max_valid < min_test);
    }

    #[test]
    fn csv_round_trip() {
        let text = "item_id,title,genre\n1,\"Heat, the film\",Crime\n2,Alien,Horror\n";
        let cat = Catalog::parse_csv(text).unwrap();
        assert_eq!(cat.columns(), &["title".to_string(), "genre".to_string()]);
        assert_eq!(cat.get("1").unwrap().field("title"), Some("Heat, the film"));
        assert_eq!(
            Catalog::parse_csv(&cat.to_csv().unwrap()).unwrap().items(),
            cat.items()
        );
        assert!(Catalog::parse_csv("id,title\n1,x\n").is_err());
        assert!(matches!(
            Catalog::parse_csv("item_id,t\n1,x\n1,y\n"),
            Err(Error::DuplicateKey(_))
        ));

        let log =
            parse_interactions("user_id,item_id,rating,timestamp\nu1,1,4,100\nu1,2,2.5,101\n")
                .unwrap();
        assert_eq!(log[0].label, 1);
        assert_eq!(log[1].label, 0);
        assert_eq!(
            parse_interactions(&interactions_to_csv(&log).unwrap()).unwrap(),
            log
        );
        assert!(parse_interactions("user,item,rating,ts\n").is_err());
        assert!(parse_interactions("user_id,item_id,rating,timestamp\nu,1,x,3\n").is_err());
    }
}
