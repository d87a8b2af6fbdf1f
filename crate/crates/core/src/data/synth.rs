//! Synthetic click logs with a closed-form click probability.
//!
//! Each item has a category (latent factor A, visible as a tabular field) and
//! a topic (latent factor B, visible only through description tokens). Each
//! user prefers one category and one topic. A click on `(u, i)` is drawn
//! from `σ(w_a·[A_i = a_u] + w_b·[B_i = b_u] + bias)`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{interactions_to_csv, Catalog, Interaction};
use crate::config::{parse_kv_lines, parse_value};
use crate::error::{Error, Result};
use crate::semkb::ItemRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_topics: usize,
    pub w_a: f64,
    pub w_b: f64,
    pub bias: f64,
    pub min_events: usize,
    pub max_events: usize,
    /// Probability that an exposure is drawn from the user's preferred topic.
    pub topic_exposure: f64,
    /// Probability that an exposure is drawn from the user's preferred category.
    pub category_exposure: f64,
    /// Zipf exponent of the popularity distribution for the remaining exposures.
    pub popularity_exponent: f64,
    pub topic_tokens: usize,
    pub filler_tokens: usize,
    pub topic_vocab: usize,
    pub filler_vocab: usize,
    pub time_span: i64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 2000,
            n_items: 500,
            n_categories: 2,
            n_topics: 2,
            w_a: 2.0,
            w_b: 2.0,
            bias: -2.0,
            min_events: 20,
            max_events: 40,
            topic_exposure: 0.0,
            category_exposure: 0.0,
            popularity_exponent: 0.7,
            topic_tokens: 6,
            filler_tokens: 3,
            topic_vocab: 4,
            filler_vocab: 40,
            time_span: 1_000_000,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("n_topics", self.n_topics),
            ("topic_tokens", self.topic_tokens),
            ("topic_vocab", self.topic_vocab),
            ("filler_vocab", self.filler_vocab),
            ("min_events", self.min_events),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.max_events < self.min_events {
            return Err(Error::config("max_events", "must be at least min_events"));
        }
        if self.w_a == 0.0 && self.w_b == 0.0 {
            return Err(Error::config(
                "w_a",
                "w_a and w_b are both zero; clicks carry no signal",
            ));
        }
        for (k, v) in [("w_a", self.w_a), ("w_b", self.w_b), ("bias", self.bias)] {
            if !v.is_finite() {
                return Err(Error::config(k, "must be finite"));
            }
        }
        let exposure = self.topic_exposure + self.category_exposure;
        if self.topic_exposure < 0.0 || self.category_exposure < 0.0 || exposure > 1.0 {
            return Err(Error::config(
                "topic_exposure",
                "exposure probabilities must be in [0,1] and sum to ≤ 1",
            ));
        }
        if self.time_span <= 0 {
            return Err(Error::config("time_span", "must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = SynthSpec::default();
        for (k, v) in parse_kv_lines(text)? {
            match k.as_str() {
                "n_users" => s.n_users = parse_value(&k, &v)?,
                "n_items" => s.n_items = parse_value(&k, &v)?,
                "n_categories" => s.n_categories = parse_value(&k, &v)?,
                "n_topics" => s.n_topics = parse_value(&k, &v)?,
                "w_a" => s.w_a = parse_value(&k, &v)?,
                "w_b" => s.w_b = parse_value(&k, &v)?,
                "bias" => s.bias = parse_value(&k, &v)?,
                "min_events" => s.min_events = parse_value(&k, &v)?,
                "max_events" => s.max_events = parse_value(&k, &v)?,
                "topic_exposure" => s.topic_exposure = parse_value(&k, &v)?,
                "category_exposure" => s.category_exposure = parse_value(&k, &v)?,
                "popularity_exponent" => s.popularity_exponent = parse_value(&k, &v)?,
                "topic_tokens" => s.topic_tokens = parse_value(&k, &v)?,
                "filler_tokens" => s.filler_tokens = parse_value(&k, &v)?,
                "topic_vocab" => s.topic_vocab = parse_value(&k, &v)?,
                "filler_vocab" => s.filler_vocab = parse_value(&k, &v)?,
                "time_span" => s.time_span = parse_value(&k, &v)?,
                "seed" => s.seed = parse_value(&k, &v)?,
                _ => return Err(Error::UnknownConfigKey(k)),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "n_users={}\nn_items={}\nn_categories={}\nn_topics={}\nw_a={}\nw_b={}\nbias={}\n\
             min_events={}\nmax_events={}\ntopic_exposure={}\ncategory_exposure={}\n\
             popularity_exponent={}\ntopic_tokens={}\nfiller_tokens={}\ntopic_vocab={}\n\
             filler_vocab={}\ntime_span={}\nseed={}\n",
            self.n_users,
            self.n_items,
            self.n_categories,
            self.n_topics,
            self.w_a,
            self.w_b,
            self.bias,
            self.min_events,
            self.max_events,
            self.topic_exposure,
            self.category_exposure,
            self.popularity_exponent,
            self.topic_tokens,
            self.filler_tokens,
            self.topic_vocab,
            self.filler_vocab,
            self.time_span,
            self.seed
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ground-truth click model of a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthOracle {
    w_a: f64,
    w_b: f64,
    bias: f64,
    n_topics: usize,
    user_pref: HashMap<String, (usize, usize)>,
    item_latent: HashMap<String, (usize, usize)>,
}

impl SynthOracle {
    fn factors(&self, user: &str, item: &str) -> Result<(bool, bool)> {
        let &(ua, ub) = self
            .user_pref
            .get(user)
            .ok_or_else(|| Error::format("oracle", format!("unknown user `{user}`")))?;
        let &(ia, ib) = self
            .item_latent
            .get(item)
            .ok_or_else(|| Error::UnknownItem(item.to_string()))?;
        Ok((ua == ia, ub == ib))
    }

    /// Exact click probability of `(user, item)`.
    pub fn prob(&self, user: &str, item: &str) -> Result<f64> {
        let (a, b) = self.factors(user, item)?;
        Ok(sigmoid(
            self.w_a * f64::from(u8::from(a)) + self.w_b * f64::from(u8::from(b)) + self.bias,
        ))
    }

    /// Click probability knowing only the category match; the topic match
    /// is marginalized under its prior `1/n_topics`.
    pub fn tabular_prob(&self, user: &str, item: &str) -> Result<f64> {
        let (a, _) = self.factors(user, item)?;
        let base = self.w_a * f64::from(u8::from(a)) + self.bias;
        let prior = 1.0 / self.n_topics as f64;
        Ok(prior * sigmoid(base + self.w_b) + (1.0 - prior) * sigmoid(base))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_pref.keys().map(String::as_str)
    }
}

pub struct SynthData {
    pub spec: SynthSpec,
    pub catalog: Catalog,
    pub log: Vec<Interaction>,
    pub oracle: SynthOracle,
}

pub fn user_key(u: usize) -> String {
    format!("u{u}")
}

pub fn item_key(i: usize) -> String {
    format!("i{i}")
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let item_latent: Vec<(usize, usize)> = (0..spec.n_items)
        .map(|_| {
            (
                rng.random_range(0..spec.n_categories),
                rng.random_range(0..spec.n_topics),
            )
        })
        .collect();
    let mut by_category = vec![Vec::new(); spec.n_categories];
    let mut by_topic = vec![Vec::new(); spec.n_topics];
    for (i, &(a, b)) in item_latent.iter().enumerate() {
        by_category[a].push(i);
        by_topic[b].push(i);
    }

    let items: Vec<ItemRecord> = item_latent
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let mut tokens: Vec<String> = (0..spec.topic_tokens)
                .map(|_| format!("t{b}w{}", rng.random_range(0..spec.topic_vocab)))
                .collect();
            tokens.extend(
                (0..spec.filler_tokens)
                    .map(|_| format!("f{}", rng.random_range(0..spec.filler_vocab))),
            );
            ItemRecord::new(
                item_key(i),
                vec![
                    ("category".to_string(), format!("c{a}")),
                    ("description".to_string(), tokens.join(" ")),
                ],
            )
        })
        .collect();
    let catalog = Catalog::new(vec!["category".into(), "description".into()], items)?;

    let user_pref: Vec<(usize, usize)> = (0..spec.n_users)
        .map(|_| {
            (
                rng.random_range(0..spec.n_categories),
                rng.random_range(0..spec.n_topics),
            )
        })
        .collect();

    let popularity = WeightedIndex::new(
        (0..spec.n_items).map(|i| ((i + 1) as f64).powf(-spec.popularity_exponent)),
    )
    .map_err(|e| Error::config("popularity_exponent", e.to_string()))?;

    let oracle = SynthOracle {
        w_a: spec.w_a,
        w_b: spec.w_b,
        bias: spec.bias,
        n_topics: spec.n_topics,
        user_pref: user_pref
            .iter()
            .enumerate()
            .map(|(u, &p)| (user_key(u), p))
            .collect(),
        item_latent: item_latent
            .iter()
            .enumerate()
            .map(|(i, &l)| (item_key(i), l))
            .collect(),
    };

    let mut log = Vec::new();
    for (u, &(ua, ub)) in user_pref.iter().enumerate() {
        let n = rng.random_range(spec.min_events..=spec.max_events);
        let mut times: Vec<i64> = (0..n)
            .map(|_| rng.random_range(0..spec.time_span))
            .collect();
        times.sort_unstable();
        for t in times {
            let r: f64 = rng.random();
            let pool = if r < spec.topic_exposure {
                by_topic[ub].as_slice()
            } else if r < spec.topic_exposure + spec.category_exposure {
                by_category[ua].as_slice()
            } else {
                &[]
            };
            let i = match pool.choose(&mut rng) {
                Some(&i) => i,
                None => popularity.sample(&mut rng),
            };
            let p = oracle.prob(&user_key(u), &item_key(i))?;
            let clicked = rng.random::<f64>() < p;
            let rating = if clicked {
                rng.random_range(4..=5)
            } else {
                rng.random_range(1..=3)
            };
            log.push(Interaction::new(user_key(u), item_key(i), rating as f64, t));
        }
    }

    Ok(SynthData {
        spec: spec.clone(),
        catalog,
        log,
        oracle,
    })
}

impl SynthData {
    /// Writes `interactions.csv`, `items.csv`, and `pair_probs.tsv` (one row
    /// per distinct logged pair, first-occurrence order).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::path(&p, e))
        };
        write("interactions.csv", interactions_to_csv(&self.log)?)?;
        write("items.csv", self.catalog.to_csv()?)?;
        let mut seen = HashSet::new();
        let mut probs = String::from("user_id\titem_id\ttrue_prob\n");
        for ev in &self.log {
            if seen.insert((ev.user_id.as_str(), ev.item_key.as_str())) {
                let p = self.oracle.prob(&ev.user_id, &ev.item_key)?;
                writeln!(probs, "{}\t{}\t{p:?}", ev.user_id, ev.item_key).expect("string write");
            }
        }
        write("pair_probs.tsv", probs)?;
        write("spec.cfg", self.spec.to_kv())
    }
}

/// Monte-Carlo AUCs of the full and tabular-only oracles over `n` uniformly
/// drawn `(user, item)` pairs with Bernoulli labels.
pub fn bayes_auc_gap(data: &SynthData, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut full, mut tab, mut labels) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let u = user_key(rng.random_range(0..data.spec.n_users));
        let i = item_key(rng.random_range(0..data.spec.n_items));
        let p = data.oracle.prob(&u, &i)?;
        full.push(p);
        tab.push(data.oracle.tabular_prob(&u, &i)?);
        labels.push(u8::from(rng.random::<f64>() < p));
    }
    Ok((
        crate::eval::auc(&full, &labels)?,
        crate::eval::auc(&tab, &labels)?,
    ))
}
