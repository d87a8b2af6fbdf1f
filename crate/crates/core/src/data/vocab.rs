use std::collections::{BTreeMap, HashMap};

use super::{Catalog, SampleWindow, ITEM_ID, USER_ID};
use crate::error::{Error, Result};

/// Which categorical fields feed the tabular embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub user: Vec<String>,
    pub item: Vec<String>,
    pub context: Vec<String>,
}

impl FieldSchema {
    /// `user_id`, `item_id` plus every catalog column (or only `item_fields`
    /// when given), and no context fields.
    pub fn from_catalog(catalog: &Catalog, item_fields: Option<&[String]>) -> Self {
        let item = match item_fields {
            Some(f) => f.to_vec(),
            None => std::iter::once(ITEM_ID.to_string())
                .chain(catalog.columns().iter().cloned())
                .collect(),
        };
        FieldSchema {
            user: vec![USER_ID.to_string()],
            item,
            context: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct FieldVocab {
    values: Vec<String>,
    index: HashMap<String, usize>,
}

impl FieldVocab {
    fn insert(&mut self, v: &str) {
        if !self.index.contains_key(v) {
            self.values.push(v.to_string());
            self.index.insert(v.to_string(), self.values.len());
        }
    }
}

/// Per-field value → index maps. Index 0 is reserved for out-of-vocabulary
/// values and padding; seen values get dense indices from 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    fields: BTreeMap<String, FieldVocab>,
}

impl Vocab {
    /// Builds from training samples only: users and contexts of every target,
    /// item fields of every target and history item.
    pub fn build(train: &[SampleWindow], catalog: &Catalog, schema: &FieldSchema) -> Result<Self> {
        let first = train.first().ok_or(Error::EmptyInput("training samples"))?;
        for f in &schema.user {
            if !first.user_features.iter().any(|(n, _)| n == f) {
                return Err(Error::UnknownField(f.clone()));
            }
        }
        for f in &schema.context {
            if !first.context_features.iter().any(|(n, _)| n == f) {
                return Err(Error::UnknownField(f.clone()));
            }
        }
        for f in &schema.item {
            if f != ITEM_ID && !catalog.columns().iter().any(|c| c == f) {
                return Err(Error::UnknownField(f.clone()));
            }
        }

        let mut fields: BTreeMap<String, FieldVocab> = BTreeMap::new();
        let names = schema
            .user
            .iter()
            .chain(&schema.item)
            .chain(&schema.context);
        for n in names {
            fields.entry(n.clone()).or_default();
        }
        let add_item = |fields: &mut BTreeMap<String, FieldVocab>, key: &str| -> Result<()> {
            let item = catalog
                .get(key)
                .ok_or_else(|| Error::UnknownItem(key.to_string()))?;
            for f in &schema.item {
                if let Some(v) = catalog.field_value(item, f) {
                    fields.get_mut(f).expect("registered").insert(v);
                }
            }
            Ok(())
        };
        for s in train {
            for h in &s.history {
                add_item(&mut fields, &h.item_key)?;
            }
            add_item(&mut fields, &s.target.item_key)?;
            for (n, v) in s.user_features.iter().chain(&s.context_features) {
                if let Some(fv) = fields.get_mut(n) {
                    if schema.user.contains(n) || schema.context.contains(n) {
                        fv.insert(v);
                    }
                }
            }
        }
        Ok(Vocab { fields })
    }

    /// Index of `value` in `field`, 0 when unseen or the field is unknown.
    pub fn index(&self, field: &str, value: &str) -> usize {
        self.fields
            .get(field)
            .and_then(|f| f.index.get(value).copied())
            .unwrap_or(0)
    }

    /// Number of embedding rows for `field`, including row 0.
    pub fn table_size(&self, field: &str) -> Result<usize> {
        self.fields
            .get(field)
            .map(|f| f.values.len() + 1)
            .ok_or_else(|| Error::UnknownField(field.to_string()))
    }

    pub fn values(&self, field: &str) -> Option<&[String]> {
        self.fields.get(field).map(|f| f.values.as_slice())
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }
}
