//! Item descriptions, text encoders, and the indexed knowledge base of
//! per-item semantic vectors.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An item's key and its raw `(field, value)` pairs in catalog column order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRecord {
    pub item_key: String,
    pub fields: Vec<(String, String)>,
}

impl ItemRecord {
    pub fn new(item_key: impl Into<String>, fields: Vec<(String, String)>) -> Self {
        ItemRecord {
            item_key: item_key.into(),
            fields,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_key.is_empty() {
            return Err(Error::EmptyInput("item key"));
        }
        if self.fields.is_empty() {
            return Err(Error::EmptyFields(self.item_key.clone()));
        }
        let mut seen = HashSet::new();
        for (name, _) in &self.fields {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateField {
                    item: self.item_key.clone(),
                    field: name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }
}

/// Field-value description: `Here is a movie, title is Titanic, genre is
/// Romantic, and director is James Cameron.`
pub fn render_prompt(item: &ItemRecord, category_noun: &str) -> Result<String> {
    item.validate()?;
    if category_noun.trim().is_empty() {
        return Err(Error::EmptyInput("category noun"));
    }
    let clauses: Vec<String> = item
        .fields
        .iter()
        .map(|(name, value)| format!("{name} is {value}"))
        .collect();
    let body = match clauses.as_slice() {
        [only] => only.clone(),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
        [] => unreachable!("validated nonempty"),
    };
    Ok(format!("Here is a {category_noun}, {body}."))
}

/// Produces one semantic vector per item.
pub trait TextEncoder: Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// Encodes an item given its key and rendered description.
    fn encode(&self, item_key: &str, text: &str) -> Result<Vec<f64>>;
}

// 64-bit FNV-1a followed by a splitmix finalizer; stable across builds and
// platforms, unlike std's DefaultHasher.
pub(crate) fn stable_hash(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of tokens into `output_dim` buckets, L2-normalized.
pub fn stub_encode(text: &str, output_dim: usize, seed: u64) -> Result<Vec<f64>> {
    if output_dim < 8 {
        return Err(Error::config(
            "dim",
            "stub encoder needs at least 8 dimensions",
        ));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyDescription);
    }
    let mut v = vec![0.0; output_dim];
    for tok in &tokens {
        let h = stable_hash(tok.as_bytes(), seed);
        let bucket = (h % output_dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every token cancelled out; fall back to the first token's bucket.
        let h = stable_hash(tokens[0].as_bytes(), seed);
        v[(h % output_dim as u64) as usize] = 1.0;
        return Ok(v);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Deterministic offline encoder based on token hashing.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl StubEncoder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, seed: u64) -> Self {
        StubEncoder { dim, seed }
    }
}

impl TextEncoder for StubEncoder {
    fn name(&self) -> &str {
        "stub"
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _item_key: &str, text: &str) -> Result<Vec<f64>> {
        stub_encode(text, self.dim, self.seed)
    }
}

/// Serves precomputed vectors read from an embedding import file.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl FileEncoder {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let (dim, vectors) = parse_tsv(text)?;
        Ok(FileEncoder { dim, vectors })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_tsv(&text)
    }
}

impl TextEncoder for FileEncoder {
    fn name(&self) -> &str {
        "file"
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, item_key: &str, _text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(item_key)
            .cloned()
            .ok_or_else(|| Error::UnknownItem(item_key.to_string()))
    }
}

/// Behaviour of [`KnowledgeBase::lookup`] for keys that were never indexed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MissingKey {
    #[default]
    Error,
    ZeroVector,
}

const KB_MAGIC: &[u8; 8] = b"DISCOKB1";

/// Immutable map from item key to a fixed-dimension semantic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
    encoder_tag: String,
    missing: MissingKey,
    zero: Vec<f64>,
}

impl KnowledgeBase {
    pub fn from_entries(
        dim: usize,
        entries: BTreeMap<String, Vec<f64>>,
        encoder_tag: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        for (key, v) in &entries {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(
                    "knowledge base",
                    format!("non-finite vector for `{key}`"),
                ));
            }
        }
        Ok(KnowledgeBase {
            dim,
            entries,
            encoder_tag: encoder_tag.into(),
            missing: MissingKey::Error,
            zero: vec![0.0; dim],
        })
    }

    pub fn with_missing_key(mut self, mode: MissingKey) -> Self {
        self.missing = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn lookup(&self, item_key: &str) -> Result<&[f64]> {
        match (self.entries.get(item_key), self.missing) {
            (Some(v), _) => Ok(v),
            (None, MissingKey::ZeroVector) => Ok(&self.zero),
            (None, MissingKey::Error) => Err(Error::UnknownItem(item_key.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.entries.len() * (self.dim * 8 + 16));
        out.extend_from_slice(KB_MAGIC);
        let dim = u32::try_from(self.dim).map_err(|_| Error::config("dim", "exceeds u32"))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, v) in &self.entries {
            let len = u16::try_from(key.len()).map_err(|_| {
                Error::format(
                    "knowledge base",
                    format!("key longer than 65535 bytes: {key}"),
                )
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != KB_MAGIC {
            return Err(Error::format("knowledge base", "bad magic"));
        }
        let dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(&mut r)?) as usize;
            let mut key = vec![0u8; len];
            read_exact(&mut r, &mut key)?;
            let key = String::from_utf8(key)
                .map_err(|e| Error::format("knowledge base", e.to_string()))?;
            let v = (0..dim)
                .map(|_| take(&mut r).map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            if entries.insert(key.clone(), v).is_some() {
                return Err(Error::DuplicateKey(key));
            }
        }
        if !r.is_empty() {
            return Err(Error::format("knowledge base", "trailing bytes"));
        }
        Self::from_entries(dim, entries, "kb-file")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::path(path, e))?;
        f.write_all(&self.to_bytes()?)
            .map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Tab-separated debug export, also readable by [`FileEncoder`].
    pub fn to_tsv(&self) -> String {
        let mut s = format!("#dim={}\n", self.dim);
        for (key, v) in &self.entries {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&format!("{key}\t{}\n", vals.join(",")));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let (dim, entries) = parse_tsv(text)?;
        Self::from_entries(dim, entries, "tsv")
    }

    /// Applies `f` to every stored vector, e.g. to keep a dimension-reduced copy.
    pub fn map_vectors(
        &self,
        tag: &str,
        mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut dim = None;
        for (k, v) in &self.entries {
            let out = f(v)?;
            dim.get_or_insert(out.len());
            entries.insert(k.clone(), out);
        }
        Self::from_entries(dim.unwrap_or(self.dim), entries, tag)
    }

    /// Copy with every vector multiplied by one shared factor so that the
    /// mean squared entry over the whole base is 1. Directions and relative
    /// norms are kept; an all-zero base is returned unchanged.
    pub fn unit_rms(&self) -> Result<Self> {
        let (sq, count) = self
            .entries
            .values()
            .flat_map(|v| v.iter())
            .fold((0.0, 0usize), |(s, c), x| (s + x * x, c + 1));
        let c = if sq > 0.0 {
            (count as f64 / sq).sqrt()
        } else {
            1.0
        };
        let mut out =
            self.map_vectors(&self.encoder_tag, |v| Ok(v.iter().map(|x| x * c).collect()))?;
        out.missing = self.missing;
        Ok(out)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("knowledge base", "truncated file"))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn parse_tsv(text: &str) -> Result<(usize, BTreeMap<String, Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput("embedding file"))?;
    let dim: usize = header
        .strip_prefix("#dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| Error::format("embedding file", format!("bad header `{header}`")))?;
    let mut entries = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, vals) = line.split_once('\t').ok_or_else(|| {
            Error::format(
                "embedding file",
                format!("line {}: missing tab", lineno + 2),
            )
        })?;
        let v = vals
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("embedding file", format!("line {}: {e}", lineno + 2)))?;
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        if entries.insert(key.to_string(), v).is_some() {
            return Err(Error::DuplicateKey(key.to_string()));
        }
    }
    Ok((dim, entries))
}

/// Encodes every catalog item's rendered description.
pub fn build_kb(
    catalog: &[ItemRecord],
    encoder: &dyn TextEncoder,
    category_noun: &str,
) -> Result<KnowledgeBase> {
    if catalog.is_empty() {
        return Err(Error::EmptyInput("catalog"));
    }
    let dim = encoder.output_dim();
    let mut entries = BTreeMap::new();
    for item in catalog {
        let text = render_prompt(item, category_noun)?;
        let v = encoder.encode(&item.item_key, &text)?;
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        if entries.insert(item.item_key.clone(), v).is_some() {
            return Err(Error::DuplicateKey(item.item_key.clone()));
        }
    }
    KnowledgeBase::from_entries(dim, entries, encoder.name())
}
