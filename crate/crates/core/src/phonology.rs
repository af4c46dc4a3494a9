//! Phone feature encoding and the dynamic unfolding of spoken labels.
//!
//! Each phone is a 20-dim binary articulatory feature vector. A label unfolds
//! as its phone vectors in order, followed by the all-ones segmentation frame.
//! Consecutive symbols are joined by two co-articulation frames: a feature
//! falling from 1 to 0 passes through 0.95 then 0.05, a rising feature through
//! 0.05 then 0.95, and a constant feature holds its value.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Read;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of phonological features per phone.
pub const FEATURES: usize = 20;
/// Symbol reserved for the label-offset marker.
pub const SEGMENTATION_SYMBOL: &str = "#";
/// Cohorts with at least this many members count as large.
pub const LARGE_COHORT: usize = 25;

pub const MIN_LABEL_PHONES: usize = 2;
pub const MAX_LABEL_PHONES: usize = 9;

/// Bundled phone feature table (CSV text).
pub const SHIPPED_PHONES: &str = include_str!("../data/phones.csv");
/// Bundled 200-item lexicon manifest (CSV text).
pub const SHIPPED_LEXICON: &str = include_str!("../data/lexicon.csv");

const HIGH_MID: f64 = 0.95;
const LOW_MID: f64 = 0.05;

pub type FeatureVector = [u8; FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhoneClass {
    Consonant,
    Vowel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneEntry {
    pub class: PhoneClass,
    pub features: FeatureVector,
}

#[derive(Debug, Clone)]
pub struct PhoneFeatureTable {
    entries: BTreeMap<String, PhoneEntry>,
    segmentation: FeatureVector,
}

impl PhoneFeatureTable {
    pub fn new(entries: BTreeMap<String, PhoneEntry>) -> Self {
        Self {
            entries,
            segmentation: [1; FEATURES],
        }
    }

    /// The feature table bundled with the crate (39 phones).
    pub fn shipped() -> Self {
        Self::from_csv_str(SHIPPED_PHONES, "phones.csv").expect("bundled phone table is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    /// Parses `symbol,class,f1..f20`. The segmentation row must be all ones.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes(), origin)
    }

    pub fn from_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let schema = |row: usize, message: String| Error::Schema {
            path: origin.to_string(),
            row,
            message,
        };
        let headers = rdr.headers()?.clone();
        if headers.len() != FEATURES + 2 || &headers[0] != "symbol" || &headers[1] != "class" {
            return Err(schema(0, format!("expected header symbol,class,f1..f{FEATURES}")));
        }
        let mut entries = BTreeMap::new();
        let mut segmentation = None;
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != FEATURES + 2 {
                return Err(schema(row, format!("expected {} columns, got {}", FEATURES + 2, rec.len())));
            }
            let mut features = [0u8; FEATURES];
            for (f, field) in features.iter_mut().zip(rec.iter().skip(2)) {
                *f = match field {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(schema(row, format!("feature value `{other}` is not 0 or 1"))),
                };
            }
            let symbol = rec[0].to_string();
            let class = match &rec[1] {
                "consonant" => PhoneClass::Consonant,
                "vowel" => PhoneClass::Vowel,
                "segmentation" => {
                    if symbol != SEGMENTATION_SYMBOL {
                        return Err(schema(row, format!("segmentation symbol must be `{SEGMENTATION_SYMBOL}`")));
                    }
                    if features != [1; FEATURES] {
                        return Err(schema(row, "segmentation row must be all ones".into()));
                    }
                    segmentation = Some(features);
                    continue;
                }
                other => return Err(schema(row, format!("unknown phone class `{other}`"))),
            };
            if entries.insert(symbol.clone(), PhoneEntry { class, features }).is_some() {
                return Err(schema(row, format!("duplicate symbol `{symbol}`")));
            }
        }
        let segmentation =
            segmentation.ok_or_else(|| schema(0, "missing segmentation row".into()))?;
        Ok(Self {
            entries,
            segmentation,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, symbol: &str) -> bool {
        symbol == SEGMENTATION_SYMBOL || self.entries.contains_key(symbol)
    }

    pub fn class_of(&self, symbol: &str) -> Option<PhoneClass> {
        self.entries.get(symbol).map(|e| e.class)
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &PhoneEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn segmentation(&self) -> &FeatureVector {
        &self.segmentation
    }

    /// Lists every violated table invariant; empty when the table is sound.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let consonants = self.entries.values().filter(|e| e.class == PhoneClass::Consonant).count();
        let vowels = self.len() - consonants;
        if self.len() != 39 {
            out.push(format!("phone count {} ≠ 39", self.len()));
        }
        if consonants != 26 {
            out.push(format!("consonant count {consonants} ≠ 26"));
        }
        if vowels != 13 {
            out.push(format!("vowel count {vowels} ≠ 13"));
        }
        if self.segmentation != [1; FEATURES] {
            out.push("segmentation row is not all ones".into());
        }
        let mut seen: BTreeMap<FeatureVector, &str> = BTreeMap::new();
        for (sym, e) in &self.entries {
            if e.features == self.segmentation {
                out.push(format!("phone `{sym}` collides with the segmentation vector"));
            }
            if let Some(prev) = seen.insert(e.features, sym) {
                out.push(format!("phones `{prev}` and `{sym}` share a feature vector"));
            }
        }
        out
    }
}

/// Looks up the stored feature vector of a phone or the segmentation symbol.
pub fn encode_phone<'a>(symbol: &str, table: &'a PhoneFeatureTable) -> Result<&'a FeatureVector> {
    if symbol == SEGMENTATION_SYMBOL {
        return Ok(&table.segmentation);
    }
    table
        .entries
        .get(symbol)
        .map(|e| &e.features)
        .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabItem {
    pub id: usize,
    pub label: String,
    pub category: String,
    pub phones: Vec<String>,
}

impl VocabItem {
    pub fn new(id: usize, label: &str, category: &str, phones: &str) -> Self {
        Self {
            id,
            label: label.to_string(),
            category: category.to_string(),
            phones: phones.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn onset(&self) -> &str {
        &self.phones[0]
    }

    /// Number of frames in the unfolded sequence: 3L + 1.
    pub fn sequence_len(&self) -> usize {
        3 * self.phones.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    items: Vec<VocabItem>,
    table: PhoneFeatureTable,
    by_id: BTreeMap<usize, usize>,
}

impl Lexicon {
    pub fn new(items: Vec<VocabItem>, table: PhoneFeatureTable) -> Result<Self> {
        if let Some(v) = item_violations(&items, &table).into_iter().next() {
            return Err(Error::Schema {
                path: "lexicon".into(),
                row: v.0,
                message: v.1,
            });
        }
        let by_id = items.iter().enumerate().map(|(i, it)| (it.id, i)).collect();
        Ok(Self { items, table, by_id })
    }

    /// The bundled 200-item lexicon with the bundled phone table.
    pub fn shipped() -> Self {
        let table = PhoneFeatureTable::shipped();
        let items = read_manifest(SHIPPED_LEXICON.as_bytes(), "lexicon.csv").expect("bundled lexicon parses");
        Self::new(items, table).expect("bundled lexicon is valid")
    }

    pub fn from_paths(manifest: &Path, phones: &Path) -> Result<Self> {
        let table = PhoneFeatureTable::from_path(phones)?;
        let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let items = read_manifest(file, &manifest.display().to_string())?;
        Self::new(items, table)
    }

    /// Restricts the lexicon to the given ids, keeping lexicon order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let keep: HashSet<usize> = ids.iter().copied().collect();
        for id in &keep {
            self.index_of(*id)?;
        }
        let items = self.items.iter().filter(|it| keep.contains(&it.id)).cloned().collect();
        Self::new(items, self.table.clone())
    }

    pub fn items(&self) -> &[VocabItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn table(&self) -> &PhoneFeatureTable {
        &self.table
    }

    pub fn index_of(&self, id: usize) -> Result<usize> {
        self.by_id.get(&id).copied().ok_or(Error::UnknownItem(id))
    }

    pub fn item(&self, id: usize) -> Result<&VocabItem> {
        Ok(&self.items[self.index_of(id)?])
    }

    pub fn by_label(&self, label: &str) -> Option<&VocabItem> {
        self.items.iter().find(|it| it.label == label)
    }

    pub fn sequence(&self, item: &VocabItem) -> Result<UnfoldedSequence> {
        let mut seq = build_sequence(&item.phones, &self.table)?;
        seq.source_id = Some(item.id);
        Ok(seq)
    }

    /// Longest unfolded sequence over all items.
    pub fn max_sequence_len(&self) -> usize {
        self.items.iter().map(VocabItem::sequence_len).max().unwrap_or(0)
    }
}

/// Reads `id,label,category,phones` rows without checking lexicon invariants.
pub fn read_manifest<R: Read>(reader: R, origin: &str) -> Result<Vec<VocabItem>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "label", "category", "phones"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Schema {
            path: origin.into(),
            row: 0,
            message: "expected header id,label,category,phones".into(),
        });
    }
    let mut items = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec[0].parse::<usize>().map_err(|_| Error::Schema {
            path: origin.into(),
            row: i + 1,
            message: format!("id `{}` is not a non-negative integer", &rec[0]),
        })?;
        items.push(VocabItem::new(id, &rec[1], &rec[2], &rec[3]));
    }
    Ok(items)
}

/// Every lexicon-level violation as (row, message); rows are 1-based.
pub fn item_violations(items: &[VocabItem], table: &PhoneFeatureTable) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut labels = HashSet::new();
    for (i, it) in items.iter().enumerate() {
        let row = i + 1;
        if !ids.insert(it.id) {
            out.push((row, format!("duplicate id {}", it.id)));
        }
        if !labels.insert(it.label.as_str()) {
            out.push((row, format!("duplicate label `{}`", it.label)));
        }
        let n = it.phones.len();
        if !(MIN_LABEL_PHONES..=MAX_LABEL_PHONES).contains(&n) {
            out.push((
                row,
                format!("label `{}` has {n} phones, outside {MIN_LABEL_PHONES}..={MAX_LABEL_PHONES}", it.label),
            ));
        }
        for p in &it.phones {
            if p == SEGMENTATION_SYMBOL || !table.contains(p) {
                out.push((row, format!("label `{}` uses unknown phone `{p}`", it.label)));
            }
        }
    }
    out
}

/// A label unfolded into feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedSequence {
    /// T×20 frame matrix.
    pub frames: Array2<f64>,
    /// Row of the all-ones segmentation frame (always the last row).
    pub offset_index: usize,
    pub source_id: Option<usize>,
}

impl UnfoldedSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Unfolds a phone list into 3L + 1 frames ending in the segmentation frame.
///
/// The first frame is the first phone itself; no transition from silence.
pub fn build_sequence<S: AsRef<str>>(phones: &[S], table: &PhoneFeatureTable) -> Result<UnfoldedSequence> {
    if phones.is_empty() {
        return Err(Error::EmptyPhones);
    }
    let mut symbols = Vec::with_capacity(phones.len() + 1);
    for p in phones {
        let p = p.as_ref();
        if p == SEGMENTATION_SYMBOL {
            return Err(Error::UnknownSymbol(p.to_string()));
        }
        symbols.push(encode_phone(p, table)?);
    }
    symbols.push(&table.segmentation);

    let len = 3 * phones.len() + 1;
    let mut frames = Array2::zeros((len, FEATURES));
    for (k, pair) in symbols.windows(2).enumerate() {
        let (from, to) = (pair[0], pair[1]);
        let base = 3 * k;
        for f in 0..FEATURES {
            let (a, b) = (from[f], to[f]);
            let (m1, m2) = match (a, b) {
                (1, 0) => (HIGH_MID, LOW_MID),
                (0, 1) => (LOW_MID, HIGH_MID),
                _ => (f64::from(a), f64::from(a)),
            };
            frames[[base, f]] = f64::from(a);
            frames[[base + 1, f]] = m1;
            frames[[base + 2, f]] = m2;
        }
    }
    frames.row_mut(len - 1).fill(1.0);
    Ok(UnfoldedSequence {
        frames,
        offset_index: len - 1,
        source_id: None,
    })
}

/// Zero-pads a sequence to `total_len` frames.
pub fn pad_sequence(seq: &UnfoldedSequence, total_len: usize) -> Result<Array2<f64>> {
    let len = seq.len();
    if total_len < len {
        return Err(Error::PadLength { len, total: total_len });
    }
    let mut out = Array2::zeros((total_len, FEATURES));
    out.slice_mut(s![..len, ..]).assign(&seq.frames);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortStats {
    /// Items per onset phone.
    pub by_onset: BTreeMap<String, usize>,
    /// Cohort size of each item, aligned with lexicon order (includes the item).
    pub per_item: Vec<usize>,
}

impl CohortStats {
    pub fn is_large(&self, index: usize) -> bool {
        self.per_item[index] >= LARGE_COHORT
    }
}

pub fn cohort_stats(lexicon: &Lexicon) -> CohortStats {
    let mut by_onset: BTreeMap<String, usize> = BTreeMap::new();
    for it in lexicon.items() {
        *by_onset.entry(it.onset().to_string()).or_default() += 1;
    }
    let per_item = lexicon.items().iter().map(|it| by_onset[it.onset()]).collect();
    CohortStats { by_onset, per_item }
}

/// Pairs `(embedded_id, embedding_id)` where the first label's phones occur
/// contiguously inside the second's. Contiguity covers prefixes (bee/beach)
/// and overlaps anchored at onset (lamb/lamp) as well as infixes.
pub fn embedded_label_pairs(lexicon: &Lexicon) -> Vec<(usize, usize)> {
    let items = lexicon.items();
    let mut pairs = Vec::new();
    for a in items {
        for b in items {
            if a.id != b.id && contains_run(&b.phones, &a.phones) {
                pairs.push((a.id, b.id));
            }
        }
    }
    pairs
}

/// Every id that embeds or is embedded in another label.
pub fn embedded_items(lexicon: &Lexicon) -> BTreeSet<usize> {
    embedded_label_pairs(lexicon)
        .into_iter()
        .flat_map(|(a, b)| [a, b])
        .collect()
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

/// The final vowel and everything after it; `None` if the label has no vowel.
pub fn rhyme<'a>(phones: &'a [String], table: &PhoneFeatureTable) -> Option<&'a [String]> {
    let last_vowel = phones
        .iter()
        .rposition(|p| table.class_of(p) == Some(PhoneClass::Vowel))?;
    Some(&phones[last_vowel..])
}
