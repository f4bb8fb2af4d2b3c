//! Interaction loading, K-core filtering, leave-one-out splitting and the
//! item catalog (price, category, popularity bucket).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Interaction, Result};

/// Category assigned to items that have no metadata row.
pub const UNKNOWN_CATEGORY: &str = "unknown";
/// Price assigned to items that have no metadata row.
pub const DEFAULT_PRICE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
    pub rating: Option<f64>,
}

/// Interaction log as read from disk, in file order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawInteractions {
    pub records: Vec<RawRecord>,
}

impl RawInteractions {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the log as `user item timestamp [rating]` TSV without a header.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.records.len() * 24);
        for r in &self.records {
            match r.rating {
                Some(rating) => writeln!(out, "{}\t{}\t{}\t{}", r.user, r.item, r.timestamp, rating),
                None => writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp),
            }
            .expect("writing to a Vec cannot fail");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Zero-based column positions of the interaction TSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub user: usize,
    pub item: usize,
    pub timestamp: usize,
    pub rating: Option<usize>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            user: 0,
            item: 1,
            timestamp: 2,
            rating: Some(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub columns: ColumnMap,
    pub has_header: bool,
    /// Rows whose rating is below this value are dropped. Rows without a
    /// rating are always kept.
    pub rating_threshold: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            columns: ColumnMap::default(),
            has_header: false,
            rating_threshold: Some(3.0),
        }
    }
}

/// Reads an interaction TSV.
///
/// Duplicate `(user, item, timestamp)` triples keep their first occurrence.
pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<RawInteractions> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, path, opts)
}

pub(crate) fn parse_interactions(text: &str, path: &Path, opts: &LoadOptions) -> Result<RawInteractions> {
    let cols = &opts.columns;
    let mut seen: HashSet<(String, String, u64)> = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && opts.has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |pos: usize, name: &str| -> Result<&str> {
            fields.get(pos).map(|s| s.trim()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("missing {name} column (index {pos})"),
            })
        };
        let user = field(cols.user, "user")?;
        let item = field(cols.item, "item")?;
        let ts_str = field(cols.timestamp, "timestamp")?;
        let timestamp: u64 = ts_str.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("timestamp `{ts_str}` is not a non-negative integer"),
        })?;
        let rating = match cols.rating {
            Some(pos) => match fields.get(pos).map(|s| s.trim()).filter(|s| !s.is_empty()) {
                Some(s) => Some(s.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("rating `{s}` is not a number"),
                })?),
                None => None,
            },
            None => None,
        };
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        if let (Some(r), Some(th)) = (rating, opts.rating_threshold) {
            if r < th {
                continue;
            }
        }
        if !seen.insert((user.to_string(), item.to_string(), timestamp)) {
            continue;
        }
        records.push(RawRecord {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
            rating,
        });
    }
    Ok(RawInteractions { records })
}

/// Output of [`kcore_filter`].
#[derive(Clone, Debug, PartialEq)]
pub struct KCoreResult {
    pub interactions: RawInteractions,
    /// Set when filtering removed every interaction.
    pub emptied: bool,
}

/// Keeps the maximal subset in which every user and item has at least `k`
/// interactions. Removal is iterated to a fixed point; input order is kept.
pub fn kcore_filter(raw: &RawInteractions, k: usize) -> Result<KCoreResult> {
    if k == 0 {
        return Err(Error::config("k-core requires k >= 1"));
    }
    let mut alive = vec![true; raw.records.len()];
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (r, _) in raw.records.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(r.user.as_str()).or_default() += 1;
            *item_deg.entry(r.item.as_str()).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in raw.records.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[r.user.as_str()] < k || item_deg[r.item.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let records: Vec<RawRecord> = raw
        .records
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(r, _)| r.clone())
        .collect();
    let emptied = records.is_empty() && !raw.records.is_empty();
    if emptied {
        log::warn!("{k}-core filtering removed every interaction");
    }
    Ok(KCoreResult {
        interactions: RawInteractions { records },
        emptied,
    })
}

/// Users and items re-indexed densely, with a leave-one-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Sorted, de-duplicated train items per user.
    pub train_history: Vec<Vec<u32>>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Train items of `user`, sorted.
    pub fn history(&self, user: u32) -> &[u32] {
        &self.train_history[user as usize]
    }

    pub fn split(&self, split: Split) -> &[Interaction] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Builds a dataset directly from dense splits (used by generators and tests).
    pub fn from_splits(
        n_users: usize,
        n_items: usize,
        train: Vec<Interaction>,
        valid: Vec<Interaction>,
        test: Vec<Interaction>,
    ) -> Self {
        let mut train_history = vec![BTreeSet::new(); n_users];
        for it in &train {
            train_history[it.user as usize].insert(it.item);
        }
        Self {
            user_ids: (0..n_users).map(|u| format!("u{u}")).collect(),
            item_ids: (0..n_items).map(|i| format!("i{i}")).collect(),
            train,
            valid,
            test,
            train_history: train_history.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Per user: latest interaction to test, second latest to valid, the rest to
/// train. Timestamp ties are broken by file order (later row is more recent).
/// Users with fewer than three interactions are train-only.
pub fn leave_one_out_split(raw: &RawInteractions) -> InteractionDataset {
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut per_user: Vec<Vec<(u64, usize, u32)>> = Vec::new();

    for (row, r) in raw.records.iter().enumerate() {
        let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            per_user.push(Vec::new());
            (user_ids.len() - 1) as u32
        });
        let i = *item_index.entry(r.item.as_str()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            (item_ids.len() - 1) as u32
        });
        per_user[u as usize].push((r.timestamp, row, i));
    }

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (u, events) in per_user.iter_mut().enumerate() {
        events.sort_by_key(|&(ts, row, _)| (ts, row));
        let u = u as u32;
        let n = events.len();
        let to_inter = |&(ts, _, i): &(u64, usize, u32)| Interaction::new(u, i, ts);
        if n >= 3 {
            train.extend(events[..n - 2].iter().map(to_inter));
            valid.push(to_inter(&events[n - 2]));
            test.push(to_inter(&events[n - 1]));
        } else {
            train.extend(events.iter().map(to_inter));
        }
    }

    let mut ds = InteractionDataset::from_splits(user_ids.len(), item_ids.len(), train, valid, test);
    ds.user_ids = user_ids;
    ds.item_ids = item_ids;
    ds
}

/// Item side information keyed by raw item id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMetadata {
    /// `(item_id, category, price)` in file order.
    pub rows: Vec<(String, String, f64)>,
}

impl ItemMetadata {
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.rows.len() * 24);
        for (item, cat, price) in &self.rows {
            writeln!(out, "{item}\t{cat}\t{price}").expect("writing to a Vec cannot fail");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads `item_id  category  price` TSV.
pub fn load_item_metadata(path: &Path, has_header: bool) -> Result<ItemMetadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(parse_err(format!("expected 3 columns, found {}", fields.len())));
        }
        let price: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("price `{}` is not a number", fields[2])))?;
        if !(price.is_finite() && price >= 0.0) {
            return Err(parse_err(format!("price {price} must be finite and >= 0")));
        }
        rows.push((fields[0].to_string(), fields[1].to_string(), price));
    }
    Ok(ItemMetadata { rows })
}

/// Per-item side information aligned with the dataset's dense item indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub price: Vec<f64>,
    pub category: Vec<u32>,
    pub category_names: Vec<String>,
    /// Train-split interaction count per item.
    pub pop_count: Vec<u64>,
    /// Popularity bucket per item; bucket 0 holds the most popular items.
    pub pop_bucket: Vec<u32>,
    pub n_buckets: usize,
}

impl ItemCatalog {
    pub fn n_items(&self) -> usize {
        self.price.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }
}

/// Joins metadata onto the dataset and assigns popularity buckets.
///
/// Items are sorted by train popularity (descending, ties by index) and cut
/// into `n_buckets` groups whose sizes differ by at most one; the leftover
/// items go to the most popular buckets. Categories are numbered in sorted
/// name order.
pub fn build_catalog(meta: &ItemMetadata, dataset: &InteractionDataset, n_buckets: usize) -> Result<ItemCatalog> {
    let n_items = dataset.n_items();
    if n_buckets == 0 || n_buckets > n_items {
        return Err(Error::config(format!(
            "cannot split {n_items} items into {n_buckets} popularity buckets"
        )));
    }
    let lookup: HashMap<&str, (&str, f64)> = meta
        .rows
        .iter()
        .map(|(id, cat, price)| (id.as_str(), (cat.as_str(), *price)))
        .collect();

    let mut price = Vec::with_capacity(n_items);
    let mut cat_names_per_item = Vec::with_capacity(n_items);
    let mut missing = 0usize;
    for id in &dataset.item_ids {
        match lookup.get(id.as_str()) {
            Some(&(cat, p)) => {
                price.push(p);
                cat_names_per_item.push(cat);
            }
            None => {
                missing += 1;
                price.push(DEFAULT_PRICE);
                cat_names_per_item.push(UNKNOWN_CATEGORY);
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} items have no metadata; using price {DEFAULT_PRICE} and category `{UNKNOWN_CATEGORY}`");
    }
    let category_names: Vec<String> = cat_names_per_item
        .iter()
        .copied()
        .collect::<BTreeSet<&str>>()
        .into_iter()
        .map(String::from)
        .collect();
    let cat_index: HashMap<&str, u32> = category_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();
    let category = cat_names_per_item.iter().map(|c| cat_index[c]).collect();

    let mut pop_count = vec![0u64; n_items];
    for it in &dataset.train {
        pop_count[it.item as usize] += 1;
    }
    let pop_bucket = popularity_buckets(&pop_count, n_buckets);

    Ok(ItemCatalog {
        price,
        category,
        category_names,
        pop_count,
        pop_bucket,
        n_buckets,
    })
}

/// Equal-count popularity deciles (for `n_buckets = 10`) over popularity rank.
pub fn popularity_buckets(pop_count: &[u64], n_buckets: usize) -> Vec<u32> {
    let n = pop_count.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pop_count[b].cmp(&pop_count[a]).then(a.cmp(&b)));
    let base = n / n_buckets;
    let rem = n % n_buckets;
    let mut bucket = vec![0u32; n];
    let mut pos = 0;
    for b in 0..n_buckets {
        let size = base + usize::from(b < rem);
        for &item in &order[pos..pos + size] {
            bucket[item] = b as u32;
        }
        pos += size;
    }
    bucket
}
