//! Dataset ingestion: interaction files, dense ID mapping, train/test
//! splits, genre metadata, and the replay buffers used by online training.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CelError, Result};

/// One observed user-item interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Bijection between raw entity IDs (as they appear in files) and dense
/// indices assigned in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct IdMap {
    to_dense: HashMap<String, u32>,
    to_raw: Vec<String>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the dense index for `raw`, assigning the next index on first
    /// sight.
    pub fn intern(&mut self, raw: &str) -> u32 {
        match self.to_dense.entry(raw.to_owned()) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let idx = self.to_raw.len() as u32;
                self.to_raw.push(raw.to_owned());
                e.insert(idx);
                idx
            }
        }
    }

    pub fn dense(&self, raw: &str) -> Option<u32> {
        self.to_dense.get(raw).copied()
    }

    pub fn raw(&self, dense: u32) -> &str {
        &self.to_raw[dense as usize]
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }
}

/// User and item ID maps for one dataset.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub users: IdMap,
    pub items: IdMap,
}

/// Sparse user-item interactions plus per-entity position indexes.
///
/// Immutable after construction; train/test splits share the same dims and
/// ID maps so dense indices stay compatible across partitions.
#[derive(Debug, Clone)]
pub struct InteractionStore {
    interactions: Vec<Interaction>,
    n_users: usize,
    n_items: usize,
    per_user: Vec<Vec<u32>>,
    per_item: Vec<Vec<u32>>,
    id_maps: Arc<IdMaps>,
}

impl InteractionStore {
    /// Builds a store over `interactions` with fixed entity counts; the
    /// per-entity indexes are derived here.
    pub fn new(
        interactions: Vec<Interaction>,
        n_users: usize,
        n_items: usize,
        id_maps: Arc<IdMaps>,
    ) -> Self {
        let mut per_user = vec![Vec::new(); n_users];
        let mut per_item = vec![Vec::new(); n_items];
        for (pos, it) in interactions.iter().enumerate() {
            per_user[it.user as usize].push(pos as u32);
            per_item[it.item as usize].push(pos as u32);
        }
        InteractionStore { interactions, n_users, n_items, per_user, per_item, id_maps }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_positions(&self, u: u32) -> &[u32] {
        &self.per_user[u as usize]
    }

    pub fn item_positions(&self, j: u32) -> &[u32] {
        &self.per_item[j as usize]
    }

    /// Observed interaction count of item `j`.
    pub fn item_degree(&self, j: u32) -> u64 {
        self.per_item[j as usize].len() as u64
    }

    /// Per-item interaction counts as a vector.
    pub fn item_degrees(&self) -> Vec<u64> {
        self.per_item.iter().map(|p| p.len() as u64).collect()
    }

    pub fn id_maps(&self) -> &Arc<IdMaps> {
        &self.id_maps
    }

    /// New store over a subset of interaction positions; dims and ID maps
    /// are shared with `self`.
    pub fn subset(&self, positions: &[u32]) -> InteractionStore {
        let inter = positions.iter().map(|&p| self.interactions[p as usize]).collect();
        InteractionStore::new(inter, self.n_users, self.n_items, Arc::clone(&self.id_maps))
    }

    /// Interactions re-ordered for stream replay: stable sort by timestamp
    /// when timestamps exist, file order otherwise, chunked into batches of
    /// `b`.
    pub fn replay_batches(&self, b: usize) -> Vec<Vec<Interaction>> {
        assert!(b > 0, "batch size must be positive");
        let mut ordered: Vec<Interaction> = self.interactions.clone();
        if ordered.iter().any(|it| it.timestamp.is_some()) {
            ordered.sort_by_key(|it| it.timestamp.unwrap_or(i64::MIN));
        }
        ordered.chunks(b).map(|c| c.to_vec()).collect()
    }
}

/// Supported interaction-file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// MovieLens "dat": `userId::movieId::rating::timestamp`.
    MlDat,
    /// CSV with header `user,item,rating[,timestamp]`.
    Csv,
}

impl FromStr for DatasetFormat {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mldat" => Ok(DatasetFormat::MlDat),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(CelError::Config(format!("unknown dataset format '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::MlDat => write!(f, "mldat"),
            DatasetFormat::Csv => write!(f, "csv"),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CelError {
    CelError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CelError {
    CelError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

struct RawRecord<'a> {
    user: &'a str,
    item: &'a str,
    rating: f64,
    timestamp: Option<i64>,
}

fn parse_rating(path: &Path, line_no: usize, s: &str) -> Result<f64> {
    let r: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line_no, format!("bad rating '{s}'")))?;
    if !r.is_finite() {
        return Err(parse_err(path, line_no, format!("non-finite rating '{s}'")));
    }
    Ok(r)
}

fn parse_timestamp(path: &Path, line_no: usize, s: &str) -> Result<i64> {
    // MovieLens exports sometimes carry float-formatted epoch seconds.
    let t = s.trim();
    if let Ok(v) = t.parse::<i64>() {
        return Ok(v);
    }
    t.parse::<f64>()
        .map(|v| v as i64)
        .map_err(|_| parse_err(path, line_no, format!("bad timestamp '{s}'")))
}

fn parse_line<'a>(
    path: &Path,
    format: DatasetFormat,
    has_ts: bool,
    line_no: usize,
    line: &'a str,
) -> Result<RawRecord<'a>> {
    match format {
        DatasetFormat::MlDat => {
            let fields: Vec<&str> = line.split("::").collect();
            if fields.len() != 4 {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected 4 '::' fields, got {}", fields.len()),
                ));
            }
            Ok(RawRecord {
                user: fields[0].trim(),
                item: fields[1].trim(),
                rating: parse_rating(path, line_no, fields[2])?,
                timestamp: Some(parse_timestamp(path, line_no, fields[3])?),
            })
        }
        DatasetFormat::Csv => {
            let fields: Vec<&str> = line.split(',').collect();
            let expected = if has_ts { 4 } else { 3 };
            if fields.len() != expected {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {expected} comma fields, got {}", fields.len()),
                ));
            }
            let timestamp = if has_ts {
                Some(parse_timestamp(path, line_no, fields[3])?)
            } else {
                None
            };
            Ok(RawRecord {
                user: fields[0].trim(),
                item: fields[1].trim(),
                rating: parse_rating(path, line_no, fields[2])?,
                timestamp,
            })
        }
    }
}

fn csv_header_has_ts(path: &Path, header: &str) -> Result<bool> {
    let cols: Vec<String> =
        header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    match cols.as_slice() {
        [u, i, r] if u == "user" && i == "item" && r == "rating" => Ok(false),
        [u, i, r, t] if u == "user" && i == "item" && r == "rating" && t == "timestamp" => Ok(true),
        _ => Err(parse_err(path, 1, format!("bad CSV header '{header}'"))),
    }
}

/// Loads an interaction file, assigning dense indices in first-seen order.
/// Duplicate (user, item) pairs are kept as separate interactions.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<InteractionStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);

    let mut maps = IdMaps::default();
    let mut interactions = Vec::new();
    let mut has_ts = false;
    let mut first_line = true;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if first_line && format == DatasetFormat::Csv {
            has_ts = csv_header_has_ts(path, &line)?;
            first_line = false;
            continue;
        }
        first_line = false;
        let rec = parse_line(path, format, has_ts, line_no, &line)?;
        interactions.push(Interaction {
            user: maps.users.intern(rec.user),
            item: maps.items.intern(rec.item),
            rating: rec.rating,
            timestamp: rec.timestamp,
        });
    }
    let n_users = maps.users.len();
    let n_items = maps.items.len();
    Ok(InteractionStore::new(interactions, n_users, n_items, Arc::new(maps)))
}

/// Loads an interaction file against fixed ID maps (e.g. the sidecars saved
/// next to a checkpoint). Records whose user or item is not in the maps are
/// skipped; the skip count is returned alongside the store.
pub fn load_dataset_with_maps(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    maps: Arc<IdMaps>,
) -> Result<(InteractionStore, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);

    let mut interactions = Vec::new();
    let mut skipped = 0usize;
    let mut has_ts = false;
    let mut first_line = true;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if first_line && format == DatasetFormat::Csv {
            has_ts = csv_header_has_ts(path, &line)?;
            first_line = false;
            continue;
        }
        first_line = false;
        let rec = parse_line(path, format, has_ts, line_no, &line)?;
        match (maps.users.dense(rec.user), maps.items.dense(rec.item)) {
            (Some(user), Some(item)) => interactions.push(Interaction {
                user,
                item,
                rating: rec.rating,
                timestamp: rec.timestamp,
            }),
            _ => skipped += 1,
        }
    }
    let n_users = maps.users.len();
    let n_items = maps.items.len();
    Ok((InteractionStore::new(interactions, n_users, n_items, maps), skipped))
}

/// Writes one ID map as a `raw_id<TAB>dense_index` sidecar file.
pub fn write_id_map(map: &IdMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for dense in 0..map.len() as u32 {
        out.push_str(map.raw(dense));
        out.push('\t');
        out.push_str(&dense.to_string());
        out.push('\n');
    }
    crate::fsutil::atomic_write(path, out.as_bytes())
        .map_err(|e| io_err(path, e))
}

/// Reads an ID-map sidecar written by [`write_id_map`].
pub fn read_id_map(path: impl AsRef<Path>) -> Result<IdMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut entries: Vec<(String, u32)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (raw, dense) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_err(path, line_no, "expected raw_id<TAB>dense_index"))?;
        let dense: u32 = dense
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad dense index '{dense}'")))?;
        entries.push((raw.to_owned(), dense));
    }
    entries.sort_by_key(|&(_, dense)| dense);
    let mut map = IdMap::new();
    for (pos, (raw, dense)) in entries.iter().enumerate() {
        if *dense as usize != pos {
            return Err(parse_err(
                path,
                pos + 1,
                format!("dense indices must cover 0..len once; saw {dense} at position {pos}"),
            ));
        }
        map.intern(raw);
    }
    Ok(map)
}

/// Genre metadata for one item.
#[derive(Debug, Clone)]
pub struct GenreEntry {
    pub title: String,
    pub genres: Vec<String>,
}

/// Item genre metadata keyed by raw item ID.
#[derive(Debug, Clone, Default)]
pub struct GenreTable {
    entries: HashMap<String, GenreEntry>,
}

impl GenreTable {
    pub fn get(&self, raw_item: &str) -> Option<&GenreEntry> {
        self.entries.get(raw_item)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Loads genre metadata: lines `movieId::title::genre1|genre2|...`.
pub fn load_genres(path: impl AsRef<Path>) -> Result<GenreTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 '::' fields, got {}", fields.len()),
            ));
        }
        let genres: Vec<String> = fields[2]
            .split('|')
            .map(|g| g.trim().to_owned())
            .filter(|g| !g.is_empty())
            .collect();
        if genres.is_empty() {
            return Err(parse_err(path, line_no, "item has no genre tags"));
        }
        entries.insert(
            fields[0].trim().to_owned(),
            GenreEntry { title: fields[1].trim().to_owned(), genres },
        );
    }
    Ok(GenreTable { entries })
}

/// Train/test partitioning scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Hold out `fraction` of interactions as the test set.
    Holdout { fraction: f64, seed: u64 },
    /// Test on fold `fold` of `k` equal shuffled folds.
    KFold { k: usize, fold: usize, seed: u64 },
}

fn shuffled_positions(d: usize, seed: u64) -> Vec<u32> {
    let mut positions: Vec<u32> = (0..d as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positions.shuffle(&mut rng);
    positions
}

/// Splits a store into disjoint, exhaustive (train, test) parts.
/// Deterministic for a given seed; both parts keep the source file's
/// interaction order, so a split store still replays chronologically.
pub fn split_train_test(
    store: &InteractionStore,
    spec: SplitSpec,
) -> Result<(InteractionStore, InteractionStore)> {
    let d = store.len();
    match spec {
        SplitSpec::Holdout { fraction, seed } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(CelError::Config(format!(
                    "holdout fraction must be in (0,1), got {fraction}"
                )));
            }
            if d < 2 {
                return Err(CelError::Config(format!(
                    "cannot hold out from {d} interaction(s)"
                )));
            }
            let positions = shuffled_positions(d, seed);
            let test_len = ((d as f64 * fraction).round() as usize).clamp(1, d - 1);
            let (test, train) = positions.split_at(test_len);
            let mut train = train.to_vec();
            let mut test = test.to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Ok((store.subset(&train), store.subset(&test)))
        }
        SplitSpec::KFold { k, fold, seed } => {
            if k < 2 {
                return Err(CelError::Config(format!("k-fold needs k >= 2, got {k}")));
            }
            if fold >= k {
                return Err(CelError::Config(format!("fold {fold} out of range for k={k}")));
            }
            if d < k {
                return Err(CelError::Config(format!("{d} interaction(s) cannot fill {k} folds")));
            }
            let positions = shuffled_positions(d, seed);
            let lo = fold * d / k;
            let hi = (fold + 1) * d / k;
            let mut test: Vec<u32> = positions[lo..hi].to_vec();
            let mut train: Vec<u32> =
                positions[..lo].iter().chain(&positions[hi..]).copied().collect();
            train.sort_unstable();
            test.sort_unstable();
            Ok((store.subset(&train), store.subset(&test)))
        }
    }
}

/// All `k` cross-validation (train, test) pairs for one seed.
pub fn kfold_splits(
    store: &InteractionStore,
    k: usize,
    seed: u64,
) -> Result<Vec<(InteractionStore, InteractionStore)>> {
    (0..k)
        .map(|fold| split_train_test(store, SplitSpec::KFold { k, fold, seed }))
        .collect()
}

/// Per-entity ring buffers of the latest `capacity` interactions, for
/// online training. Buffers grow lazily as new entity indices appear.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    next_seq: u64,
    per_user: Vec<VecDeque<(u64, Interaction)>>,
    per_item: Vec<VecDeque<(u64, Interaction)>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, next_seq: 0, per_user: Vec::new(), per_item: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn push_ring(ring: &mut VecDeque<(u64, Interaction)>, capacity: usize, entry: (u64, Interaction)) {
        if ring.len() == capacity {
            ring.pop_front();
        }
        ring.push_back(entry);
    }

    /// Pushes a batch; every touched entity ends up holding its latest
    /// `capacity` interactions in arrival order.
    pub fn push(&mut self, batch: &[Interaction]) {
        for it in batch {
            let u = it.user as usize;
            let j = it.item as usize;
            if u >= self.per_user.len() {
                self.per_user.resize_with(u + 1, VecDeque::new);
            }
            if j >= self.per_item.len() {
                self.per_item.resize_with(j + 1, VecDeque::new);
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            Self::push_ring(&mut self.per_user[u], self.capacity, (seq, *it));
            Self::push_ring(&mut self.per_item[j], self.capacity, (seq, *it));
        }
    }

    pub fn user_buffer(&self, u: u32) -> impl Iterator<Item = &Interaction> {
        self.per_user
            .get(u as usize)
            .into_iter()
            .flat_map(|ring| ring.iter().map(|(_, it)| it))
    }

    pub fn item_buffer(&self, j: u32) -> impl Iterator<Item = &Interaction> {
        self.per_item
            .get(j as usize)
            .into_iter()
            .flat_map(|ring| ring.iter().map(|(_, it)| it))
    }

    /// Union of the buffered interactions of every entity touched by
    /// `batch`, deduplicated (an interaction buffered on both its user and
    /// its item sides is counted once) and ordered by arrival.
    pub fn batch_union(&self, batch: &[Interaction]) -> BatchView {
        let mut users: Vec<u32> = batch.iter().map(|it| it.user).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<u32> = batch.iter().map(|it| it.item).collect();
        items.sort_unstable();
        items.dedup();

        let mut tagged: Vec<(u64, Interaction)> = Vec::new();
        for &u in &users {
            if let Some(ring) = self.per_user.get(u as usize) {
                tagged.extend(ring.iter().copied());
            }
        }
        for &j in &items {
            if let Some(ring) = self.per_item.get(j as usize) {
                tagged.extend(ring.iter().copied());
            }
        }
        tagged.sort_unstable_by_key(|(seq, _)| *seq);
        tagged.dedup_by_key(|(seq, _)| *seq);
        let interactions: Vec<Interaction> = tagged.into_iter().map(|(_, it)| it).collect();
        BatchView::build(interactions)
    }
}

/// Lightweight indexed view over a small interaction set (a replay-buffer
/// union); the online analogue of [`InteractionStore`]'s indexes.
#[derive(Debug, Clone)]
pub struct BatchView {
    interactions: Vec<Interaction>,
    users: Vec<u32>,
    items: Vec<u32>,
    per_user: HashMap<u32, Vec<u32>>,
    per_item: HashMap<u32, Vec<u32>>,
}

impl BatchView {
    pub fn build(interactions: Vec<Interaction>) -> Self {
        let mut per_user: HashMap<u32, Vec<u32>> = HashMap::new();
        let mut per_item: HashMap<u32, Vec<u32>> = HashMap::new();
        for (pos, it) in interactions.iter().enumerate() {
            per_user.entry(it.user).or_default().push(pos as u32);
            per_item.entry(it.item).or_default().push(pos as u32);
        }
        let mut users: Vec<u32> = per_user.keys().copied().collect();
        users.sort_unstable();
        let mut items: Vec<u32> = per_item.keys().copied().collect();
        items.sort_unstable();
        BatchView { interactions, users, items, per_user, per_item }
    }
}

const NO_POSITIONS: &[u32] = &[];

/// Read-only data access shared by offline (full-store) and online
/// (buffered-batch) training paths.
#[derive(Debug, Clone, Copy)]
pub enum DataView<'a> {
    Full(&'a InteractionStore),
    Batch(&'a BatchView),
}

impl<'a> DataView<'a> {
    pub fn interactions(&self) -> &'a [Interaction] {
        match self {
            DataView::Full(s) => s.interactions(),
            DataView::Batch(b) => &b.interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions().len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions().is_empty()
    }

    pub fn user_positions(&self, u: u32) -> &'a [u32] {
        match self {
            DataView::Full(s) => {
                if (u as usize) < s.n_users {
                    s.user_positions(u)
                } else {
                    NO_POSITIONS
                }
            }
            DataView::Batch(b) => b.per_user.get(&u).map(|v| v.as_slice()).unwrap_or(NO_POSITIONS),
        }
    }

    pub fn item_positions(&self, j: u32) -> &'a [u32] {
        match self {
            DataView::Full(s) => {
                if (j as usize) < s.n_items {
                    s.item_positions(j)
                } else {
                    NO_POSITIONS
                }
            }
            DataView::Batch(b) => b.per_item.get(&j).map(|v| v.as_slice()).unwrap_or(NO_POSITIONS),
        }
    }

    /// Users with at least one interaction in the view, ascending.
    pub fn active_users(&self) -> Vec<u32> {
        match self {
            DataView::Full(s) => {
                (0..s.n_users as u32).filter(|&u| !s.user_positions(u).is_empty()).collect()
            }
            DataView::Batch(b) => b.users.clone(),
        }
    }

    /// Items with at least one interaction in the view, ascending.
    pub fn active_items(&self) -> Vec<u32> {
        match self {
            DataView::Full(s) => {
                (0..s.n_items as u32).filter(|&j| !s.item_positions(j).is_empty()).collect()
            }
            DataView::Batch(b) => b.items.clone(),
        }
    }
}
