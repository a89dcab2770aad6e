//! Interaction logs: ingestion, leave-one-out splitting and triplet sampling.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// One line of a raw interaction log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: Option<i64>,
}

impl RawInteraction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: Option<i64>) -> Self {
        RawInteraction {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Parses `user item [timestamp]` lines. Blank lines and lines starting with
/// `#` are skipped.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<Vec<RawInteraction>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let timestamp = match fields.len() {
            2 => None,
            3 => Some(fields[2].parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid timestamp {:?}", fields[2]),
            })?),
            n => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 2 or 3 fields, found {n}"),
                })
            }
        };
        records.push(RawInteraction::new(fields[0], fields[1], timestamp));
    }
    Ok(records)
}

pub fn read_interactions(path: impl AsRef<Path>) -> Result<Vec<RawInteraction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file))
}

/// Preprocessing applied by [`ingest`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Items with fewer interactions are dropped (applied first).
    pub min_item_interactions: usize,
    /// Users with fewer interactions are dropped (applied after the item filter).
    pub min_user_interactions: usize,
    /// Collapse repeated (user, item) pairs onto the earliest one. When off,
    /// a repeated pair is an error.
    pub merge_repeats: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            min_item_interactions: 0,
            min_user_interactions: 0,
            merge_repeats: true,
        }
    }
}

/// A single deduplicated interaction with dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: Option<i64>,
}

/// Deduplicated user-item interactions over dense 0-based indices.
///
/// The interaction log keeps ingestion order; per-user positive sets are kept
/// sorted for membership queries.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    log: Vec<Interaction>,
    positives: Vec<Vec<u32>>,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
    timestamped: bool,
}

impl InteractionDataset {
    /// Builds a dataset from an already indexed interaction log.
    ///
    /// Fails on out-of-range indices, duplicate pairs, mixed timestamp
    /// presence, or token tables of the wrong length.
    pub fn from_parts(
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
        log: Vec<Interaction>,
    ) -> Result<Self> {
        let n_users = user_tokens.len();
        let n_items = item_tokens.len();
        let timestamped = log.first().is_some_and(|x| x.timestamp.is_some());
        let mut positives = vec![Vec::new(); n_users];
        for x in &log {
            if x.user as usize >= n_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: x.user as usize,
                    size: n_users,
                });
            }
            if x.item as usize >= n_items {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: x.item as usize,
                    size: n_items,
                });
            }
            if x.timestamp.is_some() != timestamped {
                return Err(Error::Contract(
                    "timestamps must be present on every interaction or on none".into(),
                ));
            }
            positives[x.user as usize].push(x.item);
        }
        for (u, items) in positives.iter_mut().enumerate() {
            items.sort_unstable();
            if let Some(w) = items.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicateInteraction {
                    user: user_tokens[u].clone(),
                    item: item_tokens[w[0] as usize].clone(),
                });
            }
        }
        Ok(InteractionDataset {
            n_users,
            n_items,
            log,
            positives,
            user_tokens,
            item_tokens,
            timestamped,
        })
    }

    /// Untimestamped dataset whose tokens are the decimal indices.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        let log = pairs
            .iter()
            .map(|&(user, item)| Interaction {
                user,
                item,
                timestamp: None,
            })
            .collect();
        Self::from_parts(index_tokens(n_users), index_tokens(n_items), log)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_interactions(&self) -> usize {
        self.log.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.log
    }

    /// Sorted positive items of `user`.
    pub fn positives(&self, user: u32) -> &[u32] {
        &self.positives[user as usize]
    }

    pub fn is_positive(&self, user: u32, item: u32) -> bool {
        self.positives[user as usize].binary_search(&item).is_ok()
    }

    pub fn has_timestamps(&self) -> bool {
        self.timestamped
    }

    /// Timestamp of the (user, item) interaction, if present. Linear in the
    /// log size.
    pub fn timestamp(&self, user: u32, item: u32) -> Option<i64> {
        self.log
            .iter()
            .find(|x| x.user == user && x.item == item)
            .and_then(|x| x.timestamp)
    }

    pub fn user_token(&self, user: u32) -> &str {
        &self.user_tokens[user as usize]
    }

    pub fn item_token(&self, item: u32) -> &str {
        &self.item_tokens[item as usize]
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    /// Number of interactions per item.
    pub fn item_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_items];
        for x in &self.log {
            counts[x.item as usize] += 1;
        }
        counts
    }

    /// Fraction of the user-item matrix that is unobserved.
    pub fn sparsity(&self) -> f64 {
        let cells = self.n_users as f64 * self.n_items as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.log.len() as f64 / cells
    }

    /// The dataset written back as raw records, in ingestion order.
    pub fn to_records(&self) -> Vec<RawInteraction> {
        self.log
            .iter()
            .map(|x| {
                RawInteraction::new(
                    self.user_token(x.user),
                    self.item_token(x.item),
                    x.timestamp,
                )
            })
            .collect()
    }

    /// Uniform draw from the items `user` has not interacted with.
    pub fn sample_negative(&self, user: u32, rng: &mut Rng) -> Result<u32> {
        let positives = self.positives(user);
        if positives.len() >= self.n_items {
            return Err(Error::NoNegative { user });
        }
        loop {
            let j = rng.random_range(0..self.n_items as u32);
            if positives.binary_search(&j).is_err() {
                return Ok(j);
            }
        }
    }

    /// Draws a training triplet. With `user = None` the (user, positive) pair
    /// is uniform over all interactions; otherwise uniform over that user's
    /// positives.
    pub fn sample_triplet(&self, user: Option<u32>, rng: &mut Rng) -> Result<Triplet> {
        let (user, pos) = match user {
            None => {
                if self.log.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let x = self.log[rng.random_range(0..self.log.len())];
                (x.user, x.item)
            }
            Some(u) => {
                if u as usize >= self.n_users {
                    return Err(Error::IndexOutOfRange {
                        what: "user",
                        index: u as usize,
                        size: self.n_users,
                    });
                }
                let positives = self.positives(u);
                if positives.is_empty() {
                    return Err(Error::Contract(format!("user {u} has no positives")));
                }
                (u, positives[rng.random_range(0..positives.len())])
            }
        };
        let neg = self.sample_negative(user, rng)?;
        Ok(Triplet { user, pos, neg })
    }

    /// One triplet per observed interaction, pairing it with a single sampled
    /// negative. Order follows the interaction log.
    pub fn sample_reduced_set(&self, rng: &mut Rng) -> Result<Vec<Triplet>> {
        self.log
            .iter()
            .map(|x| {
                Ok(Triplet {
                    user: x.user,
                    pos: x.item,
                    neg: self.sample_negative(x.user, rng)?,
                })
            })
            .collect()
    }
}

fn index_tokens(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Builds a dataset from raw records: merges repeats onto the earliest
/// timestamp (first occurrence when untimestamped), applies the item filter
/// and then the user filter once each, and assigns dense indices in
/// first-seen order.
pub fn ingest(records: &[RawInteraction], options: &IngestOptions) -> Result<InteractionDataset> {
    let timestamped = records.first().is_some_and(|r| r.timestamp.is_some());
    let mut kept: Vec<RawInteraction> = Vec::with_capacity(records.len());
    let mut seen: HashMap<(&str, &str), usize> = HashMap::with_capacity(records.len());
    for (idx, record) in records.iter().enumerate() {
        if record.user.is_empty() || record.item.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "empty user or item token".into(),
            });
        }
        if record.timestamp.is_some() != timestamped {
            return Err(Error::Parse {
                line: idx + 1,
                message: "timestamps must be present on every record or on none".into(),
            });
        }
        match seen.entry((record.user.as_str(), record.item.as_str())) {
            Entry::Occupied(slot) => {
                if !options.merge_repeats {
                    return Err(Error::DuplicateInteraction {
                        user: record.user.clone(),
                        item: record.item.clone(),
                    });
                }
                let first = &mut kept[*slot.get()];
                if let (Some(old), Some(new)) = (first.timestamp, record.timestamp) {
                    if new < old {
                        first.timestamp = Some(new);
                    }
                }
            }
            Entry::Vacant(slot) => {
                slot.insert(kept.len());
                kept.push(record.clone());
            }
        }
    }
    drop(seen);

    let mut item_counts: HashMap<&str, usize> = HashMap::new();
    for r in &kept {
        *item_counts.entry(r.item.as_str()).or_default() += 1;
    }
    let mut user_counts: HashMap<&str, usize> = HashMap::new();
    for r in &kept {
        if item_counts[r.item.as_str()] >= options.min_item_interactions {
            *user_counts.entry(r.user.as_str()).or_default() += 1;
        }
    }
    let retained = |r: &RawInteraction| {
        item_counts[r.item.as_str()] >= options.min_item_interactions
            && user_counts
                .get(r.user.as_str())
                .is_some_and(|&c| c >= options.min_user_interactions)
    };

    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut log = Vec::new();
    for r in kept.iter().filter(|r| retained(r)) {
        let user = *user_index.entry(r.user.as_str()).or_insert_with(|| {
            user_tokens.push(r.user.clone());
            (user_tokens.len() - 1) as u32
        });
        let item = *item_index.entry(r.item.as_str()).or_insert_with(|| {
            item_tokens.push(r.item.clone());
            (item_tokens.len() - 1) as u32
        });
        log.push(Interaction {
            user,
            item,
            timestamp: r.timestamp,
        });
    }
    if log.is_empty() {
        return Err(Error::EmptyDataset);
    }
    InteractionDataset::from_parts(user_tokens, item_tokens, log)
}

/// (user, positive, negative) training instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

impl Triplet {
    pub fn new(user: u32, pos: u32, neg: u32) -> Self {
        Triplet { user, pos, neg }
    }
}

/// An interaction removed from training for validation or testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeldOut {
    pub item: u32,
    pub timestamp: Option<i64>,
}

/// Counts reported by [`split_leave_one_out`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitSummary {
    pub test_users: usize,
    pub validation_users: usize,
    /// Users with fewer than two interactions.
    pub excluded_from_test: usize,
    /// Users with a test item but fewer than three interactions (only counted
    /// when validation was requested).
    pub excluded_from_validation: usize,
}

/// Leave-one-out split. Train keeps every user and item of the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionDataset,
    pub validation: Vec<Option<HeldOut>>,
    pub test: Vec<Option<HeldOut>>,
    pub summary: SplitSummary,
}

/// Which held-out item an evaluation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

impl SplitDataset {
    /// Everything in training, nothing held out.
    pub fn without_holdout(train: InteractionDataset) -> Self {
        let n = train.n_users();
        SplitDataset {
            train,
            validation: vec![None; n],
            test: vec![None; n],
            summary: SplitSummary {
                excluded_from_test: n,
                ..SplitSummary::default()
            },
        }
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    pub fn held_out(&self, target: Target) -> &[Option<HeldOut>] {
        match target {
            Target::Validation => &self.validation,
            Target::Test => &self.test,
        }
    }

    pub fn test_item(&self, user: u32) -> Option<u32> {
        self.test[user as usize].map(|h| h.item)
    }

    pub fn validation_item(&self, user: u32) -> Option<u32> {
        self.validation[user as usize].map(|h| h.item)
    }

    pub fn has_validation(&self) -> bool {
        self.validation.iter().any(Option::is_some)
    }
}

/// Holds out one interaction per user for testing (the latest one, or a
/// seeded uniform pick without timestamps) and optionally one more, uniformly
/// drawn from the rest, for validation.
///
/// Users with fewer than two interactions get no test item (fewer than three:
/// no validation item) and keep everything in training.
pub fn split_leave_one_out(
    data: &InteractionDataset,
    with_validation: bool,
    seed: u64,
) -> SplitDataset {
    let mut rng = rng::stream(seed, rng::SPLIT);
    let mut per_user: Vec<Vec<(u32, Option<i64>)>> = vec![Vec::new(); data.n_users()];
    for x in data.interactions() {
        per_user[x.user as usize].push((x.item, x.timestamp));
    }

    let mut summary = SplitSummary::default();
    let mut test = vec![None; data.n_users()];
    let mut validation = vec![None; data.n_users()];
    for (u, mut entries) in per_user.into_iter().enumerate() {
        if entries.len() < 2 {
            summary.excluded_from_test += 1;
            continue;
        }
        let picked = if data.has_timestamps() {
            // latest timestamp, ties to the larger item index
            (0..entries.len())
                .max_by_key(|&k| (entries[k].1, entries[k].0))
                .expect("non-empty")
        } else {
            rng.random_range(0..entries.len())
        };
        let (item, timestamp) = entries.swap_remove(picked);
        test[u] = Some(HeldOut { item, timestamp });
        summary.test_users += 1;

        if with_validation {
            if entries.len() < 2 {
                summary.excluded_from_validation += 1;
                continue;
            }
            // Deterministic order before the uniform draw.
            entries.sort_unstable();
            let (item, timestamp) = entries[rng.random_range(0..entries.len())];
            validation[u] = Some(HeldOut { item, timestamp });
            summary.validation_users += 1;
        }
    }

    let log = data
        .interactions()
        .iter()
        .filter(|x| {
            let u = x.user as usize;
            test[u].is_none_or(|h: HeldOut| h.item != x.item)
                && validation[u].is_none_or(|h: HeldOut| h.item != x.item)
        })
        .copied()
        .collect();
    let train = InteractionDataset::from_parts(
        data.user_tokens().to_vec(),
        data.item_tokens().to_vec(),
        log,
    )
    .expect("subset of a valid dataset");

    SplitDataset {
        train,
        validation,
        test,
        summary,
    }
}

/// Paths of the files making up a split on disk.
#[derive(Clone, Debug)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    pub user_map: PathBuf,
    pub item_map: PathBuf,
}

impl SplitFiles {
    pub fn new(prefix: impl AsRef<Path>) -> Self {
        let prefix = prefix.as_ref().as_os_str().to_owned();
        let with = |ext: &str| {
            let mut p = prefix.clone();
            p.push(ext);
            PathBuf::from(p)
        };
        SplitFiles {
            train: with(".train"),
            validation: with(".valid"),
            test: with(".test"),
            user_map: with(".user.map"),
            item_map: with(".item.map"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_line(out: &mut impl Write, path: &Path, user: u32, item: u32, ts: Option<i64>) -> Result<()> {
    match ts {
        Some(ts) => writeln!(out, "{user}\t{item}\t{ts}"),
        None => writeln!(out, "{user}\t{item}"),
    }
    .map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>.train`, `.valid`, `.test` (dense indices) plus
/// `<prefix>.user.map` and `.item.map` (`token index` lines).
pub fn write_split(split: &SplitDataset, prefix: impl AsRef<Path>) -> Result<SplitFiles> {
    let files = SplitFiles::new(prefix);

    let mut out = create(&files.train)?;
    for x in split.train.interactions() {
        write_line(&mut out, &files.train, x.user, x.item, x.timestamp)?;
    }
    out.flush().map_err(|e| Error::io(&files.train, e))?;

    for (path, held) in [(&files.validation, &split.validation), (&files.test, &split.test)] {
        let mut out = create(path)?;
        for (u, h) in held.iter().enumerate() {
            if let Some(h) = h {
                write_line(&mut out, path, u as u32, h.item, h.timestamp)?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))?;
    }

    for (path, tokens) in [
        (&files.user_map, split.train.user_tokens()),
        (&files.item_map, split.train.item_tokens()),
    ] {
        let mut out = create(path)?;
        for (idx, token) in tokens.iter().enumerate() {
            writeln!(out, "{token}\t{idx}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn read_map(path: &Path) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |message: String| Error::Parse {
            line: idx + 1,
            message: format!("{}: {message}", path.display()),
        };
        if fields.len() != 2 {
            return Err(bad(format!("expected `token index`, found {} fields", fields.len())));
        }
        let index: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("invalid index {:?}", fields[1])))?;
        if index != tokens.len() {
            return Err(bad(format!("expected index {}, found {index}", tokens.len())));
        }
        tokens.push(fields[0].to_string());
    }
    Ok(tokens)
}

fn read_indexed(path: &Path) -> Result<Vec<Interaction>> {
    let records = parse_interactions(open(path)?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(idx, r)| {
            let index = |token: &str| {
                token.parse::<u32>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("{}: expected an integer index, found {token:?}", path.display()),
                })
            };
            Ok(Interaction {
                user: index(&r.user)?,
                item: index(&r.item)?,
                timestamp: r.timestamp,
            })
        })
        .collect()
}

/// Reads a split written by [`write_split`].
pub fn read_split(prefix: impl AsRef<Path>) -> Result<SplitDataset> {
    let files = SplitFiles::new(prefix);
    let user_tokens = read_map(&files.user_map)?;
    let item_tokens = read_map(&files.item_map)?;
    let n_users = user_tokens.len();
    let n_items = item_tokens.len();
    let train = InteractionDataset::from_parts(user_tokens, item_tokens, read_indexed(&files.train)?)?;

    let mut summary = SplitSummary::default();
    let held = |path: &Path| -> Result<Vec<Option<HeldOut>>> {
        let mut out = vec![None; n_users];
        for x in read_indexed(path)? {
            if x.user as usize >= n_users || x.item as usize >= n_items {
                return Err(Error::Dimension(format!(
                    "{}: ({}, {}) outside {n_users} users x {n_items} items",
                    path.display(),
                    x.user,
                    x.item
                )));
            }
            if train.is_positive(x.user, x.item) {
                return Err(Error::Contract(format!(
                    "{}: held-out ({}, {}) also appears in training",
                    path.display(),
                    x.user,
                    x.item
                )));
            }
            out[x.user as usize] = Some(HeldOut {
                item: x.item,
                timestamp: x.timestamp,
            });
        }
        Ok(out)
    };
    let validation = held(&files.validation)?;
    let test = held(&files.test)?;
    summary.test_users = test.iter().flatten().count();
    summary.validation_users = validation.iter().flatten().count();
    summary.excluded_from_test = n_users - summary.test_users;
    Ok(SplitDataset {
        train,
        validation,
        test,
        summary,
    })
}
