//! Interaction logs, preprocessing, leave-one-out splits and fixed-length
//! input windows.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item id reserved for padding.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    /// Lines that could not be parsed and were skipped.
    pub malformed: usize,
    /// Repeated (user, item, timestamp) triples that were dropped.
    pub duplicates: usize,
}

impl InteractionLog {
    /// Builds a log from records, dropping repeated (user, item, timestamp)
    /// triples and keeping the first occurrence.
    pub fn from_records(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut seen = HashSet::new();
        let mut log = InteractionLog::default();
        for r in records {
            if seen.insert((r.user.clone(), r.item.clone(), r.timestamp)) {
                log.records.push(r);
            } else {
                log.duplicates += 1;
            }
        }
        log
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Largest tolerated share of malformed lines.
    pub max_malformed_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_malformed_fraction: 0.01,
        }
    }
}

/// Reads a `user\titem\trating\ttimestamp` file.
pub fn load_tsv(path: &Path, opts: LoadOptions) -> Result<InteractionLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(std::io::BufReader::new(file), opts)
        .map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
}

pub fn parse_tsv(reader: impl BufRead, opts: LoadOptions) -> Result<InteractionLog> {
    let mut records = Vec::new();
    let mut malformed = 0usize;
    let mut lines = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        // A first line whose rating column is not numeric is a header.
        if idx == 0 && fields.len() >= 4 && fields[2].trim().parse::<f64>().is_err() {
            continue;
        }
        lines += 1;
        match parse_fields(&fields) {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    if lines > 0 && malformed as f64 > opts.max_malformed_fraction * lines as f64 {
        return Err(Error::Ingestion(format!(
            "{malformed} of {lines} lines are malformed"
        )));
    }
    let mut log = InteractionLog::from_records(records);
    log.malformed = malformed;
    Ok(log)
}

fn parse_fields(fields: &[&str]) -> Option<Interaction> {
    if fields.len() < 4 {
        return None;
    }
    let user = fields[0].trim();
    let item = fields[1].trim();
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let rating: f64 = fields[2].trim().parse().ok()?;
    if !rating.is_finite() {
        return None;
    }
    let timestamp: i64 = fields[3].trim().parse().ok()?;
    Some(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    pub min_user: usize,
    pub min_item: usize,
    pub rating_threshold: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            min_user: 5,
            min_item: 5,
            rating_threshold: 4.0,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_user < 1 || self.min_item < 1 {
            return Err(Error::Config("count thresholds must be at least 1".into()));
        }
        if !self.rating_threshold.is_finite() {
            return Err(Error::Config("rating threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Users and items with dense ids plus per-user chronological histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `users[uid]` is the original user id.
    pub users: Vec<String>,
    /// `items[vid]` is the original item id; `items[0]` is the padding item.
    pub items: Vec<String>,
    /// `sequences[uid]` lists item ids oldest first.
    pub sequences: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Catalog size including the padding item.
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Keeps positive records, then removes users and items below the count
/// thresholds until no violator is left.
pub fn filter_log(log: &InteractionLog, cfg: &PrepConfig) -> Result<InteractionLog> {
    cfg.validate()?;
    let mut kept: Vec<&Interaction> = log
        .records
        .iter()
        .filter(|r| r.rating >= cfg.rating_threshold)
        .collect();
    loop {
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *per_user.entry(&r.user).or_default() += 1;
            *per_item.entry(&r.item).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|r| per_user[r.user.as_str()] >= cfg.min_user && per_item[r.item.as_str()] >= cfg.min_item);
        if kept.len() == before {
            break;
        }
    }
    Ok(InteractionLog {
        records: kept.into_iter().cloned().collect(),
        malformed: 0,
        duplicates: 0,
    })
}

/// Filters the log and reindexes it densely. Ids are assigned in order of
/// first appearance; histories are ordered by timestamp with ties kept in
/// input order.
pub fn preprocess(log: &InteractionLog, cfg: &PrepConfig) -> Result<Dataset> {
    let filtered = filter_log(log, cfg)?;
    if filtered.is_empty() {
        let positives = log
            .records
            .iter()
            .filter(|r| r.rating >= cfg.rating_threshold)
            .count();
        return Err(Error::Preprocessing(format!(
            "nothing left: {} records in, {positives} at or above rating {}, 0 after count thresholds (users >= {}, items >= {})",
            log.len(),
            cfg.rating_threshold,
            cfg.min_user,
            cfg.min_item
        )));
    }
    let mut users: Vec<String> = Vec::new();
    let mut items: Vec<String> = vec!["<pad>".to_string()];
    let mut uid_of: HashMap<&str, usize> = HashMap::new();
    let mut vid_of: HashMap<&str, usize> = HashMap::new();
    let mut timed: Vec<Vec<(i64, usize)>> = Vec::new();
    for r in &filtered.records {
        let uid = *uid_of.entry(&r.user).or_insert_with(|| {
            users.push(r.user.clone());
            timed.push(Vec::new());
            users.len() - 1
        });
        let vid = *vid_of.entry(&r.item).or_insert_with(|| {
            items.push(r.item.clone());
            items.len() - 1
        });
        timed[uid].push((r.timestamp, vid));
    }
    let sequences = timed
        .into_iter()
        .map(|mut seq| {
            // stable: equal timestamps keep input order
            seq.sort_by_key(|&(ts, _)| ts);
            seq.into_iter().map(|(_, v)| v).collect()
        })
        .collect();
    Ok(Dataset {
        users,
        items,
        sequences,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub uid: usize,
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

impl UserSplit {
    /// History visible when predicting the test item.
    pub fn test_input(&self) -> Vec<usize> {
        let mut seq = self.train.clone();
        seq.push(self.val);
        seq
    }
}

/// Leave-one-out split: last item for test, second last for validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions.
    pub excluded: Vec<usize>,
}

pub fn split_leave_one_out(ds: &Dataset) -> Split {
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    for (uid, seq) in ds.sequences.iter().enumerate() {
        if seq.len() < 3 {
            excluded.push(uid);
            continue;
        }
        let n = seq.len();
        users.push(UserSplit {
            uid,
            train: seq[..n - 2].to_vec(),
            val: seq[n - 2],
            test: seq[n - 1],
        });
    }
    Split { users, excluded }
}

/// The last `n` items of a history, left-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedSequence {
    pub items: Vec<usize>,
    pub pad_count: usize,
}

impl FixedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// False for an all-padding window, which cannot be used for training.
    pub fn is_valid(&self) -> bool {
        self.pad_count < self.items.len()
    }

    /// Non-padding items, oldest first.
    pub fn real_items(&self) -> &[usize] {
        &self.items[self.pad_count..]
    }
}

pub fn to_fixed_length(seq: &[usize], n: usize) -> Result<FixedSequence> {
    if n == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    if seq.contains(&PAD) {
        return Err(Error::Contract("padding item inside a history".into()));
    }
    let take = seq.len().min(n);
    let pad_count = n - take;
    let mut items = vec![PAD; pad_count];
    items.extend_from_slice(&seq[seq.len() - take..]);
    Ok(FixedSequence { items, pad_count })
}

pub const NUM_BUCKETS: usize = 10;

/// Users grouped by training-history length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityBucket {
    pub label: String,
    pub users: Vec<usize>,
}

fn bucket_label(i: usize) -> String {
    match i {
        0 => "top-10%".to_string(),
        1..=4 => format!("top-{}-{}%", i * 10, (i + 1) * 10),
        9 => "bottom-10%".to_string(),
        _ => {
            let from_bottom = NUM_BUCKETS - i;
            format!("bottom-{}-{}%", (from_bottom - 1) * 10, from_bottom * 10)
        }
    }
}

/// Ten activity buckets, most active first. Users are ranked by training
/// length (descending, ties by uid); bucket `i` holds ranks
/// `floor(i·N/10) .. floor((i+1)·N/10)`.
pub fn activity_buckets(split: &Split) -> Result<Vec<ActivityBucket>> {
    let total = split.users.len();
    if total < NUM_BUCKETS {
        return Err(Error::Config(format!(
            "activity buckets need at least {NUM_BUCKETS} users, got {total}"
        )));
    }
    let mut ranked: Vec<(usize, usize)> = split.users.iter().map(|u| (u.train.len(), u.uid)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok((0..NUM_BUCKETS)
        .map(|i| {
            let lo = i * total / NUM_BUCKETS;
            let hi = (i + 1) * total / NUM_BUCKETS;
            ActivityBucket {
                label: bucket_label(i),
                users: ranked[lo..hi].iter().map(|&(_, uid)| uid).collect(),
            }
        })
        .collect())
}
