//! Leave-one-out ranking evaluation with Recall@k and NDCG@k.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_fixed_length, ActivityBucket, Split, UserSplit, PAD};
use crate::error::{Error, Result};
use crate::model::{score_all, user_representation, Recommender};

/// 1-based position of `target` in `ranked`.
fn rank_in(ranked: &[usize], target: usize) -> Result<usize> {
    let mut seen = HashSet::with_capacity(ranked.len());
    let mut rank = None;
    for (i, &v) in ranked.iter().enumerate() {
        if !seen.insert(v) {
            return Err(Error::Contract(format!("item {v} ranked twice")));
        }
        if v == target && rank.is_none() {
            rank = Some(i + 1);
        }
    }
    rank.ok_or_else(|| Error::Contract(format!("target {target} is not among the candidates")))
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

pub fn recall_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1 when the single ground-truth item is within the top `k`.
pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(recall_from_rank(rank_in(ranked, target)?, k))
}

/// `1 / log₂(rank + 1)` when the ground truth is within the top `k`.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(ndcg_from_rank(rank_in(ranked, target)?, k))
}

/// Rank of `target` among `candidates` when sorted by descending score,
/// ties broken by ascending id.
pub fn rank_among(scores: &[f64], target: usize, candidates: impl IntoIterator<Item = usize>) -> usize {
    let ts = scores[target];
    1 + candidates
        .into_iter()
        .filter(|&v| v != target)
        .filter(|&v| scores[v] > ts || (scores[v] == ts && v < target))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Val,
    Test,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(EvalMode::Val),
            "test" => Ok(EvalMode::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Which items the target is ranked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Protocol {
    /// Every catalog item the user has not already seen.
    Full,
    /// The target plus this many unseen items drawn uniformly.
    Sampled { negatives: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub protocol: Protocol,
    /// Seeds the negative draw of the sampled protocol.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            protocol: Protocol::Full,
            seed: 0,
        }
    }
}

/// Input history, target and excluded (already seen) items for one user.
fn query(user: &UserSplit, mode: EvalMode) -> (Vec<usize>, usize, HashSet<usize>) {
    let input = match mode {
        EvalMode::Val => user.train.clone(),
        EvalMode::Test => user.test_input(),
    };
    let target = match mode {
        EvalMode::Val => user.val,
        EvalMode::Test => user.test,
    };
    let mut seen: HashSet<usize> = input.iter().copied().collect();
    seen.insert(PAD);
    // A repeat of an earlier item is still a valid target.
    seen.remove(&target);
    (input, target, seen)
}

/// Rank of the held-out item for every user, in split order.
pub fn rank_users<M: Recommender + ?Sized>(
    model: &M,
    split: &Split,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<Vec<(usize, usize)>> {
    let n = model.config().n;
    split
        .users
        .par_iter()
        .map(|user| {
            let (input, target, seen) = query(user, mode);
            let fs = to_fixed_length(&input, n)?;
            let rep = user_representation(model, &fs, user.uid)?;
            let scores = score_all(model, &rep);
            if target >= scores.len() {
                return Err(Error::Index(format!("target item {target} out of range")));
            }
            let rank = match opts.protocol {
                Protocol::Full => rank_among(&scores, target, (1..scores.len()).filter(|v| !seen.contains(v))),
                Protocol::Sampled { negatives } => {
                    let mut pool: Vec<usize> = (1..scores.len())
                        .filter(|v| *v != target && !seen.contains(v))
                        .collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (user.uid as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    pool.shuffle(&mut rng);
                    pool.truncate(negatives);
                    rank_among(&scores, target, pool)
                }
            };
            Ok((user.uid, rank))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub label: String,
    pub users: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub protocol: Protocol,
    pub users: usize,
    pub overall: BTreeMap<String, f64>,
    pub buckets: Vec<BucketMetrics>,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.overall.get(&format!("recall@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.overall.get(&format!("ndcg@{k}")).copied()
    }
}

fn aggregate(ranks: &[usize], ks: &[usize]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let count = ranks.len().max(1) as f64;
    for &k in ks {
        let recall: f64 = ranks.iter().map(|&r| recall_from_rank(r, k)).sum();
        let ndcg: f64 = ranks.iter().map(|&r| ndcg_from_rank(r, k)).sum();
        out.insert(format!("recall@{k}"), recall / count);
        out.insert(format!("ndcg@{k}"), ndcg / count);
    }
    out
}

/// Mean metrics overall and, when buckets are given, per bucket.
pub fn evaluate<M: Recommender + ?Sized>(
    model: &M,
    split: &Split,
    mode: EvalMode,
    opts: &EvalOptions,
    buckets: Option<&[ActivityBucket]>,
) -> Result<MetricReport> {
    for &k in &opts.ks {
        check_k(k)?;
    }
    let ranked = rank_users(model, split, mode, opts)?;
    let ranks: Vec<usize> = ranked.iter().map(|&(_, r)| r).collect();
    let by_uid: BTreeMap<usize, usize> = ranked.iter().copied().collect();
    let bucket_metrics = buckets
        .unwrap_or_default()
        .iter()
        .map(|b| {
            let rs: Vec<usize> = b.users.iter().filter_map(|u| by_uid.get(u).copied()).collect();
            BucketMetrics {
                label: b.label.clone(),
                users: rs.len(),
                metrics: aggregate(&rs, &opts.ks),
            }
        })
        .collect();
    Ok(MetricReport {
        mode,
        protocol: opts.protocol,
        users: ranks.len(),
        overall: aggregate(&ranks, &opts.ks),
        buckets: bucket_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_rank() {
        let ranked = [7, 3, 9];
        assert_eq!(recall_at_k(&ranked, 7, 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 7, 10).unwrap(), 1.0);
    }

    #[test]
    fn second_place() {
        let ranked = [3, 7, 9];
        assert_eq!(recall_at_k(&ranked, 7, 10).unwrap(), 1.0);
        let ndcg = ndcg_at_k(&ranked, 7, 10).unwrap();
        assert_eq!(ndcg, 1.0 / 3f64.log2());
        assert!((ndcg - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn eleventh_place_misses_top_ten() {
        let ranked: Vec<usize> = (1..=11).collect();
        assert_eq!(recall_at_k(&ranked, 11, 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&ranked, 11, 10).unwrap(), 0.0);
    }

    #[test]
    fn metric_contract_errors() {
        assert!(matches!(recall_at_k(&[1, 2], 3, 5), Err(Error::Contract(_))));
        assert!(matches!(recall_at_k(&[1, 1, 2], 2, 5), Err(Error::Contract(_))));
        assert!(recall_at_k(&[1], 1, 0).is_err());
    }

    #[test]
    fn rank_among_breaks_ties_by_id() {
        let scores = [0.0, 1.0, 2.0, 1.0, 5.0];
        assert_eq!(rank_among(&scores, 3, 1..5), 4);
        assert_eq!(rank_among(&scores, 1, 1..5), 3);
        assert_eq!(rank_among(&scores, 4, 1..5), 1);
    }
}
