//! Analytical probes: within-sequence embedding similarity per block,
//! entropy of the baseline's first-block attention, operation counts per
//! block, and forward-pass timing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_fixed_length, FixedSequence, Split, UserSplit};
use crate::error::{Error, Result};
use crate::model::{trace, user_representation, AnyModel, ModelConfig, ModelKind, Recommender};
use crate::tensor::{dot, Tensor};

/// Picks up to `sample_size` users by seeded shuffle, returned in split order.
pub fn sample_users(split: &Split, sample_size: usize, seed: u64) -> Vec<&UserSplit> {
    let mut idx: Vec<usize> = (0..split.users.len()).collect();
    if sample_size < idx.len() {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(sample_size);
        idx.sort_unstable();
    }
    idx.into_iter().map(|i| &split.users[i]).collect()
}

fn probe_window(user: &UserSplit, n: usize) -> Result<FixedSequence> {
    to_fixed_length(&user.test_input(), n)
}

/// Mean pairwise cosine similarity of the rows of `rows`. With
/// `include_diagonal` the mean runs over all `r²` ordered pairs. Pairs with
/// a zero-norm row count as 0; the second value is how many there were.
pub fn mean_pairwise_cosine(rows: &Tensor, include_diagonal: bool) -> (f64, usize) {
    let r = rows.rows();
    let norms: Vec<f64> = (0..r).map(|j| dot(rows.row_slice(j), rows.row_slice(j)).sqrt()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut zero = 0usize;
    for j in 0..r {
        for k in 0..r {
            if j == k && !include_diagonal {
                continue;
            }
            pairs += 1;
            if norms[j] == 0.0 || norms[k] == 0.0 {
                zero += 1;
                continue;
            }
            total += dot(rows.row_slice(j), rows.row_slice(k)) / (norms[j] * norms[k]);
        }
    }
    if pairs == 0 {
        return (0.0, zero);
    }
    (total / pairs as f64, zero)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingOptions {
    pub sample_size: usize,
    pub seed: u64,
    pub include_diagonal: bool,
}

impl Default for SmoothingOptions {
    fn default() -> Self {
        Self {
            sample_size: 1000,
            seed: 0,
            include_diagonal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingProfile {
    pub model: ModelKind,
    /// `a¹ … a^{n_b}`: mean over users of the within-window similarity of
    /// item embeddings after each block.
    pub per_block: Vec<f64>,
    pub users: usize,
    pub include_diagonal: bool,
    /// Pairs that involved a zero-norm row and were scored 0.
    pub zero_norm_pairs: usize,
}

pub fn smoothing_profile<M: Recommender + ?Sized>(
    model: &M,
    split: &Split,
    opts: &SmoothingOptions,
) -> Result<SmoothingProfile> {
    let users = sample_users(split, opts.sample_size, opts.seed);
    if users.is_empty() {
        return Err(Error::Probe("no users to probe".into()));
    }
    let blocks = model.config().blocks;
    let mut sums = vec![0.0; blocks];
    let mut zero_norm_pairs = 0;
    for user in &users {
        let tr = trace(model, &probe_window(user, model.config().n)?)?;
        for (m, items) in tr.item_states.iter().enumerate() {
            let (a, z) = mean_pairwise_cosine(items, opts.include_diagonal);
            sums[m] += a;
            zero_norm_pairs += z;
        }
    }
    let count = users.len() as f64;
    Ok(SmoothingProfile {
        model: model.kind(),
        per_block: sums.into_iter().map(|s| s / count).collect(),
        users: users.len(),
        include_diagonal: opts.include_diagonal,
        zero_norm_pairs,
    })
}

/// `−Σ p·ln p` with `0·ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Entropy sums over the real query rows of one causal attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EntropyTally {
    pub attention: f64,
    pub uniform: f64,
    pub positions: usize,
}

/// Tallies row entropies of an `n×n` map whose first `pad_count` positions
/// are padding. Row `j` is compared with the uniform distribution over its
/// visible support (the real positions up to and including `j`).
pub fn tally_map(map: &Tensor, pad_count: usize) -> Result<EntropyTally> {
    let mut tally = EntropyTally::default();
    for j in pad_count..map.rows() {
        let row = &map.row_slice(j)[..=j];
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Probe(format!("attention row {j} sums to {total}")));
        }
        tally.attention += entropy(row);
        tally.uniform += ((j + 1 - pad_count) as f64).ln();
        tally.positions += 1;
    }
    Ok(tally)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Nats.
    pub mean_attention_entropy: f64,
    pub mean_uniform_entropy: f64,
    pub information_gain: f64,
    pub mean_attention_entropy_bits: f64,
    pub mean_uniform_entropy_bits: f64,
    pub information_gain_bits: f64,
    pub users: usize,
    pub positions: usize,
}

impl EntropyReport {
    pub fn from_tally(t: EntropyTally, users: usize) -> Result<Self> {
        if t.positions == 0 {
            return Err(Error::Probe("no real positions to average over".into()));
        }
        let att = t.attention / t.positions as f64;
        let uni = t.uniform / t.positions as f64;
        let ln2 = std::f64::consts::LN_2;
        Ok(Self {
            mean_attention_entropy: att,
            mean_uniform_entropy: uni,
            information_gain: uni - att,
            mean_attention_entropy_bits: att / ln2,
            mean_uniform_entropy_bits: uni / ln2,
            information_gain_bits: (uni - att) / ln2,
            users,
            positions: t.positions,
        })
    }
}

/// Average entropy of the first block's head-averaged attention rows of a
/// baseline model, against uniform attention over the same supports.
pub fn attention_entropy<M: Recommender + ?Sized>(
    model: &M,
    split: &Split,
    sample_size: usize,
    seed: u64,
) -> Result<EntropyReport> {
    if model.kind() != ModelKind::Baseline {
        return Err(Error::Probe(
            "the entropy probe needs the self-attention baseline".into(),
        ));
    }
    let users = sample_users(split, sample_size, seed);
    let mut total = EntropyTally::default();
    for user in &users {
        let tr = trace(model, &probe_window(user, model.config().n)?)?;
        let t = tally_map(&tr.mean_attention(0), tr.pad_count)?;
        total.attention += t.attention;
        total.uniform += t.uniform;
        total.positions += t.positions;
    }
    EntropyReport::from_tally(total, users.len())
}

/// Per-block operation counts for window length `n` and width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub n: u64,
    pub d: u64,
    /// `6nd² + 2n²d + 2nd`.
    pub sa: u128,
    /// `2nd² + 4d² + 2nd + 2d`.
    pub star: u128,
    /// `4d²(n − 1) + 2d(n² − 1)`.
    pub diff: u128,
}

pub fn op_counts(n: u64, d: u64) -> Result<OpCounts> {
    if n == 0 || d == 0 {
        return Err(Error::Config("n and d must be at least 1".into()));
    }
    let (n128, d128) = (n as u128, d as u128);
    Ok(OpCounts {
        n,
        d,
        sa: 6 * n128 * d128 * d128 + 2 * n128 * n128 * d128 + 2 * n128 * d128,
        star: 2 * n128 * d128 * d128 + 4 * d128 * d128 + 2 * n128 * d128 + 2 * d128,
        diff: 4 * d128 * d128 * (n128 - 1) + 2 * d128 * (n128 * n128 - 1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n_grid: Vec<usize>,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Users encoded per timed repetition.
    pub users_per_rep: usize,
    pub catalog: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![64, 128, 256, 512],
            d: 64,
            blocks: 2,
            heads: 2,
            repetitions: 7,
            warmup: 2,
            users_per_rep: 4,
            catalog: 1000,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 5 {
            return Err(Error::Config("runtime benchmarks need at least 5 repetitions".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::Config("n grid must be non-empty and positive".into()));
        }
        if self.users_per_rep == 0 || self.catalog < 2 {
            return Err(Error::Config("users_per_rep >= 1 and catalog >= 2 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSample {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    pub n_b: usize,
    pub repetitions: usize,
    pub median_us: f64,
    pub p95_us: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Frozen randomly initialized model and full-length windows for timing.
pub fn bench_fixture(kind: ModelKind, n: usize, cfg: &BenchConfig) -> Result<(AnyModel, Vec<FixedSequence>)> {
    let model_cfg = ModelConfig {
        d: cfg.d,
        n,
        heads: cfg.heads,
        blocks: cfg.blocks,
        ..ModelConfig::default()
    };
    let model = AnyModel::new(kind, model_cfg, cfg.catalog, cfg.users_per_rep, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
    let windows = (0..cfg.users_per_rep)
        .map(|_| {
            let seq: Vec<usize> = (0..n).map(|_| rng.random_range(1..cfg.catalog)).collect();
            to_fixed_length(&seq, n)
        })
        .collect::<Result<_>>()?;
    Ok((model, windows))
}

/// Median and p95 forward-only wall time per user over the `n` grid.
/// Runs on the calling thread.
pub fn bench_runtime(kind: ModelKind, cfg: &BenchConfig) -> Result<Vec<RuntimeSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let (model, windows) = bench_fixture(kind, n, cfg)?;
        let run = || -> Result<()> {
            for (uid, fs) in windows.iter().enumerate() {
                std::hint::black_box(user_representation(&model, fs, uid)?);
            }
            Ok(())
        };
        for _ in 0..cfg.warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let t = Instant::now();
            run()?;
            times.push(t.elapsed().as_secs_f64() * 1e6 / windows.len() as f64);
        }
        times.sort_by(f64::total_cmp);
        let median = percentile(&times, 0.5);
        out.push(RuntimeSample {
            kind,
            n,
            d: cfg.d,
            n_b: cfg.blocks,
            repetitions: cfg.repetitions,
            median_us: median,
            p95_us: percentile(&times, 0.95),
            warning: (median < 1.0).then(|| "median below 1µs timer resolution".to_string()),
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln(time)` against `ln(n)`.
pub fn loglog_slope(samples: &[RuntimeSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Probe("a slope needs at least two points".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|s| (s.n as f64).ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.median_us.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Probe("all grid points share one n".into()));
    }
    Ok(sxy / sxx)
}

/// CSV rows `kind,n,d,n_b,median_us,p95_us` with a header.
pub fn runtime_csv(samples: &[RuntimeSample]) -> String {
    let mut out = String::from("kind,n,d,n_b,median_us,p95_us\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{:.3},{:.3}\n",
            s.kind, s.n, s.d, s.n_b, s.median_us, s.p95_us
        ));
    }
    out
}
