//! Deterministic-successor synthetic logs: every user walks the same fixed
//! random cycle through the catalog, so the next item is always a function
//! of the current one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionLog};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 50,
            steps: 30,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items < 2 || self.steps < 3 {
            return Err(Error::Config(
                "synthetic data needs users >= 1, items >= 2 and steps >= 3".into(),
            ));
        }
        Ok(())
    }
}

/// The cycle as a successor table over raw item numbers `0..items`.
pub fn successor_table(cfg: &SynthConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut next = vec![0; cfg.items];
    for (i, &v) in order.iter().enumerate() {
        next[v] = order[(i + 1) % cfg.items];
    }
    next
}

/// A log where user `u` starts at a random item and follows the cycle for
/// `steps` interactions. Item `k` is named `i{k}`, user `u` is `u{u}`; all
/// ratings are 5 and timestamps count up per user.
pub fn generate(cfg: &SynthConfig) -> Result<InteractionLog> {
    cfg.validate()?;
    let next = successor_table(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut records = Vec::with_capacity(cfg.users * cfg.steps);
    for u in 0..cfg.users {
        let mut item = rng.random_range(0..cfg.items);
        for t in 0..cfg.steps {
            records.push(Interaction {
                user: format!("u{u}"),
                item: format!("i{item}"),
                rating: 5.0,
                timestamp: t as i64,
            });
            item = next[item];
        }
    }
    Ok(InteractionLog::from_records(records))
}

/// The log as TSV with a header line.
pub fn to_tsv(log: &InteractionLog) -> String {
    let mut out = String::from("user\titem\trating\ttimestamp\n");
    for r in &log.records {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.user, r.item, r.rating, r.timestamp));
    }
    out
}
