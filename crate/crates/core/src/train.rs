//! Mini-batch training with one sampled negative per example and Adam.
//!
//! Each example is encoded on its own graph. Examples are grouped into fixed
//! chunks of [`CHUNK`]; chunks may run on any number of threads, and their
//! gradients are summed in chunk order, so results do not depend on the
//! thread count.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{to_fixed_length, FixedSequence, Split, PAD};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalOptions, Protocol};
use crate::model::{bce_loss, score_candidates, user_vector, ParamStore, Recommender};

/// Examples per gradient chunk.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleMode {
    /// One example per user: the training history minus its last item
    /// predicts that last item.
    LastPrefix,
    /// One example per position of the training history.
    AllPrefixes,
}

impl std::str::FromStr for ExampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_prefix" => Ok(ExampleMode::LastPrefix),
            "all_prefixes" => Ok(ExampleMode::AllPrefixes),
            other => Err(Error::Config(format!("unknown example mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without a strictly better validation Recall@10 (ties
    /// broken by NDCG@10) before stopping.
    pub patience: usize,
    pub seed: u64,
    pub examples: ExampleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            max_epochs: 50,
            patience: 10,
            seed: 42,
            examples: ExampleMode::AllPrefixes,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it turns the optimizer into the identity.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too.
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update from the accumulated gradients.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.tensors_mut().enumerate() {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Uniform draw from `1..catalog_size` excluding `seen`, by rejection.
pub fn sample_negative(rng: &mut impl Rng, seen: &HashSet<usize>, catalog_size: usize) -> Result<usize> {
    let blocked = seen.iter().filter(|&&v| v != PAD && v < catalog_size).count();
    if catalog_size < 2 || blocked >= catalog_size - 1 {
        return Err(Error::Sampling(format!(
            "no item outside the {blocked} seen ones in a catalog of {}",
            catalog_size.saturating_sub(1)
        )));
    }
    loop {
        let v = rng.random_range(1..catalog_size);
        if !seen.contains(&v) {
            return Ok(v);
        }
    }
}

/// One (history → next item) training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub uid: usize,
    pub input: FixedSequence,
    pub target: usize,
}

pub fn build_examples(split: &Split, n: usize, mode: ExampleMode) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for user in &split.users {
        let t = user.train.len();
        if t < 2 {
            continue;
        }
        let first = match mode {
            ExampleMode::LastPrefix => t - 1,
            ExampleMode::AllPrefixes => 1,
        };
        for end in first..t {
            out.push(Example {
                uid: user.uid,
                input: to_fixed_length(&user.train[..end], n)?,
                target: user.train[end],
            });
        }
    }
    Ok(out)
}

/// Loss and gradient of one example, added into `grads`.
fn accumulate_example<M: Recommender + ?Sized>(
    model: &M,
    ex: &Example,
    negative: usize,
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let enc = model.encode(&mut g, &vars, &ex.input)?;
    let user = user_vector(model, &mut g, &vars, &enc, ex.uid)?;
    let pos = score_candidates(model, &mut g, &vars, user, &[ex.target])?;
    let neg = score_candidates(model, &mut g, &vars, user, &[negative])?;
    let loss = bce_loss(&mut g, pos, neg)?;
    let value = g.value(loss).item();
    let back = g.backward(loss)?;
    for (buf, var) in grads.iter_mut().zip(&vars) {
        back.add_to(*var, buf);
    }
    Ok(value)
}

fn zero_buffers(params: &ParamStore) -> Vec<Vec<f64>> {
    params.tensors().map(|t| vec![0.0; t.len()]).collect()
}

/// Summed loss of a batch; gradients are left in the parameters.
pub fn accumulate_batch<M: Recommender + ?Sized>(
    model: &mut M,
    batch: &[(Example, usize)],
) -> Result<f64> {
    let chunks: Vec<(f64, Vec<Vec<f64>>)> = {
        let shared: &M = model;
        batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = zero_buffers(shared.params());
                let mut loss = 0.0;
                for (ex, neg) in chunk {
                    loss += accumulate_example(shared, ex, *neg, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect::<Result<_>>()?
    };
    let mut total = 0.0;
    let params = model.params_mut();
    for (loss, grads) in chunks {
        total += loss;
        for (p, g) in params.tensors_mut().zip(&grads) {
            p.accumulate_grad(g)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub examples: usize,
    pub steps: usize,
}

/// Everything a training run carries between epochs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    examples: Vec<Example>,
    seen: Vec<HashSet<usize>>,
    epoch: usize,
}

impl Trainer {
    pub fn new<M: Recommender + ?Sized>(model: &M, split: &Split, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let examples = build_examples(split, model.config().n, cfg.examples)?;
        if examples.is_empty() {
            return Err(Error::Contract(
                "no training examples: every training history has fewer than two items".into(),
            ));
        }
        let num_users = model.num_users();
        let mut seen = vec![HashSet::new(); num_users];
        for u in &split.users {
            if u.uid >= num_users {
                return Err(Error::Index(format!("user {} out of range", u.uid)));
            }
            seen[u.uid] = u.train.iter().copied().collect();
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            adam: AdamState::new(model.params()),
            cfg,
            examples,
            seen,
            epoch: 0,
        })
    }

    pub fn num_examples(&self) -> usize {
        self.examples.len()
    }

    /// One seeded-shuffled pass over every example.
    pub fn train_epoch<M: Recommender + ?Sized>(&mut self, model: &mut M) -> Result<EpochStats> {
        self.epoch += 1;
        let catalog = model.num_items();
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(idx.len());
            for &i in idx {
                let ex = &self.examples[i];
                let neg = sample_negative(&mut self.rng, &self.seen[ex.uid], catalog)?;
                batch.push((ex.clone(), neg));
            }
            model.params_mut().zero_grads();
            let loss = accumulate_batch(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} in epoch {} batch {b} ({} examples)",
                    self.epoch,
                    batch.len()
                )));
            }
            total += loss;
            self.adam.step(model.params_mut(), &self.cfg)?;
            let items = model.tables().items;
            model.params_mut().get_mut(items).row_slice_mut(PAD).fill(0.0);
            model.params_mut().zero_grads();
            steps += 1;
        }
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / self.examples.len() as f64,
            examples: self.examples.len(),
            steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall_at_10: f64,
    #[serde(rename = "val_recall@1")]
    pub val_recall_at_1: f64,
    pub wall_ms: u64,
}

pub struct FitOutcome<M> {
    pub best: M,
    pub best_epoch: usize,
    pub best_val_recall_at_10: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains until `max_epochs` or until validation Recall@10 has not
/// improved for `patience` evaluations, keeping the best model. Ties on
/// Recall@10 go to the higher NDCG@10, then to the earlier epoch.
pub fn fit<M, F>(mut model: M, split: &Split, cfg: &TrainConfig, mut on_epoch: F) -> Result<FitOutcome<M>>
where
    M: Recommender + Clone,
    F: FnMut(&EpochRecord),
{
    let mut trainer = Trainer::new(&model, split, cfg.clone())?;
    let opts = EvalOptions {
        ks: vec![1, 10],
        protocol: Protocol::Full,
        seed: cfg.seed,
    };
    let mut best: Option<(M, usize, (f64, f64))> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    for _ in 0..cfg.max_epochs {
        let started = Instant::now();
        let stats = trainer.train_epoch(&mut model)?;
        let report = evaluate(&model, split, EvalMode::Val, &opts, None)?;
        let recall10 = report.recall(10).unwrap_or(0.0);
        // NDCG@10 only separates epochs whose Recall@10 ties.
        let key = (recall10, report.ndcg(10).unwrap_or(0.0));
        let record = EpochRecord {
            epoch: stats.epoch,
            mean_loss: stats.mean_loss,
            val_recall_at_10: recall10,
            val_recall_at_1: report.recall(1).unwrap_or(0.0),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        history.push(record);
        match &best {
            Some((_, _, k)) if key <= *k => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((model.clone(), stats.epoch, key));
                since_best = 0;
            }
        }
    }
    let (best, best_epoch, best_val_recall_at_10) = match best {
        Some((m, e, (r, _))) => (m, e, r),
        None => (model, 0, 0.0),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        best_val_recall_at_10,
        history,
    })
}
