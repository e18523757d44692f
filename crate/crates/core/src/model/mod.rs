//! The star-graph recommender and the causal self-attention baseline.
//!
//! Both models keep their parameters in a [`ParamStore`] (a flat, named,
//! ordered list of tensors) and expose the same [`Recommender`] surface:
//! encode a fixed-length window into a user representation on a [`Graph`],
//! then score candidate items against it with `(c + u)·vᵀ`.

mod baseline;
mod params;
mod star;

pub use baseline::{BaselineBlockIds, BaselineModel};
pub use params::{NamedTensor, ParamId, ParamStore};
pub use star::{feed_forward, star_attention, StarBlockIds, StarBlockVars, StarModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::data::FixedSequence;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Star,
    Baseline,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(ModelKind::Star),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Star => "star",
            ModelKind::Baseline => "baseline",
        })
    }
}

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScale {
    /// `√d`, the full embedding width.
    Model,
    /// `√(d / n_h)`, the per-head width.
    Head,
}

impl std::str::FromStr for AttentionScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(AttentionScale::Model),
            "head" => Ok(AttentionScale::Head),
            other => Err(Error::Config(format!("unknown attention scale '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub d: usize,
    /// Window length `n`.
    pub n: usize,
    pub heads: usize,
    pub blocks: usize,
    pub activation: Activation,
    /// When false the user table is ignored at scoring time.
    pub use_user_embedding: bool,
    pub attention_scale: AttentionScale,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n: 50,
            heads: 2,
            blocks: 2,
            activation: Activation::Gelu,
            use_user_embedding: true,
            attention_scale: AttentionScale::Model,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.heads == 0 || self.blocks == 0 {
            return Err(Error::Config(
                "d, n, heads and blocks must all be at least 1".into(),
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Multiplier applied to attention logits.
    pub fn logit_scale(&self) -> f64 {
        let denom = match self.attention_scale {
            AttentionScale::Model => self.d,
            AttentionScale::Head => self.head_dim(),
        };
        1.0 / (denom as f64).sqrt()
    }
}

/// Ids of the item, position and user tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableIds {
    pub items: ParamId,
    pub positions: ParamId,
    pub users: ParamId,
}

impl TableIds {
    pub(crate) fn create(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: &ModelConfig,
        num_items: usize,
        num_users: usize,
    ) -> Result<Self> {
        if num_items < 2 || num_users < 1 {
            return Err(Error::Config(format!(
                "need at least one real item and one user, got {} items and {num_users} users",
                num_items.saturating_sub(1)
            )));
        }
        let mut items = init.gaussian(num_items, cfg.d);
        items.row_slice_mut(0).fill(0.0);
        Ok(Self {
            items: store.push("items", items),
            positions: store.push("positions", init.gaussian(cfg.n, cfg.d)),
            users: store.push("users", init.gaussian(num_users, cfg.d)),
        })
    }
}

/// Seeded Gaussian initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(seed: u64, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        })
    }

    pub(crate) fn gaussian(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(rows, cols, data).expect("positive extents")
    }
}

/// Graph nodes produced by encoding one window.
pub struct Encoding {
    /// Real (non-padding) rows of the input matrix, oldest first.
    pub input: Var,
    /// Final sequence representation (`1×d`), before the user embedding.
    pub representation: Var,
    /// Representation after each block, starting with the initial one.
    pub states: Vec<Var>,
    /// Per block, per head attention weights over the real positions.
    pub attention: Vec<Vec<Var>>,
    /// Item matrix read by each block (real rows only).
    pub item_states: Vec<Var>,
    pub pad_count: usize,
}

/// Shared surface of both sequence models.
pub trait Recommender: Sync {
    fn kind(&self) -> ModelKind;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn tables(&self) -> TableIds;

    /// Runs the blocks over `fs`. `vars` must come from binding
    /// [`Recommender::params`] onto `g`.
    fn encode<'p>(&'p self, g: &mut Graph<'p>, vars: &[Var], fs: &FixedSequence) -> Result<Encoding>;

    fn num_items(&self) -> usize {
        self.params().get(self.tables().items).rows()
    }

    fn num_users(&self) -> usize {
        self.params().get(self.tables().users).rows()
    }
}

pub(crate) fn check_window(cfg: &ModelConfig, fs: &FixedSequence) -> Result<()> {
    if fs.len() != cfg.n {
        return Err(Error::Contract(format!(
            "window of length {} for a model with n={}",
            fs.len(),
            cfg.n
        )));
    }
    if !fs.is_valid() {
        return Err(Error::Contract("window holds no real item".into()));
    }
    Ok(())
}

/// Real rows of the input matrix: `V[b_t] + P[t]` for non-padding positions.
/// Padding rows are left out entirely, which is the same as zeroing them and
/// masking them from attention.
pub(crate) fn embed_real<'p, M: Recommender + ?Sized>(
    model: &'p M,
    g: &mut Graph<'p>,
    vars: &[Var],
    fs: &FixedSequence,
) -> Result<Var> {
    let t = model.tables();
    let real = fs.real_items();
    let items = g.gather(vars[t.items.index()], real)?;
    let pos = g.slice_rows(vars[t.positions.index()], fs.pad_count, real.len())?;
    g.add(items, pos)
}

/// Full `n×d` input matrix; padding rows are all zeros.
pub fn embed_sequence<M: Recommender + ?Sized>(model: &M, fs: &FixedSequence) -> Result<Tensor> {
    check_window(model.config(), fs)?;
    let p = model.params();
    let t = model.tables();
    let items = p.get(t.items);
    let positions = p.get(t.positions);
    let d = model.config().d;
    let mut out = Tensor::zeros(fs.len(), d);
    for (row, &vid) in fs.items.iter().enumerate().skip(fs.pad_count) {
        if vid >= items.rows() {
            return Err(Error::Index(format!("item {vid} out of range")));
        }
        let dst = out.row_slice_mut(row);
        for ((o, v), p) in dst.iter_mut().zip(items.row_slice(vid)).zip(positions.row_slice(row)) {
            *o = v + p;
        }
    }
    Ok(out)
}

/// `c + u` (or just `c` when user embeddings are disabled).
pub fn user_vector<'p, M: Recommender + ?Sized>(
    model: &'p M,
    g: &mut Graph<'p>,
    vars: &[Var],
    enc: &Encoding,
    uid: usize,
) -> Result<Var> {
    if uid >= model.num_users() {
        return Err(Error::Index(format!("user {uid} out of range")));
    }
    if !model.config().use_user_embedding {
        return Ok(enc.representation);
    }
    let u = g.gather(vars[model.tables().users.index()], &[uid])?;
    g.add(enc.representation, u)
}

/// Scores `1×m` of the candidate items against a user vector.
pub fn score_candidates<M: Recommender + ?Sized>(
    model: &M,
    g: &mut Graph<'_>,
    vars: &[Var],
    user: Var,
    vids: &[usize],
) -> Result<Var> {
    let cands = g.gather(vars[model.tables().items.index()], vids)?;
    g.matmul_bt(user, cands)
}

/// Binary cross-entropy of one positive and one negative score,
/// `softplus(−r⁺) + softplus(r⁻)`.
pub fn bce_loss(g: &mut Graph<'_>, pos: Var, neg: Var) -> Result<Var> {
    let flipped = g.scale(pos, -1.0)?;
    let a = g.softplus(flipped)?;
    let b = g.softplus(neg)?;
    g.add(a, b)
}

/// Plain-value version of [`bce_loss`].
pub fn bce_value(pos: f64, neg: f64) -> f64 {
    crate::autodiff::softplus(-pos) + crate::autodiff::softplus(neg)
}

/// Encodes `fs` and returns the user vector as plain values.
pub fn user_representation<M: Recommender + ?Sized>(
    model: &M,
    fs: &FixedSequence,
    uid: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let enc = model.encode(&mut g, &vars, fs)?;
    let u = user_vector(model, &mut g, &vars, &enc, uid)?;
    Ok(g.value(u).data().to_vec())
}

/// Scores for every catalog id (index 0, the padding item, included).
pub fn score_all<M: Recommender + ?Sized>(model: &M, user: &[f64]) -> Vec<f64> {
    let items = model.params().get(model.tables().items);
    (0..items.rows()).map(|v| dot(user, items.row_slice(v))).collect()
}

/// Plain-value record of one forward pass, for probes and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub kind: ModelKind,
    pub pad_count: usize,
    /// `n×d` input matrix with zero padding rows.
    pub input: Tensor,
    /// Internal-node states `c⁰ … c^{n_b}` (star) or the last row after
    /// each block (baseline).
    pub states: Vec<Tensor>,
    /// Per block, per head. Star rows are `1×n`; baseline maps are `n×n`.
    /// Padding positions carry zero weight.
    pub attention: Vec<Vec<Tensor>>,
    /// Item matrix seen by each block, real rows only.
    pub item_states: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn representation(&self) -> &Tensor {
        self.states.last().expect("at least one state")
    }

    /// Head-averaged attention of one block.
    pub fn mean_attention(&self, block: usize) -> Tensor {
        let heads = &self.attention[block];
        let mut out = Tensor::zeros(heads[0].rows(), heads[0].cols());
        for h in heads {
            crate::tensor::add_assign(out.data_mut(), h.data());
        }
        let k = heads.len() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= k);
        out
    }
}

pub fn trace<M: Recommender + ?Sized>(model: &M, fs: &FixedSequence) -> Result<ForwardTrace> {
    let input = embed_sequence(model, fs)?;
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let enc = model.encode(&mut g, &vars, fs)?;
    let n = fs.len();
    let pad = enc.pad_count;
    let star = model.kind() == ModelKind::Star;
    let expand = |t: &Tensor| -> Tensor {
        if star {
            let mut row = vec![0.0; n];
            row[pad..].copy_from_slice(t.data());
            Tensor::new(1, n, row).expect("row")
        } else {
            let mut full = Tensor::zeros(n, n);
            let r = t.rows();
            for j in 0..r {
                full.row_slice_mut(pad + j)[pad..].copy_from_slice(t.row_slice(j));
            }
            full
        }
    };
    Ok(ForwardTrace {
        kind: model.kind(),
        pad_count: pad,
        input,
        states: enc.states.iter().map(|v| g.value(*v).clone()).collect(),
        attention: enc
            .attention
            .iter()
            .map(|heads| heads.iter().map(|h| expand(g.value(*h))).collect())
            .collect(),
        item_states: enc.item_states.iter().map(|v| g.value(*v).clone()).collect(),
    })
}

/// Either model, for code that picks the kind at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Star(StarModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn new(
        kind: ModelKind,
        cfg: ModelConfig,
        num_items: usize,
        num_users: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Star => AnyModel::Star(StarModel::new(cfg, num_items, num_users, seed)?),
            ModelKind::Baseline => {
                AnyModel::Baseline(BaselineModel::new(cfg, num_items, num_users, seed)?)
            }
        })
    }

    /// Rebuilds a model from a config and a full parameter list.
    pub fn from_parts(kind: ModelKind, cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let num_items = params.find("items").map(|t| t.rows()).unwrap_or(0);
        let num_users = params.find("users").map(|t| t.rows()).unwrap_or(0);
        let mut model = Self::new(kind, cfg, num_items, num_users, 0)?;
        model.params_mut().replace_all(params)?;
        Ok(model)
    }
}

impl Recommender for AnyModel {
    fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Star(m) => m.kind(),
            AnyModel::Baseline(m) => m.kind(),
        }
    }

    fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Star(m) => m.config(),
            AnyModel::Baseline(m) => m.config(),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Star(m) => m.params(),
            AnyModel::Baseline(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Star(m) => m.params_mut(),
            AnyModel::Baseline(m) => m.params_mut(),
        }
    }

    fn tables(&self) -> TableIds {
        match self {
            AnyModel::Star(m) => m.tables(),
            AnyModel::Baseline(m) => m.tables(),
        }
    }

    fn encode<'p>(&'p self, g: &mut Graph<'p>, vars: &[Var], fs: &FixedSequence) -> Result<Encoding> {
        match self {
            AnyModel::Star(m) => m.encode(g, vars, fs),
            AnyModel::Baseline(m) => m.encode(g, vars, fs),
        }
    }
}
