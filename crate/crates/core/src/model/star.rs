//! Star-graph attention: one internal node per block reads every item node,
//! and only the internal node is updated from block to block.

use crate::autodiff::{Activation, Graph, Var};
use crate::data::FixedSequence;
use crate::error::{Error, Result};
use crate::model::{
    check_window, embed_real, Encoding, Init, ModelConfig, ModelKind, ParamId, ParamStore,
    Recommender, TableIds,
};

/// Parameter ids of one star block.
#[derive(Clone, Debug, PartialEq)]
pub struct StarBlockIds {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl StarBlockIds {
    fn create(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, m: usize) -> Self {
        let (d, dh) = (cfg.d, cfg.head_dim());
        let per_head = |tag: &str, store: &mut ParamStore, init: &mut Init| -> Vec<ParamId> {
            (0..cfg.heads)
                .map(|k| store.push(format!("block{m}.{tag}{k}"), init.gaussian(d, dh)))
                .collect()
        };
        let query = per_head("query", store, init);
        let key = per_head("key", store, init);
        let value = per_head("value", store, init);
        Self {
            query,
            key,
            value,
            output: store.push(format!("block{m}.output"), init.gaussian(d, d)),
            w1: store.push(format!("block{m}.w1"), init.gaussian(d, d)),
            b1: store.push(format!("block{m}.b1"), crate::Tensor::zeros(1, d)),
            w2: store.push(format!("block{m}.w2"), init.gaussian(d, d)),
            b2: store.push(format!("block{m}.b2"), crate::Tensor::zeros(1, d)),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> StarBlockVars {
        let pick = |ids: &[ParamId]| ids.iter().map(|i| vars[i.index()]).collect();
        StarBlockVars {
            query: pick(&self.query),
            key: pick(&self.key),
            value: pick(&self.value),
            output: vars[self.output.index()],
            w1: vars[self.w1.index()],
            b1: vars[self.b1.index()],
            w2: vars[self.w2.index()],
            b2: vars[self.b2.index()],
        }
    }
}

/// Graph handles of one block's parameters.
#[derive(Clone, Debug)]
pub struct StarBlockVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Multi-head attention from the internal node `c_prev` (`1×d`) to the item
/// rows `items` (`r×d`). Per head `k`:
///
/// `α = softmax((c·Qₖ)(E·Zₖ)ᵀ · scale)`, `headₖ = α·(E·Aₖ)`,
///
/// and the result is `[head₁ … head_h]·O`. Positions where `mask` is false
/// get zero weight. Returns the output and the per-head weights.
///
/// Products are grouped as `((c·Qₖ)·Zₖᵀ)·Eᵀ` and `(α·E)·Aₖ`, so each head
/// touches the `r` item rows only through two vector products.
pub fn star_attention(
    g: &mut Graph<'_>,
    block: &StarBlockVars,
    c_prev: Var,
    items: Var,
    mask: Option<&[bool]>,
    scale: f64,
) -> Result<(Var, Vec<Var>)> {
    if let Some(m) = mask {
        if !m.iter().any(|&keep| keep) {
            return Err(Error::Contract("every item position is masked".into()));
        }
    }
    let mut heads = Vec::with_capacity(block.query.len());
    let mut alphas = Vec::with_capacity(block.query.len());
    for k in 0..block.query.len() {
        let q = g.matmul(c_prev, block.query[k])?;
        let probe = g.matmul_bt(q, block.key[k])?;
        let logits = g.matmul_bt(probe, items)?;
        let logits = g.scale(logits, scale)?;
        let alpha = g.softmax_rows(logits, mask)?;
        let pooled = g.matmul(alpha, items)?;
        heads.push(g.matmul(pooled, block.value[k])?);
        alphas.push(alpha);
    }
    let joined = g.concat_cols(&heads)?;
    let out = g.matmul(joined, block.output)?;
    Ok((out, alphas))
}

/// `f(x·W₁ + b₁)·W₂ + b₂`, row-wise.
pub fn feed_forward(
    g: &mut Graph<'_>,
    block: &StarBlockVars,
    x: Var,
    activation: Activation,
) -> Result<Var> {
    let h = g.matmul(x, block.w1)?;
    let h = g.add_row(h, block.b1)?;
    let h = g.activation(h, activation)?;
    let h = g.matmul(h, block.w2)?;
    g.add_row(h, block.b2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StarModel {
    config: ModelConfig,
    params: ParamStore,
    tables: TableIds,
    blocks: Vec<StarBlockIds>,
}

impl StarModel {
    /// Randomly initialized model. `num_items` counts the padding item.
    pub fn new(config: ModelConfig, num_items: usize, num_users: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, config.init_std)?;
        let mut params = ParamStore::new();
        let tables = TableIds::create(&mut params, &mut init, &config, num_items, num_users)?;
        let blocks = (0..config.blocks)
            .map(|m| StarBlockIds::create(&mut params, &mut init, &config, m))
            .collect();
        Ok(Self {
            config,
            params,
            tables,
            blocks,
        })
    }

    pub fn blocks(&self) -> &[StarBlockIds] {
        &self.blocks
    }
}

impl Recommender for StarModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Star
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn tables(&self) -> TableIds {
        self.tables
    }

    fn encode<'p>(&'p self, g: &mut Graph<'p>, vars: &[Var], fs: &FixedSequence) -> Result<Encoding> {
        check_window(&self.config, fs)?;
        let items = embed_real(self, g, vars, fs)?;
        let real = fs.len() - fs.pad_count;
        // c⁰ is the most recent item's row.
        let mut c = g.slice_rows(items, real - 1, 1)?;
        let mut states = vec![c];
        let mut attention = Vec::with_capacity(self.blocks.len());
        let mut item_states = Vec::with_capacity(self.blocks.len());
        let scale = self.config.logit_scale();
        for ids in &self.blocks {
            let block = ids.bind(vars);
            let (att, alphas) = star_attention(g, &block, c, items, None, scale)?;
            let a = g.add(c, att)?;
            let ff = feed_forward(g, &block, a, self.config.activation)?;
            c = g.add(a, ff)?;
            states.push(c);
            attention.push(alphas);
            item_states.push(items);
        }
        Ok(Encoding {
            input: items,
            representation: c,
            states,
            attention,
            item_states,
            pad_count: fs.pad_count,
        })
    }
}
