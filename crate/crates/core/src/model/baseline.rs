//! Causal multi-head self-attention baseline: every item attends to itself
//! and all earlier items, and every item row is rewritten by every block.

use crate::autodiff::{Graph, Var};
use crate::data::FixedSequence;
use crate::error::Result;
use crate::model::{
    check_window, embed_real, Encoding, Init, ModelConfig, ModelKind, ParamId, ParamStore,
    Recommender, TableIds,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineBlockIds {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BaselineBlockIds {
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
            b1: store.push(format!("block{m}.b1"), Tensor::zeros(1, d)),
            w2: store.push(format!("block{m}.w2"), init.gaussian(d, d)),
            b2: store.push(format!("block{m}.b2"), Tensor::zeros(1, d)),
        }
    }
}

/// Lower-triangular visibility mask for `r` positions.
pub(crate) fn causal_mask(r: usize) -> Vec<bool> {
    (0..r * r).map(|i| i % r <= i / r).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    config: ModelConfig,
    params: ParamStore,
    tables: TableIds,
    blocks: Vec<BaselineBlockIds>,
}

impl BaselineModel {
    pub fn new(config: ModelConfig, num_items: usize, num_users: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, config.init_std)?;
        let mut params = ParamStore::new();
        let tables = TableIds::create(&mut params, &mut init, &config, num_items, num_users)?;
        let blocks = (0..config.blocks)
            .map(|m| BaselineBlockIds::create(&mut params, &mut init, &config, m))
            .collect();
        Ok(Self {
            config,
            params,
            tables,
            blocks,
        })
    }

    pub fn blocks(&self) -> &[BaselineBlockIds] {
        &self.blocks
    }
}

impl Recommender for BaselineModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
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
        let input = embed_real(self, g, vars, fs)?;
        let real = fs.len() - fs.pad_count;
        // Padding sits strictly before every real item, so under the causal
        // mask it is invisible to real rows; running on real rows only is
        // exact.
        let mask = causal_mask(real);
        let scale = self.config.logit_scale();
        let mut x = input;
        let mut states = vec![g.slice_rows(x, real - 1, 1)?];
        let mut attention = Vec::with_capacity(self.blocks.len());
        let mut item_states = Vec::with_capacity(self.blocks.len());
        for ids in &self.blocks {
            let mut heads = Vec::with_capacity(ids.query.len());
            let mut maps = Vec::with_capacity(ids.query.len());
            for k in 0..ids.query.len() {
                let q = g.matmul(x, vars[ids.query[k].index()])?;
                let key = g.matmul(x, vars[ids.key[k].index()])?;
                let logits = g.matmul_bt(q, key)?;
                let logits = g.scale(logits, scale)?;
                let map = g.softmax_rows(logits, Some(&mask))?;
                let v = g.matmul(x, vars[ids.value[k].index()])?;
                heads.push(g.matmul(map, v)?);
                maps.push(map);
            }
            let joined = g.concat_cols(&heads)?;
            let att = g.matmul(joined, vars[ids.output.index()])?;
            let x1 = g.add(x, att)?;
            let h = g.matmul(x1, vars[ids.w1.index()])?;
            let h = g.add_row(h, vars[ids.b1.index()])?;
            let h = g.activation(h, self.config.activation)?;
            let h = g.matmul(h, vars[ids.w2.index()])?;
            let h = g.add_row(h, vars[ids.b2.index()])?;
            x = g.add(x1, h)?;
            states.push(g.slice_rows(x, real - 1, 1)?);
            attention.push(maps);
            item_states.push(x);
        }
        Ok(Encoding {
            input,
            representation: *states.last().expect("states"),
            states,
            attention,
            item_states,
            pad_count: fs.pad_count,
        })
    }
}
