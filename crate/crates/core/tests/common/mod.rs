//! Independent reference implementations used as test oracles. The
//! reference forward pass works on plain nested vectors and never touches
//! the autodiff graph.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use starseq::data::{FixedSequence, Interaction, InteractionLog, PrepConfig};
use starseq::model::{
    bce_loss, score_candidates, user_vector, AnyModel, ModelConfig, ModelKind, Recommender,
};
use starseq::{Activation, Graph, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn param(model: &AnyModel, name: &str) -> Mat {
    to_mat(model.params().find(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    (0..cols).map(|j| v.iter().zip(m).map(|(a, row)| a * row[j]).sum()).collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn addv(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn ref_activation(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Result of the reference forward pass on the full padded window.
pub struct RefForward {
    /// Padded `n×d` input with zero padding rows.
    pub input: Mat,
    /// Real item rows after each block.
    pub item_states: Vec<Mat>,
    /// Head-averaged attention per block, `n×n` (baseline) or `1×n` (star),
    /// zero at padding positions.
    pub mean_attention: Vec<Mat>,
    pub representation: Vec<f64>,
}

fn ffn(model: &AnyModel, m: usize, x: &[f64], act: Activation) -> Vec<f64> {
    let w1 = param(model, &format!("block{m}.w1"));
    let b1 = param(model, &format!("block{m}.b1"));
    let w2 = param(model, &format!("block{m}.w2"));
    let b2 = param(model, &format!("block{m}.b2"));
    let h: Vec<f64> = addv(&vec_mat(x, &w1), &b1[0]).into_iter().map(|v| ref_activation(act, v)).collect();
    addv(&vec_mat(&h, &w2), &b2[0])
}

/// Multi-head attention of `query` against `rows` restricted to the
/// `visible` positions. Returns the projected output and per-head weights
/// over all positions.
fn attend(model: &AnyModel, m: usize, query: &[f64], rows: &Mat, visible: &[usize], scale: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cfg = model.config();
    let mut joined = Vec::with_capacity(cfg.d);
    let mut weights = Vec::new();
    for k in 0..cfg.heads {
        let q = vec_mat(query, &param(model, &format!("block{m}.query{k}")));
        let zk = param(model, &format!("block{m}.key{k}"));
        let ak = param(model, &format!("block{m}.value{k}"));
        let logits: Vec<f64> = visible.iter().map(|&j| dotv(&q, &vec_mat(&rows[j], &zk)) * scale).collect();
        let alpha = softmax(&logits);
        let mut head = vec![0.0; cfg.head_dim()];
        let mut full = vec![0.0; rows.len()];
        for (a, &j) in alpha.iter().zip(visible) {
            full[j] = *a;
            for (h, v) in head.iter_mut().zip(vec_mat(&rows[j], &ak)) {
                *h += a * v;
            }
        }
        joined.extend(head);
        weights.push(full);
    }
    let out = vec_mat(&joined, &param(model, &format!("block{m}.output")));
    (out, weights)
}

fn average(heads: &[Vec<f64>]) -> Vec<f64> {
    let k = heads.len() as f64;
    (0..heads[0].len()).map(|j| heads.iter().map(|h| h[j]).sum::<f64>() / k).collect()
}

/// Reference forward pass on the full padded window: padding rows are
/// zero, masked out of attention and re-zeroed after every block.
pub fn reference_forward(model: &AnyModel, fs: &FixedSequence) -> RefForward {
    let cfg = model.config().clone();
    let n = fs.items.len();
    let pad = fs.pad_count;
    let items = param(model, "items");
    let positions = param(model, "positions");
    let input: Mat = (0..n)
        .map(|t| if t < pad { vec![0.0; cfg.d] } else { addv(&items[fs.items[t]], &positions[t]) })
        .collect();
    let scale = cfg.logit_scale();
    let real: Vec<usize> = (pad..n).collect();
    let mut item_states = Vec::new();
    let mut mean_attention = Vec::new();
    let representation = match model.kind() {
        ModelKind::Star => {
            let mut c = input[n - 1].clone();
            for m in 0..cfg.blocks {
                let (att, w) = attend(model, m, &c, &input, &real, scale);
                let a = addv(&c, &att);
                c = addv(&a, &ffn(model, m, &a, cfg.activation));
                item_states.push(input[pad..].to_vec());
                mean_attention.push(vec![average(&w)]);
            }
            c
        }
        ModelKind::Baseline => {
            let mut x = input.clone();
            for m in 0..cfg.blocks {
                let mut next = vec![vec![0.0; cfg.d]; n];
                let mut map = vec![vec![0.0; n]; n];
                for j in pad..n {
                    let visible: Vec<usize> = (pad..=j).collect();
                    let (att, w) = attend(model, m, &x[j], &x, &visible, scale);
                    let a = addv(&x[j], &att);
                    next[j] = addv(&a, &ffn(model, m, &a, cfg.activation));
                    map[j] = average(&w);
                }
                x = next;
                item_states.push(x[pad..].to_vec());
                mean_attention.push(map);
            }
            x[n - 1].clone()
        }
    };
    RefForward {
        input,
        item_states,
        mean_attention,
        representation,
    }
}

/// Mean of cos over all ordered pairs of rows, diagonal included; zero-norm
/// pairs score 0.
pub fn brute_similarity(rows: &Mat) -> f64 {
    let r = rows.len();
    let mut total = 0.0;
    for a in rows {
        for b in rows {
            let na = dotv(a, a).sqrt();
            let nb = dotv(b, b).sqrt();
            if na > 0.0 && nb > 0.0 {
                total += dotv(a, b) / (na * nb);
            }
        }
    }
    total / (r * r) as f64
}

/// Entropy and uniform-entropy sums over the real rows of a padded map.
pub fn brute_entropy(map: &Mat, pad: usize) -> (f64, f64, usize) {
    let mut att = 0.0;
    let mut uni = 0.0;
    let mut count = 0;
    for j in pad..map.len() {
        for k in pad..=j {
            let p = map[j][k];
            if p > 0.0 {
                att -= p * p.ln();
            }
        }
        uni += ((j - pad + 1) as f64).ln();
        count += 1;
    }
    (att, uni, count)
}

/// BCE loss of one example, computed through the graph, with its gradient
/// for every parameter (zeros where the parameter is unused).
pub fn example_loss_and_grads(model: &AnyModel, fs: &FixedSequence, uid: usize, pos: usize, neg: usize) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let enc = model.encode(&mut g, &vars, fs).unwrap();
    let u = user_vector(model, &mut g, &vars, &enc, uid).unwrap();
    let p = score_candidates(model, &mut g, &vars, u, &[pos]).unwrap();
    let n = score_candidates(model, &mut g, &vars, u, &[neg]).unwrap();
    let loss = bce_loss(&mut g, p, n).unwrap();
    let back = g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| back.get(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    (g.value(loss).item(), grads)
}

/// Plain loss through the reference forward pass.
pub fn reference_loss(model: &AnyModel, fs: &FixedSequence, uid: usize, pos: usize, neg: usize) -> f64 {
    let f = reference_forward(model, fs);
    let mut user = f.representation.clone();
    if model.config().use_user_embedding {
        user = addv(&user, &param(model, "users")[uid]);
    }
    let items = param(model, "items");
    let rp = dotv(&user, &items[pos]);
    let rn = dotv(&user, &items[neg]);
    (1.0 + (-rp).exp()).ln() + (1.0 + rn.exp()).ln()
}

/// Worst relative error between the analytic gradient and central
/// differences of the reference loss, over every scalar parameter.
/// Entries where both sides are below `floor` are compared absolutely.
pub fn worst_gradient_error(model: &AnyModel, fs: &FixedSequence, uid: usize, pos: usize, neg: usize, h: f64, floor: f64) -> (f64, String) {
    let (_, grads) = example_loss_and_grads(model, fs, uid, pos, neg);
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = model.params().ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..model.params().get(id).len() {
            let orig = probe.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = reference_loss(&probe, fs, uid, pos, neg);
            probe.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = reference_loss(&probe, fs, uid, pos, neg);
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi].data()[i];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < floor { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", model.params().name(id)));
            }
        }
    }
    worst
}

pub fn small_config(d: usize, n: usize, heads: usize, blocks: usize) -> ModelConfig {
    ModelConfig {
        d,
        n,
        heads,
        blocks,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

pub fn record(user: &str, item: &str, rating: f64, ts: i64) -> Interaction {
    Interaction {
        user: user.into(),
        item: item.into(),
        rating,
        timestamp: ts,
    }
}

/// Brute-force fixed point: repeat "drop every under-threshold user and
/// item" until nothing changes, on the positive records.
pub fn brute_fixed_point(log: &InteractionLog, cfg: &PrepConfig) -> Vec<Interaction> {
    let mut kept: Vec<Interaction> = log.records.iter().filter(|r| r.rating >= cfg.rating_threshold).cloned().collect();
    loop {
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &kept {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let bad_users: BTreeSet<String> = users.iter().filter(|(_, &c)| c < cfg.min_user).map(|(u, _)| u.to_string()).collect();
        let bad_items: BTreeSet<String> = items.iter().filter(|(_, &c)| c < cfg.min_item).map(|(i, _)| i.to_string()).collect();
        if bad_users.is_empty() && bad_items.is_empty() {
            return kept;
        }
        kept.retain(|r| !bad_users.contains(&r.user) && !bad_items.contains(&r.item));
    }
}

/// Ten users whose thresholds cascade: removing the sparse items knocks
/// users below the user threshold, which in turn starves further items.
pub fn cascade_log() -> InteractionLog {
    let mut recs = Vec::new();
    let mut ts = 0;
    let mut push = |u: &str, i: &str, r: f64| {
        recs.push(record(u, i, r, ts));
        ts += 1;
    };
    // A dense core of 6 users over items a..e.
    for u in ["u0", "u1", "u2", "u3", "u4", "u5"] {
        for i in ["a", "b", "c", "d", "e"] {
            push(u, i, 5.0);
        }
    }
    // u6 and u7 have 5 positives, but two of them are on an item that only
    // they touch, so they fall to 3 after the item goes.
    for u in ["u6", "u7"] {
        for i in ["a", "b", "c", "x", "y"] {
            push(u, i, 4.0);
        }
    }
    // Item z is held at 5 by u5 to u9; once u6, u7 and u9 leave it drops to
    // 2 and goes too, taking u8 with it.
    for u in ["u8"] {
        for i in ["z", "a", "b", "c", "d"] {
            push(u, i, 5.0);
        }
    }
    push("u5", "z", 5.0);
    push("u6", "z", 5.0);
    push("u7", "z", 5.0);
    push("u9", "z", 5.0);
    push("u9", "z2", 5.0);
    // Low ratings never count.
    for i in ["a", "b", "c", "d", "e"] {
        push("u9", i, 3.0);
    }
    InteractionLog::from_records(recs)
}
