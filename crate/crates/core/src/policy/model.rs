use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FilledGoal, GoalSpec, LangSlot, PolicyConfig, OBS_DIM, SAT_DIM};
use crate::datagen::{Modality, MAX_LABEL_LEN};
use crate::error::{Error, Result};
use crate::geometry::ActionChunk;
use crate::numerics::{Graph, NodeId, Params, Tensor, MASK_NEG};
use crate::worldsim::{EgoObservation, SAT_SIZE};

/// Parameter-name prefix of each goal encoder, in goal-token order.
pub const ENCODER_PREFIXES: [(Modality, &str); 4] = [
    (Modality::Pose, "pose."),
    (Modality::Image, "img."),
    (Modality::Lang, "lang."),
    (Modality::Sat, "sat."),
];
pub const SAT_PREFIX: &str = "sat.";

// Satellite encoder: 4x4/4 patches -> 16 ch, then 2x2/2 -> 32 ch.
const P1: usize = 4;
const C1: usize = 16;
const P2: usize = 2;
const C2: usize = 32;
const G1: usize = SAT_SIZE / P1;
const G2: usize = G1 / P2;

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

fn insert_mlp(p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, dims: [usize; 3]) {
    p.insert(format!("{prefix}w1"), dense(rng, dims[0], dims[1]));
    p.insert(format!("{prefix}b1"), Tensor::zeros(&[dims[1]]));
    p.insert(format!("{prefix}w2"), dense(rng, dims[1], dims[2]));
    p.insert(format!("{prefix}b2"), Tensor::zeros(&[dims[2]]));
}

/// Fresh satellite-encoder parameters. Drawn from their own stream so the
/// rest of the network does not depend on whether they exist.
pub fn init_sat_params(cfg: &PolicyConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a7e_11e7);
    let mut p = Params::new();
    p.insert("sat.c1w", dense(&mut rng, P1 * P1 * 3, C1));
    p.insert("sat.c1b", Tensor::zeros(&[C1]));
    p.insert("sat.c2w", dense(&mut rng, P2 * P2 * C1, C2));
    p.insert("sat.c2b", Tensor::zeros(&[C2]));
    p.insert("sat.w", dense(&mut rng, G2 * G2 * C2, cfg.d_model));
    p.insert("sat.b", Tensor::zeros(&[cfg.d_model]));
    p
}

pub fn init_params(cfg: &PolicyConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    insert_mlp(&mut p, &mut rng, "obs.", [OBS_DIM, d, d]);
    insert_mlp(&mut p, &mut rng, "img.", [OBS_DIM, d, d]);
    insert_mlp(&mut p, &mut rng, "pose.", [2, d, d]);
    p.insert(
        "lang.emb",
        Tensor::randn(&[cfg.lang_rows(), d], 1.0, &mut rng),
    );
    insert_mlp(&mut p, &mut rng, "lang.", [d, d, d]);
    p.insert(
        "tok.obs_pos",
        Tensor::randn(&[cfg.history, d], 0.1, &mut rng),
    );
    p.insert("tok.goal_pos", Tensor::randn(&[d], 0.1, &mut rng));
    p.insert("tok.type", Tensor::randn(&[4, d], 0.1, &mut rng));
    for i in 0..cfg.layers {
        let b = format!("blk{i}.");
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{b}{ln}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{b}{ln}.b"), Tensor::zeros(&[d]));
        }
        // No key bias: softmax is invariant to it, so its gradient is
        // rounding noise that Adam would amplify to full-size steps.
        for w in ["q", "k", "v", "o"] {
            p.insert(format!("{b}w{w}"), dense(&mut rng, d, d));
            if w != "k" {
                p.insert(format!("{b}b{w}"), Tensor::zeros(&[d]));
            }
        }
        p.insert(format!("{b}ff1.w"), dense(&mut rng, d, cfg.ff));
        p.insert(format!("{b}ff1.b"), Tensor::zeros(&[cfg.ff]));
        p.insert(format!("{b}ff2.w"), dense(&mut rng, cfg.ff, d));
        p.insert(format!("{b}ff2.b"), Tensor::zeros(&[d]));
    }
    p.insert("final.g", Tensor::full(&[d], 1.0));
    p.insert("final.b", Tensor::zeros(&[d]));
    p.insert(
        "head.w",
        Tensor::randn(&[d, 2 * cfg.chunk], 0.1 / (d as f64).sqrt(), &mut rng),
    );
    p.insert("head.b", Tensor::zeros(&[2 * cfg.chunk]));
    for (k, t) in init_sat_params(cfg, seed) {
        p.insert(k, t);
    }
    Ok(p)
}

/// One policy input: the observation history and a filled goal.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    /// `history * OBS_DIM` values, oldest first.
    pub obs: Vec<f64>,
    pub goal: FilledGoal,
}

impl PolicyInput {
    pub fn new(
        history: &[EgoObservation],
        goal: &GoalSpec,
        cfg: &PolicyConfig,
        fill_seed: u64,
    ) -> Result<Self> {
        if history.len() != cfg.history {
            return Err(Error::Invalid(format!(
                "observation history needs {} entries, got {}",
                cfg.history,
                history.len()
            )));
        }
        goal.validate()?;
        Ok(Self {
            obs: history.iter().flat_map(|o| o.flat()).collect(),
            goal: super::mask_fill(goal, cfg.d_model, fill_seed),
        })
    }
}

fn linear(g: &mut Graph, p: &Params, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
    let wn = g.param(p, w)?;
    let y = g.matmul(x, wn)?;
    let bn = g.param(p, b)?;
    g.add(y, bn)
}

fn mlp(g: &mut Graph, p: &Params, x: NodeId, prefix: &str) -> Result<NodeId> {
    let h = linear(g, p, x, &format!("{prefix}w1"), &format!("{prefix}b1"))?;
    let h = g.gelu(h)?;
    linear(g, p, h, &format!("{prefix}w2"), &format!("{prefix}b2"))
}

fn layer_norm(g: &mut Graph, p: &Params, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = g.param(p, &format!("{prefix}.g"))?;
    let beta = g.param(p, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

fn lang_encoder(
    g: &mut Graph,
    p: &Params,
    cfg: &PolicyConfig,
    batch: &[PolicyInput],
) -> Result<NodeId> {
    let d = cfg.d_model;
    let mut bags = Vec::new();
    let mut fills = Vec::new();
    // Source row of each batch element in [bags; fills].
    let mut src = Vec::with_capacity(batch.len());
    for x in batch {
        match &x.goal.lang {
            LangSlot::Tokens(t) => {
                if t.is_empty() || t.len() > MAX_LABEL_LEN || t.iter().any(|&w| w >= cfg.vocab) {
                    return Err(Error::Invalid(format!(
                        "language label with {} tokens out of range",
                        t.len()
                    )));
                }
                src.push((true, bags.len()));
                bags.push(
                    t.iter()
                        .enumerate()
                        .map(|(i, &w)| i * cfg.vocab + w)
                        .collect(),
                );
            }
            LangSlot::Fill(v) => {
                if v.len() != d {
                    return Err(Error::Invalid(format!(
                        "language fill has {} values, expected {d}",
                        v.len()
                    )));
                }
                src.push((false, fills.len() / d));
                fills.extend_from_slice(v);
            }
        }
    }
    let n_bags = bags.len();
    let mut parts = Vec::new();
    if n_bags > 0 {
        let table = g.param(p, "lang.emb")?;
        parts.push(g.embedding_mean(table, bags)?);
    }
    if !fills.is_empty() {
        let rows = fills.len() / d;
        parts.push(g.constant(Tensor::new(vec![rows, d], fills)?));
    }
    let pooled = if parts.len() == 1 && src.iter().enumerate().all(|(i, s)| s.1 == i) {
        parts[0]
    } else {
        let stacked = g.concat(&parts, 0)?;
        let index: Vec<usize> = src
            .iter()
            .flat_map(|&(is_bag, r)| {
                let row = if is_bag { r } else { n_bags + r };
                row * d..(row + 1) * d
            })
            .collect();
        g.gather(stacked, Arc::new(index), vec![batch.len(), d])?
    };
    mlp(g, p, pooled, "lang.")
}

fn sat_encoder(g: &mut Graph, p: &Params, batch: &[PolicyInput]) -> Result<NodeId> {
    let b = batch.len();
    // im2col of the raw input, rows ordered (batch, patch row, patch col).
    let k1 = P1 * P1 * 3;
    let mut cols = Vec::with_capacity(b * G1 * G1 * k1);
    for x in batch {
        if x.goal.sat.len() != SAT_DIM {
            return Err(Error::Invalid(format!(
                "satellite slot has {} values",
                x.goal.sat.len()
            )));
        }
        for pr in 0..G1 {
            for pc in 0..G1 {
                for dr in 0..P1 {
                    let row = (pr * P1 + dr) * SAT_SIZE + pc * P1;
                    cols.extend_from_slice(&x.goal.sat[row * 3..(row + P1) * 3]);
                }
            }
        }
    }
    let x = g.constant(Tensor::new(vec![b * G1 * G1, k1], cols)?);
    let h = linear(g, p, x, "sat.c1w", "sat.c1b")?;
    let h = g.gelu(h)?;
    let mut index = Vec::with_capacity(b * G2 * G2 * P2 * P2 * C1);
    for bi in 0..b {
        for qr in 0..G2 {
            for qc in 0..G2 {
                for dr in 0..P2 {
                    for dc in 0..P2 {
                        let row = bi * G1 * G1 + (qr * P2 + dr) * G1 + qc * P2 + dc;
                        index.extend(row * C1..(row + 1) * C1);
                    }
                }
            }
        }
    }
    let h = g.gather(h, Arc::new(index), vec![b * G2 * G2, P2 * P2 * C1])?;
    let h = linear(g, p, h, "sat.c2w", "sat.c2b")?;
    let h = g.gelu(h)?;
    let h = g.reshape(h, vec![b, G2 * G2 * C2])?;
    linear(g, p, h, "sat.w", "sat.b")
}

fn has_sat(p: &Params) -> bool {
    p.names().any(|n| n.starts_with(SAT_PREFIX))
}

/// Builds the policy forward pass for a batch; returns the `[B, N, 2]`
/// waypoint node. A checkpoint without satellite-encoder parameters
/// accepts any batch that never selects SAT.
pub fn build_forward(
    g: &mut Graph,
    p: &Params,
    cfg: &PolicyConfig,
    batch: &[PolicyInput],
) -> Result<NodeId> {
    build_forward_with_goal_order(g, p, cfg, batch, [0, 1, 2, 3])
}

/// [`build_forward`] with the goal tokens laid out in `order` (a
/// permutation of the modality indices). Each token keeps its type
/// embedding and mask entry; with the tied goal-slot embedding the output
/// does not depend on the order up to rounding.
pub fn build_forward_with_goal_order(
    g: &mut Graph,
    p: &Params,
    cfg: &PolicyConfig,
    batch: &[PolicyInput],
    order: [usize; 4],
) -> Result<NodeId> {
    let mut sorted = order;
    sorted.sort_unstable();
    if sorted != [0, 1, 2, 3] {
        return Err(Error::Invalid(format!(
            "goal order {order:?} is not a permutation"
        )));
    }
    let b = batch.len();
    if b == 0 {
        return Err(Error::Invalid("empty policy batch".into()));
    }
    let (d, m) = (cfg.d_model, cfg.history);
    let mut obs = Vec::with_capacity(b * m * OBS_DIM);
    let mut pose = Vec::with_capacity(2 * b);
    let mut img = Vec::with_capacity(b * OBS_DIM);
    for x in batch {
        if x.obs.len() != m * OBS_DIM || x.goal.image.len() != OBS_DIM {
            return Err(Error::Invalid(
                "policy input with wrong observation size".into(),
            ));
        }
        obs.extend_from_slice(&x.obs);
        pose.extend(x.goal.pose.iter().map(|v| v / cfg.waypoint_scale));
        img.extend_from_slice(&x.goal.image);
    }

    let obs = g.constant(Tensor::new(vec![b * m, OBS_DIM], obs)?);
    let obs = mlp(g, p, obs, "obs.")?;
    let obs = g.reshape(obs, vec![b, m, d])?;
    let obs_pos = g.param(p, "tok.obs_pos")?;
    let obs = g.add(obs, obs_pos)?;

    let pose = g.constant(Tensor::new(vec![b, 2], pose)?);
    let pose = mlp(g, p, pose, "pose.")?;
    let img = g.constant(Tensor::new(vec![b, OBS_DIM], img)?);
    let img = mlp(g, p, img, "img.")?;
    let lang = lang_encoder(g, p, cfg, batch)?;
    let sat = if has_sat(p) {
        sat_encoder(g, p, batch)?
    } else if batch.iter().any(|x| x.goal.mask.contains(Modality::Sat)) {
        return Err(Error::Invalid(
            "SAT selected but the parameters have no satellite encoder".into(),
        ));
    } else {
        g.constant(Tensor::zeros(&[b, d]))
    };
    let ty = g.param(p, "tok.type")?;
    let tokens = [pose, img, lang, sat];
    let mut goal_parts = Vec::new();
    for &i in &order {
        let row = g.gather(ty, Arc::new((i * d..(i + 1) * d).collect()), vec![d])?;
        let t = g.add(tokens[i], row)?;
        goal_parts.push(g.reshape(t, vec![b, 1, d])?);
    }
    let goals = g.concat(&goal_parts, 1)?;
    let slot = g.param(p, "tok.goal_pos")?;
    let goals = g.add(goals, slot)?;
    let mut x = g.concat(&[obs, goals], 1)?;

    let t = m + 4;
    let mut key_mask = Vec::with_capacity(b * t);
    let mut pool = Vec::with_capacity(b * t);
    for xi in batch {
        let keep: Vec<bool> = std::iter::repeat_n(true, m)
            .chain(
                order
                    .iter()
                    .map(|&i| xi.goal.mask.contains(ENCODER_PREFIXES[i].0)),
            )
            .collect();
        let n = keep.iter().filter(|&&k| k).count() as f64;
        for k in keep {
            key_mask.push(if k { 0.0 } else { MASK_NEG });
            pool.push(if k { 1.0 / n } else { 0.0 });
        }
    }

    for i in 0..cfg.layers {
        let pre = format!("blk{i}.");
        let h = layer_norm(g, p, x, &format!("{pre}ln1"))?;
        let q = linear(g, p, h, &format!("{pre}wq"), &format!("{pre}bq"))?;
        let wk = g.param(p, &format!("{pre}wk"))?;
        let k = g.matmul(h, wk)?;
        let v = linear(g, p, h, &format!("{pre}wv"), &format!("{pre}bv"))?;
        let a = g.attention(q, k, v, cfg.heads, &key_mask)?;
        let o = linear(g, p, a, &format!("{pre}wo"), &format!("{pre}bo"))?;
        x = g.add(x, o)?;
        let h = layer_norm(g, p, x, &format!("{pre}ln2"))?;
        let f = linear(g, p, h, &format!("{pre}ff1.w"), &format!("{pre}ff1.b"))?;
        let f = g.gelu(f)?;
        let f = linear(g, p, f, &format!("{pre}ff2.w"), &format!("{pre}ff2.b"))?;
        x = g.add(x, f)?;
    }
    let x = layer_norm(g, p, x, "final")?;
    let pooled = g.weighted_mean(x, pool)?;
    let out = linear(g, p, pooled, "head.w", "head.b")?;
    let out = g.tanh(out)?;
    let out = g.scale(out, cfg.waypoint_scale)?;
    g.reshape(out, vec![b, cfg.chunk, 2])
}

/// Per-sample chunks of a batch forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub chunks: Vec<ActionChunk>,
}

pub fn forward_batch(
    p: &Params,
    cfg: &PolicyConfig,
    batch: &[PolicyInput],
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let out = build_forward(&mut g, p, cfg, batch)?;
    let chunks = g
        .value(out)
        .data()
        .chunks(2 * cfg.chunk)
        .map(|c| ActionChunk::new(c.chunks(2).map(|w| [w[0], w[1]]).collect()))
        .collect::<Result<_>>()?;
    Ok(ForwardOutput { chunks })
}

pub fn forward_policy(
    p: &Params,
    cfg: &PolicyConfig,
    history: &[EgoObservation],
    goal: &GoalSpec,
    fill_seed: u64,
) -> Result<ActionChunk> {
    let input = PolicyInput::new(history, goal, cfg, fill_seed)?;
    Ok(forward_batch(p, cfg, std::slice::from_ref(&input))?
        .chunks
        .remove(0))
}

/// Goal-image encoder outputs, one `d_model` vector per image.
pub fn encode_goal_images(
    p: &Params,
    cfg: &PolicyConfig,
    images: &[EgoObservation],
) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let flat: Vec<f64> = images.iter().flat_map(|i| i.flat()).collect();
    let x = g.constant(Tensor::new(vec![images.len(), OBS_DIM], flat)?);
    let e = mlp(&mut g, p, x, "img.")?;
    Ok(g.value(e)
        .data()
        .chunks(cfg.d_model)
        .map(<[f64]>::to_vec)
        .collect())
}
