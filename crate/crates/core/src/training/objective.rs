use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geometry::{ActionChunk, CHUNK_LEN};
use crate::numerics::{Graph, NodeId, Tensor};

/// Supervision for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTarget {
    pub a_ref: ActionChunk,
    pub m_obj: u8,
    pub p_obj: Option<[f64; 2]>,
}

impl ObjectiveTarget {
    pub fn of(s: &Sample) -> Self {
        Self {
            a_ref: s.a_ref.clone(),
            m_obj: s.m_obj,
            p_obj: s.p_obj,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub j: NodeId,
    pub j_il: NodeId,
    pub j_obj: NodeId,
    pub j_sm: NodeId,
}

/// Per-batch values of the objective terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "J_il")]
    pub j_il: f64,
    /// Batch mean of `m_obj * J_obj`.
    #[serde(rename = "J_obj")]
    pub j_obj: f64,
    #[serde(rename = "J_sm")]
    pub j_sm: f64,
    /// Mean `J_obj` over samples with `m_obj = 1` (0 if none).
    #[serde(rename = "J_obj_active")]
    pub j_obj_active: f64,
    pub m_obj_fraction: f64,
    /// Mean per-sample `J_il` over samples whose selected set contains the
    /// modality.
    #[serde(rename = "J_il_by_modality", default)]
    pub j_il_by_modality: BTreeMap<String, f64>,
}

/// `J = J_il + J_obj + J_sm` over predicted chunks `actions: [B, N, 2]`.
///
/// J_il: mean over batch, waypoints and coordinates of the squared error.
/// J_obj: batch mean of `m_obj * mean_coord (p_obj - a_N)^2`.
/// J_sm: mean over batch, consecutive pairs and coordinates of the squared
/// action delta.
pub fn objective_graph(
    g: &mut Graph,
    actions: NodeId,
    targets: &[ObjectiveTarget],
) -> Result<ObjectiveNodes> {
    let b = targets.len();
    if b == 0 {
        return Err(Error::Invalid("objective over an empty batch".into()));
    }
    if g.shape(actions) != [b, CHUNK_LEN, 2] {
        return Err(Error::shape(
            "objective",
            format!("actions {:?} for batch {b}", g.shape(actions)),
        ));
    }
    let mut refs = Vec::with_capacity(b * CHUNK_LEN * 2);
    let mut obj = Vec::with_capacity(2 * b);
    let mut w = Vec::with_capacity(2 * b);
    for (i, t) in targets.iter().enumerate() {
        refs.extend(t.a_ref.flat());
        let p = match (t.m_obj, t.p_obj) {
            (0, p) => p.unwrap_or([0.0, 0.0]),
            (1, Some(p)) => p,
            (1, None) => {
                return Err(Error::Invalid(format!(
                    "sample {i} has m_obj = 1 without p_obj"
                )))
            }
            (m, _) => return Err(Error::Invalid(format!("sample {i} has m_obj = {m}"))),
        };
        obj.extend(p);
        w.extend([f64::from(t.m_obj); 2]);
    }
    let refs = g.constant(Tensor::new(vec![b, CHUNK_LEN, 2], refs)?);
    let j_il = g.mse(actions, refs)?;

    let last_idx: Vec<usize> = (0..b)
        .flat_map(|i| {
            [
                (i * CHUNK_LEN + CHUNK_LEN - 1) * 2,
                (i * CHUNK_LEN + CHUNK_LEN - 1) * 2 + 1,
            ]
        })
        .collect();
    let last = g.gather(actions, Arc::new(last_idx), vec![b, 2])?;
    let p_obj = g.constant(Tensor::new(vec![b, 2], obj)?);
    let diff = g.sub(last, p_obj)?;
    let sq = g.mul(diff, diff)?;
    let mask = g.constant(Tensor::new(vec![b, 2], w)?);
    let masked = g.mul(sq, mask)?;
    let total = g.sum(masked)?;
    let j_obj = g.scale(total, 1.0 / (2 * b) as f64)?;

    let head: Vec<usize> = (0..b)
        .flat_map(|i| (0..2 * (CHUNK_LEN - 1)).map(move |k| i * 2 * CHUNK_LEN + k))
        .collect();
    let tail: Vec<usize> = head.iter().map(|k| k + 2).collect();
    let shape = vec![b, CHUNK_LEN - 1, 2];
    let a = g.gather(actions, Arc::new(head), shape.clone())?;
    let c = g.gather(actions, Arc::new(tail), shape)?;
    let j_sm = g.mse(c, a)?;

    let s = g.add(j_il, j_obj)?;
    let j = g.add(s, j_sm)?;
    Ok(ObjectiveNodes {
        j,
        j_il,
        j_obj,
        j_sm,
    })
}

impl ObjectiveBreakdown {
    /// Reads the term values back from a built graph.
    pub fn read(
        g: &Graph,
        n: &ObjectiveNodes,
        actions: NodeId,
        targets: &[ObjectiveTarget],
    ) -> Self {
        let a = g.value(actions).data();
        let mut active = (0.0, 0usize);
        for (i, t) in targets.iter().enumerate() {
            if t.m_obj == 1 {
                let p = t.p_obj.unwrap_or([0.0, 0.0]);
                let k = (i * CHUNK_LEN + CHUNK_LEN - 1) * 2;
                active.0 += ((a[k] - p[0]).powi(2) + (a[k + 1] - p[1]).powi(2)) / 2.0;
                active.1 += 1;
            }
        }
        Self {
            j: g.value(n.j).item(),
            j_il: g.value(n.j_il).item(),
            j_obj: g.value(n.j_obj).item(),
            j_sm: g.value(n.j_sm).item(),
            j_obj_active: if active.1 > 0 {
                active.0 / active.1 as f64
            } else {
                0.0
            },
            m_obj_fraction: active.1 as f64 / targets.len() as f64,
            j_il_by_modality: BTreeMap::new(),
        }
    }
}

/// Per-sample `J_il` values of a `[B, N, 2]` action tensor.
pub fn per_sample_il(actions: &[f64], targets: &[ObjectiveTarget]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let pred = &actions[i * 2 * CHUNK_LEN..(i + 1) * 2 * CHUNK_LEN];
            pred.iter()
                .zip(t.a_ref.flat())
                .map(|(p, r)| (p - r).powi(2))
                .sum::<f64>()
                / (2 * CHUNK_LEN) as f64
        })
        .collect()
}
