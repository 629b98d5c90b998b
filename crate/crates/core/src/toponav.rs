//! Topological memory for image goals: a node graph recorded at 1 Hz along
//! an expert traversal, monotone localization by embedding similarity, and
//! the next node's image fed to the policy as its goal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Modality;
use crate::error::{Error, Result};
use crate::evalcli::{closed_loop, EpisodeResult, TaskKind, SUCCESS_RADIUS};
use crate::geometry::Pose2D;
use crate::numerics::{Params, Tensor};
use crate::policy::{
    decode_tensors, encode_goal_images, encode_tensors, Checkpoint, CheckpointMeta, GoalSpec,
    ModalityMask, PolicyConfig,
};
use crate::worldsim::{render_ego, EgoObservation, World};

/// Control steps between recorded nodes (1 s at 3 Hz).
pub const NODE_STRIDE: usize = 3;
/// Localization search window half-width.
pub const WINDOW: usize = 2;
/// Shortest route accepted, in control steps.
pub const MIN_ROUTE_STEPS: usize = 2 * NODE_STRIDE;
pub const GRAPH_FILE: &str = "graph.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
const EMBEDDINGS_TENSOR: &str = "embeddings";

#[derive(Clone, Debug, PartialEq)]
pub struct TopoNode {
    pub obs: EgoObservation,
    /// Where the node was recorded. Used for scoring only.
    pub pose: Pose2D,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoGraph {
    nodes: Vec<TopoNode>,
}

impl TopoGraph {
    pub fn new(nodes: Vec<TopoNode>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Invalid(format!(
                "graph needs at least 2 nodes, got {}",
                nodes.len()
            )));
        }
        let d = nodes[0].embedding.len();
        if d == 0 || nodes.iter().any(|n| n.embedding.len() != d) {
            return Err(Error::Invalid("node embeddings differ in length".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[TopoNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn last(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Records a node at every full second of the route after its start, so a
/// route of T seconds yields floor(T) nodes and the last one sits within one
/// second of the route end.
pub fn build_graph(world: &World, path: &[Pose2D], ck: &Checkpoint) -> Result<TopoGraph> {
    if path.len() <= MIN_ROUTE_STEPS {
        return Err(Error::Invalid(format!(
            "route of {} steps is shorter than {MIN_ROUTE_STEPS}",
            path.len().saturating_sub(1)
        )));
    }
    let poses: Vec<Pose2D> = (NODE_STRIDE..path.len())
        .step_by(NODE_STRIDE)
        .map(|i| path[i])
        .collect();
    let obs = poses
        .iter()
        .map(|p| render_ego(world, p))
        .collect::<Result<Vec<_>>>()?;
    let emb = encode_goal_images(&ck.params, &ck.config, &obs)?;
    TopoGraph::new(
        obs.into_iter()
            .zip(poses)
            .zip(emb)
            .map(|((obs, pose), embedding)| TopoNode {
                obs,
                pose,
                embedding,
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalizerState {
    pub prev: usize,
    pub window: usize,
}

impl Default for LocalizerState {
    fn default() -> Self {
        Self {
            prev: 0,
            window: WINDOW,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Most similar node in `[prev, prev + window]`, lowest index on ties.
pub fn localize_embedding(
    graph: &TopoGraph,
    embedding: &[f64],
    state: &mut LocalizerState,
) -> Result<usize> {
    if state.prev > graph.last() {
        return Err(Error::Invalid(format!(
            "localizer index {} outside graph",
            state.prev
        )));
    }
    let hi = (state.prev + state.window).min(graph.last());
    let mut best = (state.prev, f64::NEG_INFINITY);
    for i in state.prev..=hi {
        let s = cosine(embedding, &graph.nodes[i].embedding);
        if s > best.1 {
            best = (i, s);
        }
    }
    state.prev = best.0;
    Ok(best.0)
}

pub fn localize(
    graph: &TopoGraph,
    ck: &Checkpoint,
    obs: &EgoObservation,
    state: &mut LocalizerState,
) -> Result<usize> {
    let e = encode_goal_images(&ck.params, &ck.config, std::slice::from_ref(obs))?;
    localize_embedding(graph, &e[0], state)
}

pub fn next_goal_image(graph: &TopoGraph, index: usize) -> &EgoObservation {
    &graph.nodes[(index + 1).min(graph.last())].obs
}

/// Image-only goal for a localized index. Node poses never enter it.
pub fn topo_goal(graph: &TopoGraph, index: usize) -> GoalSpec {
    GoalSpec {
        pose: None,
        image: Some(next_goal_image(graph, index).clone()),
        lang: None,
        sat: None,
        mask: ModalityMask::single(Modality::Image),
    }
}

/// Closed loop toward the last node's recorded pose with image goals from
/// the graph.
pub fn run_toponav_episode(
    world: &World,
    graph: &TopoGraph,
    ck: &Checkpoint,
    start: Pose2D,
    budget: usize,
    seed: u64,
) -> Result<EpisodeResult> {
    let mut state = LocalizerState::default();
    let mut goal_at = |_: &Pose2D, obs: &EgoObservation| -> Result<GoalSpec> {
        let i = localize(graph, ck, obs, &mut state)?;
        Ok(topo_goal(graph, i))
    };
    let end = graph.nodes[graph.last()].pose.xy();
    closed_loop(
        world,
        ck,
        TaskKind::Image,
        start,
        end,
        SUCCESS_RADIUS,
        budget,
        seed,
        &mut goal_at,
    )
}

#[derive(Serialize, Deserialize)]
struct GraphManifest {
    embeddings_file: String,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    pose: Pose2D,
    obs: EgoObservation,
}

/// Writes the JSON manifest and the embeddings in checkpoint layout.
pub fn save_graph(
    graph: &TopoGraph,
    config: &PolicyConfig,
    meta: &CheckpointMeta,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = GraphManifest {
        embeddings_file: EMBEDDINGS_FILE.into(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeRecord {
                pose: n.pose,
                obs: n.obs.clone(),
            })
            .collect(),
    };
    let path = dir.join(GRAPH_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    let d = graph.nodes[0].embedding.len();
    let flat = graph
        .nodes
        .iter()
        .flat_map(|n| n.embedding.iter().copied())
        .collect();
    let mut params = Params::new();
    params.insert(
        EMBEDDINGS_TENSOR.to_string(),
        Tensor::new(vec![graph.len(), d], flat)?,
    );
    let path = dir.join(EMBEDDINGS_FILE);
    std::fs::write(&path, encode_tensors(config, meta, &params)?).map_err(|e| Error::io(&path, e))
}

pub fn load_graph(dir: &Path) -> Result<TopoGraph> {
    let path = dir.join(GRAPH_FILE);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: GraphManifest = serde_json::from_slice(&text)?;
    let path = dir.join(&manifest.embeddings_file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (_, _, params) = decode_tensors(&bytes)?;
    let emb = params
        .get(EMBEDDINGS_TENSOR)
        .ok_or_else(|| Error::checkpoint("tensors", "no embeddings tensor"))?;
    if emb.shape().len() != 2 || emb.shape()[0] != manifest.nodes.len() {
        return Err(Error::checkpoint(
            "tensors[0].shape",
            format!("{:?} for {} nodes", emb.shape(), manifest.nodes.len()),
        ));
    }
    let d = emb.shape()[1];
    TopoGraph::new(
        manifest
            .nodes
            .into_iter()
            .zip(emb.data().chunks(d))
            .map(|(n, e)| TopoNode {
                obs: n.obs,
                pose: n.pose,
                embedding: e.to_vec(),
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_of(embeddings: &[[f64; 2]]) -> TopoGraph {
        let obs = EgoObservation::new(vec![[0.5; 5]; crate::worldsim::RAY_COUNT]).unwrap();
        TopoGraph::new(
            embeddings
                .iter()
                .enumerate()
                .map(|(i, e)| TopoNode {
                    obs: obs.clone(),
                    pose: Pose2D::new(i as f64, 0.0, 0.0),
                    embedding: e.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn window_limits_and_ties() {
        let g = graph_of(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 1.0]]);
        let mut s = LocalizerState::default();
        // Nodes 0 and 1 tie: the lower index wins.
        assert_eq!(localize_embedding(&g, &[2.0, 0.0], &mut s).unwrap(), 0);
        // Node 4 matches too but lies outside [0, 2].
        assert_eq!(localize_embedding(&g, &[0.0, 3.0], &mut s).unwrap(), 2);
        // Never moves backwards, even toward a better match.
        assert_eq!(localize_embedding(&g, &[1.0, 0.0], &mut s).unwrap(), 2);
        assert_eq!(s.prev, 2);
    }

    #[test]
    fn goal_image_clamps_at_the_end() {
        let g = graph_of(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert_eq!(next_goal_image(&g, 0), &g.nodes()[1].obs);
        assert_eq!(next_goal_image(&g, 2), &g.nodes()[2].obs);
        let goal = topo_goal(&g, 1);
        assert!(goal.pose.is_none() && goal.sat.is_none() && goal.lang.is_none());
        assert_eq!(goal.mask, ModalityMask::single(Modality::Image));
    }

    #[test]
    fn graphs_need_two_nodes() {
        assert!(TopoGraph::new(vec![]).is_err());
        let g = graph_of(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(TopoGraph::new(g.nodes()[..1].to_vec()).is_err());
    }
}
