use omninav_core::datagen::Modality;
use omninav_core::evalcli::{Outcome, SUCCESS_RADIUS};
use omninav_core::geometry::{EmbodimentSpec, Pose2D};
use omninav_core::policy::{
    encode_goal_images, init_params, Checkpoint, CheckpointMeta, PolicyConfig,
};
use omninav_core::toponav::{
    build_graph, load_graph, localize, localize_embedding, run_toponav_episode, save_graph,
    topo_goal, LocalizerState, EMBEDDINGS_FILE,
};
use omninav_core::worldsim::{generate_world, render_ego, World, WorldGenConfig};

fn random_checkpoint(seed: u64) -> Checkpoint {
    let config = PolicyConfig::default();
    Checkpoint {
        params: init_params(&config, seed).unwrap(),
        config,
        meta: CheckpointMeta {
            step: 0,
            seed,
            mixture_hash: String::new(),
        },
    }
}

fn room() -> World {
    generate_world(7, &WorldGenConfig::open_room()).unwrap()
}

/// Straight route along +x, one pose per control step.
fn straight_route(steps: usize, step_len: f64) -> Vec<Pose2D> {
    route_from(5.0, steps, step_len)
}

/// Rays only reach the far wall within 10 m, so views change along a route
/// only once it heads into range of it.
fn route_from(x0: f64, steps: usize, step_len: f64) -> Vec<Pose2D> {
    (0..=steps)
        .map(|i| Pose2D::new(x0 + step_len * i as f64, 20.0, 0.0))
        .collect()
}

fn slow_step() -> f64 {
    EmbodimentSpec::SLOW.max_step()
}

#[test]
fn thirty_second_route_gives_thirty_nodes_on_the_route() {
    let world = room();
    let ck = random_checkpoint(1);
    let route = straight_route(90, slow_step());
    let g = build_graph(&world, &route, &ck).unwrap();
    assert_eq!(g.len(), 30);
    for (k, n) in g.nodes().iter().enumerate() {
        assert_eq!(n.pose, route[3 * (k + 1)]);
        assert_eq!(n.obs, render_ego(&world, &n.pose).unwrap());
    }
    assert_eq!(g, build_graph(&world, &route, &ck).unwrap());
}

#[test]
fn short_routes_are_rejected() {
    let world = room();
    let ck = random_checkpoint(1);
    assert!(build_graph(&world, &straight_route(5, slow_step()), &ck).is_err());
    assert_eq!(
        build_graph(&world, &straight_route(6, slow_step()), &ck)
            .unwrap()
            .len(),
        2
    );
}

#[test]
fn a_node_observation_localizes_to_its_node() {
    let world = room();
    let ck = random_checkpoint(2);
    let g = build_graph(&world, &route_from(31.0, 30, slow_step()), &ck).unwrap();
    for j in 0..g.len() {
        let mut state = LocalizerState {
            prev: j.saturating_sub(1),
            ..LocalizerState::default()
        };
        assert_eq!(localize(&g, &ck, &g.nodes()[j].obs, &mut state).unwrap(), j);
        assert_eq!(state.prev, j);
    }
}

#[test]
fn localization_never_moves_backwards() {
    let world = room();
    let ck = random_checkpoint(3);
    let g = build_graph(&world, &straight_route(45, slow_step()), &ck).unwrap();
    // Observations replayed in reverse order still cannot pull the index back.
    let obs: Vec<_> = g.nodes().iter().rev().map(|n| n.obs.clone()).collect();
    let emb = encode_goal_images(&ck.params, &ck.config, &obs).unwrap();
    let mut state = LocalizerState::default();
    let mut last = 0;
    for e in &emb {
        let i = localize_embedding(&g, e, &mut state).unwrap();
        assert!(i >= last && i <= last + state.window);
        last = i;
    }
}

#[test]
fn goals_carry_only_the_next_image() {
    let world = room();
    let ck = random_checkpoint(4);
    let g = build_graph(&world, &straight_route(15, slow_step()), &ck).unwrap();
    for i in 0..g.len() {
        let goal = topo_goal(&g, i);
        assert!(goal.pose.is_none() && goal.sat.is_none() && goal.lang.is_none());
        assert!(goal.mask.contains(Modality::Image));
        assert_eq!(
            goal.image.as_ref(),
            Some(&g.nodes()[(i + 1).min(g.last())].obs)
        );
    }
}

#[test]
fn zero_budget_times_out_immediately() {
    let world = room();
    let ck = random_checkpoint(5);
    let route = straight_route(30, slow_step());
    let g = build_graph(&world, &route, &ck).unwrap();
    let r = run_toponav_episode(&world, &g, &ck, route[0], 0, 0).unwrap();
    assert_eq!(r.outcome, Outcome::Timeout);
    assert_eq!(r.steps, 0);
    assert_eq!(r.trajectory, vec![route[0]]);
}

#[test]
fn a_trivial_two_node_graph_succeeds() {
    // Nodes 0.3 m and 0.6 m ahead: one step of any command ends within the
    // success radius of the last node.
    let world = room();
    let ck = random_checkpoint(6);
    let route = straight_route(7, 0.1);
    let g = build_graph(&world, &route, &ck).unwrap();
    assert_eq!(g.len(), 2);
    let r = run_toponav_episode(&world, &g, &ck, route[0], 180, 0).unwrap();
    assert_eq!(r.outcome, Outcome::Success);
    assert_eq!(r.steps, 1);
    assert!(r.final_distance <= SUCCESS_RADIUS);
}

#[test]
fn episodes_are_deterministic_and_success_means_within_radius() {
    let world = room();
    let ck = random_checkpoint(7);
    let route = straight_route(30, slow_step());
    let g = build_graph(&world, &route, &ck).unwrap();
    let a = run_toponav_episode(&world, &g, &ck, route[0], 40, 9).unwrap();
    let b = run_toponav_episode(&world, &g, &ck, route[0], 40, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.success(),
        a.final_distance <= SUCCESS_RADIUS && a.outcome != Outcome::Collision
    );
}

#[test]
fn graphs_round_trip_and_corruption_is_rejected() {
    let world = room();
    let ck = random_checkpoint(8);
    let g = build_graph(&world, &straight_route(20, slow_step()), &ck).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_graph(&g, &ck.config, &ck.meta, dir.path()).unwrap();
    assert_eq!(load_graph(dir.path()).unwrap(), g);

    let path = dir.path().join(EMBEDDINGS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    let mut nan = bytes.clone();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(&path, &nan).unwrap();
    assert!(load_graph(dir.path()).is_err());
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_graph(dir.path()).is_err());
    bytes.pop();
    std::fs::write(&path, &bytes[..n / 2]).unwrap();
    assert!(load_graph(dir.path()).is_err());
}
