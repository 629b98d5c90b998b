use omninav_core::datagen::{make_language_label, Modality};
use omninav_core::geometry::Pose2D;
use omninav_core::numerics::{finite_diff_check, FdOptions, Graph, Params, Tensor};
use omninav_core::policy::{
    build_forward, build_forward_with_goal_order, forward_policy, init_params, Checkpoint,
    CheckpointMeta, GoalSpec, ModalityMask, PolicyConfig, PolicyInput, OBS_DIM, SAT_PREFIX,
};
use omninav_core::worldsim::{
    generate_world, render_ego, render_sat_goal, EgoObservation, SatImage, WorldGenConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff: 16,
        ..Default::default()
    }
}

fn random_obs(rng: &mut ChaCha8Rng) -> EgoObservation {
    EgoObservation::from_flat(
        &(0..OBS_DIM)
            .map(|_| rng.random::<f64>())
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn random_sat(rng: &mut ChaCha8Rng) -> SatImage {
    SatImage::from_flat(
        &(0..32 * 32 * 3)
            .map(|_| rng.random::<f64>())
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

struct Scene {
    history: Vec<EgoObservation>,
    goal: GoalSpec,
}

fn scene(seed: u64) -> Scene {
    let world = generate_world(seed, &WorldGenConfig::default()).unwrap();
    let pose = Pose2D::new(20.0, 20.0, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let history = (0..5).map(|_| random_obs(&mut rng)).collect();
    let goal = GoalSpec {
        pose: Some([3.0, -1.0]),
        image: Some(render_ego(&world, &pose).unwrap_or_else(|_| random_obs(&mut rng))),
        lang: Some(make_language_label(&world, world.landmarks[0].id, None).unwrap()),
        sat: Some(render_sat_goal(&world, &pose, [25.0, 22.0])),
        mask: ModalityMask::ALL,
    };
    Scene { history, goal }
}

#[test]
fn output_shape_and_range() {
    let cfg = PolicyConfig::default();
    let p = init_params(&cfg, 1).unwrap();
    let s = scene(3);
    let chunk = forward_policy(&p, &cfg, &s.history, &s.goal, 0).unwrap();
    assert_eq!(chunk.waypoints().len(), 8);
    for w in chunk.waypoints() {
        assert!(w[0].hypot(w[1]) <= cfg.waypoint_scale * 2f64.sqrt());
    }
}

#[test]
fn masked_content_does_not_change_output() {
    let cfg = PolicyConfig::default();
    let p = init_params(&cfg, 2).unwrap();
    let s = scene(5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut goal = s.goal.clone();
    goal.mask = ModalityMask::of(&[Modality::Pose, Modality::Lang]);
    let base = forward_policy(&p, &cfg, &s.history, &goal, 11).unwrap();
    for _ in 0..5 {
        let mut other = goal.clone();
        other.image = Some(random_obs(&mut rng));
        other.sat = if rng.random_bool(0.5) {
            Some(random_sat(&mut rng))
        } else {
            None
        };
        assert_eq!(
            forward_policy(&p, &cfg, &s.history, &other, 11).unwrap(),
            base
        );
    }
    // Removing a masked slot entirely is also invisible.
    let mut bare = goal.clone();
    bare.image = None;
    assert_eq!(
        forward_policy(&p, &cfg, &s.history, &bare, 11).unwrap(),
        base
    );
}

#[test]
fn selected_modality_missing_is_rejected() {
    let cfg = tiny();
    let p = init_params(&cfg, 2).unwrap();
    let s = scene(5);
    let mut goal = s.goal.clone();
    goal.image = None;
    goal.mask = ModalityMask::single(Modality::Image);
    assert!(forward_policy(&p, &cfg, &s.history, &goal, 0).is_err());
}

#[test]
fn language_only_mask_gives_zero_encoder_gradients() {
    let cfg = tiny();
    let p = init_params(&cfg, 4).unwrap();
    let s = scene(9);
    let mut goal = s.goal.clone();
    goal.mask = ModalityMask::single(Modality::Lang);
    let input = PolicyInput::new(&s.history, &goal, &cfg, 3).unwrap();
    let mut g = Graph::new();
    let out = build_forward(&mut g, &p, &cfg, &[input]).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    for (name, gr) in &grads {
        let encoder = ["pose.", "img.", SAT_PREFIX]
            .iter()
            .any(|pre| name.starts_with(pre));
        if encoder {
            assert!(
                gr.data().iter().all(|&v| v == 0.0),
                "{name} has non-zero gradient"
            );
        }
    }
    assert!(grads["lang.w1"].data().iter().any(|&v| v != 0.0));
}

#[test]
fn goal_token_order_is_irrelevant_with_tied_slot_embedding() {
    let cfg = PolicyConfig::default();
    let p = init_params(&cfg, 6).unwrap();
    let s = scene(4);
    let mut goal = s.goal.clone();
    goal.mask = ModalityMask::of(&[Modality::Pose, Modality::Image, Modality::Sat]);
    let input = PolicyInput::new(&s.history, &goal, &cfg, 1).unwrap();
    let run = |order| {
        let mut g = Graph::new();
        let out =
            build_forward_with_goal_order(&mut g, &p, &cfg, std::slice::from_ref(&input), order)
                .unwrap();
        g.value(out).data().to_vec()
    };
    let a = run([0, 1, 2, 3]);
    for order in [[3, 2, 1, 0], [1, 3, 0, 2]] {
        let b = run(order);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn forward_gradients_match_finite_differences() {
    let cfg = tiny();
    let p = init_params(&cfg, 8).unwrap();
    let s = scene(2);
    let inputs: Vec<PolicyInput> = [
        ModalityMask::ALL,
        ModalityMask::of(&[Modality::Pose, Modality::Sat]),
    ]
    .iter()
    .enumerate()
    .map(|(i, &mask)| {
        let mut goal = s.goal.clone();
        goal.mask = mask;
        PolicyInput::new(&s.history, &goal, &cfg, i as u64).unwrap()
    })
    .collect();
    let target = Tensor::new(
        vec![2, 8, 2],
        (0..32).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap();
    let report = finite_diff_check(
        |g: &mut Graph, p: &Params| {
            let out = build_forward(g, p, &cfg, &inputs)?;
            let t = g.constant(target.clone());
            g.mse(out, t)
        },
        &p,
        1e-4,
        &FdOptions {
            max_coords: Some(6),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let cfg = tiny();
    let ck = Checkpoint {
        config: cfg.clone(),
        meta: CheckpointMeta {
            step: 12,
            seed: 3,
            mixture_hash: "abc".into(),
        },
        params: init_params(&cfg, 5).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    omninav_core::policy::save_checkpoint(&ck, &path).unwrap();
    let loaded = omninav_core::policy::load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);

    // Header layout: length prefix, JSON, newline.
    let hl = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    assert_eq!(bytes[4 + hl - 1], b'\n');
    let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + hl - 1]).unwrap();
    for key in ["config", "step", "seed", "tensors"] {
        assert!(header.get(key).is_some(), "{key}");
    }

    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8])
        .unwrap_err()
        .to_string();
    assert!(err.contains("payload"), "{err}");
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&longer)
        .unwrap_err()
        .to_string()
        .contains("payload"));
    let mut bad_header = bytes.clone();
    bad_header[6] = b'#';
    assert!(Checkpoint::from_bytes(&bad_header)
        .unwrap_err()
        .to_string()
        .contains("header"));
    assert!(Checkpoint::from_bytes(&bytes[..2]).is_err());

    let other = PolicyConfig {
        ff: 32,
        ..cfg.clone()
    };
    let err = loaded.ensure_config(&other).unwrap_err().to_string();
    assert!(err.contains("tensor blk0.ff1.b"), "{err}");
}

#[test]
fn checkpoint_without_satellite_encoder_refuses_sat_goals() {
    let cfg = tiny();
    let mut params = init_params(&cfg, 5).unwrap();
    let sat: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(SAT_PREFIX))
        .cloned()
        .collect();
    for n in sat {
        params.remove(&n);
    }
    let ck = Checkpoint {
        config: cfg.clone(),
        meta: CheckpointMeta::default(),
        params,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert!(!back.has_sat_encoder());
    let s = scene(1);
    let mut goal = s.goal.clone();
    goal.mask = ModalityMask::single(Modality::Pose);
    assert!(forward_policy(&back.params, &cfg, &s.history, &goal, 0).is_ok());
    goal.mask = ModalityMask::single(Modality::Sat);
    assert!(forward_policy(&back.params, &cfg, &s.history, &goal, 0).is_err());
}

#[test]
fn batched_forward_matches_single_forwards() {
    let cfg = PolicyConfig::default();
    let p = init_params(&cfg, 12).unwrap();
    let masks = [
        ModalityMask::single(Modality::Pose),
        ModalityMask::single(Modality::Lang),
        ModalityMask::of(&[Modality::Image, Modality::Sat]),
        ModalityMask::ALL,
        ModalityMask::EMPTY,
    ];
    let inputs: Vec<PolicyInput> = masks
        .iter()
        .enumerate()
        .map(|(i, &mask)| {
            let s = scene(20 + i as u64);
            let goal = GoalSpec {
                mask,
                ..s.goal.clone()
            }
            .selected_only();
            PolicyInput::new(&s.history, &goal, &cfg, i as u64).unwrap()
        })
        .collect();
    let batch = omninav_core::policy::forward_batch(&p, &cfg, &inputs)
        .unwrap()
        .chunks;
    for (x, want) in inputs.iter().zip(&batch) {
        let one = omninav_core::policy::forward_batch(&p, &cfg, std::slice::from_ref(x))
            .unwrap()
            .chunks;
        for (a, b) in one[0].flat().iter().zip(want.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
