use std::collections::BTreeMap;

use omninav_core::datagen::{behavior_adherence, plan_expert_path, Clause, Modality};
use omninav_core::evalcli::{
    build_tasks, compute_metrics, run_episode, run_suite, ArmSpec, Outcome, SuiteSpec, TaskKind,
    TaskSet, TaskSpec, EPISODE_BUDGET, SUCCESS_RADIUS,
};
use omninav_core::geometry::Pose2D;
use omninav_core::policy::{init_params, Checkpoint, CheckpointMeta, ModalityMask, PolicyConfig};
use omninav_core::worldsim::{generate_world, WorldGenConfig, WORLD_SIZE};

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

fn suite(kind: TaskKind, episodes: usize, seed: u64) -> SuiteSpec {
    SuiteSpec {
        arms: vec![ArmSpec {
            name: "random".into(),
            checkpoint: "unused.ckpt".into(),
            modalities: ModalityMask::ALL,
        }],
        tasks: vec![TaskSet { kind, episodes }],
        eval_worlds: [100_000, 100_020],
        world: WorldGenConfig::default(),
        train_worlds: vec![[0, 1000]],
        budget: EPISODE_BUDGET,
        seed,
    }
}

fn pose_task(world_seed: u64, start: Pose2D, goal: Pose2D) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Pose,
        world_seed,
        start,
        goal,
        target: None,
        mask: ModalityMask::single(Modality::Pose),
        lang: None,
        clause: None,
        success_radius: SUCCESS_RADIUS,
        budget: EPISODE_BUDGET,
        route: Vec::new(),
    }
}

#[test]
fn random_policy_rarely_succeeds() {
    let spec = suite(TaskKind::Pose, 50, 11);
    let cks = BTreeMap::from([("random".to_string(), random_checkpoint(3))]);
    let report = run_suite(&spec, &cks).unwrap();
    let episodes = &report.arms[0].episodes;
    assert_eq!(episodes.len(), 50);
    let sr = episodes.iter().filter(|e| e.success()).count() as f64 / 50.0;
    assert!(sr < 0.2, "random SR {sr}");
    assert_eq!(report.metric("random", TaskKind::Pose).unwrap().sr, sr);
}

#[test]
fn suites_are_deterministic_and_metrics_recompute() {
    let spec = suite(TaskKind::Pose, 4, 5);
    let mut spec = SuiteSpec { budget: 20, ..spec };
    let cks = BTreeMap::from([("random".to_string(), random_checkpoint(4))]);
    let a = run_suite(&spec, &cks).unwrap();
    assert_eq!(a, run_suite(&spec, &cks).unwrap());
    let arm = &a.arms[0];
    assert_eq!(
        compute_metrics(&arm.episodes, &a.config_hash, a.seed).unwrap(),
        arm.report
    );
    spec.seed = 6;
    assert_ne!(spec.hash(), a.config_hash);
}

#[test]
fn tasks_come_from_held_out_worlds_only() {
    let mut spec = suite(TaskKind::Lang, 10, 0);
    for t in build_tasks(&spec).unwrap() {
        assert!((100_000..100_020).contains(&t.world_seed));
    }
    spec.train_worlds.push([100_019, 100_030]);
    assert!(build_tasks(&spec).is_err());
    assert!(run_suite(&spec, &BTreeMap::new()).is_err());
}

#[test]
fn a_goal_within_reach_succeeds_in_one_step() {
    let world = generate_world(100_000, &WorldGenConfig::open_room()).unwrap();
    let start = Pose2D::new(20.0, 20.0, 0.0);
    let task = pose_task(world.seed, start, Pose2D::new(20.5, 20.0, 0.0));
    let r = run_episode(&world, &random_checkpoint(1), &task, 0).unwrap();
    assert_eq!(r.outcome, Outcome::Success);
    assert_eq!(r.steps, 1);
    assert_eq!(r.trajectory.len(), 2);
    assert!((r.initial_distance - 0.5).abs() < 1e-12);
}

#[test]
fn malformed_tasks_are_rejected() {
    let world = generate_world(100_000, &WorldGenConfig::open_room()).unwrap();
    let ck = random_checkpoint(1);
    let ok = pose_task(
        world.seed,
        Pose2D::new(20.0, 20.0, 0.0),
        Pose2D::new(25.0, 20.0, 0.0),
    );
    let cases = [
        TaskSpec {
            start: Pose2D::new(f64::NAN, 20.0, 0.0),
            ..ok.clone()
        },
        TaskSpec {
            mask: ModalityMask::EMPTY,
            ..ok.clone()
        },
        TaskSpec {
            mask: ModalityMask::single(Modality::Lang),
            ..ok.clone()
        },
        TaskSpec {
            success_radius: 0.0,
            ..ok.clone()
        },
        TaskSpec {
            world_seed: world.seed + 1,
            ..ok.clone()
        },
    ];
    for t in &cases {
        assert!(run_episode(&world, &ck, t, 0).is_err(), "{t:?}");
    }
    assert!(run_episode(&world, &ck, &ok, 0).is_ok());
}

#[test]
fn wall_following_expert_is_adherent() {
    let world = generate_world(4, &WorldGenConfig::open_room()).unwrap();
    let start = Pose2D::new(2.0, 3.0, 0.0);
    let traj = plan_expert_path(&world, &start, [30.0, 2.5], Some(&Clause::Wall)).unwrap();
    // Walls are the four sides of the square world.
    let wall = |p: &Pose2D| p.x.min(p.y).min(WORLD_SIZE - p.x).min(WORLD_SIZE - p.y);
    let near = traj.iter().filter(|p| wall(p) < 2.0).count();
    assert!(near as f64 >= 0.8 * traj.len() as f64);
    assert!(behavior_adherence(&traj, &Clause::Wall, &world).unwrap());
    // Straight across the middle of the room is not.
    let middle: Vec<Pose2D> = (0..60)
        .map(|i| Pose2D::new(10.0 + 0.3 * i as f64, 20.0, 0.0))
        .collect();
    assert!(!behavior_adherence(&middle, &Clause::Wall, &world).unwrap());
    assert!(behavior_adherence(&middle, &Clause::KeepAway { landmark: 999 }, &world).is_err());
}
