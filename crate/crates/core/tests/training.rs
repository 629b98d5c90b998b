use std::collections::BTreeMap;

use omninav_core::datagen::{generate_dataset, DatasetShard, DatasetTag, GenConfig, Modality};
use omninav_core::geometry::ActionChunk;
use omninav_core::numerics::{adam_step, AdamConfig, Graph, OptimizerState, Tensor};
use omninav_core::policy::{load_checkpoint, ModalityMask, PolicyConfig, SAT_PREFIX};
use omninav_core::reannotate::{reannotate_dataset, ReannotateConfig};
use omninav_core::training::{
    adapt_new_modality, average_gradients, batch_gradients, finetune, objective_graph, step_rng,
    train_on, Mixture, MixtureConfig, ObjectiveBreakdown, ObjectiveTarget, TrainConfig,
    CHECKPOINT_FILE, METRICS_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shards() -> Vec<DatasetShard> {
    DatasetTag::ALL
        .iter()
        .map(|&t| {
            let raw = generate_dataset(&GenConfig::new(t, 50, 2, 12, 4), None).unwrap();
            if t == DatasetTag::Bdd {
                reannotate_dataset(&raw, &ReannotateConfig::default()).unwrap()
            } else {
                raw
            }
        })
        .collect()
}

fn tiny() -> PolicyConfig {
    PolicyConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff: 32,
        ..Default::default()
    }
}

fn breakdown(actions: Vec<f64>, targets: &[ObjectiveTarget]) -> ObjectiveBreakdown {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![targets.len(), 8, 2], actions).unwrap());
    let n = objective_graph(&mut g, a, targets).unwrap();
    ObjectiveBreakdown::read(&g, &n, a, targets)
}

fn chunk(f: impl FnMut(usize) -> [f64; 2]) -> ActionChunk {
    ActionChunk::new((0..8).map(f).collect()).unwrap()
}

#[test]
fn perfect_constant_imitation_has_zero_objective() {
    let t = ObjectiveTarget {
        a_ref: chunk(|_| [0.4, 0.1]),
        m_obj: 0,
        p_obj: None,
    };
    let bd = breakdown(t.a_ref.flat(), std::slice::from_ref(&t));
    assert_eq!((bd.j, bd.j_il, bd.j_obj, bd.j_sm), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn half_meter_offset_gives_quarter_imitation_loss() {
    let t = ObjectiveTarget {
        a_ref: chunk(|i| [0.1 * i as f64, -0.05 * i as f64]),
        m_obj: 0,
        p_obj: None,
    };
    let pred: Vec<f64> = t.a_ref.flat().iter().map(|v| v + 0.5).collect();
    // Hand evaluation: mean over waypoints and coordinates of 0.5^2.
    let mut oracle = 0.0;
    for (p, r) in pred.iter().zip(t.a_ref.flat()) {
        oracle += (p - r) * (p - r);
    }
    oracle /= 16.0;
    let bd = breakdown(pred, &[t]);
    assert!((bd.j_il - 0.25).abs() < 1e-12 && (bd.j_il - oracle).abs() < 1e-12);
}

#[test]
fn objective_terms_add_up_and_respect_m_obj() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let b = 1 + trial % 5;
        let targets: Vec<ObjectiveTarget> = (0..b)
            .map(|_| {
                let m = rng.random_range(0..2u8);
                ObjectiveTarget {
                    a_ref: chunk(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                    m_obj: m,
                    p_obj: (m == 1 || rng.random_bool(0.5))
                        .then(|| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                }
            })
            .collect();
        let pred: Vec<f64> = (0..b * 16).map(|_| rng.random_range(-1.5..1.5)).collect();
        let bd = breakdown(pred.clone(), &targets);
        assert!((bd.j - (bd.j_il + bd.j_obj + bd.j_sm)).abs() <= 1e-12);

        // With m_obj = 0 everywhere, p_obj content is irrelevant.
        let zeroed: Vec<ObjectiveTarget> = targets
            .iter()
            .map(|t| ObjectiveTarget {
                m_obj: 0,
                p_obj: Some([9.0, -7.0]),
                ..t.clone()
            })
            .collect();
        let other: Vec<ObjectiveTarget> = zeroed
            .iter()
            .map(|t| ObjectiveTarget {
                p_obj: Some([rng.random(), rng.random()]),
                ..t.clone()
            })
            .collect();
        assert_eq!(
            breakdown(pred.clone(), &zeroed).j,
            breakdown(pred, &other).j
        );
    }
}

#[test]
fn object_term_vanishes_at_the_object_and_requires_p_obj() {
    let a = chunk(|i| [0.15 * i as f64, 0.0]);
    let t = ObjectiveTarget {
        a_ref: a.clone(),
        m_obj: 1,
        p_obj: Some(a.last()),
    };
    assert_eq!(breakdown(a.flat(), std::slice::from_ref(&t)).j_obj, 0.0);
    let mut g = Graph::new();
    let n = g.constant(Tensor::new(vec![1, 8, 2], a.flat()).unwrap());
    let bad = ObjectiveTarget { p_obj: None, ..t };
    assert!(objective_graph(&mut g, n, &[bad]).is_err());
}

#[test]
fn sampler_follows_ratio_and_uniform_subsets() {
    let mix = Mixture::from_shards(shards(), &MixtureConfig::new(vec![])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items = mix.sample_batch(&mut rng, 70_000);
    let mut counts: BTreeMap<DatasetTag, usize> = BTreeMap::new();
    let mut gnm_masks: BTreeMap<u8, usize> = BTreeMap::new();
    for it in &items {
        let tag = mix.pools[it.pool].0;
        *counts.entry(tag).or_default() += 1;
        match tag {
            DatasetTag::Lelan => assert_eq!(it.mask, ModalityMask::single(Modality::Lang)),
            DatasetTag::Gnm => *gnm_masks.entry(it.mask.bits()).or_default() += 1,
            _ => {}
        }
    }
    let expect = [
        (DatasetTag::Lelan, 4.0 / 7.0),
        (DatasetTag::Gnm, 1.0 / 7.0),
        (DatasetTag::Frodo, 1.0 / 7.0),
        (DatasetTag::Bdd, 1.0 / 7.0),
    ];
    for (tag, p) in expect {
        let f = counts[&tag] as f64 / 70_000.0;
        assert!((f - p).abs() <= 0.01, "{} {f}", tag.name());
    }
    let n: usize = gnm_masks.values().sum();
    assert_eq!(gnm_masks.len(), 3);
    for c in gnm_masks.values() {
        assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02);
    }
}

#[test]
fn restricted_modalities_drop_unusable_tags() {
    let mut cfg = MixtureConfig::new(vec![]);
    cfg.modalities = vec![Modality::Sat];
    let mix = Mixture::from_shards(shards(), &cfg).unwrap();
    assert_eq!(mix.pools.len(), 1);
    assert_eq!(mix.pools[0].0, DatasetTag::Frodo);
    let items = mix.sample_batch(&mut ChaCha8Rng::seed_from_u64(0), 50);
    assert!(items
        .iter()
        .all(|i| i.mask == ModalityMask::single(Modality::Sat)));
}

#[test]
fn accumulated_micro_batches_equal_one_large_batch() {
    let mix = Mixture::from_shards(shards(), &MixtureConfig::new(vec![])).unwrap();
    let cfg = tiny();
    let params = omninav_core::policy::init_params(&cfg, 2).unwrap();
    let k = 4;
    let micro: Vec<_> = (0..k)
        .map(|m| mix.sample_batch(&mut step_rng(9, 0, m), 4))
        .collect();
    let parts: Vec<_> = micro
        .iter()
        .map(|items| batch_gradients(&params, &cfg, &mix, items).unwrap().1)
        .collect();
    let acc = average_gradients(&parts);
    let all: Vec<_> = micro.concat();
    let (_, big) = batch_gradients(&params, &cfg, &mix, &all).unwrap();
    let (mut diff, mut norm) = (0.0, 0.0);
    for (n, a) in &acc {
        for (x, y) in a.data().iter().zip(big[n].data()) {
            diff += (x - y) * (x - y);
            norm += y * y;
        }
    }
    assert!((diff / norm).sqrt() <= 1e-9);

    let mut pa = params.clone();
    let mut pb = params.clone();
    adam_step(
        &mut OptimizerState::new(AdamConfig::default()),
        &mut pa,
        &acc,
    )
    .unwrap();
    adam_step(
        &mut OptimizerState::new(AdamConfig::default()),
        &mut pb,
        &big,
    )
    .unwrap();
    // Relative difference of the parameter updates, per tensor.
    let mut worst: f64 = 0.0;
    for ((name, a), (_, b)) in pa.iter().zip(pb.iter()) {
        let d0 = params.get(name).unwrap();
        let (mut diff, mut norm) = (0.0, 0.0);
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(d0.data()) {
            diff += ((x - z) - (y - z)).powi(2);
            norm += (y - z).powi(2);
        }
        if norm > 0.0 {
            worst = worst.max((diff / norm).sqrt());
        }
    }
    assert!(worst <= 1e-9, "relative update difference {worst}");
}

fn small_train(steps: usize, seed: u64) -> TrainConfig {
    let mut mc = MixtureConfig::new(vec![]);
    mc.batch_size = 4;
    mc.accumulation = 2;
    let mut cfg = TrainConfig::new(mc, steps, seed);
    cfg.policy = tiny();
    cfg.checkpoint_every = 2;
    cfg
}

fn strip_wall(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut()
                .unwrap()
                .remove("wall_ms")
                .expect("wall_ms present");
            v
        })
        .collect()
}

#[test]
fn training_is_reproducible_and_logged() {
    let mix = Mixture::from_shards(shards(), &MixtureConfig::new(vec![])).unwrap();
    let cfg = small_train(3, 5);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train_on(&cfg, &mix, Some(&a), &mut |_| {}).unwrap();
    train_on(&cfg, &mix, Some(&b), &mut |_| {}).unwrap();
    let la = std::fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let lb = std::fs::read_to_string(b.join(METRICS_FILE)).unwrap();
    assert_eq!(la.lines().count(), 3);
    assert_eq!(strip_wall(&la), strip_wall(&lb));
    for rec in strip_wall(&la) {
        for key in ["step", "J", "J_il", "J_obj", "J_sm"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }
    assert_eq!(
        std::fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(b.join(CHECKPOINT_FILE)).unwrap()
    );
    assert_eq!(
        load_checkpoint(&a.join(CHECKPOINT_FILE)).unwrap(),
        ra.checkpoint
    );
    assert_eq!(ra.checkpoint.meta.step, 3);
}

#[test]
fn adaptation_trains_only_the_new_encoder() {
    let all = shards();
    let mut no_sat = MixtureConfig::new(vec![]);
    no_sat.modalities = vec![Modality::Pose, Modality::Image, Modality::Lang];
    let mix = Mixture::from_shards(all.clone(), &no_sat).unwrap();
    let cfg = small_train(2, 1);
    let base = train_on(&cfg, &mix, None, &mut |_| {}).unwrap().checkpoint;
    assert!(!base.has_sat_encoder());

    let mut sat_cfg = MixtureConfig::new(vec![]);
    sat_cfg.modalities = vec![Modality::Sat];
    let sat_mix = Mixture::from_shards(all, &sat_cfg).unwrap();
    let mut acfg = small_train(3, 8);
    acfg.mixture = sat_cfg;
    let adapted = adapt_new_modality(&base, &acfg, &sat_mix, None, &mut |_| {})
        .unwrap()
        .checkpoint;
    assert!(adapted.has_sat_encoder());
    for (name, t) in base.params.iter() {
        assert_eq!(adapted.params.get(name).unwrap(), t, "{name} changed");
    }
    let fresh = omninav_core::policy::init_sat_params(&acfg.policy, acfg.seed);
    let moved = fresh
        .iter()
        .any(|(n, t)| adapted.params.get(n).unwrap() != t);
    assert!(moved && fresh.names().all(|n| n.starts_with(SAT_PREFIX)));
    assert!(adapt_new_modality(&adapted, &acfg, &sat_mix, None, &mut |_| {}).is_err());
}

#[test]
fn zero_step_finetune_is_identity() {
    let all = shards();
    let mix = Mixture::from_shards(all.clone(), &MixtureConfig::new(vec![])).unwrap();
    let base = train_on(&small_train(1, 2), &mix, None, &mut |_| {})
        .unwrap()
        .checkpoint;
    let out = finetune(&base, &small_train(0, 3), all.clone(), None, &mut |_| {}).unwrap();
    assert_eq!(out.checkpoint, base);
    let moved = finetune(&base, &small_train(1, 3), all, None, &mut |_| {})
        .unwrap()
        .checkpoint;
    assert_ne!(moved.params, base.params);
    assert_eq!(moved.meta.step, 2);
}
