use omninav_core::datagen::{
    generate_dataset, DatasetShard, DatasetTag, GenConfig, Modality, HELD_OUT_PAIRS, OBJ_TOLERANCE,
};
use omninav_core::geometry::{EmbodimentId, EmbodimentSpec};
use omninav_core::reannotate::{reannotate_dataset, ReannotateConfig};
use omninav_core::worldsim::generate_world;

fn small(tag: DatasetTag) -> GenConfig {
    GenConfig::new(tag, 100, 3, 24, 7)
}

#[test]
fn shards_are_deterministic_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = small(DatasetTag::Gnm);
    let s1 = generate_dataset(&cfg, Some(&a)).unwrap();
    generate_dataset(&cfg, Some(&b)).unwrap();
    for f in ["manifest.json", "samples.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(DatasetShard::load(&a).unwrap(), s1);
    assert_eq!(s1.manifest.count, 24);
    assert_eq!(s1.manifest.seed_range, [100, 103]);
}

#[test]
fn every_tag_carries_its_modalities() {
    for tag in DatasetTag::ALL {
        let shard = generate_dataset(&small(tag), None).unwrap();
        assert_eq!(shard.samples.len(), 24, "{}", tag.name());
        for s in &shard.samples {
            s.validate().unwrap();
            assert_eq!(s.modalities, tag.modalities(), "{}", tag.name());
            for m in Modality::ALL {
                let present = match m {
                    Modality::Pose => s.goal_pose.is_some(),
                    Modality::Image => s.goal_image.is_some(),
                    Modality::Lang => s.lang.is_some(),
                    Modality::Sat => s.sat_image.is_some(),
                };
                assert_eq!(present, s.has(m), "{} {}", tag.name(), m.name());
            }
            assert_eq!(s.m_obj == 1, tag == DatasetTag::Lelan);
            assert!((100..103).contains(&s.world_seed));
        }
    }
}

#[test]
fn instruction_samples_are_in_split_and_consistent() {
    let shard = generate_dataset(&GenConfig::new(DatasetTag::Lelan, 200, 4, 40, 3), None).unwrap();
    for s in &shard.samples {
        let world = generate_world(s.world_seed, &Default::default()).unwrap();
        let label = s.lang.as_ref().unwrap();
        let target = world.landmark(label.target()).unwrap();
        assert!(
            !HELD_OUT_PAIRS.contains(&(target.color, target.shape)),
            "{}",
            label.text()
        );
        let p = s.p_obj.unwrap();
        let last = s.a_ref.last();
        assert!((p[0] - last[0]).hypot(p[1] - last[1]) <= OBJ_TOLERANCE + 1e-12);
    }
}

#[test]
fn fast_logs_reannotate_into_slow_chunks() {
    let raw = generate_dataset(&small(DatasetTag::Bdd), None).unwrap();
    assert_eq!(raw.manifest.embodiment, EmbodimentId::Fast);
    let out = reannotate_dataset(&raw, &ReannotateConfig::default()).unwrap();
    assert_eq!(out.manifest.embodiment, EmbodimentId::Slow);
    assert!(out.manifest.optimizer_config.is_some());
    let bound = EmbodimentSpec::SLOW.max_step() + 1e-9;
    for s in &out.samples {
        assert_eq!(s.tag, DatasetTag::Bdd);
        assert!(s.a_ref.max_step() <= bound);
    }
    assert_eq!(
        out,
        reannotate_dataset(&raw, &ReannotateConfig::default()).unwrap()
    );
}
