//! Experiment drivers: the modality ablation with its composition tasks, and
//! the new-modality adaptation and fine-tuning study.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::suite::{run_suite, ArmSpec, SuiteReport, SuiteSpec, TaskSet};
use super::{TaskKind, EPISODE_BUDGET};
use crate::datagen::{generate_dataset, DatasetShard, DatasetTag, GenConfig, Modality};
use crate::error::{Error, Result};
use crate::geometry::EmbodimentId;
use crate::numerics::AdamConfig;
use crate::policy::{Checkpoint, ModalityMask, PolicyConfig};
use crate::reannotate::{reannotate_dataset, ReannotateConfig};
use crate::training::{
    adapt_new_modality, finetune, train_on, MetricsRecord, Mixture, MixtureConfig, TrainConfig,
    FINETUNE_FRAMES,
};
use crate::worldsim::WorldGenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub world: WorldGenConfig,
    /// Half-open world seed ranges.
    pub train_worlds: [u64; 2],
    pub eval_worlds: [u64; 2],
    /// Training samples generated per dataset tag.
    pub samples: BTreeMap<DatasetTag, usize>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub accumulation: usize,
    /// Optimizer steps of every from-scratch arm.
    pub steps: usize,
    pub episodes: usize,
    pub compose_episodes: usize,
    /// Steps of satellite-encoder adaptation, and of the scratch
    /// satellite specialist it is compared with.
    pub adapt_steps: usize,
    /// World family held out for fine-tuning.
    pub finetune_world: WorldGenConfig,
    pub finetune_worlds: [u64; 2],
    pub finetune_eval_worlds: [u64; 2],
    pub finetune_frames: usize,
    pub finetune_steps: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
}

fn default_budget() -> usize {
    EPISODE_BUDGET
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldGenConfig::default(),
            train_worlds: [0, 400],
            eval_worlds: [100_000, 100_200],
            samples: [
                (DatasetTag::Lelan, 8000),
                (DatasetTag::Gnm, 4000),
                (DatasetTag::Frodo, 4000),
                (DatasetTag::Bdd, 4000),
            ]
            .into(),
            policy: PolicyConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 64,
            accumulation: 4,
            steps: 20_000,
            episodes: 50,
            compose_episodes: 30,
            adapt_steps: 5_000,
            finetune_world: WorldGenConfig::dense(),
            finetune_worlds: [200_000, 200_100],
            finetune_eval_worlds: [300_000, 300_100],
            finetune_frames: FINETUNE_FRAMES,
            finetune_steps: 1_000,
            budget: EPISODE_BUDGET,
        }
    }
}

impl ExperimentConfig {
    /// Smoke-sized run: a few hundred steps per arm, a handful of episodes.
    pub fn tiny() -> Self {
        Self {
            samples: [
                (DatasetTag::Lelan, 160),
                (DatasetTag::Gnm, 80),
                (DatasetTag::Frodo, 80),
                (DatasetTag::Bdd, 80),
            ]
            .into(),
            train_worlds: [0, 20],
            batch_size: 8,
            accumulation: 1,
            steps: 500,
            episodes: 2,
            compose_episodes: 3,
            adapt_steps: 100,
            finetune_frames: 200,
            finetune_steps: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        let overlap = |a: [u64; 2], b: [u64; 2]| a[0] < b[1] && b[0] < a[1];
        let ranges = [
            self.train_worlds,
            self.eval_worlds,
            self.finetune_worlds,
            self.finetune_eval_worlds,
        ];
        if ranges.iter().any(|r| r[0] >= r[1]) {
            return Err(Error::Invalid("empty world seed range".into()));
        }
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                if overlap(ranges[i], ranges[j]) {
                    return Err(Error::Invalid(format!(
                        "world seed ranges {:?} and {:?} overlap",
                        ranges[i], ranges[j]
                    )));
                }
            }
        }
        if self.samples.values().all(|&n| n == 0) {
            return Err(Error::Invalid("no training samples requested".into()));
        }
        Ok(())
    }

    fn train_config(&self, modalities: ModalityMask, steps: usize) -> TrainConfig {
        let mut mixture = MixtureConfig::new(Vec::new());
        mixture.batch_size = self.batch_size;
        mixture.accumulation = self.accumulation;
        mixture.modalities = modalities.modalities();
        let mut cfg = TrainConfig::new(mixture, steps, self.seed);
        cfg.policy = self.policy.clone();
        cfg.optimizer = self.optimizer;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub modalities: ModalityMask,
    pub steps: u64,
    pub final_j: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub arms: Vec<ArmReport>,
    pub suites: BTreeMap<String, SuiteReport>,
}

/// Trained checkpoints of an experiment, by arm name.
pub type Arms = BTreeMap<String, Checkpoint>;

fn shards_for(
    cfg: &ExperimentConfig,
    world: &WorldGenConfig,
    worlds: [u64; 2],
    samples: &BTreeMap<DatasetTag, usize>,
    out: Option<&Path>,
) -> Result<Vec<DatasetShard>> {
    let mut shards = Vec::new();
    for (&tag, &n) in samples {
        if n == 0 {
            continue;
        }
        let mut g = GenConfig::new(tag, worlds[0], worlds[1] - worlds[0], n, cfg.seed);
        g.world = world.clone();
        let dir = out.map(|d| d.join(tag.name()));
        let mut shard = generate_dataset(&g, None)?;
        if shard.manifest.embodiment != EmbodimentId::Slow {
            shard = reannotate_dataset(&shard, &ReannotateConfig::default())?;
        }
        if let Some(d) = &dir {
            shard.save(d)?;
        }
        shards.push(shard);
    }
    Ok(shards)
}

fn sub(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: Option<&'a Path>,
    log: &'a mut dyn FnMut(&str),
    arms: Vec<ArmReport>,
}

impl Runner<'_> {
    fn record(
        &mut self,
        name: &str,
        modalities: ModalityMask,
        ck: &Checkpoint,
        metrics: &[MetricsRecord],
    ) {
        self.arms.push(ArmReport {
            name: name.into(),
            modalities,
            steps: ck.meta.step,
            final_j: metrics.last().map(|m| m.objective.j),
        });
    }

    fn train_arm(
        &mut self,
        name: &str,
        shards: &[DatasetShard],
        modalities: ModalityMask,
        steps: usize,
    ) -> Result<Checkpoint> {
        (self.log)(&format!(
            "training {name} ({}) for {steps} steps",
            modalities.name()
        ));
        let tc = self.cfg.train_config(modalities, steps);
        let mixture = Mixture::from_shards(shards.to_vec(), &tc.mixture)?;
        let dir = sub(self.out, &format!("arms/{name}"));
        let out = train_on(&tc, &mixture, dir.as_deref(), &mut |_| {})?;
        self.record(name, modalities, &out.checkpoint, &out.metrics);
        Ok(out.checkpoint)
    }

    fn suite(&mut self, name: &str, spec: &SuiteSpec, arms: &Arms) -> Result<SuiteReport> {
        (self.log)(&format!("evaluating suite {name}"));
        let report = run_suite(spec, arms)?;
        if let Some(d) = self.out {
            let path = d.join(format!("{name}.json"));
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            std::fs::write(&path, serde_json::to_vec_pretty(&report)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        (self.log)(&report.table);
        Ok(report)
    }
}

fn arm(name: &str, modalities: ModalityMask, out: Option<&Path>) -> ArmSpec {
    ArmSpec {
        name: name.into(),
        checkpoint: sub(
            out,
            &format!("arms/{name}/{}", crate::training::CHECKPOINT_FILE),
        )
        .unwrap_or_default(),
        modalities,
    }
}

/// Ablation arms: the omni-modal policy and one specialist per modality,
/// all trained for the same number of steps.
pub const ABLATION_ARMS: [(&str, Option<Modality>); 5] = [
    ("omni", None),
    ("lang-only", Some(Modality::Lang)),
    ("pose-only", Some(Modality::Pose)),
    ("image-only", Some(Modality::Image)),
    ("sat-only", Some(Modality::Sat)),
];

/// Trains the ablation arms and evaluates them on every task kind,
/// including pose plus behavior-instruction composition.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<(ExperimentReport, Arms)> {
    cfg.validate()?;
    let mut r = Runner {
        cfg,
        out,
        log,
        arms: Vec::new(),
    };
    (r.log)("generating training shards");
    let shards = shards_for(
        cfg,
        &cfg.world,
        cfg.train_worlds,
        &cfg.samples,
        sub(out, "data").as_deref(),
    )?;
    let mut arms = Arms::new();
    let mut specs = Vec::new();
    for (name, m) in ABLATION_ARMS {
        let mask = m.map_or(ModalityMask::ALL, ModalityMask::single);
        arms.insert(
            name.to_string(),
            r.train_arm(name, &shards, mask, cfg.steps)?,
        );
        specs.push(arm(name, mask, out));
    }
    let task = |kind, episodes| TaskSet { kind, episodes };
    let spec = SuiteSpec {
        arms: specs,
        tasks: vec![
            task(TaskKind::Lang, cfg.episodes),
            task(TaskKind::LangOod, cfg.episodes),
            task(TaskKind::Pose, cfg.episodes),
            task(TaskKind::Image, cfg.episodes),
            task(TaskKind::Sat, cfg.episodes),
            task(TaskKind::Compose, cfg.compose_episodes),
        ],
        eval_worlds: cfg.eval_worlds,
        world: cfg.world.clone(),
        train_worlds: shards.iter().map(|s| s.manifest.seed_range).collect(),
        budget: cfg.budget,
        seed: cfg.seed,
    };
    let report = r.suite("ablation", &spec, &arms)?;
    let suites = [("ablation".to_string(), report)].into();
    Ok((
        ExperimentReport {
            arms: r.arms,
            suites,
        },
        arms,
    ))
}

/// Adapts a policy trained without satellite goals to them by training only
/// a new satellite encoder, against a scratch satellite specialist with the
/// same step budget; then fine-tunes `omni` on a held-out world family and
/// compares pose and satellite success there.
pub fn run_adaptation(
    cfg: &ExperimentConfig,
    omni: &Checkpoint,
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut r = Runner {
        cfg,
        out,
        log,
        arms: Vec::new(),
    };
    (r.log)("generating training shards");
    let shards = shards_for(
        cfg,
        &cfg.world,
        cfg.train_worlds,
        &cfg.samples,
        sub(out, "data").as_deref(),
    )?;
    let no_sat = ModalityMask::of(&[Modality::Pose, Modality::Image, Modality::Lang]);
    let sat = ModalityMask::single(Modality::Sat);
    let base = r.train_arm("omni-nosat", &shards, no_sat, cfg.steps)?;

    (r.log)(&format!(
        "adapting a satellite encoder for {} steps",
        cfg.adapt_steps
    ));
    let tc = cfg.train_config(sat, cfg.adapt_steps);
    let mixture = Mixture::from_shards(shards.clone(), &tc.mixture)?;
    let adapted = adapt_new_modality(
        &base,
        &tc,
        &mixture,
        sub(out, "arms/adapted").as_deref(),
        &mut |_| {},
    )?;
    r.record("adapted", sat, &adapted.checkpoint, &adapted.metrics);
    let scratch = r.train_arm("sat-scratch", &shards, sat, cfg.adapt_steps)?;
    drop(shards);

    let train_ranges = vec![cfg.train_worlds, cfg.finetune_worlds];
    let spec = SuiteSpec {
        arms: vec![arm("adapted", sat, out), arm("sat-scratch", sat, out)],
        tasks: vec![TaskSet {
            kind: TaskKind::Sat,
            episodes: cfg.episodes,
        }],
        eval_worlds: cfg.eval_worlds,
        world: cfg.world.clone(),
        train_worlds: train_ranges.clone(),
        budget: cfg.budget,
        seed: cfg.seed,
    };
    let arms: Arms = [
        ("adapted".into(), adapted.checkpoint),
        ("sat-scratch".into(), scratch),
    ]
    .into();
    let adaptation = r.suite("adaptation", &spec, &arms)?;

    (r.log)("generating held-out family shards");
    let ft_samples: BTreeMap<DatasetTag, usize> = [
        (DatasetTag::Gnm, cfg.finetune_frames / 2),
        (
            DatasetTag::Frodo,
            cfg.finetune_frames - cfg.finetune_frames / 2,
        ),
    ]
    .into();
    let ft_shards = shards_for(
        cfg,
        &cfg.finetune_world,
        cfg.finetune_worlds,
        &ft_samples,
        sub(out, "finetune-data").as_deref(),
    )?;
    (r.log)(&format!(
        "fine-tuning omni for {} steps",
        cfg.finetune_steps
    ));
    let mut tc = cfg.train_config(ModalityMask::ALL, cfg.finetune_steps);
    tc.mixture.max_frames = Some(cfg.finetune_frames);
    let tuned = finetune(
        omni,
        &tc,
        ft_shards,
        sub(out, "arms/finetuned").as_deref(),
        &mut |_| {},
    )?;
    r.record(
        "finetuned",
        ModalityMask::ALL,
        &tuned.checkpoint,
        &tuned.metrics,
    );

    let spec = SuiteSpec {
        arms: vec![
            arm("omni", ModalityMask::ALL, out),
            arm("finetuned", ModalityMask::ALL, out),
        ],
        tasks: vec![
            TaskSet {
                kind: TaskKind::Pose,
                episodes: cfg.episodes,
            },
            TaskSet {
                kind: TaskKind::Sat,
                episodes: cfg.episodes,
            },
        ],
        eval_worlds: cfg.finetune_eval_worlds,
        world: cfg.finetune_world.clone(),
        train_worlds: train_ranges,
        budget: cfg.budget,
        seed: cfg.seed,
    };
    let arms: Arms = [
        ("omni".into(), omni.clone()),
        ("finetuned".into(), tuned.checkpoint),
    ]
    .into();
    let family = r.suite("finetune", &spec, &arms)?;
    Ok(ExperimentReport {
        arms: r.arms,
        suites: [
            ("adaptation".to_string(), adaptation),
            ("finetune".to_string(), family),
        ]
        .into(),
    })
}
