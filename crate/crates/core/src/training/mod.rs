//! Mixture sampling, the composite imitation objective, accumulated
//! optimization, and the adaptation and fine-tuning procedures.

mod mixture;
mod objective;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Modality;
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, finite_diff_check, AdamConfig, FdOptions, FdReport, Gradients, Graph,
    OptimizerState, Params,
};
use crate::policy::{
    build_forward, init_params, init_sat_params, save_checkpoint, Checkpoint, CheckpointMeta,
    PolicyConfig, SAT_PREFIX,
};

pub use mixture::{goal_of, BatchItem, Mixture, MixtureConfig};
pub use objective::{
    objective_graph, per_sample_il, ObjectiveBreakdown, ObjectiveNodes, ObjectiveTarget,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Fine-tuning data budget: 1.2 h at 3 Hz.
pub const FINETUNE_FRAMES: usize = 13_000;
pub const FINETUNE_LR_FACTOR: f64 = 0.1;
/// A fresh encoder behind a frozen trunk tolerates a larger step.
pub const ADAPT_LR_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    1000
}

impl TrainConfig {
    pub fn new(mixture: MixtureConfig, steps: usize, seed: u64) -> Self {
        Self {
            mixture,
            policy: PolicyConfig::default(),
            optimizer: AdamConfig::default(),
            steps,
            seed,
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(flatten)]
    pub objective: ObjectiveBreakdown,
    /// Wall-clock duration of the step; the only non-reproducible field.
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Deterministic RNG for micro-batch `micro` of optimizer step `step`.
pub fn step_rng(seed: u64, step: u64, micro: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(micro.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Objective and parameter gradients of one batch.
pub fn batch_gradients(
    params: &Params,
    cfg: &PolicyConfig,
    mixture: &Mixture,
    items: &[BatchItem],
) -> Result<(ObjectiveBreakdown, Gradients)> {
    let inputs = items
        .iter()
        .map(|it| mixture.input(it, cfg))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<ObjectiveTarget> = items
        .iter()
        .map(|it| ObjectiveTarget::of(mixture.sample(it)))
        .collect();
    let mut g = Graph::new();
    let actions = build_forward(&mut g, params, cfg, &inputs)?;
    let nodes = objective_graph(&mut g, actions, &targets)?;
    let mut bd = ObjectiveBreakdown::read(&g, &nodes, actions, &targets);
    let il = per_sample_il(g.value(actions).data(), &targets);
    let mut by: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (it, v) in items.iter().zip(&il) {
        for m in it.mask.modalities() {
            let e = by.entry(m.name().to_string()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    bd.j_il_by_modality = by
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    let grads = g.backward(nodes.j)?;
    Ok((bd, grads))
}

/// Finite-difference check of the forward pass plus the composite
/// objective on `items`, over every parameter tensor.
pub fn gradcheck_batch(
    params: &Params,
    cfg: &PolicyConfig,
    mixture: &Mixture,
    items: &[BatchItem],
    tolerance: f64,
    opts: &FdOptions,
) -> Result<FdReport> {
    let inputs = items
        .iter()
        .map(|it| mixture.input(it, cfg))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<ObjectiveTarget> = items
        .iter()
        .map(|it| ObjectiveTarget::of(mixture.sample(it)))
        .collect();
    finite_diff_check(
        |g: &mut Graph, p: &Params| {
            let actions = build_forward(g, p, cfg, &inputs)?;
            Ok(objective_graph(g, actions, &targets)?.j)
        },
        params,
        tolerance,
        opts,
    )
}

/// [`gradcheck_batch`] on freshly initialized parameters and a small batch
/// drawn from generated instruction and satellite-bearing shards, so every
/// encoder and the object term take part.
pub fn gradcheck_policy(
    cfg: &PolicyConfig,
    seed: u64,
    tolerance: f64,
    opts: &FdOptions,
) -> Result<FdReport> {
    use crate::datagen::{generate_dataset, DatasetTag, GenConfig};
    let shards = [DatasetTag::Lelan, DatasetTag::Frodo]
        .into_iter()
        .map(|t| generate_dataset(&GenConfig::new(t, seed, 2, 3, seed), None))
        .collect::<Result<Vec<_>>>()?;
    let mut mc = MixtureConfig::new(Vec::new());
    mc.ratio = [(DatasetTag::Lelan, 1.0), (DatasetTag::Frodo, 1.0)].into();
    let mixture = Mixture::from_shards(shards, &mc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = mixture.sample_batch(&mut rng, 6);
    // One instruction sample and one with every satellite-bearing modality.
    let pool = |t: DatasetTag| {
        mixture
            .pools
            .iter()
            .position(|(p, _)| *p == t)
            .expect("pool present")
    };
    items[0].pool = pool(DatasetTag::Lelan);
    items[0].mask = crate::policy::ModalityMask::single(Modality::Lang);
    items[1].pool = pool(DatasetTag::Frodo);
    items[1].mask =
        crate::policy::ModalityMask::of(&[Modality::Pose, Modality::Image, Modality::Sat]);
    for it in &mut items[..2] {
        it.index = 0;
    }
    let params = init_params(cfg, seed)?;
    gradcheck_batch(&params, cfg, &mixture, &items, tolerance, opts)
}

/// Mean of micro-batch gradients (missing entries count as zero).
pub fn average_gradients(parts: &[Gradients]) -> Gradients {
    let mut out = Gradients::new();
    for part in parts {
        for (name, t) in part {
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += v;
                    }
                }
                None => {
                    out.insert(name.clone(), t.clone());
                }
            }
        }
    }
    let k = parts.len() as f64;
    for t in out.values_mut() {
        for v in t.data_mut() {
            *v /= k;
        }
    }
    out
}

fn average_breakdowns(parts: &[ObjectiveBreakdown]) -> ObjectiveBreakdown {
    let k = parts.len() as f64;
    let mean = |f: fn(&ObjectiveBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / k;
    let mut by: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for p in parts {
        for (m, v) in &p.j_il_by_modality {
            let e = by.entry(m.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    ObjectiveBreakdown {
        j: mean(|b| b.j),
        j_il: mean(|b| b.j_il),
        j_obj: mean(|b| b.j_obj),
        j_sm: mean(|b| b.j_sm),
        j_obj_active: mean(|b| b.j_obj_active),
        m_obj_fraction: mean(|b| b.m_obj_fraction),
        j_il_by_modality: by
            .into_iter()
            .map(|(m, (s, n))| (m, s / n as f64))
            .collect(),
    }
}

/// Runs `cfg.steps` optimizer steps from `init`. Only parameters for which
/// `trainable` holds are updated; the rest keep their exact values.
/// Writes the metrics log and periodic checkpoints into `out_dir` when
/// given. `base` carries the step offset and seed into checkpoint metadata.
pub fn train_from(
    cfg: &TrainConfig,
    mixture: &Mixture,
    init: Params,
    trainable: &dyn Fn(&str) -> bool,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.policy.validate()?;
    let mut params = init;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(METRICS_FILE);
            Some(BufWriter::new(
                File::create(&p).map_err(|e| Error::io(&p, e))?,
            ))
        }
        None => None,
    };
    let checkpoint = |params: &Params, step: u64| Checkpoint {
        config: cfg.policy.clone(),
        meta: CheckpointMeta {
            step,
            seed: cfg.seed,
            mixture_hash: mixture.hash.clone(),
        },
        params: params.clone(),
    };
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps as u64 {
        let t0 = Instant::now();
        let mut bds = Vec::with_capacity(cfg.mixture.accumulation);
        let mut grads = Vec::with_capacity(cfg.mixture.accumulation);
        for micro in 0..cfg.mixture.accumulation as u64 {
            let items =
                mixture.sample_batch(&mut step_rng(cfg.seed, step, micro), cfg.mixture.batch_size);
            let (bd, gr) = batch_gradients(&params, &cfg.policy, mixture, &items).map_err(|e| {
                Error::Diverged(format!("step {step}: {e}; last good checkpoint retained"))
            })?;
            bds.push(bd);
            grads.push(gr);
        }
        let mut avg = average_gradients(&grads);
        avg.retain(|name, _| trainable(name));
        adam_step(&mut opt, &mut params, &avg)
            .map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;
        let rec = MetricsRecord {
            step: step + 1,
            objective: average_breakdowns(&bds),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        on_step(&rec);
        metrics.push(rec);
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(&checkpoint(&params, step + 1), &d.join(CHECKPOINT_FILE))?;
            }
        }
    }
    let ck = checkpoint(&params, cfg.steps as u64);
    if let Some(d) = out_dir {
        save_checkpoint(&ck, &d.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        metrics,
    })
}

/// Continues the base checkpoint's step count.
fn offset_step(
    mut out: TrainOutcome,
    base_step: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    out.checkpoint.meta.step += base_step;
    if let Some(d) = out_dir {
        save_checkpoint(&out.checkpoint, &d.join(CHECKPOINT_FILE))?;
    }
    Ok(out)
}

fn strip_sat(params: &mut Params) {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(SAT_PREFIX))
        .cloned()
        .collect();
    for n in names {
        params.remove(&n);
    }
}

/// Trains a policy from scratch. When SAT is not an allowed modality the
/// checkpoint carries no satellite encoder.
pub fn train(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let mixture = Mixture::load(&cfg.mixture)?;
    train_on(cfg, &mixture, out_dir, on_step)
}

/// [`train`] with an already loaded mixture.
pub fn train_on(
    cfg: &TrainConfig,
    mixture: &Mixture,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let mut params = init_params(&cfg.policy, cfg.seed)?;
    if !mixture.allowed.contains(Modality::Sat) {
        strip_sat(&mut params);
    }
    train_from(cfg, mixture, params, &|_| true, out_dir, on_step)
}

/// Adds a fresh satellite encoder to a checkpoint trained without one and
/// trains only that encoder on SAT-only batches at [`ADAPT_LR_FACTOR`] times
/// the configured learning rate.
pub fn adapt_new_modality(
    base: &Checkpoint,
    cfg: &TrainConfig,
    mixture: &Mixture,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    if base.has_sat_encoder() {
        return Err(Error::Invalid(
            "checkpoint already has a satellite encoder".into(),
        ));
    }
    if mixture.allowed != crate::policy::ModalityMask::single(Modality::Sat) {
        return Err(Error::Invalid(
            "adaptation mixture must allow SAT only".into(),
        ));
    }
    base.ensure_config(&cfg.policy)?;
    let mut cfg = cfg.clone();
    cfg.optimizer.lr *= ADAPT_LR_FACTOR;
    let mut params = base.params.clone();
    for (k, t) in init_sat_params(&cfg.policy, cfg.seed) {
        params.insert(k, t);
    }
    let out = train_from(
        &cfg,
        mixture,
        params,
        &|n| n.starts_with(SAT_PREFIX),
        out_dir,
        on_step,
    )?;
    offset_step(out, base.meta.step, out_dir)
}

/// Fine-tunes every parameter at a tenth of the configured learning rate
/// on at most [`FINETUNE_FRAMES`] samples. Zero steps return `base`
/// unchanged.
pub fn finetune(
    base: &Checkpoint,
    cfg: &TrainConfig,
    shards: Vec<crate::datagen::DatasetShard>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    base.ensure_config(&cfg.policy)?;
    let mut cfg = cfg.clone();
    cfg.optimizer.lr *= FINETUNE_LR_FACTOR;
    cfg.mixture.max_frames = Some(
        cfg.mixture
            .max_frames
            .map_or(FINETUNE_FRAMES, |m| m.min(FINETUNE_FRAMES)),
    );
    if cfg.steps == 0 {
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            save_checkpoint(base, &d.join(CHECKPOINT_FILE))?;
        }
        return Ok(TrainOutcome {
            checkpoint: base.clone(),
            metrics: Vec::new(),
        });
    }
    let mut mix_cfg = cfg.mixture.clone();
    if !base.has_sat_encoder() {
        mix_cfg.modalities.retain(|&m| m != Modality::Sat);
    }
    let mixture = Mixture::from_shards(shards, &mix_cfg)?;
    let out = train_from(
        &cfg,
        &mixture,
        base.params.clone(),
        &|_| true,
        out_dir,
        on_step,
    )?;
    offset_step(out, base.meta.step, out_dir)
}
