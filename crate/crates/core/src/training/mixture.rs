use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DatasetShard, DatasetTag, Modality, Sample};
use crate::error::{Error, Result};
use crate::geometry::EmbodimentId;
use crate::policy::{GoalSpec, ModalityMask, PolicyConfig, PolicyInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Shard directories; each shard's tag comes from its manifest.
    pub shards: Vec<PathBuf>,
    /// Relative draw weight per dataset tag.
    #[serde(default = "default_ratio")]
    pub ratio: BTreeMap<DatasetTag, f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    /// Goal modalities the policy may be conditioned on; t_m is drawn from
    /// non-empty subsets of (available and allowed).
    #[serde(default = "all_modalities")]
    pub modalities: Vec<Modality>,
    /// Cap on the total number of samples kept (fine-tuning data budget).
    #[serde(default)]
    pub max_frames: Option<usize>,
}

fn default_ratio() -> BTreeMap<DatasetTag, f64> {
    BTreeMap::from([
        (DatasetTag::Lelan, 4.0),
        (DatasetTag::Gnm, 1.0),
        (DatasetTag::Frodo, 1.0),
        (DatasetTag::Bdd, 1.0),
    ])
}

fn default_batch() -> usize {
    64
}

fn default_accumulation() -> usize {
    4
}

fn all_modalities() -> Vec<Modality> {
    Modality::ALL.to_vec()
}

impl MixtureConfig {
    pub fn new(shards: Vec<PathBuf>) -> Self {
        Self {
            shards,
            ratio: default_ratio(),
            batch_size: default_batch(),
            accumulation: default_accumulation(),
            modalities: all_modalities(),
            max_frames: None,
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Loaded shards grouped by tag with their effective draw weights.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub pools: Vec<(DatasetTag, Vec<Sample>)>,
    weights: Vec<f64>,
    pub allowed: ModalityMask,
    pub hash: String,
    /// World seed ranges of the source shards.
    pub seed_ranges: Vec<[u64; 2]>,
}

/// One drawn training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub pool: usize,
    pub index: usize,
    pub mask: ModalityMask,
    pub fill_seed: u64,
}

impl Mixture {
    pub fn load(cfg: &MixtureConfig) -> Result<Self> {
        let shards = cfg
            .shards
            .iter()
            .map(|p| DatasetShard::load(p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_shards(shards, cfg)
    }

    /// Tags whose ratio is zero, that have no shard, or that offer no
    /// allowed modality are left out; the remaining ratios are renormalized.
    pub fn from_shards(shards: Vec<DatasetShard>, cfg: &MixtureConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.accumulation == 0 {
            return Err(Error::Invalid(
                "batch size and accumulation must be positive".into(),
            ));
        }
        if cfg.ratio.values().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(Error::Invalid(
                "mixture ratios must be finite and non-negative".into(),
            ));
        }
        let allowed = ModalityMask::of(&cfg.modalities);
        let mut by_tag: BTreeMap<DatasetTag, Vec<Sample>> = BTreeMap::new();
        let mut seed_ranges = Vec::new();
        for s in shards {
            if s.samples.is_empty() {
                return Err(Error::Invalid(format!(
                    "empty {} shard",
                    s.manifest.tag.name()
                )));
            }
            if s.manifest.embodiment != EmbodimentId::Slow {
                return Err(Error::Invalid(format!(
                    "{} shard holds fast-embodiment actions; reannotate it first",
                    s.manifest.tag.name()
                )));
            }
            seed_ranges.push(s.manifest.seed_range);
            by_tag.entry(s.manifest.tag).or_default().extend(s.samples);
        }
        if let Some(cap) = cfg.max_frames {
            let total: usize = by_tag.values().map(Vec::len).sum();
            if total > cap {
                for v in by_tag.values_mut() {
                    v.truncate(v.len() * cap / total);
                }
            }
        }
        let mut pools = Vec::new();
        let mut weights = Vec::new();
        for tag in DatasetTag::ALL {
            let r = cfg.ratio.get(&tag).copied().unwrap_or(0.0);
            let usable = tag.modalities().iter().any(|&m| allowed.contains(m));
            match by_tag.remove(&tag) {
                Some(v) if r > 0.0 && usable && !v.is_empty() => {
                    pools.push((tag, v));
                    weights.push(r);
                }
                _ => {}
            }
        }
        if pools.is_empty() {
            return Err(Error::Invalid("mixture has no usable shard".into()));
        }
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self {
            pools,
            weights,
            allowed,
            hash: cfg.hash(),
            seed_ranges,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pools.iter().map(|p| p.1.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, item: &BatchItem) -> &Sample {
        &self.pools[item.pool].1[item.index]
    }

    /// Draws `n` items: tag by weight, sample uniformly within the tag, t_m
    /// uniformly over non-empty subsets of the sample's allowed modalities.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<BatchItem> {
        let dist = WeightedIndex::new(&self.weights).expect("validated weights");
        (0..n)
            .map(|_| {
                let pool = dist.sample(rng);
                let index = rng.random_range(0..self.pools[pool].1.len());
                let s = &self.pools[pool].1[index];
                let avail: Vec<Modality> = s
                    .modalities
                    .iter()
                    .copied()
                    .filter(|&m| self.allowed.contains(m))
                    .collect();
                let subsets = ModalityMask::nonempty_subsets(&avail);
                let mask = *subsets.choose(rng).expect("pool has an allowed modality");
                BatchItem {
                    pool,
                    index,
                    mask,
                    fill_seed: rng.random(),
                }
            })
            .collect()
    }

    /// Policy input for an item; unselected modalities are dropped before
    /// the random fill.
    pub fn input(&self, item: &BatchItem, cfg: &PolicyConfig) -> Result<PolicyInput> {
        let s = self.sample(item);
        let goal = goal_of(s, item.mask);
        PolicyInput::new(&s.obs_history, &goal, cfg, item.fill_seed)
    }
}

/// Goal spec holding the sample's content for `mask` only.
pub fn goal_of(s: &Sample, mask: ModalityMask) -> GoalSpec {
    GoalSpec {
        pose: s.goal_pose,
        image: s.goal_image.clone(),
        lang: s.lang.clone(),
        sat: s.sat_image.clone(),
        mask,
    }
    .selected_only()
}
