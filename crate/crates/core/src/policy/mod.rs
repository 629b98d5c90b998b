//! Omni-modal policy: per-modality goal encoders, a masked-fusion
//! transformer over observation and goal tokens, and a waypoint head.

mod checkpoint;
mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{LangLabel, Modality, HISTORY, MAX_LABEL_LEN, VOCAB};
use crate::error::{Error, Result};
use crate::geometry::CHUNK_LEN;
use crate::worldsim::{EgoObservation, SatImage, RAY_COUNT, SAT_SIZE};

pub(crate) use checkpoint::{decode_tensors, encode_tensors};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TensorEntry};
pub use model::{
    build_forward, build_forward_with_goal_order, encode_goal_images, forward_batch,
    forward_policy, init_params, init_sat_params, ForwardOutput, PolicyInput, ENCODER_PREFIXES,
    SAT_PREFIX,
};

pub const OBS_DIM: usize = RAY_COUNT * 5;
pub const SAT_DIM: usize = SAT_SIZE * SAT_SIZE * 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub history: usize,
    pub chunk: usize,
    pub vocab: usize,
    /// Waypoint scale s in meters; outputs are `s * tanh(.)`.
    pub waypoint_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff: 256,
            history: HISTORY,
            chunk: CHUNK_LEN,
            vocab: VOCAB.len(),
            waypoint_scale: 1.5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.history != HISTORY || self.chunk != CHUNK_LEN {
            return Err(Error::Invalid(format!(
                "history/chunk must be {HISTORY}/{CHUNK_LEN}"
            )));
        }
        if self.vocab != VOCAB.len() {
            return Err(Error::Invalid(format!(
                "vocabulary size must be {}",
                VOCAB.len()
            )));
        }
        if self.layers == 0
            || self.ff == 0
            || self.waypoint_scale.is_nan()
            || self.waypoint_scale <= 0.0
        {
            return Err(Error::Invalid(
                "layers, ff and waypoint_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Rows of the positional-word embedding table.
    pub fn lang_rows(&self) -> usize {
        self.vocab * MAX_LABEL_LEN
    }
}

/// Selected goal modalities (t_m).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Modality>", into = "Vec<Modality>")]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const EMPTY: ModalityMask = ModalityMask(0);
    pub const ALL: ModalityMask = ModalityMask(0b1111);

    pub fn of(mods: &[Modality]) -> Self {
        Self(mods.iter().fold(0, |b, m| b | 1 << m.index()))
    }

    pub fn single(m: Modality) -> Self {
        Self(1 << m.index())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn modalities(self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|&m| self.contains(m))
            .collect()
    }

    pub fn intersect(self, other: ModalityMask) -> ModalityMask {
        ModalityMask(self.0 & other.0)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// All non-empty subsets of `available`, in increasing bit order.
    pub fn nonempty_subsets(available: &[Modality]) -> Vec<ModalityMask> {
        let full = Self::of(available).0;
        (1..=full)
            .filter(|s| s & !full == 0)
            .map(ModalityMask)
            .collect()
    }

    pub fn name(self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.modalities()
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl From<Vec<Modality>> for ModalityMask {
    fn from(v: Vec<Modality>) -> Self {
        Self::of(&v)
    }
}

impl From<ModalityMask> for Vec<Modality> {
    fn from(m: ModalityMask) -> Self {
        m.modalities()
    }
}

/// Goal container. Modalities outside `mask` may hold anything or be absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Robot-frame goal position in meters.
    pub pose: Option<[f64; 2]>,
    pub image: Option<EgoObservation>,
    pub lang: Option<LangLabel>,
    pub sat: Option<SatImage>,
    pub mask: ModalityMask,
}

impl GoalSpec {
    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Pose => self.pose.is_some(),
            Modality::Image => self.image.is_some(),
            Modality::Lang => self.lang.is_some(),
            Modality::Sat => self.sat.is_some(),
        }
    }

    /// Rejects a selected modality with no content.
    pub fn validate(&self) -> Result<()> {
        for m in self.mask.modalities() {
            if !self.has(m) {
                return Err(Error::Invalid(format!(
                    "goal modality {} selected but missing",
                    m.name()
                )));
            }
        }
        if let Some(p) = self.pose {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Invalid("non-finite goal pose".into()));
            }
        }
        Ok(())
    }

    /// Copy holding only the selected modalities.
    pub fn selected_only(&self) -> GoalSpec {
        let keep = |m| self.mask.contains(m);
        GoalSpec {
            pose: self.pose.filter(|_| keep(Modality::Pose)),
            image: self.image.clone().filter(|_| keep(Modality::Image)),
            lang: self.lang.clone().filter(|_| keep(Modality::Lang)),
            sat: self.sat.clone().filter(|_| keep(Modality::Sat)),
            mask: self.mask,
        }
    }
}

/// Language slot content: real tokens, or standard-normal values standing
/// in for the pooled word embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum LangSlot {
    Tokens(Vec<usize>),
    Fill(Vec<f64>),
}

/// Raw encoder inputs with every slot populated.
#[derive(Clone, Debug, PartialEq)]
pub struct FilledGoal {
    pub pose: [f64; 2],
    pub image: Vec<f64>,
    pub lang: LangSlot,
    pub sat: Vec<f64>,
    pub mask: ModalityMask,
}

/// Populates absent slots with standard-normal values drawn from
/// `fill_seed` alone. All four fills are always drawn in a fixed order, so a
/// slot's fill does not depend on which other slots are present.
pub fn mask_fill(goal: &GoalSpec, d_model: usize, fill_seed: u64) -> FilledGoal {
    let mut rng = ChaCha8Rng::seed_from_u64(fill_seed);
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let pose_fill = draw(2);
    let image_fill = draw(OBS_DIM);
    let lang_fill = draw(d_model);
    let sat_fill = draw(SAT_DIM);
    FilledGoal {
        pose: goal.pose.unwrap_or([pose_fill[0], pose_fill[1]]),
        image: goal.image.as_ref().map_or(image_fill, |i| i.flat()),
        lang: match &goal.lang {
            Some(l) => LangSlot::Tokens(l.token_ids()),
            None => LangSlot::Fill(lang_fill),
        },
        sat: goal.sat.as_ref().map_or(sat_fill, |s| s.flat()),
        mask: goal.mask,
    }
}
