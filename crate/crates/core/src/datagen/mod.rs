//! Expert planning and the four dataset analogs.

mod behavior;
mod generate;
mod lang;
mod planner;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ActionChunk, EmbodimentId, EmbodimentSpec, Pose2D, CHUNK_LEN};
use crate::worldsim::{render_ego, render_sat_goal, EgoObservation, SatImage, World};

pub use behavior::{behavior_adherence, KEEP_AWAY, WALL_BAND, WALL_SHARE};
pub use generate::{
    generate_dataset, sample_lang_route, sample_pose_route, GenConfig, LangSplit, Route,
    HELD_OUT_PAIRS, RESERVED_COMBOS,
};
pub use lang::{
    make_language_label, parse_label, resolve_label, word_id, Clause, ClauseKind, LangLabel,
    ParsedClause, ParsedLabel, MAX_LABEL_LEN, VOCAB,
};
pub use planner::{plan_expert_path, Planner, PlannerConfig};

/// Observation history length.
pub const HISTORY: usize = 5;
/// Largest allowed gap between a lelan sample's object pose and its final waypoint.
pub const OBJ_TOLERANCE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Pose,
    Image,
    Lang,
    Sat,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Pose,
        Modality::Image,
        Modality::Lang,
        Modality::Sat,
    ];

    /// Goal token slot.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Pose => "pose",
            Modality::Image => "image",
            Modality::Lang => "lang",
            Modality::Sat => "sat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Gnm,
    Lelan,
    Frodo,
    Bdd,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 4] = [
        DatasetTag::Lelan,
        DatasetTag::Gnm,
        DatasetTag::Frodo,
        DatasetTag::Bdd,
    ];

    pub fn modalities(self) -> &'static [Modality] {
        match self {
            DatasetTag::Gnm | DatasetTag::Bdd => &[Modality::Pose, Modality::Image],
            DatasetTag::Lelan => &[Modality::Lang],
            DatasetTag::Frodo => &[Modality::Pose, Modality::Image, Modality::Sat],
        }
    }

    /// Embodiment the raw data is recorded with.
    pub fn embodiment(self) -> EmbodimentId {
        match self {
            DatasetTag::Bdd => EmbodimentId::Fast,
            _ => EmbodimentId::Slow,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetTag::Gnm => "gnm",
            DatasetTag::Lelan => "lelan",
            DatasetTag::Frodo => "frodo",
            DatasetTag::Bdd => "bdd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Oldest first; the last entry is the current observation.
    pub obs_history: Vec<EgoObservation>,
    pub modalities: Vec<Modality>,
    pub goal_pose: Option<[f64; 2]>,
    pub goal_image: Option<EgoObservation>,
    pub sat_image: Option<SatImage>,
    pub lang: Option<LangLabel>,
    pub a_ref: ActionChunk,
    pub m_obj: u8,
    pub p_obj: Option<[f64; 2]>,
    pub tag: DatasetTag,
    pub world_seed: u64,
    pub embodiment: EmbodimentId,
}

impl Sample {
    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Invalid(format!(
                "{} sample from world {}: {msg}",
                self.tag.name(),
                self.world_seed
            )))
        };
        if self.obs_history.len() != HISTORY {
            return bad(format!("history length {}", self.obs_history.len()));
        }
        for m in &self.modalities {
            let present = match m {
                Modality::Pose => self.goal_pose.is_some(),
                Modality::Image => self.goal_image.is_some(),
                Modality::Lang => self.lang.is_some(),
                Modality::Sat => self.sat_image.is_some(),
            };
            if !present {
                return bad(format!("{} listed but missing", m.name()));
            }
        }
        if (self.m_obj == 1) != (self.tag == DatasetTag::Lelan) || self.m_obj > 1 {
            return bad("m_obj must be 1 exactly for lelan".into());
        }
        if self.m_obj == 1 && self.p_obj.is_none() {
            return bad("m_obj = 1 without p_obj".into());
        }
        let bound = EmbodimentSpec::of(self.embodiment).max_step() + 1e-9;
        if self.a_ref.max_step() > bound {
            return bad(format!(
                "a_ref step {:.4} exceeds {bound:.4}",
                self.a_ref.max_step()
            ));
        }
        Ok(())
    }
}

/// Robot-frame waypoints `path[index + 1 ..= index + N]`.
fn chunk_from_path(path: &[Pose2D], index: usize) -> Result<ActionChunk> {
    let here = &path[index];
    ActionChunk::new(
        path[index + 1..=index + CHUNK_LEN]
            .iter()
            .map(|p| here.inverse_transform_point(p.xy()))
            .collect(),
    )
}

/// History of `HISTORY` observations ending at `index`, padding the start of
/// the path by repeating the first observation.
pub fn render_history(world: &World, path: &[Pose2D], index: usize) -> Result<Vec<EgoObservation>> {
    (0..HISTORY)
        .map(|k| {
            let i = (index + k).saturating_sub(HISTORY - 1);
            render_ego(world, &path[i])
        })
        .collect()
}

/// One training example at `index` along an executed route. Goals come from
/// the route's terminal pose; for lelan the route must end at its target
/// landmark.
pub fn make_sample(
    world: &World,
    route: &Route,
    index: usize,
    modalities: &[Modality],
    tag: DatasetTag,
) -> Result<Sample> {
    let s = assemble_sample(world, route, index, modalities, tag)?;
    s.validate()?;
    Ok(s)
}

/// [`make_sample`] without the final validation, for callers that replace
/// the action labels afterwards.
fn assemble_sample(
    world: &World,
    route: &Route,
    index: usize,
    modalities: &[Modality],
    tag: DatasetTag,
) -> Result<Sample> {
    let path = &route.path;
    if index + CHUNK_LEN >= path.len() {
        return Err(Error::Invalid(format!(
            "sample index {index} + {CHUNK_LEN} beyond path of {} poses",
            path.len()
        )));
    }
    let here = path[index];
    let end = *path.last().unwrap();
    let a_ref = chunk_from_path(path, index)?;
    let has = |m| modalities.contains(&m);
    let goal_pose = has(Modality::Pose).then(|| here.inverse_transform_point(end.xy()));
    let goal_image = if has(Modality::Image) {
        Some(render_ego(world, &end)?)
    } else {
        None
    };
    let sat_image = has(Modality::Sat).then(|| render_sat_goal(world, &here, end.xy()));
    let (lang, m_obj, p_obj) = if tag == DatasetTag::Lelan {
        let target = route
            .target
            .ok_or_else(|| Error::Invalid("lelan route without target landmark".into()))?;
        let label = make_language_label(world, target, route.clause)?;
        let obj = here.inverse_transform_point(world.landmark(target).unwrap().position);
        let p_obj = clip_to_reach(obj, a_ref.last());
        let last = a_ref.last();
        if (p_obj[0] - last[0]).hypot(p_obj[1] - last[1]) > OBJ_TOLERANCE {
            return Err(Error::Invalid(format!(
                "object pose off the chunk heading at index {index}"
            )));
        }
        (has(Modality::Lang).then_some(label), 1, Some(p_obj))
    } else {
        let label = match (has(Modality::Lang), route.target) {
            (true, Some(t)) => Some(make_language_label(world, t, route.clause)?),
            (true, None) => {
                return Err(Error::Invalid(
                    "language requested for a route without target".into(),
                ))
            }
            _ => None,
        };
        (label, 0, None)
    };
    let mut mods = modalities.to_vec();
    mods.sort();
    mods.dedup();
    Ok(Sample {
        obs_history: render_history(world, path, index)?,
        modalities: mods,
        goal_pose,
        goal_image,
        sat_image,
        lang,
        a_ref,
        m_obj,
        p_obj,
        tag,
        world_seed: world.seed,
        embodiment: tag.embodiment(),
    })
}

/// Object position pulled in to the distance the chunk actually covers.
pub fn clip_to_reach(obj: [f64; 2], last: [f64; 2]) -> [f64; 2] {
    let reach = last[0].hypot(last[1]);
    let d = obj[0].hypot(obj[1]);
    if d <= reach || d == 0.0 {
        obj
    } else {
        [obj[0] * reach / d, obj[1] * reach / d]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub tag: DatasetTag,
    pub count: usize,
    pub config_hash: String,
    /// Half-open world seed range.
    pub seed_range: [u64; 2],
    pub embodiment: EmbodimentId,
    pub skipped_worlds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub manifest: ShardManifest,
    pub samples: Vec<Sample>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

impl DatasetShard {
    /// Writes `manifest.json` and `samples.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.manifest.count != self.samples.len() {
            return Err(Error::Invalid(
                "manifest count differs from sample count".into(),
            ));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let spath = dir.join(SAMPLES_FILE);
        let f = File::create(&spath).map_err(|e| Error::io(&spath, e))?;
        let mut w = BufWriter::new(f);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(&spath, e))?;
        }
        w.flush().map_err(|e| Error::io(&spath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: ShardManifest = serde_json::from_str(&text)?;
        let spath = dir.join(SAMPLES_FILE);
        let f = File::open(&spath).map_err(|e| Error::io(&spath, e))?;
        let mut samples = Vec::with_capacity(manifest.count);
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&spath, e))?;
            if line.is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Invalid(format!("{} line {}: {e}", spath.display(), i + 1)))?;
            s.validate()?;
            samples.push(s);
        }
        if samples.len() != manifest.count {
            return Err(Error::Invalid(format!(
                "{}: manifest count {} but {} samples stored",
                dir.display(),
                manifest.count,
                samples.len()
            )));
        }
        Ok(Self { manifest, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CONTROL_DT;
    use crate::worldsim::{Color, Landmark, Shape, WORLD_SIZE};

    fn room() -> World {
        World {
            size: WORLD_SIZE,
            obstacles: vec![],
            landmarks: vec![Landmark {
                id: 0,
                position: [25.0, 20.0],
                shape: Shape::Disc,
                color: Color::Green,
            }],
            seed: 3,
        }
    }

    fn straight(n: usize) -> Route {
        let step = 0.5 * CONTROL_DT;
        Route {
            path: (0..=n)
                .map(|i| Pose2D::new(20.0 + step * i as f64, 20.0, 0.0))
                .collect(),
            target: None,
            clause: None,
        }
    }

    #[test]
    fn straight_path_sample() {
        let w = room();
        let r = straight(30);
        let s = make_sample(
            &w,
            &r,
            0,
            &[Modality::Pose, Modality::Image],
            DatasetTag::Gnm,
        )
        .unwrap();
        let step = 0.5 * CONTROL_DT;
        for (i, p) in s.a_ref.waypoints().iter().enumerate() {
            assert!((p[0] - step * (i + 1) as f64).abs() < 1e-12 && p[1].abs() < 1e-12);
        }
        let g = s.goal_pose.unwrap();
        assert!((g[0] - 30.0 * step).abs() < 1e-12 && g[1].abs() < 1e-12);
        assert!(s.lang.is_none() && s.sat_image.is_none() && s.m_obj == 0);
        // History is padded with the first observation.
        assert_eq!(s.obs_history[0], s.obs_history[4]);
    }

    #[test]
    fn last_window_ends_at_goal() {
        let w = room();
        let r = straight(30);
        let s = make_sample(&w, &r, 30 - CHUNK_LEN, &[Modality::Pose], DatasetTag::Gnm).unwrap();
        let here = r.path[30 - CHUNK_LEN];
        let goal = here.inverse_transform_point(r.path[30].xy());
        let last = s.a_ref.last();
        assert!((last[0] - goal[0]).hypot(last[1] - goal[1]) < 0.1);
        assert!(make_sample(
            &w,
            &r,
            30 - CHUNK_LEN + 1,
            &[Modality::Pose],
            DatasetTag::Gnm
        )
        .is_err());
    }

    #[test]
    fn lelan_sample_has_object_pose() {
        let w = room();
        let mut r = straight(30);
        r.target = Some(0);
        let s = make_sample(&w, &r, 5, &[Modality::Lang], DatasetTag::Lelan).unwrap();
        assert_eq!(s.m_obj, 1);
        assert_eq!(s.lang.as_ref().unwrap().text(), "go to the green ball");
        let (p, last) = (s.p_obj.unwrap(), s.a_ref.last());
        assert!((p[0] - last[0]).hypot(p[1] - last[1]) <= OBJ_TOLERANCE);
    }

    #[test]
    fn shard_round_trip() {
        let w = room();
        let r = straight(20);
        let samples: Vec<_> = (0..3)
            .map(|i| {
                make_sample(
                    &w,
                    &r,
                    i,
                    &[Modality::Pose, Modality::Image],
                    DatasetTag::Gnm,
                )
                .unwrap()
            })
            .collect();
        let shard = DatasetShard {
            manifest: ShardManifest {
                tag: DatasetTag::Gnm,
                count: 3,
                config_hash: "x".into(),
                seed_range: [3, 4],
                embodiment: EmbodimentId::Slow,
                skipped_worlds: 0,
                optimizer_config: None,
                failure_count: None,
            },
            samples,
        };
        let dir = tempfile::tempdir().unwrap();
        shard.save(dir.path()).unwrap();
        assert_eq!(DatasetShard::load(dir.path()).unwrap(), shard);

        let mut bad = shard.clone();
        bad.manifest.count = 4;
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&bad.manifest).unwrap(),
        )
        .unwrap();
        assert!(DatasetShard::load(dir.path()).is_err());
    }
}
