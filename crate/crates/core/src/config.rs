//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{LossWeights, TrainConfig};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "OCCUGRASP_SEED";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "base widths: `tiny` or `default`"),
    ("seed", "master seed (falls back to OCCUGRASP_SEED, then 0)"),
    ("k_groups", "number of tri-plane groups"),
    ("plane_h", "plane height in cells"),
    ("plane_w", "plane width in cells"),
    ("c_p", "point embedding width"),
    ("c_t", "tri-plane feature width"),
    ("c_q", "queried feature width"),
    ("plane_hidden", "hidden width of the plane encoders"),
    ("head_hidden", "hidden width of the refinement and grasp heads"),
    ("sa_width", "width of the set-abstraction branch"),
    ("directions", "number of candidate approach directions"),
    ("voxel_size", "occupancy voxel edge (m)"),
    ("gripper_radius", "half of the maximum gripper opening (m)"),
    ("d_min", "lower grasp depth bound (m)"),
    ("d_max", "upper grasp depth bound (m)"),
    ("lr", "Adam learning rate"),
    ("steps", "total optimizer steps"),
    ("batch", "scenes per step"),
    ("candidates", "grasp candidates per scene during training"),
    ("occ_samples", "maximum supervised region voxels per scene"),
    ("points", "network input points per scene"),
    ("pool", "labelled grasp points per scene"),
    ("affordance_points", "points with affordance labels per scene"),
    ("lambda1", "affordance loss weight"),
    ("lambda2", "view loss weight"),
    ("lambda3", "width and score loss weight"),
    ("ablate", "comma-separated ablation flags: no_density, no_local, no_refine, no_occupancy, ball_query"),
];

/// Resolved configuration with a note of which keys took defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub defaults_used: Vec<&'static str>,
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate and unknown
/// keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    /// Builds the configuration from parsed pairs. `env_seed` is the value
    /// of [`SEED_ENV`], used only when `seed` is absent.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, env_seed: Option<&str>) -> Result<Self> {
        for k in pairs.keys() {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let mut model = match pairs.get("profile").map(String::as_str) {
            None | Some("tiny") => ModelConfig::tiny(),
            Some("default") => ModelConfig::default(),
            Some(other) => return Err(Error::Config(format!("unknown profile `{other}`"))),
        };
        let mut train = TrainConfig::default();
        let mut defaults_used = Vec::new();
        for &(key, _) in KEYS {
            let Some(v) = pairs.get(key) else {
                if key == "seed" {
                    if let Some(e) = env_seed {
                        train.seed = parse(SEED_ENV, e)?;
                        continue;
                    }
                }
                defaults_used.push(key);
                continue;
            };
            match key {
                "profile" => {}
                "seed" => train.seed = parse(key, v)?,
                "k_groups" => model.k_groups = parse(key, v)?,
                "plane_h" => model.plane_h = parse(key, v)?,
                "plane_w" => model.plane_w = parse(key, v)?,
                "c_p" => model.c_p = parse(key, v)?,
                "c_t" => model.c_t = parse(key, v)?,
                "c_q" => model.c_q = parse(key, v)?,
                "plane_hidden" => model.plane_hidden = parse(key, v)?,
                "head_hidden" => model.head_hidden = parse(key, v)?,
                "sa_width" => model.sa_width = parse(key, v)?,
                "directions" => model.directions = parse(key, v)?,
                "voxel_size" => model.region.v = parse(key, v)?,
                "gripper_radius" => model.region.r = parse(key, v)?,
                "d_min" => model.region.d_min = parse(key, v)?,
                "d_max" => model.region.d_max = parse(key, v)?,
                "lr" => train.lr = parse(key, v)?,
                "steps" => train.steps = parse(key, v)?,
                "batch" => train.batch = parse(key, v)?,
                "candidates" => train.candidates = parse(key, v)?,
                "occ_samples" => train.occ_samples = parse(key, v)?,
                "points" => train.labels.points = parse(key, v)?,
                "pool" => train.labels.pool = parse(key, v)?,
                "affordance_points" => train.labels.affordance_points = parse(key, v)?,
                "lambda1" => train.weights.l1 = parse(key, v)?,
                "lambda2" => train.weights.l2 = parse(key, v)?,
                "lambda3" => train.weights.l3 = parse(key, v)?,
                "ablate" => model.ablation.apply_flags(v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        let r = model.region;
        model = model.with_geometry(r.r, r.d_min, r.d_max, r.v);
        train.labels.directions = model.directions;
        train.labels.gripper = model.gripper;
        model.validate()?;
        if !(train.lr >= 0.0) || train.batch == 0 || train.candidates == 0 || train.labels.points == 0 {
            return Err(Error::Config("lr must be >= 0; batch, candidates and points positive".into()));
        }
        let w = train.weights;
        if [w.l1, w.l2, w.l3].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(Self { model, train, defaults_used })
    }

    pub fn parse(text: &str, env_seed: Option<&str>) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, env_seed)
    }

    /// Serializes every key so that parsing the text reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let LossWeights { l1, l2, l3 } = t.weights;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("k_groups", m.k_groups.to_string());
        kv("plane_h", m.plane_h.to_string());
        kv("plane_w", m.plane_w.to_string());
        kv("c_p", m.c_p.to_string());
        kv("c_t", m.c_t.to_string());
        kv("c_q", m.c_q.to_string());
        kv("plane_hidden", m.plane_hidden.to_string());
        kv("head_hidden", m.head_hidden.to_string());
        kv("sa_width", m.sa_width.to_string());
        kv("directions", m.directions.to_string());
        kv("voxel_size", m.region.v.to_string());
        kv("gripper_radius", m.region.r.to_string());
        kv("d_min", m.region.d_min.to_string());
        kv("d_max", m.region.d_max.to_string());
        kv("lr", t.lr.to_string());
        kv("steps", t.steps.to_string());
        kv("batch", t.batch.to_string());
        kv("candidates", t.candidates.to_string());
        kv("occ_samples", t.occ_samples.to_string());
        kv("points", t.labels.points.to_string());
        kv("pool", t.labels.pool.to_string());
        kv("affordance_points", t.labels.affordance_points.to_string());
        kv("lambda1", l1.to_string());
        kv("lambda2", l2.to_string());
        kv("lambda3", l3.to_string());
        kv("ablate", m.ablation.flags());
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(&BTreeMap::new(), None).expect("defaults are valid")
    }
}

/// Documentation block listing every key.
pub fn describe_keys() -> String {
    let mut out = String::from("config keys (`key = value`, `#` comments):\n");
    for (k, d) in KEYS {
        let _ = writeln!(out, "  {k:<18} {d}");
    }
    out
}
