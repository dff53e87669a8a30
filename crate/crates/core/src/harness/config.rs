//! Line-oriented `key = value` configuration files with `[section]` headers,
//! for single episodes and benchmark suites. Every planning and simulation
//! default is built in and individually overridable.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use crate::error::HarnessError;
use crate::planner::PlannerConfig;
use crate::sim::{ClothParams, Pose, SimConfig};

/// Policy executed by an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Feedback-loop planning with online parameter adaptation.
    AdaFold,
    /// Open-loop variant: one optimization at t = 0, executed verbatim.
    AdaFoldOl,
    /// Fixed pick-apex-place triangle.
    Triangular,
    /// Uniform choice among constrained candidates each step.
    Random,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adafold" => Ok(Self::AdaFold),
            "adafoldol" | "adafold-ol" => Ok(Self::AdaFoldOl),
            "triangular" => Ok(Self::Triangular),
            "random" => Ok(Self::Random),
            other => Err(HarnessError::Config(format!("unknown policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::AdaFold => write!(f, "AdaFold"),
            Self::AdaFoldOl => write!(f, "AdaFoldOL"),
            Self::Triangular => write!(f, "Triangular"),
            Self::Random => write!(f, "Random"),
        }
    }
}

/// A pick or place given either as a named cloth corner or explicit
/// world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anchor {
    Corner(Corner),
    Point(Vector3<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Anchor {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "top_left" => return Ok(Self::Corner(Corner::TopLeft)),
            "top_right" => return Ok(Self::Corner(Corner::TopRight)),
            "bottom_left" => return Ok(Self::Corner(Corner::BottomLeft)),
            "bottom_right" => return Ok(Self::Corner(Corner::BottomRight)),
            _ => {}
        }
        let parts: Vec<&str> = t.split(',').collect();
        if parts.len() != 3 {
            return Err(HarnessError::Config(format!(
                "anchor must be a corner name or x,y,z triple, got {t:?}"
            )));
        }
        let mut c = [0.0f64; 3];
        for (i, p) in parts.iter().enumerate() {
            c[i] = p
                .trim()
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad anchor coordinate {p:?}: {e}")))?;
        }
        Ok(Self::Point(Vector3::new(c[0], c[1], c[2])))
    }
}

/// Cloth geometry and ground-truth physical parameters for one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClothSpec {
    pub side: f64,
    pub resolution: usize,
    pub params: ClothParams,
    pub rotation_deg: f64,
    pub center: Vector2<f64>,
}

impl Default for ClothSpec {
    fn default() -> Self {
        Self {
            side: 0.20,
            resolution: 9,
            params: ClothParams::default(),
            rotation_deg: 0.0,
            center: Vector2::zeros(),
        }
    }
}

impl ClothSpec {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation_deg.to_radians(), self.center)
    }
}

/// Full configuration of a single episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub cloth: ClothSpec,
    pub pick: Anchor,
    pub place: Anchor,
    /// Total episode steps T.
    pub steps: usize,
    pub planner: PlannerConfig,
    pub sim: SimConfig,
    pub policy: PolicyKind,
    pub seed: u64,
    /// Perception voxel size, meters.
    pub voxel: f64,
    /// Metric/rasterization cell size, meters.
    pub metric_cell: f64,
    /// Adaptation window length K.
    pub window: usize,
    /// Multi-step loss lookahead M.
    pub prediction_steps: usize,
    /// Write per-step point-cloud snapshots.
    pub snapshots: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            cloth: ClothSpec::default(),
            pick: Anchor::Corner(Corner::TopLeft),
            place: Anchor::Corner(Corner::BottomLeft),
            steps: 12,
            planner: PlannerConfig::default(),
            sim: SimConfig::default(),
            policy: PolicyKind::AdaFold,
            seed: 0,
            voxel: 0.008,
            metric_cell: 0.01,
            window: 3,
            prediction_steps: 3,
            snapshots: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        // steps = 0 is allowed as a degenerate edge: the episode terminates
        // immediately and records the IoU of the ungrasped flat cloth.
        self.cloth.params.validate()?;
        self.sim.validate()?;
        self.planner
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.voxel <= 0.0 || self.metric_cell <= 0.0 {
            return Err(HarnessError::Config(
                "voxel and metric cell sizes must be positive".into(),
            ));
        }
        if self.window < 1 || self.prediction_steps < 1 {
            return Err(HarnessError::Config(
                "window and prediction_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which cloths a suite runs on.
#[derive(Debug, Clone, PartialEq)]
pub enum ClothSet {
    /// The configured base cloth.
    Default,
    /// N parameter draws uniform on the stiffness/elasticity square.
    Randomized(usize),
}

/// Benchmark suite configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub base: EpisodeConfig,
    pub policies: Vec<PolicyKind>,
    /// Seeded repetitions per (policy, cloth, horizon) cell.
    pub episodes: usize,
    pub base_seed: u64,
    pub cloths: ClothSet,
    /// Planner horizons to sweep; one pass per horizon.
    pub horizons: Vec<usize>,
    pub include_failed: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            base: EpisodeConfig::default(),
            policies: vec![
                PolicyKind::AdaFold,
                PolicyKind::AdaFoldOl,
                PolicyKind::Triangular,
                PolicyKind::Random,
            ],
            episodes: 20,
            base_seed: 100,
            cloths: ClothSet::Default,
            horizons: vec![12],
            include_failed: false,
        }
    }
}

/// Parsed `[section]` / `key = value` file.
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut out = Self::default();
        let mut current = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_ascii_lowercase();
                out.sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::ConfigParse {
                    line: i + 1,
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            if current.is_empty() {
                return Err(HarnessError::ConfigParse {
                    line: i + 1,
                    message: "key outside of any [section]".into(),
                });
            }
            out.sections
                .get_mut(&current)
                .expect("section entry exists")
                .insert(key.trim().to_ascii_lowercase(), value.trim().to_string());
        }
        Ok(out)
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    fn take_f64(&self, section: &str, key: &str, into: &mut f64) -> Result<(), HarnessError> {
        if let Some(v) = self.get(section, key) {
            *into = v.parse().map_err(|e| {
                HarnessError::Config(format!("bad float for {section}.{key} = {v:?}: {e}"))
            })?;
        }
        Ok(())
    }

    fn take_usize(&self, section: &str, key: &str, into: &mut usize) -> Result<(), HarnessError> {
        if let Some(v) = self.get(section, key) {
            *into = v.parse().map_err(|e| {
                HarnessError::Config(format!("bad integer for {section}.{key} = {v:?}: {e}"))
            })?;
        }
        Ok(())
    }

    fn take_u64(&self, section: &str, key: &str, into: &mut u64) -> Result<(), HarnessError> {
        if let Some(v) = self.get(section, key) {
            *into = v.parse().map_err(|e| {
                HarnessError::Config(format!("bad integer for {section}.{key} = {v:?}: {e}"))
            })?;
        }
        Ok(())
    }

    fn take_bool(&self, section: &str, key: &str, into: &mut bool) -> Result<(), HarnessError> {
        if let Some(v) = self.get(section, key) {
            *into = match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => true,
                "false" | "no" | "0" => false,
                other => {
                    return Err(HarnessError::Config(format!(
                        "bad bool for {section}.{key} = {other:?}"
                    )))
                }
            };
        }
        Ok(())
    }

    fn check_known_keys(
        &self,
        section: &str,
        known: &[&str],
    ) -> Result<(), HarnessError> {
        if let Some(s) = self.sections.get(section) {
            for key in s.keys() {
                if !known.contains(&key.as_str()) {
                    return Err(HarnessError::Config(format!(
                        "unknown key {key:?} in section [{section}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply episode-level overrides onto a default config.
    pub fn episode_config(&self) -> Result<EpisodeConfig, HarnessError> {
        let mut cfg = EpisodeConfig::default();
        self.apply_shared(&mut cfg)?;
        self.check_known_keys("episode", &["policy", "seed", "snapshots"])?;
        if let Some(v) = self.get("episode", "policy") {
            cfg.policy = PolicyKind::parse(v)?;
        }
        self.take_u64("episode", "seed", &mut cfg.seed)?;
        self.take_bool("episode", "snapshots", &mut cfg.snapshots)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_shared(&self, cfg: &mut EpisodeConfig) -> Result<(), HarnessError> {
        self.check_known_keys(
            "cloth",
            &[
                "side",
                "resolution",
                "stiffness",
                "elasticity",
                "friction",
                "rotation_deg",
                "center_x",
                "center_y",
            ],
        )?;
        self.take_f64("cloth", "side", &mut cfg.cloth.side)?;
        self.take_usize("cloth", "resolution", &mut cfg.cloth.resolution)?;
        self.take_f64("cloth", "stiffness", &mut cfg.cloth.params.stiffness)?;
        self.take_f64("cloth", "elasticity", &mut cfg.cloth.params.elasticity)?;
        self.take_f64("cloth", "friction", &mut cfg.cloth.params.friction)?;
        self.take_f64("cloth", "rotation_deg", &mut cfg.cloth.rotation_deg)?;
        self.take_f64("cloth", "center_x", &mut cfg.cloth.center.x)?;
        self.take_f64("cloth", "center_y", &mut cfg.cloth.center.y)?;

        self.check_known_keys("task", &["pick", "place", "steps"])?;
        if let Some(v) = self.get("task", "pick") {
            cfg.pick = Anchor::parse(v)?;
        }
        if let Some(v) = self.get("task", "place") {
            cfg.place = Anchor::parse(v)?;
        }
        self.take_usize("task", "steps", &mut cfg.steps)?;

        self.check_known_keys(
            "planner",
            &[
                "horizon",
                "candidates",
                "lambda",
                "variance",
                "w1",
                "w2",
                "beta",
                "action_norm",
                "place_tol",
            ],
        )?;
        self.take_usize("planner", "horizon", &mut cfg.planner.horizon)?;
        self.take_usize("planner", "candidates", &mut cfg.planner.candidates)?;
        self.take_f64("planner", "lambda", &mut cfg.planner.lambda)?;
        self.take_f64("planner", "variance", &mut cfg.planner.variance)?;
        self.take_f64("planner", "w1", &mut cfg.planner.w1)?;
        self.take_f64("planner", "w2", &mut cfg.planner.w2)?;
        self.take_f64("planner", "beta", &mut cfg.planner.beta)?;
        self.take_f64("planner", "action_norm", &mut cfg.planner.action_norm)?;
        self.take_f64("planner", "place_tol", &mut cfg.planner.place_tol)?;

        self.check_known_keys(
            "sim",
            &[
                "substeps",
                "damping",
                "settle_velocity_tol",
                "max_settle_iters",
                "gravity",
                "table_height",
                "contact_tol",
                "stiffness_scale",
                "elasticity_scale",
                "shear_ratio",
                "particle_mass",
                "dt_safety",
                "max_ee_step",
            ],
        )?;
        self.take_usize("sim", "substeps", &mut cfg.sim.substeps_per_action)?;
        self.take_f64("sim", "damping", &mut cfg.sim.damping)?;
        self.take_f64("sim", "settle_velocity_tol", &mut cfg.sim.settle_velocity_tol)?;
        self.take_usize("sim", "max_settle_iters", &mut cfg.sim.max_settle_iters)?;
        self.take_f64("sim", "gravity", &mut cfg.sim.gravity)?;
        self.take_f64("sim", "table_height", &mut cfg.sim.table_height)?;
        self.take_f64("sim", "contact_tol", &mut cfg.sim.contact_tol)?;
        self.take_f64("sim", "stiffness_scale", &mut cfg.sim.stiffness_scale)?;
        self.take_f64("sim", "elasticity_scale", &mut cfg.sim.elasticity_scale)?;
        self.take_f64("sim", "shear_ratio", &mut cfg.sim.shear_ratio)?;
        self.take_f64("sim", "particle_mass", &mut cfg.sim.particle_mass)?;
        self.take_f64("sim", "dt_safety", &mut cfg.sim.dt_safety)?;
        self.take_f64("sim", "max_ee_step", &mut cfg.sim.max_ee_step)?;

        self.check_known_keys(
            "perception",
            &["voxel", "metric_cell", "window", "prediction_steps"],
        )?;
        self.take_f64("perception", "voxel", &mut cfg.voxel)?;
        self.take_f64("perception", "metric_cell", &mut cfg.metric_cell)?;
        self.take_usize("perception", "window", &mut cfg.window)?;
        self.take_usize("perception", "prediction_steps", &mut cfg.prediction_steps)?;
        Ok(())
    }

    /// Apply suite-level overrides onto a default suite config.
    pub fn suite_config(&self) -> Result<SuiteConfig, HarnessError> {
        let mut suite = SuiteConfig::default();
        self.apply_shared(&mut suite.base)?;
        self.check_known_keys(
            "suite",
            &[
                "policies",
                "episodes",
                "base_seed",
                "cloths",
                "horizons",
                "include_failed",
                "snapshots",
            ],
        )?;
        if let Some(v) = self.get("suite", "policies") {
            suite.policies = v
                .split(',')
                .map(PolicyKind::parse)
                .collect::<Result<Vec<_>, _>>()?;
            if suite.policies.is_empty() {
                return Err(HarnessError::Config("policies list is empty".into()));
            }
        }
        self.take_usize("suite", "episodes", &mut suite.episodes)?;
        self.take_u64("suite", "base_seed", &mut suite.base_seed)?;
        if let Some(v) = self.get("suite", "cloths") {
            let v = v.trim();
            suite.cloths = if v.eq_ignore_ascii_case("default") {
                ClothSet::Default
            } else if let Some(n) = v
                .to_ascii_lowercase()
                .strip_prefix("randomized:")
                .map(str::trim)
            {
                let n: usize = n.parse().map_err(|e| {
                    HarnessError::Config(format!("bad randomized cloth count {n:?}: {e}"))
                })?;
                if n == 0 {
                    return Err(HarnessError::Config(
                        "randomized cloth count must be >= 1".into(),
                    ));
                }
                ClothSet::Randomized(n)
            } else {
                return Err(HarnessError::Config(format!(
                    "cloths must be 'default' or 'randomized:N', got {v:?}"
                )));
            };
        }
        if let Some(v) = self.get("suite", "horizons") {
            suite.horizons = v
                .split(',')
                .map(|h| {
                    h.trim().parse::<usize>().map_err(|e| {
                        HarnessError::Config(format!("bad horizon {h:?}: {e}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if suite.horizons.is_empty() || suite.horizons.iter().any(|h| *h == 0) {
                return Err(HarnessError::Config("horizons must be positive".into()));
            }
        }
        self.take_bool("suite", "include_failed", &mut suite.include_failed)?;
        self.take_bool("suite", "snapshots", &mut suite.base.snapshots)?;
        if suite.episodes == 0 {
            return Err(HarnessError::Config("episodes must be >= 1".into()));
        }
        suite.base.validate()?;
        Ok(suite)
    }
}
