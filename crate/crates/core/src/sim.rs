//! Quasi-static mass-spring cloth simulator.
//!
//! The cloth is an n x n particle grid connected by structural, shear and
//! bending (two-hop) springs, resting on a horizontal table plane. Stepping
//! moves the grasped particle kinematically along the commanded end-effector
//! displacement and then relaxes the free particles with damped semi-implicit
//! Euler integration until the cloth is in (approximate) static equilibrium,
//! so every returned state is a settled state.
//!
//! Table contact is handled by projection (particles never end below the
//! plane) with a Coulomb-style cap on tangential velocity, which is what
//! keeps the bottom half of the cloth pinned during a fold.
//!
//! Stepping is a pure function of its inputs: identical inputs produce
//! bit-identical outputs, and independent rollouts can run concurrently.

use nalgebra::{Vector2, Vector3};

use crate::error::SimError;

/// Particle tag: which half of the fold line the particle started on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Upper,
    Bottom,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Upper => write!(f, "Upper"),
            Label::Bottom => write!(f, "Bottom"),
        }
    }
}

/// Physical property vector of a cloth: the quantity the adaptation module
/// estimates online. Stiffness and elasticity are opaque scales in [20, 100]
/// mapped to spring constants by [`SimConfig`]; friction is a Coulomb
/// coefficient against the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClothParams {
    pub stiffness: f64,
    pub elasticity: f64,
    pub friction: f64,
}

pub const PARAM_MIN: f64 = 20.0;
pub const PARAM_MAX: f64 = 100.0;

impl Default for ClothParams {
    fn default() -> Self {
        Self {
            stiffness: 60.0,
            elasticity: 40.0,
            friction: DEFAULT_FRICTION,
        }
    }
}

/// Default table friction coefficient.
pub const DEFAULT_FRICTION: f64 = 1.0;

impl ClothParams {
    pub fn new(stiffness: f64, elasticity: f64, friction: f64) -> Result<Self, SimError> {
        let p = Self {
            stiffness,
            elasticity,
            friction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(PARAM_MIN..=PARAM_MAX).contains(&self.stiffness) {
            return Err(SimError::InvalidArgument(format!(
                "stiffness {} outside [{PARAM_MIN}, {PARAM_MAX}]",
                self.stiffness
            )));
        }
        if !(PARAM_MIN..=PARAM_MAX).contains(&self.elasticity) {
            return Err(SimError::InvalidArgument(format!(
                "elasticity {} outside [{PARAM_MIN}, {PARAM_MAX}]",
                self.elasticity
            )));
        }
        if self.friction < 0.0 || !self.friction.is_finite() {
            return Err(SimError::InvalidArgument(format!(
                "friction {} must be >= 0",
                self.friction
            )));
        }
        Ok(())
    }
}

/// Planar pose of the cloth on the table: rotation about the vertical axis
/// plus an xy translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: f64,
    pub translation: Vector2<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn new(rotation: f64, translation: Vector2<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    fn apply(&self, local: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.rotation.sin_cos();
        Vector2::new(
            c * local.x - s * local.y + self.translation.x,
            s * local.x + c * local.y + self.translation.y,
        )
    }
}

/// Simulator tuning. The spring-constant mapping (`stiffness_scale`,
/// `elasticity_scale`) is calibrated once so the reference triangular fold
/// of the default cloth lands in the expected quality band, then frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Integration steps over which an end-effector displacement is applied.
    pub substeps_per_action: usize,
    /// Fraction of velocity removed per integration step, in (0, 1).
    pub damping: f64,
    /// Settle convergence threshold on the max particle speed, m/s.
    pub settle_velocity_tol: f64,
    /// Iteration cap for the settle loop.
    pub max_settle_iters: usize,
    /// Gravitational acceleration, m/s^2, acting along -z.
    pub gravity: f64,
    /// Table plane height, meters.
    pub table_height: f64,
    /// Contact tolerance, meters.
    pub contact_tol: f64,
    /// Structural spring constant per unit stiffness (calibrated).
    pub stiffness_scale: f64,
    /// Bending spring constant per unit elasticity (calibrated).
    pub elasticity_scale: f64,
    /// Shear spring constant as a fraction of the structural constant.
    pub shear_ratio: f64,
    /// Mass per particle, kg.
    pub particle_mass: f64,
    /// Safety factor on the spring-stability time step bound.
    pub dt_safety: f64,
    /// Sanity bound on a single end-effector displacement, meters
    /// (twice the planner action norm).
    pub max_ee_step: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            substeps_per_action: 10,
            damping: 0.02,
            settle_velocity_tol: 1.5e-3,
            max_settle_iters: 500,
            gravity: 9.81,
            table_height: 0.0,
            contact_tol: 1e-3,
            stiffness_scale: 1.0,
            elasticity_scale: 0.35,
            shear_ratio: 0.5,
            particle_mass: 1.0e-3,
            dt_safety: 0.5,
            max_ee_step: 0.06,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.substeps_per_action == 0 {
            return Err(SimError::InvalidArgument(
                "substeps_per_action must be positive".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(SimError::InvalidArgument(format!(
                "damping {} must lie in (0, 1)",
                self.damping
            )));
        }
        for (name, v) in [
            ("settle_velocity_tol", self.settle_velocity_tol),
            ("contact_tol", self.contact_tol),
            ("stiffness_scale", self.stiffness_scale),
            ("elasticity_scale", self.elasticity_scale),
            ("particle_mass", self.particle_mass),
            ("dt_safety", self.dt_safety),
            ("max_ee_step", self.max_ee_step),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(SimError::InvalidArgument(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.max_settle_iters == 0 {
            return Err(SimError::InvalidArgument(
                "max_settle_iters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Particle state of the cloth plus grasp binding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClothState {
    pub resolution: usize,
    pub rest_spacing: f64,
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub grasped: Option<usize>,
    pub labels: Vec<Label>,
    /// True when the last settle hit the iteration cap before reaching the
    /// velocity tolerance.
    pub settle_capped: bool,
}

impl ClothState {
    pub fn particle_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// World position of the grasped particle (the end-effector position).
    pub fn ee_position(&self) -> Option<Vector3<f64>> {
        self.grasped.map(|i| self.positions[i])
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    /// Serialize as CSV with columns `index,label,x,y,z` (meters).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,x,y,z\n");
        for (i, (p, l)) in self.positions.iter().zip(self.labels.iter()).enumerate() {
            out.push_str(&format!("{i},{l},{},{},{}\n", p.x, p.y, p.z));
        }
        out
    }
}

/// Initialize a flat square cloth on the table plane at the given pose.
///
/// The grid is centered on the pose translation. In the local frame the
/// intended fold direction is -y, so the half labels split along the local
/// x axis: particles with local y >= 0 (including the midline row of an odd
/// resolution) are Upper, the rest Bottom. Row 0 is the +y edge, so index 0
/// is the conventional pick corner.
pub fn init_cloth(
    side_length: f64,
    resolution: usize,
    params: &ClothParams,
    pose: &Pose,
) -> Result<ClothState, SimError> {
    if side_length <= 0.0 || !side_length.is_finite() {
        return Err(SimError::InvalidArgument(format!(
            "side_length must be positive, got {side_length}"
        )));
    }
    if resolution < 2 {
        return Err(SimError::InvalidArgument(format!(
            "resolution must be >= 2, got {resolution}"
        )));
    }
    params.validate()?;

    let n = resolution;
    let spacing = side_length / (n - 1) as f64;
    let half = side_length / 2.0;
    let mut positions = Vec::with_capacity(n * n);
    let mut labels = Vec::with_capacity(n * n);
    for row in 0..n {
        let y_local = half - row as f64 * spacing;
        for col in 0..n {
            let x_local = -half + col as f64 * spacing;
            let world = pose.apply(Vector2::new(x_local, y_local));
            positions.push(Vector3::new(world.x, world.y, 0.0));
            // Midline particles fold with the moving half.
            labels.push(if y_local >= 0.0 {
                Label::Upper
            } else {
                Label::Bottom
            });
        }
    }
    Ok(ClothState {
        resolution: n,
        rest_spacing: spacing,
        velocities: vec![Vector3::zeros(); positions.len()],
        positions,
        grasped: None,
        labels,
        settle_capped: false,
    })
}

/// Bind the particle nearest to `pick` to the end effector.
///
/// Ties break toward the lowest linear index. Fails if no particle lies
/// within one rest spacing of the pick point.
pub fn grasp(state: &ClothState, pick: Vector3<f64>) -> Result<ClothState, SimError> {
    if let Some(g) = state.grasped {
        return Err(SimError::AlreadyGrasped(g));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in state.positions.iter().enumerate() {
        let d = (p - pick).norm();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (idx, dist) = best.expect("cloth has at least 4 particles");
    if dist > state.rest_spacing {
        return Err(SimError::NoGraspableParticle {
            max_dist: state.rest_spacing,
        });
    }
    let mut out = state.clone();
    out.grasped = Some(idx);
    out.velocities[idx] = Vector3::zeros();
    Ok(out)
}

struct Spring {
    i: u32,
    j: u32,
    rest: f64,
    k: f64,
}

struct SpringSet {
    springs: Vec<Spring>,
    /// Largest sum of spring constants incident to a single particle,
    /// used for the integration stability bound.
    max_incident_k: f64,
}

impl SpringSet {
    fn build(n: usize, spacing: f64, params: &ClothParams, cfg: &SimConfig) -> Self {
        let k_struct = cfg.stiffness_scale * params.stiffness;
        let k_shear = cfg.shear_ratio * k_struct;
        let k_bend = cfg.elasticity_scale * params.elasticity;
        let idx = |r: usize, c: usize| (r * n + c) as u32;
        let mut springs = Vec::with_capacity(6 * n * n);
        let mut incident = vec![0.0f64; n * n];
        let mut push = |i: u32, j: u32, rest: f64, k: f64, incident: &mut Vec<f64>| {
            incident[i as usize] += k;
            incident[j as usize] += k;
            springs.push(Spring { i, j, rest, k });
        };
        for r in 0..n {
            for c in 0..n {
                // Structural: right and down neighbors.
                if c + 1 < n {
                    push(idx(r, c), idx(r, c + 1), spacing, k_struct, &mut incident);
                }
                if r + 1 < n {
                    push(idx(r, c), idx(r + 1, c), spacing, k_struct, &mut incident);
                }
                // Shear: both diagonals of each quad.
                if r + 1 < n && c + 1 < n {
                    let diag = spacing * std::f64::consts::SQRT_2;
                    push(idx(r, c), idx(r + 1, c + 1), diag, k_shear, &mut incident);
                    push(idx(r, c + 1), idx(r + 1, c), diag, k_shear, &mut incident);
                }
                // Bending: two-hop along rows and columns.
                if c + 2 < n {
                    push(idx(r, c), idx(r, c + 2), 2.0 * spacing, k_bend, &mut incident);
                }
                if r + 2 < n {
                    push(idx(r, c), idx(r + 2, c), 2.0 * spacing, k_bend, &mut incident);
                }
            }
        }
        let max_incident_k = incident.iter().cloned().fold(0.0, f64::max);
        Self {
            springs,
            max_incident_k,
        }
    }
}

/// Stable integration step for the stiffest particle:
/// dt = safety * 2 / omega_max with omega_max = sqrt(2 * k_incident_max / m).
fn stable_dt(springs: &SpringSet, cfg: &SimConfig) -> f64 {
    let omega_max = (2.0 * springs.max_incident_k / cfg.particle_mass).sqrt();
    cfg.dt_safety * 2.0 / omega_max
}

struct Integrator<'a> {
    springs: &'a SpringSet,
    cfg: &'a SimConfig,
    friction: f64,
    dt: f64,
    forces: Vec<Vector3<f64>>,
}

impl<'a> Integrator<'a> {
    fn new(springs: &'a SpringSet, cfg: &'a SimConfig, friction: f64, count: usize) -> Self {
        let dt = stable_dt(springs, cfg);
        Self {
            springs,
            cfg,
            friction,
            dt,
            forces: vec![Vector3::zeros(); count],
        }
    }

    /// One damped semi-implicit Euler step with table projection and
    /// Coulomb-capped tangential friction. `pinned` holds the commanded
    /// end-effector position for the grasped particle, if any.
    /// Returns the max particle speed after the step.
    fn step(&mut self, state: &mut ClothState, pinned: Option<(usize, Vector3<f64>)>) -> f64 {
        let cfg = self.cfg;
        let dt = self.dt;
        let m = cfg.particle_mass;
        let g = cfg.gravity;
        for f in &mut self.forces {
            *f = Vector3::new(0.0, 0.0, -m * g);
        }
        for s in &self.springs.springs {
            let (i, j) = (s.i as usize, s.j as usize);
            let d = state.positions[j] - state.positions[i];
            let len = d.norm();
            if len > 1e-12 {
                let f = d * (s.k * (len - s.rest) / len);
                self.forces[i] += f;
                self.forces[j] -= f;
            }
        }
        if let Some((gi, target)) = pinned {
            state.positions[gi] = target;
            state.velocities[gi] = Vector3::zeros();
        }
        let retain = 1.0 - cfg.damping;
        let mut max_speed: f64 = 0.0;
        for i in 0..state.positions.len() {
            if pinned.map_or(false, |(gi, _)| gi == i) {
                continue;
            }
            let mut v = (state.velocities[i] + self.forces[i] * (dt / m)) * retain;
            let p = state.positions[i];
            if p.z + v.z * dt < cfg.table_height {
                // Contact this step: land exactly on the plane and apply the
                // Coulomb-like cap, which removes at most mu*g*dt of
                // tangential speed and clamps to a full stop. Friction acts
                // on the velocity before the position update, so held
                // particles do not creep.
                v.z = (cfg.table_height - p.z) / dt;
                let vt = (v.x * v.x + v.y * v.y).sqrt();
                if vt > 0.0 {
                    let scale = 1.0 - self.friction * g * dt / vt;
                    if scale <= 0.0 {
                        v.x = 0.0;
                        v.y = 0.0;
                    } else {
                        v.x *= scale;
                        v.y *= scale;
                    }
                }
                state.positions[i] = Vector3::new(p.x + v.x * dt, p.y + v.y * dt, cfg.table_height);
            } else {
                state.positions[i] = p + v * dt;
            }
            state.velocities[i] = v;
            max_speed = max_speed.max(v.norm());
        }
        max_speed
    }
}

fn settle_in_place(
    state: &mut ClothState,
    integrator: &mut Integrator,
    pinned: Option<(usize, Vector3<f64>)>,
) -> Result<(), SimError> {
    state.settle_capped = true;
    for iter in 0..integrator.cfg.max_settle_iters {
        let max_speed = integrator.step(state, pinned);
        if !max_speed.is_finite() {
            return Err(SimError::NumericalDivergence {
                phase: "settle",
                substep: iter,
            });
        }
        if max_speed < integrator.cfg.settle_velocity_tol {
            state.settle_capped = false;
            break;
        }
    }
    Ok(())
}

/// Relax the cloth (at the current grasp position, if any) until the max
/// particle speed drops below the settle tolerance or the iteration cap is
/// hit, in which case `settle_capped` is set on the returned state.
pub fn settle(
    state: &ClothState,
    params: &ClothParams,
    cfg: &SimConfig,
) -> Result<ClothState, SimError> {
    params.validate()?;
    cfg.validate()?;
    let mut out = state.clone();
    let springs = SpringSet::build(out.resolution, out.rest_spacing, params, cfg);
    let mut integrator = Integrator::new(&springs, cfg, params.friction, out.positions.len());
    let pinned = out.grasped.map(|gi| (gi, out.positions[gi]));
    settle_in_place(&mut out, &mut integrator, pinned)?;
    Ok(out)
}

/// Apply one end-effector displacement to a grasped cloth and settle.
///
/// The end effector moves linearly over `substeps_per_action` integration
/// steps and then holds position while the cloth relaxes. The grasped
/// particle ends exactly at its start position plus `ee_displacement`.
pub fn step_quasi_static(
    state: &ClothState,
    ee_displacement: Vector3<f64>,
    params: &ClothParams,
    cfg: &SimConfig,
) -> Result<ClothState, SimError> {
    params.validate()?;
    cfg.validate()?;
    let gi = state.grasped.ok_or(SimError::NotGrasped)?;
    let norm = ee_displacement.norm();
    if !norm.is_finite() || norm > cfg.max_ee_step {
        return Err(SimError::InvalidArgument(format!(
            "ee displacement norm {norm} exceeds sanity bound {}",
            cfg.max_ee_step
        )));
    }

    let mut out = state.clone();
    out.settle_capped = false;
    let springs = SpringSet::build(out.resolution, out.rest_spacing, params, cfg);
    let mut integrator = Integrator::new(&springs, cfg, params.friction, out.positions.len());

    let start = out.positions[gi];
    let target = start + ee_displacement;
    let substeps = cfg.substeps_per_action;
    for k in 1..=substeps {
        let ee = if k == substeps {
            target
        } else {
            start + ee_displacement * (k as f64 / substeps as f64)
        };
        let max_speed = integrator.step(&mut out, Some((gi, ee)));
        if !max_speed.is_finite() {
            return Err(SimError::NumericalDivergence {
                phase: "move",
                substep: k,
            });
        }
    }
    settle_in_place(&mut out, &mut integrator, Some((gi, target)))?;
    Ok(out)
}
