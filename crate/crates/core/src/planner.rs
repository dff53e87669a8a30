//! Sampling-based model-predictive planner.
//!
//! Each planning step samples N candidate control sequences around a
//! warm-started mean, constrains their directions toward the pick-to-place
//! direction, extends every candidate along a straight line until it reaches
//! the place position, scores the candidates by rolling the forward model
//! out and measuring fold alignment plus a convex-hull exit penalty, and
//! combines them with the MPPI exponential weighting. Only the first updated
//! action is executed; the shifted remainder warm-starts the next step.

use nalgebra::{Vector2, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::adaptation::{predict, LatentParams};
use crate::error::{PlanError, SimError};
use crate::geometry::{iou, point_in_hull, project_rasterize, ConvexHull2D, GridSpec};
use crate::perception::{extract_point_cloud, BottomReference, LabeledPointCloud};
use crate::sim::{ClothState, Label, SimConfig};

/// Ordered end-effector displacement actions.
///
/// Planner outputs hold actions of norm `v` (within 1e-9 relative
/// tolerance); a place-extended sequence may end with one shorter action.
/// Mean sequences fed to the sampler are unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence(pub Vec<Vector3<f64>>);

impl ControlSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// End position after applying all actions from `start`.
    pub fn end_position(&self, start: Vector3<f64>) -> Vector3<f64> {
        self.0.iter().fold(start, |x, a| x + a)
    }
}

/// Planning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    /// MPC horizon H.
    pub horizon: usize,
    /// Candidate count N.
    pub candidates: usize,
    /// MPPI temperature.
    pub lambda: f64,
    /// Diagonal sampling variance.
    pub variance: f64,
    /// Alignment cost weight.
    pub w1: f64,
    /// Hull-exit cost weight.
    pub w2: f64,
    /// Alignment decay in (0, 1); later steps weigh more.
    pub beta: f64,
    /// Action norm v, meters.
    pub action_norm: f64,
    /// Place-reaching tolerance, meters.
    pub place_tol: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            candidates: 100,
            lambda: 0.01,
            variance: 0.01,
            w1: 1.0,
            w2: 0.03,
            beta: 0.5,
            action_norm: 0.03,
            place_tol: 0.03,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.horizon < 1 {
            return Err(PlanError::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.candidates < 1 {
            return Err(PlanError::InvalidArgument(
                "candidate count must be >= 1".into(),
            ));
        }
        if self.lambda <= 0.0 {
            return Err(PlanError::InvalidArgument("lambda must be > 0".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(PlanError::InvalidArgument(
                "beta must lie in (0, 1)".into(),
            ));
        }
        if self.action_norm <= 0.0 {
            return Err(PlanError::InvalidArgument(
                "action norm must be > 0".into(),
            ));
        }
        if self.variance < 0.0 {
            return Err(PlanError::InvalidArgument(
                "variance must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Episode-fixed task data the planner needs: where to place and the
/// pick-to-place direction used for constrained sampling.
#[derive(Debug, Clone, Copy)]
pub struct TaskFrame {
    pub place: Vector3<f64>,
    /// Unit pick-to-place direction d_pp.
    pub fold_direction: Vector3<f64>,
}

impl TaskFrame {
    pub fn new(pick: Vector3<f64>, place: Vector3<f64>) -> Result<Self, PlanError> {
        let d = place - pick;
        let n = d.norm();
        if n <= 1e-12 {
            return Err(PlanError::InvalidArgument(
                "pick and place coincide".into(),
            ));
        }
        Ok(Self {
            place,
            fold_direction: d / n,
        })
    }
}

/// Sampled candidate sequences and their costs (NaN until evaluated).
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub sequences: Vec<ControlSequence>,
    pub costs: Vec<f64>,
}

const MAX_RESAMPLES: usize = 16;

fn constrained_action(
    mean: Vector3<f64>,
    sigma: f64,
    d_pp: &Vector3<f64>,
    v: f64,
    rng: &mut ChaCha8Rng,
) -> Vector3<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    let mut d = Vector3::zeros();
    let mut ok = false;
    for _ in 0..MAX_RESAMPLES {
        d = mean + Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        if d.norm() <= 1e-12 {
            continue;
        }
        if d.dot(d_pp) >= 0.0 {
            ok = true;
            break;
        }
    }
    if d.norm() <= 1e-12 {
        // Degenerate zero mean with zero variance; fall back to d_pp.
        d = *d_pp;
    } else if !ok {
        // Reflect across the plane normal to d_pp.
        d -= d_pp * (2.0 * d.dot(d_pp));
    }
    d * (v / d.norm())
}

/// Draw N candidate sequences of the mean's length.
///
/// Each action is mean plus Gaussian noise, renormalized to norm v, with the
/// cosine-similarity constraint CS(d, d_pp) >= 0 enforced by resampling and
/// finally by reflection.
pub fn sample_candidates(
    mean: &[Vector3<f64>],
    cfg: &PlannerConfig,
    d_pp: &Vector3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet, PlanError> {
    cfg.validate()?;
    if mean.is_empty() {
        return Err(PlanError::InvalidArgument(
            "mean sequence must be non-empty".into(),
        ));
    }
    if d_pp.norm() <= 1e-12 {
        return Err(PlanError::InvalidArgument(
            "pick-to-place direction has zero norm".into(),
        ));
    }
    let sigma = cfg.variance.sqrt();
    let mut sequences = Vec::with_capacity(cfg.candidates);
    for _ in 0..cfg.candidates {
        let actions = mean
            .iter()
            .map(|m| constrained_action(*m, sigma, d_pp, cfg.action_norm, rng))
            .collect();
        sequences.push(ControlSequence(actions));
    }
    Ok(CandidateSet {
        costs: vec![f64::NAN; sequences.len()],
        sequences,
    })
}

/// Append straight-line steps of norm <= v until the sequence terminates
/// within `place_tol` of the place position. Sequences already ending close
/// enough are returned unchanged.
pub fn extend_to_place(
    seq: &ControlSequence,
    x_start: Vector3<f64>,
    x_place: Vector3<f64>,
    cfg: &PlannerConfig,
) -> ControlSequence {
    let v = cfg.action_norm;
    let mut x = seq.end_position(x_start);
    if (x - x_place).norm() <= cfg.place_tol {
        return seq.clone();
    }
    let mut out = seq.clone();
    loop {
        let to = x_place - x;
        let dist = to.norm();
        if dist <= cfg.place_tol {
            break;
        }
        let step = if dist > v { to * (v / dist) } else { to };
        x += step;
        out.0.push(step);
    }
    out
}

/// Discounted alignment shortfall over a per-step IoU sequence:
/// sum over j = 1..=L of beta^(L-j) * (1 - IoU_j), so minimizing the result
/// maximizes alignment with later steps weighted more.
pub fn discounted_alignment_shortfall(ious: &[f64], beta: f64) -> f64 {
    let len = ious.len();
    ious.iter()
        .enumerate()
        .map(|(j, u)| beta.powi((len - 1 - j) as i32) * (1.0 - u))
        .sum()
}

/// Alignment cost of a predicted Upper-point sequence against the frozen
/// bottom reference: each cloud's Upper points are rasterized and scored by
/// IoU, then folded with [`discounted_alignment_shortfall`].
pub fn cost_alignment(
    predicted: &[LabeledPointCloud],
    bottom_ref: &BottomReference,
    beta: f64,
    spec: &GridSpec,
) -> Result<f64, PlanError> {
    if predicted.is_empty() {
        return Err(PlanError::InvalidArgument(
            "empty prediction sequence".into(),
        ));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(PlanError::InvalidArgument(format!(
            "beta {beta} must lie in (0, 1)"
        )));
    }
    let ref_grid = project_rasterize(bottom_ref.points(), spec)?;
    let mut ious = Vec::with_capacity(predicted.len());
    for cloud in predicted {
        let upper = cloud.points_with(Label::Upper);
        let grid = project_rasterize(&upper, spec)?;
        ious.push(iou(&grid, &ref_grid)?);
    }
    Ok(discounted_alignment_shortfall(&ious, beta))
}

/// Number of positions whose xy projection lies outside the hull.
pub fn cost_hull(positions: &[Vector3<f64>], hull: &ConvexHull2D) -> f64 {
    positions
        .iter()
        .filter(|p| !point_in_hull(hull, Vector2::new(p.x, p.y)))
        .count() as f64
}

/// Cost breakdown of one candidate rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutCost {
    pub total: f64,
    pub alignment: f64,
    pub hull_exits: f64,
    pub diverged: bool,
}

impl RolloutCost {
    fn diverged() -> Self {
        Self {
            total: f64::INFINITY,
            alignment: f64::INFINITY,
            hull_exits: f64::INFINITY,
            diverged: true,
        }
    }
}

/// Roll the forward model over a place-extended candidate and score it.
///
/// A diverging rollout yields cost +inf and a diverged flag rather than an
/// error, so planning continues on the surviving candidates.
#[allow(clippy::too_many_arguments)]
pub fn rollout_cost(
    candidate: &ControlSequence,
    base_state: &ClothState,
    z: &LatentParams,
    bottom_ref: &BottomReference,
    hull: &ConvexHull2D,
    spec: &GridSpec,
    cfg: &PlannerConfig,
    sim_cfg: &SimConfig,
) -> Result<RolloutCost, PlanError> {
    if candidate.is_empty() {
        return Err(PlanError::InvalidArgument("empty candidate".into()));
    }
    let mut state = base_state.clone();
    let mut pc = extract_point_cloud(&state);
    let mut ee = state.ee_position().ok_or_else(|| {
        PlanError::InvalidArgument("rollout state is not grasped".into())
    })?;
    let mut clouds = Vec::with_capacity(candidate.len());
    let mut positions = Vec::with_capacity(candidate.len());
    for action in &candidate.0 {
        match predict(&pc, ee, *action, z, &state, sim_cfg) {
            Ok((cloud, next)) => {
                ee = next.ee_position().expect("rollout state stays grasped");
                positions.push(ee);
                pc = cloud.clone();
                clouds.push(cloud);
                state = next;
            }
            Err(crate::error::AdaptError::Sim(SimError::NumericalDivergence { .. })) => {
                return Ok(RolloutCost::diverged());
            }
            Err(e) => {
                return Err(PlanError::InvalidArgument(format!(
                    "rollout failed: {e}"
                )));
            }
        }
    }
    let alignment = cost_alignment(&clouds, bottom_ref, cfg.beta, spec)?;
    let hull_exits = cost_hull(&positions, hull);
    Ok(RolloutCost {
        total: cfg.w1 * alignment + cfg.w2 * hull_exits,
        alignment,
        hull_exits,
        diverged: false,
    })
}

/// Softmax(-cost/lambda) weights with max-subtraction for stability.
/// Infinite-cost candidates get weight zero; all-infinite is an error.
pub fn mppi_weights(costs: &[f64], lambda: f64) -> Result<Vec<f64>, PlanError> {
    if lambda <= 0.0 {
        return Err(PlanError::InvalidArgument("lambda must be > 0".into()));
    }
    let min_cost = costs
        .iter()
        .cloned()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min_cost.is_finite() {
        return Err(PlanError::AllCandidatesDiverged);
    }
    let raw: Vec<f64> = costs
        .iter()
        .map(|c| {
            if c.is_finite() {
                (-(c - min_cost) / lambda).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// MPPI update: per-step exponentially weighted average of the candidate
/// actions, renormalized to the action norm.
pub fn mppi_update(
    candidates: &CandidateSet,
    lambda: f64,
    action_norm: f64,
) -> Result<ControlSequence, PlanError> {
    let weights = mppi_weights(&candidates.costs, lambda)?;
    let horizon = candidates
        .sequences
        .iter()
        .map(|s| s.len())
        .min()
        .unwrap_or(0);
    if horizon == 0 {
        return Err(PlanError::InvalidArgument(
            "candidate set has empty sequences".into(),
        ));
    }
    let argmin = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut actions = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut avg = Vector3::zeros();
        for (seq, w) in candidates.sequences.iter().zip(weights.iter()) {
            avg += seq.0[h] * *w;
        }
        let norm = avg.norm();
        if norm <= 1e-12 {
            // Opposing candidates cancelled out; keep the best candidate's action.
            actions.push(candidates.sequences[argmin].0[h]);
        } else {
            actions.push(avg * (action_norm / norm));
        }
    }
    Ok(ControlSequence(actions))
}

/// Result of a single receding-horizon planning step.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// Action to execute now.
    pub action: Vector3<f64>,
    /// Warm start for the next step: the shifted remainder of the updated
    /// sequence, tail-filled with a fresh constrained draw when the next
    /// horizon does not shrink.
    pub warm_next: Vec<Vector3<f64>>,
    pub min_cost: f64,
    pub mean_cost: f64,
    /// Alignment term of the minimum-cost candidate.
    pub best_alignment: f64,
    /// Hull-exit count of the minimum-cost candidate.
    pub best_hull_exits: f64,
}

/// One full planning step: sample, extend, evaluate, MPPI-update.
///
/// The horizon is clamped to the steps remaining in the episode. Candidate
/// rollouts are evaluated concurrently; the reduction is a deterministic
/// fold over candidate order, so the outcome is a pure function of the
/// inputs and the RNG state.
#[allow(clippy::too_many_arguments)]
pub fn plan_step(
    base_state: &ClothState,
    bottom_ref: &BottomReference,
    hull: &ConvexHull2D,
    spec: &GridSpec,
    warm: &[Vector3<f64>],
    z: &LatentParams,
    cfg: &PlannerConfig,
    sim_cfg: &SimConfig,
    task: &TaskFrame,
    t: usize,
    total_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PlanOutcome, PlanError> {
    cfg.validate()?;
    if t >= total_steps {
        return Err(PlanError::InvalidArgument(format!(
            "t = {t} must precede total steps {total_steps}"
        )));
    }
    let horizon = cfg.horizon.min(total_steps - t);
    let mut mean: Vec<Vector3<f64>> = warm.iter().take(horizon).cloned().collect();
    mean.resize(horizon, Vector3::zeros());

    let mut set = sample_candidates(&mean, cfg, &task.fold_direction, rng)?;
    let ee = base_state
        .ee_position()
        .ok_or_else(|| PlanError::InvalidArgument("state is not grasped".into()))?;
    let extended: Vec<ControlSequence> = set
        .sequences
        .iter()
        .map(|s| extend_to_place(s, ee, task.place, cfg))
        .collect();

    let rollouts: Vec<Result<RolloutCost, PlanError>> = extended
        .par_iter()
        .map(|c| rollout_cost(c, base_state, z, bottom_ref, hull, spec, cfg, sim_cfg))
        .collect();
    let mut details = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        details.push(r?);
    }
    for (slot, d) in set.costs.iter_mut().zip(details.iter()) {
        *slot = d.total;
    }

    let updated = mppi_update(&set, cfg.lambda, cfg.action_norm)?;
    let action = updated.0[0];

    let next_horizon = if t + 1 < total_steps {
        cfg.horizon.min(total_steps - (t + 1))
    } else {
        0
    };
    let mut warm_next: Vec<Vector3<f64>> = updated.0[1..].to_vec();
    warm_next.truncate(next_horizon);
    while warm_next.len() < next_horizon {
        warm_next.push(constrained_action(
            Vector3::zeros(),
            cfg.variance.sqrt(),
            &task.fold_direction,
            cfg.action_norm,
            rng,
        ));
    }

    let finite: Vec<(usize, f64)> = set
        .costs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_finite())
        .map(|(i, c)| (i, *c))
        .collect();
    let (best_idx, min_cost) = finite
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("mppi_update guarantees at least one finite cost");
    let mean_cost = finite.iter().map(|(_, c)| c).sum::<f64>() / finite.len() as f64;

    Ok(PlanOutcome {
        action,
        warm_next,
        min_cost,
        mean_cost,
        best_alignment: details[best_idx].alignment,
        best_hull_exits: details[best_idx].hull_exits,
    })
}
