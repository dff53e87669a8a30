//! Online estimation of cloth physical parameters from a short observation
//! history, and the forward-model interface the planner rolls out.
//!
//! The estimator keeps a ring buffer of the K most recent (observation,
//! end-effector, action) triples and fits parameters by exhaustive grid
//! search: each candidate parameter vector replays the recorded actions in
//! the simulator from the oldest observation and is scored by the multi-step
//! mean squared prediction error over the Upper points. The argmin, together
//! with its residual, is the latent parameter estimate that conditions the
//! forward model. The grid search stands in for a learned encoder; the
//! interfaces are kept so one can be slotted in later.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::AdaptError;
use crate::perception::LabeledPointCloud;
use crate::sim::{step_quasi_static, ClothParams, ClothState, Label, SimConfig, PARAM_MAX, PARAM_MIN};

/// Default number of past observations kept in the window.
pub const DEFAULT_WINDOW: usize = 3;
/// Default number of future steps scored by the multi-step loss.
pub const DEFAULT_PREDICTION_STEPS: usize = 3;

/// One recorded step: the observation before acting, the end-effector
/// position, and the action taken from that observation.
#[derive(Debug, Clone)]
pub struct WindowEntry {
    pub cloud: LabeledPointCloud,
    pub ee: Vector3<f64>,
    pub action: Vector3<f64>,
    pub t: u64,
}

/// Static episode facts needed to rebuild a simulator state from a recorded
/// observation: observations are settled, so velocities are taken as zero.
#[derive(Debug, Clone, Copy)]
pub struct WindowContext {
    pub resolution: usize,
    pub rest_spacing: f64,
    pub grasped: usize,
}

/// Ring buffer of the K most recent window entries, chronological order.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
    ctx: WindowContext,
}

impl HistoryWindow {
    pub fn new(capacity: usize, ctx: WindowContext) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity),
            ctx,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }

    fn reconstruct_state(&self, entry: &WindowEntry) -> Result<ClothState, AdaptError> {
        state_from_observation(
            &entry.cloud,
            self.ctx.resolution,
            self.ctx.rest_spacing,
            self.ctx.grasped,
        )
    }
}

/// Rebuild a simulator state from a full-resolution observation. Observed
/// states are settled, so velocities are taken as zero.
pub fn state_from_observation(
    cloud: &LabeledPointCloud,
    resolution: usize,
    rest_spacing: f64,
    grasped: usize,
) -> Result<ClothState, AdaptError> {
    if cloud.len() != resolution * resolution {
        return Err(AdaptError::InvalidArgument(format!(
            "observation has {} points, expected full-resolution {}",
            cloud.len(),
            resolution * resolution
        )));
    }
    Ok(ClothState {
        resolution,
        rest_spacing,
        positions: cloud.points.clone(),
        velocities: vec![Vector3::zeros(); cloud.len()],
        grasped: Some(grasped),
        labels: cloud.labels.clone(),
        settle_capped: false,
    })
}

/// Append an observation triple, evicting the oldest entry past capacity.
/// Timestamps must be strictly increasing.
pub fn update_history(w: &mut HistoryWindow, entry: WindowEntry) -> Result<(), AdaptError> {
    if let Some(last) = w.entries.back() {
        if entry.t <= last.t {
            return Err(AdaptError::OutOfOrder {
                got: entry.t,
                last: last.t,
            });
        }
    }
    if w.entries.len() == w.capacity {
        w.entries.pop_front();
    }
    w.entries.push_back(entry);
    Ok(())
}

/// Parameter estimate with its fit residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentParams {
    pub params: ClothParams,
    pub residual: f64,
}

impl LatentParams {
    /// Grid-midpoint prior used before the window holds enough history.
    pub fn initial(friction: f64) -> Self {
        Self {
            params: ClothParams {
                stiffness: 60.0,
                elasticity: 60.0,
                friction,
            },
            residual: 0.0,
        }
    }
}

/// Candidate stiffness/elasticity values searched by the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    pub stiffness: Vec<f64>,
    pub elasticity: Vec<f64>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        let vals = vec![20.0, 40.0, 60.0, 80.0, 100.0];
        Self {
            stiffness: vals.clone(),
            elasticity: vals,
        }
    }
}

impl ParamGrid {
    pub fn validate(&self) -> Result<(), AdaptError> {
        for (name, vals) in [("stiffness", &self.stiffness), ("elasticity", &self.elasticity)] {
            if vals.is_empty() {
                return Err(AdaptError::InvalidArgument(format!(
                    "{name} grid is empty"
                )));
            }
            if !vals.windows(2).all(|w| w[0] < w[1]) {
                return Err(AdaptError::InvalidArgument(format!(
                    "{name} grid must be strictly sorted"
                )));
            }
            if vals.iter().any(|v| *v < PARAM_MIN || *v > PARAM_MAX) {
                return Err(AdaptError::InvalidArgument(format!(
                    "{name} grid values must lie in [{PARAM_MIN}, {PARAM_MAX}]"
                )));
            }
        }
        Ok(())
    }

    fn candidates(&self, friction: f64) -> Vec<ClothParams> {
        let mut out = Vec::with_capacity(self.stiffness.len() * self.elasticity.len());
        for &s in &self.stiffness {
            for &e in &self.elasticity {
                out.push(ClothParams {
                    stiffness: s,
                    elasticity: e,
                    friction,
                });
            }
        }
        out
    }
}

/// Multi-step mean squared prediction error of `candidate` on the window.
///
/// Replays the recorded actions in the simulator from the oldest window
/// observation and averages 0.5 * ||P_hat - P||^2 over the available
/// prediction steps (at most `prediction_steps`, truncated to the history),
/// where the squared norm sums over Upper points matched by particle index.
pub fn multi_step_loss(
    candidate: &ClothParams,
    w: &HistoryWindow,
    prediction_steps: usize,
    cfg: &SimConfig,
) -> Result<f64, AdaptError> {
    if prediction_steps == 0 {
        return Err(AdaptError::InvalidArgument(
            "prediction_steps must be >= 1".into(),
        ));
    }
    if w.len() < 2 {
        return Err(AdaptError::InsufficientHistory {
            need: 2,
            have: w.len(),
        });
    }
    let entries: Vec<&WindowEntry> = w.entries.iter().collect();
    let steps = prediction_steps.min(entries.len() - 1);
    let mut state = w.reconstruct_state(entries[0])?;
    let mut total = 0.0;
    for m in 1..=steps {
        state = step_quasi_static(&state, entries[m - 1].action, candidate, cfg)?;
        let target = &entries[m].cloud;
        let mut sq = 0.0;
        for (i, label) in state.labels.iter().enumerate() {
            if *label == Label::Upper {
                sq += (state.positions[i] - target.points[i]).norm_squared();
            }
        }
        total += 0.5 * sq;
    }
    Ok(total / steps as f64)
}

/// Exhaustive grid search minimizing [`multi_step_loss`].
///
/// Ties break toward the grid point nearest the previous estimate, then
/// toward lower stiffness, then lower elasticity. Candidates share the
/// previous estimate's friction coefficient.
pub fn estimate_params(
    w: &HistoryWindow,
    grid: &ParamGrid,
    prediction_steps: usize,
    previous: &LatentParams,
    cfg: &SimConfig,
) -> Result<LatentParams, AdaptError> {
    grid.validate()?;
    if w.len() < 2 {
        return Err(AdaptError::InsufficientHistory {
            need: 2,
            have: w.len(),
        });
    }
    let candidates = grid.candidates(previous.params.friction);
    let losses: Vec<Result<f64, AdaptError>> = candidates
        .par_iter()
        .map(|c| multi_step_loss(c, w, prediction_steps, cfg))
        .collect();

    let prev = previous.params;
    let mut best: Option<(f64, f64, ClothParams)> = None;
    for (c, loss) in candidates.iter().zip(losses) {
        let loss = loss?;
        let dist = ((c.stiffness - prev.stiffness).powi(2)
            + (c.elasticity - prev.elasticity).powi(2))
        .sqrt();
        let better = match &best {
            None => true,
            Some((bl, bd, bc)) => {
                (loss, dist, c.stiffness, c.elasticity)
                    < (*bl, *bd, bc.stiffness, bc.elasticity)
            }
        };
        if better {
            best = Some((loss, dist, *c));
        }
    }
    let (residual, _, params) = best.expect("grid is non-empty");
    Ok(LatentParams { params, residual })
}

/// One forward-model step conditioned on the latent estimate.
///
/// Steps the simulator under the estimated parameters; the returned cloud
/// contains the predicted Upper points (particle order) and the Bottom
/// points copied verbatim from the input cloud, reflecting the assumption
/// that table friction keeps the bottom half still.
pub fn predict(
    pc: &LabeledPointCloud,
    ee: Vector3<f64>,
    action: Vector3<f64>,
    z: &LatentParams,
    rollout_state: &ClothState,
    cfg: &SimConfig,
) -> Result<(LabeledPointCloud, ClothState), AdaptError> {
    if let Some(state_ee) = rollout_state.ee_position() {
        if (state_ee - ee).norm() > 1e-6 {
            return Err(AdaptError::InvalidArgument(format!(
                "end-effector position {ee:?} inconsistent with rollout state {state_ee:?}"
            )));
        }
    }
    let next = step_quasi_static(rollout_state, action, &z.params, cfg)?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, label) in next.labels.iter().enumerate() {
        if *label == Label::Upper {
            points.push(next.positions[i]);
            labels.push(Label::Upper);
        }
    }
    for (p, l) in pc.points.iter().zip(pc.labels.iter()) {
        if *l == Label::Bottom {
            points.push(*p);
            labels.push(Label::Bottom);
        }
    }
    Ok((LabeledPointCloud { points, labels }, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::extract_point_cloud;
    use crate::sim::{grasp, init_cloth, Pose, DEFAULT_FRICTION};

    fn make_window(k: usize) -> HistoryWindow {
        HistoryWindow::new(
            k,
            WindowContext {
                resolution: 9,
                rest_spacing: 0.20 / 8.0,
                grasped: 0,
            },
        )
    }

    fn flat_entry(t: u64, action: Vector3<f64>) -> (WindowEntry, ClothState) {
        let state = init_cloth(0.20, 9, &ClothParams::default(), &Pose::identity()).unwrap();
        let grasped = grasp(&state, state.positions[0]).unwrap();
        let cloud = extract_point_cloud(&grasped);
        (
            WindowEntry {
                cloud,
                ee: grasped.positions[0],
                action,
                t,
            },
            grasped,
        )
    }

    #[test]
    fn window_append_and_evict() {
        let mut w = make_window(3);
        for t in 0..3 {
            let (e, _) = flat_entry(t, Vector3::zeros());
            update_history(&mut w, e).unwrap();
        }
        assert_eq!(w.len(), 3);
        let (e, _) = flat_entry(3, Vector3::zeros());
        update_history(&mut w, e).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.entries.front().unwrap().t, 1);
    }

    #[test]
    fn window_rejects_stale_timestamps() {
        let mut w = make_window(3);
        let (e, _) = flat_entry(5, Vector3::zeros());
        update_history(&mut w, e).unwrap();
        let (stale, _) = flat_entry(5, Vector3::zeros());
        assert!(matches!(
            update_history(&mut w, stale),
            Err(AdaptError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn loss_requires_history_and_steps() {
        let cfg = SimConfig::default();
        let mut w = make_window(3);
        let c = ClothParams::default();
        assert!(matches!(
            multi_step_loss(&c, &w, 3, &cfg),
            Err(AdaptError::InsufficientHistory { .. })
        ));
        let (e, _) = flat_entry(0, Vector3::zeros());
        update_history(&mut w, e).unwrap();
        assert!(matches!(
            multi_step_loss(&c, &w, 3, &cfg),
            Err(AdaptError::InsufficientHistory { .. })
        ));
        let (e, _) = flat_entry(1, Vector3::zeros());
        update_history(&mut w, e).unwrap();
        assert!(multi_step_loss(&c, &w, 3, &cfg).is_ok());
        assert!(matches!(
            multi_step_loss(&c, &w, 0, &cfg),
            Err(AdaptError::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_action_equilibrium_window_has_zero_loss() {
        let cfg = SimConfig::default();
        let mut w = make_window(3);
        for t in 0..3 {
            let (e, _) = flat_entry(t, Vector3::zeros());
            update_history(&mut w, e).unwrap();
        }
        for stiffness in [20.0, 60.0, 100.0] {
            let c = ClothParams::new(stiffness, 40.0, DEFAULT_FRICTION).unwrap();
            let loss = multi_step_loss(&c, &w, 3, &cfg).unwrap();
            assert!(loss < 1e-12, "loss {loss} for stiffness {stiffness}");
        }
    }

    #[test]
    fn degenerate_window_retains_previous_estimate() {
        let cfg = SimConfig::default();
        let mut w = make_window(3);
        for t in 0..3 {
            let (e, _) = flat_entry(t, Vector3::zeros());
            update_history(&mut w, e).unwrap();
        }
        let previous = LatentParams::initial(DEFAULT_FRICTION);
        let est = estimate_params(&w, &ParamGrid::default(), 3, &previous, &cfg).unwrap();
        assert_eq!(est.params.stiffness, 60.0);
        assert_eq!(est.params.elasticity, 60.0);
    }

    #[test]
    fn loss_truncates_to_available_history() {
        let cfg = SimConfig::default();
        let mut w = make_window(3);
        for t in 0..2 {
            let (e, _) = flat_entry(t, Vector3::zeros());
            update_history(&mut w, e).unwrap();
        }
        // Only one transition available; M = 5 must still work.
        let c = ClothParams::default();
        assert!(multi_step_loss(&c, &w, 5, &cfg).is_ok());
    }

    #[test]
    fn predict_preserves_bottom_bitwise() {
        let cfg = SimConfig::default();
        let (entry, state) = flat_entry(0, Vector3::zeros());
        let z = LatentParams::initial(DEFAULT_FRICTION);
        let action = Vector3::new(0.0, -0.01, 0.02);
        let (cloud, _) = predict(&entry.cloud, entry.ee, action, &z, &state, &cfg).unwrap();
        let bottom_in = entry.cloud.points_with(Label::Bottom);
        let bottom_out = cloud.points_with(Label::Bottom);
        assert_eq!(bottom_in, bottom_out);
    }

    #[test]
    fn predict_zero_action_is_near_identity() {
        let cfg = SimConfig::default();
        let (entry, state) = flat_entry(0, Vector3::zeros());
        let z = LatentParams::initial(DEFAULT_FRICTION);
        let (cloud, _) =
            predict(&entry.cloud, entry.ee, Vector3::zeros(), &z, &state, &cfg).unwrap();
        let upper_in = entry.cloud.points_with(Label::Upper);
        let upper_out = cloud.points_with(Label::Upper);
        for (a, b) in upper_in.iter().zip(upper_out.iter()) {
            assert!((a - b).norm() < cfg.settle_velocity_tol);
        }
    }

    #[test]
    fn predict_matches_ground_truth_sim_exactly() {
        let cfg = SimConfig::default();
        let (entry, state) = flat_entry(0, Vector3::zeros());
        let gt = ClothParams::default();
        let z = LatentParams {
            params: gt,
            residual: 0.0,
        };
        let action = Vector3::new(0.005, -0.01, 0.025);
        let (_, predicted_state) =
            predict(&entry.cloud, entry.ee, action, &z, &state, &cfg).unwrap();
        let oracle = step_quasi_static(&state, action, &gt, &cfg).unwrap();
        assert_eq!(predicted_state.positions, oracle.positions);
    }

    #[test]
    fn ground_truth_candidate_wins_grid_sweep() {
        // Build a 3-entry window by lifting the grasped corner under known
        // parameters, then check the sweep prefers those parameters.
        let cfg = SimConfig::default();
        let gt = ClothParams::new(60.0, 40.0, DEFAULT_FRICTION).unwrap();
        let init = init_cloth(0.20, 9, &gt, &Pose::identity()).unwrap();
        let mut state = grasp(&init, init.positions[0]).unwrap();
        let actions = [
            Vector3::new(0.0, 0.0, 0.03),
            Vector3::new(0.0, -0.0212, 0.0212),
            Vector3::new(0.0, -0.03, 0.0),
        ];
        let mut w = make_window(3);
        for (t, a) in actions.iter().enumerate() {
            let cloud = extract_point_cloud(&state);
            update_history(
                &mut w,
                WindowEntry {
                    cloud,
                    ee: state.ee_position().unwrap(),
                    action: *a,
                    t: t as u64,
                },
            )
            .unwrap();
            state = step_quasi_static(&state, *a, &gt, &cfg).unwrap();
        }
        let previous = LatentParams::initial(DEFAULT_FRICTION);
        let est = estimate_params(&w, &ParamGrid::default(), 3, &previous, &cfg).unwrap();
        assert_eq!(
            (est.params.stiffness, est.params.elasticity),
            (gt.stiffness, gt.elasticity)
        );
        // Strict minimum at the ground truth.
        let gt_loss = multi_step_loss(&gt, &w, 3, &cfg).unwrap();
        for &s in &[20.0, 40.0, 80.0, 100.0] {
            let c = ClothParams::new(s, 40.0, DEFAULT_FRICTION).unwrap();
            assert!(multi_step_loss(&c, &w, 3, &cfg).unwrap() > gt_loss);
        }
    }
}
