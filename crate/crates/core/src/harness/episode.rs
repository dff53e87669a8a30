//! Single-episode orchestration: the outer feedback loop wiring perception,
//! adaptation and planning to the ground-truth simulator, plus the fixed and
//! random baseline policies.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adaptation::{
    estimate_params, state_from_observation, update_history, HistoryWindow, LatentParams,
    ParamGrid, WindowContext, WindowEntry,
};
use crate::error::{HarnessError, SimError};
use crate::geometry::{
    convex_hull_2d, iou, project_rasterize, ConvexHull2D, GridSpec, OccupancyGrid,
};
use crate::harness::config::{Anchor, Corner, EpisodeConfig, PolicyKind};
use crate::perception::{
    extract_point_cloud, voxel_downsample, BottomReference, LabeledPointCloud, ReferenceSlot,
};
use crate::planner::{
    extend_to_place, mppi_update, plan_step, rollout_cost, sample_candidates, ControlSequence,
    PlannerConfig, TaskFrame,
};
use crate::sim::{grasp, init_cloth, step_quasi_static, ClothState, Label, DEFAULT_FRICTION};

/// One executed step of an episode.
#[derive(Debug, Clone)]
pub struct StepRow {
    pub t: usize,
    pub action: Vector3<f64>,
    pub min_cost: Option<f64>,
    pub mean_cost: Option<f64>,
    /// Alignment term of the best candidate.
    pub alignment_cost: Option<f64>,
    /// Hull-exit count of the best candidate.
    pub hull_exits: Option<f64>,
    /// IoU observed before the action.
    pub iou: f64,
    /// Parameter estimate in effect (stiffness, elasticity, residual).
    pub estimate: Option<(f64, f64, f64)>,
}

impl StepRow {
    pub const CSV_HEADER: &'static str =
        "t,ax,ay,az,min_cost,mean_cost,c1,c2,iou,z_stiffness,z_elasticity,residual";

    pub fn to_csv_line(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (zs, ze, zr) = match self.estimate {
            Some((s, e, r)) => (s.to_string(), e.to_string(), r.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.action.x,
            self.action.y,
            self.action.z,
            opt(&self.min_cost),
            opt(&self.mean_cost),
            opt(&self.alignment_cost),
            opt(&self.hull_exits),
            self.iou,
            zs,
            ze,
            zr,
        )
    }
}

/// Outcome of one episode. Wall-clock time is reported for budgeting but is
/// never written to the CSV outputs, which must be reproducible byte for
/// byte.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub rows: Vec<StepRow>,
    pub final_iou: f64,
    pub wall_clock_secs: f64,
    pub failed: bool,
    /// (t, point-cloud CSV) snapshots when enabled.
    pub snapshots: Vec<(usize, String)>,
}

impl EpisodeResult {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(StepRow::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }
}

fn corner_index(corner: Corner, n: usize) -> usize {
    match corner {
        Corner::TopLeft => 0,
        Corner::TopRight => n - 1,
        Corner::BottomLeft => (n - 1) * n,
        Corner::BottomRight => n * n - 1,
    }
}

fn resolve_anchor(anchor: &Anchor, state: &ClothState) -> Vector3<f64> {
    match anchor {
        Anchor::Point(p) => *p,
        Anchor::Corner(c) => state.positions[corner_index(*c, state.resolution)],
    }
}

/// Fixed pick -> apex -> place trajectory discretized into `steps` equal
/// arc-length actions. The apex sits at the xy midpoint, raised by half the
/// pick-to-place distance.
pub fn baseline_triangular(
    pick: Vector3<f64>,
    place: Vector3<f64>,
    steps: usize,
    action_norm: f64,
) -> Result<ControlSequence, HarnessError> {
    let span = place - pick;
    let dist = span.norm();
    if dist <= 1e-12 {
        return Err(HarnessError::InfeasibleConfig(
            "pick and place positions coincide".into(),
        ));
    }
    if steps == 0 {
        return Err(HarnessError::InfeasibleConfig("steps must be >= 1".into()));
    }
    let apex = (pick + place) / 2.0 + Vector3::new(0.0, 0.0, dist / 2.0);
    let leg1 = apex - pick;
    let leg2 = place - apex;
    let (l1, l2) = (leg1.norm(), leg2.norm());
    let total = l1 + l2;
    let step_len = total / steps as f64;
    if step_len > action_norm + 1e-12 {
        return Err(HarnessError::InfeasibleConfig(format!(
            "triangular path of length {total:.4} m needs steps of {step_len:.4} m > action norm {action_norm}"
        )));
    }
    let waypoint = |s: f64| {
        if s <= l1 {
            pick + leg1 * (s / l1)
        } else {
            apex + leg2 * ((s - l1) / l2)
        }
    };
    let mut actions = Vec::with_capacity(steps);
    let mut prev = pick;
    for k in 1..=steps {
        let x = if k == steps {
            place
        } else {
            waypoint(step_len * k as f64)
        };
        actions.push(x - prev);
        prev = x;
    }
    Ok(ControlSequence(actions))
}

/// One step of the random baseline: draw the candidate set and pick one
/// uniformly, executing its first action.
pub fn baseline_random_action(
    horizon: usize,
    cfg: &PlannerConfig,
    d_pp: &Vector3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vector3<f64>, HarnessError> {
    let mean = vec![Vector3::zeros(); horizon.max(1)];
    let set = sample_candidates(&mean, cfg, d_pp, rng)?;
    let idx = rng.gen_range(0..set.sequences.len());
    Ok(set.sequences[idx].0[0])
}

fn observed_iou(
    obs: &LabeledPointCloud,
    ref_grid: &OccupancyGrid,
    spec: &GridSpec,
) -> Result<f64, HarnessError> {
    let upper = obs.points_with(Label::Upper);
    let grid = project_rasterize(&upper, spec)?;
    Ok(iou(&grid, ref_grid)?)
}

/// Straight-line step toward the place position once the remaining step
/// budget is just enough to get there; `None` while the planner still has
/// slack. This is what guarantees every episode terminates at the place
/// position.
fn place_guard(
    ee: Vector3<f64>,
    place: Vector3<f64>,
    action_norm: f64,
    place_tol: f64,
    remaining: usize,
) -> Option<Vector3<f64>> {
    let to = place - ee;
    let dist = to.norm();
    if dist <= place_tol {
        return None;
    }
    let need = (dist / action_norm - 1e-9).ceil() as usize;
    if need >= remaining {
        Some(to * (action_norm.min(dist) / dist))
    } else {
        None
    }
}

/// Plan once at t = 0 with the full horizon (Algorithm single pass) and
/// return the place-extended optimized sequence for open-loop execution.
#[allow(clippy::too_many_arguments)]
fn open_loop_sequence(
    base_state: &ClothState,
    reference: &BottomReference,
    hull: &ConvexHull2D,
    spec: &GridSpec,
    z: &LatentParams,
    cfg: &EpisodeConfig,
    task: &TaskFrame,
    rng: &mut ChaCha8Rng,
) -> Result<ControlSequence, HarnessError> {
    let horizon = cfg.planner.horizon.min(cfg.steps);
    let mean = vec![Vector3::zeros(); horizon];
    let mut set = sample_candidates(&mean, &cfg.planner, &task.fold_direction, rng)?;
    let ee = base_state.ee_position().expect("grasped");
    let extended: Vec<ControlSequence> = set
        .sequences
        .iter()
        .map(|s| extend_to_place(s, ee, task.place, &cfg.planner))
        .collect();
    let costs: Vec<_> = extended
        .par_iter()
        .map(|c| rollout_cost(c, base_state, z, reference, hull, spec, &cfg.planner, &cfg.sim))
        .collect();
    for (slot, c) in set.costs.iter_mut().zip(costs) {
        *slot = c?.total;
    }
    let updated = mppi_update(&set, cfg.planner.lambda, cfg.planner.action_norm)?;
    Ok(extend_to_place(&updated, ee, task.place, &cfg.planner))
}

/// Run one full episode: initialize and grasp the cloth, freeze the bottom
/// reference and workspace hull at t = 0, then loop perception, adaptation,
/// policy and ground-truth stepping. Returns per-step rows and the final IoU
/// against the frozen reference.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeResult, HarnessError> {
    cfg.validate()?;
    let started = std::time::Instant::now();

    let gt_params = cfg.cloth.params;
    let init = init_cloth(
        cfg.cloth.side,
        cfg.cloth.resolution,
        &gt_params,
        &cfg.cloth.pose(),
    )?;

    if cfg.steps == 0 {
        // Degenerate episode: record the IoU of the ungrasped flat cloth.
        let obs = voxel_downsample(&extract_point_cloud(&init), cfg.voxel)?;
        let mut slot = ReferenceSlot::new();
        let reference = slot.freeze(&obs)?.clone();
        let spec = GridSpec::centered(cfg.cloth.center, 0.5, cfg.metric_cell)?;
        let ref_grid = project_rasterize(reference.points(), &spec)?;
        let final_iou = observed_iou(&obs, &ref_grid, &spec)?;
        return Ok(EpisodeResult {
            rows: Vec::new(),
            final_iou,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            failed: false,
            snapshots: Vec::new(),
        });
    }

    let pick = resolve_anchor(&cfg.pick, &init);
    let place = resolve_anchor(&cfg.place, &init);
    let mut state = grasp(&init, pick)?;
    let grasped_index = state.grasped.expect("just grasped");

    let raw0 = extract_point_cloud(&state);
    let obs0 = voxel_downsample(&raw0, cfg.voxel)?;
    let mut slot = ReferenceSlot::new();
    let reference = slot.freeze(&obs0)?.clone();
    let hull_xy: Vec<Vector2<f64>> = raw0.points.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let hull = convex_hull_2d(&hull_xy)?;
    let spec = GridSpec::centered(cfg.cloth.center, 0.5, cfg.metric_cell)?;
    let ref_grid = project_rasterize(reference.points(), &spec)?;
    let task = TaskFrame::new(pick, place).map_err(HarnessError::Plan)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = ParamGrid::default();
    let mut z = LatentParams::initial(DEFAULT_FRICTION);
    let mut window = HistoryWindow::new(
        cfg.window,
        WindowContext {
            resolution: cfg.cloth.resolution,
            rest_spacing: state.rest_spacing,
            grasped: grasped_index,
        },
    );

    // Scripted policies compute their whole action sequence up front; the
    // open-loop variant may run past T while reaching the place position.
    let scripted: Option<Vec<Vector3<f64>>> = match cfg.policy {
        PolicyKind::Triangular => Some(
            baseline_triangular(pick, place, cfg.steps, cfg.planner.action_norm)?
                .0
                .clone(),
        ),
        PolicyKind::AdaFoldOl => {
            let base = state_from_observation(
                &raw0,
                cfg.cloth.resolution,
                state.rest_spacing,
                grasped_index,
            )?;
            Some(
                open_loop_sequence(&base, &reference, &hull, &spec, &z, cfg, &task, &mut rng)?
                    .0
                    .clone(),
            )
        }
        _ => None,
    };
    let total_steps = scripted.as_ref().map_or(cfg.steps, |s| s.len());

    let mut rows: Vec<StepRow> = Vec::with_capacity(total_steps);
    let mut snapshots = Vec::new();
    let mut warm: Vec<Vector3<f64>> = Vec::new();
    let mut failed = false;
    let mut last_iou = 0.0;

    for t in 0..total_steps {
        let raw = extract_point_cloud(&state);
        let obs = voxel_downsample(&raw, cfg.voxel)?;
        let cur_iou = observed_iou(&obs, &ref_grid, &spec)?;
        last_iou = cur_iou;
        if cfg.snapshots {
            snapshots.push((t, raw.to_csv()));
        }

        if cfg.policy == PolicyKind::AdaFold && window.len() >= 2 {
            z = estimate_params(&window, &grid, cfg.prediction_steps, &z, &cfg.sim)?;
        }

        let ee = state.ee_position().expect("state remains grasped");
        let mut stats: Option<(f64, f64, f64, f64)> = None;
        let action = if let Some(seq) = &scripted {
            seq[t]
        } else if let Some(a) = place_guard(
            ee,
            place,
            cfg.planner.action_norm,
            cfg.planner.place_tol,
            cfg.steps - t,
        ) {
            a
        } else {
            match cfg.policy {
                PolicyKind::AdaFold => {
                    let base = state_from_observation(
                        &raw,
                        cfg.cloth.resolution,
                        state.rest_spacing,
                        grasped_index,
                    )?;
                    let out = plan_step(
                        &base, &reference, &hull, &spec, &warm, &z, &cfg.planner, &cfg.sim,
                        &task, t, cfg.steps, &mut rng,
                    )?;
                    warm = out.warm_next.clone();
                    stats = Some((
                        out.min_cost,
                        out.mean_cost,
                        out.best_alignment,
                        out.best_hull_exits,
                    ));
                    out.action
                }
                PolicyKind::Random => {
                    let horizon = cfg.planner.horizon.min(cfg.steps - t);
                    baseline_random_action(horizon, &cfg.planner, &task.fold_direction, &mut rng)?
                }
                PolicyKind::Triangular | PolicyKind::AdaFoldOl => unreachable!("scripted"),
            }
        };

        if cfg.policy == PolicyKind::AdaFold {
            update_history(
                &mut window,
                WindowEntry {
                    cloud: raw,
                    ee,
                    action,
                    t: t as u64,
                },
            )?;
        }

        let estimate = (cfg.policy == PolicyKind::AdaFold)
            .then(|| (z.params.stiffness, z.params.elasticity, z.residual));
        rows.push(StepRow {
            t,
            action,
            min_cost: stats.map(|s| s.0),
            mean_cost: stats.map(|s| s.1),
            alignment_cost: stats.map(|s| s.2),
            hull_exits: stats.map(|s| s.3),
            iou: cur_iou,
            estimate,
        });

        match step_quasi_static(&state, action, &gt_params, &cfg.sim) {
            Ok(next) => state = next,
            Err(SimError::NumericalDivergence { .. }) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }

    let final_iou = if failed {
        last_iou
    } else {
        let obs = voxel_downsample(&extract_point_cloud(&state), cfg.voxel)?;
        observed_iou(&obs, &ref_grid, &spec)?
    };

    Ok(EpisodeResult {
        rows,
        final_iou,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        failed,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn triangular_reaches_place_in_t_steps() {
        let pick = Vector3::new(0.0, 0.0, 0.0);
        let place = Vector3::new(0.2, 0.0, 0.0);
        let seq = baseline_triangular(pick, place, 12, 0.03).unwrap();
        assert_eq!(seq.len(), 12);
        let end = seq.end_position(pick);
        assert!((end - place).norm() < 1e-12);
        for a in &seq.0 {
            assert!(a.norm() <= 0.03 + 1e-12);
        }
    }

    #[test]
    fn triangular_path_is_planar() {
        let pick = Vector3::new(-0.1, 0.1, 0.0);
        let place = Vector3::new(-0.1, -0.1, 0.0);
        let seq = baseline_triangular(pick, place, 12, 0.03).unwrap();
        // All waypoints stay in the vertical plane x = -0.1.
        let mut x = pick;
        for a in &seq.0 {
            x += a;
            assert_relative_eq!(x.x, -0.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn triangular_degenerate_pick_place_errors() {
        let p = Vector3::new(0.1, 0.1, 0.0);
        assert!(matches!(
            baseline_triangular(p, p, 12, 0.03),
            Err(HarnessError::InfeasibleConfig(_))
        ));
    }

    #[test]
    fn triangular_infeasible_when_too_few_steps() {
        let pick = Vector3::new(0.0, 0.0, 0.0);
        let place = Vector3::new(0.2, 0.0, 0.0);
        assert!(matches!(
            baseline_triangular(pick, place, 3, 0.03),
            Err(HarnessError::InfeasibleConfig(_))
        ));
    }

    #[test]
    fn place_guard_kicks_in_exactly_when_needed() {
        let place = Vector3::new(0.0, -0.09, 0.0);
        let ee = Vector3::zeros();
        // 3 steps needed; with 4 remaining the planner still has slack.
        assert!(place_guard(ee, place, 0.03, 0.03, 4).is_none());
        let a = place_guard(ee, place, 0.03, 0.03, 3).unwrap();
        assert_relative_eq!(a.norm(), 0.03, epsilon = 1e-12);
        // Within tolerance: no guard.
        assert!(place_guard(place, place, 0.03, 0.03, 1).is_none());
    }

    fn quick_config(policy: PolicyKind, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            policy,
            seed,
            cloth: crate::harness::config::ClothSpec {
                resolution: 7,
                ..Default::default()
            },
            planner: PlannerConfig {
                candidates: 8,
                horizon: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn triangular_episode_runs_and_ends_at_place() {
        let cfg = quick_config(PolicyKind::Triangular, 1);
        let result = run_episode(&cfg).unwrap();
        assert!(!result.failed);
        assert_eq!(result.rows.len(), cfg.steps);
        assert!(result.final_iou > 0.0 && result.final_iou <= 1.0);
    }

    #[test]
    fn random_episode_is_seed_reproducible() {
        let cfg = quick_config(PolicyKind::Random, 33);
        let a = run_episode(&cfg).unwrap();
        let b = run_episode(&cfg).unwrap();
        assert_eq!(a.final_iou, b.final_iou);
        assert_eq!(a.steps_csv(), b.steps_csv());
    }

    #[test]
    fn t_zero_edge_terminates_immediately() {
        let mut cfg = quick_config(PolicyKind::Triangular, 2);
        cfg.steps = 0;
        let res = run_episode(&cfg).unwrap();
        assert!(res.rows.is_empty());
        assert!(!res.failed);
        // Flat unfolded cloth: the halves barely overlap.
        assert!((0.0..=1.0).contains(&res.final_iou));
        assert!(res.final_iou < 0.3);
    }
}
