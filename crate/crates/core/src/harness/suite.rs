//! Benchmark suite runner: policy x cloth x horizon grids of seeded
//! episodes, CSV persistence, and the one-time spring-scale calibration
//! sweep.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::HarnessError;
use crate::harness::config::{ClothSet, EpisodeConfig, PolicyKind, SuiteConfig};
use crate::harness::episode::{run_episode, EpisodeResult};
use crate::sim::{ClothParams, PARAM_MAX, PARAM_MIN};

/// One completed episode with its cell coordinates.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub index: usize,
    pub policy: PolicyKind,
    pub horizon: usize,
    pub cloth_label: String,
    pub params: ClothParams,
    pub seed: u64,
    pub result: EpisodeResult,
}

/// Aggregated final IoU per (policy, horizon, cloth-set) cell.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub horizon: usize,
    pub cloth_set: String,
    pub episodes: usize,
    /// Episodes included in the mean (failed ones are excluded unless the
    /// suite says otherwise).
    pub included: usize,
    pub mean_final_iou: f64,
    pub std_final_iou: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResults {
    pub records: Vec<EpisodeRecord>,
    pub summaries: Vec<SummaryRow>,
}

/// Stiffness/elasticity pairs used by a suite: either the base cloth or N
/// uniform draws from the parameter square, seeded by the suite seed.
pub fn cloth_draws(suite: &SuiteConfig) -> Vec<(String, ClothParams)> {
    match suite.cloths {
        ClothSet::Default => vec![("default".to_string(), suite.base.cloth.params)],
        ClothSet::Randomized(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(suite.base_seed);
            (0..n)
                .map(|i| {
                    let stiffness = rng.gen_range(PARAM_MIN..=PARAM_MAX);
                    let elasticity = rng.gen_range(PARAM_MIN..=PARAM_MAX);
                    (
                        format!("draw{i}"),
                        ClothParams {
                            stiffness,
                            elasticity,
                            friction: suite.base.cloth.params.friction,
                        },
                    )
                })
                .collect()
        }
    }
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Run every (horizon x policy x cloth x seed) cell of the suite.
///
/// Episodes are independent given their seed and run concurrently; records
/// come back in deterministic cell order. Seeds depend only on the
/// repetition index, so policies are compared pairwise on identical seeds.
pub fn run_benchmark(suite: &SuiteConfig) -> Result<BenchmarkResults, HarnessError> {
    suite.base.validate()?;
    let draws = cloth_draws(suite);
    let mut configs: Vec<(PolicyKind, usize, String, ClothParams, u64, EpisodeConfig)> =
        Vec::new();
    for &horizon in &suite.horizons {
        for &policy in &suite.policies {
            for (label, params) in &draws {
                for rep in 0..suite.episodes {
                    let mut cfg = suite.base.clone();
                    cfg.planner.horizon = horizon;
                    cfg.policy = policy;
                    cfg.cloth.params = *params;
                    cfg.seed = suite.base_seed + rep as u64;
                    configs.push((policy, horizon, label.clone(), *params, cfg.seed, cfg));
                }
            }
        }
    }

    let results: Vec<Result<EpisodeResult, HarnessError>> = configs
        .par_iter()
        .map(|(.., cfg)| run_episode(cfg))
        .collect();

    let mut records = Vec::with_capacity(configs.len());
    for (index, ((policy, horizon, label, params, seed, _), result)) in
        configs.into_iter().zip(results).enumerate()
    {
        records.push(EpisodeRecord {
            index,
            policy,
            horizon,
            cloth_label: label,
            params,
            seed,
            result: result?,
        });
    }

    let cloth_set_label = match suite.cloths {
        ClothSet::Default => "default".to_string(),
        ClothSet::Randomized(n) => format!("randomized:{n}"),
    };
    let mut summaries = Vec::new();
    for &horizon in &suite.horizons {
        for &policy in &suite.policies {
            let cell: Vec<&EpisodeRecord> = records
                .iter()
                .filter(|r| r.policy == policy && r.horizon == horizon)
                .collect();
            let included: Vec<f64> = cell
                .iter()
                .filter(|r| suite.include_failed || !r.result.failed)
                .map(|r| r.result.final_iou)
                .collect();
            let mean = if included.is_empty() {
                0.0
            } else {
                included.iter().sum::<f64>() / included.len() as f64
            };
            summaries.push(SummaryRow {
                policy,
                horizon,
                cloth_set: cloth_set_label.clone(),
                episodes: cell.len(),
                included: included.len(),
                mean_final_iou: mean,
                std_final_iou: sample_std(&included, mean),
            });
        }
    }
    Ok(BenchmarkResults { records, summaries })
}

/// Mean final IoU of a summary cell, looked up by policy and horizon.
impl BenchmarkResults {
    pub fn mean_iou(&self, policy: PolicyKind, horizon: usize) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.policy == policy && s.horizon == horizon)
            .map(|s| s.mean_final_iou)
    }
}

/// Output directory resolution: explicit flag, then the CLOTHFOLD_OUT_DIR
/// environment variable, then ./out.
pub fn resolve_out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("CLOTHFOLD_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn results_csv(results: &BenchmarkResults) -> String {
    let mut out = String::from(
        "episode,policy,horizon,cloth,stiffness,elasticity,friction,seed,steps,final_iou,failed\n",
    );
    for r in &results.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.index,
            r.policy,
            r.horizon,
            r.cloth_label,
            r.params.stiffness,
            r.params.elasticity,
            r.params.friction,
            r.seed,
            r.result.rows.len(),
            r.result.final_iou,
            r.result.failed,
        ));
    }
    out
}

pub fn summary_csv(results: &BenchmarkResults) -> String {
    let mut out =
        String::from("policy,horizon,cloths,episodes,included,mean_final_iou,std_final_iou\n");
    for s in &results.summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.policy,
            s.horizon,
            s.cloth_set,
            s.episodes,
            s.included,
            s.mean_final_iou,
            s.std_final_iou,
        ));
    }
    out
}

/// Persist results.csv, summary.csv, per-episode step logs and any
/// point-cloud snapshots under `out_dir`.
pub fn write_outputs(results: &BenchmarkResults, out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("results.csv"), results_csv(results))?;
    fs::write(out_dir.join("summary.csv"), summary_csv(results))?;
    let steps_dir = out_dir.join("steps");
    fs::create_dir_all(&steps_dir)?;
    for r in &results.records {
        fs::write(
            steps_dir.join(format!("ep_{:04}.csv", r.index)),
            r.result.steps_csv(),
        )?;
        if !r.result.snapshots.is_empty() {
            let snap_dir = out_dir.join("snapshots");
            fs::create_dir_all(&snap_dir)?;
            for (t, csv) in &r.result.snapshots {
                fs::write(
                    snap_dir.join(format!("ep_{:04}_t{:02}.csv", r.index, t)),
                    csv,
                )?;
            }
        }
    }
    Ok(())
}

/// One cell of the spring-scale calibration sweep.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationRow {
    pub stiffness_scale: f64,
    pub elasticity_scale: f64,
    pub final_iou: f64,
}

/// Sweep the stiffness/elasticity spring-constant mapping and report the
/// final IoU of the reference triangular fold on the base cloth for each
/// combination. Used once to pick the frozen defaults.
pub fn calibrate(
    base: &EpisodeConfig,
    stiffness_scales: &[f64],
    elasticity_scales: &[f64],
) -> Result<Vec<CalibrationRow>, HarnessError> {
    let mut cells = Vec::new();
    for &c1 in stiffness_scales {
        for &c2 in elasticity_scales {
            let mut cfg = base.clone();
            cfg.policy = PolicyKind::Triangular;
            cfg.sim.stiffness_scale = c1;
            cfg.sim.elasticity_scale = c2;
            cells.push((c1, c2, cfg));
        }
    }
    let results: Vec<Result<EpisodeResult, HarnessError>> = cells
        .par_iter()
        .map(|(.., cfg)| run_episode(cfg))
        .collect();
    let mut rows = Vec::with_capacity(cells.len());
    for ((c1, c2, _), result) in cells.into_iter().zip(results) {
        rows.push(CalibrationRow {
            stiffness_scale: c1,
            elasticity_scale: c2,
            final_iou: result?.final_iou,
        });
    }
    Ok(rows)
}

pub fn calibration_csv(rows: &[CalibrationRow]) -> String {
    let mut out = String::from("stiffness_scale,elasticity_scale,final_iou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.stiffness_scale, r.elasticity_scale, r.final_iou
        ));
    }
    out
}
