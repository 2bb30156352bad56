//! Classical planner baselines scored with the behavior-cloning loss.
//!
//! Two planners produce the same decision interface as the learned
//! policies: `straight_pursuit` drives a pure-pursuit arc straight at the
//! goal ignoring obstacles, and `dwa_lite` samples velocity commands on a
//! grid, simulates constant-command arcs, rejects arcs whose swept
//! footprint touches an occupied voxel column, and maximizes a
//! goal-progress-plus-clearance score. The obstacle model is the 2D
//! projection of the voxel grid (a column is occupied if any of its cells
//! is).

use serde::{Deserialize, Serialize};

use crate::episodes::VelocityLimits;
use crate::error::{Error, Result};
use crate::network::NetworkOutput;
use crate::sampling::{NavigationInput, TrainingSample, WAYPOINT_COUNT, WAYPOINT_SPACING_M};
use crate::trainer::{bc_loss, build_report, waypoint_l1, EvalReport, SampleLoss, Split};
use crate::voxelizer::VoxelGrid;

/// Arc-simulation timestep, seconds.
pub const SIM_DT: f64 = 0.05;
/// Clearance values are capped here (meters); beyond this, more open space
/// does not improve an arc's score.
pub const CLEARANCE_CAP_M: f64 = 3.0;

/// Which classical planner to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    StraightPursuit,
    DwaLite,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::StraightPursuit => "straight_pursuit",
            BaselineKind::DwaLite => "dwa_lite",
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dynamic-window sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwaConfig {
    #[serde(default = "default_v_samples")]
    pub v_samples: usize,
    #[serde(default = "default_omega_samples")]
    pub omega_samples: usize,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default = "default_radius")]
    pub robot_radius_m: f64,
    #[serde(default = "default_clearance_weight")]
    pub clearance_weight: f64,
    #[serde(default = "default_goal_weight")]
    pub goal_weight: f64,
}

fn default_v_samples() -> usize {
    7
}
fn default_omega_samples() -> usize {
    15
}
fn default_horizon() -> f64 {
    2.0
}
fn default_radius() -> f64 {
    0.3
}
fn default_clearance_weight() -> f64 {
    0.2
}
fn default_goal_weight() -> f64 {
    1.0
}

impl Default for DwaConfig {
    fn default() -> Self {
        DwaConfig {
            v_samples: default_v_samples(),
            omega_samples: default_omega_samples(),
            horizon_s: default_horizon(),
            robot_radius_m: default_radius(),
            clearance_weight: default_clearance_weight(),
            goal_weight: default_goal_weight(),
        }
    }
}

/// Full baseline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    #[serde(default = "default_v_nominal")]
    pub v_nominal: f64,
    #[serde(default)]
    pub limits: VelocityLimits,
    #[serde(default)]
    pub dwa: DwaConfig,
}

fn default_v_nominal() -> f64 {
    1.0
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            kind,
            v_nominal: default_v_nominal(),
            limits: VelocityLimits::default(),
            dwa: DwaConfig::default(),
        }
    }

    /// # Errors
    /// [`Error::Validation`] listing each violated invariant.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if !(self.v_nominal > 0.0 && self.v_nominal.is_finite()) {
            violations.push(format!("v_nominal must be finite and > 0, got {}", self.v_nominal));
        }
        if self.dwa.v_samples < 3 {
            violations.push(format!("v_samples must be >= 3, got {}", self.dwa.v_samples));
        }
        if self.dwa.omega_samples < 3 {
            violations.push(format!(
                "omega_samples must be >= 3, got {}",
                self.dwa.omega_samples
            ));
        }
        if !(self.dwa.robot_radius_m > 0.0) {
            violations.push(format!(
                "robot_radius_m must be > 0, got {}",
                self.dwa.robot_radius_m
            ));
        }
        if !(self.dwa.horizon_s > 0.0) {
            violations.push(format!("horizon_s must be > 0, got {}", self.dwa.horizon_s));
        }
        if !(self.dwa.clearance_weight >= 0.0 && self.dwa.goal_weight >= 0.0) {
            violations.push("score weights must be >= 0".to_string());
        }
        if !(self.limits.v_max > 0.0 && self.limits.omega_max > 0.0) {
            violations.push("velocity limits must be positive".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { violations })
        }
    }
}

/// A baseline decision; `blocked` marks the all-arcs-colliding stop output
/// of the dynamic-window planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselinePlan {
    pub output: NetworkOutput,
    pub blocked: bool,
}

/// Position on a constant (v, omega) arc after driving for time `t`,
/// starting at the origin facing +x. Well-defined for v = 0 (turn in
/// place or stand still: the position stays at the origin).
fn arc_point(v: f64, omega: f64, t: f64) -> [f64; 2] {
    if omega.abs() < 1e-12 {
        return [v * t, 0.0];
    }
    let r = v / omega;
    let a = omega * t;
    [r * a.sin(), r * (1.0 - a.cos())]
}

/// Drives straight at the goal with a pure-pursuit turn rate.
///
/// Waypoints sit at arc lengths 0.5..2.5 m along the goal ray; the action
/// is `(v_nominal, 2 * v * y_g / (x_g^2 + y_g^2))` — the curvature of the
/// circle through the origin (heading +x) and the goal.
///
/// # Errors
/// [`Error::DegenerateGoal`] when the goal is at the origin;
/// [`Error::InvalidInput`] for non-finite goals or invalid configs.
pub fn straight_pursuit_plan(goal: [f64; 2], cfg: &BaselineConfig) -> Result<NetworkOutput> {
    cfg.validate()?;
    if !goal.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("goal must be finite"));
    }
    let d_sq = goal[0] * goal[0] + goal[1] * goal[1];
    if d_sq.sqrt() < 1e-9 {
        return Err(Error::DegenerateGoal { x: goal[0], y: goal[1] });
    }
    let d = d_sq.sqrt();
    let mut waypoints = [[0.0; 2]; WAYPOINT_COUNT];
    for (k, wp) in waypoints.iter_mut().enumerate() {
        let s = WAYPOINT_SPACING_M * (k + 1) as f64;
        *wp = [goal[0] / d * s, goal[1] / d * s];
    }
    let v = cfg.v_nominal;
    let omega = 2.0 * v * goal[1] / d_sq;
    Ok(NetworkOutput { waypoints, action: (v, omega) })
}

/// Per-plan obstacle model: occupied columns of the voxel grid.
struct ColumnField {
    /// Column centers, meters, robot frame.
    centers: Vec<[f64; 2]>,
    /// Squared distance (in cells) from every column to the nearest
    /// occupied column; `None` when the grid holds no obstacle.
    edt_sq: Option<Vec<f64>>,
    nx: usize,
    ny: usize,
    cell_m: f64,
    x0: f64,
    y0: f64,
}

impl ColumnField {
    fn new(grid: &VoxelGrid) -> ColumnField {
        let (nx, ny, _) = grid.dims();
        let spec = grid.spec();
        let cell_m = spec.voxel_m;
        let (x0, y0) = (spec.x_range.0, spec.y_range.0);
        let columns = grid.occupied_columns();
        let centers = columns
            .iter()
            .map(|&lin| {
                let i = (lin as usize) / ny;
                let j = (lin as usize) % ny;
                [
                    x0 + (i as f64 + 0.5) * cell_m,
                    y0 + (j as f64 + 0.5) * cell_m,
                ]
            })
            .collect();
        let edt_sq = if columns.is_empty() {
            None
        } else {
            let mut occ = vec![false; nx * ny];
            for &lin in &columns {
                occ[lin as usize] = true;
            }
            Some(edt_squared(&occ, nx, ny))
        };
        ColumnField { centers, edt_sq, nx, ny, cell_m, x0, y0 }
    }

    /// Distance (meters, capped) from a point to the nearest occupied
    /// column, measured center-to-center on the column grid.
    fn clearance(&self, p: [f64; 2]) -> f64 {
        let Some(edt) = &self.edt_sq else {
            return CLEARANCE_CAP_M;
        };
        let i = (((p[0] - self.x0) / self.cell_m).floor() as i64).clamp(0, self.nx as i64 - 1);
        let j = (((p[1] - self.y0) / self.cell_m).floor() as i64).clamp(0, self.ny as i64 - 1);
        let d = edt[i as usize * self.ny + j as usize].sqrt() * self.cell_m;
        d.min(CLEARANCE_CAP_M)
    }

    /// True when any occupied column center lies within `radius` of `p`.
    fn hits(&self, p: [f64; 2], radius: f64) -> bool {
        let r_sq = radius * radius;
        self.centers.iter().any(|c| {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            dx * dx + dy * dy < r_sq
        })
    }
}

/// Squared Euclidean distance transform (Felzenszwalb-Huttenlocher), in
/// cell units, over a row-major `nx * ny` grid.
fn edt_squared(occ: &[bool], nx: usize, ny: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut field: Vec<f64> = occ.iter().map(|&o| if o { 0.0 } else { INF }).collect();

    fn transform_1d(f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            let mut s;
            loop {
                let p = v[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                if s <= z[k] {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                } else {
                    break;
                }
            }
            if s > z[k] {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
        }
        let mut k = 0usize;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let diff = q as f64 - v[k] as f64;
            d[q] = diff * diff + f[v[k]];
        }
    }

    // Along y (contiguous rows), then along x.
    let mut tmp = vec![0.0f64; ny.max(nx)];
    for i in 0..nx {
        let row = &field[i * ny..(i + 1) * ny];
        transform_1d(row, &mut tmp[..ny]);
        field[i * ny..(i + 1) * ny].copy_from_slice(&tmp[..ny]);
    }
    let mut col = vec![0.0f64; nx];
    for j in 0..ny {
        for i in 0..nx {
            col[i] = field[i * ny + j];
        }
        transform_1d(&col, &mut tmp[..nx]);
        for i in 0..nx {
            field[i * ny + j] = tmp[i];
        }
    }
    field
}

/// Velocity grids. The turn-rate grid is exactly mirror-symmetric:
/// `omega[n-1-i] == -omega[i]` bit-for-bit, with 0 at the center for odd
/// counts.
fn velocity_grids(cfg: &BaselineConfig) -> (Vec<f64>, Vec<f64>) {
    let nv = cfg.dwa.v_samples;
    let vs = (0..nv)
        .map(|i| cfg.limits.v_max * i as f64 / (nv - 1) as f64)
        .collect();
    let no = cfg.dwa.omega_samples;
    let half = (no - 1) as f64 / 2.0;
    let ws = (0..no)
        .map(|i| {
            let k = i as f64 - half;
            cfg.limits.omega_max * k / half
        })
        .collect();
    (vs, ws)
}

/// Dynamic-window plan: grid-samples commands, rejects colliding arcs,
/// scores the rest by goal progress and clearance.
///
/// Collision uses an inflated radius — robot radius plus the column's
/// half-diagonal plus half an arc step — so the continuous swept footprint
/// of a returned arc provably misses every occupied column, not just the
/// sampled poses. Ties break toward smaller |omega|, then v closest to
/// nominal, then grid order.
///
/// # Errors
/// [`Error::InvalidInput`] for non-finite goals or invalid configs.
pub fn dwa_lite_plan(input: &NavigationInput, cfg: &BaselineConfig) -> Result<BaselinePlan> {
    cfg.validate()?;
    if !input.goal.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("goal must be finite"));
    }
    let field = ColumnField::new(&input.voxels);
    let (vs, ws) = velocity_grids(cfg);
    let steps = (cfg.dwa.horizon_s / SIM_DT).round().max(1.0) as usize;
    let half_diag = field.cell_m * std::f64::consts::FRAC_1_SQRT_2;
    let goal = input.goal;

    struct Candidate {
        v: f64,
        omega: f64,
        score: f64,
    }
    let mut best: Option<Candidate> = None;

    for &v in &vs {
        for &omega in &ws {
            let inflated = cfg.dwa.robot_radius_m + half_diag + v * SIM_DT / 2.0;
            let mut clearance = CLEARANCE_CAP_M;
            let mut collides = false;
            let mut end = [0.0; 2];
            for step in 0..=steps {
                let t = SIM_DT * step as f64;
                let p = arc_point(v, omega, t);
                if field.hits(p, inflated) {
                    collides = true;
                    break;
                }
                clearance = clearance.min(field.clearance(p));
                end = p;
            }
            if collides {
                continue;
            }
            let goal_dist = ((end[0] - goal[0]).powi(2) + (end[1] - goal[1]).powi(2)).sqrt();
            let score =
                cfg.dwa.goal_weight * (-goal_dist) + cfg.dwa.clearance_weight * clearance;
            let better = match &best {
                None => true,
                Some(b) => {
                    score > b.score
                        || (score == b.score
                            && (omega.abs() < b.omega.abs()
                                || (omega.abs() == b.omega.abs()
                                    && (v - cfg.v_nominal).abs() < (b.v - cfg.v_nominal).abs())))
                }
            };
            if better {
                best = Some(Candidate { v, omega, score });
            }
        }
    }

    let Some(chosen) = best else {
        return Ok(BaselinePlan {
            output: NetworkOutput { waypoints: [[0.0; 2]; WAYPOINT_COUNT], action: (0.0, 0.0) },
            blocked: true,
        });
    };

    let arc_len = chosen.v * cfg.dwa.horizon_s;
    let spacing = WAYPOINT_SPACING_M.min(arc_len / WAYPOINT_COUNT as f64);
    let mut waypoints = [[0.0; 2]; WAYPOINT_COUNT];
    for (k, wp) in waypoints.iter_mut().enumerate() {
        // Time at which the arc length reaches the waypoint spacing; a
        // stationary best command keeps all waypoints at the origin.
        let t = if chosen.v > 0.0 { spacing * (k + 1) as f64 / chosen.v } else { 0.0 };
        *wp = arc_point(chosen.v, chosen.omega, t);
    }
    Ok(BaselinePlan {
        output: NetworkOutput { waypoints, action: (chosen.v, chosen.omega) },
        blocked: false,
    })
}

/// Runs a baseline over a dataset and aggregates its behavior-cloning loss
/// exactly like model evaluation, with `split = baseline:<kind>`.
///
/// # Errors
/// [`Error::InvalidInput`] for an empty dataset or invalid `lambda`;
/// propagates planner errors.
pub fn score_baseline(
    cfg: &BaselineConfig,
    samples: &[TrainingSample],
    lambda: f64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("baseline scoring requires at least one sample"));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for sample in samples {
        let output = match cfg.kind {
            BaselineKind::StraightPursuit => straight_pursuit_plan(sample.input.goal, cfg)?,
            BaselineKind::DwaLite => dwa_lite_plan(&sample.input, cfg)?.output,
        };
        let (total, global_l2, local_l1) = bc_loss(&output, &sample.plan, &sample.action, lambda)?;
        per_sample.push(SampleLoss {
            episode_id: sample.episode_id.clone(),
            t_index: sample.t_index,
            scenario: sample.scenario.clone(),
            global_l2,
            global_l1: waypoint_l1(&output.waypoints, &sample.plan.waypoints),
            local_l1,
            total,
        });
    }
    Ok(build_report(per_sample, Split::Baseline(cfg.kind.as_str().to_string())))
}
