//! Turning episodes into supervised training samples.
//!
//! For a frame at index `t`, the supervision targets come from the robot's
//! own future odometry: the goal is the point 2.5 m ahead along the future
//! path, the global plan is five waypoints spaced 0.5 m apart in arc length,
//! and the local target is the velocity command recorded at `t`. All
//! geometry is expressed in the robot frame at `t`, so the labels are
//! invariant to rigid transforms of the world frame.
//!
//! Frames whose remaining path is shorter than the requested geometry are
//! skipped (and counted), never clamped or extrapolated.

use crate::episodes::{CameraImage, Episode, Pose2D, VelocityCommand};
use crate::error::{Error, Result};
use crate::voxelizer::{voxelize, GridSpec, VoxelGrid};

/// Number of waypoints in a global plan.
pub const WAYPOINT_COUNT: usize = 5;
/// Arc-length spacing between consecutive waypoints, meters.
pub const WAYPOINT_SPACING_M: f64 = 0.5;
/// Arc-length distance from the robot to the goal point, meters.
pub const GOAL_AHEAD_M: f64 = 2.5;

/// Five waypoints in the robot frame, ordered near to far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalPlan {
    pub waypoints: [[f64; 2]; WAYPOINT_COUNT],
}

impl GlobalPlan {
    /// Wraps waypoints after checking they are finite.
    ///
    /// # Errors
    /// [`Error::InvalidInput`] when any coordinate is non-finite.
    pub fn new(waypoints: [[f64; 2]; WAYPOINT_COUNT]) -> Result<Self> {
        if waypoints.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("global plan contains a non-finite coordinate"));
        }
        Ok(GlobalPlan { waypoints })
    }

    /// Waypoints flattened as `[x1, y1, ..., x5, y5]`.
    pub fn flat(&self) -> [f64; WAYPOINT_COUNT * 2] {
        let mut out = [0.0; WAYPOINT_COUNT * 2];
        for (i, wp) in self.waypoints.iter().enumerate() {
            out[2 * i] = wp[0];
            out[2 * i + 1] = wp[1];
        }
        out
    }
}

/// Local supervision: the demonstrated velocity command at the sample frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlan {
    pub action: VelocityCommand,
}

/// Everything the network may condition on for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct NavigationInput {
    pub voxels: VoxelGrid,
    pub image: CameraImage,
    /// Goal in the robot frame, meters.
    pub goal: [f64; 2],
    /// Number of past frames folded into the recurrent state (1 here: the
    /// current frame only).
    pub history_len: usize,
}

/// One supervised example with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: NavigationInput,
    pub plan: GlobalPlan,
    pub action: LocalPlan,
    pub episode_id: String,
    pub scenario: String,
    /// Frame index within the source episode.
    pub t_index: usize,
}

/// Counters reported by [`build_dataset`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub produced: usize,
    /// Frames skipped because the remaining path was too short.
    pub skipped_insufficient: usize,
}

/// Expresses world-frame point `p` in the frame of `robot` (x forward along
/// the heading, y left).
pub fn to_robot_frame(p: [f64; 2], robot: &Pose2D) -> [f64; 2] {
    let dx = p[0] - robot.x;
    let dy = p[1] - robot.y;
    let (s, c) = robot.theta.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Inverse of [`to_robot_frame`].
pub fn from_robot_frame(p: [f64; 2], robot: &Pose2D) -> [f64; 2] {
    let (s, c) = robot.theta.sin_cos();
    [robot.x + c * p[0] - s * p[1], robot.y + s * p[0] + c * p[1]]
}

/// Resamples a polyline at fixed arc-length intervals.
///
/// Consecutive poses with zero displacement are collapsed first, so
/// stationary stretches contribute no length. Returns `count` points at arc
/// lengths `spacing, 2*spacing, ..., count*spacing` measured from the first
/// pose, linearly interpolated between polyline vertices.
///
/// # Errors
/// [`Error::InsufficientFuture`] when the polyline is shorter than
/// `count * spacing`; [`Error::InvalidInput`] for a non-positive spacing,
/// zero count, or empty input.
pub fn arc_length_resample(poses: &[Pose2D], spacing: f64, count: usize) -> Result<Vec<[f64; 2]>> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::invalid(format!("spacing {spacing} must be positive and finite")));
    }
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if poses.is_empty() {
        return Err(Error::invalid("pose list is empty"));
    }

    let mut vertices: Vec<[f64; 2]> = Vec::with_capacity(poses.len());
    vertices.push([poses[0].x, poses[0].y]);
    for p in &poses[1..] {
        let last = vertices.last().unwrap();
        if p.x != last[0] || p.y != last[1] {
            vertices.push([p.x, p.y]);
        }
    }

    let mut cum = Vec::with_capacity(vertices.len());
    cum.push(0.0);
    for w in vertices.windows(2) {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let needed = spacing * count as f64;
    if total < needed {
        return Err(Error::InsufficientFuture { needed_m: needed, available_m: total });
    }

    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for i in 0..count {
        let target = spacing * (i + 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 { (target - cum[seg]) / seg_len } else { 0.0 };
        let a = vertices[seg];
        let b = vertices[seg + 1];
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

fn future_poses(ep: &Episode, t: usize) -> Result<Vec<Pose2D>> {
    if t >= ep.frames.len() {
        return Err(Error::invalid(format!(
            "frame index {t} out of range for episode with {} frames",
            ep.frames.len()
        )));
    }
    Ok(ep.frames[t..].iter().map(|f| f.odom).collect())
}

/// Goal for frame `t`: the point 2.5 m ahead along the future odometry, in
/// the robot frame at `t`.
///
/// # Errors
/// [`Error::InsufficientFuture`] when less than 2.5 m of path remains;
/// [`Error::InvalidInput`] for an out-of-range index.
pub fn extract_goal(ep: &Episode, t: usize) -> Result<[f64; 2]> {
    let future = future_poses(ep, t)?;
    let pts = arc_length_resample(&future, GOAL_AHEAD_M, 1)?;
    Ok(to_robot_frame(pts[0], &ep.frames[t].odom))
}

/// Global plan for frame `t`: five waypoints 0.5 m apart along the future
/// odometry, in the robot frame at `t`.
///
/// # Errors
/// Same conditions as [`extract_goal`].
pub fn extract_global_plan(ep: &Episode, t: usize) -> Result<GlobalPlan> {
    let future = future_poses(ep, t)?;
    let pts = arc_length_resample(&future, WAYPOINT_SPACING_M, WAYPOINT_COUNT)?;
    let robot = &ep.frames[t].odom;
    let mut waypoints = [[0.0; 2]; WAYPOINT_COUNT];
    for (slot, p) in waypoints.iter_mut().zip(&pts) {
        *slot = to_robot_frame(*p, robot);
    }
    GlobalPlan::new(waypoints)
}

/// Builds samples from every `stride`-th frame of each episode.
///
/// Frames without 2.5 m of future path are counted in
/// [`DatasetStats::skipped_insufficient`]. The goal is recomputed from
/// odometry for every sample rather than copied from the plan.
///
/// # Errors
/// [`Error::InvalidInput`] for a zero stride or an invalid grid spec.
pub fn build_dataset(
    episodes: &[Episode],
    stride: usize,
    grid: &GridSpec,
) -> Result<(Vec<TrainingSample>, DatasetStats)> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    grid.validate()?;

    let mut samples = Vec::new();
    let mut stats = DatasetStats::default();
    for ep in episodes {
        for t in (0..ep.frames.len()).step_by(stride) {
            let plan = match extract_global_plan(ep, t) {
                Ok(p) => p,
                Err(Error::InsufficientFuture { .. }) => {
                    stats.skipped_insufficient += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let goal = match extract_goal(ep, t) {
                Ok(g) => g,
                Err(Error::InsufficientFuture { .. }) => {
                    stats.skipped_insufficient += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let frame = &ep.frames[t];
            samples.push(TrainingSample {
                input: NavigationInput {
                    voxels: voxelize(&frame.points, grid),
                    image: frame.image.clone(),
                    goal,
                    history_len: 1,
                },
                plan,
                action: LocalPlan { action: frame.action },
                episode_id: ep.id.clone(),
                scenario: ep.scenario.clone(),
                t_index: t,
            });
            stats.produced += 1;
        }
    }
    Ok((samples, stats))
}
