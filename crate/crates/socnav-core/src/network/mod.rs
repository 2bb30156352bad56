//! Policy networks mapping perception and a local goal to a global plan
//! (five waypoints) and a local action (v, omega).
//!
//! Three variants share one output architecture and differ only in
//! perception: `rgb` encodes the camera image, `lidar` encodes the voxelized
//! point cloud, and `multimodal` encodes both and fuses them twice — once
//! for the waypoint head (global planner, parameters `theta.*`) and once,
//! with an independent block, for the velocity pathway (local planner,
//! parameters `phi.*`).
//!
//! Each modality embedding is concatenated with the goal and advanced one
//! step through a gated recurrent unit from a zero state (the history window
//! is a single frame). The local pathway embeds the predicted waypoints,
//! runs a two-token transformer over [waypoint embedding, local hidden
//! state], and regresses the velocity command from the flattened tokens.
//!
//! Public operations run a single sample each; batched training goes
//! through the graph builders shared with the trainer.

mod graph;
mod params;

pub use params::{CheckpointMeta, ModelParams, ParamEntry};

pub(crate) use graph::{
    bind_params, forward_graph, images_tensor, occupied_lists, BatchInput, GRID_DIMS,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::episodes::CameraImage;
use crate::error::{Error, Result};
use crate::sampling::NavigationInput;
use crate::voxelizer::VoxelGrid;

/// Which sensors feed the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Lidar,
    Multimodal,
}

impl Modality {
    pub fn uses_image(self) -> bool {
        matches!(self, Modality::Rgb | Modality::Multimodal)
    }

    pub fn uses_pointcloud(self) -> bool {
        matches!(self, Modality::Lidar | Modality::Multimodal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Lidar => "lidar",
            Modality::Multimodal => "multimodal",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Encoder capacity: `desk` is a small strided stack that trains on a
/// workstation; `paper` swaps in an 18-layer residual image encoder and a
/// dense 3D convolutional voxel encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Hyperparameters of one policy variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modality: Modality,
    /// Channel widths of the image encoder stages (desk scale).
    #[serde(default = "default_img_channels")]
    pub img_channels: Vec<usize>,
    /// Channel widths of the voxel encoder stages.
    #[serde(default = "default_vox_channels")]
    pub vox_channels: Vec<usize>,
    /// Width of each modality embedding.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Recurrent state width; also the transformer token width.
    #[serde(default = "default_rnn_hidden")]
    pub rnn_hidden: usize,
    #[serde(default = "default_tf_layers")]
    pub tf_layers: usize,
    #[serde(default = "default_tf_heads")]
    pub tf_heads: usize,
    /// Waypoints per global plan; the output contract fixes this at 5.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_scale")]
    pub scale: Scale,
}

fn default_img_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_vox_channels() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_embed_dim() -> usize {
    128
}
fn default_rnn_hidden() -> usize {
    128
}
fn default_tf_layers() -> usize {
    2
}
fn default_tf_heads() -> usize {
    4
}
fn default_m() -> usize {
    5
}
fn default_scale() -> Scale {
    Scale::Desk
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modality: Modality::Multimodal,
            img_channels: default_img_channels(),
            vox_channels: default_vox_channels(),
            embed_dim: default_embed_dim(),
            rnn_hidden: default_rnn_hidden(),
            tf_layers: default_tf_layers(),
            tf_heads: default_tf_heads(),
            m: default_m(),
            scale: default_scale(),
        }
    }
}

impl ModelConfig {
    /// Checks every structural invariant, reporting all violations at once.
    ///
    /// # Errors
    /// [`Error::Validation`] listing each violated invariant.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.img_channels.is_empty() {
            violations.push("img_channels must be non-empty".to_string());
        }
        if self.vox_channels.is_empty() {
            violations.push("vox_channels must be non-empty".to_string());
        }
        if self.embed_dim == 0 {
            violations.push("embed_dim must be positive".to_string());
        }
        if self.rnn_hidden == 0 {
            violations.push("rnn_hidden must be positive".to_string());
        }
        if self.tf_layers == 0 {
            violations.push("tf_layers must be positive".to_string());
        }
        if self.tf_heads == 0 {
            violations.push("tf_heads must be positive".to_string());
        } else {
            if self.embed_dim % self.tf_heads != 0 {
                violations.push(format!(
                    "embed_dim {} must be divisible by tf_heads {}",
                    self.embed_dim, self.tf_heads
                ));
            }
            if self.rnn_hidden % self.tf_heads != 0 {
                violations.push(format!(
                    "rnn_hidden {} (the attention width) must be divisible by tf_heads {}",
                    self.rnn_hidden, self.tf_heads
                ));
            }
        }
        if self.m != 5 {
            violations.push(format!("m must be 5 (waypoint contract), got {}", self.m));
        }
        if self.scale == Scale::Desk && !self.vox_channels.is_empty() {
            // Each stage after the patch stem halves a 20x15x10 feature map
            // with a kernel-2 convolution, which needs every side >= 2.
            let mut dims = [20usize, 15, 10];
            for i in 1..self.vox_channels.len() {
                if dims.iter().any(|&d| d < 2) {
                    violations.push(format!(
                        "vox_channels has {} stages but the voxel feature map is exhausted after {}",
                        self.vox_channels.len(),
                        i
                    ));
                    break;
                }
                dims = dims.map(|d| (d - 2) / 2 + 1);
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { violations })
        }
    }
}

/// One policy decision: a global plan and the immediate velocity command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkOutput {
    /// Waypoints in the robot frame, meters, nearest first.
    pub waypoints: [[f64; 2]; 5],
    /// (v, omega): forward velocity (m/s) and yaw rate (rad/s).
    pub action: (f64, f64),
}

/// Selects which recurrent unit [`temporal_encode`] advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Pointcloud,
}

fn ensure_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} contains non-finite values")))
    }
}

fn ensure_len(name: &str, values: &[f64], want: usize) -> Result<()> {
    if values.len() != want {
        return Err(Error::invalid(format!(
            "{name} has length {}, expected {want}",
            values.len()
        )));
    }
    ensure_finite(name, values)
}

fn ensure_image(image: &CameraImage) -> Result<()> {
    if image.is_conforming() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "image must be {}x{}x{}",
            crate::episodes::IMAGE_WIDTH,
            crate::episodes::IMAGE_HEIGHT,
            crate::episodes::IMAGE_CHANNELS
        )))
    }
}

fn ensure_grid(grid: &VoxelGrid) -> Result<()> {
    if grid.dims() == GRID_DIMS {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "voxel grid has shape {:?}, the policy expects {:?}",
            grid.dims(),
            GRID_DIMS
        )))
    }
}

/// Encodes a camera image to an `embed_dim` vector.
///
/// Pixel bytes are rescaled to [0, 1] internally.
///
/// # Errors
/// [`Error::InvalidInput`] if the image is not 224x224x3 or the config has
/// no image branch.
pub fn encode_image(image: &CameraImage, params: &ModelParams) -> Result<Vec<f64>> {
    let cfg = params.config();
    if !cfg.modality.uses_image() {
        return Err(Error::invalid(format!(
            "modality {} has no image encoder",
            cfg.modality
        )));
    }
    ensure_image(image)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let img = tape.leaf(images_tensor(&[image]));
    let emb = graph::image_encoder(&mut tape, &bound, cfg, img);
    let out = tape.value(emb).data().to_vec();
    ensure_finite("image embedding", &out)?;
    Ok(out)
}

/// Encodes a voxel grid to an `embed_dim` vector.
///
/// # Errors
/// [`Error::InvalidInput`] if the grid is not 160x120x50 cells or the config
/// has no point-cloud branch.
pub fn encode_pointcloud(grid: &VoxelGrid, params: &ModelParams) -> Result<Vec<f64>> {
    let cfg = params.config();
    if !cfg.modality.uses_pointcloud() {
        return Err(Error::invalid(format!(
            "modality {} has no point-cloud encoder",
            cfg.modality
        )));
    }
    ensure_grid(grid)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let occupied = occupied_lists(&[grid]);
    let emb = graph::voxel_encoder(&mut tape, &bound, cfg, &occupied);
    let out = tape.value(emb).data().to_vec();
    ensure_finite("point-cloud embedding", &out)?;
    Ok(out)
}

/// Advances one recurrent unit a single step.
///
/// The input is the modality embedding concatenated with the goal. Returns
/// `(hidden, new_state)`; for a gated recurrent unit these coincide, and the
/// state should start at zeros for the single-frame history used here.
///
/// # Errors
/// [`Error::InvalidInput`] for length mismatches, non-finite inputs, or a
/// branch the config does not instantiate.
pub fn temporal_encode(
    embedding: &[f64],
    goal: [f64; 2],
    state: &[f64],
    branch: Branch,
    params: &ModelParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = params.config();
    let prefix = match branch {
        Branch::Image => {
            if !cfg.modality.uses_image() {
                return Err(Error::invalid(format!(
                    "modality {} has no image recurrent unit",
                    cfg.modality
                )));
            }
            "theta.rnn.img"
        }
        Branch::Pointcloud => {
            if !cfg.modality.uses_pointcloud() {
                return Err(Error::invalid(format!(
                    "modality {} has no point-cloud recurrent unit",
                    cfg.modality
                )));
            }
            "theta.rnn.vox"
        }
    };
    ensure_len("embedding", embedding, cfg.embed_dim)?;
    ensure_len("state", state, cfg.rnn_hidden)?;
    ensure_finite("goal", &goal)?;

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let mut xdata = embedding.to_vec();
    xdata.extend_from_slice(&goal);
    let x = tape.leaf(Tensor::from_vec(&[1, cfg.embed_dim + 2], xdata));
    let h = tape.leaf(Tensor::from_vec(&[1, cfg.rnn_hidden], state.to_vec()));
    let hid = graph::gru_step(&mut tape, &bound, prefix, x, h);
    let out = tape.value(hid).data().to_vec();
    ensure_finite("hidden state", &out)?;
    Ok((out.clone(), out))
}

/// Fuses the two modality hidden states.
///
/// Returns `(global_stage, local_stage)`: the first fused vector feeds the
/// waypoint head, the second — from an independently parameterized block —
/// feeds the velocity pathway.
///
/// # Errors
/// [`Error::InvalidInput`] unless the config is multimodal and both hiddens
/// have length `rnn_hidden`.
pub fn fuse(
    hidden_pc: &[f64],
    hidden_img: &[f64],
    params: &ModelParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = params.config();
    if cfg.modality != Modality::Multimodal {
        return Err(Error::invalid(format!(
            "modality {} has no fusion blocks",
            cfg.modality
        )));
    }
    ensure_len("point-cloud hidden", hidden_pc, cfg.rnn_hidden)?;
    ensure_len("image hidden", hidden_img, cfg.rnn_hidden)?;

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let hv = tape.leaf(Tensor::from_vec(&[1, cfg.rnn_hidden], hidden_pc.to_vec()));
    let hi = tape.leaf(Tensor::from_vec(&[1, cfg.rnn_hidden], hidden_img.to_vec()));
    let g = graph::fusion_block(&mut tape, &bound, "theta.fuse_g", hv, hi);
    let l = graph::fusion_block(&mut tape, &bound, "phi.fuse_l", hv, hi);
    let g = tape.value(g).data().to_vec();
    let l = tape.value(l).data().to_vec();
    ensure_finite("fused global stage", &g)?;
    ensure_finite("fused local stage", &l)?;
    Ok((g, l))
}

/// Decodes a hidden state into the five-waypoint global plan.
///
/// # Errors
/// [`Error::InvalidInput`] for wrong hidden length or non-finite input.
pub fn global_head(hidden: &[f64], params: &ModelParams) -> Result<[[f64; 2]; 5]> {
    let cfg = params.config();
    ensure_len("hidden", hidden, cfg.rnn_hidden)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let h = tape.leaf(Tensor::from_vec(&[1, cfg.rnn_hidden], hidden.to_vec()));
    let wp = graph::global_head_graph(&mut tape, &bound, h);
    let flat = tape.value(wp).data();
    ensure_finite("waypoints", flat)?;
    let mut out = [[0.0; 2]; 5];
    for (i, w) in out.iter_mut().enumerate() {
        *w = [flat[2 * i], flat[2 * i + 1]];
    }
    Ok(out)
}

/// Decodes the velocity command from a hidden state and the predicted
/// waypoints (waypoint embedding and hidden state form the two transformer
/// tokens).
///
/// # Errors
/// [`Error::InvalidInput`] for wrong hidden length or non-finite input.
pub fn local_head(
    hidden: &[f64],
    waypoints: &[[f64; 2]; 5],
    params: &ModelParams,
) -> Result<(f64, f64)> {
    let cfg = params.config();
    ensure_len("hidden", hidden, cfg.rnn_hidden)?;
    let flat_wp: Vec<f64> = waypoints.iter().flatten().copied().collect();
    ensure_finite("waypoints", &flat_wp)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let h = tape.leaf(Tensor::from_vec(&[1, cfg.rnn_hidden], hidden.to_vec()));
    let wp = tape.leaf(Tensor::from_vec(&[1, 10], flat_wp));
    let act = graph::local_pathway(&mut tape, &bound, cfg, wp, h);
    let out = tape.value(act).data();
    ensure_finite("action", out)?;
    Ok((out[0], out[1]))
}

/// Runs the full policy on one input.
///
/// Sensor fields the modality does not use are ignored. The waypoints come
/// from the global pathway; the action comes from the local pathway
/// consuming those waypoints.
///
/// # Errors
/// [`Error::InvalidInput`] when `config` disagrees with the parameters or a
/// used sensor input has the wrong shape; [`Error::Validation`] for an
/// invalid config.
pub fn forward(
    input: &NavigationInput,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<NetworkOutput> {
    config.validate()?;
    if config != params.config() {
        return Err(Error::invalid(
            "config does not match the one the parameters were built for",
        ));
    }
    ensure_finite("goal", &input.goal)?;
    if config.modality.uses_image() {
        ensure_image(&input.image)?;
    }
    if config.modality.uses_pointcloud() {
        ensure_grid(&input.voxels)?;
    }

    let batch = BatchInput {
        images: config
            .modality
            .uses_image()
            .then(|| images_tensor(&[&input.image])),
        occupied: config
            .modality
            .uses_pointcloud()
            .then(|| occupied_lists(&[&input.voxels])),
        goals: Tensor::from_vec(&[1, 2], input.goal.to_vec()),
        batch: 1,
    };
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let (wp, act) = forward_graph(&mut tape, &bound, config, &batch);
    let flat = tape.value(wp).data();
    ensure_finite("waypoints", flat)?;
    let act = tape.value(act).data();
    ensure_finite("action", act)?;
    let mut waypoints = [[0.0; 2]; 5];
    for (i, w) in waypoints.iter_mut().enumerate() {
        *w = [flat[2 * i], flat[2 * i + 1]];
    }
    Ok(NetworkOutput { waypoints, action: (act[0], act[1]) })
}
