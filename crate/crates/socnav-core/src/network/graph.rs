//! Forward-graph construction shared by training and the public single
//! -sample operations.
//!
//! The information flow: each present modality is encoded to `embed_dim`,
//! concatenated with the goal, and stepped once through that modality's GRU
//! from a zero state. Unimodal variants feed the hidden state directly to
//! both pathways; the multimodal variant fuses the two hidden states twice
//! with independent blocks (the first feeds the waypoint head and belongs to
//! the global planner, the second feeds the local pathway). The local
//! pathway embeds the predicted waypoints, runs a two-token transformer over
//! [waypoint embedding, local hidden], and regresses (v, omega).

use super::params::{ModelParams, IMG_CONV_K, IMG_STEM_K, PAPER_BLOCKS, PAPER_STAGES, VOX_PATCH};
use super::{ModelConfig, Modality, Scale};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::episodes::CameraImage;
use crate::voxelizer::VoxelGrid;

/// Leaky-relu slope used throughout the network.
pub(crate) const LEAK: f64 = 0.01;
/// Layer-norm epsilon.
const LN_EPS: f64 = 1e-5;
/// Voxel grid shape every encoder config assumes.
pub(crate) const GRID_DIMS: (usize, usize, usize) = (160, 120, 50);

/// One batch of network inputs, already converted to tensors.
pub(crate) struct BatchInput {
    /// `[B, 224, 224, 3]`, values in [0, 1]. Present iff the modality uses
    /// the camera.
    pub images: Option<Tensor>,
    /// Occupied voxel indices per sample. Present iff the modality uses the
    /// lidar.
    pub occupied: Option<Vec<Vec<u32>>>,
    /// `[B, 2]` goals in the robot frame.
    pub goals: Tensor,
    pub batch: usize,
}

/// Builds the image tensor for a batch (rescales bytes to [0, 1]).
pub(crate) fn images_tensor(images: &[&CameraImage]) -> Tensor {
    let b = images.len();
    let mut data = Vec::with_capacity(b * 224 * 224 * 3);
    for img in images {
        debug_assert!(img.is_conforming());
        data.extend(img.data().iter().map(|&v| v as f64 / 255.0));
    }
    Tensor::from_vec(&[b, 224, 224, 3], data)
}

/// Collects occupied-cell lists for a batch.
pub(crate) fn occupied_lists(grids: &[&VoxelGrid]) -> Vec<Vec<u32>> {
    grids.iter().map(|g| g.occupied().to_vec()).collect()
}

/// Parameter nodes bound onto a tape, ordered like the entry table.
pub(crate) struct Bound<'p> {
    params: &'p ModelParams,
    ids: Vec<NodeId>,
}

impl<'p> Bound<'p> {
    pub fn node(&self, name: &str) -> NodeId {
        self.ids[self.params.index_of(name)]
    }

    /// Node ids in entry order (aligned with `params.entries()`).
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Pushes every parameter onto the tape as a gradient leaf.
pub(crate) fn bind_params<'p>(tape: &mut Tape, params: &'p ModelParams) -> Bound<'p> {
    let ids = params.entries().iter().map(|e| tape.param(e.tensor.clone())).collect();
    Bound { params, ids }
}

fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let w = bound.node(&format!("{prefix}.w"));
    let b = bound.node(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn mlp2(tape: &mut Tape, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let h = linear(tape, bound, &format!("{prefix}.l1"), x);
    let h = tape.leaky_relu(h, LEAK);
    linear(tape, bound, &format!("{prefix}.l2"), h)
}

fn conv(tape: &mut Tape, bound: &Bound, prefix: &str, x: NodeId, k: usize, s: usize, p: usize) -> NodeId {
    let w = bound.node(&format!("{prefix}.w"));
    let b = bound.node(&format!("{prefix}.b"));
    tape.conv2d(x, w, b, k, s, p)
}

fn conv3(tape: &mut Tape, bound: &Bound, prefix: &str, x: NodeId, k: usize, s: usize, p: usize) -> NodeId {
    let w = bound.node(&format!("{prefix}.w"));
    let b = bound.node(&format!("{prefix}.b"));
    tape.conv3d(x, w, b, k, s, p)
}

/// Image branch: `[B, 224, 224, 3]` in [0,1] -> `[B, embed_dim]`.
pub(crate) fn image_encoder(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, img: NodeId) -> NodeId {
    match cfg.scale {
        Scale::Desk => {
            let x = tape.avg_pool2d(img, 2);
            let x = conv(tape, bound, "theta.img.stem", x, IMG_STEM_K, IMG_STEM_K, 0);
            let mut x = tape.leaky_relu(x, LEAK);
            if cfg.img_channels.len() >= 2 {
                let r = conv(tape, bound, "theta.img.res.c1", x, IMG_CONV_K, 1, 1);
                let r = tape.leaky_relu(r, LEAK);
                let r = conv(tape, bound, "theta.img.res.c2", r, IMG_CONV_K, 1, 1);
                let sum = tape.add(x, r);
                x = tape.leaky_relu(sum, LEAK);
                for i in 1..cfg.img_channels.len() {
                    let y = conv(tape, bound, &format!("theta.img.conv{i}"), x, IMG_CONV_K, 2, 1);
                    x = tape.leaky_relu(y, LEAK);
                }
            }
            let pooled = tape.global_mean_spatial(x);
            linear(tape, bound, "theta.img.proj", pooled)
        }
        Scale::Paper => {
            let x = conv(tape, bound, "theta.img.rs.stem", img, 7, 2, 3);
            let x = tape.leaky_relu(x, LEAK);
            let mut x = tape.avg_pool2d(x, 2);
            let mut cin = PAPER_STAGES[0];
            for (s, &cout) in PAPER_STAGES.iter().enumerate() {
                for b in 0..PAPER_BLOCKS {
                    let p = format!("theta.img.rs.s{s}b{b}");
                    let stride = if b == 0 && s > 0 { 2 } else { 1 };
                    let block_in = if b == 0 { cin } else { cout };
                    let y = conv(tape, bound, &format!("{p}.c1"), x, 3, stride, 1);
                    let y = tape.leaky_relu(y, LEAK);
                    let y = conv(tape, bound, &format!("{p}.c2"), y, 3, 1, 1);
                    let shortcut = if b == 0 && (s > 0 || block_in != cout) {
                        conv(tape, bound, &format!("{p}.ds"), x, 1, stride, 0)
                    } else {
                        x
                    };
                    let sum = tape.add(shortcut, y);
                    x = tape.leaky_relu(sum, LEAK);
                }
                cin = cout;
            }
            let pooled = tape.global_mean_spatial(x);
            linear(tape, bound, "theta.img.rs.proj", pooled)
        }
    }
}

/// Voxel branch: occupied-cell lists -> `[B, embed_dim]`.
pub(crate) fn voxel_encoder(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    occupied: &[Vec<u32>],
) -> NodeId {
    let mut x = match cfg.scale {
        Scale::Desk => {
            let w = bound.node("theta.vox.stem.w");
            let b = bound.node("theta.vox.stem.b");
            let stem = tape.voxel_stem(w, b, occupied.to_vec(), GRID_DIMS, VOX_PATCH);
            let mut x = tape.leaky_relu(stem, LEAK);
            for i in 1..cfg.vox_channels.len() {
                let y = conv3(tape, bound, &format!("theta.vox.conv{i}"), x, 2, 2, 0);
                x = tape.leaky_relu(y, LEAK);
            }
            x
        }
        Scale::Paper => {
            // Dense occupancy; paper scale is instantiation-tested only.
            let (dx, dy, dz) = GRID_DIMS;
            let b = occupied.len();
            let mut dense = vec![0.0; b * dx * dy * dz];
            for (bi, occ) in occupied.iter().enumerate() {
                for &lin in occ {
                    dense[bi * dx * dy * dz + lin as usize] = 1.0;
                }
            }
            let xin = tape.leaf(Tensor::from_vec(&[b, dx, dy, dz, 1], dense));
            let y = conv3(tape, bound, "theta.vox.dense.c0", xin, 5, 2, 2);
            let mut x = tape.leaky_relu(y, LEAK);
            for i in 1..cfg.vox_channels.len() {
                let y = conv3(tape, bound, &format!("theta.vox.dense.c{i}"), x, 3, 2, 1);
                x = tape.leaky_relu(y, LEAK);
            }
            x
        }
    };
    x = tape.global_mean_spatial(x);
    linear(tape, bound, "theta.vox.proj", x)
}

/// One GRU step: `x [B, D]`, `h [B, H]` -> `[B, H]`.
pub(crate) fn gru_step(tape: &mut Tape, bound: &Bound, prefix: &str, x: NodeId, h: NodeId) -> NodeId {
    let hidden = tape.value(h).shape()[1];
    let xh = tape.concat_cols(&[x, h]);
    let zr_lin = linear_pair(tape, bound, &format!("{prefix}.wzr"), &format!("{prefix}.bzr"), xh);
    let zr = tape.sigmoid(zr_lin);
    let z = tape.slice_cols(zr, 0, hidden);
    let r = tape.slice_cols(zr, hidden, 2 * hidden);
    let rh = tape.mul(r, h);
    let xrh = tape.concat_cols(&[x, rh]);
    let n_lin = linear_pair(tape, bound, &format!("{prefix}.wn"), &format!("{prefix}.bn"), xrh);
    let n = tape.tanh(n_lin);
    // h' = (1 - z) * h + z * n, written as h - z*h + z*n.
    let zh = tape.mul(z, h);
    let zn = tape.mul(z, n);
    let hmzh = tape.sub(h, zh);
    tape.add(hmzh, zn)
}

fn linear_pair(tape: &mut Tape, bound: &Bound, wname: &str, bname: &str, x: NodeId) -> NodeId {
    let w = bound.node(wname);
    let b = bound.node(bname);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Fusion block: concat([pointcloud hidden, image hidden]) -> `[B, H]`.
pub(crate) fn fusion_block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    h_vox: NodeId,
    h_img: NodeId,
) -> NodeId {
    let cat = tape.concat_cols(&[h_vox, h_img]);
    let y = linear(tape, bound, &format!("{prefix}.l1"), cat);
    let y = tape.leaky_relu(y, LEAK);
    linear(tape, bound, &format!("{prefix}.l2"), y)
}

/// Waypoint head: `[B, H]` -> `[B, 10]`.
pub(crate) fn global_head_graph(tape: &mut Tape, bound: &Bound, hidden: NodeId) -> NodeId {
    let y = linear(tape, bound, "theta.head_g.l1", hidden);
    let y = tape.leaky_relu(y, LEAK);
    linear(tape, bound, "theta.head_g.l2", y)
}

fn transformer_layer(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    tokens: NodeId,
) -> NodeId {
    let p = format!("phi.tf.l{layer}");
    let heads = cfg.tf_heads;
    let dh = cfg.rnn_hidden / heads;

    let q = linear(tape, bound, &format!("{p}.attn.q"), tokens);
    let k = linear(tape, bound, &format!("{p}.attn.k"), tokens);
    let v = linear(tape, bound, &format!("{p}.attn.v"), tokens);
    let qh = tape.split_heads(q, 2, heads);
    let kh = tape.split_heads(k, 2, heads);
    let vh = tape.split_heads(v, 2, heads);
    let scores = tape.bmm(qh, kh, true);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax_last(scores);
    let ctx = tape.bmm(probs, vh, false);
    let merged = tape.merge_heads(ctx, 2, heads);
    let o = linear(tape, bound, &format!("{p}.attn.o"), merged);

    let res1 = tape.add(tokens, o);
    let g1 = bound.node(&format!("{p}.ln1.g"));
    let b1 = bound.node(&format!("{p}.ln1.b"));
    let normed = tape.layer_norm(res1, g1, b1, LN_EPS);

    let f = linear(tape, bound, &format!("{p}.ffn.l1"), normed);
    let f = tape.leaky_relu(f, LEAK);
    let f = linear(tape, bound, &format!("{p}.ffn.l2"), f);
    let res2 = tape.add(normed, f);
    let g2 = bound.node(&format!("{p}.ln2.g"));
    let b2 = bound.node(&format!("{p}.ln2.b"));
    tape.layer_norm(res2, g2, b2, LN_EPS)
}

/// Local pathway: predicted waypoints `[B, 10]` and local hidden `[B, H]`
/// -> actions `[B, 2]`.
pub(crate) fn local_pathway(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    waypoints: NodeId,
    hidden: NodeId,
) -> NodeId {
    let b = tape.value(hidden).shape()[0];
    let we = mlp2(tape, bound, "phi.wp", waypoints);
    let mut tokens = tape.stack_rows(&[we, hidden]);
    let pos = bound.node("phi.tf.pos");
    tokens = tape.add_row_periodic(tokens, pos);
    for l in 0..cfg.tf_layers {
        tokens = transformer_layer(tape, bound, cfg, l, tokens);
    }
    let flat = tape.reshape(tokens, &[b, 2 * cfg.rnn_hidden]);
    let y = linear(tape, bound, "phi.head_l.l1", flat);
    let y = tape.leaky_relu(y, LEAK);
    linear(tape, bound, "phi.head_l.l2", y)
}

/// Full policy forward pass; returns (waypoints `[B, 10]`, actions `[B, 2]`).
pub(crate) fn forward_graph(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    input: &BatchInput,
) -> (NodeId, NodeId) {
    let b = input.batch;
    let goal = tape.leaf(input.goals.clone());
    let zero_state = tape.leaf(Tensor::zeros(&[b, cfg.rnn_hidden]));

    let mut h_img = None;
    if cfg.modality.uses_image() {
        let img = tape.leaf(input.images.clone().expect("image batch missing"));
        let e = image_encoder(tape, bound, cfg, img);
        let x = tape.concat_cols(&[e, goal]);
        h_img = Some(gru_step(tape, bound, "theta.rnn.img", x, zero_state));
    }
    let mut h_vox = None;
    if cfg.modality.uses_pointcloud() {
        let occ = input.occupied.as_ref().expect("voxel batch missing");
        let e = voxel_encoder(tape, bound, cfg, occ);
        let x = tape.concat_cols(&[e, goal]);
        h_vox = Some(gru_step(tape, bound, "theta.rnn.vox", x, zero_state));
    }

    let (g_hidden, l_hidden) = match cfg.modality {
        Modality::Rgb => {
            let h = h_img.expect("rgb modality requires images");
            (h, h)
        }
        Modality::Lidar => {
            let h = h_vox.expect("lidar modality requires voxels");
            (h, h)
        }
        Modality::Multimodal => {
            let hv = h_vox.expect("multimodal requires voxels");
            let hi = h_img.expect("multimodal requires images");
            (
                fusion_block(tape, bound, "theta.fuse_g", hv, hi),
                fusion_block(tape, bound, "phi.fuse_l", hv, hi),
            )
        }
    };

    let wp = global_head_graph(tape, bound, g_hidden);
    let act = local_pathway(tape, bound, cfg, wp, l_hidden);
    (wp, act)
}
