//! Parameter naming, shapes, initialization, and checkpoint serialization.
//!
//! Every learnable tensor has a dotted name. The first segment partitions
//! the model: `theta.*` belongs to the global planner (encoders, recurrent
//! units, first fusion block, waypoint head) and `phi.*` to the local
//! planner (waypoint embedder, second fusion block, transformer, velocity
//! head). Specs are generated from the [`ModelConfig`] in a fixed order, so
//! initialization is a deterministic function of (config, seed).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Modality, Scale};
use crate::error::{Error, Result};

/// Kernel/stride/padding of the desk-scale image patch stem.
pub(crate) const IMG_STEM_K: usize = 8;
/// Residual-stage kernel for desk-scale image convs.
pub(crate) const IMG_CONV_K: usize = 3;
/// Desk-scale voxel patch (matches a 160x120x50 grid -> 20x15x10 blocks).
pub(crate) const VOX_PATCH: (usize, usize, usize) = (8, 8, 5);
/// Channel widths of the paper-scale residual image encoder stages.
pub(crate) const PAPER_STAGES: [usize; 4] = [64, 128, 256, 512];
/// Blocks per paper-scale stage (the 18-layer variant).
pub(crate) const PAPER_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// Normal with std sqrt(2 / fan_in); for conv and MLP weights ahead of
    /// leaky-relu activations.
    Kaiming,
    /// Normal with std sqrt(1 / fan_in); for recurrent and output weights.
    Xavier,
    Zeros,
    Ones,
    /// Small normal (std 0.02); positional tables.
    Pos,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name: name.into(), shape: shape.to_vec(), init }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize, init: Init) {
    out.push(spec(format!("{prefix}.w"), &[d_in, d_out], init));
    out.push(spec(format!("{prefix}.b"), &[d_out], Init::Zeros));
}

fn image_specs(out: &mut Vec<ParamSpec>, cfg: &ModelConfig) {
    match cfg.scale {
        Scale::Desk => {
            let ch = &cfg.img_channels;
            linear_specs(out, "theta.img.stem", IMG_STEM_K * IMG_STEM_K * 3, ch[0], Init::Kaiming);
            if ch.len() >= 2 {
                let kk = IMG_CONV_K * IMG_CONV_K;
                linear_specs(out, "theta.img.res.c1", kk * ch[0], ch[0], Init::Kaiming);
                linear_specs(out, "theta.img.res.c2", kk * ch[0], ch[0], Init::Kaiming);
                for i in 1..ch.len() {
                    linear_specs(out, &format!("theta.img.conv{i}"), kk * ch[i - 1], ch[i], Init::Kaiming);
                }
            }
            linear_specs(out, "theta.img.proj", *ch.last().unwrap(), cfg.embed_dim, Init::Xavier);
        }
        Scale::Paper => {
            linear_specs(out, "theta.img.rs.stem", 7 * 7 * 3, PAPER_STAGES[0], Init::Kaiming);
            let mut cin = PAPER_STAGES[0];
            for (s, &cout) in PAPER_STAGES.iter().enumerate() {
                for b in 0..PAPER_BLOCKS {
                    let p = format!("theta.img.rs.s{s}b{b}");
                    let block_in = if b == 0 { cin } else { cout };
                    linear_specs(out, &format!("{p}.c1"), 9 * block_in, cout, Init::Kaiming);
                    linear_specs(out, &format!("{p}.c2"), 9 * cout, cout, Init::Kaiming);
                    let downsample = b == 0 && (s > 0 || block_in != cout);
                    if downsample {
                        linear_specs(out, &format!("{p}.ds"), block_in, cout, Init::Kaiming);
                    }
                }
                cin = cout;
            }
            linear_specs(out, "theta.img.rs.proj", cin, cfg.embed_dim, Init::Xavier);
        }
    }
}

fn voxel_specs(out: &mut Vec<ParamSpec>, cfg: &ModelConfig) {
    let ch = &cfg.vox_channels;
    match cfg.scale {
        Scale::Desk => {
            let pv = VOX_PATCH.0 * VOX_PATCH.1 * VOX_PATCH.2;
            linear_specs(out, "theta.vox.stem", pv, ch[0], Init::Kaiming);
            for i in 1..ch.len() {
                linear_specs(out, &format!("theta.vox.conv{i}"), 8 * ch[i - 1], ch[i], Init::Kaiming);
            }
        }
        Scale::Paper => {
            linear_specs(out, "theta.vox.dense.c0", 125, ch[0], Init::Kaiming);
            for i in 1..ch.len() {
                linear_specs(out, &format!("theta.vox.dense.c{i}"), 27 * ch[i - 1], ch[i], Init::Kaiming);
            }
        }
    }
    linear_specs(out, "theta.vox.proj", *ch.last().unwrap(), cfg.embed_dim, Init::Xavier);
}

fn gru_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, h: usize) {
    out.push(spec(format!("{prefix}.wzr"), &[d_in + h, 2 * h], Init::Xavier));
    out.push(spec(format!("{prefix}.bzr"), &[2 * h], Init::Zeros));
    out.push(spec(format!("{prefix}.wn"), &[d_in + h, h], Init::Xavier));
    out.push(spec(format!("{prefix}.bn"), &[h], Init::Zeros));
}

fn fusion_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    linear_specs(out, &format!("{prefix}.l1"), 2 * h, h, Init::Kaiming);
    linear_specs(out, &format!("{prefix}.l2"), h, h, Init::Xavier);
}

/// Hidden width of the two-layer output heads.
pub(crate) fn head_hidden(cfg: &ModelConfig) -> usize {
    (cfg.rnn_hidden / 2).max(4)
}

/// Full parameter table for a config, in deterministic order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.rnn_hidden;
    let hh = head_hidden(cfg);
    let mut out = Vec::new();

    if cfg.modality.uses_image() {
        image_specs(&mut out, cfg);
    }
    if cfg.modality.uses_pointcloud() {
        voxel_specs(&mut out, cfg);
    }
    let rnn_in = cfg.embed_dim + 2;
    if cfg.modality.uses_image() {
        gru_specs(&mut out, "theta.rnn.img", rnn_in, h);
    }
    if cfg.modality.uses_pointcloud() {
        gru_specs(&mut out, "theta.rnn.vox", rnn_in, h);
    }
    if cfg.modality == Modality::Multimodal {
        fusion_specs(&mut out, "theta.fuse_g", h);
        fusion_specs(&mut out, "phi.fuse_l", h);
    }

    linear_specs(&mut out, "theta.head_g.l1", h, hh, Init::Kaiming);
    linear_specs(&mut out, "theta.head_g.l2", hh, 10, Init::Xavier);

    linear_specs(&mut out, "phi.wp.l1", 10, h, Init::Kaiming);
    linear_specs(&mut out, "phi.wp.l2", h, h, Init::Xavier);
    out.push(spec("phi.tf.pos", &[2, h], Init::Pos));
    for l in 0..cfg.tf_layers {
        let p = format!("phi.tf.l{l}");
        linear_specs(&mut out, &format!("{p}.attn.q"), h, h, Init::Xavier);
        linear_specs(&mut out, &format!("{p}.attn.k"), h, h, Init::Xavier);
        linear_specs(&mut out, &format!("{p}.attn.v"), h, h, Init::Xavier);
        linear_specs(&mut out, &format!("{p}.attn.o"), h, h, Init::Xavier);
        out.push(spec(format!("{p}.ln1.g"), &[h], Init::Ones));
        out.push(spec(format!("{p}.ln1.b"), &[h], Init::Zeros));
        linear_specs(&mut out, &format!("{p}.ffn.l1"), h, 2 * h, Init::Kaiming);
        linear_specs(&mut out, &format!("{p}.ffn.l2"), 2 * h, h, Init::Xavier);
        out.push(spec(format!("{p}.ln2.g"), &[h], Init::Ones));
        out.push(spec(format!("{p}.ln2.b"), &[h], Init::Zeros));
    }
    linear_specs(&mut out, "phi.head_l.l1", 2 * h, hh, Init::Kaiming);
    linear_specs(&mut out, "phi.head_l.l2", hh, 2, Init::Xavier);

    out
}

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: crate::autodiff::Tensor,
}

/// Metadata stored alongside weights in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// The full learnable state of a policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

const CKPT_MAGIC: &[u8; 12] = b"SOCNAVCKPT1\n";

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<CkptTensor>,
}

impl ModelParams {
    /// Initializes parameters for `config` deterministically from `seed`.
    ///
    /// # Errors
    /// Propagates [`ModelConfig::validate`] failures.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for ps in param_specs(config) {
            let n: usize = ps.shape.iter().product();
            let fan_in = ps.shape[0] as f64;
            let data: Vec<f64> = match ps.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Kaiming | Init::Xavier | Init::Pos => {
                    let std = match ps.init {
                        Init::Kaiming => (2.0 / fan_in).sqrt(),
                        Init::Xavier => (1.0 / fan_in).sqrt(),
                        _ => 0.02,
                    };
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            index.insert(ps.name.clone(), entries.len());
            entries.push(ParamEntry {
                name: ps.name,
                tensor: crate::autodiff::Tensor::from_vec(&ps.shape, data),
            });
        }
        Ok(ModelParams { config: config.clone(), entries, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Adds `delta` to one scalar: element `element` of entry `entry`
    /// (entry order as in [`ModelParams::entries`]). Intended for
    /// finite-difference probes of the loss surface.
    ///
    /// # Panics
    /// If `entry` or `element` is out of range.
    pub fn perturb(&mut self, entry: usize, element: usize, delta: f64) {
        self.entries[entry].tensor.data_mut()[element] += delta;
    }

    pub(crate) fn index_of(&self, name: &str) -> usize {
        self.index[name]
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Names split into the global-planner and local-planner partitions.
    pub fn partition(&self) -> (Vec<&str>, Vec<&str>) {
        let mut theta = Vec::new();
        let mut phi = Vec::new();
        for e in &self.entries {
            if e.name.starts_with("theta.") {
                theta.push(e.name.as_str());
            } else {
                phi.push(e.name.as_str());
            }
        }
        (theta, phi)
    }

    /// Writes a self-describing checkpoint: magic, JSON header (version,
    /// config, metadata, tensor table), then raw little-endian f64 data.
    ///
    /// # Errors
    /// [`Error::Io`] on write failures.
    pub fn save_checkpoint(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        let header = CkptHeader {
            version: 1,
            config: self.config.clone(),
            meta,
            tensors: self
                .entries
                .iter()
                .map(|e| CkptTensor { name: e.name.clone(), shape: e.tensor.shape().to_vec() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::format(path, format!("header serialization failed: {e}")))?;
        let mut out = Vec::with_capacity(
            CKPT_MAGIC.len() + 8 + header_json.len() + self.scalar_count() * 8,
        );
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save_checkpoint`] and
    /// checks it structurally matches its embedded config.
    ///
    /// # Errors
    /// [`Error::Format`] for bad magic, version, or any structural mismatch;
    /// [`Error::Io`] on read failures.
    pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < CKPT_MAGIC.len() + 8 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(Error::format(path, "not a checkpoint file (bad magic)"));
        }
        let mut at = CKPT_MAGIC.len();
        let header_len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        if bytes.len() < at + header_len {
            return Err(Error::format(path, "truncated header"));
        }
        let header: CkptHeader = serde_json::from_slice(&bytes[at..at + header_len])
            .map_err(|e| Error::format(path, format!("bad header json: {e}")))?;
        at += header_len;
        if header.version != 1 {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", header.version)));
        }
        header.config.validate()?;

        let expected = param_specs(&header.config);
        if expected.len() != header.tensors.len() {
            return Err(Error::format(
                path,
                format!("tensor table has {} entries, config wants {}", header.tensors.len(), expected.len()),
            ));
        }
        for (spec, ct) in expected.iter().zip(&header.tensors) {
            if spec.name != ct.name || spec.shape != ct.shape {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {:?} shape {:?} does not match config expectation {:?} {:?}",
                        ct.name, ct.shape, spec.name, spec.shape
                    ),
                ));
            }
        }

        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if bytes.len() != at + total * 8 {
            return Err(Error::format(
                path,
                format!("data section holds {} bytes, expected {}", bytes.len() - at, total * 8),
            ));
        }
        let mut entries = Vec::with_capacity(header.tensors.len());
        let mut index = HashMap::new();
        for ct in header.tensors {
            let n: usize = ct.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
                at += 8;
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::format(
                    path,
                    format!("tensor {:?} contains non-finite values", ct.name),
                ));
            }
            index.insert(ct.name.clone(), entries.len());
            entries.push(ParamEntry {
                name: ct.name,
                tensor: crate::autodiff::Tensor::from_vec(&ct.shape, data),
            });
        }
        Ok((ModelParams { config: header.config, entries, index }, header.meta))
    }
}
