//! Demonstration episodes: in-memory types, validity rules, and the on-disk
//! layout.
//!
//! An episode is a fixed-rate recording of one navigation run: per frame a
//! lidar point cloud, a camera image, the robot odometry pose, and the
//! velocity command the demonstrator issued at that instant.
//!
//! # Disk layout
//!
//! `save_episode` writes one directory per episode:
//!
//! ```text
//! <id>/
//!   meta.json          id, scenario, rate_hz, n_frames, format_version
//!   frames.idx         one text line per frame:
//!                      stamp v omega odom_x odom_y odom_theta n_points
//!   frame_000000.pts   little-endian f32 x,y,z triplets
//!   frame_000000.img   raw RGB bytes, 224x224x3, row-major
//!   ...
//! ```
//!
//! Floats in `frames.idx` are written with Rust's shortest round-trip
//! formatting, so a save/load cycle reproduces every `f64` bit-exactly.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera image width in pixels.
pub const IMAGE_WIDTH: usize = 224;
/// Camera image height in pixels.
pub const IMAGE_HEIGHT: usize = 224;
/// Camera image channel count (RGB).
pub const IMAGE_CHANNELS: usize = 3;
/// Byte length of a conforming image buffer.
pub const IMAGE_BYTES: usize = IMAGE_WIDTH * IMAGE_HEIGHT * IMAGE_CHANNELS;

/// Version tag written to `meta.json`.
pub const FORMAT_VERSION: &str = "1";

/// Planar robot pose with the time it was observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, counterclockwise from +x.
    pub theta: f64,
    /// Seconds since episode start.
    pub stamp: f64,
}

/// Commanded linear and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityCommand {
    /// Linear velocity, m/s.
    pub v: f64,
    /// Angular velocity, rad/s, counterclockwise positive.
    pub omega: f64,
}

/// Robot velocity envelope used for validation and by the planners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for VelocityLimits {
    fn default() -> Self {
        VelocityLimits { v_max: 2.0, omega_max: 1.5 }
    }
}

/// Row-major interleaved RGB image.
///
/// Dimensions are carried at runtime so an episode holding a wrongly sized
/// image is representable and reported by [`validate_episode`] rather than
/// being unconstructible.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl CameraImage {
    /// Builds an image from raw bytes. `data.len()` must equal
    /// `width * height * channels`.
    ///
    /// # Errors
    /// Returns [`Error::InvalidInput`] on a length mismatch.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(CameraImage { width, height, channels, data })
    }

    /// Builds a conforming 224x224x3 image from raw bytes.
    ///
    /// # Errors
    /// Returns [`Error::InvalidInput`] unless `data.len() == IMAGE_BYTES`.
    pub fn rgb224(data: Vec<u8>) -> Result<Self> {
        Self::new(IMAGE_WIDTH, IMAGE_HEIGHT, IMAGE_CHANNELS, data)
    }

    /// A conforming image filled with one color.
    pub fn uniform(r: u8, g: u8, b: u8) -> Self {
        let mut data = Vec::with_capacity(IMAGE_BYTES);
        for _ in 0..IMAGE_WIDTH * IMAGE_HEIGHT {
            data.extend_from_slice(&[r, g, b]);
        }
        CameraImage { width: IMAGE_WIDTH, height: IMAGE_HEIGHT, channels: IMAGE_CHANNELS, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// True when the dimensions are exactly 224x224x3.
    pub fn is_conforming(&self) -> bool {
        self.width == IMAGE_WIDTH && self.height == IMAGE_HEIGHT && self.channels == IMAGE_CHANNELS
    }

    /// Pixel at `(row, col)`; panics out of bounds or on non-RGB layouts.
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        assert_eq!(self.channels, 3, "pixel() requires an RGB image");
        let at = (row * self.width + col) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    /// Sets the pixel at `(row, col)`; panics out of bounds or on non-RGB
    /// layouts.
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        assert_eq!(self.channels, 3, "set_pixel() requires an RGB image");
        let at = (row * self.width + col) * 3;
        self.data[at..at + 3].copy_from_slice(&rgb);
    }
}

/// One synchronized sensor/action snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Seconds since episode start; equals `odom.stamp`.
    pub stamp: f64,
    /// Lidar returns in the robot frame, meters.
    pub points: Vec<[f32; 3]>,
    pub image: CameraImage,
    /// Robot pose in the episode's fixed world frame.
    pub odom: Pose2D,
    /// Velocity command issued at this frame.
    pub action: VelocityCommand,
}

/// A complete demonstration recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Unique name; also the directory name on disk. Characters are limited
    /// to `[A-Za-z0-9._-]`.
    pub id: String,
    /// Scenario label, e.g. `"street_crossing"`.
    pub scenario: String,
    /// Recording rate in Hz.
    pub rate_hz: f64,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    id: String,
    scenario: String,
    rate_hz: f64,
    n_frames: usize,
    format_version: String,
}

fn id_is_clean(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-')
        && id != "."
        && id != ".."
}

/// Checks every episode validity rule and returns one line per violation.
/// An empty vector means the episode is valid.
///
/// Rules: clean id, non-empty scenario, positive finite rate, at least one
/// frame, strictly increasing stamps, `stamp == odom.stamp` per frame, finite
/// poses, finite points, conforming 224x224x3 images, and finite actions
/// within [`VelocityLimits::default`].
pub fn validate_episode(ep: &Episode) -> Vec<String> {
    let mut violations = Vec::new();
    let limits = VelocityLimits::default();

    if !id_is_clean(&ep.id) {
        violations.push(format!("id {:?} is empty or contains characters outside [A-Za-z0-9._-]", ep.id));
    }
    if ep.scenario.is_empty() {
        violations.push("scenario is empty".to_string());
    }
    if !(ep.rate_hz.is_finite() && ep.rate_hz > 0.0) {
        violations.push(format!("rate_hz {} is not a positive finite number", ep.rate_hz));
    }
    if ep.frames.is_empty() {
        violations.push("episode has no frames".to_string());
    }

    for (k, frame) in ep.frames.iter().enumerate() {
        if !frame.stamp.is_finite() {
            violations.push(format!("frame {k}: stamp {} is not finite", frame.stamp));
        }
        if k > 0 {
            let prev = ep.frames[k - 1].stamp;
            if !(frame.stamp > prev) {
                violations.push(format!(
                    "frame {k}: stamp {} does not increase over previous {}",
                    frame.stamp, prev
                ));
            }
        }
        if frame.stamp != frame.odom.stamp {
            violations.push(format!(
                "frame {k}: stamp {} differs from odom.stamp {}",
                frame.stamp, frame.odom.stamp
            ));
        }
        let p = &frame.odom;
        if !(p.x.is_finite() && p.y.is_finite() && p.theta.is_finite()) {
            violations.push(format!("frame {k}: odometry pose has non-finite fields"));
        }
        if let Some(i) = frame.points.iter().position(|q| !q.iter().all(|c| c.is_finite())) {
            violations.push(format!("frame {k}: point {i} has a non-finite coordinate"));
        }
        if !frame.image.is_conforming() {
            violations.push(format!(
                "frame {k}: image dimensions {}x{}x{} differ from {}x{}x{}",
                frame.image.width,
                frame.image.height,
                frame.image.channels,
                IMAGE_WIDTH,
                IMAGE_HEIGHT,
                IMAGE_CHANNELS
            ));
        }
        let a = &frame.action;
        if !(a.v.is_finite() && a.omega.is_finite()) {
            violations.push(format!("frame {k}: action has non-finite fields"));
        } else if a.v.abs() > limits.v_max || a.omega.abs() > limits.omega_max {
            violations.push(format!(
                "frame {k}: action ({}, {}) exceeds limits (v_max {}, omega_max {})",
                a.v, a.omega, limits.v_max, limits.omega_max
            ));
        }
    }

    violations
}

fn frame_pts_name(k: usize) -> String {
    format!("frame_{k:06}.pts")
}

fn frame_img_name(k: usize) -> String {
    format!("frame_{k:06}.img")
}

/// Writes `ep` under `dir/<ep.id>/` and returns that directory.
///
/// The episode is validated first; an already existing target directory is
/// overwritten file-by-file (no stale frames are cleaned up, so callers
/// should hand a fresh directory for differently sized episodes).
///
/// # Errors
/// [`Error::Validation`] when the episode breaks a validity rule, otherwise
/// [`Error::Io`] on filesystem failures.
pub fn save_episode(ep: &Episode, dir: &Path) -> Result<PathBuf> {
    let violations = validate_episode(ep);
    if !violations.is_empty() {
        return Err(Error::Validation { violations });
    }

    let ep_dir = dir.join(&ep.id);
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;

    let meta = EpisodeMeta {
        id: ep.id.clone(),
        scenario: ep.scenario.clone(),
        rate_hz: ep.rate_hz,
        n_frames: ep.frames.len(),
        format_version: FORMAT_VERSION.to_string(),
    };
    let meta_path = ep_dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::format(&meta_path, format!("meta serialization failed: {e}")))?;
    fs::write(&meta_path, meta_json.as_bytes()).map_err(|e| Error::io(&meta_path, e))?;

    let idx_path = ep_dir.join("frames.idx");
    let mut idx = BufWriter::new(fs::File::create(&idx_path).map_err(|e| Error::io(&idx_path, e))?);
    for frame in &ep.frames {
        writeln!(
            idx,
            "{} {} {} {} {} {} {}",
            frame.stamp,
            frame.action.v,
            frame.action.omega,
            frame.odom.x,
            frame.odom.y,
            frame.odom.theta,
            frame.points.len()
        )
        .map_err(|e| Error::io(&idx_path, e))?;
    }
    idx.flush().map_err(|e| Error::io(&idx_path, e))?;

    for (k, frame) in ep.frames.iter().enumerate() {
        let pts_path = ep_dir.join(frame_pts_name(k));
        let mut pts =
            BufWriter::new(fs::File::create(&pts_path).map_err(|e| Error::io(&pts_path, e))?);
        for p in &frame.points {
            for c in p {
                pts.write_all(&c.to_le_bytes()).map_err(|e| Error::io(&pts_path, e))?;
            }
        }
        pts.flush().map_err(|e| Error::io(&pts_path, e))?;

        let img_path = ep_dir.join(frame_img_name(k));
        fs::write(&img_path, frame.image.data()).map_err(|e| Error::io(&img_path, e))?;
    }

    Ok(ep_dir)
}

fn parse_idx_line(path: &Path, lineno: usize, line: &str) -> Result<(f64, f64, f64, Pose2D, usize)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(Error::format(
            path,
            format!("frames.idx line {lineno}: expected 7 fields, found {}", fields.len()),
        ));
    }
    let mut nums = [0.0f64; 6];
    for (slot, field) in nums.iter_mut().zip(&fields[..6]) {
        *slot = field.parse::<f64>().map_err(|e| {
            Error::format(path, format!("frames.idx line {lineno}: bad float {field:?}: {e}"))
        })?;
    }
    let n_points = fields[6].parse::<usize>().map_err(|e| {
        Error::format(path, format!("frames.idx line {lineno}: bad point count {:?}: {e}", fields[6]))
    })?;
    let [stamp, v, omega, x, y, theta] = nums;
    Ok((stamp, v, omega, Pose2D { x, y, theta, stamp }, n_points))
}

/// Reads an episode directory written by [`save_episode`]. Never mutates the
/// directory.
///
/// # Errors
/// [`Error::Format`] when a file is missing, malformed, or inconsistent with
/// `meta.json` (including wrong image byte counts), or when the assembled
/// episode fails validation; [`Error::Io`] on read failures.
pub fn load_episode(dir: &Path) -> Result<Episode> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: EpisodeMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(&meta_path, format!("bad meta.json: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported format_version {:?}, expected {FORMAT_VERSION:?}", meta.format_version),
        ));
    }

    let idx_path = dir.join("frames.idx");
    let idx_text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let lines: Vec<&str> = idx_text.lines().collect();
    if lines.len() != meta.n_frames {
        return Err(Error::format(
            &idx_path,
            format!("frames.idx has {} lines but meta.json declares {}", lines.len(), meta.n_frames),
        ));
    }

    let mut frames = Vec::with_capacity(meta.n_frames);
    for (k, line) in lines.iter().enumerate() {
        let (stamp, v, omega, odom, n_points) = parse_idx_line(&idx_path, k + 1, line)?;

        let pts_path = dir.join(frame_pts_name(k));
        let mut pts_file = fs::File::open(&pts_path).map_err(|e| Error::io(&pts_path, e))?;
        let mut pts_bytes = Vec::new();
        pts_file.read_to_end(&mut pts_bytes).map_err(|e| Error::io(&pts_path, e))?;
        let expected = n_points * 12;
        if pts_bytes.len() != expected {
            return Err(Error::format(
                &pts_path,
                format!("point file holds {} bytes, expected {expected} for {n_points} points", pts_bytes.len()),
            ));
        }
        let mut points = Vec::with_capacity(n_points);
        for chunk in pts_bytes.chunks_exact(12) {
            points.push([
                f32::from_le_bytes(chunk[0..4].try_into().unwrap()),
                f32::from_le_bytes(chunk[4..8].try_into().unwrap()),
                f32::from_le_bytes(chunk[8..12].try_into().unwrap()),
            ]);
        }

        let img_path = dir.join(frame_img_name(k));
        let img_bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        if img_bytes.len() != IMAGE_BYTES {
            return Err(Error::format(
                &img_path,
                format!("image file holds {} bytes, expected {IMAGE_BYTES}", img_bytes.len()),
            ));
        }
        let image = CameraImage::rgb224(img_bytes)?;

        frames.push(Frame { stamp, points, image, odom, action: VelocityCommand { v, omega } });
    }

    let ep = Episode { id: meta.id, scenario: meta.scenario, rate_hz: meta.rate_hz, frames };
    let violations = validate_episode(&ep);
    if !violations.is_empty() {
        return Err(Error::format(dir, format!("loaded episode is invalid: {}", violations.join("; "))));
    }
    Ok(ep)
}
