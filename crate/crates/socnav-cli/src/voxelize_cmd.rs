//! `socnav voxelize`: turn a raw point file into a voxel-grid dump.
//!
//! The input is the episode point format: little-endian f32 (x, y, z)
//! triplets, 12 bytes per point. The output `grid.vox` is the dense dump
//! (one byte per cell, linear index order); the occupied-cell count and
//! grid dimensions print to stdout.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use socnav_core::voxelizer::{voxelize, GridSpec};

use crate::MissingPrereq;

/// Optional grid overrides; unset fields keep the library defaults
/// (5 cm cells, 8 m x 6 m x 2.5 m crop).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridOverrides {
    voxel_m: Option<f64>,
    x_range: Option<(f64, f64)>,
    y_range: Option<(f64, f64)>,
    z_min: Option<f64>,
    z_extent: Option<f64>,
}

fn grid_spec(spec_path: Option<&Path>) -> anyhow::Result<GridSpec> {
    let mut grid = GridSpec::default();
    if let Some(path) = spec_path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read grid spec {}", path.display()))?;
        let o: GridOverrides = toml::from_str(&text)
            .with_context(|| format!("invalid grid spec {}", path.display()))?;
        if let Some(v) = o.voxel_m {
            grid.voxel_m = v;
        }
        if let Some(v) = o.x_range {
            grid.x_range = v;
        }
        if let Some(v) = o.y_range {
            grid.y_range = v;
        }
        if let Some(v) = o.z_min {
            grid.z_min = v;
        }
        if let Some(v) = o.z_extent {
            grid.z_extent = v;
        }
        grid.validate()?;
    }
    Ok(grid)
}

pub fn cmd_voxelize(
    pts_path: &Path,
    spec_path: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let grid_spec = grid_spec(spec_path)?;

    if !pts_path.exists() {
        return Err(MissingPrereq(format!("point file {} does not exist", pts_path.display()))
            .into());
    }
    let bytes = std::fs::read(pts_path)
        .with_context(|| format!("cannot read point file {}", pts_path.display()))?;
    if bytes.len() % 12 != 0 {
        bail!(
            "malformed point file {}: {} bytes is not a whole number of 12-byte (x, y, z) \
             f32 triplets",
            pts_path.display(),
            bytes.len()
        );
    }
    let points: Vec<[f32; 3]> = bytes
        .chunks_exact(12)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().expect("chunk of 12")),
                f32::from_le_bytes(c[4..8].try_into().expect("chunk of 12")),
                f32::from_le_bytes(c[8..12].try_into().expect("chunk of 12")),
            ]
        })
        .collect();

    let grid = voxelize(&points, &grid_spec);

    let out_dir: PathBuf = match out {
        Some(dir) => dir.to_path_buf(),
        None => pts_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let vox_path = out_dir.join("grid.vox");
    let file = std::fs::File::create(&vox_path)
        .with_context(|| format!("cannot write {}", vox_path.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    grid.write_dump(&mut writer)
        .and_then(|()| writer.flush())
        .with_context(|| format!("cannot write {}", vox_path.display()))?;

    let (nx, ny, nz) = grid.dims();
    println!("points: {}", points.len());
    println!("dims: {nx} x {ny} x {nz}");
    println!("occupied: {}", grid.occupied_count());
    println!("wrote {}", vox_path.display());
    Ok(())
}
