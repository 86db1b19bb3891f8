//! Asset files: voxel coordinates, per-voxel colors, a JSON manifest, an
//! optional mask trace and an optional orthographic projection PNG.
//!
//! Layout of an asset directory:
//! - `voxels.bin`: `L × 3` little-endian `u32` coordinates `(x, y, z)`
//! - `colors.bin`: `L × 3` little-endian `f32` RGB in `[0, 1]`
//! - `manifest.json`
//! - `mask_trace.json` when mask tracing is enabled
//! - `projection.png` when requested

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgba, RgbaImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backbone::{validate_voxels, Backbone, Coord, Latent, SparseLatent};
use crate::conditioning::ImageInput;
use crate::error::{Result, SculptError};
use crate::hooks::{MaskTraceEntry, SiteCounters, StageAttention};
use crate::sgc::GuidanceMode;
use crate::tensor::{ensure_shape, Matrix};

pub const FORMAT: &str = "sculpt-asset/1";
pub const VOXEL_FILE: &str = "voxels.bin";
pub const COLOR_FILE: &str = "colors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "mask_trace.json";
pub const PROJECTION_FILE: &str = "projection.png";

/// Occupied voxels with one RGB color each.
#[derive(Debug, Clone, PartialEq)]
pub struct Asset {
    pub resolution: usize,
    pub voxels: Vec<Coord>,
    /// `[L, 3]`, values in `[0, 1]`.
    pub colors: Matrix,
}

impl Asset {
    pub fn new(resolution: usize, voxels: Vec<Coord>, colors: Matrix) -> Result<Self> {
        validate_voxels(&voxels, resolution)?;
        ensure_shape(&colors, voxels.len(), 3, "voxel colors")?;
        if let Some(v) = colors.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SculptError::contract(format!("voxel color {v} outside [0, 1]")));
        }
        Ok(Self {
            resolution,
            voxels,
            colors,
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Reads colors off a fully denoised stage-2 latent.
pub fn export_asset<B: Backbone + ?Sized>(backbone: &B, latent: &SparseLatent) -> Result<Asset> {
    if latent.timestep() != 0.0 {
        return Err(SculptError::contract(format!(
            "export needs a fully denoised latent, got t = {}",
            latent.timestep()
        )));
    }
    let colors = backbone.voxel_colors(latent)?;
    Asset::new(latent.resolution(), latent.coords().to_vec(), colors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub stage1: StageAttention,
    pub stage2: StageAttention,
    pub k_stage1: usize,
    pub k_stage2: usize,
    pub stage1_counters: SiteCounters,
    pub stage2_counters: SiteCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format: String,
    pub resolution: usize,
    pub voxel_count: usize,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the run configuration.
    pub config_hash: String,
    pub mode: GuidanceMode,
    pub passes: Vec<PassSummary>,
    /// Relative to the asset directory; absent when tracing was off.
    pub mask_trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetExport {
    pub asset: Asset,
    pub manifest: ExportManifest,
    pub mask_trace: Option<Vec<MaskTraceEntry>>,
}

impl AssetExport {
    /// Writes every file into a sibling temporary directory and renames it
    /// into place, so `dir` either holds a complete export or is untouched.
    pub fn write(&self, dir: &Path, projection_cell_px: Option<u32>) -> Result<()> {
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| SculptError::io(&parent, e))?;
        let name = dir
            .file_name()
            .ok_or_else(|| SculptError::config(format!("{} is not a usable output directory", dir.display())))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| SculptError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| SculptError::io(&staging, e))?;

        let result = self.write_files(&staging, projection_cell_px).and_then(|()| {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| SculptError::io(dir, e))?;
            }
            fs::rename(&staging, dir).map_err(|e| SculptError::io(dir, e))
        });
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }

    fn write_files(&self, dir: &Path, projection_cell_px: Option<u32>) -> Result<()> {
        let mut voxels = Vec::with_capacity(self.asset.len() * 12);
        for c in &self.asset.voxels {
            for v in c {
                voxels.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(&dir.join(VOXEL_FILE), &voxels)?;

        let mut colors = Vec::with_capacity(self.asset.len() * 12);
        for v in self.asset.colors.iter() {
            colors.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        write_file(&dir.join(COLOR_FILE), &colors)?;

        if let Some(trace) = &self.mask_trace {
            write_json(&dir.join(TRACE_FILE), trace)?;
        }
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        if let Some(cell) = projection_cell_px {
            let path = dir.join(PROJECTION_FILE);
            projection_png(&self.asset, cell)?
                .save(&path)
                .map_err(|source| SculptError::Image { path, source })?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: ExportManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format != FORMAT {
            return Err(SculptError::config(format!(
                "{}: unsupported asset format {:?}",
                dir.display(),
                manifest.format
            )));
        }
        let voxel_path = dir.join(VOXEL_FILE);
        let raw = fs::read(&voxel_path).map_err(|e| SculptError::io(&voxel_path, e))?;
        if raw.len() != manifest.voxel_count * 12 {
            return Err(SculptError::config(format!(
                "{}: expected {} voxels",
                voxel_path.display(),
                manifest.voxel_count
            )));
        }
        let words: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect();
        let voxels = words.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();

        let color_path = dir.join(COLOR_FILE);
        let raw = fs::read(&color_path).map_err(|e| SculptError::io(&color_path, e))?;
        if raw.len() != manifest.voxel_count * 12 {
            return Err(SculptError::config(format!(
                "{}: expected {} colors",
                color_path.display(),
                manifest.voxel_count
            )));
        }
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
            .collect();
        let colors = Matrix::from_shape_vec((manifest.voxel_count, 3), values)
            .map_err(|e| SculptError::config(format!("{}: {e}", color_path.display())))?;

        let mask_trace = match &manifest.mask_trace {
            Some(name) => Some(read_json(&dir.join(name))?),
            None => None,
        };
        Ok(Self {
            asset: Asset::new(manifest.resolution, voxels, colors)?,
            manifest,
            mask_trace,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SculptError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|source| SculptError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, &json)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| SculptError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| SculptError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Front view along −z: for each `(x, y)` column, the color of the voxel with
/// the largest `z`, or `None` when the column is empty. Indexed `[row, col]`
/// with `y` pointing up.
fn front_view(asset: &Asset) -> Vec<Vec<Option<[f64; 3]>>> {
    let r = asset.resolution;
    let mut depth = vec![vec![None::<u32>; r]; r];
    let mut cells = vec![vec![None; r]; r];
    for (i, [x, y, z]) in asset.voxels.iter().copied().enumerate() {
        let (row, col) = (r - 1 - y as usize, x as usize);
        if depth[row][col].is_none_or(|d| z > d) {
            depth[row][col] = Some(z);
            let c = asset.colors.row(i);
            cells[row][col] = Some([c[0], c[1], c[2]]);
        }
    }
    cells
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Front projection, `cell_px` pixels per voxel, transparent where empty.
pub fn projection_png(asset: &Asset, cell_px: u32) -> Result<RgbaImage> {
    if cell_px == 0 {
        return Err(SculptError::config("projection cell size must be positive"));
    }
    let cells = front_view(asset);
    let side = asset.resolution as u32 * cell_px;
    Ok(ImageBuffer::from_fn(side, side, |x, y| {
        match cells[(y / cell_px) as usize][(x / cell_px) as usize] {
            Some([r, g, b]) => Rgba([to_u8(r), to_u8(g), to_u8(b), 255]),
            None => Rgba([0, 0, 0, 0]),
        }
    }))
}

/// Front view on a white background at `size × size`, usable as a
/// content image for a following pass.
pub fn render_asset(asset: &Asset, size: usize) -> Result<ImageInput> {
    if asset.is_empty() {
        return Err(SculptError::contract("cannot render an empty asset"));
    }
    let r = asset.resolution;
    let cells = front_view(asset);
    let pixels = Array3::from_shape_fn((size, size, 3), |(y, x, c)| match cells[y * r / size][x * r / size] {
        Some(rgb) => rgb[c],
        None => 1.0,
    });
    ImageInput::new(pixels, "render:front")
}
