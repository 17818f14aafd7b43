//! The regular grid and the K x K x K x 4 TSDF-Def tensor.
//!
//! Channel 0 stores the truncated signed distance normalized to [-1,1]
//! (negative inside); channels 1-3 store the grid-point deformation,
//! also normalized to [-1,1]. The physical deformation of a grid point is
//! `stored * DEFORM_SCALE * h`, so deformed points never cross cell
//! midplanes.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::Error;
use crate::geom::Vec3;
use crate::Result;

/// Deformation scale beta: half the cell width, which keeps cells from
/// inverting for any stored deformation in [-1,1].
pub const DEFORM_SCALE: f64 = 0.5;

/// Truncation band of the TSDF in cells: tau_t = 3h.
pub const TRUNCATION_CELLS: f64 = 3.0;

/// Magic for the tensor archive file.
pub const ARCHIVE_MAGIC: &[u8; 4] = b"NCGT";
pub const ARCHIVE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 8 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution {resolution} < 8"
            )));
        }
        Ok(GridSpec { resolution })
    }

    /// Grid spacing h = 2 / (K - 1) over the cube [-1,1]^3.
    pub fn spacing(&self) -> f64 {
        2.0 / (self.resolution as f64 - 1.0)
    }

    /// Physical TSDF truncation band.
    pub fn truncation(&self) -> f64 {
        TRUNCATION_CELLS * self.spacing()
    }

    /// Position of grid point (u,v,w), 0-based indices.
    pub fn position(&self, u: usize, v: usize, w: usize) -> Vec3 {
        let h = self.spacing();
        [
            -1.0 + u as f64 * h,
            -1.0 + v as f64 * h,
            -1.0 + w as f64 * h,
        ]
    }

    pub fn point_count(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }
}

/// K x K x K x 4 tensor in (u,v,w,channel) row-major order, f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfDefTensor {
    pub grid: GridSpec,
    pub data: Vec<f32>,
}

impl TsdfDefTensor {
    pub fn zeros(grid: GridSpec) -> Self {
        TsdfDefTensor {
            grid,
            data: vec![0.0; grid.point_count() * 4],
        }
    }

    pub fn from_data(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.point_count() * 4 {
            return Err(Error::Shape(format!(
                "tensor data length {} != {}",
                data.len(),
                grid.point_count() * 4
            )));
        }
        Ok(TsdfDefTensor { grid, data })
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize, w: usize, c: usize) -> usize {
        let k = self.grid.resolution;
        ((u * k + v) * k + w) * 4 + c
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, w: usize, c: usize) -> f32 {
        self.data[self.index(u, v, w, c)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, w: usize, c: usize, val: f32) {
        let i = self.index(u, v, w, c);
        self.data[i] = val;
    }

    /// TSDF value (normalized) at a grid point.
    #[inline]
    pub fn tsdf(&self, u: usize, v: usize, w: usize) -> f64 {
        self.get(u, v, w, 0) as f64
    }

    /// Deformed physical position of a grid point.
    pub fn deformed_position(&self, u: usize, v: usize, w: usize) -> Vec3 {
        let p = self.grid.position(u, v, w);
        let bh = DEFORM_SCALE * self.grid.spacing();
        [
            p[0] + bh * self.get(u, v, w, 1) as f64,
            p[1] + bh * self.get(u, v, w, 2) as f64,
            p[2] + bh * self.get(u, v, w, 3) as f64,
        ]
    }

    pub fn clamp_values(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// Mean absolute deformation (channels 1-3).
    pub fn deformation_l1(&self) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for chunk in self.data.chunks_exact(4) {
            sum += chunk[1].abs() as f64 + chunk[2].abs() as f64 + chunk[3].abs() as f64;
            n += 3;
        }
        sum / n as f64
    }
}

/// Writes shape tensors to the archive format: header
/// `{magic "NCGT", version u8, K u16, shape count u32}` (little-endian)
/// followed by raw f32 K^3 x 4 blocks per shape.
pub fn save_archive(tensors: &[TsdfDefTensor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if tensors.is_empty() {
        return Err(Error::InvalidArgument("no tensors to archive".into()));
    }
    let k = tensors[0].grid.resolution;
    for t in tensors {
        if t.grid.resolution != k {
            return Err(Error::Shape("mixed resolutions in archive".into()));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_u8(ARCHIVE_VERSION)?;
        w.write_u16::<LittleEndian>(k as u16)?;
        w.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for t in tensors {
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Vec<TsdfDefTensor>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad archive magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u8().map_err(|e| Error::io(path, e))?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let k = r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let count = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let grid = GridSpec::new(k)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut data = vec![0.0f32; grid.point_count() * 4];
        for v in &mut data {
            *v = r.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        }
        tensors.push(TsdfDefTensor { grid, data });
    }
    Ok(tensors)
}
