//! Volumetric data model, physical-coordinate mapping and file I/O.
//!
//! A volume is a 3D scalar grid stored x-fastest, z-slowest, with physical
//! voxel spacing in mm. On disk a volume is a pair of files: a JSON sidecar
//! header (`<name>.json`) and a raw little-endian f32 payload (`<name>.f32`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Descriptive metadata carried alongside the voxel payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub patient_id: String,
    pub n_coils: u32,
    #[serde(default)]
    pub snr_tag: Option<f64>,
    pub provenance: String,
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<()> {
        if self.n_coils < 1 {
            return Err(Error::Parameter("n_coils must be >= 1".into()));
        }
        Ok(())
    }
}

/// A point in scanner/physical space, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PhysicalPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &PhysicalPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Axis-aligned voxel box, inclusive `lo`, exclusive `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRoi {
    pub lo: (usize, usize, usize),
    pub hi: (usize, usize, usize),
}

impl BoxRoi {
    pub fn new(lo: (usize, usize, usize), hi: (usize, usize, usize)) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        let ok = self.lo.0 < self.hi.0
            && self.lo.1 < self.hi.1
            && self.lo.2 < self.hi.2
            && self.hi.0 <= dims.0
            && self.hi.1 <= dims.1
            && self.hi.2 <= dims.2;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "roi {:?}..{:?} invalid for dims {:?}",
                self.lo, self.hi, dims
            )))
        }
    }

    pub fn n_voxels(&self) -> usize {
        (self.hi.0 - self.lo.0) * (self.hi.1 - self.lo.1) * (self.hi.2 - self.lo.2)
    }

    pub fn overlaps(&self, other: &BoxRoi) -> bool {
        self.lo.0 < other.hi.0
            && other.lo.0 < self.hi.0
            && self.lo.1 < other.hi.1
            && other.lo.1 < self.hi.1
            && self.lo.2 < other.hi.2
            && other.lo.2 < self.hi.2
    }
}

/// 3D scalar grid with physical spacing. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub data: Vec<f32>,
    pub meta: VolumeMeta,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        data: Vec<f32>,
        meta: VolumeMeta,
    ) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Format(format!(
                "payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Parameter("spacing components must be > 0".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite voxel value".into()));
        }
        meta.validate()?;
        Ok(Self {
            dims,
            spacing,
            data,
            meta,
        })
    }

    #[inline]
    pub fn linear_index(&self, i: (usize, usize, usize)) -> usize {
        i.0 + self.dims.0 * (i.1 + self.dims.1 * i.2)
    }

    #[inline]
    pub fn at(&self, i: (usize, usize, usize)) -> f32 {
        self.data[self.linear_index(i)]
    }

    pub fn contains(&self, i: (usize, usize, usize)) -> bool {
        i.0 < self.dims.0 && i.1 < self.dims.1 && i.2 < self.dims.2
    }

    /// Physical coordinates of a voxel index.
    pub fn world_from_index(&self, i: (usize, usize, usize)) -> Result<PhysicalPoint> {
        if !self.contains(i) {
            return Err(Error::OutOfBounds {
                index: (i.0 as i64, i.1 as i64, i.2 as i64),
                dims: self.dims,
            });
        }
        Ok(PhysicalPoint::new(
            i.0 as f64 * self.spacing.0,
            i.1 as f64 * self.spacing.1,
            i.2 as f64 * self.spacing.2,
        ))
    }

    /// Nearest voxel index for a physical point.
    pub fn index_from_world(&self, p: &PhysicalPoint) -> Result<(usize, usize, usize)> {
        let i = (
            (p.x / self.spacing.0).round() as i64,
            (p.y / self.spacing.1).round() as i64,
            (p.z / self.spacing.2).round() as i64,
        );
        if i.0 < 0
            || i.1 < 0
            || i.2 < 0
            || i.0 as usize >= self.dims.0
            || i.1 as usize >= self.dims.1
            || i.2 as usize >= self.dims.2
        {
            return Err(Error::OutOfBounds {
                index: i,
                dims: self.dims,
            });
        }
        Ok((i.0 as usize, i.1 as usize, i.2 as usize))
    }

    /// Mean and population standard deviation over a box ROI.
    pub fn roi_stats(&self, r: &BoxRoi) -> Result<(f64, f64)> {
        r.validate(self.dims)?;
        let n = r.n_voxels() as f64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for z in r.lo.2..r.hi.2 {
            for y in r.lo.1..r.hi.1 {
                let base = self.dims.0 * (y + self.dims.1 * z);
                for x in r.lo.0..r.hi.0 {
                    let v = self.data[base + x] as f64;
                    sum += v;
                    sum_sq += v * v;
                }
            }
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        Ok((mean, var.sqrt()))
    }

    pub fn full_roi(&self) -> BoxRoi {
        BoxRoi::new((0, 0, 0), self.dims)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: (usize, usize, usize),
    spacing_mm: (f64, f64, f64),
    dtype: String,
    patient_id: String,
    n_coils: u32,
    #[serde(default)]
    snr_tag: Option<f64>,
    provenance: String,
}

fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path.with_extension("");
    (stem.with_extension("json"), stem.with_extension("f32"))
}

/// Write a volume as a `<name>.json` + `<name>.f32` pair.
///
/// `path` may point at the stem or at either file of the pair. Files are
/// written atomically (temp file, then rename).
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let (hdr_path, payload_path) = pair_paths(path);
    let header = Header {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: "f32le".into(),
        patient_id: v.meta.patient_id.clone(),
        n_coils: v.meta.n_coils,
        snr_tag: v.meta.snr_tag,
        provenance: v.meta.provenance.clone(),
    };
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for val in &v.data {
        payload.extend_from_slice(&val.to_le_bytes());
    }
    atomic_write(&payload_path, &payload)?;
    atomic_write(&hdr_path, serde_json::to_string_pretty(&header)?.as_bytes())?;
    Ok(())
}

/// Load a volume pair written by [`save_volume`]. Round trip is bit-exact.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (hdr_path, payload_path) = pair_paths(path);
    let header: Header = serde_json::from_str(&fs::read_to_string(&hdr_path)?)?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = fs::read(&payload_path)?;
    if bytes.len() != header.dims.0 * header.dims.1 * header.dims.2 * 4 {
        return Err(Error::Format(format!(
            "payload {} bytes does not match dims {:?}",
            bytes.len(),
            header.dims
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(
        header.dims,
        header.spacing_mm,
        data,
        VolumeMeta {
            patient_id: header.patient_id,
            n_coils: header.n_coils,
            snr_tag: header.snr_tag,
            provenance: header.provenance,
        },
    )
}

/// Write bytes via a temp file in the same directory plus rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
