//! Patient-level anatomy features: torso dimensions, lung centroids, fat
//! estimate, lung-size ratio and the LV blood-pool mask.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{slice_component, PlaneAngles};
use crate::segmentation::{largest_components, segment_image, Connectivity, SegParams};
use crate::volume::{BoxRoi, PhysicalPoint, Volume};

/// The eight centroid-model features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidFeatures {
    pub torso_height_mm: f64,
    pub torso_width_mm: f64,
    pub left_lung_centroid: PhysicalPoint,
    pub right_lung_centroid: PhysicalPoint,
}

pub const CENTROID_FEATURE_NAMES: [&str; 8] = [
    "torso_height_mm",
    "torso_width_mm",
    "left_lung_x",
    "left_lung_y",
    "left_lung_z",
    "right_lung_x",
    "right_lung_y",
    "right_lung_z",
];

impl CentroidFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.torso_height_mm,
            self.torso_width_mm,
            self.left_lung_centroid.x,
            self.left_lung_centroid.y,
            self.left_lung_centroid.z,
            self.right_lung_centroid.x,
            self.right_lung_centroid.y,
            self.right_lung_centroid.z,
        ]
    }
}

/// The six anatomy features plus the two initial short-axis estimates used
/// by the angulation models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngulationFeatures {
    pub torso_height_mm: f64,
    pub torso_width_mm: f64,
    pub torso_aspect: f64,
    pub torso_area_mm2: f64,
    pub fat_fraction: f64,
    pub lung_size_ratio: f64,
    pub sa_init_azimuth_deg: f64,
    pub sa_init_elevation_deg: f64,
}

pub const ANGULATION_FEATURE_NAMES: [&str; 8] = [
    "torso_height_mm",
    "torso_width_mm",
    "torso_aspect",
    "torso_area_mm2",
    "fat_fraction",
    "lung_size_ratio",
    "sa_init_azimuth_deg",
    "sa_init_elevation_deg",
];

impl AngulationFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.torso_height_mm,
            self.torso_width_mm,
            self.torso_aspect,
            self.torso_area_mm2,
            self.fat_fraction,
            self.lung_size_ratio,
            self.sa_init_azimuth_deg,
            self.sa_init_elevation_deg,
        ]
    }
}

/// Otsu threshold over a slice of intensity values.
pub fn otsu_threshold(values: &[f32]) -> f64 {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return lo as f64;
    }
    const BINS: usize = 256;
    let scale = (BINS - 1) as f64 / (hi - lo) as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[(((v - lo) as f64) * scale) as usize] += 1;
    }
    let total: u64 = values.len() as u64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for t in 0..BINS - 1 {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best.1 {
            best = (t, between);
        }
    }
    lo as f64 + (best.0 as f64 + 0.5) / scale
}

/// 4-connected components of a boolean mask over one slice; returns per-pixel
/// component ids (usize::MAX outside the mask) and component sizes.
fn mask_components_2d(mask: &[bool], nx: usize, ny: usize) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![usize::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        stack.push(start);
        labels[start] = id;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % nx, i / nx);
            let mut push = |j: usize| {
                if mask[j] && labels[j] == usize::MAX {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < nx {
                push(i + 1);
            }
            if y > 0 {
                push(i - nx);
            }
            if y + 1 < ny {
                push(i + nx);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Bounding box of the largest bright component on the mid-stack axial
/// slice (Otsu threshold), extruded across all z.
pub fn torso_bbox(v: &Volume) -> Result<BoxRoi> {
    let (nx, ny, nz) = v.dims;
    let z_mid = nz / 2;
    let slice = &v.data[nx * ny * z_mid..nx * ny * (z_mid + 1)];
    let threshold = otsu_threshold(slice);
    let mask: Vec<bool> = slice.iter().map(|&x| (x as f64) > threshold).collect();
    if !mask.iter().any(|&b| b) {
        return Err(Error::AnatomyNotFound(
            "no above-threshold voxels on mid slice".into(),
        ));
    }
    let (labels, sizes) = mask_components_2d(&mask, nx, ny);
    let biggest = sizes
        .iter()
        .enumerate()
        .max_by_key(|(_, &s)| s)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::AnatomyNotFound("no bright component".into()))?;
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        if l == biggest {
            let (x, y) = (i % nx, i / nx);
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x + 1), hi.1.max(y + 1));
        }
    }
    Ok(BoxRoi::new((lo.0, lo.1, 0), (hi.0, hi.1, nz)))
}

/// Physical torso extents: width along x, height along y (anterior-posterior).
pub fn torso_dims(b: &BoxRoi, spacing: (f64, f64, f64)) -> (f64, f64) {
    (
        (b.hi.0 - b.lo.0) as f64 * spacing.0,
        (b.hi.1 - b.lo.1) as f64 * spacing.1,
    )
}

/// Left/right lung centroids (mm) and voxel sizes. Lungs are the two largest
/// low-intensity components lying fully inside the torso box; patient-left
/// is the larger x centroid.
pub fn lung_centroids(
    v: &Volume,
    torso: &BoxRoi,
    p: &SegParams,
) -> Result<(PhysicalPoint, PhysicalPoint, usize, usize)> {
    torso.validate(v.dims)?;
    let (nx, ny, _) = v.dims;
    let seg = segment_image(&v.data, v.dims, Connectivity::Six3D, p)?;

    // low-intensity gate: below the Otsu threshold of the torso box
    let mut box_values = Vec::new();
    for z in torso.lo.2..torso.hi.2 {
        for y in torso.lo.1..torso.hi.1 {
            for x in torso.lo.0..torso.hi.0 {
                box_values.push(v.at((x, y, z)));
            }
        }
    }
    let gate = otsu_threshold(&box_values);

    let inside = |i: usize| {
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        x >= torso.lo.0
            && x < torso.hi.0
            && y >= torso.lo.1
            && y < torso.hi.1
            && z >= torso.lo.2
            && z < torso.hi.2
    };
    // components fully inside the torso box
    let mut fully_inside: std::collections::BTreeMap<u32, bool> = std::collections::BTreeMap::new();
    let mut mean_intensity: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
    for (i, &l) in seg.labels.iter().enumerate() {
        let e = fully_inside.entry(l).or_insert(true);
        *e &= inside(i);
        let m = mean_intensity.entry(l).or_insert((0.0, 0));
        m.0 += v.data[i] as f64;
        m.1 += 1;
    }
    let qualifies = |label: u32| {
        fully_inside.get(&label).copied().unwrap_or(false) && {
            let (s, n) = mean_intensity[&label];
            s / n as f64 <= gate
        }
    };
    let mask = |i: usize| qualifies(seg.labels[i]);
    let top = largest_components(&seg, Some(&mask), 2);
    let top: Vec<_> = top.into_iter().filter(|(id, _, _)| qualifies(*id)).collect();
    if top.len() < 2 {
        return Err(Error::AnatomyNotFound(format!(
            "found {} lung candidates, need 2",
            top.len()
        )));
    }
    // exact (unrounded) physical centroids
    let centroid_mm = |target: u32| {
        let mut sum = (0.0f64, 0.0f64, 0.0f64);
        let mut n = 0usize;
        for (i, &l) in seg.labels.iter().enumerate() {
            if l == target {
                let x = i % nx;
                let y = (i / nx) % ny;
                let z = i / (nx * ny);
                sum.0 += x as f64;
                sum.1 += y as f64;
                sum.2 += z as f64;
                n += 1;
            }
        }
        PhysicalPoint::new(
            sum.0 / n as f64 * v.spacing.0,
            sum.1 / n as f64 * v.spacing.1,
            sum.2 / n as f64 * v.spacing.2,
        )
    };
    let (c0, s0) = (centroid_mm(top[0].0), top[0].1);
    let (c1, s1) = (centroid_mm(top[1].0), top[1].1);
    // patient-left has the larger x under the fixed axis convention
    if c0.x >= c1.x {
        Ok((c0, c1, s0, s1))
    } else {
        Ok((c1, c0, s1, s0))
    }
}

/// Fraction of torso-box voxels that lie in the peripheral shell (outer 15%
/// of the box extent in x/y) and exceed the box-wide 75th percentile.
pub fn fat_fraction(v: &Volume, torso: &BoxRoi) -> Result<f64> {
    torso.validate(v.dims)?;
    let mut values = Vec::with_capacity(torso.n_voxels());
    for z in torso.lo.2..torso.hi.2 {
        for y in torso.lo.1..torso.hi.1 {
            for x in torso.lo.0..torso.hi.0 {
                values.push(v.at((x, y, z)));
            }
        }
    }
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p75 = sorted[(0.75 * (sorted.len() - 1) as f64).round() as usize] as f64;

    let wx = torso.hi.0 - torso.lo.0;
    let wy = torso.hi.1 - torso.lo.1;
    let margin_x = ((wx as f64) * 0.15).ceil() as usize;
    let margin_y = ((wy as f64) * 0.15).ceil() as usize;
    let mut count = 0usize;
    for z in torso.lo.2..torso.hi.2 {
        for y in torso.lo.1..torso.hi.1 {
            for x in torso.lo.0..torso.hi.0 {
                let in_shell = x < torso.lo.0 + margin_x
                    || x >= torso.hi.0 - margin_x
                    || y < torso.lo.1 + margin_y
                    || y >= torso.hi.1 - margin_y;
                if in_shell && (v.at((x, y, z)) as f64) > p75 {
                    count += 1;
                }
            }
        }
    }
    Ok(count as f64 / torso.n_voxels() as f64)
}

/// 2D blood-pool mask on the axial slice containing the centroid.
pub fn lv_bloodpool(
    v: &Volume,
    lv_centroid: &PhysicalPoint,
    p: &SegParams,
) -> Result<(HashSet<(usize, usize)>, usize)> {
    let idx = v.index_from_world(lv_centroid)?;
    let pool = slice_component(v, idx.2, (idx.0, idx.1), p)?;
    Ok((pool, idx.2))
}

/// Geometric short-axis initial estimate at a given LV centroid: blood-pool
/// component on the centroid slice, refined for noise robustness, then the
/// ellipse-based axis estimate.
pub fn geometric_sa_init(
    v: &Volume,
    lv_centroid: &PhysicalPoint,
    p: &SegParams,
) -> Result<crate::geometry::PlaneAngles> {
    let idx = v.index_from_world(lv_centroid)?;
    let (pool, z) = lv_bloodpool(v, lv_centroid, p)?;
    let refined = crate::geometry::refine_pool(v, z, (idx.0, idx.1), &pool);
    crate::geometry::initial_short_axis(&refined, z, v, p)
}

/// All stack-independent anatomy measurements of one volume, computed with
/// a single 3D segmentation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyContext {
    pub torso: BoxRoi,
    pub torso_width_mm: f64,
    pub torso_height_mm: f64,
    pub left_lung_centroid: PhysicalPoint,
    pub right_lung_centroid: PhysicalPoint,
    pub left_lung_size: usize,
    pub right_lung_size: usize,
    pub fat_fraction: f64,
}

pub fn anatomy_context(v: &Volume, p: &SegParams) -> Result<AnatomyContext> {
    let torso = torso_bbox(v)?;
    let (width, height) = torso_dims(&torso, v.spacing);
    let (left, right, left_size, right_size) = lung_centroids(v, &torso, p)?;
    let fat = fat_fraction(v, &torso)?;
    Ok(AnatomyContext {
        torso,
        torso_width_mm: width,
        torso_height_mm: height,
        left_lung_centroid: left,
        right_lung_centroid: right,
        left_lung_size: left_size,
        right_lung_size: right_size,
        fat_fraction: fat,
    })
}

impl AnatomyContext {
    pub fn centroid_features(&self) -> CentroidFeatures {
        CentroidFeatures {
            torso_height_mm: self.torso_height_mm,
            torso_width_mm: self.torso_width_mm,
            left_lung_centroid: self.left_lung_centroid,
            right_lung_centroid: self.right_lung_centroid,
        }
    }

    pub fn angulation_features(&self, sa_init: &PlaneAngles) -> AngulationFeatures {
        AngulationFeatures {
            torso_height_mm: self.torso_height_mm,
            torso_width_mm: self.torso_width_mm,
            torso_aspect: self.torso_width_mm / self.torso_height_mm,
            torso_area_mm2: self.torso_width_mm * self.torso_height_mm,
            fat_fraction: self.fat_fraction,
            lung_size_ratio: self.left_lung_size as f64 / self.right_lung_size as f64,
            sa_init_azimuth_deg: sa_init.azimuth_deg,
            sa_init_elevation_deg: sa_init.elevation_deg,
        }
    }
}

/// Assemble the centroid-model feature record.
pub fn centroid_features(v: &Volume, p: &SegParams) -> Result<CentroidFeatures> {
    Ok(anatomy_context(v, p)?.centroid_features())
}

/// Assemble the angulation-model feature record (six anatomy features plus
/// the initial short-axis estimate).
pub fn angulation_features(
    v: &Volume,
    sa_init: &PlaneAngles,
    p: &SegParams,
) -> Result<AngulationFeatures> {
    Ok(anatomy_context(v, p)?.angulation_features(sa_init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeMeta;

    fn meta() -> VolumeMeta {
        VolumeMeta {
            patient_id: "f0".into(),
            n_coils: 1,
            snr_tag: None,
            provenance: "test".into(),
        }
    }

    /// Minimal torso slab: bright ellipse cylinder with two dark ellipsoids.
    fn toy_torso(shift_x: i64) -> Volume {
        let dims = (64, 48, 12);
        let spacing = (4.0, 4.0, 8.0);
        let center = (
            32.0 + shift_x as f64,
            24.0,
        );
        let (a, b) = (24.0, 16.0); // voxels
        let mut data = vec![0.0f32; dims.0 * dims.1 * dims.2];
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    let dx = (x as f64 - center.0) / a;
                    let dy = (y as f64 - center.1) / b;
                    let mut val = 0.0;
                    if dx * dx + dy * dy <= 1.0 {
                        val = 100.0;
                    }
                    // lungs: two dark ellipsoids inside
                    for (lx, ly) in [(center.0 - 10.0, 24.0), (center.0 + 10.0, 24.0)] {
                        let ex = (x as f64 - lx) / 6.0;
                        let ey = (y as f64 - ly) / 6.0;
                        let ez = (z as f64 - 6.0) / 4.0;
                        if ex * ex + ey * ey + ez * ez <= 1.0 {
                            val = 10.0;
                        }
                    }
                    data[x + dims.0 * (y + dims.1 * z)] = val;
                }
            }
        }
        Volume::new(dims, spacing, data, meta()).unwrap()
    }

    #[test]
    fn torso_bbox_spans_ellipse() {
        let v = toy_torso(0);
        let b = torso_bbox(&v).unwrap();
        let (w, h) = torso_dims(&b, v.spacing);
        // ellipse extents: 2*24 voxels * 4mm = 192 mm, 2*16 * 4 = 128 mm
        assert!((w - 192.0).abs() <= 2.0 * v.spacing.0, "width {w}");
        assert!((h - 128.0).abs() <= 2.0 * v.spacing.1, "height {h}");
    }

    #[test]
    fn torso_bbox_translation_equivariant() {
        let b0 = torso_bbox(&toy_torso(0)).unwrap();
        let b1 = torso_bbox(&toy_torso(5)).unwrap();
        assert_eq!(b1.lo.0, b0.lo.0 + 5);
        assert_eq!(b1.hi.0, b0.hi.0 + 5);
        assert_eq!(b1.lo.1, b0.lo.1);
    }

    #[test]
    fn torso_bbox_rejects_empty() {
        let v = Volume::new((8, 8, 4), (1.0, 1.0, 1.0), vec![0.0; 256], meta()).unwrap();
        assert!(matches!(
            torso_bbox(&v),
            Err(Error::AnatomyNotFound(_))
        ));
    }

    #[test]
    fn torso_dims_scale_with_spacing() {
        let b = BoxRoi::new((0, 0, 0), (100, 80, 1));
        assert_eq!(torso_dims(&b, (1.5, 1.5, 1.0)), (150.0, 120.0));
        assert_eq!(torso_dims(&b, (3.0, 3.0, 1.0)), (300.0, 240.0));
        let unit = BoxRoi::new((0, 0, 0), (1, 1, 1));
        assert_eq!(torso_dims(&unit, (1.5, 2.5, 1.0)), (1.5, 2.5));
    }

    fn lung_params() -> SegParams {
        SegParams {
            k_threshold: 30.0,
            min_size: 20,
            presmooth_sigma: 0.0,
        }
    }

    #[test]
    fn lungs_found_and_sided() {
        let v = toy_torso(0);
        let torso = torso_bbox(&v).unwrap();
        let (left, right, ls, rs) = lung_centroids(&v, &torso, &lung_params()).unwrap();
        assert!(left.x > right.x);
        // spec centers: x = 42 and 22 voxels * 4mm
        assert!((left.x - 42.0 * 4.0).abs() <= 2.0 * v.spacing.0, "{left:?}");
        assert!((right.x - 22.0 * 4.0).abs() <= 2.0 * v.spacing.0, "{right:?}");
        assert!(ls > 0 && rs > 0);
    }

    #[test]
    fn lung_sides_swap_under_x_flip() {
        let v = toy_torso(3);
        let (nx, ny, nz) = v.dims;
        let mut flipped = v.data.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    flipped[x + nx * (y + ny * z)] = v.at((nx - 1 - x, y, z));
                }
            }
        }
        let fv = Volume::new(v.dims, v.spacing, flipped, meta()).unwrap();
        let t0 = torso_bbox(&v).unwrap();
        let t1 = torso_bbox(&fv).unwrap();
        let (l0, r0, _, _) = lung_centroids(&v, &t0, &lung_params()).unwrap();
        let (l1, r1, _, _) = lung_centroids(&fv, &t1, &lung_params()).unwrap();
        let mirror = |x: f64| (nx as f64 - 1.0) * v.spacing.0 - x;
        assert!((l1.x - mirror(r0.x)).abs() < 1.0, "{l1:?} vs {r0:?}");
        assert!((r1.x - mirror(l0.x)).abs() < 1.0);
    }

    #[test]
    fn one_lung_missing_errors() {
        // overwrite the right lung with muscle intensity
        let v = toy_torso(0);
        let mut data = v.data.clone();
        let (nx, ny, nz) = v.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if data[x + nx * (y + ny * z)] == 10.0 && (x as f64) < 32.0 {
                        data[x + nx * (y + ny * z)] = 100.0;
                    }
                }
            }
        }
        let v2 = Volume::new(v.dims, v.spacing, data, meta()).unwrap();
        let torso = torso_bbox(&v2).unwrap();
        assert!(matches!(
            lung_centroids(&v2, &torso, &lung_params()),
            Err(Error::AnatomyNotFound(_))
        ));
    }

    #[test]
    fn fat_fraction_constant_torso_is_zero() {
        let v = Volume::new((16, 16, 4), (1.0, 1.0, 1.0), vec![50.0; 1024], meta()).unwrap();
        let b = BoxRoi::new((2, 2, 0), (14, 14, 4));
        assert_eq!(fat_fraction(&v, &b).unwrap(), 0.0);
    }

    #[test]
    fn fat_fraction_intensity_scale_invariant() {
        let v = toy_torso(0);
        let torso = torso_bbox(&v).unwrap();
        let f0 = fat_fraction(&v, &torso).unwrap();
        let scaled = Volume::new(
            v.dims,
            v.spacing,
            v.data.iter().map(|&x| x * 3.0).collect(),
            meta(),
        )
        .unwrap();
        let f1 = fat_fraction(&scaled, &torso).unwrap();
        assert!((f0 - f1).abs() < 1e-12);
    }

    #[test]
    fn otsu_separates_bimodal() {
        let mut vals = vec![10.0f32; 500];
        vals.extend(vec![200.0f32; 500]);
        let t = otsu_threshold(&vals);
        assert!(t > 10.0 && t < 200.0, "threshold {t}");
    }
}
