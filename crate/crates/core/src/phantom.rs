//! Parametric synthetic torso/heart volumes with exact ground truth,
//! standing in for clinical data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angles_to_normal, normal_to_angles, PlaneAngles, UnitVector3};
use crate::noise::SnrRois;
use crate::pipeline::{Case, GroundTruth};
use crate::volume::{BoxRoi, PhysicalPoint, Volume, VolumeMeta};

/// One ellipsoidal structure: center and semi-axes in mm (axis-aligned).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: PhysicalPoint,
    pub semi_axes: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, p: PhysicalPoint) -> bool {
        let dx = (p.x - self.center.x) / self.semi_axes.0;
        let dy = (p.y - self.center.y) / self.semi_axes.1;
        let dz = (p.z - self.center.z) / self.semi_axes.2;
        dx * dx + dy * dy + dz * dz <= 1.0
    }
}

/// Full description of one phantom; ground truth derives from it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub patient_id: String,
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    /// Torso elliptical cylinder semi-axes (x, y) in mm, centered in-plane.
    pub torso_semi_axes: (f64, f64),
    pub fat_thickness_mm: f64,
    pub fat_intensity: f32,
    pub muscle_intensity: f32,
    pub left_lung: Ellipsoid,
    pub right_lung: Ellipsoid,
    pub lung_intensity: f32,
    pub lv_center: PhysicalPoint,
    /// LV long-axis direction; the short-axis plane truth equals this.
    pub lv_long_axis: PlaneAngles,
    /// (long, short) semi-axes of the blood-pool prolate spheroid, mm.
    pub lv_semi_axes: (f64, f64),
    pub blood_intensity: f32,
    pub wall_thickness_mm: f64,
    pub wall_intensity: f32,
    /// Stddev of the always-present half-normal noise floor.
    pub noise_floor_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            patient_id: "phantom".into(),
            dims: (128, 128, 32),
            spacing: (3.125, 3.125, 5.0),
            torso_semi_axes: (150.0, 100.0),
            fat_thickness_mm: 12.0,
            fat_intensity: 190.0,
            muscle_intensity: 100.0,
            left_lung: Ellipsoid {
                center: PhysicalPoint::new(260.0, 190.0, 78.0),
                semi_axes: (34.0, 42.0, 55.0),
            },
            right_lung: Ellipsoid {
                center: PhysicalPoint::new(136.0, 190.0, 78.0),
                semi_axes: (34.0, 42.0, 55.0),
            },
            lung_intensity: 30.0,
            lv_center: PhysicalPoint::new(205.0, 230.0, 78.0),
            lv_long_axis: PlaneAngles::canonical(50.0, 40.0),
            lv_semi_axes: (42.0, 24.0),
            blood_intensity: 180.0,
            wall_thickness_mm: 8.0,
            wall_intensity: 110.0,
            noise_floor_sigma: 1.8,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn torso_center(&self) -> PhysicalPoint {
        PhysicalPoint::new(
            (self.dims.0 - 1) as f64 * self.spacing.0 / 2.0,
            (self.dims.1 - 1) as f64 * self.spacing.1 / 2.0,
            (self.dims.2 - 1) as f64 * self.spacing.2 / 2.0,
        )
    }

    /// Normalized torso-ellipse radius (<= 1 means inside the outer shell).
    fn torso_r2(&self, p: PhysicalPoint, shrink_mm: f64) -> f64 {
        let c = self.torso_center();
        let ax = self.torso_semi_axes.0 - shrink_mm;
        let ay = self.torso_semi_axes.1 - shrink_mm;
        let dx = (p.x - c.x) / ax;
        let dy = (p.y - c.y) / ay;
        dx * dx + dy * dy
    }

    fn validate(&self) -> Result<()> {
        if !(0.0 < self.lung_intensity
            && self.lung_intensity < self.muscle_intensity
            && self.muscle_intensity < self.blood_intensity
            && self.blood_intensity <= self.fat_intensity)
        {
            return Err(Error::Parameter(
                "intensities must satisfy air < lung < muscle < blood <= fat".into(),
            ));
        }
        if self.fat_thickness_mm <= 0.0
            || self.fat_thickness_mm >= self.torso_semi_axes.1
            || self.wall_thickness_mm <= 0.0
            || self.lv_semi_axes.0 <= self.lv_semi_axes.1
        {
            return Err(Error::Parameter("degenerate phantom geometry".into()));
        }
        // coarse containment: structure surface samples must fall inside the
        // muscle region (inner torso ellipse) and the volume
        let inner = self.fat_thickness_mm;
        let check = |p: PhysicalPoint, what: &str| -> Result<()> {
            if self.torso_r2(p, inner) > 1.0 {
                return Err(Error::Parameter(format!("{what} not inside torso")));
            }
            let max_z = (self.dims.2 - 1) as f64 * self.spacing.2;
            if p.z < 0.0 || p.z > max_z {
                return Err(Error::Parameter(format!("{what} outside volume in z")));
            }
            Ok(())
        };
        for lung in [&self.left_lung, &self.right_lung] {
            for (sx, sy, sz) in [
                (1.0, 0.0, 0.0),
                (-1.0, 0.0, 0.0),
                (0.0, 1.0, 0.0),
                (0.0, -1.0, 0.0),
                (0.0, 0.0, 1.0),
                (0.0, 0.0, -1.0),
            ] {
                check(
                    PhysicalPoint::new(
                        lung.center.x + sx * lung.semi_axes.0,
                        lung.center.y + sy * lung.semi_axes.1,
                        lung.center.z + sz * lung.semi_axes.2,
                    ),
                    "lung",
                )?;
            }
        }
        let l = angles_to_normal(&self.lv_long_axis);
        let reach = self.lv_semi_axes.0 + self.wall_thickness_mm;
        for s in [-1.0, 1.0] {
            check(
                PhysicalPoint::new(
                    self.lv_center.x + s * reach * l.ux,
                    self.lv_center.y + s * reach * l.uy,
                    self.lv_center.z + s * reach * l.uz,
                ),
                "LV",
            )?;
        }
        Ok(())
    }

    /// Exact plane truths: SA is the long axis itself; 4CH contains the long
    /// axis and the x-projection (normal l x e_x); 2CH contains the long
    /// axis orthogonal to 4CH (normal l x n_ch4).
    pub fn ground_truth(&self) -> GroundTruth {
        let l = angles_to_normal(&self.lv_long_axis);
        let cross = |a: &UnitVector3, b: (f64, f64, f64)| {
            UnitVector3::new(
                a.uy * b.2 - a.uz * b.1,
                a.uz * b.0 - a.ux * b.2,
                a.ux * b.1 - a.uy * b.0,
            )
            .expect("non-degenerate axis")
        };
        let n_ch4 = cross(&l, (1.0, 0.0, 0.0));
        let n_ch2 = cross(&l, (n_ch4.ux, n_ch4.uy, n_ch4.uz));
        let ch2 = normal_to_angles(&n_ch2);
        GroundTruth {
            lv_centroid_mm: self.lv_center,
            sa: self.lv_long_axis,
            ch4: normal_to_angles(&n_ch4),
            ch2,
            ch2_axial_planned: (ch2.elevation_deg - 90.0).abs() < 0.5,
        }
    }
}

/// Distance-weighted LV membership in the rotated long-axis frame; returns
/// the normalized squared radius for the given equatorial/axial semi-axes.
fn lv_r2(p: PhysicalPoint, center: PhysicalPoint, l: &UnitVector3, a_long: f64, b_short: f64) -> f64 {
    let d = (p.x - center.x, p.y - center.y, p.z - center.z);
    let along = d.0 * l.ux + d.1 * l.uy + d.2 * l.uz;
    let r2 = d.0 * d.0 + d.1 * d.1 + d.2 * d.2 - along * along;
    along * along / (a_long * a_long) + r2 / (b_short * b_short)
}

/// Rasterize the phantom. Returns the volume, its exact ground truth and the
/// SNR ROI pair (muscle signal box anterior of the lungs, corner air box).
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, GroundTruth, SnrRois)> {
    spec.validate()?;
    let (nx, ny, nz) = spec.dims;
    let mut data = vec![0.0f32; nx * ny * nz];
    let l = angles_to_normal(&spec.lv_long_axis);
    let wall_a = spec.lv_semi_axes.0 + spec.wall_thickness_mm;
    let wall_b = spec.lv_semi_axes.1 + spec.wall_thickness_mm;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = PhysicalPoint::new(
                    x as f64 * spec.spacing.0,
                    y as f64 * spec.spacing.1,
                    z as f64 * spec.spacing.2,
                );
                let mut val = 0.0f32;
                if spec.torso_r2(p, 0.0) <= 1.0 {
                    val = if spec.torso_r2(p, spec.fat_thickness_mm) <= 1.0 {
                        spec.muscle_intensity
                    } else {
                        spec.fat_intensity
                    };
                    if spec.left_lung.contains(p) || spec.right_lung.contains(p) {
                        val = spec.lung_intensity;
                    }
                    if lv_r2(p, spec.lv_center, &l, wall_a, wall_b) <= 1.0 {
                        val = spec.wall_intensity;
                    }
                    if lv_r2(p, spec.lv_center, &l, spec.lv_semi_axes.0, spec.lv_semi_axes.1)
                        <= 1.0
                    {
                        val = spec.blood_intensity;
                    }
                }
                data[x + nx * (y + ny * z)] = val;
            }
        }
    }
    // half-normal noise floor keeps the pre-degradation SNR finite
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, spec.noise_floor_sigma)
        .map_err(|e| Error::Parameter(e.to_string()))?;
    for v in &mut data {
        *v = (*v as f64 + normal.sample(&mut rng)).abs() as f32;
    }

    let volume = Volume::new(
        spec.dims,
        spec.spacing,
        data,
        VolumeMeta {
            patient_id: spec.patient_id.clone(),
            n_coils: 2,
            snr_tag: None,
            provenance: "phantom".into(),
        },
    )?;

    // signal box: muscle band anterior of the lungs, scaled with the torso
    let c = spec.torso_center();
    let inner_y = spec.torso_semi_axes.1 - spec.fat_thickness_mm;
    let sig_center_y = c.y - 0.8 * inner_y;
    let to_idx = |mm: f64, sp: f64, n: usize| -> usize {
        (mm / sp).round().clamp(0.0, (n - 1) as f64) as usize
    };
    let signal = BoxRoi::new(
        (
            to_idx(c.x - 15.0, spec.spacing.0, nx),
            to_idx(sig_center_y - 8.0, spec.spacing.1, ny),
            nz / 4,
        ),
        (
            to_idx(c.x + 15.0, spec.spacing.0, nx) + 1,
            to_idx(sig_center_y + 8.0, spec.spacing.1, ny) + 1,
            3 * nz / 4,
        ),
    );
    let background = BoxRoi::new((1, 1, 1), (9.min(nx / 4), 9.min(ny / 4), nz.min(9)));
    let rois = SnrRois { signal, background };
    rois.validate(spec.dims)?;
    Ok((volume, spec.ground_truth(), rois))
}

/// Uniform ranges for population diversity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationSpec {
    pub torso_scale: (f64, f64),
    pub lv_azimuth_deg: (f64, f64),
    pub lv_elevation_deg: (f64, f64),
    /// Left-lung semi-axes multiplier; the right lung gets the inverse.
    pub lung_asymmetry: (f64, f64),
    pub fat_thickness_mm: (f64, f64),
}

impl Default for VariationSpec {
    fn default() -> Self {
        Self {
            torso_scale: (0.8, 1.2),
            lv_azimuth_deg: (30.0, 70.0),
            lv_elevation_deg: (25.0, 55.0),
            lung_asymmetry: (0.85, 1.15),
            fat_thickness_mm: (8.0, 16.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Draw `n` phantom specs with matching dataset cases. Deterministic per
/// seed; patient ids are unique.
pub fn sample_population(
    n: usize,
    variation: &VariationSpec,
    seed: u64,
) -> Result<Vec<(PhantomSpec, Case)>> {
    if n == 0 {
        return Err(Error::Parameter("population size must be >= 1".into()));
    }
    let base = PhantomSpec::default();
    let center = base.torso_center();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        let scale = uniform(&mut rng, variation.torso_scale);
        let asym = uniform(&mut rng, variation.lung_asymmetry);
        let scale_pt = |p: PhysicalPoint| {
            PhysicalPoint::new(
                center.x + scale * (p.x - center.x),
                center.y + scale * (p.y - center.y),
                center.z + scale * (p.z - center.z),
            )
        };
        let scale_lung = |e: &Ellipsoid, f: f64| Ellipsoid {
            center: scale_pt(e.center),
            semi_axes: (
                e.semi_axes.0 * scale * f,
                e.semi_axes.1 * scale * f,
                e.semi_axes.2 * scale * f,
            ),
        };
        let spec = PhantomSpec {
            patient_id: format!("phantom{i:03}"),
            torso_semi_axes: (base.torso_semi_axes.0 * scale, base.torso_semi_axes.1 * scale),
            fat_thickness_mm: uniform(&mut rng, variation.fat_thickness_mm),
            left_lung: scale_lung(&base.left_lung, asym),
            right_lung: scale_lung(&base.right_lung, 1.0 / asym),
            lv_center: scale_pt(base.lv_center),
            lv_long_axis: PlaneAngles::canonical(
                uniform(&mut rng, variation.lv_azimuth_deg),
                uniform(&mut rng, variation.lv_elevation_deg),
            ),
            lv_semi_axes: (base.lv_semi_axes.0 * scale, base.lv_semi_axes.1 * scale),
            seed: seed.wrapping_add(i as u64),
            ..base.clone()
        };
        spec.validate()?;
        let case = Case {
            patient_id: spec.patient_id.clone(),
            snr_tag: None,
            volume_path: None,
            centroid_features: None,
            angulation_features: None,
            truth: spec.ground_truth(),
        };
        out.push((spec, case));
    }
    Ok(out)
}
