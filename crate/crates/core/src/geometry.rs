//! Plane-angle algebra, direct least-squares ellipse fitting and the
//! geometric initial short-axis estimate.
//!
//! Convention: azimuth is measured in the axial plane from +x toward +y,
//! elevation from the axial plane toward +z. Planes are unoriented, so
//! normals are canonicalized to the hemisphere `uz >= 0` and all angle
//! comparisons use the absolute dot product.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::segmentation::{segment_image, Connectivity, SegParams};
use crate::volume::Volume;

/// Azimuth/elevation decomposition of an unoriented plane orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneAngles {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl PlaneAngles {
    /// Wrap azimuth into [0, 360), clamp elevation into [0, 90] and apply
    /// the elevation-90 tie-break (azimuth forced to 0).
    pub fn canonical(azimuth_deg: f64, elevation_deg: f64) -> Self {
        let el = elevation_deg.clamp(0.0, 90.0);
        let mut az = azimuth_deg.rem_euclid(360.0);
        if el >= 90.0 {
            az = 0.0;
        }
        Self {
            azimuth_deg: az,
            elevation_deg: el,
        }
    }
}

/// Unit-norm 3D direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitVector3 {
    pub ux: f64,
    pub uy: f64,
    pub uz: f64,
}

impl UnitVector3 {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if n < 1e-12 {
            return Err(Error::Parameter("zero vector has no direction".into()));
        }
        Ok(Self {
            ux: x / n,
            uy: y / n,
            uz: z / n,
        })
    }

    pub fn dot(&self, o: &UnitVector3) -> f64 {
        self.ux * o.ux + self.uy * o.uy + self.uz * o.uz
    }
}

/// Plane normal for the given angles.
pub fn angles_to_normal(a: &PlaneAngles) -> UnitVector3 {
    let az = a.azimuth_deg.to_radians();
    let el = a.elevation_deg.to_radians();
    UnitVector3 {
        ux: el.cos() * az.cos(),
        uy: el.cos() * az.sin(),
        uz: el.sin(),
    }
}

/// Canonical angles for a normal: hemisphere uz >= 0 first, elevation-90
/// tie-break afterwards.
pub fn normal_to_angles(n: &UnitVector3) -> PlaneAngles {
    let (mut x, mut y, mut z) = (n.ux, n.uy, n.uz);
    if z < 0.0 {
        x = -x;
        y = -y;
        z = -z;
    }
    let r = (x * x + y * y).sqrt();
    if r < 1e-12 {
        return PlaneAngles {
            azimuth_deg: 0.0,
            elevation_deg: 90.0,
        };
    }
    let az = y.atan2(x).to_degrees().rem_euclid(360.0);
    let el = z.atan2(r).to_degrees().clamp(0.0, 90.0);
    PlaneAngles {
        azimuth_deg: az,
        elevation_deg: el,
    }
}

/// 3D angle between two unoriented planes, in degrees within [0, 90].
pub fn angle3d(a: &PlaneAngles, b: &PlaneAngles) -> f64 {
    let na = angles_to_normal(a);
    let nb = angles_to_normal(b);
    // atan2(|cross|, |dot|) stays accurate for near-parallel normals, where
    // acos(dot) bottoms out around its ~1e-8 rad precision floor.
    let cx = na.uy * nb.uz - na.uz * nb.uy;
    let cy = na.uz * nb.ux - na.ux * nb.uz;
    let cz = na.ux * nb.uy - na.uy * nb.ux;
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(na.dot(&nb).abs()).to_degrees()
}

/// Geometric ellipse in a 2D plane, lengths in mm, theta in [0, 180).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse2D {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    pub theta_deg: f64,
}

impl Ellipse2D {
    /// Unit vector along the major axis.
    pub fn major_axis_dir(&self) -> (f64, f64) {
        let t = self.theta_deg.to_radians();
        (t.cos(), t.sin())
    }
}

fn solve_cubic(b: f64, c: f64, d: f64) -> Vec<f64> {
    // monic cubic x^3 + b x^2 + c x + d
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = -4.0 * p * p * p - 27.0 * q * q;
    if disc >= 0.0 {
        let r = (-p / 3.0).max(0.0).sqrt();
        if r < 1e-300 {
            return vec![shift];
        }
        let arg = (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0);
        let theta = arg.acos();
        (0..3)
            .map(|k| 2.0 * r * ((theta + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift)
            .collect()
    } else {
        let s = (q * q / 4.0 + p * p * p / 27.0).sqrt();
        vec![(-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt() + shift]
    }
}

fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    // adjugate rows of a rank-2 matrix are proportional to the null vector
    let rows = [
        Vector3::new(
            m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)],
            m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)],
            m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)],
        ),
        Vector3::new(
            m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)],
            m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)],
            m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)],
        ),
        Vector3::new(
            m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)],
            m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)],
            m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        ),
    ];
    let best = rows
        .iter()
        .max_by(|a, b| a.norm_squared().partial_cmp(&b.norm_squared()).unwrap())?;
    if best.norm_squared() < 1e-30 {
        return None;
    }
    Some(best / best.norm())
}

/// Direct least-squares conic fit constrained to an ellipse
/// (Fitzgibbon/Halir–Flusser).
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<Ellipse2D> {
    let n = points.len();
    if n < 6 {
        return Err(Error::Fit(format!("need >= 6 points, got {n}")));
    }
    // normalize for conditioning
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let mean_dist = points
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64;
    if mean_dist < 1e-12 {
        return Err(Error::Fit("degenerate point set".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;

    // scatter blocks of the design matrix [x^2, xy, y^2 | x, y, 1]
    let mut s11 = Matrix3::<f64>::zeros();
    let mut s12 = Matrix3::<f64>::zeros();
    let mut s22 = Matrix3::<f64>::zeros();
    for p in points {
        let x = (p.0 - mx) * s;
        let y = (p.1 - my) * s;
        let q = [x * x, x * y, y * y];
        let l = [x, y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                s11[(i, j)] += q[i] * q[j];
                s12[(i, j)] += q[i] * l[j];
                s22[(i, j)] += l[i] * l[j];
            }
        }
    }
    let s22_inv = s22
        .try_inverse()
        .ok_or_else(|| Error::Fit("degenerate (collinear) input".into()))?;
    let m = s11 - s12 * s22_inv * s12.transpose();
    // constraint matrix C1 = [[0,0,2],[0,-1,0],[2,0,0]]; solve C1^-1 M a = λ a
    let c1_inv = Matrix3::new(0.0, 0.0, 0.5, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0);
    let sys = c1_inv * m;
    let tr = sys.trace();
    let minors = sys[(0, 0)] * sys[(1, 1)] - sys[(0, 1)] * sys[(1, 0)]
        + sys[(0, 0)] * sys[(2, 2)]
        - sys[(0, 2)] * sys[(2, 0)]
        + sys[(1, 1)] * sys[(2, 2)]
        - sys[(1, 2)] * sys[(2, 1)];
    let det = sys.determinant();
    let mut a1 = None;
    for ev in solve_cubic(-tr, minors, -det) {
        if let Some(v) = null_vector(&(sys - Matrix3::identity() * ev)) {
            if 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0 {
                a1 = Some(v);
                break;
            }
        }
    }
    let a1 = a1.ok_or_else(|| Error::Fit("no ellipse solution".into()))?;
    let a2 = -s22_inv * s12.transpose() * a1;

    // denormalize: coefficients in (u, v) = (x - mx, y - my)
    let (a, b, c) = (a1[0] * s * s, a1[1] * s * s, a1[2] * s * s);
    let (d, e, f) = (a2[0] * s, a2[1] * s, a2[2]);
    // shift back to absolute coordinates
    let dd = -2.0 * a * mx - b * my + d;
    let ee = -b * mx - 2.0 * c * my + e;
    let ff = a * mx * mx + b * mx * my + c * my * my - d * mx - e * my + f;
    conic_to_ellipse(a, b, c, dd, ee, ff)
}

/// Geometric parameters of the conic A x^2 + B xy + C y^2 + D x + E y + F = 0.
fn conic_to_ellipse(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Result<Ellipse2D> {
    let denom = 4.0 * a * c - b * b;
    if denom <= 0.0 {
        return Err(Error::Fit("conic is not an ellipse".into()));
    }
    let cx = (b * e - 2.0 * c * d) / denom;
    let cy = (b * d - 2.0 * a * e) / denom;
    let f_center = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    let sum = a + c;
    let diff = ((a - c).powi(2) + b * b).sqrt();
    let l1 = (sum + diff) / 2.0; // larger eigenvalue -> minor axis
    let l2 = (sum - diff) / 2.0;
    let sq1 = -f_center / l1;
    let sq2 = -f_center / l2;
    if sq1 <= 0.0 || sq2 <= 0.0 {
        return Err(Error::Fit("degenerate ellipse".into()));
    }
    // eigenvector of the smaller eigenvalue gives the major axis direction
    let theta = if b.abs() < 1e-15 && (a - c).abs() < 1e-15 {
        0.0
    } else {
        0.5 * b.atan2(a - c) + std::f64::consts::FRAC_PI_2
    };
    let (semi_major, semi_minor) = (sq2.sqrt(), sq1.sqrt());
    Ok(Ellipse2D {
        center: (cx, cy),
        semi_major,
        semi_minor,
        theta_deg: theta.to_degrees().rem_euclid(180.0),
    })
}

/// Boundary voxels of a 2D pool: members with a missing 4-neighbor.
pub fn pool_boundary(pool: &HashSet<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = pool
        .iter()
        .filter(|&&(x, y)| {
            [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                nx < 0 || ny < 0 || !pool.contains(&(nx as usize, ny as usize))
            })
        })
        .copied()
        .collect();
    out.sort_unstable();
    out
}

fn erode_mask(m: &HashSet<(usize, usize)>) -> HashSet<(usize, usize)> {
    m.iter()
        .filter(|&&(x, y)| {
            x > 0
                && y > 0
                && m.contains(&(x - 1, y))
                && m.contains(&(x + 1, y))
                && m.contains(&(x, y - 1))
                && m.contains(&(x, y + 1))
        })
        .copied()
        .collect()
}

fn mask_components(m: &HashSet<(usize, usize)>) -> Vec<HashSet<(usize, usize)>> {
    let mut left = m.clone();
    let mut out = Vec::new();
    while let Some(&start) = left.iter().next() {
        let mut comp = HashSet::new();
        let mut stack = vec![start];
        left.remove(&start);
        while let Some((x, y)) = stack.pop() {
            comp.insert((x, y));
            for n in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
                if left.remove(&n) {
                    stack.push(n);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Add every complement voxel of the bounding box that is not reachable from
/// outside the mask (4-connectivity).
fn fill_mask_holes(m: &HashSet<(usize, usize)>) -> HashSet<(usize, usize)> {
    if m.is_empty() {
        return m.clone();
    }
    let xlo = m.iter().map(|p| p.0).min().unwrap() as i64;
    let xhi = m.iter().map(|p| p.0).max().unwrap() as i64;
    let ylo = m.iter().map(|p| p.1).min().unwrap() as i64;
    let yhi = m.iter().map(|p| p.1).max().unwrap() as i64;
    let mut outside: HashSet<(i64, i64)> = HashSet::new();
    let mut stack = vec![(xlo - 1, ylo - 1)];
    while let Some((x, y)) = stack.pop() {
        if x < xlo - 1 || x > xhi + 1 || y < ylo - 1 || y > yhi + 1 || outside.contains(&(x, y)) {
            continue;
        }
        if x >= 0 && y >= 0 && m.contains(&(x as usize, y as usize)) {
            continue;
        }
        outside.insert((x, y));
        stack.extend([(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]);
    }
    let mut filled = m.clone();
    for x in xlo..=xhi {
        for y in ylo..=yhi {
            if !outside.contains(&(x, y)) {
                filled.insert((x as usize, y as usize));
            }
        }
    }
    filled
}

/// Robust clean-up of a segmented blood-pool mask before geometric fitting.
///
/// Under heavy noise the graph segmentation can leak the pool into
/// surrounding tissue through thin bright bridges. Three corrections,
/// all relative so the result stays invariant to intensity scaling:
/// gate the mask at 75 % of the local pool level sampled around the seed
/// (and keep the gated component covering the seed), open by one round of
/// erosion/dilation to cut single-voxel tendrils, and fill interior holes
/// so the boundary stays a single closed contour.
pub fn refine_pool(
    v: &Volume,
    z: usize,
    seed_xy: (usize, usize),
    pool: &HashSet<(usize, usize)>,
) -> HashSet<(usize, usize)> {
    let (nx, ny, _) = v.dims;
    let at = |x: usize, y: usize| v.data[x + nx * y + nx * ny * z] as f64;
    let mut local: Vec<f64> = (-1i64..=1)
        .flat_map(|dy| (-1i64..=1).map(move |dx| (dx, dy)))
        .filter_map(|(dx, dy)| {
            let (x, y) = (seed_xy.0 as i64 + dx, seed_xy.1 as i64 + dy);
            (x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny)
                .then(|| at(x as usize, y as usize))
        })
        .collect();
    if local.is_empty() {
        return pool.clone();
    }
    local.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let gate = 0.75 * local[local.len() / 2];
    let gated: HashSet<(usize, usize)> =
        pool.iter().copied().filter(|&(x, y)| at(x, y) >= gate).collect();
    let core = match mask_components(&gated)
        .into_iter()
        .max_by_key(|c| (c.contains(&seed_xy) as usize, c.len()))
    {
        Some(c) if !c.is_empty() => c,
        _ => return pool.clone(),
    };
    let eroded = mask_components(&erode_mask(&core))
        .into_iter()
        .max_by_key(|c| c.len())
        .unwrap_or_default();
    let mut opened = if eroded.is_empty() { core.clone() } else { eroded };
    let mut grown = opened.clone();
    for &(x, y) in &opened {
        for n in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
            if core.contains(&n) {
                grown.insert(n);
            }
        }
    }
    opened = grown;
    fill_mask_holes(&opened)
}

fn pool_centroid_mm(pool: &HashSet<(usize, usize)>, spacing: (f64, f64, f64)) -> (f64, f64) {
    let n = pool.len() as f64;
    let sx: f64 = pool.iter().map(|p| p.0 as f64).sum();
    let sy: f64 = pool.iter().map(|p| p.1 as f64).sum();
    (sx / n * spacing.0, sy / n * spacing.1)
}

/// Segment one axial slice and return the 4-connected component containing
/// the given in-slice voxel.
pub fn slice_component(
    v: &Volume,
    z: usize,
    seed_xy: (usize, usize),
    p: &SegParams,
) -> Result<HashSet<(usize, usize)>> {
    let (nx, ny, nz) = v.dims;
    if z >= nz || seed_xy.0 >= nx || seed_xy.1 >= ny {
        return Err(Error::OutOfBounds {
            index: (seed_xy.0 as i64, seed_xy.1 as i64, z as i64),
            dims: v.dims,
        });
    }
    let slice: Vec<f32> = v.data[nx * ny * z..nx * ny * (z + 1)].to_vec();
    let seg = segment_image(&slice, (nx, ny, 1), Connectivity::Four2D, p)?;
    let target = seg.labels[seed_xy.0 + nx * seed_xy.1];
    Ok(seg
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == target)
        .map(|(i, _)| (i % nx, i / nx))
        .collect())
}

/// Initial short-axis estimate from one blood-pool cross-section.
///
/// The in-plane long-axis direction comes from the fitted ellipse major
/// axis; the out-of-plane tilt is recovered from the drift of the pool
/// centroid across the two adjacent slices via
/// `tan(elevation) = drift_rate * b^2 / (a^2 - b^2)`,
/// which is exact for an ellipsoidal pool.
pub fn initial_short_axis(
    pool: &HashSet<(usize, usize)>,
    slice_z: usize,
    v: &Volume,
    seg: &SegParams,
) -> Result<PlaneAngles> {
    if pool.is_empty() {
        return Err(Error::Fit("empty blood pool".into()));
    }
    let boundary = pool_boundary(pool);
    if boundary.len() < 6 {
        return Err(Error::Fit(format!(
            "pool boundary has {} points, need >= 6",
            boundary.len()
        )));
    }
    let pts: Vec<(f64, f64)> = boundary
        .iter()
        .map(|&(x, y)| (x as f64 * v.spacing.0, y as f64 * v.spacing.1))
        .collect();
    let ellipse = fit_ellipse(&pts)?;
    let (a, b) = (ellipse.semi_major, ellipse.semi_minor);
    let (mut ux, mut uy) = ellipse.major_axis_dir();

    // near-circular section: long axis is perpendicular to the slice
    if (a - b) / a < 1e-6 {
        return Ok(PlaneAngles::canonical(0.0, 90.0));
    }

    // pool centroid drift across adjacent slices, projected on the major axis
    let seed = (
        (ellipse.center.0 / v.spacing.0).round().clamp(0.0, (v.dims.0 - 1) as f64) as usize,
        (ellipse.center.1 / v.spacing.1).round().clamp(0.0, (v.dims.1 - 1) as f64) as usize,
    );
    let c_here = pool_centroid_mm(pool, v.spacing);
    let mut lo = c_here;
    let mut hi = c_here;
    let mut dz_mm = 0.0;
    if slice_z > 0 {
        if let Ok(p) = slice_component(v, slice_z - 1, seed, seg) {
            if !p.is_empty() && p.len() < v.dims.0 * v.dims.1 / 2 {
                lo = pool_centroid_mm(&refine_pool(v, slice_z - 1, seed, &p), v.spacing);
                dz_mm += v.spacing.2;
            }
        }
    }
    if slice_z + 1 < v.dims.2 {
        if let Ok(p) = slice_component(v, slice_z + 1, seed, seg) {
            if !p.is_empty() && p.len() < v.dims.0 * v.dims.1 / 2 {
                hi = pool_centroid_mm(&refine_pool(v, slice_z + 1, seed, &p), v.spacing);
                dz_mm += v.spacing.2;
            }
        }
    }
    // In-plane direction: blend the ellipse major axis with the centroid
    // drift direction. For a spheroidal pool both point along the long-axis
    // projection, but their noise regimes are complementary: the fitted
    // orientation degrades as the section becomes circular, the drift
    // direction as the drift shrinks. Weights reflect those sensitivities.
    let (dx, dy) = (hi.0 - lo.0, hi.1 - lo.1);
    let dmag = (dx * dx + dy * dy).sqrt();
    let mut rho;
    if dz_mm > 0.0 && dmag > 1e-9 {
        let (mut ex, mut ey) = (ux, uy);
        if ex * dx + ey * dy < 0.0 {
            ex = -ex;
            ey = -ey;
        }
        let we = ((a * a - b * b) / (a * a)).max(0.0);
        let wd = dmag / (dmag + 3.0);
        let (bx, by) = (we * ex + wd * dx / dmag, we * ey + wd * dy / dmag);
        let bn = (bx * bx + by * by).sqrt();
        if bn > 1e-9 {
            ux = bx / bn;
            uy = by / bn;
        }
        rho = ((dx * ux + dy * uy) / dz_mm).abs();
    } else {
        rho = if dz_mm > 0.0 { (dx * ux + dy * uy) / dz_mm } else { 0.0 };
        if rho < 0.0 {
            // unoriented axis: flip the in-plane direction instead
            ux = -ux;
            uy = -uy;
            rho = -rho;
        }
    }
    let elevation = (rho * b * b / (a * a - b * b)).atan();
    let (ce, se) = (elevation.cos(), elevation.sin());
    Ok(normal_to_angles(&UnitVector3 {
        ux: ce * ux,
        uy: ce * uy,
        uz: se,
    }))
}

/// Mean absolute deviation; angular inputs (degrees) are wrapped to
/// [-180, 180] before taking magnitudes.
pub fn mean_abs_deviation(pred: &[f64], truth: &[f64], wrap_degrees: bool) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Precondition(
            "prediction/truth length mismatch or empty".into(),
        ));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(&p, &t)| {
            let mut d = p - t;
            if wrap_degrees {
                d = (d + 180.0).rem_euclid(360.0) - 180.0;
            }
            d.abs()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}
