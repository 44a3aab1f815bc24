//! Depth-continuous edge extraction: voxel cutting, sequential RANSAC plane fitting,
//! plane-pair filtering and plane intersection.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn with_intensity(points: Vec<Vector3<f64>>, intensity: Vec<f64>) -> Result<Self> {
        let cloud = Self {
            points,
            intensity: Some(intensity),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = &self.intensity {
            if i.len() != self.points.len() {
                return Err(Error::InvalidParameter(format!(
                    "intensity has {} entries for {} points",
                    i.len(),
                    self.points.len()
                )));
            }
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidParameter("non-finite point coordinate".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Appends `other`; intensity is kept only when both clouds carry it.
    pub fn extend(&mut self, other: &PointCloud) {
        self.intensity = match (self.intensity.take(), &other.intensity) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(_)) if self.points.is_empty() => other.intensity.clone(),
            _ => None,
        };
        self.points.extend_from_slice(&other.points);
    }
}

pub type VoxelKey = [i64; 3];

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Point indices per cell, ordered by cell index.
    pub cells: BTreeMap<VoxelKey, Vec<usize>>,
}

impl VoxelGrid {
    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        voxel_key(p, self.voxel_size)
    }

    /// Cells with fewer points than `min_points` are kept but skipped by plane fitting.
    pub fn skip_for_planes(&self, key: &VoxelKey, min_points: usize) -> bool {
        self.cells.get(key).is_none_or(|c| c.len() < min_points)
    }

    pub fn point_count(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    /// Indices of the cell followed by neighbor-cell points within `pad` of its bounds.
    pub fn padded_indices(&self, key: &VoxelKey, points: &[Vector3<f64>], pad: f64) -> Vec<usize> {
        let mut out = self.cells.get(key).cloned().unwrap_or_default();
        if pad <= 0.0 {
            return out;
        }
        let lo = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * self.voxel_size;
        let hi = lo.add_scalar(self.voxel_size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let nk = [key[0] + dx, key[1] + dy, key[2] + dz];
                    let Some(cell) = self.cells.get(&nk) else {
                        continue;
                    };
                    out.extend(cell.iter().copied().filter(|&i| {
                        let p = &points[i];
                        (0..3).all(|a| p[a] >= lo[a] - pad && p[a] <= hi[a] + pad)
                    }));
                }
            }
        }
        out
    }
}

fn voxel_key(p: &Vector3<f64>, size: f64) -> VoxelKey {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidParameter("voxel_size must be > 0".into()));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut cells: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        cells.entry(voxel_key(p, voxel_size)).or_default().push(i);
    }
    Ok(VoxelGrid { voxel_size, cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedPlane {
    /// Unit normal; the plane is `normal · x = offset`.
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_indices: Vec<usize>,
    pub inlier_rms: f64,
    /// Approximate standard deviation (radians) of the normal direction, from the
    /// inlier RMS over the weaker in-plane spread.
    pub normal_std: f64,
    /// Extent (m) of the inliers across the weaker in-plane direction, as the width of a
    /// uniform strip with the same spread.
    pub width: f64,
}

impl FittedPlane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub dist_threshold: f64,
    pub max_planes: usize,
    pub min_inliers: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            dist_threshold: 0.02,
            max_planes: 5,
            min_inliers: 30,
            max_iterations: 200,
            rng_seed: 0,
        }
    }
}

/// Points within this multiple of the threshold are consumed along with an accepted
/// plane, so that the tails of its noise do not seed parallel ghost planes.
const CONSUME_BAND: f64 = 4.0;

/// Least-squares plane through `points[idx]`: smallest-eigenvalue normal, offset and
/// the middle scatter eigenvalue.
fn fit_plane_lsq(points: &[Vector3<f64>], idx: &[usize]) -> Option<(Vector3<f64>, f64, f64)> {
    if idx.len() < 3 {
        return None;
    }
    let n = idx.len() as f64;
    let centroid = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let imin = eig.eigenvalues.imin();
    let normal: Vector3<f64> = eig.eigenvectors.column(imin).normalize();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    let normal = canonical_sign(normal);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Some((normal, normal.dot(&centroid), ev[1]))
}

/// Flips `v` so its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    if v[v.iamax()] < 0.0 {
        -v
    } else {
        v
    }
}

/// A new plane within this angle of an earlier one and closer than
/// `GHOST_BAND × threshold` to it is treated as a noise-tail duplicate.
const REFINE_ROUNDS: usize = 30;

const GHOST_ANGLE_DEG: f64 = 10.0;
const GHOST_BAND: f64 = 5.0;
/// Regathered plane support excludes points within this multiple of the threshold of
/// any other plane in the voxel.
const EXCLUSION_BAND: f64 = 3.0;

/// Greedy sequential RANSAC with least-squares refinement.
///
/// Inlier indices refer to positions in `points`. Deterministic for a fixed seed.
pub fn ransac_extract_planes(points: &[Vector3<f64>], params: &RansacParams) -> Vec<FittedPlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut planes = Vec::new();
    let thr = params.dist_threshold;

    let mut attempts = 0;
    while planes.len() < params.max_planes
        && attempts < 2 * params.max_planes
        && remaining.len() >= params.min_inliers.max(3)
    {
        attempts += 1;
        let mut best: Option<(Vector3<f64>, f64, usize)> = None;
        let mut needed = params.max_iterations;
        let mut iter = 0;
        while iter < needed.min(params.max_iterations) {
            iter += 1;
            let a = remaining[rng.random_range(0..remaining.len())];
            let b = remaining[rng.random_range(0..remaining.len())];
            let c = remaining[rng.random_range(0..remaining.len())];
            let cross = (points[b] - points[a]).cross(&(points[c] - points[a]));
            let norm = cross.norm();
            if norm < 1e-9 {
                continue;
            }
            let normal = cross / norm;
            let offset = normal.dot(&points[a]);
            let count = remaining
                .iter()
                .filter(|&&i| (normal.dot(&points[i]) - offset).abs() <= thr)
                .count();
            if best.is_none_or(|(_, _, bc)| count > bc) {
                best = Some((normal, offset, count));
                // Adaptive iteration bound for 99.9% confidence.
                let w = count as f64 / remaining.len() as f64;
                let p_good = w * w * w;
                if p_good >= 1.0 {
                    needed = iter;
                } else if p_good > 0.0 {
                    let n = ((1.0 - 0.999f64).ln() / (1.0 - p_good).ln()).ceil();
                    needed = (n as usize).max(20);
                }
            }
        }
        let Some((mut normal, mut offset, count)) = best else {
            break;
        };
        if count < params.min_inliers {
            break;
        }
        // Truncated least squares contracts slowly when the threshold is close to the
        // noise level, so refine until the inlier set settles.
        let mut spread = 0.0;
        let mut prev: Vec<usize> = Vec::new();
        for _ in 0..REFINE_ROUNDS {
            let inliers: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&i| (normal.dot(&points[i]) - offset).abs() <= thr)
                .collect();
            if inliers == prev {
                break;
            }
            match fit_plane_lsq(points, &inliers) {
                Some((n, o, mid)) => {
                    normal = n;
                    offset = o;
                    spread = mid;
                }
                None => break,
            }
            prev = inliers;
        }
        let inliers: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| (normal.dot(&points[i]) - offset).abs() <= thr)
            .collect();
        if inliers.len() < params.min_inliers {
            break;
        }
        let rms = (inliers
            .iter()
            .map(|&i| (normal.dot(&points[i]) - offset).powi(2))
            .sum::<f64>()
            / inliers.len() as f64)
            .sqrt();
        remaining.retain(|&i| (normal.dot(&points[i]) - offset).abs() > CONSUME_BAND * thr);
        let cos_ghost = GHOST_ANGLE_DEG.to_radians().cos();
        let centroid = inliers.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / inliers.len() as f64;
        let ghost = planes.iter().any(|p: &FittedPlane| {
            p.normal.dot(&normal).abs() >= cos_ghost && p.signed_distance(&centroid).abs() < GHOST_BAND * thr
        });
        if ghost {
            continue;
        }
        let inliers_len = inliers.len();
        planes.push(FittedPlane {
            normal,
            offset,
            inlier_indices: inliers,
            inlier_rms: rms,
            normal_std: if spread > 0.0 { rms / spread.sqrt() } else { f64::INFINITY },
            width: (12.0 * spread / inliers_len as f64).sqrt(),
        });
    }
    planes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeSource {
    pub voxel: VoxelKey,
    pub planes: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge3D {
    pub point_on_line: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub source: EdgeSource,
    /// Normals of the two planes that produced the edge.
    pub plane_normals: [Vector3<f64>; 2],
}

impl Edge3D {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.point_on_line + self.direction * t
    }

    pub fn length(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn midpoint(&self) -> Vector3<f64> {
        self.at(0.5 * (self.t_min + self.t_max))
    }

    /// Distance from `p` to the infinite supporting line.
    pub fn line_distance(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.point_on_line;
        (d - self.direction * self.direction.dot(&d)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeExtractionConfig {
    pub voxel_size: f64,
    pub min_points_per_voxel: usize,
    pub ransac: RansacParams,
    /// Accepted dihedral angle range between plane normals (degrees).
    pub angle_range_deg: [f64; 2],
    /// Connectivity: each plane needs this many inliers within `conn_radius` of the line.
    pub conn_min_points: usize,
    pub conn_radius: f64,
    /// Width of the strip beside the line that each plane's surface must cover without
    /// gaps, which rejects a face that stops short of another surface.
    pub contact_radius: f64,
    /// Points this close (meters) to a voxel from its neighbors join its plane fitting,
    /// so planes lying on a cell boundary keep their full noise distribution.
    pub voxel_padding: f64,
    /// Planes whose estimated normal standard deviation exceeds this (degrees) do not
    /// form edges.
    pub max_normal_std_deg: f64,
    /// Planes narrower than this (m) do not form edges.
    pub min_plane_width: f64,
    pub edge_margin: f64,
    pub merge_angle_deg: f64,
    pub merge_offset: f64,
    pub sample_spacing: f64,
}

impl Default for EdgeExtractionConfig {
    fn default() -> Self {
        Self {
            voxel_size: VOXEL_SIZE_INDOOR,
            min_points_per_voxel: 30,
            ransac: RansacParams::default(),
            angle_range_deg: [30.0, 150.0],
            conn_min_points: 10,
            conn_radius: 0.1,
            contact_radius: 0.06,
            max_normal_std_deg: 1.0,
            min_plane_width: 0.1,
            voxel_padding: 0.15,
            edge_margin: 0.05,
            merge_angle_deg: 1.0,
            merge_offset: 0.02,
            sample_spacing: 0.02,
        }
    }
}

pub const VOXEL_SIZE_INDOOR: f64 = 0.5;
pub const VOXEL_SIZE_OUTDOOR: f64 = 1.0;

/// Smallest sine of the angle between two normals still solved for an intersection.
const MIN_INTERSECTION_SIN: f64 = 0.0872; // sin 5°

fn dihedral_deg(a: &FittedPlane, b: &FittedPlane) -> f64 {
    a.normal.dot(&b.normal).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Infinite intersection line of two planes: minimum-norm point and unit direction.
fn intersection_line(a: &FittedPlane, b: &FittedPlane) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let cross = a.normal.cross(&b.normal);
    let s = cross.norm();
    if s < MIN_INTERSECTION_SIN {
        return Err(Error::NearParallel);
    }
    let direction = canonical_sign(cross / s);
    // x = Aᵀ (A Aᵀ)⁻¹ b for A = [n_a; n_b].
    let g = a.normal.dot(&b.normal);
    let gram = Matrix2::new(1.0, g, g, 1.0);
    let lambda = gram
        .try_inverse()
        .ok_or(Error::NearParallel)?
        * Vector2::new(a.offset, b.offset);
    Ok((a.normal * lambda.x + b.normal * lambda.y, direction))
}

/// Parameters along the line of `plane`'s inliers lying within `radius` of it.
fn near_line_span(
    points: &[Vector3<f64>],
    plane: &FittedPlane,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    radius: f64,
) -> (usize, f64, f64) {
    let mut count = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &plane.inlier_indices {
        let d = points[i] - origin;
        let t = dir.dot(&d);
        if (d - dir * t).norm_squared() <= radius * radius {
            count += 1;
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    (count, lo, hi)
}

/// Connectivity test between two planes fitted on `points`.
pub fn planes_connected(
    points: &[Vector3<f64>],
    a: &FittedPlane,
    b: &FittedPlane,
    cfg: &EdgeExtractionConfig,
) -> bool {
    let Ok((origin, dir)) = intersection_line(a, b) else {
        return false;
    };
    let counts = |p: &FittedPlane| near_line_span(points, p, &origin, &dir, cfg.conn_radius).0;
    counts(a) >= cfg.conn_min_points
        && counts(b) >= cfg.conn_min_points
        && touches_line(points, a, &origin, &dir, cfg)
        && touches_line(points, b, &origin, &dir, cfg)
}

/// Whether the surface of `plane` runs up to the line: points within the RANSAC
/// threshold of the plane must fill every bin of the `contact_radius` strip beside the
/// line on the plane's side.
fn touches_line(
    points: &[Vector3<f64>],
    plane: &FittedPlane,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cfg: &EdgeExtractionConfig,
) -> bool {
    const BINS: usize = 3;
    let mut side = plane.normal.cross(dir);
    let centroid = plane.inlier_indices.iter().map(|&i| points[i]).sum::<Vector3<f64>>()
        / plane.inlier_indices.len().max(1) as f64;
    if side.dot(&(centroid - origin)) < 0.0 {
        side = -side;
    }
    let width = cfg.contact_radius / BINS as f64;
    let mut filled = [false; BINS];
    for p in points {
        if plane.signed_distance(p).abs() > cfg.ransac.dist_threshold {
            continue;
        }
        let u = side.dot(&(p - origin));
        if (0.0..cfg.contact_radius).contains(&u) {
            filled[((u / width) as usize).min(BINS - 1)] = true;
        }
    }
    filled.iter().all(|&f| f)
}

/// Index pairs of planes that form an angle within range and are connected.
pub fn plane_pair_candidates(
    points: &[Vector3<f64>],
    planes: &[FittedPlane],
    cfg: &EdgeExtractionConfig,
) -> Vec<(usize, usize)> {
    let [lo, hi] = cfg.angle_range_deg;
    let mut out = Vec::new();
    let max_std = cfg.max_normal_std_deg.to_radians();
    for i in 0..planes.len() {
        for j in i + 1..planes.len() {
            let weak = |p: &FittedPlane| p.normal_std > max_std || p.width < cfg.min_plane_width;
            if weak(&planes[i]) || weak(&planes[j]) {
                continue;
            }
            let angle = dihedral_deg(&planes[i], &planes[j]);
            if angle < lo || angle > hi {
                continue;
            }
            if planes_connected(points, &planes[i], &planes[j], cfg) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Intersection segment of two planes, clipped to where both have inliers near the
/// line and trimmed by `edge_margin` at each end.
pub fn intersect_planes(
    points: &[Vector3<f64>],
    a: &FittedPlane,
    b: &FittedPlane,
    cfg: &EdgeExtractionConfig,
    source: EdgeSource,
) -> Result<Option<Edge3D>> {
    let (origin, direction) = intersection_line(a, b)?;
    let (_, alo, ahi) = near_line_span(points, a, &origin, &direction, cfg.conn_radius);
    let (_, blo, bhi) = near_line_span(points, b, &origin, &direction, cfg.conn_radius);
    let t_min = alo.max(blo) + cfg.edge_margin;
    let t_max = ahi.min(bhi) - cfg.edge_margin;
    if !(t_min < t_max) {
        return Ok(None);
    }
    Ok(Some(Edge3D {
        point_on_line: origin,
        direction,
        t_min,
        t_max,
        source,
        plane_normals: [a.normal, b.normal],
    }))
}

/// Per-run diagnostics of edge extraction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeExtraction {
    pub edges: Vec<Edge3D>,
    pub voxels: usize,
    pub voxels_fitted: usize,
    pub planes: usize,
    /// Mean plane inlier RMS (meters); large values point at curved surfaces.
    pub mean_inlier_rms: f64,
}

fn voxel_seed(seed: u64, key: &VoxelKey) -> u64 {
    // SplitMix64 over the seed and cell index.
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &k in key {
        h ^= k as u64;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Re-collects the support of `plane` from `points` without cropping along its normal:
/// a point counts when it lies within `thr` of the plane, its projection falls inside
/// the box `[lo, hi]` and it is farther than `EXCLUSION_BAND · thr` from every plane in
/// `others`. Dropping the points shared with a neighboring surface keeps either plane
/// from tilting toward the other. Planes just outside the box lose their support.
fn regather_plane(
    points: &[Vector3<f64>],
    plane: &FittedPlane,
    others: &[&FittedPlane],
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
    thr: f64,
    min_inliers: usize,
) -> Option<FittedPlane> {
    let (mut normal, mut offset) = (plane.normal, plane.offset);
    let mut prev: Vec<usize> = Vec::new();
    for _ in 0..REFINE_ROUNDS {
        let idx: Vec<usize> = (0..points.len())
            .filter(|&i| {
                let d = normal.dot(&points[i]) - offset;
                let q = points[i] - normal * d;
                d.abs() <= thr
                    && (0..3).all(|a| q[a] >= lo[a] && q[a] <= hi[a])
                    && others.iter().all(|e| e.signed_distance(&points[i]).abs() > EXCLUSION_BAND * thr)
            })
            .collect();
        if idx.len() < min_inliers {
            return None;
        }
        if idx == prev {
            break;
        }
        let (n, o, _) = fit_plane_lsq(points, &idx)?;
        normal = n;
        offset = o;
        prev = idx;
    }
    let (normal, offset, spread) = fit_plane_lsq(points, &prev)?;
    let rms = (prev.iter().map(|&i| (normal.dot(&points[i]) - offset).powi(2)).sum::<f64>()
        / prev.len() as f64)
        .sqrt();
    Some(FittedPlane {
        normal,
        offset,
        width: (12.0 * spread / prev.len() as f64).sqrt(),
        inlier_indices: prev,
        inlier_rms: rms,
        normal_std: if spread > 0.0 { rms / spread.sqrt() } else { f64::INFINITY },
    })
}

/// Planes and edges of one voxel. `indices` covers the padded cell widened by the RANSAC
/// threshold so that regathered planes are not cropped along their normals.
fn edges_in_voxel(
    cloud: &PointCloud,
    key: &VoxelKey,
    indices: &[usize],
    cfg: &EdgeExtractionConfig,
) -> (Vec<Edge3D>, Vec<f64>) {
    let local: Vec<Vector3<f64>> = indices.iter().map(|&i| cloud.points[i]).collect();
    let params = RansacParams {
        rng_seed: voxel_seed(cfg.ransac.rng_seed, key),
        ..cfg.ransac
    };
    let thr = params.dist_threshold;
    let lo = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * cfg.voxel_size
        - Vector3::repeat(cfg.voxel_padding);
    let hi = lo.add_scalar(cfg.voxel_size + 2.0 * cfg.voxel_padding);
    let boxed: Vec<Vector3<f64>> = local
        .iter()
        .filter(|p| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]))
        .copied()
        .collect();
    let raw = ransac_extract_planes(&boxed, &params);
    let planes: Vec<FittedPlane> = raw
        .iter()
        .enumerate()
        .filter_map(|(k, p)| {
            let others: Vec<&FittedPlane> = raw.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, q)| q).collect();
            regather_plane(&local, p, &others, &lo, &hi, thr, params.min_inliers)
        })
        .collect();
    let rms = planes.iter().map(|p| p.inlier_rms).collect();
    let mut edges = Vec::new();
    for (i, j) in plane_pair_candidates(&local, &planes, cfg) {
        let source = EdgeSource {
            voxel: *key,
            planes: (i, j),
        };
        if let Ok(Some(e)) = intersect_planes(&local, &planes[i], &planes[j], cfg, source) {
            edges.push(e);
        }
    }
    (edges, rms)
}

/// Merges colinear edge segments split across voxel borders.
pub fn merge_colinear_edges(edges: Vec<Edge3D>, cfg: &EdgeExtractionConfig) -> Vec<Edge3D> {
    let cos_tol = cfg.merge_angle_deg.to_radians().cos();
    let max_gap = 2.0 * cfg.edge_margin + 0.05;
    // Each group keeps its member segments; the group line is refit on every insert.
    let mut groups: Vec<(Edge3D, Vec<Edge3D>)> = Vec::new();
    for e in edges {
        let mut target = None;
        for (gi, (line, members)) in groups.iter().enumerate() {
            if line.direction.dot(&e.direction).abs() < cos_tol {
                continue;
            }
            if line.line_distance(&e.midpoint()) > cfg.merge_offset
                || e.line_distance(&line.midpoint()) > cfg.merge_offset
            {
                continue;
            }
            let near = members.iter().any(|m| {
                let a = m.direction.dot(&(e.at(e.t_min) - m.point_on_line));
                let b = m.direction.dot(&(e.at(e.t_max) - m.point_on_line));
                let (lo, hi) = (a.min(b), a.max(b));
                lo <= m.t_max + max_gap && hi >= m.t_min - max_gap
            });
            if near {
                target = Some(gi);
                break;
            }
        }
        match target {
            Some(gi) => {
                groups[gi].1.push(e);
                groups[gi].0 = refit_group(&groups[gi].1);
            }
            None => groups.push((e.clone(), vec![e])),
        }
    }
    groups.into_iter().map(|(line, _)| line).collect()
}

fn refit_group(members: &[Edge3D]) -> Edge3D {
    let reference = members[0].direction;
    let mut dir = Vector3::zeros();
    let mut center = Vector3::zeros();
    let mut total = 0.0;
    for m in members {
        let w = m.length();
        let d = if m.direction.dot(&reference) < 0.0 {
            -m.direction
        } else {
            m.direction
        };
        dir += d * w;
        center += m.midpoint() * w;
        total += w;
    }
    let dir = canonical_sign(dir.normalize());
    let center = center / total;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in members {
        for t in [m.t_min, m.t_max] {
            let s = dir.dot(&(m.at(t) - center));
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    // Re-anchor on the point of the line closest to the origin.
    let origin = center - dir * dir.dot(&center);
    let shift = dir.dot(&(center - origin));
    Edge3D {
        point_on_line: origin,
        direction: dir,
        t_min: lo + shift,
        t_max: hi + shift,
        source: members[0].source,
        plane_normals: members[0].plane_normals,
    }
}

/// Full extraction pipeline with diagnostics; voxels are processed in parallel and
/// aggregated in cell-index order.
pub fn extract_edges_detailed(cloud: &PointCloud, cfg: &EdgeExtractionConfig) -> Result<EdgeExtraction> {
    let grid = voxelize(cloud, cfg.voxel_size)?;
    let work: Vec<(&VoxelKey, &Vec<usize>)> = grid
        .cells
        .iter()
        .filter(|(k, _)| !grid.skip_for_planes(k, cfg.min_points_per_voxel))
        .collect();
    let per_voxel: Vec<(Vec<Edge3D>, Vec<f64>)> = work
        .par_iter()
        .map(|(k, _)| {
            let idx = grid.padded_indices(k, &cloud.points, cfg.voxel_padding + cfg.ransac.dist_threshold);
            edges_in_voxel(cloud, k, &idx, cfg)
        })
        .collect();
    let mut edges = Vec::new();
    let mut rms = Vec::new();
    for (e, r) in per_voxel {
        edges.extend(e);
        rms.extend(r);
    }
    let edges = merge_colinear_edges(edges, cfg);
    Ok(EdgeExtraction {
        edges,
        voxels: grid.cells.len(),
        voxels_fitted: work.len(),
        planes: rms.len(),
        mean_inlier_rms: if rms.is_empty() {
            0.0
        } else {
            rms.iter().sum::<f64>() / rms.len() as f64
        },
    })
}

pub fn extract_depth_continuous_edges(
    cloud: &PointCloud,
    cfg: &EdgeExtractionConfig,
) -> Result<Vec<Edge3D>> {
    let out = extract_edges_detailed(cloud, cfg)?;
    if out.edges.is_empty() {
        return Err(Error::NoEdgesFound);
    }
    Ok(out.edges)
}

/// Uniform samples from `t_min` to `t_max` inclusive;
/// `floor((t_max − t_min) / spacing) + 1` points.
pub fn sample_edge_points(edge: &Edge3D, spacing: f64) -> Vec<Vector3<f64>> {
    assert!(spacing > 0.0, "spacing must be > 0");
    let len = edge.length();
    let count = (len / spacing).floor() as usize + 1;
    if count == 1 {
        return vec![edge.at(edge.t_min)];
    }
    let step = len / (count - 1) as f64;
    (0..count)
        .map(|i| edge.at(edge.t_min + step * i as f64))
        .collect()
}
