//! Synthetic scenes of bounded rectangles, ray-cast LiDAR scans with the bearing /
//! range noise model and optional beam-divergence bleeding, and rendered camera
//! edge maps under a known extrinsic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::apply_offset;
use crate::error::{Error, Result};
use crate::geometry::{
    distort_normalized, project, s2_boxplus, BearingVector, CameraIntrinsics, RigidTransform,
};
use crate::image_edge::{EdgePixelSet, GrayImage};
use crate::lidar_edge::{Edge3D, EdgeSource, PointCloud};
use crate::noise::LidarNoiseParams;

/// A bounded planar patch `corner + a·e1 + b·e2`, `a, b ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub corner: Vector3<f64>,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    /// Reflectance in `[0, 1]`, used for shading and LiDAR intensity.
    pub albedo: f64,
}

impl Rect {
    pub fn new(corner: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>, albedo: f64) -> Self {
        Self {
            corner,
            e1,
            e2,
            albedo,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.e1.cross(&self.e2).normalize()
    }

    fn coords(&self, p: &Vector3<f64>) -> (f64, f64) {
        let d = p - self.corner;
        (d.dot(&self.e1) / self.e1.norm_squared(), d.dot(&self.e2) / self.e2.norm_squared())
    }

    /// Ray parameter of the hit, if the ray `o + s·d` (`s > 0`) crosses the patch.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let n = self.e1.cross(&self.e2);
        let den = n.dot(d);
        if den.abs() < 1e-15 {
            return None;
        }
        let s = n.dot(&(self.corner - o)) / den;
        if s <= 1e-9 {
            return None;
        }
        let (a, b) = self.coords(&(o + d * s));
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(s)
    }

    /// Parameter interval of the line `p0 + s·d` inside the patch (line assumed in-plane).
    fn clip_line(&self, p0: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for e in [&self.e1, &self.e2] {
            let a0 = (p0 - self.corner).dot(e) / e.norm_squared();
            let da = d.dot(e) / e.norm_squared();
            const TOL: f64 = 1e-9;
            if da.abs() < 1e-12 {
                if a0 < -TOL || a0 > 1.0 + TOL {
                    return None;
                }
            } else {
                let (s0, s1) = ((-a0) / da, (1.0 - a0) / da);
                lo = lo.max(s0.min(s1));
                hi = hi.min(s0.max(s1));
            }
        }
        (hi > lo).then_some((lo, hi))
    }
}

/// Nearest hit among `rects`: (ray parameter, rect index).
pub fn ray_cast(rects: &[Rect], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in rects.iter().enumerate() {
        if let Some(s) = r.intersect(o, d) {
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, i));
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Room,
    Facade,
    DegenerateOneDirection,
    DegenerateTopHeavy,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Room,
        SceneKind::Facade,
        SceneKind::DegenerateOneDirection,
        SceneKind::DegenerateTopHeavy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Room => "room",
            SceneKind::Facade => "facade",
            SceneKind::DegenerateOneDirection => "degenerate_one_direction",
            SceneKind::DegenerateTopHeavy => "degenerate_top_heavy",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scene kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub name: String,
    pub planes: Vec<Rect>,
    pub gt_edges: Vec<Edge3D>,
    pub gt_extrinsic: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub rng_seed: u64,
}

/// Intersection segments shorter than this are ignored.
const MIN_GT_EDGE: f64 = 0.05;

impl SyntheticScene {
    /// Builds a scene and derives its dihedral edges from every pair of touching,
    /// non-parallel rectangles.
    pub fn from_rects(
        name: impl Into<String>,
        planes: Vec<Rect>,
        gt_extrinsic: RigidTransform,
        intrinsics: CameraIntrinsics,
        rng_seed: u64,
    ) -> Self {
        let mut gt_edges = Vec::new();
        for i in 0..planes.len() {
            for j in i + 1..planes.len() {
                if let Some(e) = rect_intersection(&planes[i], &planes[j], (i, j)) {
                    gt_edges.push(e);
                }
            }
        }
        Self {
            name: name.into(),
            planes,
            gt_edges,
            gt_extrinsic,
            intrinsics,
            rng_seed,
        }
    }

    /// Camera center in the LiDAR frame.
    pub fn camera_center(&self, extrinsic: &RigidTransform) -> Vector3<f64> {
        -(extrinsic.rotation.transpose() * extrinsic.translation)
    }
}

fn rect_intersection(a: &Rect, b: &Rect, ids: (usize, usize)) -> Option<Edge3D> {
    let (na, nb) = (a.normal(), b.normal());
    let d = na.cross(&nb);
    if d.norm() < 1e-9 {
        return None;
    }
    let d = d.normalize();
    let m = Matrix3::from_rows(&[na.transpose(), nb.transpose(), d.transpose()]);
    let p0 = m.lu().solve(&Vector3::new(na.dot(&a.corner), nb.dot(&b.corner), 0.0))?;
    let (lo_a, hi_a) = a.clip_line(&p0, &d)?;
    let (lo_b, hi_b) = b.clip_line(&p0, &d)?;
    let (lo, hi) = (lo_a.max(lo_b), hi_a.min(hi_b));
    (hi - lo > MIN_GT_EDGE).then(|| Edge3D {
        point_on_line: p0 + d * lo,
        direction: d,
        t_min: 0.0,
        t_max: hi - lo,
        source: EdgeSource {
            voxel: [0, 0, 0],
            planes: ids,
        },
        plane_normals: [na, nb],
    })
}

/// 640×480 pinhole camera used by the synthetic scenes.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
}

/// LiDAR `x` forward, `z` up; camera `z` forward, `y` down.
pub fn nominal_extrinsic() -> RigidTransform {
    RigidTransform::from_euler_zyx_degrees([0.0, -90.0, 90.0], [0.0, 0.0, 0.0])
}

/// Ground-truth extrinsic: the nominal mounting with a small offset.
pub fn default_gt_extrinsic() -> RigidTransform {
    apply_offset(&nominal_extrinsic(), &[0.8, -0.6, 0.5, 0.05, -0.03, 0.02])
}

struct Builder {
    rects: Vec<Rect>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rects: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn jitter(&mut self, amp: f64) -> f64 {
        self.rng.random_range(-amp..=amp)
    }

    fn rect(&mut self, corner: [f64; 3], e1: [f64; 3], e2: [f64; 3]) {
        let albedo = self.rng.random_range(0.3..0.95);
        self.rects.push(Rect::new(corner.into(), e1.into(), e2.into(), albedo));
    }

    /// Oriented box with base center `(cx, cy, z0)`, footprint `sx × sy`, height `h`, yaw
    /// in degrees. `skip` lists faces to omit: 0 bottom, 1 top, 2 −x, 3 +x, 4 −y, 5 +y.
    #[allow(clippy::too_many_arguments)]
    fn cuboid(&mut self, c: [f64; 3], sx: f64, sy: f64, h: f64, yaw_deg: f64, skip: &[usize]) {
        let (s, co) = yaw_deg.to_radians().sin_cos();
        let ux = Vector3::new(co, s, 0.0) * sx;
        let uy = Vector3::new(-s, co, 0.0) * sy;
        let uz = Vector3::new(0.0, 0.0, h);
        let o = Vector3::from(c) - ux * 0.5 - uy * 0.5;
        let faces = [
            (o, uy, ux),
            (o + uz, ux, uy),
            (o, uz, uy),
            (o + ux, uy, uz),
            (o, ux, uz),
            (o + uy, uz, ux),
        ];
        for (i, (corner, a, b)) in faces.into_iter().enumerate() {
            if !skip.contains(&i) {
                self.rect(corner.into(), a.into(), b.into());
            }
        }
    }
}

pub fn generate_scene(kind: SceneKind, seed: u64) -> SyntheticScene {
    let mut b = Builder::new(seed ^ 0x5eed_0000 ^ (kind as u64) << 40);
    match kind {
        SceneKind::Room => {
            let w = 4.0 + b.jitter(0.3);
            let y = 2.0 + b.jitter(0.2);
            let zf = -1.2 + b.jitter(0.1);
            let zc = 1.3 + b.jitter(0.1);
            let h = zc - zf;
            b.rect([0.0, -y, zf], [w, 0.0, 0.0], [0.0, 2.0 * y, 0.0]);
            b.rect([0.0, -y, zc], [0.0, 2.0 * y, 0.0], [w, 0.0, 0.0]);
            b.rect([w, -y, zf], [0.0, 2.0 * y, 0.0], [0.0, 0.0, h]);
            b.rect([0.0, y, zf], [w, 0.0, 0.0], [0.0, 0.0, h]);
            b.rect([0.0, -y, zf], [0.0, 0.0, h], [w, 0.0, 0.0]);
            let (x1, y1, yaw1) = (2.6 + b.jitter(0.2), 0.7 + b.jitter(0.1), 20.0 + b.jitter(8.0));
            b.cuboid([x1, y1, zf], 0.6, 0.8, 0.8, yaw1, &[0]);
            let (x2, y2, yaw2) = (3.0 + b.jitter(0.2), -0.9 + b.jitter(0.1), -15.0 + b.jitter(8.0));
            b.cuboid([x2, y2, zf], 0.7, 0.6, 0.5, yaw2, &[0]);
        }
        SceneKind::Facade => {
            let x = 12.0 + b.jitter(0.5);
            let zg = -1.5 + b.jitter(0.1);
            b.rect([0.0, -10.0, zg], [x, 0.0, 0.0], [0.0, 20.0, 0.0]);
            b.rect([x, -10.0, zg], [0.0, 20.0, 0.0], [0.0, 0.0, 9.5]);
            for py in [-3.5 + b.jitter(0.3), 2.5 + b.jitter(0.3)] {
                b.cuboid([x - 0.6, py, zg], 1.2, 1.0, 9.5, 0.0, &[0, 1, 3]);
            }
            let zb = 3.0 + b.jitter(0.2);
            b.cuboid([x - 0.8, -0.5, zb], 1.6, 3.0, 0.3, 0.0, &[3]);
            let wing = 4.0;
            b.rect([x, 7.0, zg], [0.0, 0.0, 9.5], [-wing, wing * 0.8, 0.0]);
        }
        SceneKind::DegenerateOneDirection => {
            let mut prev = [4.0, -3.6];
            for k in 1..=6 {
                let next = [4.0 + 0.8 * (k % 2) as f64 + b.jitter(0.1), -3.6 + 1.2 * k as f64];
                b.rect(
                    [prev[0], prev[1], -4.0],
                    [next[0] - prev[0], next[1] - prev[1], 0.0],
                    [0.0, 0.0, 8.0],
                );
                prev = next;
            }
        }
        SceneKind::DegenerateTopHeavy => {
            let w = 5.0 + b.jitter(0.2);
            let zc = 1.6 + b.jitter(0.05);
            b.rect([w, -7.0, -4.0], [0.0, 14.0, 0.0], [0.0, 0.0, zc + 4.0]);
            b.rect([0.0, -7.0, zc], [0.0, 14.0, 0.0], [w, 0.0, 0.0]);
            for (i, yb) in [-1.6, 0.0, 1.6].into_iter().enumerate() {
                let len = 2.8 - 0.3 * i as f64;
                let depth = 0.35 + b.jitter(0.03);
                let yj = yb + b.jitter(0.1);
                b.cuboid([w - len / 2.0, yj, zc - depth], len, 0.4, depth, 0.0, &[1, 3]);
            }
        }
    }
    SyntheticScene::from_rects(kind.name(), b.rects, default_gt_extrinsic(), default_intrinsics(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BleedingParams {
    pub enabled: bool,
    /// Half of the beam divergence angle (radians).
    pub divergence_half_angle: f64,
}

impl Default for BleedingParams {
    fn default() -> Self {
        Self {
            enabled: false,
            divergence_half_angle: 0.0024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanParams {
    /// Angular grid step (radians) in azimuth and elevation.
    pub angular_step: f64,
    pub azimuth_half_range: f64,
    pub elevation_half_range: f64,
    /// Zero sigmas give noise-free scans.
    pub noise: LidarNoiseParams,
    pub bleeding: BleedingParams,
    pub seed: u64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            angular_step: 0.05f64.to_radians(),
            azimuth_half_range: 30f64.to_radians(),
            elevation_half_range: 23f64.to_radians(),
            noise: LidarNoiseParams::default(),
            bleeding: BleedingParams::default(),
            seed: 0,
        }
    }
}

impl ScanParams {
    pub fn noise_free(mut self) -> Self {
        self.noise = LidarNoiseParams {
            sigma_d: 0.0,
            sigma_omega: 0.0,
        };
        self
    }

    pub fn grid_size(&self) -> (usize, usize) {
        let n = |half: f64| (2.0 * half / self.angular_step).round() as usize + 1;
        (n(self.azimuth_half_range), n(self.elevation_half_range))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angular_step > 0.0) {
            return Err(Error::InvalidParameter("angular_step must be > 0".into()));
        }
        if !(self.noise.sigma_d >= 0.0 && self.noise.sigma_omega >= 0.0) {
            return Err(Error::InvalidParameter("scan noise must be >= 0".into()));
        }
        if self.bleeding.enabled && !(self.bleeding.divergence_half_angle > 0.0) {
            return Err(Error::InvalidParameter("divergence_half_angle must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReturnKind {
    /// Ordinary surface return.
    Surface,
    /// Foreground depth reported along a ray whose center hits the background.
    Inflated,
    /// Interpolated point between foreground and background.
    Bleeding,
}

/// Noise realization of one emitted point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub ray_index: usize,
    pub depth_gt: f64,
    pub bearing_gt: Vector3<f64>,
    pub delta_d: f64,
    pub delta_omega: Vector2<f64>,
    pub kind: ReturnKind,
    /// Index of the rectangle the depth came from.
    pub plane: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub cloud: PointCloud,
    pub records: Vec<PointRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-ray RNG stream.
fn ray_rng(seed: u64, ray: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(ray as u64)))
}

fn ray_direction(az: f64, el: f64) -> Vector3<f64> {
    Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Range difference separating foreground from background sub-beam returns.
const DEPTH_JUMP: f64 = 0.2;
const SUB_BEAMS: usize = 8;

/// Emits `(depth, plane, kind)` returns for one beam.
fn beam_returns(rects: &[Rect], dir: &Vector3<f64>, bleeding: &BleedingParams) -> Vec<(f64, usize, ReturnKind)> {
    let o = Vector3::zeros();
    let center = ray_cast(rects, &o, dir);
    if !bleeding.enabled {
        return center.map(|(d, i)| vec![(d, i, ReturnKind::Surface)]).unwrap_or_default();
    }
    let b = BearingVector::new_normalize(*dir).expect("unit ray");
    let mut hits = vec![center];
    for k in 0..SUB_BEAMS {
        let a = std::f64::consts::TAU * k as f64 / SUB_BEAMS as f64;
        let off = Vector2::new(a.cos(), a.sin()) * bleeding.divergence_half_angle;
        let sub = s2_boxplus(&b, &off);
        hits.push(ray_cast(rects, &o, sub.omega()));
    }
    let valid: Vec<(f64, usize)> = hits.iter().flatten().copied().collect();
    let Some(&(fg, fg_plane)) = valid.iter().min_by(|a, b| a.0.total_cmp(&b.0)) else {
        return Vec::new();
    };
    let bg = valid.iter().map(|h| h.0).fold(fg, f64::max);
    if bg - fg <= DEPTH_JUMP {
        return center.map(|(d, i)| vec![(d, i, ReturnKind::Surface)]).unwrap_or_default();
    }
    let n_fg = valid.iter().filter(|h| h.0 - fg <= DEPTH_JUMP).count();
    let frac = n_fg as f64 / hits.len() as f64;
    let center_is_fg = center.is_some_and(|(d, _)| d - fg <= DEPTH_JUMP);
    let primary = match (center_is_fg, center) {
        (true, Some((d, i))) => (d, i, ReturnKind::Surface),
        _ => (fg, fg_plane, ReturnKind::Inflated),
    };
    let bg_plane = valid
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|h| h.1)
        .unwrap_or(fg_plane);
    let mid = fg + (1.0 - frac) * (bg - fg);
    vec![primary, (mid, bg_plane, ReturnKind::Bleeding)]
}

/// Ray-casts the angular grid from the LiDAR origin. Rays are processed in parallel,
/// each with its own RNG stream, so the output does not depend on the thread count.
pub fn simulate_lidar_scan(scene: &SyntheticScene, params: &ScanParams) -> Result<SimulatedScan> {
    params.validate()?;
    if scene.planes.is_empty() {
        return Err(Error::InvalidParameter("scene has no planes".into()));
    }
    let (na, ne) = params.grid_size();
    let noise = params.noise;
    let per_ray: Vec<Vec<(Vector3<f64>, f64, PointRecord)>> = (0..na * ne)
        .into_par_iter()
        .map(|ray| {
            let (ie, ia) = (ray / na, ray % na);
            let az = -params.azimuth_half_range + ia as f64 * params.angular_step;
            let el = -params.elevation_half_range + ie as f64 * params.angular_step;
            let dir = ray_direction(az, el);
            let returns = beam_returns(&scene.planes, &dir, &params.bleeding);
            if returns.is_empty() {
                return Vec::new();
            }
            let mut rng = ray_rng(params.seed, ray);
            let bearing = BearingVector::new_normalize(dir).expect("unit ray");
            returns
                .into_iter()
                .map(|(depth, plane, kind)| {
                    let dd = gaussian(&mut rng, noise.sigma_d);
                    let dw = Vector2::new(gaussian(&mut rng, noise.sigma_omega), gaussian(&mut rng, noise.sigma_omega));
                    let w = s2_boxplus(&bearing, &(-dw));
                    let p = w.omega() * (depth - dd);
                    let rec = PointRecord {
                        ray_index: ray,
                        depth_gt: depth,
                        bearing_gt: dir,
                        delta_d: dd,
                        delta_omega: dw,
                        kind,
                        plane,
                    };
                    (p, scene.planes[plane].albedo, rec)
                })
                .collect()
        })
        .collect();
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut records = Vec::new();
    for (p, i, r) in per_ray.into_iter().flatten() {
        points.push(p);
        intensity.push(i * 255.0);
        records.push(r);
    }
    Ok(SimulatedScan {
        cloud: PointCloud::with_intensity(points, intensity)?,
        records,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// Lateral edge noise (pixels), expressed as the standard deviation of independent
    /// offsets at `reference_spacing` along the edge.
    pub sigma_i: f64,
    /// Spacing (meters along the 3-D edge) of the jitter knots; offsets are linearly
    /// interpolated between knots. Zero draws an independent `sigma_i` offset per pixel.
    pub knot_spacing: f64,
    /// Knot amplitudes are `sigma_i * sqrt(reference_spacing / knot_spacing)`, so an
    /// average over any long stretch of edge has the same variance as independent
    /// `sigma_i` offsets spaced `reference_spacing` apart, while the edge stays locally
    /// straight.
    pub reference_spacing: f64,
    /// Emit exact sub-pixel projections with no jitter or rounding.
    pub exact: bool,
    pub seed: u64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            sigma_i: 1.5,
            knot_spacing: 0.08,
            reference_spacing: 0.02,
            exact: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub edges: EdgePixelSet,
    pub gray: GrayImage,
}

/// Step (meters) used to walk along 3-D edges when rendering.
const RENDER_STEP: f64 = 0.001;

/// True if `x` is the first surface hit on the ray from `origin`.
pub fn visible_from(rects: &[Rect], origin: &Vector3<f64>, x: &Vector3<f64>) -> bool {
    let d = x - origin;
    let dist = d.norm();
    if dist < 1e-9 {
        return false;
    }
    let dir = d / dist;
    match ray_cast(rects, origin, &dir) {
        Some((s, _)) => s >= dist * (1.0 - 1e-7) - 1e-6,
        None => true,
    }
}

/// Visible, in-frame projections of an edge with their distance along the edge, split
/// into contiguous runs.
fn visible_runs(
    scene: &SyntheticScene,
    e: &Edge3D,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Vec<Vec<(Vector2<f64>, f64)>> {
    let c = scene.camera_center(t);
    let n = (e.length() / RENDER_STEP).ceil().max(1.0) as usize;
    let mut runs = Vec::new();
    let mut cur = Vec::new();
    for i in 0..=n {
        let s = e.length() * i as f64 / n as f64;
        let x = e.at(e.t_min + s);
        let uv = project(&t.apply(&x), k).ok().filter(|uv| k.in_frame(uv));
        match uv {
            Some(uv) if visible_from(&scene.planes, &c, &x) => cur.push((uv, s)),
            _ => {
                if cur.len() > 1 {
                    runs.push(std::mem::take(&mut cur));
                } else {
                    cur.clear();
                }
            }
        }
    }
    if cur.len() > 1 {
        runs.push(cur);
    }
    runs
}

/// Keeps points at least `spacing` pixels apart along the polyline.
fn resample(run: &[(Vector2<f64>, f64)], spacing: f64) -> Vec<(Vector2<f64>, f64)> {
    let mut out = vec![run[0]];
    let mut arc = 0.0;
    let mut last = 0.0;
    for w in run.windows(2) {
        arc += (w[1].0 - w[0].0).norm();
        if arc - last >= spacing {
            out.push(w[1]);
            last = arc;
        }
    }
    out
}

/// Projects every visible ground-truth edge, jitters it laterally and rasterizes it,
/// and shades the scene into a gray image.
pub fn render_edge_image(
    scene: &SyntheticScene,
    k: &CameraIntrinsics,
    extrinsic: &RigidTransform,
    params: &RenderParams,
) -> Result<RenderedImage> {
    k.validate()?;
    if !(params.sigma_i >= 0.0 && params.knot_spacing >= 0.0 && params.reference_spacing > 0.0) {
        return Err(Error::InvalidParameter("render noise parameters out of range".into()));
    }
    let mut exact = Vec::new();
    let mut set = BTreeSet::new();
    for (ei, e) in scene.gt_edges.iter().enumerate() {
        let mut rng = ray_rng(params.seed ^ 0xed9e, ei);
        for run in visible_runs(scene, e, extrinsic, k) {
            if params.exact {
                exact.extend(resample(&run, 0.25).into_iter().map(|(p, _)| p));
                continue;
            }
            let pts = resample(&run, 0.5);
            let start = pts[0].1;
            let total = pts.last().map_or(0.0, |p| p.1) - start;
            let knots: Vec<f64> = if params.knot_spacing > 0.0 {
                let n = (total / params.knot_spacing).ceil() as usize + 2;
                let amp = params.sigma_i * (params.reference_spacing / params.knot_spacing).sqrt();
                (0..n).map(|_| gaussian(&mut rng, amp)).collect()
            } else {
                Vec::new()
            };
            for (i, (p, s)) in pts.iter().enumerate() {
                let a = pts[i.saturating_sub(1)].0;
                let b = pts[(i + 1).min(pts.len() - 1)].0;
                let tang = b - a;
                if tang.norm() == 0.0 {
                    continue;
                }
                let normal = Vector2::new(-tang.y, tang.x).normalize();
                let off = if params.knot_spacing > 0.0 {
                    let u = (s - start) / params.knot_spacing;
                    let j = u.floor() as usize;
                    let f = u - j as f64;
                    knots[j] * (1.0 - f) + knots[j + 1] * f
                } else {
                    gaussian(&mut rng, params.sigma_i)
                };
                let q = p + normal * off;
                let (x, y) = (q.x.round(), q.y.round());
                if x >= 0.0 && y >= 0.0 && x < k.width as f64 && y < k.height as f64 {
                    set.insert((x as i64, y as i64));
                }
            }
        }
    }
    let pixels: Vec<Vector2<f64>> = if params.exact {
        exact
    } else {
        set.into_iter().map(|(x, y)| Vector2::new(x as f64, y as f64)).collect()
    };
    if pixels.is_empty() {
        return Err(Error::NoVisibleEdges);
    }
    Ok(RenderedImage {
        edges: EdgePixelSet::new(pixels, k.width, k.height)?,
        gray: shade(scene, k, extrinsic),
    })
}

/// Inverts the distortion model by fixed-point iteration on normalized coordinates.
fn undistort_normalized(xd: &Vector2<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    if !k.has_distortion() {
        return *xd;
    }
    let mut x = *xd;
    for _ in 0..30 {
        x += xd - distort_normalized(&x, k);
    }
    x
}

const BACKGROUND_GRAY: f64 = 20.0;

/// Flat albedo with a Lambert term under a fixed directional light.
pub fn shade(scene: &SyntheticScene, k: &CameraIntrinsics, t: &RigidTransform) -> GrayImage {
    let light = Vector3::new(-0.3, 0.5, 0.8).normalize();
    let c = scene.camera_center(t);
    let rt = t.rotation.transpose();
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let xn = undistort_normalized(
                        &Vector2::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy),
                        k,
                    );
                    let dir = (rt * Vector3::new(xn.x, xn.y, 1.0)).normalize();
                    let val = match ray_cast(&scene.planes, &c, &dir) {
                        Some((_, i)) => {
                            let r = &scene.planes[i];
                            255.0 * r.albedo * (0.25 + 0.75 * r.normal().dot(&light).abs())
                        }
                        None => BACKGROUND_GRAY,
                    };
                    val.round().clamp(0.0, 255.0) as u8
                })
                .collect()
        })
        .collect();
    GrayImage::new(w, h, rows.concat()).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_well_formed() {
        for kind in SceneKind::ALL {
            let a = generate_scene(kind, 3);
            assert_eq!(a, generate_scene(kind, 3));
            assert!(a.gt_edges.len() >= 3, "{kind}: {}", a.gt_edges.len());
            for e in &a.gt_edges {
                let (i, j) = e.source.planes;
                for id in [i, j] {
                    let r = &a.planes[id];
                    for t in [e.t_min, e.t_max] {
                        let p = e.at(t);
                        assert!(r.normal().dot(&(p - r.corner)).abs() < 1e-9);
                    }
                }
            }
            let dirs: Vec<_> = a.gt_edges.iter().map(|e| e.direction).collect();
            let distinct = dirs.iter().any(|d| d.dot(&dirs[0]).abs() < 1f64.to_radians().cos());
            match kind {
                SceneKind::DegenerateOneDirection => assert!(!distinct),
                _ => assert!(distinct, "{kind}"),
            }
        }
        assert_ne!(generate_scene(SceneKind::Room, 1), generate_scene(SceneKind::Room, 2));
        assert_eq!("room".parse::<SceneKind>().unwrap(), SceneKind::Room);
        assert!("attic".parse::<SceneKind>().is_err());
    }

    #[test]
    fn noise_free_scan_lies_on_planes() {
        let rect = Rect::new(Vector3::new(3.0, -5.0, -5.0), Vector3::new(0.0, 10.0, 0.0), Vector3::new(0.0, 0.0, 10.0), 0.5);
        let scene = SyntheticScene::from_rects("plane", vec![rect], default_gt_extrinsic(), default_intrinsics(), 0);
        let params = ScanParams {
            angular_step: 0.5f64.to_radians(),
            ..ScanParams::default()
        }
        .noise_free();
        let scan = simulate_lidar_scan(&scene, &params).unwrap();
        assert_eq!(scan.cloud.len(), params.grid_size().0 * params.grid_size().1);
        for p in &scan.cloud.points {
            assert!((p.x - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scan_noise_is_recorded_and_reproducible() {
        let scene = generate_scene(SceneKind::Room, 0);
        let params = ScanParams {
            angular_step: 1f64.to_radians(),
            seed: 5,
            ..ScanParams::default()
        };
        let a = simulate_lidar_scan(&scene, &params).unwrap();
        assert_eq!(a, simulate_lidar_scan(&scene, &params).unwrap());
        for (p, r) in a.cloud.points.iter().zip(&a.records) {
            let b = BearingVector::new_normalize(r.bearing_gt).unwrap();
            let rebuilt = s2_boxplus(&b, &(-r.delta_omega)).omega() * (r.depth_gt - r.delta_d);
            assert!((rebuilt - p).norm() < 1e-12);
        }
    }

    #[test]
    fn exact_render_lies_on_projected_lines() {
        let scene = generate_scene(SceneKind::Room, 0);
        let gt = scene.gt_extrinsic;
        let img = render_edge_image(&scene, &scene.intrinsics, &gt, &RenderParams { exact: true, ..RenderParams::default() }).unwrap();
        let rounded = render_edge_image(&scene, &scene.intrinsics, &gt, &RenderParams { sigma_i: 0.0, ..RenderParams::default() }).unwrap();
        let lines: Vec<(Vector2<f64>, Vector2<f64>)> = scene
            .gt_edges
            .iter()
            .filter_map(|e| {
                let front: Vec<_> = (0..=20)
                    .map(|i| e.at(e.t_min + e.length() * i as f64 / 20.0))
                    .filter(|x| gt.apply(x).z > 0.5)
                    .collect();
                let a = project(&gt.apply(front.first()?), &scene.intrinsics).ok()?;
                let b = project(&gt.apply(front.last()?), &scene.intrinsics).ok()?;
                Some((a, (b - a).try_normalize(1e-9)?))
            })
            .collect();
        let dist = |p: &Vector2<f64>| {
            lines
                .iter()
                .map(|(a, d)| {
                    let v = p - a;
                    (v - d * v.dot(d)).norm()
                })
                .fold(f64::INFINITY, f64::min)
        };
        assert!(img.edges.pixels().iter().all(|p| dist(p) < 1e-6));
        assert!(rounded.edges.pixels().iter().all(|p| dist(p) <= 0.5 * 2f64.sqrt() + 1e-9));
    }

    #[test]
    fn occluded_edge_spans_are_hidden() {
        // Far wall-floor edge, with a panel in front covering its middle.
        let floor = Rect::new(Vector3::new(0.0, -3.0, -1.0), Vector3::new(5.0, 0.0, 0.0), Vector3::new(0.0, 6.0, 0.0), 0.5);
        let wall = Rect::new(Vector3::new(5.0, -3.0, -1.0), Vector3::new(0.0, 6.0, 0.0), Vector3::new(0.0, 0.0, 3.0), 0.7);
        let panel = Rect::new(Vector3::new(2.0, -0.5, -0.8), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0), 0.9);
        let k = default_intrinsics();
        let t = nominal_extrinsic();
        let open = SyntheticScene::from_rects("open", vec![floor, wall], t, k, 0);
        let blocked = SyntheticScene::from_rects("blocked", vec![floor, wall, panel], t, k, 0);
        assert_eq!(open.gt_edges.len(), 1);
        let p = RenderParams { exact: true, ..RenderParams::default() };
        let a = render_edge_image(&open, &k, &t, &p).unwrap();
        let b = render_edge_image(&blocked, &k, &t, &p).unwrap();
        let c = open.camera_center(&t);
        let e = &open.gt_edges[0];
        let hidden = |y: f64| !visible_from(&blocked.planes, &c, &e.at((y - e.point_on_line.y) / e.direction.y));
        assert!(hidden(0.0) && !hidden(2.0));
        assert!(b.edges.len() < a.edges.len());
        // The middle span (|y| < 0.5·5/2 at the wall) projects near u = 320.
        assert!(a.edges.pixels().iter().any(|p| (p.x - 320.0).abs() < 5.0));
        assert!(!b.edges.pixels().iter().any(|p| (p.x - 320.0).abs() < 5.0));
        let behind = SyntheticScene::from_rects("behind", vec![floor, wall], apply_offset(&t, &[0.0, 180.0, 0.0, 0.0, 0.0, 0.0]), k, 0);
        assert!(matches!(render_edge_image(&behind, &k, &behind.gt_extrinsic, &p), Err(Error::NoVisibleEdges)));
    }
}
