//! Point-to-line correspondences between projected LiDAR edge points and image edges.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, BearingVector, CameraIntrinsics, RigidTransform};
use crate::image_edge::EdgePixelSet;
use crate::lidar_edge::{sample_edge_points, Edge3D};

/// Local 2-D line through κ edge pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit2D {
    /// Centroid (pixels).
    pub q: Vector2<f64>,
    /// Unit normal: eigenvector of the smallest scatter eigenvalue.
    pub n: Vector2<f64>,
    /// Unit direction: eigenvector of the largest scatter eigenvalue.
    pub d: Vector2<f64>,
    /// `λ_min / λ_max`.
    pub eigen_ratio: f64,
}

impl LineFit2D {
    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        self.n.dot(&(p - self.q))
    }
}

/// Centroid and scatter-matrix eigendecomposition of a pixel neighborhood.
pub fn fit_local_line(points: &[Vector2<f64>]) -> Result<LineFit2D> {
    if points.len() < 2 {
        return Err(Error::DegeneratePoints);
    }
    let q = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let mut s = Matrix2::zeros();
    for p in points {
        let d = p - q;
        s += d * d.transpose();
    }
    let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l_max = half_tr + disc;
    let l_min = (half_tr - disc).max(0.0);
    if !(l_max > 0.0) {
        return Err(Error::DegeneratePoints);
    }
    // Eigenvector of l_max, built from whichever row of (S − λI) is better conditioned.
    let d = if (a - l_max).abs() + b.abs() >= (c - l_max).abs() + b.abs() {
        Vector2::new(b, l_max - a)
    } else {
        Vector2::new(l_max - c, b)
    };
    let d = if d.norm_squared() > 0.0 {
        d.normalize()
    } else if a >= c {
        Vector2::x()
    } else {
        Vector2::y()
    };
    let mut n = Vector2::new(-d.y, d.x);
    // Canonical sign: first non-zero component positive.
    if n.x < 0.0 || (n.x == 0.0 && n.y < 0.0) {
        n = -n;
    }
    let d = Vector2::new(n.y, -n.x);
    Ok(LineFit2D {
        q,
        n,
        d,
        eigen_ratio: l_min / l_max,
    })
}

/// Projects a LiDAR point with the extrinsic; rejects points outside the image.
pub fn project_lidar_point(
    p: &Vector3<f64>,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>> {
    let uv = project(&t.apply(p), k)?;
    if k.in_frame(&uv) {
        Ok(uv)
    } else {
        Err(Error::OutOfFrame { u: uv.x, v: uv.y })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchGates {
    pub kappa: usize,
    pub max_pixel_dist: f64,
    pub min_direction_cos: f64,
    pub max_eigen_ratio: f64,
}

impl MatchGates {
    pub fn rough() -> Self {
        Self {
            kappa: 5,
            max_pixel_dist: 12.0,
            min_direction_cos: 30f64.to_radians().cos(),
            max_eigen_ratio: 0.25,
        }
    }

    pub fn fine() -> Self {
        Self {
            max_pixel_dist: 5.0,
            ..Self::rough()
        }
    }
}

impl Default for MatchGates {
    fn default() -> Self {
        Self::rough()
    }
}

/// A point sampled on a LiDAR edge together with its parent edge direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSample {
    pub point: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub edge_index: usize,
    pub sample_index: usize,
}

pub fn sample_edges(edges: &[Edge3D], spacing: f64) -> Vec<EdgeSample> {
    edges
        .iter()
        .enumerate()
        .flat_map(|(ei, e)| {
            sample_edge_points(e, spacing)
                .into_iter()
                .enumerate()
                .map(move |(si, point)| EdgeSample {
                    point,
                    direction: e.direction,
                    edge_index: ei,
                    sample_index: si,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub lidar_point: Vector3<f64>,
    pub bearing: BearingVector,
    pub depth: f64,
    pub line: LineFit2D,
    pub edge_dir_3d: Vector3<f64>,
    pub edge_index: usize,
    pub sample_index: usize,
}

impl Correspondence {
    pub fn new(lidar_point: Vector3<f64>, line: LineFit2D, edge_dir_3d: Vector3<f64>) -> Result<Self> {
        let depth = lidar_point.norm();
        Ok(Self {
            lidar_point,
            bearing: BearingVector::new_normalize(lidar_point)?,
            depth,
            line,
            edge_dir_3d,
            edge_index: 0,
            sample_index: 0,
        })
    }
}

/// Half length (meters) of the 3-D segment projected to estimate the image edge direction.
const DIRECTION_PROBE: f64 = 0.005;

/// Image direction of a 3-D edge at `p`, from the projections of two nearby points.
pub fn projected_direction(
    p: &Vector3<f64>,
    dir: &Vector3<f64>,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let a = project(&t.apply(&(p - dir * DIRECTION_PROBE)), k).ok()?;
    let b = project(&t.apply(&(p + dir * DIRECTION_PROBE)), k).ok()?;
    let g = b - a;
    let n = g.norm();
    (n > 1e-12).then(|| g / n)
}

/// Checks all three acceptance gates for one projected sample.
pub fn passes_gates(
    uv: &Vector2<f64>,
    line: &LineFit2D,
    image_dir: &Vector2<f64>,
    gates: &MatchGates,
) -> bool {
    line.distance(uv).abs() <= gates.max_pixel_dist
        && image_dir.dot(&line.d).abs() >= gates.min_direction_cos
        && line.eigen_ratio <= gates.max_eigen_ratio
}

fn match_sample(
    s: &EdgeSample,
    edge_set: &EdgePixelSet,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    gates: &MatchGates,
) -> Option<Correspondence> {
    let uv = project_lidar_point(&s.point, t, k).ok()?;
    let neighbors = edge_set.knn_query(&uv, gates.kappa).ok()?;
    let line = fit_local_line(&neighbors).ok()?;
    let g = projected_direction(&s.point, &s.direction, t, k)?;
    if !passes_gates(&uv, &line, &g, gates) {
        return None;
    }
    let mut c = Correspondence::new(s.point, line, s.direction).ok()?;
    c.edge_index = s.edge_index;
    c.sample_index = s.sample_index;
    Some(c)
}

/// Matches every sample; the output keeps (edge, sample) order.
pub fn match_samples(
    samples: &[EdgeSample],
    edge_set: &EdgePixelSet,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    gates: &MatchGates,
) -> Vec<Correspondence> {
    if edge_set.len() < gates.kappa {
        return Vec::new();
    }
    samples
        .par_iter()
        .filter_map(|s| match_sample(s, edge_set, t, k, gates))
        .collect()
}

/// Correspondences derived from at least this many samples are required.
pub const MIN_CORRESPONDENCES: usize = 30;

pub fn build_correspondences(
    edges: &[Edge3D],
    spacing: f64,
    edge_set: &EdgePixelSet,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    gates: &MatchGates,
) -> Result<Vec<Correspondence>> {
    let samples = sample_edges(edges, spacing);
    let out = match_samples(&samples, edge_set, t, k, gates);
    if out.len() < MIN_CORRESPONDENCES {
        return Err(Error::TooFewCorrespondences {
            found: out.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_edge::EdgeSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn horizontal_line_fit() {
        let pts: Vec<_> = (0..5).map(|i| Vector2::new(i as f64 * 1.5, 3.0)).collect();
        let f = fit_local_line(&pts).unwrap();
        assert!((f.q - Vector2::new(3.0, 3.0)).norm() < 1e-12);
        assert!((f.n - Vector2::new(0.0, 1.0)).norm() < 1e-12);
        assert!(f.eigen_ratio.abs() < 1e-15);
        assert!(f.n.dot(&f.d).abs() < 1e-12 && (f.d.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_line_fit() {
        let pts: Vec<_> = (0..5).map(|i| Vector2::new(i as f64, i as f64)).collect();
        let f = fit_local_line(&pts).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.n - Vector2::new(s, -s)).norm() < 1e-12);
    }

    #[test]
    fn blob_and_degenerate() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(1.0, 1.0),
        ];
        let f = fit_local_line(&pts).unwrap();
        assert!((f.eigen_ratio - 1.0).abs() < 1e-12);
        assert!(f.eigen_ratio > MatchGates::rough().max_eigen_ratio);
        let same = vec![Vector2::new(2.0, 2.0); 5];
        assert!(matches!(fit_local_line(&same), Err(Error::DegeneratePoints)));
    }

    #[test]
    fn line_normal_is_global_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let pts: Vec<_> = (0..6)
                .map(|_| Vector2::new(rng.random_range(0.0..10.0), rng.random_range(0.0..3.0)))
                .collect();
            let f = fit_local_line(&pts).unwrap();
            let cost = |n: &Vector2<f64>| pts.iter().map(|p| n.dot(&(p - f.q)).powi(2)).sum::<f64>();
            let best = cost(&f.n);
            for deg in 0..360 {
                let a = (deg as f64).to_radians();
                assert!(best <= cost(&Vector2::new(a.cos(), a.sin())) + 1e-9);
            }
        }
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn projection_examples() {
        let uv = project_lidar_point(&Vector3::new(0.0, 0.0, 3.0), &RigidTransform::identity(), &k()).unwrap();
        assert_eq!(uv, Vector2::new(320.0, 240.0));
        let nominal = RigidTransform::from_euler_zyx_degrees([0.0, -90.0, 90.0], [0.0; 3]);
        let uv = project_lidar_point(&Vector3::new(4.0, 0.0, 0.0), &nominal, &k()).unwrap();
        assert!((uv - Vector2::new(320.0, 240.0)).norm() < 1e-9);
        assert!(matches!(
            project_lidar_point(&Vector3::new(1.0, 0.0, 0.5), &RigidTransform::identity(), &k()),
            Err(Error::OutOfFrame { .. })
        ));
        assert!(matches!(
            project_lidar_point(&Vector3::new(0.0, 0.0, -1.0), &RigidTransform::identity(), &k()),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn projection_matches_homogeneous_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let kk = k();
        let kmat = nalgebra::Matrix3x4::new(
            kk.fx, 0.0, kk.cx, 0.0, 0.0, kk.fy, kk.cy, 0.0, 0.0, 0.0, 1.0, 0.0,
        );
        let mut checked = 0;
        for _ in 0..500 {
            let t = RigidTransform::from_euler_zyx_degrees(
                [rng.random_range(-5.0..5.0), rng.random_range(-95.0..-85.0), rng.random_range(85.0..95.0)],
                [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
            );
            let p = Vector3::new(rng.random_range(1.0..8.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
            let h = kmat * t.to_homogeneous() * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            let oracle = Vector2::new(h.x / h.z, h.y / h.z);
            if let Ok(uv) = project_lidar_point(&p, &t, &kk) {
                assert!((uv - oracle).norm() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    fn edge(p: Vector3<f64>, d: Vector3<f64>, len: f64) -> Edge3D {
        Edge3D {
            point_on_line: p,
            direction: d.normalize(),
            t_min: 0.0,
            t_max: len,
            source: EdgeSource {
                voxel: [0, 0, 0],
                planes: (0, 1),
            },
            plane_normals: [Vector3::x(), Vector3::y()],
        }
    }

    #[test]
    fn direction_gate_rejects_crossing_lines() {
        // A vertical 3-D edge (camera frame, identity extrinsic) projected onto a
        // horizontal image line of edge pixels.
        let kk = k();
        let pixels: Vec<_> = (0..640).map(|x| Vector2::new(x as f64, 240.0)).collect();
        let set = EdgePixelSet::new(pixels, 640, 480).unwrap();
        let vertical = edge(Vector3::new(0.0, -0.2, 4.0), Vector3::y(), 0.4);
        let horizontal = edge(Vector3::new(-0.5, 0.0, 4.0), Vector3::x(), 1.0);
        let g = MatchGates::rough();
        let t = RigidTransform::identity();
        let v = match_samples(&sample_edges(&[vertical], 0.02), &set, &t, &kk, &g);
        let h = match_samples(&sample_edges(&[horizontal.clone()], 0.02), &set, &t, &kk, &g);
        assert!(v.len() <= 1, "{}", v.len());
        assert_eq!(h.len(), sample_edges(&[horizontal], 0.02).len());
        for c in &h {
            let uv = project_lidar_point(&c.lidar_point, &t, &kk).unwrap();
            let d = projected_direction(&c.lidar_point, &c.edge_dir_3d, &t, &kk).unwrap();
            assert!(passes_gates(&uv, &c.line, &d, &g));
            assert!((c.lidar_point - c.bearing.omega() * c.depth).norm() < 1e-9);
        }
        assert!(matches!(
            build_correspondences(&[edge(Vector3::new(-0.1, 0.0, 4.0), Vector3::x(), 0.2)], 0.02, &set, &t, &kk, &g),
            Err(Error::TooFewCorrespondences { .. })
        ));
    }
}
