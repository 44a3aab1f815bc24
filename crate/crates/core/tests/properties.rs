use std::path::Path;

use edgecal::calibrate::trimmed_mean;
use edgecal::geometry::{
    distort_normalized, euler_zyx_to_rotation, project, project_pinhole, rotation_to_euler_zyx, s2_boxplus,
    se3_boxplus, so3_exp, so3_log, tangent_basis, BearingVector, CameraIntrinsics, RigidTransform,
    TwistIncrement,
};
use edgecal::io::{
    format_intrinsics, parse_intrinsics, parse_pcd, parse_xyz, write_pcd, CalibrationReport, PcdEncoding,
    ReportStatus, ResidualRecord, ResidualStats, SceneReport,
};
use edgecal::lidar_edge::PointCloud;
use edgecal::pipeline::{jet, residual_histogram};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (vec3(3.0), vec3(5.0)).prop_map(|(w, t)| RigidTransform {
        rotation: so3_exp(&w),
        translation: t,
    })
}

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (300.0..900.0f64, 300.0..900.0f64, prop::array::uniform5(-0.01..0.01f64)).prop_map(|(fx, fy, d)| CameraIntrinsics {
        k1: d[0] * 10.0,
        k2: d[1],
        k3: d[2],
        p1: d[3] * 0.1,
        p2: d[4] * 0.1,
        ..CameraIntrinsics::pinhole(fx, fy, 320.0, 240.0, 640, 480)
    })
}

proptest! {
    #[test]
    fn so3_log_inverts_exp(w in vec3(1.8)) {
        prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
        let r = so3_exp(&w);
        prop_assert!((so3_log(&r) - w).norm() < 1e-9);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boxplus_and_left_difference_agree(t in transform(), w in vec3(0.5), dt in vec3(1.0)) {
        let d = TwistIncrement { delta_theta: w, delta_t: dt };
        let moved = se3_boxplus(&t, &d);
        let back = t.left_difference(&moved);
        prop_assert!((back.to_vector() - d.to_vector()).norm() < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity(t in transform(), p in vec3(10.0)) {
        let id = t.compose(&t.inverse());
        prop_assert!((id.apply(&p) - p).norm() < 1e-9);
        prop_assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-9);
    }

    #[test]
    fn euler_round_trip(y in -3.1..3.1f64, p in -1.5..1.5f64, r in -3.1..3.1f64) {
        let m = euler_zyx_to_rotation(y, p, r);
        let e = rotation_to_euler_zyx(&m);
        prop_assert!((euler_zyx_to_rotation(e.x, e.y, e.z) - m).norm() < 1e-9);
        prop_assert!((e - Vector3::new(y, p, r)).norm() < 1e-7);
    }

    #[test]
    fn s2_boxplus_stays_on_sphere_and_is_tangent(v in vec3(1.0), d in prop::array::uniform2(-0.2..0.2f64)) {
        prop_assume!(v.norm() > 0.1);
        let b = BearingVector::new_normalize(v).unwrap();
        let n = tangent_basis(&b);
        prop_assert!((n.transpose() * b.omega()).norm() < 1e-12);
        prop_assert!((n.transpose() * n - nalgebra::Matrix2::identity()).norm() < 1e-12);
        let moved = s2_boxplus(&b, &Vector2::from(d));
        prop_assert!((moved.omega().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_distortion_projection_is_pinhole(p in vec3(2.0), fx in 300.0..900.0f64) {
        let p = p + Vector3::new(0.0, 0.0, 3.0);
        let k = CameraIntrinsics::pinhole(fx, fx * 1.01, 320.0, 240.0, 640, 480);
        prop_assert_eq!(project(&p, &k).unwrap(), project_pinhole(&p, &k).unwrap());
    }

    #[test]
    fn distortion_vanishes_at_center(k in intrinsics()) {
        prop_assert_eq!(distort_normalized(&Vector2::zeros(), &k), Vector2::zeros());
    }

    #[test]
    fn pcd_round_trips_any_finite_cloud(
        pts in prop::collection::vec(prop::array::uniform3(-1e6..1e6f64), 0..40),
        with_intensity in any::<bool>(),
        binary in any::<bool>(),
    ) {
        let points: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::from(*p)).collect();
        let cloud = if with_intensity {
            let i = (0..points.len()).map(|i| i as f64 * 1.5).collect();
            PointCloud::with_intensity(points, i).unwrap()
        } else {
            PointCloud::new(points)
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pcd");
        write_pcd(&path, &cloud, if binary { PcdEncoding::Binary } else { PcdEncoding::Ascii }).unwrap();
        let back = parse_pcd(&std::fs::read(&path).unwrap(), &path).unwrap();
        prop_assert_eq!(back.cloud, cloud);
        prop_assert_eq!(back.nan_dropped, 0);
    }

    #[test]
    fn xyz_text_round_trips(pts in prop::collection::vec(prop::array::uniform3(-1e3..1e3f64), 1..30), nans in 0usize..5) {
        let mut text = String::from("# generated\n");
        for p in &pts {
            text.push_str(&format!("{:?} {:?} {:?}\n", p[0], p[1], p[2]));
        }
        for _ in 0..nans {
            text.push_str("NaN 0 0\n");
        }
        let c = parse_xyz(&text, Path::new("p.xyz")).unwrap();
        prop_assert_eq!(c.nan_dropped, nans);
        prop_assert_eq!(c.cloud.points, pts.iter().map(|p| Vector3::from(*p)).collect::<Vec<_>>());
    }

    #[test]
    fn intrinsics_text_round_trips(k in intrinsics()) {
        prop_assert_eq!(parse_intrinsics(&format_intrinsics(&k), Path::new("k.txt")).unwrap(), k);
    }

    #[test]
    fn residual_stats_are_ordered(r in prop::collection::vec(-20.0..20.0f64, 1..200)) {
        let s = ResidualStats::from_residuals(&r);
        prop_assert_eq!(s.count, r.len() - (r.len() as f64 * 0.2).floor() as usize);
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        prop_assert!(s.min >= 0.0 && s.mean <= s.max && s.mean >= s.min);
        let largest = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(s.max <= largest);
        let h: usize = residual_histogram(&r).iter().map(|b| b.1).sum();
        prop_assert_eq!(h, r.len());
    }

    #[test]
    fn trimmed_mean_is_bounded(v in prop::collection::vec(-5.0..5.0f64, 1..100), f in 0.0..0.5f64) {
        let m = trimmed_mean(&v, f).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    }

    #[test]
    fn jet_runs_blue_to_red(x in 0.0..1.0f64) {
        let c = jet(x);
        prop_assert!(c.iter().any(|&v| v > 0));
        prop_assert_eq!(jet(0.0)[0], 0);
        prop_assert_eq!(jet(1.0)[2], 0);
    }

    #[test]
    fn report_round_trips(
        t in transform(),
        recs in prop::collection::vec((prop::array::uniform3(-10.0..10.0f64), prop::array::uniform2(0.0..640.0f64), -3.2..3.2f64, -5.0..5.0f64), 0..20),
        status in prop_oneof![Just(ReportStatus::Converged), Just(ReportStatus::RankDeficient), Just(ReportStatus::NotConverged)],
        k in intrinsics(),
    ) {
        let records: Vec<ResidualRecord> = recs
            .iter()
            .map(|(p, q, a, r)| ResidualRecord {
                lidar_point: Vector3::from(*p),
                q: Vector2::from(*q),
                n: Vector2::new(a.cos(), a.sin()),
                residual: *r,
            })
            .collect();
        let res: Vec<f64> = records.iter().map(|r| r.residual).collect();
        let report = CalibrationReport {
            version: "0.1.0".into(),
            status,
            message: (status != ReportStatus::Converged).then(|| "stopped".to_string()),
            initial_extrinsic: t,
            rough_extrinsic: Some(t.inverse()),
            result: None,
            scenes: vec![SceneReport {
                name: "s".into(),
                intrinsics: k,
                lidar_points: 10,
                nan_dropped: 1,
                lidar_edges: 2,
                edge_pixels: 3,
                correspondences: records.len(),
                stats: ResidualStats::from_residuals(&res),
                quality: None,
                records,
            }],
            config: "rough = true\n[edges]\nvoxel_size = 0.5\n".into(),
        };
        prop_assert_eq!(CalibrationReport::parse(&report.serialize()).unwrap(), report);
    }
}
