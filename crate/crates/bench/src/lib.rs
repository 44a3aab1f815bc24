//! Shared fixtures for the benchmarks.

use edgecal::correspondence::{sample_edges, EdgeSample};
use edgecal::image_edge::{EdgePixelSet, GrayImage};
use edgecal::lidar_edge::{extract_edges_detailed, Edge3D, EdgeExtractionConfig, PointCloud};
use edgecal::sim::{generate_scene, render_edge_image, shade, simulate_lidar_scan, RenderParams, ScanParams, SceneKind, SyntheticScene};

/// One simulated room scanned at `step_deg`, with everything the stages need.
pub struct Fixture {
    pub scene: SyntheticScene,
    pub cloud: PointCloud,
    pub edges: Vec<Edge3D>,
    pub samples: Vec<EdgeSample>,
    pub edge_set: EdgePixelSet,
    pub photo: GrayImage,
}

impl Fixture {
    pub fn room(step_deg: f64) -> Self {
        let scene = generate_scene(SceneKind::Room, 0);
        let scan = ScanParams {
            angular_step: step_deg.to_radians(),
            ..ScanParams::default()
        };
        let cloud = simulate_lidar_scan(&scene, &scan).expect("scan").cloud;
        let cfg = EdgeExtractionConfig::default();
        let edges = extract_edges_detailed(&cloud, &cfg).expect("edges").edges;
        let samples = sample_edges(&edges, cfg.sample_spacing);
        let edge_set = render_edge_image(&scene, &scene.intrinsics, &scene.gt_extrinsic, &RenderParams::default())
            .expect("render")
            .edges;
        let photo = shade(&scene, &scene.intrinsics, &scene.gt_extrinsic);
        Self {
            scene,
            cloud,
            edges,
            samples,
            edge_set,
            photo,
        }
    }
}
