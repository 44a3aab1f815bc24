//! End-to-end runs: load scenes, extract edges, calibrate, and write results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::calibrate::{
    iterate_mle, residual, rough_calibrate, scene_quality, CalibrationResult, SceneInput,
};
use crate::correspondence::{match_samples, sample_edges, Correspondence, EdgeSample, MatchGates};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, RigidTransform};
use crate::image_edge::{canny_edges, EdgePixelSet, GrayImage};
use crate::io::{
    format_intrinsics, load_edge_map, load_image, load_intrinsics, load_point_cloud, save_edge_map,
    save_gray_png, save_rgb_png, write_pcd, CalibrationReport, EdgeSourceKind, InitialExtrinsic,
    PcdEncoding, ReportStatus, ResidualRecord, ResidualStats, RunConfig, SceneConfig, SceneReport,
    VERSION,
};
use crate::lidar_edge::{extract_edges_detailed, Edge3D, PointCloud};
use crate::sim::{
    generate_scene, render_edge_image, simulate_lidar_scan, RenderParams, ScanParams, SceneKind,
};

/// A scene after loading and edge extraction in both domains.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub name: String,
    pub cloud: PointCloud,
    pub nan_dropped: usize,
    pub edges: Vec<Edge3D>,
    pub samples: Vec<EdgeSample>,
    pub edge_set: EdgePixelSet,
    /// Background for the overlay.
    pub photo: GrayImage,
    pub intrinsics: CameraIntrinsics,
}

impl PreparedScene {
    pub fn input(&self) -> SceneInput<'_> {
        SceneInput {
            samples: &self.samples,
            edge_set: &self.edge_set,
            intrinsics: &self.intrinsics,
        }
    }

    pub fn correspondences(&self, t: &RigidTransform, gates: &MatchGates) -> Vec<Correspondence> {
        match_samples(&self.samples, &self.edge_set, t, &self.intrinsics, gates)
    }
}

fn prepare_inner(cfg: &RunConfig, scene: &SceneConfig) -> Result<PreparedScene> {
    let kpath = cfg
        .intrinsics_path(scene)
        .ok_or_else(|| Error::InvalidParameter("no intrinsics file".into()))?;
    let intrinsics = load_intrinsics(kpath)?;
    let loaded = load_point_cloud(&scene.cloud)?;
    let (edge_set, photo) = match cfg.edge_source {
        EdgeSourceKind::Canny => {
            let img = load_image(&scene.image)?;
            (canny_edges(&img, &cfg.canny)?, img)
        }
        EdgeSourceKind::EdgeMap => {
            let set = load_edge_map(&scene.image)?;
            let photo = match &scene.photo {
                Some(p) => load_image(p)?,
                None => load_image(&scene.image)?,
            };
            (set, photo)
        }
    };
    if (photo.width, photo.height) != (intrinsics.width, intrinsics.height) {
        return Err(Error::InvalidParameter(format!(
            "image is {}x{} but the intrinsics say {}x{}",
            photo.width, photo.height, intrinsics.width, intrinsics.height
        )));
    }
    let ecfg = cfg.edge_config();
    let edges = extract_edges_detailed(&loaded.cloud, &ecfg)?.edges;
    if edges.is_empty() {
        return Err(Error::NoEdgesFound);
    }
    let samples = sample_edges(&edges, ecfg.sample_spacing);
    Ok(PreparedScene {
        name: scene.name.clone(),
        cloud: loaded.cloud,
        nan_dropped: loaded.nan_dropped,
        edges,
        samples,
        edge_set,
        photo,
        intrinsics,
    })
}

pub fn prepare_scene(cfg: &RunConfig, scene: &SceneConfig) -> Result<PreparedScene> {
    prepare_inner(cfg, scene).map_err(|e| e.in_scene(&scene.name))
}

/// Loads and extracts every scene, in parallel.
pub fn prepare_scenes(cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    cfg.scenes.par_iter().map(|s| prepare_scene(cfg, s)).collect()
}

#[derive(Debug)]
pub struct PipelineRun {
    pub report: CalibrationReport,
    pub scenes: Vec<PreparedScene>,
    /// Set when the estimator stopped with `RankDeficient` or `NotConverged`; the
    /// report is still complete.
    pub failure: Option<Error>,
}

impl PipelineRun {
    pub fn extrinsic(&self) -> RigidTransform {
        self.report.final_extrinsic()
    }
}

fn scene_report(
    s: &PreparedScene,
    t: &RigidTransform,
    gates: &MatchGates,
) -> Result<SceneReport> {
    let corrs = s.correspondences(t, gates);
    let mut records = Vec::with_capacity(corrs.len());
    for c in &corrs {
        records.push(ResidualRecord::from_correspondence(c, residual(c, t, &s.intrinsics)?));
    }
    let r: Vec<f64> = records.iter().map(|r| r.residual).collect();
    let quality = if corrs.is_empty() {
        None
    } else {
        Some(scene_quality(&corrs, t, &s.intrinsics)?)
    };
    Ok(SceneReport {
        name: s.name.clone(),
        intrinsics: s.intrinsics,
        lidar_points: s.cloud.len(),
        nan_dropped: s.nan_dropped,
        lidar_edges: s.edges.len(),
        edge_pixels: s.edge_set.len(),
        correspondences: corrs.len(),
        stats: ResidualStats::from_residuals(&r),
        quality,
        records,
    })
}

/// Calibrates prepared scenes jointly; correspondences are stacked across all scenes.
pub fn calibrate_scenes(cfg: &RunConfig, scenes: Vec<PreparedScene>) -> Result<PipelineRun> {
    cfg.calibration.validate()?;
    let inputs: Vec<SceneInput> = scenes.iter().map(PreparedScene::input).collect();
    let t0 = cfg.initial_extrinsic.transform();
    let rough = if cfg.rough {
        Some(rough_calibrate(&inputs, &t0, &cfg.calibration)?.extrinsic)
    } else {
        None
    };
    let start = rough.unwrap_or(t0);
    let (result, failure, status): (Option<CalibrationResult>, Option<Error>, ReportStatus) =
        match iterate_mle(&inputs, &start, &cfg.calibration) {
            Ok(r) => (Some(r), None, ReportStatus::Converged),
            Err(e @ Error::RankDeficient { .. }) => (None, Some(e), ReportStatus::RankDeficient),
            Err(e @ Error::NotConverged { .. }) => (None, Some(e), ReportStatus::NotConverged),
            Err(e) => return Err(e),
        };
    let t = result.as_ref().map_or(start, |r| r.extrinsic);
    let scene_reports = scenes
        .iter()
        .map(|s| scene_report(s, &t, &cfg.calibration.fine_gates).map_err(|e| e.in_scene(&s.name)))
        .collect::<Result<Vec<_>>>()?;
    let report = CalibrationReport {
        version: VERSION.to_string(),
        status,
        message: failure.as_ref().map(|e| e.to_string()),
        initial_extrinsic: t0,
        rough_extrinsic: rough,
        result,
        scenes: scene_reports,
        config: cfg.to_toml(),
    };
    Ok(PipelineRun {
        report,
        scenes,
        failure,
    })
}

/// Validates the configuration, prepares every scene and calibrates them together.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let scenes = prepare_scenes(cfg)?;
    calibrate_scenes(cfg, scenes)
}

// ---------------------------------------------------------------------------
// Outputs

/// Jet colormap for `x` in [0, 1].
pub fn jet(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let c = |o: f64| ((1.5 - (4.0 * x - o).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0), c(2.0), c(1.0)]
}

/// Projects the cloud through `t` over the photo, colored by intensity (or depth when
/// the cloud has none) with the Jet map. The nearest point wins each pixel.
pub fn render_overlay(
    cloud: &PointCloud,
    photo: &GrayImage,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Vec<u8> {
    let (w, h) = (photo.width as usize, photo.height as usize);
    let mut rgb: Vec<u8> = photo.pixels.iter().flat_map(|&g| [g / 2, g / 2, g / 2]).collect();
    let mut depth = vec![f64::INFINITY; w * h];
    let mut hits = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let pc = t.apply(p);
        if let Ok(uv) = project(&pc, k) {
            let (u, v) = (uv.x.round(), uv.y.round());
            if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
                hits.push((v as usize * w + u as usize, pc.z, i));
            }
        }
    }
    let value = |i: usize, z: f64| cloud.intensity.as_ref().map_or(z, |v| v[i]);
    let (lo, hi) = hits.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, z, i)| {
        let v = value(i, z);
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &(px, z, i) in &hits {
        if z < depth[px] {
            depth[px] = z;
            let c = jet((value(i, z) - lo) / span);
            rgb[3 * px..3 * px + 3].copy_from_slice(&c);
        }
    }
    rgb
}

/// Bin width (pixels) of the residual histogram.
pub const HISTOGRAM_BIN: f64 = 0.25;

/// Counts of signed residuals in `HISTOGRAM_BIN` bins: `(lower edge, count)`.
pub fn residual_histogram(residuals: &[f64]) -> Vec<(f64, usize)> {
    if residuals.is_empty() {
        return Vec::new();
    }
    let bin = |r: f64| (r / HISTOGRAM_BIN).floor() as i64;
    let lo = residuals.iter().map(|&r| bin(r)).min().unwrap_or(0);
    let hi = residuals.iter().map(|&r| bin(r)).max().unwrap_or(0);
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &r in residuals {
        counts[(bin(r) - lo) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| ((lo + i as i64) as f64 * HISTOGRAM_BIN, c))
        .collect()
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Files written by [`write_outputs`].
#[derive(Debug, Clone, Default)]
pub struct OutputPaths {
    pub report: PathBuf,
    pub histogram: PathBuf,
    pub overlays: Vec<PathBuf>,
}

/// Writes `report.txt`, `residual_histogram.csv` and, when enabled, one
/// `overlay_<scene>.png` per scene into `dir`.
pub fn write_outputs(run: &PipelineRun, dir: &Path, overlays: bool) -> Result<OutputPaths> {
    fs::create_dir_all(dir)?;
    let mut out = OutputPaths {
        report: dir.join("report.txt"),
        histogram: dir.join("residual_histogram.csv"),
        overlays: Vec::new(),
    };
    fs::write(&out.report, run.report.serialize())?;
    let mut csv = String::from("scene,bin_low,bin_high,count\n");
    for s in &run.report.scenes {
        let r: Vec<f64> = s.records.iter().map(|r| r.residual).collect();
        for (lo, c) in residual_histogram(&r) {
            let _ = writeln!(csv, "{},{:?},{:?},{}", s.name, lo, lo + HISTOGRAM_BIN, c);
        }
    }
    fs::write(&out.histogram, csv)?;
    if overlays {
        let t = run.extrinsic();
        for s in &run.scenes {
            let path = dir.join(format!("overlay_{}.png", file_stem(&s.name)));
            let rgb = render_overlay(&s.cloud, &s.photo, &t, &s.intrinsics);
            save_rgb_png(&path, s.photo.width, s.photo.height, rgb)?;
            out.overlays.push(path);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub names: Vec<String>,
    pub extrinsics: Vec<RigidTransform>,
    /// `cells[i][j]`: extrinsic calibrated on configuration `i`, evaluated on `j`.
    pub cells: Vec<Vec<ResidualStats>>,
}

impl CrossValidation {
    pub fn to_text(&self) -> String {
        let mut o = String::from("calibrated_on,evaluated_on,count,min,q1,median,q3,max,mean\n");
        for (i, row) in self.cells.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                let _ = writeln!(
                    o,
                    "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                    self.names[i], self.names[j], s.count, s.min, s.q1, s.median, s.q3, s.max, s.mean
                );
            }
        }
        o
    }
}

/// One configuration per scene of `cfg`, sharing every other setting.
pub fn split_scenes(cfg: &RunConfig) -> Vec<RunConfig> {
    cfg.scenes
        .iter()
        .map(|s| RunConfig {
            scenes: vec![s.clone()],
            ..cfg.clone()
        })
        .collect()
}

/// Calibrates each configuration and evaluates its extrinsic on every other one.
/// Evaluation re-associates with the wide (rough) gates so that a foreign extrinsic
/// still finds its matches; statistics drop the largest 20 % of |r|.
pub fn cross_validate(cfgs: &[RunConfig]) -> Result<CrossValidation> {
    if cfgs.len() < 2 {
        return Err(Error::InvalidParameter("cross-validation needs at least two scenes".into()));
    }
    let mut runs = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let run = run_pipeline(cfg)?;
        if let Some(e) = run.failure {
            let name = cfg.scenes.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join("+");
            return Err(e.in_scene(name));
        }
        runs.push(run);
    }
    let names = runs
        .iter()
        .map(|r| r.scenes.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join("+"))
        .collect();
    let extrinsics: Vec<RigidTransform> = runs.iter().map(PipelineRun::extrinsic).collect();
    let mut cells = Vec::with_capacity(runs.len());
    for (i, t) in extrinsics.iter().enumerate() {
        let gates = cfgs[i].calibration.rough_gates;
        let mut row = Vec::with_capacity(runs.len());
        for run in &runs {
            let mut r = Vec::new();
            for s in &run.scenes {
                for c in s.correspondences(t, &gates) {
                    r.push(residual(&c, t, &s.intrinsics)?);
                }
            }
            row.push(if r.is_empty() {
                ResidualStats {
                    count: 0,
                    min: f64::NAN,
                    q1: f64::NAN,
                    median: f64::NAN,
                    q3: f64::NAN,
                    max: f64::NAN,
                    mean: f64::NAN,
                }
            } else {
                ResidualStats::from_residuals(&r)
            });
        }
        cells.push(row);
    }
    Ok(CrossValidation {
        names,
        extrinsics,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Synthetic bundles

#[derive(Debug, Clone)]
pub struct SimBundleParams {
    pub kinds: Vec<SceneKind>,
    pub seed: u64,
    pub scan: ScanParams,
    pub render: RenderParams,
    /// Ground truth; `None` uses each scene's own.
    pub gt_extrinsic: Option<RigidTransform>,
    pub binary_pcd: bool,
}

impl Default for SimBundleParams {
    fn default() -> Self {
        Self {
            kinds: vec![SceneKind::Room],
            seed: 0,
            scan: ScanParams::default(),
            render: RenderParams::default(),
            gt_extrinsic: None,
            binary_pcd: true,
        }
    }
}

fn write_transform(t: &RigidTransform) -> String {
    let e = t.euler_zyx_degrees();
    let r = &t.rotation;
    format!(
        "euler_zyx_deg = [{:?}, {:?}, {:?}]\ntranslation = [{:?}, {:?}, {:?}]\nrotation = [{:?}, {:?}, {:?}, {:?}, {:?}, {:?}, {:?}, {:?}, {:?}]\n",
        e[0], e[1], e[2], t.translation.x, t.translation.y, t.translation.z,
        r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]
    )
}

/// Writes one directory per scene (`cloud.pcd`, `image.png`, `edges.png`,
/// `intrinsics.txt`, `gt.txt`) under `dir`, plus a `config.toml` that calibrates them
/// jointly from the nominal mounting. Returns the config path.
pub fn write_sim_bundle(dir: &Path, params: &SimBundleParams) -> Result<PathBuf> {
    if params.kinds.is_empty() {
        return Err(Error::InvalidParameter("no scene kinds given".into()));
    }
    fs::create_dir_all(dir)?;
    let mut cfg = RunConfig {
        output_dir: PathBuf::from("out"),
        edge_source: EdgeSourceKind::EdgeMap,
        initial_extrinsic: InitialExtrinsic::default(),
        ..RunConfig::default()
    };
    for (i, &kind) in params.kinds.iter().enumerate() {
        let name = format!("{}_{}", kind.name(), i);
        let sub = dir.join(&name);
        fs::create_dir_all(&sub)?;
        let seed = params.seed.wrapping_add(i as u64);
        let mut scene = generate_scene(kind, seed);
        if let Some(t) = params.gt_extrinsic {
            scene.gt_extrinsic = t;
        }
        let scan = simulate_lidar_scan(&scene, &ScanParams { seed, ..params.scan })?;
        let img = render_edge_image(
            &scene,
            &scene.intrinsics,
            &scene.gt_extrinsic,
            &RenderParams { seed, ..params.render },
        )?;
        let enc = if params.binary_pcd { PcdEncoding::Binary } else { PcdEncoding::Ascii };
        write_pcd(&sub.join("cloud.pcd"), &scan.cloud, enc)?;
        save_gray_png(&sub.join("image.png"), &img.gray)?;
        let k = &scene.intrinsics;
        save_edge_map(&sub.join("edges.png"), &img.edges, k.width, k.height)?;
        fs::write(sub.join("intrinsics.txt"), format_intrinsics(k))?;
        fs::write(sub.join("gt.txt"), write_transform(&scene.gt_extrinsic))?;
        cfg.scenes.push(SceneConfig {
            name: name.clone(),
            cloud: PathBuf::from(&name).join("cloud.pcd"),
            image: PathBuf::from(&name).join("edges.png"),
            intrinsics: Some(PathBuf::from(&name).join("intrinsics.txt")),
            photo: Some(PathBuf::from(&name).join("image.png")),
        });
    }
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml())?;
    Ok(path)
}

/// Reads the ground truth written by [`write_sim_bundle`].
pub fn load_gt(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path)?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Parse {
            path: path.to_path_buf(),
            location: "toml".into(),
            message: e.to_string(),
        })?;
    let gt: InitialExtrinsic = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
        path: path.to_path_buf(),
        location: "toml".into(),
        message: e.to_string(),
    })?;
    Ok(gt.transform())
}
