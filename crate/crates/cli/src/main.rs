use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use edgecal::calibrate::{percent_correspondence, rough_calibrate, SceneInput};
use edgecal::io::{load_image, load_intrinsics, load_point_cloud, save_edge_map, save_rgb_png, CalibrationReport, RunConfig};
use edgecal::pipeline::{
    cross_validate, prepare_scenes, render_overlay, run_pipeline, split_scenes, write_outputs, write_sim_bundle,
    PreparedScene, SimBundleParams,
};
use edgecal::sim::{RenderParams, ScanParams, SceneKind};
use edgecal::{Error, RigidTransform};

#[derive(Parser)]
#[command(name = "edgecal", version, about = "Targetless LiDAR-camera extrinsic calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set calibration.max_iterations=80`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> edgecal::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config, &self.overrides)?;
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rough search (if enabled) and fine calibration over all scenes jointly.
    Calibrate(ConfigArgs),
    /// Grid search on the percentage of correspondence only.
    Rough(ConfigArgs),
    /// Extract LiDAR and image edges and write them out.
    ExtractEdges(ConfigArgs),
    /// Generate a synthetic bundle (clouds, images, intrinsics, config).
    Simulate(SimulateArgs),
    /// Calibrate on each scene and evaluate on every other one.
    CrossValidate(ConfigArgs),
    /// Project the clouds onto the images with a given extrinsic.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Comma separated scene kinds: room, facade, degenerate_one_direction, degenerate_top_heavy.
    #[arg(long, default_value = "room", value_delimiter = ',')]
    scene: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Angular step of the scan (degrees).
    #[arg(long, default_value_t = 0.05)]
    step_deg: f64,
    /// Image edge noise (pixels).
    #[arg(long, default_value_t = 1.5)]
    sigma_i: f64,
    /// Disable all sensor noise.
    #[arg(long)]
    noise_free: bool,
    /// Simulate beam-divergence bleeding at depth discontinuities.
    #[arg(long)]
    bleeding: bool,
    /// Write ASCII instead of binary PCD.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct OverlayArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Take the extrinsic from a calibration report instead of `initial_extrinsic`.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// 0 success, 2 configuration or input error, 3 degenerate scene, 4 no convergence.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Parse { .. }
        | Error::UnsupportedFormat { .. }
        | Error::MissingKey { .. }
        | Error::InvalidParameter(_)
        | Error::Io(_)
        | Error::Image(_) => 2,
        Error::RankDeficient { .. }
        | Error::TooFewCorrespondences { .. }
        | Error::NoEdgesFound
        | Error::NoVisibleEdges
        | Error::EmptyCloud
        | Error::EmptyImage
        | Error::InsufficientPixels { .. }
        | Error::DegeneratePoints => 3,
        Error::NotConverged { .. } => 4,
        _ => 1,
    }
}

fn describe(t: &RigidTransform) -> String {
    let e = t.euler_zyx_degrees();
    format!(
        "euler_zyx_deg [{:.4}, {:.4}, {:.4}]  translation [{:.4}, {:.4}, {:.4}] m",
        e[0], e[1], e[2], t.translation.x, t.translation.y, t.translation.z
    )
}

fn calibrate(args: &ConfigArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    let run = run_pipeline(&cfg)?;
    let out = write_outputs(&run, &cfg.output_dir, cfg.write_overlay)
        .with_context(|| format!("writing results to {}", cfg.output_dir.display()))?;
    let rep = &run.report;
    for s in &rep.scenes {
        let flags = s.quality.as_ref().map_or(String::new(), |q| {
            let mut f = String::new();
            if q.rank_deficient {
                f.push_str(" rank_deficient");
            }
            if q.uneven_distribution {
                f.push_str(" uneven_distribution");
            }
            f
        });
        println!(
            "{}: {} edges, {} correspondences, median |r| {:.3} px{}",
            s.name, s.lidar_edges, s.correspondences, s.stats.median, flags
        );
    }
    if let Some(res) = &rep.result {
        println!("extrinsic {}", describe(&res.extrinsic));
        let sd = res.sigma;
        println!(
            "sigma rot [{:.4}, {:.4}, {:.4}] deg  trans [{:.4}, {:.4}, {:.4}] m",
            sd[0].to_degrees(),
            sd[1].to_degrees(),
            sd[2].to_degrees(),
            sd[3],
            sd[4],
            sd[5]
        );
        println!("{} iterations, P.C. {:.3} -> {:.3}", res.iterations, res.pc_before, res.pc_after);
    }
    println!("report written to {}", out.report.display());
    match &run.failure {
        Some(e) => {
            eprintln!("error: {e}");
            Ok(exit_code(e))
        }
        None => Ok(0),
    }
}

fn rough(args: &ConfigArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    cfg.validate()?;
    let scenes = prepare_scenes(&cfg)?;
    let inputs: Vec<SceneInput> = scenes.iter().map(PreparedScene::input).collect();
    let r = rough_calibrate(&inputs, &cfg.initial_extrinsic.transform(), &cfg.calibration)?;
    println!("extrinsic {}", describe(&r.extrinsic));
    println!("P.C. {:.4} -> {:.4} after {} rounds", r.pc_before, r.pc_after, r.rounds);
    for (s, i) in scenes.iter().zip(&inputs) {
        let pc = percent_correspondence(std::slice::from_ref(i), &r.extrinsic, &cfg.calibration.rough_gates);
        println!("{}: P.C. {:.4}", s.name, pc);
    }
    Ok(0)
}

fn extract_edges(args: &ConfigArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    cfg.validate()?;
    let scenes = prepare_scenes(&cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    for s in &scenes {
        let mut text = String::from("# x0 y0 z0 x1 y1 z1 (meters, LiDAR frame)\n");
        for e in &s.edges {
            let (a, b) = (e.at(e.t_min), e.at(e.t_max));
            let _ = writeln!(text, "{:?} {:?} {:?} {:?} {:?} {:?}", a.x, a.y, a.z, b.x, b.y, b.z);
        }
        let base = cfg.output_dir.join(format!("edges_{}", s.name));
        fs::write(base.with_extension("txt"), text)?;
        save_edge_map(&base.with_extension("png"), &s.edge_set, s.photo.width, s.photo.height)?;
        println!("{}: {} LiDAR edges, {} edge pixels", s.name, s.edges.len(), s.edge_set.len());
    }
    Ok(0)
}

fn simulate(args: &SimulateArgs) -> anyhow::Result<u8> {
    let kinds = args
        .scene
        .iter()
        .map(|s| s.parse::<SceneKind>())
        .collect::<edgecal::Result<Vec<_>>>()?;
    let mut scan = ScanParams {
        angular_step: args.step_deg.to_radians(),
        ..ScanParams::default()
    };
    scan.bleeding.enabled = args.bleeding;
    let mut render = RenderParams {
        sigma_i: args.sigma_i,
        ..RenderParams::default()
    };
    if args.noise_free {
        scan = scan.noise_free();
        render.sigma_i = 0.0;
    }
    scan.validate()?;
    let params = SimBundleParams {
        kinds,
        seed: args.seed,
        scan,
        render,
        gt_extrinsic: None,
        binary_pcd: !args.ascii,
    };
    let path = write_sim_bundle(&args.out, &params)?;
    println!("bundle written; run `edgecal calibrate --config {}`", path.display());
    Ok(0)
}

fn cross(args: &ConfigArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    cfg.validate()?;
    let cv = cross_validate(&split_scenes(&cfg))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("cross_validation.csv");
    fs::write(&path, cv.to_text())?;
    print!("{:>24}", "median |r| (px)");
    for n in &cv.names {
        print!(" {n:>12}");
    }
    println!();
    for (i, row) in cv.cells.iter().enumerate() {
        print!("{:>24}", cv.names[i]);
        for s in row {
            print!(" {:>12.3}", s.median);
        }
        println!();
    }
    println!("written to {}", path.display());
    Ok(0)
}

fn overlay(args: &OverlayArgs) -> anyhow::Result<u8> {
    let cfg = args.config.load()?;
    let t = match &args.report {
        Some(p) => CalibrationReport::load(p)?.final_extrinsic(),
        None => cfg.initial_extrinsic.transform(),
    };
    fs::create_dir_all(&cfg.output_dir)?;
    for s in &cfg.scenes {
        let k = load_intrinsics(
            cfg.intrinsics_path(s)
                .ok_or_else(|| Error::InvalidParameter(format!("scene `{}` has no intrinsics file", s.name)))?,
        )
        .map_err(|e| e.in_scene(&s.name))?;
        let cloud = load_point_cloud(&s.cloud).map_err(|e| e.in_scene(&s.name))?.cloud;
        let photo = load_image(s.photo.as_deref().unwrap_or(&s.image)).map_err(|e| e.in_scene(&s.name))?;
        let rgb = render_overlay(&cloud, &photo, &t, &k);
        let path = cfg.output_dir.join(format!("overlay_{}.png", s.name));
        save_rgb_png(&path, photo.width, photo.height, rgb)?;
        println!("{}", path.display());
    }
    Ok(0)
}

fn threads_from_env() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("EDGECAL_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("EDGECAL_THREADS=`{v}` is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    threads_from_env()?;
    match &cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Rough(a) => rough(a),
        Command::ExtractEdges(a) => extract_edges(a),
        Command::Simulate(a) => simulate(a),
        Command::CrossValidate(a) => cross(a),
        Command::Overlay(a) => overlay(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map_or(1, exit_code);
            ExitCode::from(code)
        }
    }
}
