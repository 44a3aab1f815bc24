//! Weighted Gauss-Newton / Levenberg-Marquardt estimation of the extrinsic,
//! the rough grid search, and scene observability diagnostics.

use nalgebra::{Matrix6, RowVector3, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{match_samples, Correspondence, EdgeSample, MatchGates};
use crate::error::{Error, Result};
use crate::geometry::{
    euler_zyx_to_rotation, project, project_with_jacobian, projection_jacobian, se3_boxplus, skew,
    CameraIntrinsics, RigidTransform, TwistIncrement,
};
use crate::image_edge::EdgePixelSet;
use crate::noise::{correspondence_noise_cov, ImageNoiseParams, LidarNoiseParams};

pub type RowVector6 = SMatrix<f64, 1, 6>;
pub type RowVector5 = SMatrix<f64, 1, 5>;

/// `r = nᵀ(f(π(T P)) − q)`.
pub fn residual(c: &Correspondence, t: &RigidTransform, k: &CameraIntrinsics) -> Result<f64> {
    let uv = project(&t.apply(&c.lidar_point), k)?;
    Ok(c.line.n.dot(&(uv - c.line.q)))
}

/// `∂r/∂δT` for the left perturbation, twist order `(δθ, δt)`.
pub fn jacobian_t(c: &Correspondence, t: &RigidTransform, k: &CameraIntrinsics) -> Result<RowVector6> {
    let pc = t.apply(&c.lidar_point);
    let (_, j) = project_with_jacobian(&pc, k)?;
    let a = c.line.n.transpose() * j;
    Ok(pose_row(&a, &pc))
}

/// `∂r/∂w` for the noise vector `w = (δP, δq)`.
pub fn jacobian_w(c: &Correspondence, t: &RigidTransform, k: &CameraIntrinsics) -> Result<RowVector5> {
    let pc = t.apply(&c.lidar_point);
    let (_, j) = project_with_jacobian(&pc, k)?;
    let a = c.line.n.transpose() * j * t.rotation;
    Ok(RowVector5::new(a[0], a[1], a[2], -c.line.n.x, -c.line.n.y))
}

fn pose_row(a: &RowVector3<f64>, pc: &Vector3<f64>) -> RowVector6 {
    let rot = -(a * skew(pc));
    RowVector6::new(rot[0], rot[1], rot[2], a[0], a[1], a[2])
}

/// One linearized, noise-weighted residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedResidual {
    pub r: f64,
    pub j_t: RowVector6,
    pub j_w: RowVector5,
    /// Residual variance `J_w Σ J_wᵀ`.
    pub s: f64,
}

pub fn linearize(
    c: &Correspondence,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    image_noise: &ImageNoiseParams,
    lidar_noise: &LidarNoiseParams,
) -> Result<LinearizedResidual> {
    let pc = t.apply(&c.lidar_point);
    let (uv, j) = project_with_jacobian(&pc, k)?;
    let nt = c.line.n.transpose();
    let a = nt * j;
    let ar = a * t.rotation;
    let j_w = RowVector5::new(ar[0], ar[1], ar[2], -c.line.n.x, -c.line.n.y);
    let cov = correspondence_noise_cov(&c.lidar_point, image_noise, lidar_noise);
    let s = (j_w * cov * j_w.transpose())[0];
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("non-positive residual variance {s}")));
    }
    Ok(LinearizedResidual {
        r: c.line.n.dot(&(uv - c.line.q)),
        j_t: pose_row(&a, &pc),
        j_w,
        s,
    })
}

/// `H = Σ J_Tᵀ J_T / s`, `g = Σ J_Tᵀ r / s`, summed in input order.
pub fn normal_equations(rows: &[LinearizedResidual]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for row in rows {
        let jt = row.j_t.transpose();
        h += jt * row.j_t / row.s;
        g += jt * (row.r / row.s);
    }
    (h, g)
}

/// Ratio of the extreme eigenvalues of a symmetric PSD matrix (∞ if singular).
pub fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = h.symmetric_eigen().eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub const CONDITION_LIMIT: f64 = 1e10;

/// Solves `(H + λ diag H) δ = −g`.
pub fn solve_delta(h: &Matrix6<f64>, g: &Vector6<f64>, damping: f64) -> Result<TwistIncrement> {
    let condition = condition_number(h);
    if condition > CONDITION_LIMIT {
        return Err(Error::RankDeficient { condition });
    }
    let mut a = *h;
    for i in 0..6 {
        a[(i, i)] += damping * h[(i, i)];
    }
    let chol = a.cholesky().ok_or(Error::RankDeficient { condition })?;
    Ok(TwistIncrement::from_vector(&chol.solve(&(-g))))
}

/// Extrinsic covariance `H⁻¹`.
pub fn covariance(h: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let condition = condition_number(h);
    if condition > CONDITION_LIMIT {
        return Err(Error::RankDeficient { condition });
    }
    let inv = h
        .cholesky()
        .ok_or(Error::RankDeficient { condition })?
        .inverse();
    Ok((inv + inv.transpose()) * 0.5)
}

/// Per-axis standard deviations `(θx, θy, θz, tx, ty, tz)`.
pub fn sigma_per_axis(cov: &Matrix6<f64>) -> Vector6<f64> {
    cov.diagonal().map(|v| v.max(0.0).sqrt())
}

/// One scene's inputs to the estimator.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a> {
    pub samples: &'a [EdgeSample],
    pub edge_set: &'a EdgePixelSet,
    pub intrinsics: &'a CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub convergence_eps: f64,
    pub max_iterations: usize,
    pub damping: f64,
    pub min_correspondences: usize,
    pub rough_gates: MatchGates,
    pub fine_gates: MatchGates,
    pub image_noise: ImageNoiseParams,
    pub lidar_noise: LidarNoiseParams,
    pub rough_rot_step_deg: f64,
    pub rough_rot_range_deg: f64,
    pub rough_trans_step: f64,
    pub rough_trans_range: f64,
    pub rough_max_rounds: usize,
    /// Distance gates (pixels) of the refinement sweeps that follow the wide-gate
    /// search; the other gates are taken from `fine_gates`.
    pub rough_refine_pixel_dists: Vec<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            convergence_eps: 1e-6,
            max_iterations: 50,
            damping: 1e-4,
            min_correspondences: crate::correspondence::MIN_CORRESPONDENCES,
            rough_gates: MatchGates::rough(),
            fine_gates: MatchGates::fine(),
            image_noise: ImageNoiseParams::default(),
            lidar_noise: LidarNoiseParams::default(),
            rough_rot_step_deg: 0.5,
            rough_rot_range_deg: 5.0,
            rough_trans_step: 0.02,
            rough_trans_range: 0.1,
            rough_max_rounds: 10,
            rough_refine_pixel_dists: vec![5.0, 3.0],
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.convergence_eps > 0.0) {
            return bad("convergence_eps must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.damping >= 0.0) {
            return bad("damping must be non-negative");
        }
        for g in [&self.rough_gates, &self.fine_gates] {
            if g.kappa < 2 || !(g.max_pixel_dist > 0.0) || !(g.max_eigen_ratio > 0.0) {
                return bad("invalid correspondence gates");
            }
        }
        if self.rough_refine_pixel_dists.iter().any(|d| !(*d > 0.0)) {
            return bad("rough refinement gates must be positive");
        }
        if !(self.rough_rot_step_deg > 0.0 && self.rough_trans_step > 0.0) {
            return bad("rough grid steps must be positive");
        }
        if !(self.rough_rot_range_deg >= 0.0 && self.rough_trans_range >= 0.0) {
            return bad("rough grid ranges must be non-negative");
        }
        self.image_noise.validate()?;
        self.lidar_noise.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub extrinsic: RigidTransform,
    pub covariance: Matrix6<f64>,
    pub sigma: Vector6<f64>,
    pub residuals: Vec<f64>,
    /// `(1/N) Σ r²/s` at the solution.
    pub normalized_cost: f64,
    pub iterations: usize,
    pub correspondences: usize,
    pub pc_before: f64,
    pub pc_after: f64,
    /// Normalized cost at the start of every iteration.
    pub cost_history: Vec<f64>,
}

fn collect_correspondences(
    scenes: &[SceneInput],
    t: &RigidTransform,
    gates: &MatchGates,
) -> Vec<(usize, Correspondence)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            match_samples(s.samples, s.edge_set, t, s.intrinsics, gates)
                .into_iter()
                .map(move |c| (i, c))
        })
        .collect()
}

fn linearize_all(
    scenes: &[SceneInput],
    corrs: &[(usize, Correspondence)],
    t: &RigidTransform,
    cfg: &CalibrationConfig,
) -> Result<Vec<LinearizedResidual>> {
    corrs
        .par_iter()
        .map(|(i, c)| linearize(c, t, scenes[*i].intrinsics, &cfg.image_noise, &cfg.lidar_noise))
        .collect()
}

fn weighted_cost(
    scenes: &[SceneInput],
    corrs: &[(usize, Correspondence)],
    rows: &[LinearizedResidual],
    t: &RigidTransform,
) -> f64 {
    let mut cost = 0.0;
    for ((i, c), row) in corrs.iter().zip(rows) {
        match residual(c, t, scenes[*i].intrinsics) {
            Ok(r) => cost += r * r / row.s,
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

/// Angle below which edge directions count as the same direction for the
/// structural observability check.
pub const DIRECTION_CLUSTER_DEG: f64 = 5.0;

/// Groups unit directions (sign-free) greedily: each joins the first cluster whose
/// representative lies within `tol_deg`. Returns the cluster mean per input.
pub fn cluster_directions(dirs: &[Vector3<f64>], tol_deg: f64) -> Vec<Vector3<f64>> {
    let cos_tol = tol_deg.to_radians().cos();
    let mut reps: Vec<Vector3<f64>> = Vec::new();
    let mut sums: Vec<Vector3<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(dirs.len());
    for d in dirs {
        let found = reps.iter().position(|r| r.dot(d).abs() >= cos_tol);
        match found {
            Some(j) => {
                sums[j] += if reps[j].dot(d) >= 0.0 { *d } else { -*d };
                labels.push(j);
            }
            None => {
                reps.push(*d);
                sums.push(*d);
                labels.push(reps.len() - 1);
            }
        }
    }
    let means: Vec<_> = sums.iter().map(|s| s.normalize()).collect();
    labels.into_iter().map(|j| means[j]).collect()
}

/// Weighted information matrix built from the analytic image direction of each
/// correspondence's (direction-clustered) 3-D edge instead of the measured normal.
/// Edges sharing one direction leave translation along it exactly unconstrained.
pub fn structural_information(
    corrs: &[(usize, Correspondence)],
    rows: Option<&[LinearizedResidual]>,
    scenes_k: &dyn Fn(usize) -> CameraIntrinsics,
    t: &RigidTransform,
) -> Matrix6<f64> {
    let dirs: Vec<_> = corrs.iter().map(|(_, c)| c.edge_dir_3d).collect();
    let clustered = cluster_directions(&dirs, DIRECTION_CLUSTER_DEG);
    let mut h = Matrix6::zeros();
    for (idx, ((i, c), e)) in corrs.iter().zip(&clustered).enumerate() {
        let k = scenes_k(*i);
        let pc = t.apply(&c.lidar_point);
        let Ok((_, j)) = project_with_jacobian(&pc, &k) else {
            continue;
        };
        let g: Vector2<f64> = j * (t.rotation * e);
        if g.norm() < 1e-12 {
            continue;
        }
        let g = g.normalize();
        let n = Vector2::new(-g.y, g.x);
        let row = pose_row(&(n.transpose() * j), &pc);
        let w = rows.map_or(1.0, |r| 1.0 / r[idx].s);
        h += row.transpose() * row * w;
    }
    h
}

fn check_structure(
    scenes: &[SceneInput],
    corrs: &[(usize, Correspondence)],
    rows: &[LinearizedResidual],
    t: &RigidTransform,
) -> Result<()> {
    let h = structural_information(corrs, Some(rows), &|i| *scenes[i].intrinsics, t);
    let condition = condition_number(&h);
    if condition > CONDITION_LIMIT {
        Err(Error::RankDeficient { condition })
    } else {
        Ok(())
    }
}

/// Fraction of all LiDAR edge samples that find a gated image correspondence.
pub fn percent_correspondence(scenes: &[SceneInput], t: &RigidTransform, gates: &MatchGates) -> f64 {
    let total: usize = scenes.iter().map(|s| s.samples.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let matched: usize = scenes
        .iter()
        .map(|s| match_samples(s.samples, s.edge_set, t, s.intrinsics, gates).len())
        .sum();
    matched as f64 / total as f64
}

const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e12;

/// Iterates from `t0` until the accepted step satisfies `‖δθ‖ + ‖δt‖ < eps`.
///
/// Correspondences are rebuilt every iteration. The rough gates are used until the
/// step falls below `ROUGH_PHASE_STEP` (or the association starts cycling, or half
/// the iteration budget is spent), after which the fine gates apply. The fine-gate
/// association is frozen once it cycles or after `FINE_REASSOCIATIONS` rebuilds.
pub fn iterate_mle(
    scenes: &[SceneInput],
    t0: &RigidTransform,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    t0.validate()?;
    let eps = cfg.convergence_eps;
    let mut t = *t0;
    let mut lambda = cfg.damping;
    let mut fine = false;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut seen: Vec<u64> = Vec::new();
    let mut frozen: Option<Vec<(usize, Correspondence)>> = None;
    let mut fine_rounds = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let gates = if fine { &cfg.fine_gates } else { &cfg.rough_gates };
        let corrs = match &frozen {
            Some(c) => c.clone(),
            None => collect_correspondences(scenes, &t, gates),
        };
        // Re-association with hard gates can cycle or drift between neighborhoods at
        // edge ends. A recurring association ends the rough phase; the fine phase
        // re-associates a few times and then holds the association fixed.
        let mut cycled = false;
        if frozen.is_none() {
            let key = association_key(&corrs);
            cycled = seen.contains(&key) && seen.last() != Some(&key);
            seen.push(key);
            if fine && (cycled || fine_rounds >= FINE_REASSOCIATIONS) {
                frozen = Some(corrs.clone());
            }
        }
        if corrs.len() < cfg.min_correspondences {
            return Err(Error::TooFewCorrespondences {
                found: corrs.len(),
                required: cfg.min_correspondences,
            });
        }
        let rows = linearize_all(scenes, &corrs, &t, cfg)?;
        check_structure(scenes, &corrs, &rows, &t)?;
        let (h, g) = normal_equations(&rows);
        let cost: f64 = rows.iter().map(|r| r.r * r.r / r.s).sum();
        history.push(cost / rows.len() as f64);

        let mut step = 0.0;
        loop {
            let delta = solve_delta(&h, &g, lambda)?;
            let candidate = se3_boxplus(&t, &delta);
            if weighted_cost(scenes, &corrs, &rows, &candidate) <= cost {
                t = candidate;
                step = delta.norm();
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                break;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // No descent left at this association: stationary.
                lambda = cfg.damping;
                break;
            }
        }
        if !fine {
            if step < ROUGH_PHASE_STEP || cycled || iterations >= cfg.max_iterations / 2 {
                fine = true;
                seen.clear();
            }
            continue;
        }
        fine_rounds += 1;
        if step < eps {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged { iterations });
    }
    finalize(scenes, t, *t0, cfg, iterations, history)
}

/// Step norm below which the rough gates give way to the fine gates.
const ROUGH_PHASE_STEP: f64 = 1e-3;
/// Fine-phase iterations that rebuild correspondences before the association is frozen.
const FINE_REASSOCIATIONS: usize = 5;

fn association_key(corrs: &[(usize, Correspondence)]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (i, c) in corrs {
        (i, c.edge_index, c.sample_index, c.line.q.x.to_bits(), c.line.q.y.to_bits()).hash(&mut h);
    }
    h.finish()
}

fn finalize(
    scenes: &[SceneInput],
    t: RigidTransform,
    t0: RigidTransform,
    cfg: &CalibrationConfig,
    iterations: usize,
    cost_history: Vec<f64>,
) -> Result<CalibrationResult> {
    let corrs = collect_correspondences(scenes, &t, &cfg.fine_gates);
    if corrs.len() < cfg.min_correspondences {
        return Err(Error::TooFewCorrespondences {
            found: corrs.len(),
            required: cfg.min_correspondences,
        });
    }
    let rows = linearize_all(scenes, &corrs, &t, cfg)?;
    check_structure(scenes, &corrs, &rows, &t)?;
    let (h, _) = normal_equations(&rows);
    let cov = covariance(&h)?;
    let residuals: Vec<f64> = rows.iter().map(|r| r.r).collect();
    let normalized_cost = rows.iter().map(|r| r.r * r.r / r.s).sum::<f64>() / rows.len() as f64;
    Ok(CalibrationResult {
        extrinsic: t,
        covariance: cov,
        sigma: sigma_per_axis(&cov),
        residuals,
        normalized_cost,
        iterations,
        correspondences: rows.len(),
        pc_before: percent_correspondence(scenes, &t0, &cfg.rough_gates),
        pc_after: percent_correspondence(scenes, &t, &cfg.rough_gates),
        cost_history,
    })
}

/// Offset `(yaw, pitch, roll)` in degrees and translation applied on the camera side.
pub fn apply_offset(t: &RigidTransform, offset: &[f64; 6]) -> RigidTransform {
    let r = euler_zyx_to_rotation(
        offset[0].to_radians(),
        offset[1].to_radians(),
        offset[2].to_radians(),
    );
    RigidTransform {
        rotation: r * t.rotation,
        translation: r * t.translation + Vector3::new(offset[3], offset[4], offset[5]),
    }
}

/// Like [`apply_offset`], but the rotation turns about `pivot` (camera frame) instead
/// of the camera center.
pub fn apply_offset_about(t: &RigidTransform, offset: &[f64; 6], pivot: &Vector3<f64>) -> RigidTransform {
    let r = euler_zyx_to_rotation(
        offset[0].to_radians(),
        offset[1].to_radians(),
        offset[2].to_radians(),
    );
    RigidTransform {
        rotation: r * t.rotation,
        translation: r * (t.translation - pivot) + pivot + Vector3::new(offset[3], offset[4], offset[5]),
    }
}

/// Mean of all samples mapped into the camera frame by `t`.
fn sample_centroid(scenes: &[SceneInput], t: &RigidTransform) -> Vector3<f64> {
    let (sum, n) = scenes
        .iter()
        .flat_map(|s| s.samples.iter())
        .fold((Vector3::zeros(), 0usize), |(acc, n), s| (acc + t.apply(&s.point), n + 1));
    if n == 0 {
        Vector3::zeros()
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughResult {
    pub extrinsic: RigidTransform,
    pub pc_before: f64,
    pub pc_after: f64,
    pub rounds: usize,
}

/// Per-axis grid search maximizing the percentage of correspondence; the three
/// rotation axes are swept first, then the three translation axes, repeated until
/// a full round brings no improvement. Further passes repeat the sweeps about the
/// scene centroid, scored with each of `rough_refine_pixel_dists` in turn. The returned P.C. (rough gates) never drops below the input's.
pub fn rough_calibrate(
    scenes: &[SceneInput],
    t0: &RigidTransform,
    cfg: &CalibrationConfig,
) -> Result<RoughResult> {
    cfg.validate()?;
    t0.validate()?;
    let rot_n = (cfg.rough_rot_range_deg / cfg.rough_rot_step_deg).round() as i64;
    let trans_n = (cfg.rough_trans_range / cfg.rough_trans_step).round() as i64;
    let rough = |t: &RigidTransform| percent_correspondence(scenes, t, &cfg.rough_gates);
    let pc_before = rough(t0);
    let mut rounds = 0;
    // The wide gates find the basin with rotations about the camera center.
    let o1 = grid_sweep(cfg, rot_n, trans_n, &mut rounds, |o| Some(rough(&apply_offset(t0, o))));
    // Tighter gates then sharpen the estimate. Rotating about the scene centroid keeps
    // rotation and translation steps from shifting the image the same way, and moves
    // must keep the wide-gate score at or above its starting value.
    let mut extrinsic = apply_offset(t0, &o1);
    for &px in &cfg.rough_refine_pixel_dists {
        let gates = MatchGates { max_pixel_dist: px, ..cfg.fine_gates };
        let base = extrinsic;
        let pivot = sample_centroid(scenes, &base);
        let o = grid_sweep(cfg, rot_n, trans_n, &mut rounds, |o| {
            let t = apply_offset_about(&base, o, &pivot);
            (rough(&t) >= pc_before).then(|| percent_correspondence(scenes, &t, &gates))
        });
        extrinsic = apply_offset_about(&base, &o, &pivot);
    }
    Ok(RoughResult {
        extrinsic,
        pc_before,
        pc_after: rough(&extrinsic),
        rounds,
    })
}

/// Greedy per-axis sweeps from the zero offset maximizing `score` (`None` marks an
/// inadmissible candidate). Each axis moves to the middle of the run of grid values
/// tied for its best score, so flat optima resolve to their center. Stops after a
/// round without strict improvement.
fn grid_sweep(
    cfg: &CalibrationConfig,
    rot_n: i64,
    trans_n: i64,
    rounds: &mut usize,
    score: impl Fn(&[f64; 6]) -> Option<f64>,
) -> [f64; 6] {
    let mut best = [0.0; 6];
    let mut best_score = score(&best).unwrap_or(f64::NEG_INFINITY);
    for _ in 0..cfg.rough_max_rounds {
        *rounds += 1;
        let start_score = best_score;
        for axis in 0..6 {
            let (n, step) = if axis < 3 {
                (rot_n, cfg.rough_rot_step_deg)
            } else {
                (trans_n, cfg.rough_trans_step)
            };
            let center = best;
            let line: Vec<([f64; 6], f64)> = (-n..=n)
                .map(|i| {
                    let mut o = center;
                    o[axis] += i as f64 * step;
                    let s = if i == 0 { Some(best_score) } else { score(&o) };
                    (o, s.unwrap_or(f64::NEG_INFINITY))
                })
                .collect();
            let top = line.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            if top < best_score {
                continue;
            }
            // Tied run around the current position if it is a maximum, else around
            // the first maximum.
            let mid = n as usize;
            let seed = if line[mid].1 == top {
                mid
            } else {
                line.iter().position(|c| c.1 == top).unwrap_or(mid)
            };
            let (mut lo, mut hi) = (seed, seed);
            while lo > 0 && line[lo - 1].1 == top {
                lo -= 1;
            }
            while hi + 1 < line.len() && line[hi + 1].1 == top {
                hi += 1;
            }
            best = line[(lo + hi) / 2].0;
            best_score = top;
        }
        if best_score <= start_score {
            break;
        }
    }
    best
}

/// Observability diagnostics of one scene at a given extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneQuality {
    /// `Σ JᵀJ` of the distortion-free pose rows.
    pub information: Matrix6<f64>,
    /// Eigenvalues of `information`, ascending.
    pub eigenvalues: Vector6<f64>,
    pub condition_number: f64,
    /// Correspondence counts on a 3×3 grid, `[row][col]` from the top left.
    pub histogram: [[usize; 3]; 3],
    pub uneven_distribution: bool,
    pub structural_condition: f64,
    pub rank_deficient: bool,
}

/// A band (row or column of the 3×3 grid) holding more than this fraction of
/// correspondences flags the distribution as uneven.
pub const UNEVEN_BAND_FRACTION: f64 = 0.7;

pub fn scene_quality(
    corrs: &[Correspondence],
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<SceneQuality> {
    let mut h = Matrix6::zeros();
    let mut histogram = [[0usize; 3]; 3];
    let mut total = 0usize;
    for c in corrs {
        let pc = t.apply(&c.lidar_point);
        let j = projection_jacobian(&pc, k)?;
        let row = pose_row(&(c.line.n.transpose() * j), &pc);
        h += row.transpose() * row;
        if let Ok(uv) = project(&pc, k) {
            if k.in_frame(&uv) {
                let col = ((uv.x / k.width as f64 * 3.0) as usize).min(2);
                let r = ((uv.y / k.height as f64 * 3.0) as usize).min(2);
                histogram[r][col] += 1;
                total += 1;
            }
        }
    }
    let mut eigenvalues = h.symmetric_eigen().eigenvalues;
    eigenvalues.as_mut_slice().sort_by(f64::total_cmp);
    let band_max = (0..3)
        .flat_map(|i| {
            let row: usize = histogram[i].iter().sum();
            let col: usize = histogram.iter().map(|r| r[i]).sum();
            [row, col]
        })
        .max()
        .unwrap_or(0);
    let uneven = total == 0 || band_max as f64 > UNEVEN_BAND_FRACTION * total as f64;
    let tagged: Vec<_> = corrs.iter().map(|c| (0usize, *c)).collect();
    let hs = structural_information(&tagged, None, &|_| *k, t);
    let structural_condition = condition_number(&hs);
    Ok(SceneQuality {
        information: h,
        eigenvalues,
        condition_number: condition_number(&h),
        histogram,
        uneven_distribution: uneven,
        structural_condition,
        rank_deficient: structural_condition > CONDITION_LIMIT,
    })
}

/// Mean after dropping `fraction` of the values from each end.
pub fn trimmed_mean(values: &[f64], fraction: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut cut = ((v.len() as f64) * fraction).floor() as usize;
    if 2 * cut >= v.len() {
        cut = (v.len() - 1) / 2;
    }
    let kept = &v[cut..v.len() - cut];
    Some(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{sample_edges, LineFit2D};
    use crate::lidar_edge::{Edge3D, EdgeSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nominal() -> RigidTransform {
        RigidTransform::from_euler_zyx_degrees([0.0, -90.0, 90.0], [0.05, -0.03, 0.02])
    }

    fn k_distorted() -> CameraIntrinsics {
        CameraIntrinsics {
            k1: -0.12,
            k2: 0.03,
            k3: 0.001,
            p1: 0.0005,
            p2: -0.0003,
            ..CameraIntrinsics::pinhole(500.0, 510.0, 322.0, 238.0, 640, 480)
        }
    }

    fn corr(p: Vector3<f64>, q: Vector2<f64>, ang: f64) -> Correspondence {
        let n = Vector2::new(ang.cos(), ang.sin());
        let line = LineFit2D {
            q,
            n,
            d: Vector2::new(n.y, -n.x),
            eigen_ratio: 0.0,
        };
        Correspondence::new(p, line, Vector3::z()).unwrap()
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480), k_distorted()] {
            for _ in 0..200 {
                let p = Vector3::new(rng.random_range(2.0..6.0), rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
                let c = corr(p, Vector2::new(300.0, 250.0), rng.random_range(0.0..6.28));
                let t = nominal();
                let jt = jacobian_t(&c, &t, &k).unwrap();
                let jw = jacobian_w(&c, &t, &k).unwrap();
                let h = 1e-6;
                for i in 0..6 {
                    let mut e = Vector6::zeros();
                    e[i] = h;
                    let rp = residual(&c, &se3_boxplus(&t, &TwistIncrement::from_vector(&e)), &k).unwrap();
                    let rm = residual(&c, &se3_boxplus(&t, &TwistIncrement::from_vector(&(-e))), &k).unwrap();
                    let fd = (rp - rm) / (2.0 * h);
                    assert!((fd - jt[i]).abs() <= 1e-5 * (1.0 + jt[i].abs()), "J_T[{i}] {fd} vs {}", jt[i]);
                }
                for i in 0..5 {
                    let mut cp = c;
                    let mut cm = c;
                    if i < 3 {
                        cp.lidar_point[i] += h;
                        cm.lidar_point[i] -= h;
                    } else {
                        cp.line.q[i - 3] += h;
                        cm.line.q[i - 3] -= h;
                    }
                    let fd = (residual(&cp, &t, &k).unwrap() - residual(&cm, &t, &k).unwrap()) / (2.0 * h);
                    assert!((fd - jw[i]).abs() <= 1e-5 * (1.0 + jw[i].abs()), "J_w[{i}] {fd} vs {}", jw[i]);
                }
                let row = linearize(&c, &t, &k, &ImageNoiseParams::default(), &LidarNoiseParams::default()).unwrap();
                assert_eq!(row.j_t, jt);
                assert_eq!(row.j_w, jw);
                assert!(row.s > 0.0);
            }
        }
    }

    #[test]
    fn pinhole_pose_jacobian_closed_form() {
        let k = CameraIntrinsics::pinhole(480.0, 520.0, 320.0, 240.0, 640, 480);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..6.0));
            let c = corr(p, Vector2::zeros(), rng.random_range(0.0..6.28));
            let jt = jacobian_t(&c, &RigidTransform::identity(), &k).unwrap();
            let (x, y, z) = (p.x, p.y, p.z);
            let (fx, fy) = (k.fx, k.fy);
            let r1 = RowVector6::new(-fx * x * y / (z * z), fx + fx * x * x / (z * z), -fx * y / z, fx / z, 0.0, -fx * x / (z * z));
            let r2 = RowVector6::new(-fy - fy * y * y / (z * z), fy * x * y / (z * z), fy * x / z, 0.0, fy / z, -fy * y / (z * z));
            let oracle = r1 * c.line.n.x + r2 * c.line.n.y;
            assert!((jt - oracle).norm() < 1e-9 * (1.0 + oracle.norm()));
        }
    }

    #[test]
    fn damped_solve_matches_direct_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let h = a * a.transpose() + Matrix6::identity();
        let g = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let d = solve_delta(&h, &g, 0.0).unwrap().to_vector();
        assert!((h * d + g).norm() < 1e-10);
        let lam = 0.5;
        let d = solve_delta(&h, &g, lam).unwrap().to_vector();
        let damped = h + Matrix6::from_diagonal(&(h.diagonal() * lam));
        assert!((damped * d + g).norm() < 1e-10);
        let mut singular = h;
        singular.fill_row(5, 0.0);
        singular.fill_column(5, 0.0);
        assert!(matches!(solve_delta(&singular, &g, 0.0), Err(Error::RankDeficient { .. })));
        assert!(covariance(&singular).is_err());
        let cov = covariance(&h).unwrap();
        assert!((cov * h - Matrix6::identity()).norm() < 1e-9);
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(trimmed_mean(&v, 0.2), Some(5.5));
        let mut w = v.clone();
        w[9] = 1e9;
        assert_eq!(trimmed_mean(&w, 0.2), Some(5.5));
        assert_eq!(trimmed_mean(&[4.0], 0.2), Some(4.0));
        assert_eq!(trimmed_mean(&[], 0.2), None);
    }

    #[test]
    fn direction_clusters() {
        let a = Vector3::new(0.0, 0.0, 1.0);
        let b = Vector3::new(0.01, 0.0, -1.0).normalize();
        let c = Vector3::x();
        let out = cluster_directions(&[a, b, c], 5.0);
        assert!((out[0] - out[1]).norm() < 1e-12);
        assert!((out[0] - Vector3::new(-0.005, 0.0, 1.0).normalize()).norm() < 1e-6);
        assert_eq!(out[2], c);
    }

    // A small world of box edges in the LiDAR frame (x forward, z up).
    fn box_edges(all_directions: bool) -> Vec<Edge3D> {
        let mk = |p: [f64; 3], d: [f64; 3], len: f64| Edge3D {
            point_on_line: Vector3::from(p),
            direction: Vector3::from(d).normalize(),
            t_min: 0.0,
            t_max: len,
            source: EdgeSource { voxel: [0; 3], planes: (0, 1) },
            plane_normals: [Vector3::x(), Vector3::y()],
        };
        let mut v = vec![
            mk([4.0, 1.5, -1.0], [0.0, 0.0, 1.0], 2.0),
            mk([4.0, -1.5, -1.0], [0.0, 0.0, 1.0], 2.0),
            mk([3.0, 0.3, -1.0], [0.0, 0.0, 1.0], 2.0),
            mk([5.0, -0.6, -1.0], [0.0, 0.0, 1.0], 2.0),
        ];
        if all_directions {
            v.push(mk([4.0, -1.5, 1.0], [0.0, 1.0, 0.0], 3.0));
            v.push(mk([4.0, -1.5, -1.0], [0.0, 1.0, 0.0], 3.0));
            v.push(mk([2.5, 1.5, -1.0], [1.0, 0.0, 0.0], 1.5));
            v.push(mk([2.5, -1.5, 0.8], [1.0, 0.0, 0.0], 1.5));
        }
        v
    }

    fn exact_edge_set(edges: &[Edge3D], t: &RigidTransform, k: &CameraIntrinsics) -> EdgePixelSet {
        let mut px = Vec::new();
        for e in edges {
            let n = (e.length() / 0.001) as usize;
            for i in 0..=n {
                if let Ok(uv) = project(&t.apply(&e.at(e.t_min + i as f64 * 0.001)), k) {
                    if k.in_frame(&uv) {
                        px.push(uv);
                    }
                }
            }
        }
        EdgePixelSet::new(px, k.width, k.height).unwrap()
    }

    #[test]
    fn noise_free_recovery() {
        let k = CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480);
        let gt = nominal();
        let edges = box_edges(true);
        let set = exact_edge_set(&edges, &gt, &k);
        let samples = sample_edges(&edges, 0.02);
        let scenes = [SceneInput { samples: &samples, edge_set: &set, intrinsics: &k }];
        let t0 = apply_offset(&gt, &[0.4, -0.3, 0.3, 0.02, -0.015, 0.01]);
        let res = iterate_mle(&scenes, &t0, &CalibrationConfig::default()).unwrap();
        let (rot, trans) = res.extrinsic.distance_to(&gt);
        assert!(rot.to_degrees() < 1e-4 && trans < 1e-5, "{} deg {} m", rot.to_degrees(), trans);
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0] * 1.5 + 1e-12));
        assert!(res.pc_after >= res.pc_before);
        let q = scene_quality(
            &match_samples(&samples, &set, &res.extrinsic, &k, &MatchGates::fine()),
            &res.extrinsic,
            &k,
        )
        .unwrap();
        assert!(!q.rank_deficient);
        assert!(q.eigenvalues[0] > 0.0);
    }

    #[test]
    fn parallel_edges_are_rank_deficient() {
        let k = CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480);
        let gt = nominal();
        let edges = box_edges(false);
        let set = exact_edge_set(&edges, &gt, &k);
        let samples = sample_edges(&edges, 0.02);
        let scenes = [SceneInput { samples: &samples, edge_set: &set, intrinsics: &k }];
        let err = iterate_mle(&scenes, &gt, &CalibrationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
        let corrs = match_samples(&samples, &set, &gt, &k, &MatchGates::fine());
        assert!(scene_quality(&corrs, &gt, &k).unwrap().rank_deficient);
    }

    #[test]
    fn rough_search_improves_pc() {
        let k = CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480);
        let gt = nominal();
        let edges = box_edges(true);
        let set = exact_edge_set(&edges, &gt, &k);
        let samples = sample_edges(&edges, 0.02);
        let scenes = [SceneInput { samples: &samples, edge_set: &set, intrinsics: &k }];
        let t0 = apply_offset(&gt, &[2.0, -1.5, 1.0, 0.06, -0.04, 0.04]);
        let r = rough_calibrate(&scenes, &t0, &CalibrationConfig::default()).unwrap();
        assert!(r.pc_after > r.pc_before);
        let (rot0, _) = t0.distance_to(&gt);
        let (rot1, _) = r.extrinsic.distance_to(&gt);
        assert!(rot1 < rot0, "{} -> {}", rot0.to_degrees(), rot1.to_degrees());
    }
}
