//! Pose recovery from 2D-3D correspondences.
//!
//! [`solve_pnp_lm`] fits the six pose parameters against the cuboid built
//! from predicted relative dimensions (Levenberg-Marquardt, local axis-angle
//! rotation updates, DLT initialization). [`solve_keypoint_lifting`] is the
//! dimension-free baseline: an EPnP-style linear solve in which every vertex
//! keeps the barycentric coordinates it has in a unit cube, so the box shape
//! is whatever the keypoints imply.
//!
//! Translations come out in model units (object height = 1); [`resolve_scale`]
//! converts to meters once the height is known.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SVector, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::decode::{Correspondence, MIN_CORRESPONDENCES};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    box_vertices, cuboid_vertices, CameraIntrinsics, Keypoints2D, Point2, Point3, Pose, RelativeDims, DEPTH_EPS,
    NUM_VERTICES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnPConfig {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop when the parameter step norm falls below this.
    pub step_tol: f64,
    /// Stop when the relative cost decrease falls below this.
    pub cost_tol: f64,
    /// Huber threshold on the per-point reprojection error, pixels.
    pub huber_px: Option<f64>,
}

impl Default for PnPConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            step_tol: 1e-10,
            cost_tol: 1e-12,
            huber_px: None,
        }
    }
}

impl PnPConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.initial_damping > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 0.0
            && self.damping_down < 1.0
            && self.step_tol > 0.0
            && self.cost_tol > 0.0
            && self.huber_px.is_none_or(|h| h > 0.0);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid PnP config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnPResult {
    /// Translation in model units.
    pub pose: Pose,
    /// Weighted RMS reprojection error, pixels.
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Distinct vertex indices present in a correspondence set.
fn distinct_vertices(corr: &[Correspondence]) -> usize {
    let mut seen = [false; NUM_VERTICES];
    for c in corr {
        if c.vertex < NUM_VERTICES {
            seen[c.vertex] = true;
        }
    }
    seen.iter().filter(|s| **s).count()
}

fn check_correspondences(corr: &[Correspondence], model_len: usize) -> Result<()> {
    for c in corr {
        if c.vertex >= model_len {
            return Err(invalid(format!("correspondence refers to vertex {}", c.vertex)));
        }
        if !(c.weight > 0.0 && c.weight.is_finite()) || !c.point.x.is_finite() || !c.point.y.is_finite() {
            return Err(invalid("correspondences need finite points and positive weights"));
        }
    }
    Ok(())
}

/// Weighted residuals `sqrt(w) (project(R X + t) - p)`, two per correspondence.
pub fn residuals(model: &[Point3], corr: &[Correspondence], k: &CameraIntrinsics, pose: &Pose) -> Option<DVector<f64>> {
    let mut r = DVector::zeros(2 * corr.len());
    for (i, c) in corr.iter().enumerate() {
        let y = pose.transform(&model[c.vertex]);
        let p = k.project_point(&y)?;
        let sw = c.weight.sqrt();
        r[2 * i] = sw * (p.x - c.point.x);
        r[2 * i + 1] = sw * (p.y - c.point.y);
    }
    Some(r)
}

/// Jacobian of [`residuals`] w.r.t. `(omega, t)` where the rotation is
/// updated as `exp([omega]x) R` and the translation additively.
pub fn jacobian(model: &[Point3], corr: &[Correspondence], k: &CameraIntrinsics, pose: &Pose) -> Option<DMatrix<f64>> {
    let mut j = DMatrix::zeros(2 * corr.len(), 6);
    let r = pose.rotation_matrix();
    for (i, c) in corr.iter().enumerate() {
        let rx = r * model[c.vertex].coords;
        let y = rx + pose.translation;
        if y.z <= DEPTH_EPS {
            return None;
        }
        let sw = c.weight.sqrt();
        let iz = 1.0 / y.z;
        let du = Vector3::new(k.fx * iz, 0.0, -k.fx * y.x * iz * iz) * sw;
        let dv = Vector3::new(0.0, k.fy * iz, -k.fy * y.y * iz * iz) * sw;
        // d(exp(w) R X)/dw at w = 0 is -[R X]x; a^T (-[b]x) = (b x a)^T.
        let du_w = rx.cross(&du);
        let dv_w = rx.cross(&dv);
        for col in 0..3 {
            j[(2 * i, col)] = du_w[col];
            j[(2 * i + 1, col)] = dv_w[col];
            j[(2 * i, 3 + col)] = du[col];
            j[(2 * i + 1, 3 + col)] = dv[col];
        }
    }
    Some(j)
}

/// Applies a `(omega, t)` increment.
pub fn apply_increment(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let mut q = UnitQuaternion::from_scaled_axis(w) * pose.rotation();
    q.renormalize();
    Pose::new(q, pose.translation + dt)
}

/// Per-point IRLS weights for the Huber loss.
fn huber_weights(r: &DVector<f64>, corr: &[Correspondence], threshold: Option<f64>) -> Vec<f64> {
    match threshold {
        None => vec![1.0; corr.len()],
        Some(t) => (0..corr.len())
            .map(|i| {
                // Residual norm in pixels, undoing the sqrt(w) scaling.
                let e = (r[2 * i].hypot(r[2 * i + 1])) / corr[i].weight.sqrt();
                if e <= t {
                    1.0
                } else {
                    t / e
                }
            })
            .collect(),
    }
}

fn robust_cost(r: &DVector<f64>, corr: &[Correspondence], threshold: Option<f64>) -> f64 {
    (0..corr.len())
        .map(|i| {
            let e2 = r[2 * i] * r[2 * i] + r[2 * i + 1] * r[2 * i + 1];
            match threshold {
                None => 0.5 * e2,
                Some(t) => {
                    let w = corr[i].weight;
                    let e = (e2 / w).sqrt();
                    if e <= t {
                        0.5 * e2
                    } else {
                        w * t * (e - 0.5 * t)
                    }
                }
            }
        })
        .sum()
}

fn rms_of(r: &DVector<f64>, corr: &[Correspondence]) -> f64 {
    let wsum: f64 = corr.iter().map(|c| c.weight).sum();
    (r.norm_squared() / wsum).sqrt()
}

/// Levenberg-Marquardt refinement from a given initial pose.
pub fn refine_pose(
    model: &[Point3],
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &PnPConfig,
    init: &Pose,
) -> Result<PnPResult> {
    cfg.validate()?;
    check_correspondences(corr, model.len())?;
    let mut pose = *init;
    let mut r = residuals(model, corr, k, &pose)
        .ok_or_else(|| Error::NumericalFailure("initial pose puts model points behind the camera".into()))?;
    let mut cost = robust_cost(&r, corr, cfg.huber_px);
    if !cost.is_finite() {
        return Err(Error::NumericalFailure("non-finite initial cost".into()));
    }
    let mut lambda = cfg.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        if cost <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
        let j = jacobian(model, corr, k, &pose).expect("current pose is in front of the camera");
        let w = huber_weights(&r, corr, cfg.huber_px);
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for i in 0..corr.len() {
            for row in [2 * i, 2 * i + 1] {
                let jr: SVector<f64, 6> = j.row(row).transpose().fixed_rows::<6>(0).into_owned();
                h += w[i] * jr * jr.transpose();
                g += w[i] * jr * r[row];
            }
        }

        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = h;
            for d in 0..6 {
                a[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= cfg.damping_up;
                continue;
            };
            let candidate = apply_increment(&pose, &step);
            let new_cost = residuals(model, corr, k, &candidate).map(|nr| (robust_cost(&nr, corr, cfg.huber_px), nr));
            match new_cost {
                Some((c, nr)) if c.is_finite() && c < cost => {
                    let rel = (cost - c) / cost;
                    pose = candidate;
                    r = nr;
                    cost = c;
                    lambda = (lambda * cfg.damping_down).max(1e-15);
                    accepted = true;
                    if step.norm() < cfg.step_tol || rel < cfg.cost_tol {
                        converged = true;
                    }
                    break;
                }
                _ => {
                    if step.norm() < cfg.step_tol {
                        // No representable improvement left.
                        converged = true;
                        break;
                    }
                    lambda *= cfg.damping_up;
                }
            }
        }
        if converged {
            break;
        }
        if !accepted {
            // Damping saturated: we are at a numerical minimum.
            converged = true;
            break;
        }
    }

    let rms = rms_of(&r, corr);
    if !rms.is_finite() {
        return Err(Error::NumericalFailure(format!("diverged, best rms {rms}")));
    }
    Ok(PnPResult { pose, rms, iterations, converged })
}

/// Projection matrix `[R | t]` (up to scale) by DLT in normalized coordinates,
/// projected onto a rotation. `None` when the configuration is degenerate.
pub fn dlt_pose(model: &[Point3], corr: &[Correspondence], k: &CameraIntrinsics) -> Option<Pose> {
    if distinct_vertices(corr) < 6 {
        return None;
    }
    let rows = (2 * corr.len()).max(12);
    let mut a = DMatrix::<f64>::zeros(rows, 12);
    for (i, c) in corr.iter().enumerate() {
        let x = k.normalize(&c.point);
        let p = model[c.vertex];
        let xh = [p.x, p.y, p.z, 1.0];
        for m in 0..4 {
            a[(2 * i, m)] = -xh[m];
            a[(2 * i, 8 + m)] = x.x * xh[m];
            a[(2 * i + 1, 4 + m)] = -xh[m];
            a[(2 * i + 1, 8 + m)] = x.y * xh[m];
        }
    }
    let v = null_vector(&a, 1e-9)?;
    let mut m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let mut t = Vector3::new(v[3], v[7], v[11]);
    if m.determinant() < 0.0 {
        m = -m;
        t = -t;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return None;
    }
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    let pose = Pose::from_matrix(&r, t / scale);
    let in_front = corr.iter().all(|c| pose.transform(&model[c.vertex]).z > DEPTH_EPS);
    in_front.then_some(pose)
}

/// Right singular vector of the smallest singular value, if it is isolated.
///
/// Fails when the second-smallest singular value is below `rank_tol` times
/// the largest (null space of dimension > 1).
fn null_vector(a: &DMatrix<f64>, rank_tol: f64) -> Option<DVector<f64>> {
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t?;
    let sv = &svd.singular_values;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (idx[0], idx[1]);
    let largest = sv.max();
    if !(largest > 0.0) || sv[second] < rank_tol * largest {
        return None;
    }
    Some(vt.row(smallest).transpose())
}

/// Upright, camera-facing starting rotations about the object `y` axis.
fn fallback_inits(model: &[Point3], corr: &[Correspondence], k: &CameraIntrinsics) -> Vec<Pose> {
    let centroid = corr.iter().fold(Vector3::zeros(), |a, c| a + c.point.coords.push(0.0)) / corr.len() as f64;
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for c in corr {
        lo = lo.inf(&c.point.coords.push(0.0));
        hi = hi.sup(&c.point.coords.push(0.0));
    }
    let image_extent = (hi - lo).xy().norm().max(1.0);
    let model_extent = model.iter().map(|p| p.coords.norm()).fold(0.0, f64::max) * 2.0;
    let depth = 0.5 * (k.fx + k.fy) * model_extent / image_extent;
    let ray = k.normalize(&Point2::new(centroid.x, centroid.y));
    let t = ray * depth;
    // Object y up maps to image up (camera -y).
    let upright = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    (0..4)
        .map(|i| {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2 * i as f64);
            Pose::new(upright * yaw, t)
        })
        .collect()
}

/// Solves for the pose of an arbitrary model. Tries the DLT initialization
/// (when available) and four front-facing fallbacks, keeping the lowest cost.
pub fn solve_pnp_model(
    model: &[Point3],
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &PnPConfig,
) -> Result<PnPResult> {
    check_correspondences(corr, model.len())?;
    let distinct = distinct_vertices(corr);
    if corr.len() < MIN_CORRESPONDENCES || distinct < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences { needed: MIN_CORRESPONDENCES, got: distinct });
    }
    let mut inits: Vec<Pose> = dlt_pose(model, corr, k).into_iter().collect();
    inits.extend(fallback_inits(model, corr, k));

    let mut best: Option<(f64, PnPResult)> = None;
    let mut last_err = None;
    for init in inits {
        match refine_pose(model, corr, k, cfg, &init) {
            Ok(res) => {
                let in_front = model.iter().all(|p| res.pose.transform(p).z > DEPTH_EPS);
                if !in_front {
                    continue;
                }
                let cost = res.rms;
                if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    best = Some((cost, res));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.map(|(_, r)| r).ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::NumericalFailure("no initialization produced a valid pose".into()))
    })
}

/// Pose of the cuboid with the given relative dimensions.
pub fn solve_pnp_lm(
    corr: &[Correspondence],
    dims: &RelativeDims,
    k: &CameraIntrinsics,
    cfg: &PnPConfig,
) -> Result<PnPResult> {
    let model = cuboid_vertices(dims)?;
    solve_pnp_model(&model, corr, k, cfg)
}

/// Output of the keypoint-lifting baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftingResult {
    pub result: PnPResult,
    /// Box shape implied by the recovered control points.
    pub dims: RelativeDims,
}

/// Barycentric coordinates of unit-cube vertex `i` w.r.t. the control points
/// `c0` = center and `c1..c3` = center + unit axis.
fn unit_cube_barycentrics(i: usize) -> [f64; 4] {
    let s = crate::geometry::vertex_signs(i);
    [1.0 - (s[0] + s[1] + s[2]) / 2.0, s[0] / 2.0, s[1] / 2.0, s[2] / 2.0]
}

/// Keypoint lifting from all eight keypoints.
pub fn solve_keypoint_lifting(kps: &Keypoints2D, k: &CameraIntrinsics) -> Result<LiftingResult> {
    if kps.num_valid() != NUM_VERTICES {
        return Err(Error::InsufficientCorrespondences { needed: NUM_VERTICES, got: kps.num_valid() });
    }
    let corr: Vec<Correspondence> =
        kps.iter_valid().map(|(i, p)| Correspondence { vertex: i, point: *p, weight: 1.0 }).collect();
    solve_keypoint_lifting_correspondences(&corr, k)
}

/// Keypoint lifting from any correspondence set (several observations per
/// vertex are allowed and weighted).
pub fn solve_keypoint_lifting_correspondences(corr: &[Correspondence], k: &CameraIntrinsics) -> Result<LiftingResult> {
    check_correspondences(corr, NUM_VERTICES)?;
    let distinct = distinct_vertices(corr);
    if distinct < 6 {
        return Err(Error::InsufficientCorrespondences { needed: 6, got: distinct });
    }
    let rows = (2 * corr.len()).max(12);
    let mut m = DMatrix::<f64>::zeros(rows, 12);
    for (i, c) in corr.iter().enumerate() {
        let x = k.normalize(&c.point);
        let alpha = unit_cube_barycentrics(c.vertex);
        let sw = c.weight.sqrt();
        for (j, a) in alpha.iter().enumerate() {
            m[(2 * i, 3 * j)] = sw * a;
            m[(2 * i, 3 * j + 2)] = -sw * a * x.x;
            m[(2 * i + 1, 3 * j + 1)] = sw * a;
            m[(2 * i + 1, 3 * j + 2)] = -sw * a * x.y;
        }
    }
    let v = null_vector(&m, 1e-10)
        .ok_or_else(|| Error::NumericalFailure("keypoint configuration is rank deficient".into()))?;
    let mut ctrl: [Vector3<f64>; 4] = std::array::from_fn(|j| Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]));
    if ctrl[0].z < 0.0 {
        ctrl.iter_mut().for_each(|c| *c = -*c);
    }

    let axes = [ctrl[1] - ctrl[0], ctrl[2] - ctrl[0], ctrl[3] - ctrl[0]];
    let ext = Vector3::new(axes[0].norm(), axes[1].norm(), axes[2].norm());
    if ext.iter().any(|e| !(*e > 1e-12)) || !(ctrl[0].z > 0.0) {
        return Err(Error::NumericalFailure("lifted box is degenerate".into()));
    }
    let basis = Matrix3::from_columns(&[axes[0] / ext.x, axes[1] / ext.y, axes[2] / ext.z]);
    let svd = basis.svd(true, true);
    if svd.singular_values.min() < 1e-6 {
        return Err(Error::NumericalFailure("lifted box axes are coplanar".into()));
    }
    let (u, vt) = (
        svd.u.ok_or_else(|| Error::NumericalFailure("svd failed".into()))?,
        svd.v_t.ok_or_else(|| Error::NumericalFailure("svd failed".into()))?,
    );
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    let dims = RelativeDims::new(ext.x / ext.y, ext.z / ext.y)?;
    let pose = Pose::from_matrix(&r, ctrl[0] / ext.y);
    let model = box_vertices(&dims.extents());
    if model.iter().any(|p| pose.transform(p).z <= DEPTH_EPS) {
        return Err(Error::NumericalFailure("lifted box crosses the camera plane".into()));
    }
    let res = residuals(&model, corr, k, &pose)
        .ok_or_else(|| Error::NumericalFailure("lifted box is behind the camera".into()))?;
    Ok(LiftingResult {
        result: PnPResult { pose, rms: rms_of(&res, corr), iterations: 1, converged: true },
        dims,
    })
}

/// Metric pose and extents for a model-unit result once the object height is known.
pub fn resolve_scale(pose: &Pose, dims: &RelativeDims, height_m: f64) -> Result<(Pose, Vector3<f64>)> {
    if !(height_m > 0.0 && height_m.is_finite()) {
        return Err(invalid(format!("height must be positive, got {height_m}")));
    }
    Ok((pose.with_scaled_translation(height_m), dims.extents() * height_m))
}
