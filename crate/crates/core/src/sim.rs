//! Synthetic experiments: scene sampling, a parametric model of network
//! errors, end-to-end pipeline runs and ablation tables.
//!
//! The trained network is replaced by ground-truth maps corrupted with
//! [`NoiseConfig`]; every number produced here is synthetic.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decode::{build_correspondences, decode_objects, DecodeConfig, Detection, Strategy};
use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, Point2, Pose, RelativeDims, NUM_VERTICES};
use crate::labelgen::{encode_targets, scene_targets, EncodedScene, ObjectTarget, Scene, SceneObject};
use crate::metrics::{evaluate_image, summarize, EvalConfig, EvalRecord, GroundTruth, OrientedBox, Prediction, Summary};
use crate::pnp::{resolve_scale, solve_keypoint_lifting_correspondences, solve_pnp_lm, PnPConfig};

/// Attempts per scene before sampling gives up.
pub const MAX_ATTEMPTS: usize = 1000;
/// Projected boxes must stay this far (pixels) from the image border.
pub const IMAGE_MARGIN: f64 = 8.0;
/// Smallest accepted projected box diagonal, pixels.
pub const MIN_BOX_DIAGONAL: f64 = 40.0;

pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(550.0, 550.0, 256.0, 256.0, 512, 512).expect("valid default camera")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn check(&self, what: &str, positive: bool) -> Result<()> {
        let ok = self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi && (!positive || self.lo > 0.0);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("{what} range [{}, {}] is invalid", self.lo, self.hi)))
        }
    }

    fn uniform(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn log_uniform(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo.ln()..=self.hi.ln()).exp().clamp(self.lo, self.hi)
        }
    }
}

/// Distribution of objects and viewpoints for one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryProfile {
    pub name: String,
    /// Log-uniform width / height.
    pub rx: Interval,
    /// Log-uniform depth / height. Ignored when `square_base` is set.
    pub rz: Interval,
    /// Depth equals width (rotationally symmetric shapes).
    pub square_base: bool,
    pub height_m: Interval,
    pub symmetric: bool,
    pub azimuth_deg: Interval,
    pub elevation_deg: Interval,
    pub distance_m: Interval,
    /// Angle between the optical axis and the ray to the object center.
    pub off_axis_deg: Interval,
    pub roll_deg: Interval,
}

impl CategoryProfile {
    fn base(name: &str) -> Self {
        Self {
            name: name.to_string(),
            rx: Interval::new(1.0, 1.0),
            rz: Interval::new(1.0, 1.0),
            square_base: false,
            height_m: Interval::new(0.3, 0.3),
            symmetric: false,
            azimuth_deg: Interval::new(-180.0, 180.0),
            elevation_deg: Interval::new(5.0, 60.0),
            distance_m: Interval::new(1.0, 1.0),
            off_axis_deg: Interval::new(0.0, 12.0),
            roll_deg: Interval::new(-10.0, 10.0),
        }
    }

    pub fn cereal_box() -> Self {
        Self {
            rx: Interval::new(0.6, 0.85),
            rz: Interval::new(0.2, 0.35),
            height_m: Interval::new(0.25, 0.35),
            distance_m: Interval::new(0.9, 1.6),
            ..Self::base("cereal_box")
        }
    }

    /// Thickness varies over an order of magnitude.
    pub fn book() -> Self {
        Self {
            rx: Interval::new(0.6, 0.9),
            rz: Interval::new(0.05, 0.5),
            height_m: Interval::new(0.18, 0.3),
            distance_m: Interval::new(0.6, 1.2),
            ..Self::base("book")
        }
    }

    pub fn cup() -> Self {
        Self {
            rx: Interval::new(0.8, 1.4),
            square_base: true,
            height_m: Interval::new(0.08, 0.14),
            symmetric: true,
            distance_m: Interval::new(0.3, 0.6),
            ..Self::base("cup")
        }
    }

    pub fn bottle() -> Self {
        Self {
            rx: Interval::new(0.25, 0.45),
            square_base: true,
            height_m: Interval::new(0.2, 0.35),
            symmetric: true,
            distance_m: Interval::new(0.7, 1.3),
            ..Self::base("bottle")
        }
    }

    pub fn builtin() -> Vec<Self> {
        vec![Self::cereal_box(), Self::book(), Self::cup(), Self::bottle()]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::builtin()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| invalid(format!("unknown profile '{name}'")))
    }

    pub fn validate(&self) -> Result<()> {
        self.rx.check("rx", true)?;
        self.rz.check("rz", true)?;
        self.height_m.check("height", true)?;
        self.distance_m.check("distance", true)?;
        self.azimuth_deg.check("azimuth", false)?;
        self.elevation_deg.check("elevation", false)?;
        self.off_axis_deg.check("off-axis angle", false)?;
        self.roll_deg.check("roll", false)?;
        if self.elevation_deg.lo <= -90.0 || self.elevation_deg.hi >= 90.0 {
            return Err(invalid("elevation must stay inside (-90, 90)"));
        }
        if self.off_axis_deg.lo < 0.0 || self.off_axis_deg.hi >= 90.0 {
            return Err(invalid("off-axis angle must be in [0, 90)"));
        }
        Ok(())
    }
}

/// Unit vector from the object center towards the camera, object frame.
pub fn view_direction(azimuth: f64, elevation: f64) -> Vector3<f64> {
    Vector3::new(elevation.cos() * azimuth.sin(), elevation.sin(), elevation.cos() * azimuth.cos())
}

/// Pose whose camera sits at the given object-frame viewpoint with the
/// object center at camera-frame position `center`. `roll` turns the image
/// about the viewing ray.
pub fn pose_from_viewpoint(azimuth: f64, elevation: f64, roll: f64, center: Vector3<f64>) -> Result<Pose> {
    let d_obj = view_direction(azimuth, elevation);
    let d_cam = -center.try_normalize(1e-12).ok_or_else(|| invalid("object at the camera center"))?;
    let frame = |d: Vector3<f64>, up: Vector3<f64>| -> Result<Matrix3<f64>> {
        let u = (up - d * d.dot(&up)).try_normalize(1e-9).ok_or_else(|| invalid("viewpoint along the up axis"))?;
        Ok(Matrix3::from_columns(&[d, u, d.cross(&u)]))
    };
    let a = frame(d_obj, Vector3::y())?;
    let b = frame(d_cam, -Vector3::y())?;
    let spin = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(d_cam), roll);
    let r = spin.matrix() * b * a.transpose();
    Ok(Pose::from_matrix(&r, center))
}

fn box_fits(object: &SceneObject, camera: &CameraIntrinsics) -> bool {
    let Ok(kps) = object.project_vertices(camera) else { return false };
    let Ok(bbox) = crate::geometry::bbox_of_points(&kps) else { return false };
    bbox.u_min >= IMAGE_MARGIN
        && bbox.v_min >= IMAGE_MARGIN
        && bbox.u_max <= camera.width as f64 - IMAGE_MARGIN
        && bbox.v_max <= camera.height as f64 - IMAGE_MARGIN
        && bbox.diagonal() >= MIN_BOX_DIAGONAL
}

/// One object per scene, seen by [`default_camera`].
pub fn sample_scenes(profile: &CategoryProfile, count: usize, seed: u64) -> Result<Vec<Scene>> {
    sample_scenes_with_camera(profile, count, seed, &default_camera())
}

pub fn sample_scenes_with_camera(
    profile: &CategoryProfile,
    count: usize,
    seed: u64,
    camera: &CameraIntrinsics,
) -> Result<Vec<Scene>> {
    profile.validate()?;
    camera.validate()?;
    if count == 0 {
        return Err(invalid("scene count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(count);
    for index in 0..count {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let rx = profile.rx.log_uniform(&mut rng);
            let rz = if profile.square_base { rx } else { profile.rz.log_uniform(&mut rng) };
            let height = profile.height_m.uniform(&mut rng);
            let az = profile.azimuth_deg.uniform(&mut rng).to_radians();
            let el = profile.elevation_deg.uniform(&mut rng).to_radians();
            let roll = profile.roll_deg.uniform(&mut rng).to_radians();
            let dist = profile.distance_m.uniform(&mut rng);
            let off = profile.off_axis_deg.uniform(&mut rng).to_radians();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let ray = Vector3::new(off.sin() * phi.cos(), off.sin() * phi.sin(), off.cos());
            let pose = pose_from_viewpoint(az, el, roll, ray * dist)?;
            let object = SceneObject { pose, dims: RelativeDims::new(rx, rz)?, height_m: height, symmetric: profile.symmetric };
            if box_fits(&object, camera) {
                found = Some(object);
                break;
            }
        }
        let object = found.ok_or_else(|| {
            Error::Generation(format!(
                "profile '{}' scene {index}: no valid placement after {MAX_ATTEMPTS} attempts",
                profile.name
            ))
        })?;
        scenes.push(Scene { camera: *camera, objects: vec![object] });
    }
    Ok(scenes)
}

/// Parametric stand-in for network errors, applied to per-object targets
/// before rasterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Gaussian jitter of displacement-field keypoints, input pixels.
    pub disp_jitter_px: f64,
    /// Gaussian jitter of heatmap peaks, input pixels.
    pub heat_jitter_px: f64,
    /// Probability that a heatmap peak is missing.
    pub heat_dropout: f64,
    /// Log-normal sigma of the multiplicative noise on relative dims.
    pub dims_sigma: f64,
    pub center_jitter_px: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { disp_jitter_px: 0.0, heat_jitter_px: 0.0, heat_dropout: 0.0, dims_sigma: 0.0, center_jitter_px: 0.0, seed: 0 }
    }

    /// Calibrated preset: clearly worse than noiseless, clearly better than
    /// [`NoiseConfig::heavy`].
    pub fn calibrated() -> Self {
        Self { disp_jitter_px: 4.0, heat_jitter_px: 4.0, heat_dropout: 0.1, dims_sigma: 0.05, center_jitter_px: 1.0, seed: 0 }
    }

    pub fn heavy() -> Self {
        Self { disp_jitter_px: 10.0, heat_jitter_px: 10.0, heat_dropout: 0.4, dims_sigma: 0.4, center_jitter_px: 4.0, seed: 0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "calibrated" => Ok(Self::calibrated()),
            "heavy" => Ok(Self::heavy()),
            _ => Err(invalid(format!("unknown noise preset '{name}' (none, calibrated, heavy)"))),
        }
    }

    /// Same jitter for both keypoint representations.
    pub fn with_keypoint_jitter(mut self, sigma: f64) -> Self {
        self.disp_jitter_px = sigma;
        self.heat_jitter_px = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sig = [self.disp_jitter_px, self.heat_jitter_px, self.dims_sigma, self.center_jitter_px];
        if sig.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("noise sigmas must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.heat_dropout) {
            return Err(invalid(format!("dropout must be in [0, 1], got {}", self.heat_dropout)));
        }
        Ok(())
    }

    /// Generator for scene `index`, independent of processing order.
    pub fn scene_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

fn jitter(p: &Point2, dist: &Option<Normal<f64>>, rng: &mut impl Rng) -> Point2 {
    match dist {
        Some(n) => Point2::new(p.x + n.sample(rng), p.y + n.sample(rng)),
        None => *p,
    }
}

fn normal(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("validated sigma"))
}

/// Corrupts targets. With all sigmas and the dropout at zero the targets are
/// returned unchanged.
pub fn perturb_targets(targets: &[ObjectTarget], noise: &NoiseConfig, rng: &mut impl Rng) -> Result<Vec<ObjectTarget>> {
    noise.validate()?;
    let disp = normal(noise.disp_jitter_px);
    let heat = normal(noise.heat_jitter_px);
    let center = normal(noise.center_jitter_px);
    let dims = normal(noise.dims_sigma);
    let mut out = targets.to_vec();
    for t in out.iter_mut() {
        let c = jitter(&t.center, &center, rng);
        let shift = c - t.center;
        t.center = c;
        if shift != nalgebra::Vector2::zeros() {
            t.bbox = crate::geometry::Rect {
                u_min: t.bbox.u_min + shift.x,
                v_min: t.bbox.v_min + shift.y,
                u_max: t.bbox.u_max + shift.x,
                v_max: t.bbox.v_max + shift.y,
            };
        }
        for k in 0..NUM_VERTICES {
            t.disp_keypoints[k] = jitter(&t.disp_keypoints[k], &disp, rng);
            let dropped = noise.heat_dropout > 0.0 && rng.random_bool(noise.heat_dropout);
            t.heat_keypoints[k] = match t.heat_keypoints[k] {
                Some(p) if !dropped => Some(jitter(&p, &heat, rng)),
                _ => None,
            };
        }
        if let Some(n) = &dims {
            let rx = t.rel_dims.rx * n.sample(rng).exp();
            let rz = t.rel_dims.rz * n.sample(rng).exp();
            t.rel_dims = RelativeDims::new(rx, rz)?;
        }
    }
    Ok(out)
}

/// Encodes a scene with corrupted targets.
pub fn perturb(scene: &Scene, noise: &NoiseConfig, rng: &mut impl Rng) -> Result<EncodedScene> {
    scene.validate()?;
    let targets = perturb_targets(&scene_targets(scene)?, noise, rng)?;
    Ok(encode_targets(targets, &scene.camera))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Dimension-free keypoint lifting.
    Lifting,
    /// LM PnP on the predicted relative dims.
    LmEstimatedDims,
    /// LM PnP on ground-truth relative dims (oracle).
    LmGtDims,
}

impl Solver {
    pub const ALL: [Solver; 3] = [Solver::Lifting, Solver::LmEstimatedDims, Solver::LmGtDims];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Lifting => "lifting",
            Solver::LmEstimatedDims => "lm_estimated_dims",
            Solver::LmGtDims => "lm_gt_dims",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Solver::Lifting => "keypoint lifting (analog, no dims)",
            Solver::LmEstimatedDims => "LM PnP, estimated dims",
            Solver::LmGtDims => "LM PnP, ground-truth dims (oracle)",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Solver::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown solver '{s}'")))
    }
}

/// Everything a single pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub noise: NoiseConfig,
    pub decode: DecodeConfig,
    pub pnp: PnPConfig,
    pub eval: EvalConfig,
    pub solver: Solver,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::none(),
            decode: DecodeConfig::default(),
            pnp: PnPConfig::default(),
            eval: EvalConfig::default(),
            solver: Solver::LmEstimatedDims,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub scene: usize,
    pub detection: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub config: RunConfig,
    pub num_scenes: usize,
    pub summary: Summary,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<Failure>,
}

impl RunReport {
    /// Aggregates recomputed from the per-instance records.
    pub fn recompute_summary(&self) -> Summary {
        summarize(&self.records, &self.config.eval)
    }
}

pub fn ground_truths(scene: &Scene) -> Result<Vec<GroundTruth>> {
    scene
        .objects
        .iter()
        .map(|o| Ok(GroundTruth { bbox: OrientedBox::new(o.pose, o.extents())?, symmetric: o.symmetric }))
        .collect()
}

/// Index of the ground-truth object whose 2D center is nearest the detection.
fn nearest_object(det: &Detection, targets: &[ObjectTarget]) -> Option<usize> {
    targets
        .iter()
        .min_by(|a, b| (a.center - det.center).norm().total_cmp(&(b.center - det.center).norm()))
        .map(|t| t.object)
}

/// Solves one detection; returns the metric box.
pub fn solve_detection(
    det: &Detection,
    scene: &Scene,
    object: usize,
    cfg: &RunConfig,
) -> Result<(OrientedBox, Pose)> {
    let corr = build_correspondences(det, &cfg.decode)?;
    let obj = &scene.objects[object];
    let (pose, dims) = match cfg.solver {
        Solver::Lifting => {
            let l = solve_keypoint_lifting_correspondences(&corr, &scene.camera)?;
            (l.result.pose, l.dims)
        }
        Solver::LmEstimatedDims => (solve_pnp_lm(&corr, &det.rel_dims, &scene.camera, &cfg.pnp)?.pose, det.rel_dims),
        Solver::LmGtDims => (solve_pnp_lm(&corr, &obj.dims, &scene.camera, &cfg.pnp)?.pose, obj.dims),
    };
    let (metric, extents) = resolve_scale(&pose, &dims, obj.height_m)?;
    Ok((OrientedBox::new(metric, extents)?, pose))
}

/// Records and failures for one scene.
pub fn run_scene(index: usize, scene: &Scene, cfg: &RunConfig) -> Result<(Vec<EvalRecord>, Vec<Failure>)> {
    let mut rng = cfg.noise.scene_rng(index);
    let encoded = perturb(scene, &cfg.noise, &mut rng)?;
    let detections = decode_objects(&encoded.maps, &cfg.decode)?;
    let mut preds = Vec::with_capacity(detections.len());
    let mut failures = Vec::new();
    let truth = scene_targets(scene)?;
    for (di, det) in detections.iter().enumerate() {
        let Some(object) = nearest_object(det, &truth) else { continue };
        match solve_detection(det, scene, object, cfg) {
            Ok((bbox, _)) => preds.push(Prediction { bbox, score: det.score }),
            Err(e) => failures.push(Failure { scene: index, detection: di, reason: e.to_string() }),
        }
    }
    let records = evaluate_image(index, &preds, &ground_truths(scene)?, &scene.camera, &cfg.eval);
    Ok((records, failures))
}

/// Runs every scene in order and aggregates.
pub fn run_pipeline(scenes: &[Scene], cfg: &RunConfig) -> Result<RunReport> {
    cfg.noise.validate()?;
    cfg.decode.validate()?;
    cfg.pnp.validate()?;
    cfg.eval.validate()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let (r, f) = run_scene(i, scene, cfg)?;
        records.extend(r);
        failures.extend(f);
    }
    let summary = summarize(&records, &cfg.eval);
    Ok(RunReport { kind: "synthetic".into(), config: cfg.clone(), num_scenes: scenes.len(), summary, records, failures })
}

/// Scene sets for a list of profiles; profile `i` uses seed `seed + i`.
pub fn sample_profiles(profiles: &[CategoryProfile], per_profile: usize, seed: u64) -> Result<Vec<(String, Vec<Scene>)>> {
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((p.name.clone(), sample_scenes(p, per_profile, seed.wrapping_add(i as u64))?)))
        .collect()
}

/// One configuration evaluated on every profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub seed: u64,
    pub per_profile: Vec<(String, Summary)>,
    /// Mean over profiles of AP at the IoU threshold.
    pub mean_ap_iou: f64,
    /// Mean over profiles of the per-profile mean IoU.
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: String,
    pub title: String,
    pub rows: Vec<TableRow>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates one configuration on every scene set.
pub fn evaluate_row(label: &str, seed: u64, sets: &[(String, Vec<Scene>)], cfg: &RunConfig) -> Result<TableRow> {
    let mut per_profile = Vec::with_capacity(sets.len());
    for (name, scenes) in sets {
        per_profile.push((name.clone(), run_pipeline(scenes, cfg)?.summary));
    }
    Ok(TableRow {
        label: label.to_string(),
        seed,
        mean_ap_iou: mean_of(per_profile.iter().map(|(_, s)| s.ap_iou.unwrap_or(0.0))),
        mean_iou: mean_of(per_profile.iter().map(|(_, s)| s.mean_iou.unwrap_or(0.0))),
        per_profile,
    })
}

/// Shared inputs of the ablation sweeps. Seed `s` samples scenes with seed
/// `s` and corrupts them with noise seed `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub profiles: Vec<CategoryProfile>,
    pub scenes_per_profile: usize,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
}

impl AblationConfig {
    fn sets(&self, seed: u64) -> Result<Vec<(String, Vec<Scene>)>> {
        if self.seeds.is_empty() || self.profiles.is_empty() {
            return Err(invalid("ablation needs at least one seed and one profile"));
        }
        sample_profiles(&self.profiles, self.scenes_per_profile, seed)
    }
}

/// Rows for every decoding strategy.
pub fn ablate_decode(cfg: &AblationConfig, strategies: &[Strategy]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let sets = cfg.sets(seed)?;
        for &strategy in strategies {
            let mut run = cfg.base.clone();
            run.noise.seed = seed;
            run.decode.strategy = strategy;
            run.decode.seed = seed;
            rows.push(evaluate_row(strategy.name(), seed, &sets, &run)?);
        }
    }
    Ok(AblationReport { kind: "synthetic".into(), title: "decoding strategy".into(), rows })
}

/// Rows for every pose solver.
pub fn ablate_dims(cfg: &AblationConfig, solvers: &[Solver]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let sets = cfg.sets(seed)?;
        for &solver in solvers {
            let mut run = cfg.base.clone();
            run.noise.seed = seed;
            run.decode.seed = seed;
            run.solver = solver;
            rows.push(evaluate_row(solver.name(), seed, &sets, &run)?);
        }
    }
    Ok(AblationReport { kind: "synthetic".into(), title: "dimension source".into(), rows })
}

/// Rows for every (strategy, keypoint jitter) pair.
pub fn noise_sweep(cfg: &AblationConfig, strategies: &[Strategy], jitters: &[f64]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let sets = cfg.sets(seed)?;
        for &strategy in strategies {
            for &sigma in jitters {
                let mut run = cfg.base.clone();
                run.noise = run.noise.clone().with_keypoint_jitter(sigma).with_seed(seed);
                run.decode.strategy = strategy;
                run.decode.seed = seed;
                rows.push(evaluate_row(&format!("{strategy} sigma={sigma}"), seed, &sets, &run)?);
            }
        }
    }
    Ok(AblationReport { kind: "synthetic".into(), title: "keypoint jitter sweep".into(), rows })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned text rendering of a table of rows.
pub fn render_rows(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header, &mut out);
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    for r in rows {
        line(r, &mut out);
    }
    out
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let profiles: Vec<String> =
            self.rows.first().map(|r| r.per_profile.iter().map(|(n, _)| n.clone()).collect()).unwrap_or_default();
        let mut header = vec!["config".to_string(), "seed".to_string()];
        header.extend(profiles.iter().map(|p| format!("{p} AP@iou")));
        header.push("mean AP@iou".into());
        header.push("mean IoU".into());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.label.clone(), r.seed.to_string()];
                cells.extend(r.per_profile.iter().map(|(_, s)| fmt_opt(s.ap_iou, 4)));
                cells.push(format!("{:.4}", r.mean_ap_iou));
                cells.push(format!("{:.4}", r.mean_iou));
                cells
            })
            .collect();
        render_rows(&format!("{} ({})", self.title, self.kind), &header, &rows)
    }

    /// Rows with the given label, in seed order.
    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a TableRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }
}

/// Text block with the four metric families of a summary.
pub fn summary_table(title: &str, entries: &[(String, Summary)]) -> String {
    let header: Vec<String> = [
        "set", "gt", "pred", "AP@iou", "AP@azimuth", "AP@elevation", "mean IoU", "pixel err", "dim err", "rot err",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|(n, s)| {
            vec![
                n.clone(),
                s.num_gt.to_string(),
                s.num_pred.to_string(),
                fmt_opt(s.ap_iou, 4),
                fmt_opt(s.ap_azimuth, 4),
                fmt_opt(s.ap_elevation, 4),
                fmt_opt(s.mean_iou, 4),
                fmt_opt(s.mean_pixel_error, 5),
                fmt_opt(s.mean_dim_error, 4),
                fmt_opt(s.median_rotation_err, 5),
            ]
        })
        .collect();
    render_rows(title, &header, &rows)
}
