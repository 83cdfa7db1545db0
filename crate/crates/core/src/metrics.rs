//! Evaluation: oriented 3D IoU, AP with greedy matching, projected-keypoint
//! error, viewpoint errors, symmetric evaluation and relative-dims error.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{box_vertices, rotation_error, vertex_signs, CameraIntrinsics, Point2, Pose, RelativeDims, NUM_VERTICES};

/// Plane-side tolerance for polytope clipping, relative to box size.
pub const CLIP_EPS: f64 = 1e-12;
/// Intersections below this volume count as empty.
pub const MIN_VOLUME: f64 = 1e-15;
pub const SYMMETRY_SAMPLES: usize = 100;

/// A metric 3D box: pose of its center plus full extents along local x, y, z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub pose: Pose,
    pub extents: Vector3<f64>,
}

impl OrientedBox {
    pub fn new(pose: Pose, extents: Vector3<f64>) -> Result<Self> {
        let b = Self { pose, extents };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().all(|e| *e > 0.0 && e.is_finite()) && self.pose.translation.iter().all(|t| t.is_finite())
        {
            Ok(())
        } else {
            Err(invalid(format!("box extents must be positive, got {:?}", self.extents)))
        }
    }

    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// Corners in camera coordinates, in vertex-index order.
    pub fn corners(&self) -> [Vector3<f64>; NUM_VERTICES] {
        let v = box_vertices(&self.extents);
        std::array::from_fn(|i| self.pose.transform(&v[i]))
    }

    pub fn relative_dims(&self) -> Result<RelativeDims> {
        RelativeDims::from_extents(&self.extents)
    }

    /// Uniformly rescales translation and extents.
    pub fn scaled(&self, s: f64) -> Self {
        Self { pose: self.pose.with_scaled_translation(s), extents: self.extents * s }
    }

    /// Rescaled so its y extent equals `height`.
    pub fn with_height(&self, height: f64) -> Self {
        self.scaled(height / self.extents.y)
    }

    pub fn rotated_about_y(&self, angle: f64) -> Self {
        Self { pose: self.pose.rotated_about_object_y(angle), extents: self.extents }
    }

    /// Outward half-spaces `n . x <= d`.
    fn planes(&self) -> [(Vector3<f64>, f64); 6] {
        let r = self.pose.rotation_matrix();
        let c = self.pose.translation;
        std::array::from_fn(|i| {
            let axis = i / 2;
            let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
            let n: Vector3<f64> = r.column(axis) * sign;
            (n, n.dot(&c) + 0.5 * self.extents[axis])
        })
    }

    /// Faces as (cyclic polygon, outward normal).
    fn faces(&self) -> Vec<(Vec<Vector3<f64>>, Vector3<f64>)> {
        let corners = self.corners();
        let r = self.pose.rotation_matrix();
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
            for sign in [-1.0, 1.0] {
                let poly = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                    .iter()
                    .map(|&(sb, sc)| {
                        let idx = (0..NUM_VERTICES)
                            .find(|&i| {
                                let s = vertex_signs(i);
                                s[axis] == sign && s[b] == sb && s[c] == sc
                            })
                            .expect("every sign pattern is a vertex");
                        corners[idx]
                    })
                    .collect();
                out.push((poly, r.column(axis) * sign));
            }
        }
        out
    }
}

fn polygon_area(poly: &[Vector3<f64>], n: &Vector3<f64>) -> f64 {
    let m = poly.len();
    let mut s = 0.0;
    for i in 0..m {
        s += poly[i].cross(&poly[(i + 1) % m]).dot(n);
    }
    0.5 * s.abs()
}

/// Clips a closed convex polyhedron (faces with outward normals) by `n . x <= d`.
fn clip_polyhedron(
    faces: Vec<(Vec<Vector3<f64>>, Vector3<f64>)>,
    n: &Vector3<f64>,
    d: f64,
    eps: f64,
) -> Vec<(Vec<Vector3<f64>>, Vector3<f64>)> {
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vector3<f64>> = Vec::new();
    let mut on_plane = false;
    for (poly, normal) in faces {
        let m = poly.len();
        let mut clipped = Vec::with_capacity(m + 1);
        for i in 0..m {
            let p = poly[i];
            let q = poly[(i + 1) % m];
            let dp = n.dot(&p) - d;
            let dq = n.dot(&q) - d;
            let p_in = dp <= eps;
            let q_in = dq <= eps;
            if p_in {
                clipped.push(p);
                if dp.abs() <= eps {
                    cap.push(p);
                }
            }
            if p_in != q_in && (dp.abs() > eps && dq.abs() > eps) {
                let x = p + (q - p) * (dp / (dp - dq));
                clipped.push(x);
                cap.push(x);
            }
        }
        if clipped.len() >= 3 {
            // A face lying in the cutting plane already closes the polytope.
            on_plane |= clipped.iter().all(|x| (n.dot(x) - d).abs() <= eps);
            out.push((clipped, normal));
        }
    }
    if cap.len() >= 3 && !on_plane {
        let centroid = cap.iter().sum::<Vector3<f64>>() / cap.len() as f64;
        let u = (n.cross(&Vector3::x())).try_normalize(1e-6).unwrap_or_else(|| n.cross(&Vector3::y()).normalize());
        let v = n.cross(&u);
        cap.sort_by(|a, b| {
            let (da, db) = (a - centroid, b - centroid);
            da.dot(&v).atan2(da.dot(&u)).total_cmp(&db.dot(&v).atan2(db.dot(&u)))
        });
        out.push((cap, *n));
    }
    out
}

fn polyhedron_volume(faces: &[(Vec<Vector3<f64>>, Vector3<f64>)]) -> f64 {
    faces
        .iter()
        .map(|(poly, n)| {
            let c = poly.iter().sum::<Vector3<f64>>() / poly.len() as f64;
            c.dot(n) * polygon_area(poly, n) / 3.0
        })
        .sum()
}

/// Volume of the intersection of two oriented boxes.
pub fn intersection_volume(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Work relative to a's center for precision.
    let origin = a.pose.translation;
    let shift = |bx: &OrientedBox| OrientedBox {
        pose: Pose::new(*bx.pose.rotation(), bx.pose.translation - origin),
        extents: bx.extents,
    };
    let (a, b) = (shift(a), shift(b));
    let scale = a.extents.max().max(b.extents.max()).max(b.pose.translation.norm());
    let eps = CLIP_EPS * scale;
    let mut faces = a.faces();
    for (n, d) in b.planes() {
        faces = clip_polyhedron(faces, &n, d, eps);
        if faces.len() < 4 {
            return 0.0;
        }
    }
    let v = polyhedron_volume(&faces);
    if v < MIN_VOLUME * scale.powi(3).max(1.0) {
        0.0
    } else {
        v.min(a.volume()).min(b.volume())
    }
}

/// Oriented 3D intersection over union.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Mean distance between corresponding projected corners, divided by the image diagonal.
pub fn pixel_projection_error(pred: &OrientedBox, gt: &OrientedBox, k: &CameraIntrinsics) -> Result<f64> {
    let proj = |b: &OrientedBox| -> Result<Vec<Point2>> {
        b.corners()
            .iter()
            .enumerate()
            .map(|(i, c)| k.project_point(c).ok_or(Error::BehindCamera { index: i, depth: c.z }))
            .collect()
    };
    let (p, g) = (proj(pred)?, proj(gt)?);
    let mean = p.iter().zip(&g).map(|(a, b)| (a - b).norm()).sum::<f64>() / NUM_VERTICES as f64;
    Ok(mean / k.diagonal())
}

/// Azimuth and elevation (radians) of the camera seen from the object frame.
pub fn viewpoint(pose: &Pose) -> Result<(f64, f64)> {
    let t = pose.translation;
    if !(t.norm() > 1e-12) {
        return Err(Error::UndefinedViewpoint);
    }
    let d = -(pose.rotation_matrix().transpose() * t) / t.norm();
    Ok((d.x.atan2(d.z), d.y.clamp(-1.0, 1.0).asin()))
}

/// Absolute azimuth and elevation errors in degrees; azimuth wraps to [0, 180].
pub fn viewpoint_errors(pred: &Pose, gt: &Pose) -> Result<(f64, f64)> {
    let (az_p, el_p) = viewpoint(pred)?;
    let (az_g, el_g) = viewpoint(gt)?;
    let mut da = (az_p - az_g).abs() % (2.0 * PI);
    if da > PI {
        da = 2.0 * PI - da;
    }
    Ok((da.to_degrees(), (el_p - el_g).abs().to_degrees()))
}

/// Best value of `f` over `n` evenly spaced rotations of `pred` about its y axis.
pub fn symmetric_best<F>(pred: &OrientedBox, n: usize, maximize: bool, mut f: F) -> f64
where
    F: FnMut(&OrientedBox) -> f64,
{
    let mut best = if maximize { f64::NEG_INFINITY } else { f64::INFINITY };
    for i in 0..n.max(1) {
        let v = f(&pred.rotated_about_y(2.0 * PI * i as f64 / n.max(1) as f64));
        if (maximize && v > best) || (!maximize && v < best) {
            best = v;
        }
    }
    best
}

/// Per-instance relative-dims error, averaged over `rx` and `rz`.
pub fn relative_dim_error(pred: &RelativeDims, gt: &RelativeDims) -> f64 {
    0.5 * ((pred.rx - gt.rx).abs() / gt.rx + (pred.rz - gt.rz).abs() / gt.rz)
}

pub fn mean_relative_dim_error(preds: &[RelativeDims], gts: &[RelativeDims]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(invalid("need equally many predicted and ground-truth dims"));
    }
    for g in gts {
        g.validate()?;
    }
    Ok(preds.iter().zip(gts).map(|(p, g)| relative_dim_error(p, g)).sum::<f64>() / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub azimuth_threshold_deg: f64,
    pub elevation_threshold_deg: f64,
    pub symmetry_samples: usize,
    /// Apply the rotational-symmetry protocol to instances flagged symmetric.
    pub use_symmetry: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            azimuth_threshold_deg: 15.0,
            elevation_threshold_deg: 10.0,
            symmetry_samples: SYMMETRY_SAMPLES,
            use_symmetry: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.iou_threshold)
            && self.azimuth_threshold_deg >= 0.0
            && self.elevation_threshold_deg >= 0.0
            && self.symmetry_samples >= 1;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid eval config {self:?}")))
        }
    }
}

/// Ground truth for one instance; `camera` is needed for the pixel error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: OrientedBox,
    pub symmetric: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: OrientedBox,
    pub score: f64,
}

/// One ground-truth instance or one prediction after association.
///
/// A missed ground truth has no score; a prediction that found no free
/// ground truth has no `gt_index`. Metric fields are set only when matched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: usize,
    pub gt_index: Option<usize>,
    pub score: Option<f64>,
    pub matched: bool,
    pub symmetric: bool,
    pub iou3d: Option<f64>,
    pub pixel_error: Option<f64>,
    pub azimuth_err: Option<f64>,
    pub elevation_err: Option<f64>,
    pub dim_rel_err: Option<f64>,
    /// Geodesic rotation error, radians.
    pub rotation_err: Option<f64>,
}

impl EvalRecord {
    pub fn miss(image: usize, gt_index: usize, symmetric: bool) -> Self {
        Self {
            image,
            gt_index: Some(gt_index),
            score: None,
            matched: false,
            symmetric,
            iou3d: None,
            pixel_error: None,
            azimuth_err: None,
            elevation_err: None,
            dim_rel_err: None,
            rotation_err: None,
        }
    }

    fn false_positive(image: usize, score: f64) -> Self {
        Self { score: Some(score), gt_index: None, symmetric: false, ..Self::miss(image, 0, false) }
    }
}

/// IoU of `pred` (rescaled to the ground-truth height) against `gt`,
/// maximized over y rotations when the instance is symmetric.
pub fn instance_iou(pred: &OrientedBox, gt: &GroundTruth, cfg: &EvalConfig) -> f64 {
    let p = pred.with_height(gt.bbox.extents.y);
    if gt.symmetric && cfg.use_symmetry {
        symmetric_best(&p, cfg.symmetry_samples, true, |b| iou3d(b, &gt.bbox))
    } else {
        iou3d(&p, &gt.bbox)
    }
}

fn direction_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    if c.is_finite() {
        c.clamp(-1.0, 1.0).acos()
    } else {
        PI
    }
}

/// Metrics for an associated pair.
pub fn match_metrics(
    image: usize,
    gt_index: usize,
    pred: &Prediction,
    gt: &GroundTruth,
    k: &CameraIntrinsics,
    cfg: &EvalConfig,
) -> EvalRecord {
    let p = pred.bbox.with_height(gt.bbox.extents.y);
    let sym = gt.symmetric && cfg.use_symmetry;
    let n = if sym { cfg.symmetry_samples } else { 1 };
    let iou = symmetric_best(&p, n, true, |b| iou3d(b, &gt.bbox));
    let pix = symmetric_best(&p, n, false, |b| pixel_projection_error(b, &gt.bbox, k).unwrap_or(f64::INFINITY));
    let mut az = f64::INFINITY;
    let mut el = f64::INFINITY;
    for i in 0..n {
        let b = p.rotated_about_y(2.0 * PI * i as f64 / n as f64);
        if let Ok((a, e)) = viewpoint_errors(&b.pose, &gt.bbox.pose) {
            az = az.min(a);
            el = el.min(e);
        }
    }
    let rot = symmetric_best(&p, n, false, |b| rotation_error(&b.pose, &gt.bbox.pose));
    let dim = match (p.relative_dims(), gt.bbox.relative_dims()) {
        (Ok(a), Ok(b)) => Some(relative_dim_error(&a, &b)),
        _ => None,
    };
    let finite = |v: f64| v.is_finite().then_some(v);
    EvalRecord {
        image,
        gt_index: Some(gt_index),
        score: Some(pred.score),
        matched: true,
        symmetric: gt.symmetric,
        iou3d: Some(iou),
        pixel_error: finite(pix),
        azimuth_err: finite(az),
        elevation_err: finite(el),
        dim_rel_err: dim,
        rotation_err: Some(rot),
    }
}

/// Greedy association within one image by descending score. Each prediction
/// takes the free ground truth of highest IoU, or of smallest angle between
/// translation directions when it overlaps none. Unclaimed ground truths are
/// emitted as misses.
pub fn evaluate_image(
    image: usize,
    preds: &[Prediction],
    gts: &[GroundTruth],
    k: &CameraIntrinsics,
    cfg: &EvalConfig,
) -> Vec<EvalRecord> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len() + gts.len());
    for &pi in &order {
        let pred = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate().filter(|(gi, _)| !taken[*gi]) {
            let v = instance_iou(&pred.bbox, gt, cfg);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let chosen = match best {
            Some((gi, v)) if v > 0.0 => Some(gi),
            Some(_) => (0..gts.len()).filter(|gi| !taken[*gi]).min_by(|&a, &b| {
                let da = direction_angle(&pred.bbox.pose.translation, &gts[a].bbox.pose.translation);
                let db = direction_angle(&pred.bbox.pose.translation, &gts[b].bbox.pose.translation);
                da.total_cmp(&db).then(a.cmp(&b))
            }),
            None => None,
        };
        match chosen {
            Some(gi) => {
                taken[gi] = true;
                out.push(match_metrics(image, gi, pred, &gts[gi], k, cfg));
            }
            None => out.push(EvalRecord::false_positive(image, pred.score)),
        }
    }
    for (gi, gt) in gts.iter().enumerate() {
        if !taken[gi] {
            out.push(EvalRecord::miss(image, gi, gt.symmetric));
        }
    }
    out
}

/// Which per-record error an AP is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    /// Passes when IoU >= threshold.
    Iou3d,
    /// Passes when the azimuth error <= threshold (degrees).
    Azimuth,
    /// Passes when the elevation error <= threshold (degrees).
    Elevation,
}

impl MetricKey {
    pub fn passes(self, r: &EvalRecord, threshold: f64) -> bool {
        if !r.matched {
            return false;
        }
        match self {
            MetricKey::Iou3d => r.iou3d.is_some_and(|v| v >= threshold),
            MetricKey::Azimuth => r.azimuth_err.is_some_and(|v| v <= threshold),
            MetricKey::Elevation => r.elevation_err.is_some_and(|v| v <= threshold),
        }
    }
}

/// Detection AP over score-ranked predictions with all-point interpolation.
/// `None` when there is no ground truth.
pub fn average_precision(records: &[EvalRecord], key: MetricKey, threshold: f64) -> Option<f64> {
    let num_gt = records.iter().filter(|r| r.gt_index.is_some()).count();
    if num_gt == 0 {
        return None;
    }
    let mut preds: Vec<&EvalRecord> = records.iter().filter(|r| r.score.is_some()).collect();
    preds.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
    // Equal scores form a single operating point.
    let mut points: Vec<(usize, f64)> = Vec::new();
    let mut tp = 0usize;
    for (i, r) in preds.iter().enumerate() {
        tp += key.passes(r, threshold) as usize;
        let last_of_group = preds.get(i + 1).is_none_or(|n| n.score != r.score);
        if last_of_group {
            points.push((tp, tp as f64 / (i + 1) as f64));
        }
    }
    // Each recall step is credited with the best precision reachable from it.
    let mut envelope = 0.0f64;
    let mut sum = 0.0;
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        let prev = if i == 0 { 0 } else { points[i - 1].0 };
        sum += (points[i].0 - prev) as f64 * envelope;
    }
    let ap = (sum / num_gt as f64).min(1.0);
    Some(ap)
}

/// Aggregates over a record set. Every value is a plain ordered reduction of
/// the records, so it can be recomputed from them exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_gt: usize,
    pub num_pred: usize,
    pub num_matched: usize,
    pub ap_iou: Option<f64>,
    pub ap_azimuth: Option<f64>,
    pub ap_elevation: Option<f64>,
    /// Mean IoU over ground truths, misses counting as zero.
    pub mean_iou: Option<f64>,
    pub mean_pixel_error: Option<f64>,
    pub mean_dim_error: Option<f64>,
    pub median_rotation_err: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Median with the mean of the two middle values for even counts.
pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

pub fn summarize(records: &[EvalRecord], cfg: &EvalConfig) -> Summary {
    let gts = || records.iter().filter(|r| r.gt_index.is_some());
    Summary {
        num_gt: gts().count(),
        num_pred: records.iter().filter(|r| r.score.is_some()).count(),
        num_matched: records.iter().filter(|r| r.matched).count(),
        ap_iou: average_precision(records, MetricKey::Iou3d, cfg.iou_threshold),
        ap_azimuth: average_precision(records, MetricKey::Azimuth, cfg.azimuth_threshold_deg),
        ap_elevation: average_precision(records, MetricKey::Elevation, cfg.elevation_threshold_deg),
        mean_iou: mean(gts().map(|r| if r.matched { r.iou3d.unwrap_or(0.0) } else { 0.0 })),
        mean_pixel_error: mean(records.iter().filter_map(|r| r.pixel_error)),
        mean_dim_error: mean(records.iter().filter_map(|r| r.dim_rel_err)),
        median_rotation_err: median(records.iter().filter_map(|r| r.rotation_err).collect()),
    }
}

/// True when `p` lies inside `b` (camera coordinates).
pub fn box_contains(b: &OrientedBox, p: &Vector3<f64>) -> bool {
    let local = b.pose.rotation().inverse_transform_vector(&(p - b.pose.translation));
    (0..3).all(|i| local[i].abs() <= 0.5 * b.extents[i])
}

/// Axis-aligned bounds of a box's corners.
pub fn box_bounds(b: &OrientedBox) -> (Vector3<f64>, Vector3<f64>) {
    let c = b.corners();
    let lo = c.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = c.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_box(c: [f64; 3], e: [f64; 3]) -> OrientedBox {
        OrientedBox::new(Pose::new(UnitQuaternion::identity(), Vector3::from(c)), Vector3::from(e)).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(0.0..PI))
    }

    fn random_box(rng: &mut impl Rng) -> OrientedBox {
        let e = Vector3::new(rng.random_range(0.3..1.5), rng.random_range(0.3..1.5), rng.random_range(0.3..1.5));
        let t = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        OrientedBox::new(Pose::new(random_rotation(rng), t), e).unwrap()
    }

    fn random_pair(rng: &mut impl Rng) -> (OrientedBox, OrientedBox) {
        (random_box(rng), random_box(rng))
    }

    fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, samples: usize, rng: &mut impl Rng) -> f64 {
        let (la, ha) = box_bounds(a);
        let (lb, hb) = box_bounds(b);
        let (lo, hi) = (la.inf(&lb), ha.sup(&hb));
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..samples {
            let p = Vector3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
            let (ia, ib) = (box_contains(a, &p), box_contains(b, &p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = axis_box([0.0; 3], [1.0; 3]);
        assert_eq!(iou3d(&a, &a), 1.0);
        let b = axis_box([0.5, 0.0, 0.0], [1.0; 3]);
        assert!((intersection_volume(&a, &b) - 0.5).abs() < 1e-12);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let far = axis_box([3.0, 0.0, 0.0], [1.0; 3]);
        assert_eq!(iou3d(&a, &far), 0.0);
        let inner = axis_box([0.1, 0.0, 0.0], [0.5; 3]);
        assert!((iou3d(&a, &inner) - 0.125).abs() < 1e-12);
        // A coincident copy built through a different but equal rotation.
        let rot = OrientedBox::new(
            Pose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 2.0 * PI), Vector3::zeros()),
            Vector3::repeat(1.0),
        )
        .unwrap();
        assert!((iou3d(&a, &rot) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rotated_square_analytic() {
        // Unit cube vs itself rotated 45 deg about y: intersection is a regular octagon prism.
        let a = axis_box([0.0; 3], [1.0; 3]);
        let b = OrientedBox::new(
            Pose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI / 4.0), Vector3::zeros()),
            Vector3::repeat(1.0),
        )
        .unwrap();
        let octagon = 2.0 * (2.0f64.sqrt() - 1.0);
        assert!((intersection_volume(&a, &b) - octagon).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (a, b) = random_pair(&mut rng);
            let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((iou3d(&a, &b) - mc).abs() < 1e-2, "{} vs {mc}", iou3d(&a, &b));
        }
    }

    #[test]
    fn iou_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let (a, b) = random_pair(&mut rng);
            let ab = iou3d(&a, &b);
            assert!((ab - iou3d(&b, &a)).abs() < 1e-12);
            assert!(intersection_volume(&a, &b) <= a.volume().min(b.volume()) + 1e-12);
            let g = Pose::new(random_rotation(&mut rng), Vector3::new(1.0, -2.0, 5.0));
            let move_box = |x: &OrientedBox| OrientedBox { pose: g.compose(&x.pose), extents: x.extents };
            assert!((iou3d(&move_box(&a), &move_box(&b)) - ab).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ap_examples() {
        let hit = |s: f64| EvalRecord {
            score: Some(s),
            matched: true,
            iou3d: Some(0.9),
            ..EvalRecord::miss(0, 0, false)
        };
        let recs: Vec<EvalRecord> = (0..5).map(|i| hit(1.0 - 0.1 * i as f64)).collect();
        assert_eq!(average_precision(&recs, MetricKey::Iou3d, 0.5), Some(1.0));
        let misses: Vec<EvalRecord> = (0..5).map(|i| EvalRecord::miss(0, i, false)).collect();
        assert_eq!(average_precision(&misses, MetricKey::Iou3d, 0.5), Some(0.0));
        assert_eq!(average_precision(&[], MetricKey::Iou3d, 0.5), None);
        // Tied scores: one operating point with 3 of 5 correct.
        let mut tied: Vec<EvalRecord> = (0..5).map(|_| hit(0.7)).collect();
        tied[1].iou3d = Some(0.1);
        tied[4].iou3d = Some(0.1);
        let ap = average_precision(&tied, MetricKey::Iou3d, 0.5).unwrap();
        assert!((ap - 0.6 * 0.6).abs() < 1e-12);
        tied.reverse();
        assert_eq!(average_precision(&tied, MetricKey::Iou3d, 0.5).unwrap(), ap);
    }

    #[test]
    fn ap_hand_computed() {
        // 10 predictions, each matched to its own ground truth, ranked by score;
        // pass pattern T F T T F F T F F T, so 5 of 10 ground truths are found.
        let pattern = [true, false, true, true, false, false, true, false, false, true];
        let recs: Vec<EvalRecord> = pattern
            .iter()
            .enumerate()
            .map(|(i, &p)| EvalRecord {
                score: Some(1.0 - 0.05 * i as f64),
                matched: true,
                iou3d: Some(if p { 0.8 } else { 0.2 }),
                ..EvalRecord::miss(0, i, false)
            })
            .collect();
        // Precision at each hit: 1/1, 2/3, 3/4, 4/7, 5/10; envelope 1, 3/4, 3/4, 4/7, 1/2.
        let expected = 0.1 * (1.0 + 0.75 + 0.75 + 4.0 / 7.0 + 0.5);
        let ap = average_precision(&recs, MetricKey::Iou3d, 0.5).unwrap();
        assert!((ap - expected).abs() < 1e-12, "{ap} vs {expected}");
    }

    #[test]
    fn pixel_error_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 256.0, 256.0, 512, 512).unwrap();
        let a = OrientedBox::new(Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 5.0)), Vector3::repeat(1.0))
            .unwrap();
        assert_eq!(pixel_projection_error(&a, &a, &k).unwrap(), 0.0);
        // A lateral shift of 5 px at the box depth is not uniform across
        // corners; shift the principal point instead via a second camera.
        let k2 = CameraIntrinsics::new(500.0, 500.0, 261.0, 256.0, 512, 512).unwrap();
        let pa: Vec<Point2> = a.corners().iter().map(|c| k2.project_point(c).unwrap()).collect();
        let pb: Vec<Point2> = a.corners().iter().map(|c| k.project_point(c).unwrap()).collect();
        let e = pa.iter().zip(&pb).map(|(x, y)| (x - y).norm()).sum::<f64>() / 8.0 / k.diagonal();
        assert!((e - 5.0 / (2.0f64 * 512.0 * 512.0).sqrt()).abs() < 1e-12);
        assert!((e - 0.0069).abs() < 1e-4);
        // Scale ambiguity.
        let b = OrientedBox::new(
            Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.3, -0.2), Vector3::new(0.2, 0.1, 4.0)),
            Vector3::new(0.5, 1.0, 0.7),
        )
        .unwrap();
        let e1 = pixel_projection_error(&a, &b, &k).unwrap();
        let e2 = pixel_projection_error(&a.scaled(3.0), &b.scaled(3.0), &k).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
        // Index correspondence, not nearest point: a 180 deg turn about y maps
        // the cube onto itself but permutes indices.
        let turned = a.rotated_about_y(PI);
        assert!(pixel_projection_error(&turned, &a, &k).unwrap() > 0.01);
    }

    #[test]
    fn viewpoint_examples() {
        // Object facing the camera: object +z points at the camera.
        let gt = Pose::new(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI), Vector3::new(0.0, 0.0, 4.0));
        let (az, el) = viewpoint(&gt).unwrap();
        assert!(az.abs() < 1e-12 && el.abs() < 1e-12);
        assert_eq!(viewpoint_errors(&gt, &gt).unwrap(), (0.0, 0.0));
        let pred = gt.rotated_about_object_y(20f64.to_radians());
        let (da, de) = viewpoint_errors(&pred, &gt).unwrap();
        assert!((da - 20.0).abs() < 1e-9 && de < 1e-9);
        let tilted = gt.compose(&Pose::new(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3), Vector3::zeros()));
        for a in [0.1, 1.0, 2.5, -2.0] {
            let (_, de) = viewpoint_errors(&tilted.rotated_about_object_y(a), &tilted).unwrap();
            assert!(de < 1e-9);
        }
        let wrap = gt.rotated_about_object_y(350f64.to_radians());
        assert!((viewpoint_errors(&wrap, &gt).unwrap().0 - 10.0).abs() < 1e-9);
        assert!(matches!(viewpoint(&Pose::identity()), Err(Error::UndefinedViewpoint)));
    }

    #[test]
    fn symmetric_examples() {
        let gt = OrientedBox::new(
            Pose::new(UnitQuaternion::from_euler_angles(0.2, 0.4, 0.1), Vector3::new(0.0, 0.0, 4.0)),
            Vector3::new(0.6, 1.0, 0.3),
        )
        .unwrap();
        let n = SYMMETRY_SAMPLES;
        let hit = gt.rotated_about_y(2.0 * PI * 37.0 / n as f64);
        assert!((symmetric_best(&hit, n, true, |b| iou3d(b, &gt)) - 1.0).abs() < 1e-9);
        let off = gt.rotated_about_y(0.7);
        let s = symmetric_best(&off, n, true, |b| iou3d(b, &gt));
        assert!(s >= iou3d(&off, &gt));
        // Nearest grid point to the inverse rotation.
        let nearest = (-0.7f64 / (2.0 * PI / n as f64)).round() * 2.0 * PI / n as f64;
        assert!(s >= iou3d(&off.rotated_about_y(nearest), &gt) - 1e-12);
        let pre = off.rotated_about_y(2.0 * PI * 3.0 / n as f64);
        assert!((symmetric_best(&pre, n, true, |b| iou3d(b, &gt)) - s).abs() < 1e-9);
    }

    #[test]
    fn dim_error_examples() {
        let one = RelativeDims::unit();
        assert_eq!(mean_relative_dim_error(&[one], &[one]).unwrap(), 0.0);
        let p = RelativeDims::new(1.1, 0.9).unwrap();
        assert!((mean_relative_dim_error(&[p], &[one]).unwrap() - 0.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<RelativeDims> =
            (0..50).map(|_| RelativeDims::new(rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)).unwrap()).collect();
        let gts: Vec<RelativeDims> =
            (0..50).map(|_| RelativeDims::new(rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)).unwrap()).collect();
        let mut total = 0.0;
        for i in 0..50 {
            total += (preds[i].rx - gts[i].rx).abs() / gts[i].rx;
            total += (preds[i].rz - gts[i].rz).abs() / gts[i].rz;
        }
        let oracle = total / 100.0;
        assert!((mean_relative_dim_error(&preds, &gts).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn association_is_greedy_by_score() {
        let k = CameraIntrinsics::new(500.0, 500.0, 256.0, 256.0, 512, 512).unwrap();
        let gt = |x: f64| GroundTruth {
            bbox: OrientedBox::new(Pose::new(UnitQuaternion::identity(), Vector3::new(x, 0.0, 6.0)), Vector3::repeat(0.5))
                .unwrap(),
            symmetric: false,
        };
        let gts = vec![gt(-1.0), gt(1.0)];
        let near0 = |s: f64, dx: f64| Prediction { bbox: gts[0].bbox.scaled(1.0), score: s }.shifted(dx);
        let preds = vec![near0(0.5, 0.1), near0(0.9, 0.0)];
        let recs = evaluate_image(3, &preds, &gts, &k, &EvalConfig::default());
        // The higher score claims gt 0; the other falls back to gt 1 by direction.
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].score, Some(0.9));
        assert_eq!(recs[0].gt_index, Some(0));
        assert_eq!(recs[0].iou3d, Some(1.0));
        assert_eq!(recs[1].gt_index, Some(1));
        let s = summarize(&recs, &EvalConfig::default());
        assert_eq!((s.num_gt, s.num_pred, s.num_matched), (2, 2, 2));
        assert_eq!(s.ap_iou, Some(0.5));
        let none = evaluate_image(0, &[], &gts, &k, &EvalConfig::default());
        assert!(none.iter().all(|r| !r.matched && r.score.is_none()));
    }

    impl Prediction {
        fn shifted(mut self, dx: f64) -> Self {
            self.bbox.pose.translation.x += dx;
            self
        }
    }
}
