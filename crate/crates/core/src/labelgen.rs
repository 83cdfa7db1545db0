//! Encoding ground-truth scenes into the seven dense output maps.
//!
//! Maps live at output stride [`STRIDE`]. A point `p` in input pixels lands in
//! cell `floor(p / STRIDE)` with sub-cell offset `p / STRIDE - floor(p / STRIDE)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    bbox_of_points, project, CameraIntrinsics, Point2, Pose, Rect, RelativeDims, NUM_VERTICES,
};
use crate::tensor::{FeatureMap, TensorBundle};

/// Ratio of input resolution to output map resolution.
pub const STRIDE: usize = 4;

/// Default square input size.
pub const IMAGE_SIZE: u32 = 512;

/// Number of rotated label variants generated for symmetric objects.
pub const SYMMETRY_VARIANTS: usize = 12;

/// The seven output heads, in timestep order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    CenterHeatmap,
    CenterOffset,
    BboxSize,
    KpDisplacements,
    KpHeatmaps,
    KpOffsets,
    RelDims,
}

impl Head {
    pub const ALL: [Head; 7] = [
        Head::CenterHeatmap,
        Head::CenterOffset,
        Head::BboxSize,
        Head::KpDisplacements,
        Head::KpHeatmaps,
        Head::KpOffsets,
        Head::RelDims,
    ];

    pub fn channels(self) -> usize {
        match self {
            Head::CenterHeatmap => 1,
            Head::CenterOffset | Head::BboxSize | Head::RelDims => 2,
            Head::KpDisplacements | Head::KpOffsets => 2 * NUM_VERTICES,
            Head::KpHeatmaps => NUM_VERTICES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::CenterHeatmap => "center_heatmap",
            Head::CenterOffset => "center_offset",
            Head::BboxSize => "bbox_size",
            Head::KpDisplacements => "kp_displacements",
            Head::KpHeatmaps => "kp_heatmaps",
            Head::KpOffsets => "kp_offsets",
            Head::RelDims => "rel_dims",
        }
    }

    /// Recurrent timestep (1-based) at which the head is produced.
    pub fn timestep(self) -> usize {
        match self {
            Head::CenterHeatmap | Head::CenterOffset | Head::BboxSize => 1,
            Head::KpDisplacements | Head::KpHeatmaps | Head::KpOffsets => 2,
            Head::RelDims => 3,
        }
    }

    pub fn is_heatmap(self) -> bool {
        matches!(self, Head::CenterHeatmap | Head::KpHeatmaps)
    }
}

/// Dense network outputs (or training targets) at output stride.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMaps {
    pub center_heatmap: FeatureMap,
    pub center_offset: FeatureMap,
    pub bbox_size: FeatureMap,
    pub kp_displacements: FeatureMap,
    pub kp_heatmaps: FeatureMap,
    pub kp_offsets: FeatureMap,
    pub rel_dims: FeatureMap,
}

impl OutputMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        let m = |h: Head| FeatureMap::zeros(height, width, h.channels());
        OutputMaps {
            center_heatmap: m(Head::CenterHeatmap),
            center_offset: m(Head::CenterOffset),
            bbox_size: m(Head::BboxSize),
            kp_displacements: m(Head::KpDisplacements),
            kp_heatmaps: m(Head::KpHeatmaps),
            kp_offsets: m(Head::KpOffsets),
            rel_dims: m(Head::RelDims),
        }
    }

    /// Zero maps sized for a camera image.
    pub fn for_camera(camera: &CameraIntrinsics) -> Self {
        let (h, w) = map_size(camera);
        Self::zeros(h, w)
    }

    pub fn height(&self) -> usize {
        self.center_heatmap.height()
    }

    pub fn width(&self) -> usize {
        self.center_heatmap.width()
    }

    pub fn get(&self, head: Head) -> &FeatureMap {
        match head {
            Head::CenterHeatmap => &self.center_heatmap,
            Head::CenterOffset => &self.center_offset,
            Head::BboxSize => &self.bbox_size,
            Head::KpDisplacements => &self.kp_displacements,
            Head::KpHeatmaps => &self.kp_heatmaps,
            Head::KpOffsets => &self.kp_offsets,
            Head::RelDims => &self.rel_dims,
        }
    }

    pub fn get_mut(&mut self, head: Head) -> &mut FeatureMap {
        match head {
            Head::CenterHeatmap => &mut self.center_heatmap,
            Head::CenterOffset => &mut self.center_offset,
            Head::BboxSize => &mut self.bbox_size,
            Head::KpDisplacements => &mut self.kp_displacements,
            Head::KpHeatmaps => &mut self.kp_heatmaps,
            Head::KpOffsets => &mut self.kp_offsets,
            Head::RelDims => &mut self.rel_dims,
        }
    }

    /// Checks channel counts and that every head shares one spatial size.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for head in Head::ALL {
            let m = self.get(head);
            if m.height() != h || m.width() != w || m.channels() != head.channels() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected [{h}, {w}, {}]",
                    head.name(),
                    m.shape(),
                    head.channels()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bundle(&self, metadata: serde_json::Value) -> TensorBundle {
        let mut b = TensorBundle { tensors: Vec::new(), metadata };
        for head in Head::ALL {
            b.push_map(head.name(), self.get(head));
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let maps = OutputMaps {
            center_heatmap: bundle.get_map(Head::CenterHeatmap.name())?,
            center_offset: bundle.get_map(Head::CenterOffset.name())?,
            bbox_size: bundle.get_map(Head::BboxSize.name())?,
            kp_displacements: bundle.get_map(Head::KpDisplacements.name())?,
            kp_heatmaps: bundle.get_map(Head::KpHeatmaps.name())?,
            kp_offsets: bundle.get_map(Head::KpOffsets.name())?,
            rel_dims: bundle.get_map(Head::RelDims.name())?,
        };
        maps.validate()?;
        Ok(maps)
    }
}

pub fn map_size(camera: &CameraIntrinsics) -> (usize, usize) {
    (camera.height as usize / STRIDE, camera.width as usize / STRIDE)
}

/// One object in a scene. The pose is metric (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub pose: Pose,
    pub dims: RelativeDims,
    pub height_m: f64,
    #[serde(default)]
    pub symmetric: bool,
}

impl SceneObject {
    /// Metric extents `(rx h, h, rz h)`.
    pub fn extents(&self) -> nalgebra::Vector3<f64> {
        self.dims.extents() * self.height_m
    }

    pub fn metric_vertices(&self) -> [crate::geometry::Point3; NUM_VERTICES] {
        crate::geometry::box_vertices(&self.extents())
    }

    /// Pose with translation expressed in model units (object height = 1).
    pub fn model_pose(&self) -> Pose {
        self.pose.with_scaled_translation(1.0 / self.height_m)
    }

    pub fn project_vertices(&self, camera: &CameraIntrinsics) -> Result<[Point2; NUM_VERTICES]> {
        let pts = project(&self.metric_vertices(), &self.pose, camera)?;
        Ok(pts.try_into().expect("eight vertices"))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(self.height_m.is_finite() && self.height_m > 0.0) {
            return Err(invalid(format!("height_m must be positive, got {}", self.height_m)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub camera: CameraIntrinsics,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        for (i, o) in self.objects.iter().enumerate() {
            o.validate().map_err(|e| invalid(format!("object {i}: {e}")))?;
            o.project_vertices(&self.camera)?;
        }
        Ok(())
    }
}

/// Per-object 2D quantities that the rasterizer writes into the maps.
///
/// Displacement and heatmap keypoints are kept separately so that noise can be
/// applied to each representation independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTarget {
    /// Index of the object in its scene.
    pub object: usize,
    /// Center of the 2D box, input pixels.
    pub center: Point2,
    pub bbox: Rect,
    pub disp_keypoints: [Point2; NUM_VERTICES],
    pub heat_keypoints: [Option<Point2>; NUM_VERTICES],
    pub rel_dims: RelativeDims,
}

impl ObjectTarget {
    pub fn from_object(index: usize, object: &SceneObject, camera: &CameraIntrinsics) -> Result<Self> {
        let kps = object.project_vertices(camera)?;
        let bbox = bbox_of_points(&kps)?;
        Ok(ObjectTarget {
            object: index,
            center: bbox.center(),
            bbox,
            disp_keypoints: kps,
            heat_keypoints: kps.map(Some),
            rel_dims: object.dims,
        })
    }

    /// Heatmap spread for this object's peaks, in output-stride units.
    pub fn sigma(&self) -> f64 {
        let s = STRIDE as f64;
        gaussian_sigma(self.bbox.width().max(1e-6) / s, self.bbox.height().max(1e-6) / s)
            .expect("positive clamped sizes")
    }
}

/// Grid cell at output stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    /// Cell containing an input-resolution point, if it lies on the map.
    pub fn containing(p: &Point2, height: usize, width: usize) -> Option<Cell> {
        let s = STRIDE as f64;
        let (c, r) = ((p.x / s).floor(), (p.y / s).floor());
        if c >= 0.0 && r >= 0.0 && (c as usize) < width && (r as usize) < height {
            Some(Cell { row: r as usize, col: c as usize })
        } else {
            None
        }
    }

    /// Sub-cell fraction of `p` relative to this cell, in stride units.
    pub fn offset_of(&self, p: &Point2) -> (f64, f64) {
        let s = STRIDE as f64;
        (p.x / s - self.col as f64, p.y / s - self.row as f64)
    }
}

/// Cells that carry regression labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMasks {
    /// Center cells with center-offset, bbox, displacement and dims labels.
    pub center_cells: Vec<Cell>,
    /// `(cell, vertex)` pairs with keypoint-offset labels.
    pub keypoint_cells: Vec<(Cell, usize)>,
    /// Objects that contributed a center peak.
    pub num_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedObject {
    pub object: usize,
    pub reason: String,
}

/// Maps plus the bookkeeping needed by losses and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedScene {
    pub maps: OutputMaps,
    pub masks: LabelMasks,
    pub targets: Vec<ObjectTarget>,
    pub skipped: Vec<SkippedObject>,
}

/// `max(diag / 18, 1)` for a box measured in output-stride units.
pub fn gaussian_sigma(bbox_w: f64, bbox_h: f64) -> Result<f64> {
    if !(bbox_w > 0.0 && bbox_h > 0.0) || !bbox_w.is_finite() || !bbox_h.is_finite() {
        return Err(invalid(format!("bbox size must be positive, got ({bbox_w}, {bbox_h})")));
    }
    Ok((bbox_w.hypot(bbox_h) / 18.0).max(1.0))
}

/// Max-combines a truncated Gaussian into one channel of `map`.
///
/// `(u, v)` are continuous coordinates at output stride; the peak sits at the
/// cell `(floor(u), floor(v))` and is exactly 1 there. Cells farther than
/// `3 sigma` from the peak cell are left untouched.
pub fn splat_gaussian(map: &mut FeatureMap, channel: usize, u: f64, v: f64, sigma: f64) {
    let (pc, pr) = (u.floor(), v.floor());
    if !pc.is_finite() || !pr.is_finite() {
        return;
    }
    let radius = 3.0 * sigma;
    let r = radius.floor() as i64;
    let (pc, pr) = (pc as i64, pr as i64);
    let (h, w) = (map.height() as i64, map.width() as i64);
    let denom = 2.0 * sigma * sigma;
    for row in (pr - r).max(0)..=(pr + r).min(h - 1) {
        for col in (pc - r).max(0)..=(pc + r).min(w - 1) {
            let d2 = ((col - pc).pow(2) + (row - pr).pow(2)) as f64;
            if d2 > radius * radius {
                continue;
            }
            let val = (-d2 / denom).exp();
            let i = map.index(row as usize, col as usize, channel);
            let cur = &mut map.data_mut()[i];
            if val > *cur {
                *cur = val;
            }
        }
    }
}

/// Renders `(u, v, sigma)` peaks (output-stride units) into a fresh single-channel map.
pub fn render_heatmap(peaks: &[(f64, f64, f64)], height: usize, width: usize) -> Result<FeatureMap> {
    let mut map = FeatureMap::zeros(height, width, 1);
    for &(u, v, sigma) in peaks {
        if !(sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        splat_gaussian(&mut map, 0, u, v, sigma);
    }
    Ok(map)
}

/// Writes per-object targets into fresh maps of the given size.
///
/// When two objects share a center cell the one with the larger 2D box owns
/// the regression values; both contribute heatmap peaks. Keypoint-offset
/// collisions for the same vertex follow the same rule.
pub fn rasterize(targets: &[ObjectTarget], height: usize, width: usize) -> (OutputMaps, LabelMasks, Vec<SkippedObject>) {
    let s = STRIDE as f64;
    let mut maps = OutputMaps::zeros(height, width);
    let mut masks = LabelMasks::default();
    let mut skipped = Vec::new();

    // Ascending area: larger boxes are written last and win collisions.
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].bbox.area().total_cmp(&targets[b].bbox.area()).then(a.cmp(&b)));

    for &ti in &order {
        let t = &targets[ti];
        let Some(cell) = Cell::containing(&t.center, height, width) else {
            skipped.push(SkippedObject {
                object: t.object,
                reason: format!("center ({:.2}, {:.2}) falls outside the output map", t.center.x, t.center.y),
            });
            continue;
        };
        masks.num_objects += 1;
        let sigma = t.sigma();
        let (cu, cv) = (t.center.x / s, t.center.y / s);
        splat_gaussian(&mut maps.center_heatmap, 0, cu, cv, sigma);

        let (ox, oy) = cell.offset_of(&t.center);
        maps.center_offset.cell_mut(cell.row, cell.col).copy_from_slice(&[ox, oy]);
        maps.bbox_size
            .cell_mut(cell.row, cell.col)
            .copy_from_slice(&[t.bbox.width() / s, t.bbox.height() / s]);
        let disp = maps.kp_displacements.cell_mut(cell.row, cell.col);
        for (k, kp) in t.disp_keypoints.iter().enumerate() {
            disp[2 * k] = kp.x / s - cu;
            disp[2 * k + 1] = kp.y / s - cv;
        }
        maps.rel_dims.cell_mut(cell.row, cell.col).copy_from_slice(&[t.rel_dims.rx, t.rel_dims.rz]);
        if !masks.center_cells.contains(&cell) {
            masks.center_cells.push(cell);
        }

        for (k, kp) in t.heat_keypoints.iter().enumerate() {
            let Some(kp) = kp else { continue };
            splat_gaussian(&mut maps.kp_heatmaps, k, kp.x / s, kp.y / s, sigma);
            if let Some(kc) = Cell::containing(kp, height, width) {
                let (ox, oy) = kc.offset_of(kp);
                let off = maps.kp_offsets.cell_mut(kc.row, kc.col);
                off[2 * k] = ox;
                off[2 * k + 1] = oy;
                if !masks.keypoint_cells.contains(&(kc, k)) {
                    masks.keypoint_cells.push((kc, k));
                }
            }
        }
    }
    (maps, masks, skipped)
}

pub fn scene_targets(scene: &Scene) -> Result<Vec<ObjectTarget>> {
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| ObjectTarget::from_object(i, o, &scene.camera))
        .collect()
}

pub fn encode_targets(targets: Vec<ObjectTarget>, camera: &CameraIntrinsics) -> EncodedScene {
    let (h, w) = map_size(camera);
    let (maps, masks, skipped) = rasterize(&targets, h, w);
    let targets = targets
        .into_iter()
        .filter(|t| !skipped.iter().any(|s| s.object == t.object))
        .collect();
    EncodedScene { maps, masks, targets, skipped }
}

pub fn encode_scene(scene: &Scene) -> Result<EncodedScene> {
    scene.validate()?;
    Ok(encode_targets(scene_targets(scene)?, &scene.camera))
}

/// Label sets for the symmetric loss: variant `i` rotates every symmetric
/// object by `2 pi i / count` about its `y` axis.
///
/// Only keypoint labels change between variants; center, box and dims labels
/// are those of the unrotated object.
pub fn encode_symmetric_variants(scene: &Scene, count: usize) -> Result<Vec<EncodedScene>> {
    if count == 0 {
        return Err(invalid("need at least one symmetry variant"));
    }
    scene.validate()?;
    let base = scene_targets(scene)?;
    (0..count)
        .map(|i| {
            let angle = TAU * i as f64 / count as f64;
            let mut targets = base.clone();
            for t in targets.iter_mut() {
                let obj = &scene.objects[t.object];
                if !obj.symmetric {
                    continue;
                }
                let rotated = SceneObject { pose: obj.pose.rotated_about_object_y(angle), ..obj.clone() };
                let kps = rotated.project_vertices(&scene.camera)?;
                t.disp_keypoints = kps;
                t.heat_keypoints = kps.map(Some);
            }
            Ok(encode_targets(targets, &scene.camera))
        })
        .collect()
}
