//! JSON-lines records exchanged between the command-line stages.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::labelgen::Scene;
use crate::metrics::{evaluate_image, summarize, EvalConfig, EvalRecord, GroundTruth, OrientedBox, Prediction, Summary};

/// A predicted box. Units are arbitrary: evaluation rescales it to the
/// ground-truth height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: usize,
    pub score: f64,
    pub pose: Pose,
    /// Full extents along local x, y, z.
    pub dims: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image: usize,
    /// Metric pose.
    pub pose: Pose,
    /// Metric extents along local x, y, z.
    pub dims: [f64; 3],
    #[serde(default)]
    pub symmetric: bool,
    pub camera: CameraIntrinsics,
}

impl PredictionRecord {
    pub fn to_box(&self) -> Result<OrientedBox> {
        OrientedBox::new(self.pose, Vector3::from(self.dims))
    }
}

impl GroundTruthRecord {
    pub fn to_ground_truth(&self) -> Result<GroundTruth> {
        Ok(GroundTruth { bbox: OrientedBox::new(self.pose, Vector3::from(self.dims))?, symmetric: self.symmetric })
    }

    /// Records for every object of a scene.
    pub fn from_scene(image: usize, scene: &Scene) -> Vec<Self> {
        scene
            .objects
            .iter()
            .map(|o| {
                let e = o.extents();
                GroundTruthRecord { image, pose: o.pose, dims: [e.x, e.y, e.z], symmetric: o.symmetric, camera: scene.camera }
            })
            .collect()
    }
}

pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| invalid(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups by image (ascending) and evaluates. Every image with ground truth
/// needs a consistent camera; predictions for images without ground truth
/// count as false positives.
pub fn evaluate_records(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    cfg: &EvalConfig,
) -> Result<(Vec<EvalRecord>, Summary)> {
    cfg.validate()?;
    let mut images: BTreeMap<usize, (Vec<Prediction>, Vec<GroundTruth>, Option<CameraIntrinsics>)> = BTreeMap::new();
    for g in gts {
        let entry = images.entry(g.image).or_default();
        match entry.2 {
            Some(c) if c != g.camera => {
                return Err(invalid(format!("image {} has inconsistent cameras", g.image)));
            }
            _ => entry.2 = Some(g.camera),
        }
        entry.1.push(g.to_ground_truth()?);
    }
    for p in preds {
        if !(p.score.is_finite()) {
            return Err(invalid(format!("image {}: non-finite score", p.image)));
        }
        images.entry(p.image).or_default().0.push(Prediction { bbox: p.to_box()?, score: p.score });
    }
    let mut records = Vec::new();
    for (image, (p, g, camera)) in images {
        match camera {
            Some(k) => records.extend(evaluate_image(image, &p, &g, &k, cfg)),
            None => records.extend(p.iter().map(|x| EvalRecord {
                score: Some(x.score),
                gt_index: None,
                ..EvalRecord::miss(image, 0, false)
            })),
        }
    }
    let summary = summarize(&records, cfg);
    Ok((records, summary))
}
