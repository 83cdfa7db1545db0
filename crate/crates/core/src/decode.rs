//! Turning output maps into detections and 2D-3D correspondences.
//!
//! Centers come from 3x3 max-pool peaks of the center heatmap. Each center
//! yields two keypoint sets: displacement keypoints read under the center, and
//! heatmap keypoints taken from per-vertex heatmap peaks near the 2D box.
//! [`Strategy`] chooses how the two sets are turned into PnP input.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Keypoints2D, Point2, Pose, Rect, RelativeDims, NUM_VERTICES};
use crate::labelgen::{Cell, OutputMaps, STRIDE};
use crate::tensor::FeatureMap;

/// Smallest relative dimension accepted from the dims head.
pub const MIN_REL_DIM: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Displacement keypoints only.
    Displacement,
    /// Heatmap keypoints only.
    Heatmap,
    /// Per vertex, the heatmap point if it agrees with the displacement point.
    Distance,
    /// Samples from a two-component mixture per vertex.
    Sampling,
    /// Both keypoint sets together.
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Displacement, Strategy::Heatmap, Strategy::Distance, Strategy::Sampling, Strategy::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Displacement => "displacement",
            Strategy::Heatmap => "heatmap",
            Strategy::Distance => "distance",
            Strategy::Sampling => "sampling",
            Strategy::Combined => "combined",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_detections: usize,
    pub score_threshold: f64,
    /// Heatmap keypoints must lie within the 2D box grown by this fraction of its diagonal.
    pub margin_frac: f64,
    /// Samples per vertex for [`Strategy::Sampling`].
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Combined,
            max_detections: 10,
            score_threshold: 0.3,
            margin_frac: 0.1,
            sample_count: 20,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_detections == 0 {
            return Err(invalid("max_detections must be at least 1"));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(invalid(format!("score_threshold must be in (0, 1), got {}", self.score_threshold)));
        }
        if !(self.margin_frac >= 0.0) {
            return Err(invalid("margin_frac must be non-negative"));
        }
        if self.sample_count == 0 {
            return Err(invalid("sample_count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub cell: Cell,
    pub score: f64,
}

/// Separable 3x3 max filter of one channel (borders use the in-image part).
fn max_pool3(map: &FeatureMap, channel: usize) -> Vec<f64> {
    let (h, w) = (map.height(), map.width());
    let mut rows = vec![f64::NEG_INFINITY; h * w];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(w - 1);
            rows[r * w + c] = (lo..=hi).map(|cc| map.get(r, cc, channel)).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![f64::NEG_INFINITY; h * w];
    for r in 0..h {
        let lo = r.saturating_sub(1);
        let hi = (r + 1).min(h - 1);
        for c in 0..w {
            out[r * w + c] = (lo..=hi).map(|rr| rows[rr * w + c]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Peaks of one channel: cells equal to their 3x3 max and at least `threshold`.
///
/// Among equal neighbors only the first in row-major order is a peak. The
/// result is sorted by descending score (row-major among ties) and cut at `k`.
pub fn extract_peaks_channel(map: &FeatureMap, channel: usize, k: usize, threshold: f64) -> Vec<Peak> {
    let (h, w) = (map.height(), map.width());
    if h == 0 || w == 0 {
        return Vec::new();
    }
    let pooled = max_pool3(map, channel);
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map.get(r, c, channel);
            if v < threshold || v != pooled[r * w + c] {
                continue;
            }
            // An equal neighbor earlier in row-major order already claimed the plateau.
            let earlier_tie = (r.saturating_sub(1)..=r).any(|rr| {
                (c.saturating_sub(1)..=(c + 1).min(w - 1))
                    .any(|cc| (rr, cc) < (r, c) && map.get(rr, cc, channel) == v)
            });
            if !earlier_tie {
                peaks.push(Peak { cell: Cell { row: r, col: c }, score: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(k);
    peaks
}

pub fn extract_peaks(heatmap: &FeatureMap, k: usize, threshold: f64) -> Vec<Peak> {
    extract_peaks_channel(heatmap, 0, k, threshold)
}

/// A decoded object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Input-resolution pixels.
    pub center: Point2,
    pub score: f64,
    pub bbox2d: Rect,
    pub kps_disp: Keypoints2D,
    pub kps_heat: Keypoints2D,
    pub rel_dims: RelativeDims,
    /// Model-unit pose, filled in after PnP.
    pub pose: Option<Pose>,
}

pub fn decode_objects(maps: &OutputMaps, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    maps.validate()?;
    let s = STRIDE as f64;
    let centers = extract_peaks(&maps.center_heatmap, cfg.max_detections, cfg.score_threshold);
    let heat_peaks: Vec<Vec<Peak>> = (0..NUM_VERTICES)
        .map(|k| extract_peaks_channel(&maps.kp_heatmaps, k, usize::MAX, cfg.score_threshold))
        .collect();

    let mut out = Vec::with_capacity(centers.len());
    for peak in centers {
        let Cell { row, col } = peak.cell;
        let off = maps.center_offset.cell(row, col);
        let (cu, cv) = (col as f64 + off[0], row as f64 + off[1]);
        let center = Point2::new(cu * s, cv * s);
        let size = maps.bbox_size.cell(row, col);
        let bbox2d = Rect::from_center_size(&center, size[0].abs() * s, size[1].abs() * s);

        let disp = maps.kp_displacements.cell(row, col);
        let kps_disp = Keypoints2D::from_points(std::array::from_fn(|k| {
            Point2::new((cu + disp[2 * k]) * s, (cv + disp[2 * k + 1]) * s)
        }));

        let region = bbox2d.expanded(cfg.margin_frac * bbox2d.diagonal());
        let mut kps_heat = Keypoints2D::invalid();
        for (k, peaks) in heat_peaks.iter().enumerate() {
            let mut best: Option<(f64, f64, Point2)> = None;
            for p in peaks {
                let Cell { row: pr, col: pc } = p.cell;
                let ko = maps.kp_offsets.cell(pr, pc);
                let pt = Point2::new((pc as f64 + ko[2 * k]) * s, (pr as f64 + ko[2 * k + 1]) * s);
                if !region.contains(&pt) {
                    continue;
                }
                let dist = (pt - kps_disp.points[k]).norm();
                let better = match best {
                    None => true,
                    Some((bs, bd, _)) => p.score > bs || (p.score == bs && dist < bd),
                };
                if better {
                    best = Some((p.score, dist, pt));
                }
            }
            if let Some((score, _, pt)) = best {
                kps_heat.points[k] = pt;
                kps_heat.valid[k] = true;
                kps_heat.confidence[k] = score.clamp(0.0, 1.0);
            }
        }

        let dims = maps.rel_dims.cell(row, col);
        let rel_dims = RelativeDims {
            rx: if dims[0].is_finite() { dims[0].max(MIN_REL_DIM) } else { 1.0 },
            rz: if dims[1].is_finite() { dims[1].max(MIN_REL_DIM) } else { 1.0 },
        };
        out.push(Detection { center, score: peak.score, bbox2d, kps_disp, kps_heat, rel_dims, pose: None });
    }
    Ok(out)
}

/// One 2D observation of a model vertex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub vertex: usize,
    pub point: Point2,
    pub weight: f64,
}

/// Agreement radius for [`Strategy::Distance`], as a fraction of the box diagonal.
pub const DISTANCE_TAU_FRAC: f64 = 0.15;
/// Mixture component spread for [`Strategy::Sampling`], as a fraction of the box diagonal.
pub const SAMPLING_SIGMA_FRAC: f64 = 0.05;

/// Minimum number of correspondences a pose solve accepts.
pub const MIN_CORRESPONDENCES: usize = 4;

fn sampling_rng(det: &Detection, seed: u64) -> ChaCha8Rng {
    // Decorrelate detections sharing one configured seed.
    let mix = det.center.x.to_bits().rotate_left(17) ^ det.center.y.to_bits().rotate_left(41);
    ChaCha8Rng::seed_from_u64(seed ^ mix)
}

pub fn build_correspondences(det: &Detection, cfg: &DecodeConfig) -> Result<Vec<Correspondence>> {
    let disp = |k: usize| Correspondence { vertex: k, point: det.kps_disp.points[k], weight: 1.0 };
    let heat = || det.kps_heat.iter_valid().map(|(k, p)| Correspondence { vertex: k, point: *p, weight: 1.0 });
    let diag = det.bbox2d.diagonal();
    let out: Vec<Correspondence> = match cfg.strategy {
        Strategy::Displacement => (0..NUM_VERTICES).map(disp).collect(),
        Strategy::Heatmap => heat().collect(),
        Strategy::Distance => (0..NUM_VERTICES)
            .map(|k| {
                let d = det.kps_disp.points[k];
                let h = det.kps_heat.points[k];
                if det.kps_heat.valid[k] && (h - d).norm() <= DISTANCE_TAU_FRAC * diag {
                    Correspondence { vertex: k, point: h, weight: 1.0 }
                } else {
                    disp(k)
                }
            })
            .collect(),
        Strategy::Sampling => {
            let n = cfg.sample_count.max(1);
            let sigma = (SAMPLING_SIGMA_FRAC * diag).max(f64::MIN_POSITIVE);
            let noise = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
            let mut rng = sampling_rng(det, cfg.seed);
            let mut out = Vec::with_capacity(n * NUM_VERTICES);
            for k in 0..NUM_VERTICES {
                let d = det.kps_disp.points[k];
                let h = det.kps_heat.valid[k].then_some(det.kps_heat.points[k]);
                for _ in 0..n {
                    let mean = match h {
                        Some(h) if rng.random_bool(0.5) => h,
                        _ => d,
                    };
                    let p = Point2::new(mean.x + noise.sample(&mut rng), mean.y + noise.sample(&mut rng));
                    out.push(Correspondence { vertex: k, point: p, weight: 1.0 / n as f64 });
                }
            }
            out
        }
        Strategy::Combined => (0..NUM_VERTICES).map(disp).chain(heat()).collect(),
    };
    if out.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences { needed: MIN_CORRESPONDENCES, got: out.len() });
    }
    Ok(out)
}
