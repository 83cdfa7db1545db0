//! Category-level 6-DoF pose estimation downstream of a keypoint network.
//!
//! The crate covers label encoding ([`labelgen`]), the training objective
//! ([`losses`]), the recurrent head grouping ([`convgru`]), output decoding
//! ([`decode`]), pose recovery ([`pnp`]), evaluation ([`metrics`]) and a
//! synthetic end-to-end harness ([`sim`]) that replaces the trained network
//! with oracle output maps plus parametric noise. [`records`] holds the
//! JSON-lines formats used by the command-line tool.

pub mod convgru;
pub mod decode;
pub mod error;
pub mod geometry;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod pnp;
pub mod records;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{
    bbox2d_from_keypoints, cuboid_vertices, pose_compose, pose_invert, project, CameraIntrinsics, Cuboid,
    Keypoints2D, Point2, Point3, Pose, Rect, RelativeDims,
};
pub use convgru::{run_sequential_heads, SequentialModel};
pub use decode::{build_correspondences, decode_objects, Correspondence, DecodeConfig, Detection, Strategy};
pub use labelgen::{encode_scene, EncodedScene, Head, OutputMaps, Scene, SceneObject};
pub use losses::{total_loss, LossWeights};
pub use metrics::{iou3d, EvalConfig, EvalRecord, OrientedBox, Summary};
pub use pnp::{resolve_scale, solve_keypoint_lifting, solve_pnp_lm, PnPConfig, PnPResult};
pub use records::{GroundTruthRecord, PredictionRecord};
pub use sim::{run_pipeline, CategoryProfile, NoiseConfig, RunConfig, RunReport, Solver};
pub use tensor::{FeatureMap, TensorBundle};
