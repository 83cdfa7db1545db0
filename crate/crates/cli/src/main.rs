use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keypose_core::decode::{build_correspondences, decode_objects, DecodeConfig, Strategy};
use keypose_core::geometry::CameraIntrinsics;
use keypose_core::labelgen::{OutputMaps, Scene};
use keypose_core::metrics::{EvalConfig, Summary};
use keypose_core::pnp::{solve_keypoint_lifting_correspondences, solve_pnp_lm, PnPConfig};
use keypose_core::records::{evaluate_records, read_jsonl, write_jsonl, GroundTruthRecord, PredictionRecord};
use keypose_core::sim::{
    ablate_decode, ablate_dims, default_camera, noise_sweep, perturb, sample_scenes_with_camera, summary_table,
    AblationConfig, AblationReport, CategoryProfile, NoiseConfig, RunConfig, Solver,
};
use keypose_core::tensor::TensorBundle;
use keypose_core::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "keypose", version, about = "Keypoint-based category-level pose estimation toolkit (synthetic harness)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic scenes (JSON lines) and optionally their ground-truth records.
    Simulate(SimulateArgs),
    /// Encode one scene into output maps, optionally corrupted by noise.
    Encode(EncodeArgs),
    /// Decode maps into detections and solve their poses.
    Decode(DecodeArgs),
    /// Evaluate prediction records against ground-truth records.
    Evaluate(EvaluateArgs),
    /// Compare decoding strategies across profiles and seeds.
    AblateDecode(AblateDecodeArgs),
    /// Compare dimension sources (keypoint lifting, estimated dims, ground-truth dims).
    AblateDims(AblateDimsArgs),
    /// Sweep keypoint jitter for each decoding strategy.
    NoiseSweep(NoiseSweepArgs),
}

#[derive(Args, Clone)]
struct CameraArgs {
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    fy: Option<f64>,
    #[arg(long)]
    cx: Option<f64>,
    #[arg(long)]
    cy: Option<f64>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

impl CameraArgs {
    fn camera(&self) -> Result<CameraIntrinsics> {
        let d = default_camera();
        CameraIntrinsics::new(
            self.fx.unwrap_or(d.fx),
            self.fy.unwrap_or(d.fy),
            self.cx.unwrap_or(d.cx),
            self.cy.unwrap_or(d.cy),
            self.width.unwrap_or(d.width),
            self.height.unwrap_or(d.height),
        )
    }
}

#[derive(Args, Clone)]
struct NoiseArgs {
    /// Starting point: none, calibrated or heavy.
    #[arg(long)]
    noise_preset: Option<String>,
    /// Sets both displacement and heatmap jitter (pixels).
    #[arg(long)]
    keypoint_jitter: Option<f64>,
    #[arg(long)]
    disp_jitter: Option<f64>,
    #[arg(long)]
    heat_jitter: Option<f64>,
    #[arg(long)]
    heat_dropout: Option<f64>,
    #[arg(long)]
    dims_sigma: Option<f64>,
    #[arg(long)]
    center_jitter: Option<f64>,
}

impl NoiseArgs {
    fn config(&self, default_preset: &str, seed: u64) -> Result<NoiseConfig> {
        let mut n = NoiseConfig::preset(self.noise_preset.as_deref().unwrap_or(default_preset))?;
        if let Some(j) = self.keypoint_jitter {
            n = n.with_keypoint_jitter(j);
        }
        n.disp_jitter_px = self.disp_jitter.unwrap_or(n.disp_jitter_px);
        n.heat_jitter_px = self.heat_jitter.unwrap_or(n.heat_jitter_px);
        n.heat_dropout = self.heat_dropout.unwrap_or(n.heat_dropout);
        n.dims_sigma = self.dims_sigma.unwrap_or(n.dims_sigma);
        n.center_jitter_px = self.center_jitter.unwrap_or(n.center_jitter_px);
        n.seed = seed;
        n.validate()?;
        Ok(n)
    }
}

#[derive(Args, Clone)]
struct DecodeOpts {
    #[arg(long)]
    max_detections: Option<usize>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    margin_frac: Option<f64>,
    #[arg(long)]
    sample_count: Option<usize>,
}

impl DecodeOpts {
    fn config(&self, strategy: Strategy, seed: u64) -> Result<DecodeConfig> {
        let d = DecodeConfig::default();
        let c = DecodeConfig {
            strategy,
            max_detections: self.max_detections.unwrap_or(d.max_detections),
            score_threshold: self.score_threshold.unwrap_or(d.score_threshold),
            margin_frac: self.margin_frac.unwrap_or(d.margin_frac),
            sample_count: self.sample_count.unwrap_or(d.sample_count),
            seed,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Clone)]
struct PnpOpts {
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    initial_damping: Option<f64>,
    #[arg(long)]
    damping_up: Option<f64>,
    #[arg(long)]
    damping_down: Option<f64>,
    #[arg(long)]
    step_tol: Option<f64>,
    #[arg(long)]
    cost_tol: Option<f64>,
    /// Huber threshold in pixels; plain least squares when absent.
    #[arg(long)]
    huber_px: Option<f64>,
}

impl PnpOpts {
    fn config(&self) -> Result<PnPConfig> {
        let d = PnPConfig::default();
        let c = PnPConfig {
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            initial_damping: self.initial_damping.unwrap_or(d.initial_damping),
            damping_up: self.damping_up.unwrap_or(d.damping_up),
            damping_down: self.damping_down.unwrap_or(d.damping_down),
            step_tol: self.step_tol.unwrap_or(d.step_tol),
            cost_tol: self.cost_tol.unwrap_or(d.cost_tol),
            huber_px: self.huber_px.or(d.huber_px),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Clone)]
struct EvalOpts {
    #[arg(long)]
    iou_threshold: Option<f64>,
    /// Degrees.
    #[arg(long)]
    azimuth_threshold: Option<f64>,
    /// Degrees.
    #[arg(long)]
    elevation_threshold: Option<f64>,
    #[arg(long)]
    symmetry_samples: Option<usize>,
    /// Ignore per-instance symmetry flags.
    #[arg(long)]
    no_symmetry: bool,
}

impl EvalOpts {
    fn config(&self) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        let c = EvalConfig {
            iou_threshold: self.iou_threshold.unwrap_or(d.iou_threshold),
            azimuth_threshold_deg: self.azimuth_threshold.unwrap_or(d.azimuth_threshold_deg),
            elevation_threshold_deg: self.elevation_threshold.unwrap_or(d.elevation_threshold_deg),
            symmetry_samples: self.symmetry_samples.unwrap_or(d.symmetry_samples),
            use_symmetry: !self.no_symmetry,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in profile: cereal_box, book, cup, bottle.
    #[arg(long, default_value = "cereal_box")]
    profile: String,
    /// Profile as a JSON file; overrides --profile.
    #[arg(long)]
    profile_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    camera: CameraArgs,
    /// Scene JSON lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write ground-truth records here.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Scene JSON lines.
    #[arg(long)]
    scenes: PathBuf,
    /// Line of the scene to encode.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output stem; writes `<stem>.json` and `<stem>.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args)]
struct DecodeArgs {
    /// Map bundle stem written by `encode`.
    #[arg(long)]
    maps: PathBuf,
    #[arg(long, default_value = "combined")]
    strategy: Strategy,
    /// lifting or lm_estimated_dims.
    #[arg(long, default_value = "lm_estimated_dims")]
    solver: Solver,
    /// Image id for the records; taken from the bundle when absent.
    #[arg(long)]
    image: Option<usize>,
    /// Seed of the sampling strategy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    decode: DecodeOpts,
    #[command(flatten)]
    pnp: PnpOpts,
    /// Prediction JSON lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the raw detections (JSON array) here.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Unused by the metrics; accepted for a uniform interface.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    eval: EvalOpts,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Comma-separated built-in profiles.
    #[arg(long, value_delimiter = ',', default_value = "cereal_box,book,cup,bottle")]
    profiles: Vec<String>,
    #[arg(long, default_value_t = 125)]
    scenes_per_profile: usize,
    /// First seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    num_seeds: u64,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    decode: DecodeOpts,
    #[command(flatten)]
    pnp: PnpOpts,
    #[command(flatten)]
    eval: EvalOpts,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SweepArgs {
    fn config(&self, default_preset: &str, strategy: Strategy, solver: Solver) -> Result<AblationConfig> {
        let profiles = self.profiles.iter().map(|p| CategoryProfile::by_name(p.trim())).collect::<Result<Vec<_>>>()?;
        if self.num_seeds == 0 || self.scenes_per_profile == 0 {
            return Err(Error::InvalidArgument("need at least one seed and one scene".into()));
        }
        Ok(AblationConfig {
            profiles,
            scenes_per_profile: self.scenes_per_profile,
            seeds: (0..self.num_seeds).map(|i| self.seed + i).collect(),
            base: RunConfig {
                noise: self.noise.config(default_preset, self.seed)?,
                decode: self.decode.config(strategy, self.seed)?,
                pnp: self.pnp.config()?,
                eval: self.eval.config()?,
                solver,
            },
        })
    }
}

#[derive(Args)]
struct AblateDecodeArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "displacement,heatmap,distance,sampling,combined")]
    strategies: Vec<Strategy>,
    #[arg(long, default_value = "lm_estimated_dims")]
    solver: Solver,
}

#[derive(Args)]
struct AblateDimsArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "lifting,lm_estimated_dims,lm_gt_dims")]
    solvers: Vec<Solver>,
    #[arg(long, default_value = "combined")]
    strategy: Strategy,
}

#[derive(Args)]
struct NoiseSweepArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Keypoint jitter values, pixels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,4")]
    jitters: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "displacement,heatmap,combined")]
    strategies: Vec<Strategy>,
    #[arg(long, default_value = "lm_estimated_dims")]
    solver: Solver,
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let profile = match &a.profile_file {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
        None => CategoryProfile::by_name(&a.profile)?,
    };
    let scenes = sample_scenes_with_camera(&profile, a.count, a.seed, &a.camera.camera()?)?;
    let mut out = open_out(&a.out)?;
    write_jsonl(&mut out, &scenes)?;
    out.flush()?;
    if let Some(gt) = &a.gt {
        let records: Vec<GroundTruthRecord> =
            scenes.iter().enumerate().flat_map(|(i, s)| GroundTruthRecord::from_scene(i, s)).collect();
        let mut w = BufWriter::new(File::create(gt)?);
        write_jsonl(&mut w, &records)?;
        w.flush()?;
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let scenes: Vec<Scene> = read_lines(&a.scenes)?;
    let scene = scenes
        .get(a.index)
        .ok_or_else(|| Error::InvalidArgument(format!("scene index {} out of range ({} scenes)", a.index, scenes.len())))?;
    let noise = a.noise.config("none", a.seed)?;
    let encoded = perturb(scene, &noise, &mut noise.scene_rng(a.index))?;
    for s in &encoded.skipped {
        eprintln!("warning: object {} skipped: {}", s.object, s.reason);
    }
    let meta = serde_json::json!({ "camera": scene.camera, "image": a.index, "noise": noise });
    encoded.maps.to_bundle(meta).save(&a.out)?;
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let bundle = TensorBundle::load(&a.maps)?;
    let maps = OutputMaps::from_bundle(&bundle)?;
    let camera: CameraIntrinsics = serde_json::from_value(
        bundle.metadata.get("camera").cloned().ok_or_else(|| Error::InvalidArgument("bundle has no camera".into()))?,
    )?;
    let image = a.image.or_else(|| bundle.metadata.get("image").and_then(|v| v.as_u64()).map(|v| v as usize)).unwrap_or(0);
    let cfg = a.decode.config(a.strategy, a.seed)?;
    let pnp = a.pnp.config()?;
    let mut detections = decode_objects(&maps, &cfg)?;
    let mut preds = Vec::new();
    for (i, det) in detections.iter_mut().enumerate() {
        let solved = build_correspondences(det, &cfg).and_then(|corr| match a.solver {
            Solver::Lifting => {
                let l = solve_keypoint_lifting_correspondences(&corr, &camera)?;
                Ok((l.result.pose, l.dims))
            }
            Solver::LmEstimatedDims => Ok((solve_pnp_lm(&corr, &det.rel_dims, &camera, &pnp)?.pose, det.rel_dims)),
            Solver::LmGtDims => {
                Err(Error::InvalidArgument("lm_gt_dims needs ground truth; use ablate-dims".into()))
            }
        });
        match solved {
            Ok((pose, dims)) => {
                det.pose = Some(pose);
                let e = dims.extents();
                preds.push(PredictionRecord { image, score: det.score, pose, dims: [e.x, e.y, e.z] });
            }
            Err(Error::InvalidArgument(m)) => return Err(Error::InvalidArgument(m)),
            Err(e) => eprintln!("warning: detection {i}: {e}"),
        }
    }
    if let Some(p) = &a.detections {
        write_json(p, &detections)?;
    }
    let mut out = open_out(&a.out)?;
    write_jsonl(&mut out, &preds)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    config: EvalConfig,
    summary: Summary,
    records: Vec<keypose_core::metrics::EvalRecord>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let preds: Vec<PredictionRecord> = read_lines(&a.pred)?;
    let gts: Vec<GroundTruthRecord> = read_lines(&a.gt)?;
    let cfg = a.eval.config()?;
    let (records, summary) = evaluate_records(&preds, &gts, &cfg)?;
    print!("{}", summary_table("evaluation", &[("all".to_string(), summary.clone())]));
    if let Some(p) = &a.out {
        write_json(p, &EvaluationReport { config: cfg, summary, records })?;
    }
    Ok(())
}

fn finish(report: &AblationReport, out: &Option<PathBuf>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(p) = out {
        write_json(p, report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate(a),
        Command::AblateDecode(a) => {
            let cfg = a.sweep.config("calibrated", Strategy::Combined, a.solver)?;
            finish(&ablate_decode(&cfg, &a.strategies)?, &a.sweep.out)
        }
        Command::AblateDims(a) => {
            let cfg = a.sweep.config("calibrated", a.strategy, Solver::LmEstimatedDims)?;
            finish(&ablate_dims(&cfg, &a.solvers)?, &a.sweep.out)
        }
        Command::NoiseSweep(a) => {
            let cfg = a.sweep.config("none", Strategy::Combined, a.solver)?;
            finish(&noise_sweep(&cfg, &a.strategies, &a.jitters)?, &a.sweep.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
