//! Command-line surface.
//!
//! Subcommands: `phantom`, `mask`, `restack`, `map`, `joint`, `simulate`,
//! `labels`. Every run writes its numeric outputs as files into `--out`
//! plus a deterministic `report.json` (config echo, seed, work counters,
//! energies); wall-clock timing goes to stderr only, so identical configs
//! and seeds give byte-identical output trees.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 solver stall.

use crate::error::Error;
use crate::flow::Diffeomorphism;
use crate::grid::{SectionStack, VectorField3D, Volume, VolumeKind};
use crate::io::{
    self, nrrd, PhantomConfig, PhantomKind, RunConfig, RunReport, SCHEMA_VERSION,
};
use crate::joint::{
    joint_estimate, EstimatorMode, InitMode, JointConfig, MatchSettings,
};
use crate::kernel::KernelSpec;
use crate::lddmm::{lddmm_match, transport_labels, MatchChannel, MatchConfig};
use crate::preprocess::{estimate_background_threshold, make_brain_mask, MaskParams};
use crate::restack::{optimize_rigid, restack, RigidMotion, RigidOptConfig, RigidPrior};
use crate::simulate::{
    self, add_noise, jitter_stack, make_curved_phantom, make_grayscale_phantom, run_trials,
    section_volume, shear_volume, BendParams, DeformationKind, SimConfig, ThetaUnit,
};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "histostack",
    about = "Joint rigid restacking of serial sections and diffeomorphic atlas mapping",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom volume; optionally section, jitter, shear and noise it.
    Phantom(PhantomArgs),
    /// Estimate a foreground mask for a volume.
    Mask(MaskArgs),
    /// Atlas-free restacking of a section stack.
    Restack(RestackArgs),
    /// Dense diffeomorphic matching of a template onto a stack (fixed motions).
    Map(MapArgs),
    /// Full joint estimation (alternating matching and restacking).
    Joint(JointArgs),
    /// Monte-Carlo estimator statistics.
    Simulate(SimulateArgs),
    /// Transport a label volume through a saved displacement field.
    Labels(LabelsArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration (flags override individual fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomized steps.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: HISTOSTACK_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_parser = ["curved", "grayscale"], default_value = "curved")]
    kind: String,
    /// Volume dims as NX,NY,NZ.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [64usize, 64, 48])]
    dims: Vec<usize>,
    /// Isotropic voxel size (mm).
    #[arg(long, default_value_t = 0.04)]
    spacing: f64,
    /// Centerline length (mm).
    #[arg(long, default_value_t = 1.4)]
    length: f64,
    /// Tube radius (mm).
    #[arg(long, default_value_t = 0.36)]
    tube_radius: f64,
    /// Total bend angle (radians); 0 = straight cylinder.
    #[arg(long, default_value_t = 1.6)]
    bend_angle: f64,
    /// Also section the phantom into a stack.
    #[arg(long)]
    section: bool,
    /// Translation jitter sigma (pixels).
    #[arg(long, default_value_t = 0.0)]
    jitter_sigma_t: f64,
    /// Rotation jitter sigma (in --theta-unit).
    #[arg(long, default_value_t = 0.0)]
    jitter_sigma_theta: f64,
    #[arg(long, value_parser = ["degrees", "radians"], default_value = "degrees")]
    theta_unit: String,
    /// Pixel noise sigma.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Per-section shear offset (pixels) applied to the volume before sectioning.
    #[arg(long, default_value_t = 0.0)]
    shear: f64,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input volume (NRRD).
    #[arg(long)]
    input: PathBuf,
    /// Explicit inlier band width (intensity units).
    #[arg(long)]
    band: Option<f64>,
    #[arg(long, default_value_t = 64)]
    ransac_iters: usize,
    #[arg(long, default_value_t = 1)]
    open_radius: usize,
    #[arg(long, default_value_t = 1)]
    close_radius: usize,
}

#[derive(Args)]
struct RestackArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stack manifest (JSON).
    #[arg(long)]
    stack: PathBuf,
    /// Rotation prior sigma (degrees).
    #[arg(long)]
    sigma_theta: Option<f64>,
    /// Translation prior sigma (mm).
    #[arg(long)]
    sigma_t: Option<f64>,
    /// Smoothness weight parameter (weight = 1/sigma_jj^2).
    #[arg(long)]
    sigma_jj: Option<f64>,
    /// Estimator-side Gaussian prefilter (pixels).
    #[arg(long)]
    presmooth: Option<f64>,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Template volume (NRRD).
    #[arg(long)]
    template: PathBuf,
    /// Target stack manifest (JSON).
    #[arg(long)]
    stack: PathBuf,
    /// Second-channel template (e.g. a mask volume).
    #[arg(long)]
    template_mask: Option<PathBuf>,
    /// Second-channel target stack manifest.
    #[arg(long)]
    stack_mask: Option<PathBuf>,
    /// Weight of the second channel.
    #[arg(long, default_value_t = 1.0)]
    mask_weight: f64,
    /// Cost-mask volume: voxels below 0.5 are excluded from the data term.
    #[arg(long)]
    cost_mask: Option<PathBuf>,
}

#[derive(Args)]
struct JointArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    stack: PathBuf,
    #[arg(long, value_parser = ["atlas-free", "atlas-informed"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["identity", "coarse-rigid-3d"])]
    init: Option<String>,
    #[arg(long)]
    cost_mask: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Template volume; omitted = generate the phantom from config/defaults.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Noise sigmas, comma separated.
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    #[arg(long, value_parser = ["atlas-free", "atlas-informed"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["none", "shear", "random-diffeo"])]
    deformation: Option<String>,
}

#[derive(Args)]
struct LabelsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Label volume (NRRD, content: label).
    #[arg(long)]
    labels: PathBuf,
    /// Directory holding inverse_disp_{x,y,z}.nrrd (written by map/joint).
    #[arg(long)]
    displacement: PathBuf,
}

/// Serialized per-section motions.
#[derive(Serialize, Deserialize)]
struct MotionsFile {
    schema_version: u32,
    motions: Vec<RigidMotion>,
}

/// Entry point used by `main` and by tests; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap's help/version "errors" exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let common = match &cli.command {
        Command::Phantom(a) => a.common.clone(),
        Command::Mask(a) => a.common.clone(),
        Command::Restack(a) => a.common.clone(),
        Command::Map(a) => a.common.clone(),
        Command::Joint(a) => a.common.clone(),
        Command::Simulate(a) => a.common.clone(),
        Command::Labels(a) => a.common.clone(),
    };
    let threads = common.threads.or_else(|| {
        std::env::var("HISTOSTACK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });

    let run = || -> crate::Result<()> {
        let started = std::time::Instant::now();
        if let Some(n) = threads {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| execute(&cli.command, threads))?;
        } else {
            execute(&cli.command, threads)?;
        }
        eprintln!("histostack: done in {:.2?}", started.elapsed());
        Ok(())
    };

    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("histostack: error: {e}");
            match e {
                Error::SolverStall { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn execute(cmd: &Command, threads: Option<usize>) -> crate::Result<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(a, threads),
        Command::Mask(a) => cmd_mask(a, threads),
        Command::Restack(a) => cmd_restack(a, threads),
        Command::Map(a) => cmd_map(a, threads),
        Command::Joint(a) => cmd_joint(a, threads),
        Command::Simulate(a) => cmd_simulate(a, threads),
        Command::Labels(a) => cmd_labels(a, threads),
    }
}

fn ensure_out(dir: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn load_config(common: &CommonArgs) -> crate::Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::from_file(path),
        None => Ok(RunConfig::empty()),
    }
}

fn threads_for_report(threads: Option<usize>) -> usize {
    threads.unwrap_or(0) // 0 = library default
}

/// Estimator defaults for a given stack geometry; a config file overrides.
fn default_joint_config(pixel_spacing: f64) -> JointConfig {
    JointConfig {
        match_settings: MatchSettings {
            kernel: KernelSpec {
                mode: crate::kernel::KernelMode::FourierOperator,
                length_scale: 10.0 * pixel_spacing,
                power: 2,
            },
            timesteps: 5,
            alpha: 100.0,
            step_size: 0.2,
            max_iters: 30,
            rel_tol: 1e-5,
        },
        prior: RigidPrior {
            sigma_theta: 10f64.to_radians(),
            sigma_t: 6.0 * pixel_spacing,
            sigma_jj: 0.5,
        },
        rigid: RigidOptConfig {
            step_size: 0.3,
            max_iters: 400,
            rel_tol: 1e-8,
        },
        outer_iters: 4,
        outer_rel_tol: 1e-4,
        mode: EstimatorMode::AtlasInformed,
        init: InitMode::Identity,
        presmooth_sigma: 1.0,
    }
}

fn parse_mode(s: &str) -> EstimatorMode {
    match s {
        "atlas-free" => EstimatorMode::AtlasFree,
        _ => EstimatorMode::AtlasInformed,
    }
}

fn write_motions(path: &Path, motions: &[RigidMotion]) -> crate::Result<()> {
    let file = MotionsFile {
        schema_version: SCHEMA_VERSION,
        motions: motions.to_vec(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_displacement(dir: &Path, prefix: &str, field: &VectorField3D) -> crate::Result<Vec<String>> {
    let mut names = Vec::new();
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let mut v = Volume::zeros(field.dims, field.spacing, field.origin, VolumeKind::Intensity);
        v.samples_mut().copy_from_slice(&field.components[axis]);
        let file = format!("{prefix}_{name}.nrrd");
        nrrd::write_volume(&dir.join(&file), &v)?;
        names.push(file);
    }
    Ok(names)
}

fn read_displacement(dir: &Path, prefix: &str) -> crate::Result<VectorField3D> {
    let mut components = Vec::new();
    let mut geom: Option<([usize; 3], [f64; 3], [f64; 3])> = None;
    for name in ["x", "y", "z"] {
        let v = nrrd::read_volume(&dir.join(format!("{prefix}_{name}.nrrd")))?;
        match geom {
            None => geom = Some((v.dims, v.spacing, v.origin)),
            Some((d, ..)) if d != v.dims => {
                return Err(Error::DimMismatch("displacement components disagree".into()))
            }
            _ => {}
        }
        components.push(v.samples().to_vec());
    }
    let (dims, spacing, origin) = geom.expect("three components read");
    Ok(VectorField3D {
        dims,
        spacing,
        origin,
        components: [
            components[0].clone(),
            components[1].clone(),
            components[2].clone(),
        ],
    })
}

fn cmd_phantom(a: &PhantomArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let mut config = load_config(&a.common)?;
    let phantom_cfg = config.phantom.clone().unwrap_or(PhantomConfig {
        kind: if a.kind == "grayscale" {
            PhantomKind::Grayscale
        } else {
            PhantomKind::Curved
        },
        dims: [a.dims[0], a.dims[1], a.dims[2]],
        spacing: a.spacing,
        bend: BendParams {
            length: a.length,
            tube_radius: a.tube_radius,
            bend_angle: a.bend_angle,
        },
    });
    let spacing = [phantom_cfg.spacing; 3];
    let volume = match phantom_cfg.kind {
        PhantomKind::Curved => make_curved_phantom(phantom_cfg.dims, spacing, &phantom_cfg.bend)?,
        PhantomKind::Grayscale => {
            make_grayscale_phantom(phantom_cfg.dims, spacing, &phantom_cfg.bend)?
        }
    };
    config.phantom = Some(phantom_cfg.clone());

    let mut report = RunReport::new("phantom", a.common.seed, threads_for_report(threads), config);
    let sheared;
    let volume_out = if a.shear != 0.0 {
        sheared = shear_volume(&volume, a.shear);
        &sheared
    } else {
        &volume
    };
    nrrd::write_volume(&a.common.out.join("phantom.nrrd"), volume_out)?;
    report.outputs.push("phantom.nrrd".into());

    if a.section || a.jitter_sigma_t > 0.0 || a.jitter_sigma_theta > 0.0 || a.noise > 0.0 {
        let stack = section_volume(volume_out, volume_out.spacing[2])?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
        let sigma_theta_rad = if a.theta_unit == "radians" {
            a.jitter_sigma_theta
        } else {
            a.jitter_sigma_theta.to_radians()
        };
        let (jittered, motions) =
            jitter_stack(&stack, a.jitter_sigma_t, sigma_theta_rad, &mut rng);
        let observed = add_noise(&jittered, a.noise, &mut rng);
        let manifest = io::write_stack(&a.common.out.join("stack"), "sec", &observed)?;
        report
            .outputs
            .push(format!("stack/{}", manifest.file_name().unwrap().to_string_lossy()));
        write_motions(&a.common.out.join("truth_motions.json"), &motions)?;
        report.outputs.push("truth_motions.json".into());
    }

    report.write(&a.common.out.join("report.json"))
}

fn cmd_mask(a: &MaskArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let mut config = load_config(&a.common)?;
    let params = config.mask.unwrap_or(MaskParams {
        ransac_iters: a.ransac_iters,
        inlier_band: a.band,
        open_radius: a.open_radius,
        close_radius: a.close_radius,
    });
    config.mask = Some(params);
    let volume = nrrd::read_volume(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let threshold = estimate_background_threshold(&volume, &params, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mask = make_brain_mask(&volume, &params, &mut rng)?;
    let foreground: usize = mask.samples().iter().filter(|&&v| v > 0.0).count();

    let mut report = RunReport::new("mask", a.common.seed, threads_for_report(threads), config);
    if foreground == 0 {
        report.warnings.push("mask is empty after opening".into());
        eprintln!("histostack: warning: mask is empty after opening");
    }
    nrrd::write_volume(&a.common.out.join("mask.nrrd"), &mask)?;
    report.outputs.push("mask.nrrd".into());
    report.energies = Some(serde_json::json!({
        "threshold": threshold,
        "foreground_voxels": foreground,
    }));
    report.write(&a.common.out.join("report.json"))
}

fn cmd_restack(a: &RestackArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let mut config = load_config(&a.common)?;
    let stack = io::read_stack(&a.stack)?;
    let px = stack.spacing()[0];
    let mut joint_cfg = config.joint.clone().unwrap_or_else(|| default_joint_config(px));
    if let Some(v) = a.sigma_theta {
        joint_cfg.prior.sigma_theta = v.to_radians();
    }
    if let Some(v) = a.sigma_t {
        joint_cfg.prior.sigma_t = v;
    }
    if let Some(v) = a.sigma_jj {
        joint_cfg.prior.sigma_jj = v;
    }
    if let Some(v) = a.presmooth {
        joint_cfg.presmooth_sigma = v;
    }
    joint_cfg.mode = EstimatorMode::AtlasFree;
    config.joint = Some(joint_cfg.clone());

    // Restack phase only: optimize under the smoothness prior.
    let work_stack = if joint_cfg.presmooth_sigma > 0.0 {
        SectionStack {
            sections: stack
                .sections
                .iter()
                .map(|s| crate::joint::gaussian_smooth_section(s, joint_cfg.presmooth_sigma))
                .collect(),
            z_positions: stack.z_positions.clone(),
            delta: stack.delta,
        }
    } else {
        stack.clone()
    };
    let init = vec![RigidMotion::IDENTITY; stack.len()];
    let state = optimize_rigid(
        &work_stack,
        &init,
        &joint_cfg.prior,
        None,
        0.0,
        None,
        &joint_cfg.rigid,
    )?;
    let reconstructed = restack(&stack, &state.motions)?;

    let mut report = RunReport::new("restack", a.common.seed, threads_for_report(threads), config);
    write_motions(&a.common.out.join("motions.json"), &state.motions)?;
    nrrd::write_volume(&a.common.out.join("restacked.nrrd"), &reconstructed)?;
    report.outputs.push("motions.json".into());
    report.outputs.push("restacked.nrrd".into());
    report.work.rigid_iterations = state.trace.len() - 1;
    report.energies = Some(serde_json::json!({
        "initial_total": state.trace.first().map(|t| t.total),
        "final_total": state.trace.last().map(|t| t.total),
        "termination": format!("{:?}", state.termination),
    }));
    report.write(&a.common.out.join("report.json"))
}

fn cmd_map(a: &MapArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let mut config = load_config(&a.common)?;
    let template = nrrd::read_volume(&a.template)?;
    let stack = io::read_stack(&a.stack)?;
    let px = stack.spacing()[0];
    let joint_cfg = config.joint.clone().unwrap_or_else(|| default_joint_config(px));
    config.joint = Some(joint_cfg.clone());

    let mut channels = vec![MatchChannel {
        template: template.clone(),
        target: stack,
        weight: 1.0,
    }];
    match (&a.template_mask, &a.stack_mask) {
        (Some(tm), Some(sm)) => {
            channels.push(MatchChannel {
                template: nrrd::read_volume(tm)?,
                target: io::read_stack(sm)?,
                weight: a.mask_weight,
            });
        }
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "--template-mask and --stack-mask must be given together".into(),
            ))
        }
    }
    let cost_mask = match &a.cost_mask {
        Some(p) => Some(nrrd::read_volume(p)?),
        None => None,
    };
    let match_cfg = MatchConfig {
        kernel: joint_cfg.match_settings.kernel,
        timesteps: joint_cfg.match_settings.timesteps,
        alpha: joint_cfg.match_settings.alpha,
        step_size: joint_cfg.match_settings.step_size,
        max_iters: joint_cfg.match_settings.max_iters,
        rel_tol: joint_cfg.match_settings.rel_tol,
        channels,
        cost_mask,
    };
    let result = lddmm_match(&match_cfg, None)?;
    let deformed = crate::grid::warp_volume(&template, &result.diffeo.inverse_disp)?;

    let mut report = RunReport::new("map", a.common.seed, threads_for_report(threads), config);
    nrrd::write_volume(&a.common.out.join("deformed_atlas.nrrd"), &deformed)?;
    report.outputs.push("deformed_atlas.nrrd".into());
    for f in write_displacement(&a.common.out, "inverse_disp", &result.diffeo.inverse_disp)? {
        report.outputs.push(f);
    }
    for f in write_displacement(&a.common.out, "forward_disp", &result.diffeo.forward_disp)? {
        report.outputs.push(f);
    }
    report.work.match_iterations = result.trace.len() - 1;
    report.energies = Some(serde_json::json!({
        "initial": result.trace.first().map(|t| t.total),
        "final": result.trace.last().map(|t| t.total),
        "final_data": result.final_entry().data,
        "path_energy": result.diffeo.path_energy,
        "termination": format!("{:?}", result.termination),
    }));
    report.write(&a.common.out.join("report.json"))
}

fn cmd_joint(a: &JointArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let mut config = load_config(&a.common)?;
    let template = nrrd::read_volume(&a.template)?;
    let stack = io::read_stack(&a.stack)?;
    let px = stack.spacing()[0];
    let mut joint_cfg = config.joint.clone().unwrap_or_else(|| default_joint_config(px));
    if let Some(mode) = &a.mode {
        joint_cfg.mode = parse_mode(mode);
    }
    if let Some(init) = &a.init {
        joint_cfg.init = if init == "coarse-rigid-3d" {
            InitMode::CoarseRigid3d
        } else {
            InitMode::Identity
        };
    }
    config.joint = Some(joint_cfg.clone());
    let cost_mask = match &a.cost_mask {
        Some(p) => Some(nrrd::read_volume(p)?),
        None => None,
    };

    let result = joint_estimate(&template, &stack, &joint_cfg, cost_mask.as_ref())?;

    let mut report = RunReport::new("joint", a.common.seed, threads_for_report(threads), config);
    write_motions(&a.common.out.join("motions.json"), &result.motions.motions)?;
    nrrd::write_volume(&a.common.out.join("reconstructed.nrrd"), &result.reconstructed)?;
    nrrd::write_volume(&a.common.out.join("deformed_atlas.nrrd"), &result.deformed_atlas)?;
    report.outputs.push("motions.json".into());
    report.outputs.push("reconstructed.nrrd".into());
    report.outputs.push("deformed_atlas.nrrd".into());
    for f in write_displacement(
        &a.common.out,
        "inverse_disp",
        &result.match_result.diffeo.inverse_disp,
    )? {
        report.outputs.push(f);
    }
    report.work.outer_iterations = result.outer_trace.len().saturating_sub(1);
    report.work.match_iterations = result.match_result.trace.len().saturating_sub(1);
    report.work.rigid_iterations = result.motions.trace.len().saturating_sub(1);
    report.energies = Some(serde_json::json!({
        "outer_initial": result.outer_trace.first().map(|t| t.energy.total),
        "outer_final": result.outer_trace.last().map(|t| t.energy.total),
        "outer_trace": result
            .outer_trace
            .iter()
            .map(|t| t.energy.total)
            .collect::<Vec<_>>(),
        "path_energy": result.match_result.diffeo.path_energy,
    }));
    report.write(&a.common.out.join("report.json"))
}

fn cmd_simulate(a: &SimulateArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let mut config = load_config(&a.common)?;
    let phantom_cfg = config.phantom.clone().unwrap_or(PhantomConfig {
        kind: PhantomKind::Grayscale,
        dims: [64, 64, 48],
        spacing: 0.04,
        bend: BendParams {
            length: 1.4,
            tube_radius: 0.36,
            bend_angle: 1.6,
        },
    });
    let template = match &a.template {
        Some(p) => nrrd::read_volume(p)?,
        None => {
            let spacing = [phantom_cfg.spacing; 3];
            match phantom_cfg.kind {
                PhantomKind::Curved => {
                    make_curved_phantom(phantom_cfg.dims, spacing, &phantom_cfg.bend)?
                }
                PhantomKind::Grayscale => {
                    make_grayscale_phantom(phantom_cfg.dims, spacing, &phantom_cfg.bend)?
                }
            }
        }
    };
    if a.template.is_none() {
        config.phantom = Some(phantom_cfg.clone());
    }
    let px = template.spacing[0];
    let mut sim = config.sim.clone().unwrap_or(SimConfig {
        seed: a.common.seed,
        jitter_sigma_t: 6.0,
        jitter_sigma_theta: 10.0,
        theta_unit: ThetaUnit::Degrees,
        noise_sigmas: vec![0.1],
        shear_offset: 0.25,
        trials: 100,
        deformation: DeformationKind::None,
        diffeo_amplitude: 2.0,
    });
    sim.seed = a.common.seed;
    if let Some(t) = a.trials {
        sim.trials = t;
    }
    if let Some(n) = &a.noise {
        sim.noise_sigmas = n.clone();
    }
    if let Some(d) = &a.deformation {
        sim.deformation = match d.as_str() {
            "shear" => DeformationKind::Shear,
            "random-diffeo" => DeformationKind::RandomDiffeo,
            _ => DeformationKind::None,
        };
    }
    let mut joint_cfg = config.joint.clone().unwrap_or_else(|| default_joint_config(px));
    if let Some(m) = &a.mode {
        joint_cfg.mode = parse_mode(m);
    }
    config.sim = Some(sim.clone());
    config.joint = Some(joint_cfg.clone());

    let out = run_trials(&template, &sim, &joint_cfg, threads)?;

    let mut report = RunReport::new("simulate", a.common.seed, threads_for_report(threads), config);
    let write_csv = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> crate::Result<String> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::io(name.to_string(), e))?;
        let path = a.common.out.join(name);
        std::fs::write(&path, buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(name.to_string())
    };
    report.outputs.push(write_csv("records.csv", &|b| {
        simulate::write_records_csv(b, &out, px, false)
    })?);
    report.outputs.push(write_csv("records_raw.csv", &|b| {
        simulate::write_records_csv(b, &out, px, true)
    })?);
    report.outputs.push(write_csv("summary.csv", &|b| {
        simulate::write_summary_csv(b, &out.summary)
    })?);
    report.outputs.push(write_csv("summary_raw.csv", &|b| {
        simulate::write_summary_csv(b, &out.summary_raw)
    })?);
    report.work.trials = out.records.len();
    report.work.trial_failures = out.failures;
    report.write(&a.common.out.join("report.json"))
}

fn cmd_labels(a: &LabelsArgs, threads: Option<usize>) -> crate::Result<()> {
    ensure_out(&a.common.out)?;
    let config = load_config(&a.common)?;
    let labels = nrrd::read_volume(&a.labels)?;
    let inverse = read_displacement(&a.displacement, "inverse_disp")?;
    let diffeo = Diffeomorphism {
        forward_disp: VectorField3D::zeros(inverse.dims, inverse.spacing, inverse.origin),
        inverse_disp: inverse,
        path_energy: 0.0,
    };
    let out = transport_labels(&labels, &diffeo)?;
    let mut report = RunReport::new("labels", a.common.seed, threads_for_report(threads), config);
    nrrd::write_volume(&a.common.out.join("labels_transported.nrrd"), &out)?;
    report.outputs.push("labels_transported.nrrd".into());
    report.write(&a.common.out.join("report.json"))
}
