//! Phantom generation, synthetic sectioning, and the Monte-Carlo harness
//! for estimator bias/variance statistics.
//!
//! A trial deforms (or shears) the template, sections it, jitters every
//! section with Gaussian rigid motions, adds pixel noise, runs the chosen
//! estimator, and records true vs estimated motion parameters. Errors are
//! reported after gauge fixing (removing the best-fit global pose, since
//! only relative alignment is identifiable); the raw table is kept as well.
//!
//! Randomness is fully deterministic: every trial derives its own counter
//! substream from `seed ^ trial_index`, and noise streams additionally mix
//! in the noise-level index, so results are identical regardless of how
//! trials are scheduled across threads.

use crate::error::{Error, Result};
use crate::flow::{integrate_displacements, Diffeomorphism, FlowDirection, VelocityPath};
use crate::grid::{warp_volume, Section, SectionStack, VectorField3D, Volume, VolumeKind};
use crate::joint::{joint_estimate, JointConfig};
use crate::kernel::{KernelOperator, KernelSpec};
use crate::lddmm::jacobian_determinant;
use crate::restack::{factor_global_pose, RigidMotion};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Angle unit of the jitter rotation sigma in configs and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaUnit {
    Degrees,
    Radians,
}

/// Template deformation applied before sectioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeformationKind {
    None,
    Shear,
    RandomDiffeo,
}

/// Simulation settings for one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Translation jitter sigma, in pixels.
    pub jitter_sigma_t: f64,
    /// Rotation jitter sigma, in `theta_unit`.
    pub jitter_sigma_theta: f64,
    #[serde(default = "default_theta_unit")]
    pub theta_unit: ThetaUnit,
    /// Pixel-noise levels swept by the harness (images in [0,1]).
    pub noise_sigmas: Vec<f64>,
    /// Per-section shear offset in pixels (deformation = shear).
    #[serde(default)]
    pub shear_offset: f64,
    pub trials: usize,
    pub deformation: DeformationKind,
    /// Peak displacement of the random diffeomorphism, in pixels.
    #[serde(default = "default_diffeo_amplitude")]
    pub diffeo_amplitude: f64,
}

fn default_theta_unit() -> ThetaUnit {
    ThetaUnit::Degrees
}

fn default_diffeo_amplitude() -> f64 {
    2.0
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_sigma_t < 0.0 || self.jitter_sigma_theta < 0.0 {
            return Err(Error::InvalidGeometry("jitter sigmas must be >= 0".into()));
        }
        if self.noise_sigmas.is_empty() || self.noise_sigmas.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidGeometry(
                "need at least one nonnegative noise sigma".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::InvalidGeometry("trials must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sigma_theta_radians(&self) -> f64 {
        match self.theta_unit {
            ThetaUnit::Degrees => self.jitter_sigma_theta.to_radians(),
            ThetaUnit::Radians => self.jitter_sigma_theta,
        }
    }
}

/// Tube geometry of the curved phantom: a circular-arc centerline of the
/// given length, bent by `bend_angle` in the x-z plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BendParams {
    pub length: f64,
    pub tube_radius: f64,
    /// Total bend angle in radians; 0 gives a straight cylinder along z.
    pub bend_angle: f64,
}

/// Binary circular-arc tube, symmetric under reflection through the arc
/// mid-plane z = center.
pub fn make_curved_phantom(
    dims: [usize; 3],
    spacing: [f64; 3],
    bend: &BendParams,
) -> Result<Volume> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidGeometry(format!(
            "phantom dims must be >= 16 per axis, got {dims:?}"
        )));
    }
    let c = [
        0.5 * (dims[0] - 1) as f64 * spacing[0],
        0.5 * (dims[1] - 1) as f64 * spacing[1],
        0.5 * (dims[2] - 1) as f64 * spacing[2],
    ];
    let r = bend.tube_radius;
    let half = [
        0.5 * (dims[0] - 1) as f64 * spacing[0],
        0.5 * (dims[1] - 1) as f64 * spacing[1],
        0.5 * (dims[2] - 1) as f64 * spacing[2],
    ];
    if bend.bend_angle == 0.0 {
        if r > half[0] || r > half[1] || 0.5 * bend.length > half[2] {
            return Err(Error::TubeExitsDomain(format!(
                "cylinder radius {r} / half-length {} vs half-extent {half:?}",
                0.5 * bend.length
            )));
        }
        return Ok(Volume::from_fn(
            dims,
            spacing,
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |x, y, z| {
                let in_plane = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
                if in_plane <= r && (z - c[2]).abs() <= 0.5 * bend.length {
                    1.0
                } else {
                    0.0
                }
            },
        ));
    }

    let arc_radius = bend.length / bend.bend_angle;
    let beta = 0.5 * bend.bend_angle;
    // Arc center sits at (c_x + arc_radius, c_z); the tube bends toward +x.
    let x_excursion = arc_radius * (1.0 - beta.cos()) + r;
    let z_excursion = arc_radius * beta.sin() + r;
    if x_excursion > half[0] || r > half[1] || z_excursion > half[2] {
        return Err(Error::TubeExitsDomain(format!(
            "bend excursion ({x_excursion:.2}, {r:.2}, {z_excursion:.2}) vs half-extent {half:?}"
        )));
    }
    Ok(Volume::from_fn(
        dims,
        spacing,
        [0.0, 0.0, 0.0],
        VolumeKind::Intensity,
        |x, y, z| {
            let dx = x - (c[0] + arc_radius);
            let dz = z - c[2];
            let rho = (dx * dx + dz * dz).sqrt();
            let phi = dz.atan2(-dx);
            if phi.abs() <= beta {
                let d2 = (rho - arc_radius).powi(2) + (y - c[1]).powi(2);
                if d2 <= r * r {
                    return 1.0;
                }
            }
            0.0
        },
    ))
}

/// Separable 3D Gaussian filter (sigma per axis in voxels, truncated at
/// 3 sigma, window renormalized at the boundary).
pub fn gaussian_smooth_volume(v: &Volume, sigma_vox: [f64; 3]) -> Volume {
    let mut out = v.clone();
    for axis in 0..3 {
        let sigma = sigma_vox[axis];
        if sigma <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let weights: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d as f64 * d as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let src = out.clone();
        let [nx, ny, nz] = v.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (w, d) in weights.iter().zip(-radius..=radius) {
                        let (ii, jj, kk) = match axis {
                            0 => (i as isize + d, j as isize, k as isize),
                            1 => (i as isize, j as isize + d, k as isize),
                            _ => (i as isize, j as isize, k as isize + d),
                        };
                        if ii < 0
                            || jj < 0
                            || kk < 0
                            || ii >= nx as isize
                            || jj >= ny as isize
                            || kk >= nz as isize
                        {
                            continue;
                        }
                        acc += w * src.at(ii as usize, jj as usize, kk as usize);
                        wsum += w;
                    }
                    out.set(i, j, k, acc / wsum);
                }
            }
        }
    }
    out
}

/// Grayscale variant of the curved phantom: the smoothed tube plus
/// deterministic interior bumps, giving the contour lines that make
/// matching and rotation estimation well-posed. Samples are snapped to f32
/// so volumes survive float32 round trips bit-exactly.
pub fn make_grayscale_phantom(
    dims: [usize; 3],
    spacing: [f64; 3],
    bend: &BendParams,
) -> Result<Volume> {
    let binary = make_curved_phantom(dims, spacing, bend)?;
    let sigma_vox = 1.8;
    let mut v = gaussian_smooth_volume(&binary, [sigma_vox; 3]);
    let c = [
        0.5 * (dims[0] - 1) as f64 * spacing[0],
        0.5 * (dims[1] - 1) as f64 * spacing[1],
        0.5 * (dims[2] - 1) as f64 * spacing[2],
    ];
    // Centerline point at arc parameter phi (phi = 0 is the mid-plane).
    let centerline = |phi: f64| -> [f64; 3] {
        if bend.bend_angle == 0.0 {
            [c[0], c[1], c[2] + phi * bend.length / 2.0]
        } else {
            let arc_radius = bend.length / bend.bend_angle;
            let a = phi * 0.5 * bend.bend_angle;
            [
                c[0] + arc_radius * (1.0 - a.cos()),
                c[1],
                c[2] + arc_radius * a.sin(),
            ]
        }
    };
    let r = bend.tube_radius;
    // Off-axis bumps break the tube's rotational symmetry.
    let bumps: Vec<([f64; 3], f64, f64)> = vec![
        (centerline(-0.6), 0.45, 0.45 * r),
        (centerline(0.0), 0.60, 0.40 * r),
        (centerline(0.55), 0.40, 0.50 * r),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (mut p, a, s))| {
        // Push each bump off the centerline in a different direction.
        match i {
            0 => p[1] += 0.45 * r,
            1 => p[0] += 0.45 * r,
            _ => p[1] -= 0.40 * r,
        }
        (p, a, s)
    })
    .collect();
    let [nx, ny, nz] = dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = v.position(i, j, k);
                let mut val = 0.55 * v.at(i, j, k);
                for (bp, a, s) in &bumps {
                    let d2 = (p[0] - bp[0]).powi(2) + (p[1] - bp[1]).powi(2)
                        + (p[2] - bp[2]).powi(2);
                    val += a * (-d2 / (2.0 * s * s)).exp();
                }
                v.set(i, j, k, (val.min(1.0) as f32) as f64);
            }
        }
    }
    Ok(v)
}

/// Extracts z slices at spacing `delta` (must be an integer multiple of the
/// voxel z-spacing) into a stack with alpha 1 and no masks.
pub fn section_volume(v: &Volume, delta: f64) -> Result<SectionStack> {
    let sz = v.spacing[2];
    let ratio = delta / sz;
    let step = ratio.round();
    if step < 1.0 || (ratio - step).abs() > 1e-9 {
        return Err(Error::InvalidGeometry(format!(
            "delta {delta} is not an integer multiple of the voxel z-spacing {sz}"
        )));
    }
    let step = step as usize;
    let [nx, ny, nz] = v.dims;
    let mut sections = Vec::new();
    let mut z_positions = Vec::new();
    let mut k = 0;
    while k < nz {
        let mut s = Section::zeros([nx, ny], [v.spacing[0], v.spacing[1]]);
        for j in 0..ny {
            for i in 0..nx {
                let idx = s.idx(i, j);
                s.samples[idx] = v.at(i, j, k);
            }
        }
        sections.push(s);
        z_positions.push(v.origin[2] + k as f64 * sz);
        k += step;
    }
    SectionStack::new(sections, z_positions, delta)
}

/// Applies i.i.d. Gaussian rigid jitter to every section; returns the
/// jittered stack and the motions that were applied.
pub fn jitter_stack(
    stack: &SectionStack,
    sigma_t_px: f64,
    sigma_theta_rad: f64,
    rng: &mut impl Rng,
) -> (SectionStack, Vec<RigidMotion>) {
    let px = stack.spacing()[0];
    let t_dist = Normal::new(0.0, sigma_t_px.max(0.0) * px).unwrap();
    let r_dist = Normal::new(0.0, sigma_theta_rad.max(0.0)).unwrap();
    let motions: Vec<RigidMotion> = (0..stack.len())
        .map(|_| {
            let theta = if sigma_theta_rad > 0.0 {
                r_dist.sample(rng)
            } else {
                0.0
            };
            let (tx, ty) = if sigma_t_px > 0.0 {
                (t_dist.sample(rng), t_dist.sample(rng))
            } else {
                (0.0, 0.0)
            };
            RigidMotion::new(theta, tx, ty)
        })
        .collect();
    let sections = stack
        .sections
        .iter()
        .zip(&motions)
        .map(|(s, m)| {
            if *m == RigidMotion::IDENTITY {
                s.clone()
            } else {
                crate::restack::apply_rigid(s, m)
            }
        })
        .collect();
    (
        SectionStack {
            sections,
            z_positions: stack.z_positions.clone(),
            delta: stack.delta,
        },
        motions,
    )
}

/// Adds i.i.d. pixel noise `N(0, sigma^2)` to every section (no clipping).
pub fn add_noise(stack: &SectionStack, sigma: f64, rng: &mut impl Rng) -> SectionStack {
    if sigma <= 0.0 {
        return stack.clone();
    }
    let dist = Normal::new(0.0, sigma).unwrap();
    let sections = stack
        .sections
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for v in out.samples.iter_mut() {
                *v += dist.sample(rng);
            }
            out
        })
        .collect();
    SectionStack {
        sections,
        z_positions: stack.z_positions.clone(),
        delta: stack.delta,
    }
}

/// Shears a volume by translating slice k by `(k * offset, k * offset)`
/// pixels (bilinear resampling, clamped).
pub fn shear_volume(v: &Volume, offset_px: f64) -> Volume {
    let [nx, ny, nz] = v.dims;
    let mut out = v.clone();
    for k in 0..nz {
        let shift = [
            k as f64 * offset_px * v.spacing[0],
            k as f64 * offset_px * v.spacing[1],
        ];
        for j in 0..ny {
            for i in 0..nx {
                let p = v.position(i, j, k);
                let q = [p[0] - shift[0], p[1] - shift[1], p[2]];
                out.set(i, j, k, v.sample_trilinear_unchecked(q));
            }
        }
    }
    out
}

/// Draws a random diffeomorphism: white-noise momentum smoothed by the
/// kernel, scaled to the requested peak displacement, then integrated as a
/// constant-in-time flow with T = 10 steps. Retries with fresh noise up to
/// 5 times if the Jacobian-determinant check fails.
pub fn random_diffeomorphism(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    amplitude_mm: f64,
    kernel: &KernelSpec,
    rng: &mut impl Rng,
) -> Result<Diffeomorphism> {
    if amplitude_mm == 0.0 {
        return Ok(Diffeomorphism::identity(dims, spacing, origin));
    }
    let op = KernelOperator::new(kernel, dims, spacing)?;
    for _attempt in 0..5 {
        let mut noise = VectorField3D::zeros(dims, spacing, origin);
        for comp in noise.components.iter_mut() {
            for v in comp.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut vel = op.smooth_field(&noise)?;
        let m = vel.max_norm();
        if m == 0.0 {
            continue;
        }
        vel.scale(amplitude_mm / m);

        // Refine the velocity scale so the integrated peak displacement
        // lands on the requested amplitude.
        let mut diffeo = None;
        for _ in 0..3 {
            let path = VelocityPath {
                fields: vec![vel.clone(); 10],
            };
            let (fwd, inv) = integrate_displacements(&path, FlowDirection::Both);
            let peak = fwd.max_norm();
            if peak == 0.0 {
                break;
            }
            let d = Diffeomorphism {
                forward_disp: fwd,
                inverse_disp: inv,
                path_energy: op.v_norm_sq(&vel)?,
            };
            if (peak - amplitude_mm).abs() <= 0.01 * amplitude_mm {
                diffeo = Some(d);
                break;
            }
            vel.scale(amplitude_mm / peak);
            diffeo = Some(d);
        }
        if let Some(d) = diffeo {
            let det = jacobian_determinant(&d);
            let min_det = det.samples().iter().cloned().fold(f64::INFINITY, f64::min);
            if min_det > 0.0 {
                return Ok(d);
            }
        }
    }
    Err(Error::DiffeoRetryExhausted(5))
}

/// Standard 64-bit mixer used to derive independent substreams.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// One simulated estimation: per-section truth and estimates (truth is the
/// recovery motion, i.e. the inverse of the applied jitter).
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub truth: Vec<RigidMotion>,
    pub estimated: Vec<RigidMotion>,
    /// Estimates after removing the best-fit global pose.
    pub gauged: Vec<RigidMotion>,
    pub failed: bool,
}

/// Aggregated statistics for one parameter at one noise level. Angles are
/// degrees, translations pixels.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub param: &'static str,
    pub noise_sigma: f64,
    pub rmse: f64,
    pub bias: f64,
    pub std: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone)]
pub struct TrialsOutput {
    pub records: Vec<TrialRecord>,
    /// Gauge-fixed statistics.
    pub summary: Vec<SummaryRow>,
    /// Statistics of the raw (un-gauged) estimates.
    pub summary_raw: Vec<SummaryRow>,
    pub failures: usize,
    pub mode_label: String,
}

/// Runs the Monte-Carlo harness: `trials` estimations per noise level.
pub fn run_trials(
    template: &Volume,
    sim: &SimConfig,
    estimator: &JointConfig,
    threads: Option<usize>,
) -> Result<TrialsOutput> {
    sim.validate()?;
    estimator.validate()?;
    let px = template.spacing[0];
    let sigma_theta = sim.sigma_theta_radians();

    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (li, _) in sim.noise_sigmas.iter().enumerate() {
        for t in 0..sim.trials {
            jobs.push((li, t));
        }
    }

    let run_one = |&(li, trial): &(usize, usize)| -> TrialRecord {
        let noise_sigma = sim.noise_sigmas[li];
        let trial_seed = sim.seed ^ trial as u64;
        let mut rng_model = ChaCha8Rng::seed_from_u64(trial_seed);
        let noise_seed = splitmix64(trial_seed) ^ li as u64;
        let mut rng_noise = ChaCha8Rng::seed_from_u64(noise_seed);

        let target = match sim.deformation {
            DeformationKind::None => template.clone(),
            DeformationKind::Shear => shear_volume(template, sim.shear_offset),
            DeformationKind::RandomDiffeo => {
                match random_diffeomorphism(
                    template.dims,
                    template.spacing,
                    template.origin,
                    sim.diffeo_amplitude * px,
                    &estimator.match_settings.kernel,
                    &mut rng_model,
                ) {
                    Ok(d) => match warp_volume(template, &d.inverse_disp) {
                        Ok(v) => v,
                        Err(_) => template.clone(),
                    },
                    Err(_) => template.clone(),
                }
            }
        };
        let pristine = match section_volume(&target, target.spacing[2]) {
            Ok(s) => s,
            Err(_) => {
                return TrialRecord {
                    trial,
                    noise_sigma,
                    seed: trial_seed,
                    truth: Vec::new(),
                    estimated: Vec::new(),
                    gauged: Vec::new(),
                    failed: true,
                }
            }
        };
        let (jittered, applied) =
            jitter_stack(&pristine, sim.jitter_sigma_t, sigma_theta, &mut rng_model);
        let observed = add_noise(&jittered, noise_sigma, &mut rng_noise);
        let truth: Vec<RigidMotion> = applied.iter().map(|m| m.inverse()).collect();

        match joint_estimate(template, &observed, estimator, None) {
            Ok(res) => {
                let estimated = res.motions.motions.clone();
                let (_, gauged) = factor_global_pose(&estimated, &truth);
                TrialRecord {
                    trial,
                    noise_sigma,
                    seed: trial_seed,
                    truth,
                    estimated,
                    gauged,
                    failed: false,
                }
            }
            Err(_) => TrialRecord {
                trial,
                noise_sigma,
                seed: trial_seed,
                truth,
                estimated: Vec::new(),
                gauged: Vec::new(),
                failed: true,
            },
        }
    };

    let records: Vec<TrialRecord> = match threads {
        Some(1) => jobs.iter().map(run_one).collect(),
        _ => jobs.par_iter().map(run_one).collect(),
    };

    let failures = records.iter().filter(|r| r.failed).count();
    let summary = summarize(&records, px, false, &sim.noise_sigmas);
    let summary_raw = summarize(&records, px, true, &sim.noise_sigmas);
    Ok(TrialsOutput {
        records,
        summary,
        summary_raw,
        failures,
        mode_label: match estimator.mode {
            crate::joint::EstimatorMode::AtlasFree => "atlas-free".to_string(),
            crate::joint::EstimatorMode::AtlasInformed => "atlas-informed".to_string(),
        },
    })
}

/// Per-parameter error in reporting units (degrees / pixels).
fn param_errors(rec: &TrialRecord, px: f64, raw: bool) -> Vec<[f64; 3]> {
    let est = if raw { &rec.estimated } else { &rec.gauged };
    est.iter()
        .zip(&rec.truth)
        .map(|(e, t)| {
            [
                (e.theta - t.theta).to_degrees(),
                (e.tx - t.tx) / px,
                (e.ty - t.ty) / px,
            ]
        })
        .collect()
}

fn summarize(
    records: &[TrialRecord],
    px: f64,
    raw: bool,
    noise_sigmas: &[f64],
) -> Vec<SummaryRow> {
    const PARAMS: [&str; 3] = ["theta", "tx", "ty"];
    let mut rows = Vec::new();
    for &sigma in noise_sigmas {
        for (pi, param) in PARAMS.iter().enumerate() {
            let mut errs: Vec<f64> = Vec::new();
            let mut n_trials = 0usize;
            for rec in records.iter().filter(|r| r.noise_sigma == sigma && !r.failed) {
                n_trials += 1;
                for e in param_errors(rec, px, raw) {
                    errs.push(e[pi]);
                }
            }
            if errs.is_empty() {
                rows.push(SummaryRow {
                    param,
                    noise_sigma: sigma,
                    rmse: f64::NAN,
                    bias: f64::NAN,
                    std: f64::NAN,
                    n_trials: 0,
                });
                continue;
            }
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let msq = errs.iter().map(|e| e * e).sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            rows.push(SummaryRow {
                param,
                noise_sigma: sigma,
                rmse: msq.sqrt(),
                bias: mean,
                std: var.sqrt(),
                n_trials,
            });
        }
    }
    rows
}

/// Writes the per-record table: one row per (trial, section, parameter).
pub fn write_records_csv(out: &mut impl Write, t: &TrialsOutput, px: f64, raw: bool) -> std::io::Result<()> {
    writeln!(out, "trial,section,param,truth,estimate,error,noise_sigma,mode")?;
    for rec in &t.records {
        if rec.failed {
            continue;
        }
        let est = if raw { &rec.estimated } else { &rec.gauged };
        for (sec, (e, tr)) in est.iter().zip(&rec.truth).enumerate() {
            let rows = [
                ("theta", tr.theta.to_degrees(), e.theta.to_degrees()),
                ("tx", tr.tx / px, e.tx / px),
                ("ty", tr.ty / px, e.ty / px),
            ];
            for (param, tv, ev) in rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    rec.trial,
                    sec,
                    param,
                    tv,
                    ev,
                    ev - tv,
                    rec.noise_sigma,
                    t.mode_label
                )?;
            }
        }
    }
    Ok(())
}

/// Writes the summary table: one row per (parameter, noise level).
pub fn write_summary_csv(out: &mut impl Write, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(out, "param,noise_sigma,rmse,bias,std,n_trials")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.param, r.noise_sigma, r.rmse, r.bias, r.std, r.n_trials
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::{EstimatorMode, InitMode, MatchSettings};
    use crate::restack::RigidOptConfig;
    use crate::restack::RigidPrior;

    fn bend() -> BendParams {
        BendParams {
            length: 30.0,
            tube_radius: 8.0,
            bend_angle: 1.2,
        }
    }

    #[test]
    fn straight_cylinder_is_z_constant_inside() {
        let v = make_curved_phantom(
            [32, 32, 32],
            [1.0; 3],
            &BendParams {
                length: 24.0,
                tube_radius: 8.0,
                bend_angle: 0.0,
            },
        )
        .unwrap();
        // All slices within the length range are identical.
        let mid = 16usize;
        for k in 5..28 {
            if ((k as f64) - 15.5).abs() > 12.0 {
                continue;
            }
            for j in 0..32 {
                for i in 0..32 {
                    assert_eq!(v.at(i, j, k), v.at(i, j, mid));
                }
            }
        }
    }

    #[test]
    fn curved_phantom_reflection_symmetric() {
        let v = make_curved_phantom([48, 32, 48], [1.0; 3], &bend()).unwrap();
        let nz = 48;
        for k in 0..nz {
            for j in 0..32 {
                for i in 0..48 {
                    assert_eq!(v.at(i, j, k), v.at(i, j, nz - 1 - k), "asym at {i},{j},{k}");
                }
            }
        }
    }

    #[test]
    fn curved_phantom_volume_close_to_analytic() {
        let b = bend();
        let v = make_curved_phantom([64, 48, 64], [1.0; 3], &b).unwrap();
        let count: f64 = v.samples().iter().sum();
        let analytic = std::f64::consts::PI * b.tube_radius * b.tube_radius * b.length;
        let rel = (count - analytic).abs() / analytic;
        assert!(rel <= 0.05, "voxel count {count} vs analytic {analytic} ({rel:.3})");
    }

    #[test]
    fn curved_phantom_exits_domain() {
        let r = make_curved_phantom(
            [32, 32, 32],
            [1.0; 3],
            &BendParams {
                length: 60.0,
                tube_radius: 8.0,
                bend_angle: 0.0,
            },
        );
        assert!(matches!(r, Err(Error::TubeExitsDomain(_))));
    }

    #[test]
    fn section_volume_round_trip() {
        let v = make_grayscale_phantom([32, 32, 16], [1.0; 3], &BendParams {
            length: 10.0,
            tube_radius: 6.0,
            bend_angle: 0.0,
        })
        .unwrap();
        let stack = section_volume(&v, 1.0).unwrap();
        assert_eq!(stack.len(), 16);
        let back = crate::restack::restack(&stack, &vec![RigidMotion::IDENTITY; 16]).unwrap();
        assert_eq!(back.samples(), v.samples());

        let every_other = section_volume(&v, 2.0).unwrap();
        assert_eq!(every_other.len(), 8);
        assert_eq!(every_other.z_positions[1], 2.0);

        assert!(section_volume(&v, 1.5).is_err());
    }

    #[test]
    fn jitter_sampler_statistics() {
        let base = Section::zeros([4, 4], [1.0, 1.0]);
        let stack = SectionStack::new(
            vec![base; 10_000],
            (0..10_000).map(|k| k as f64).collect(),
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let (_, motions) = jitter_stack(&stack, 6.0, 10f64.to_radians(), &mut rng);
        let n = motions.len() as f64;
        let mean_t = motions.iter().map(|m| m.tx).sum::<f64>() / n;
        let var_t = motions.iter().map(|m| m.tx * m.tx).sum::<f64>() / n;
        let se = 6.0 / n.sqrt();
        assert!(mean_t.abs() <= 3.0 * se, "mean {mean_t}, SE {se}");
        assert!((var_t - 36.0).abs() <= 0.05 * 36.0, "var {var_t}");
        let var_r = motions.iter().map(|m| m.theta * m.theta).sum::<f64>() / n;
        let sig2 = 10f64.to_radians().powi(2);
        assert!((var_r - sig2).abs() <= 0.05 * sig2);

        // Fixed seed reproduces bit-exactly.
        let mut rng2 = ChaCha8Rng::seed_from_u64(123);
        let (_, motions2) = jitter_stack(&stack, 6.0, 10f64.to_radians(), &mut rng2);
        assert_eq!(motions, motions2);
    }

    #[test]
    fn noise_sampler_statistics() {
        let base = Section::zeros([1000, 100], [1.0, 1.0]);
        let stack = SectionStack::new(vec![base; 10], (0..10).map(|k| k as f64).collect(), 1.0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noisy = add_noise(&stack, 0.25, &mut rng);
        let mut acc = 0.0;
        let mut n = 0.0;
        for s in &noisy.sections {
            for v in &s.samples {
                acc += v * v;
                n += 1.0;
            }
        }
        let std = (acc / n).sqrt();
        assert!((std - 0.25).abs() <= 0.02 * 0.25, "std {std}");

        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let noisy2 = add_noise(&stack, 0.25, &mut rng2);
        assert_ne!(noisy.sections[0].samples, noisy2.sections[0].samples);

        let same = add_noise(&stack, 0.0, &mut rng);
        assert_eq!(same.sections[0].samples, stack.sections[0].samples);
    }

    #[test]
    fn shear_examples() {
        let v = make_grayscale_phantom([32, 32, 16], [1.0; 3], &BendParams {
            length: 10.0,
            tube_radius: 6.0,
            bend_angle: 0.0,
        })
        .unwrap();
        let same = shear_volume(&v, 0.0);
        assert_eq!(same.samples(), v.samples());

        // Slice 4 at offset 0.25 is shifted by exactly one pixel.
        let sheared = shear_volume(&v, 0.25);
        for j in 2..30 {
            for i in 2..30 {
                let got = sheared.at(i, j, 4);
                let want = v.at(i - 1, j - 1, 4);
                assert!((got - want).abs() < 1e-12, "at {i},{j}: {got} vs {want}");
            }
        }

        // Round trip: shear then unshear.
        let back = shear_volume(&sheared, -0.25);
        let mut worst: f64 = 0.0;
        for k in 0..16 {
            for j in 6..26 {
                for i in 6..26 {
                    worst = worst.max((back.at(i, j, k) - v.at(i, j, k)).abs());
                }
            }
        }
        assert!(worst <= 0.08, "round-trip residual {worst}");
    }

    #[test]
    fn random_diffeo_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = KernelSpec::new(4.0, 2).unwrap();
        let id = random_diffeomorphism([16, 16, 16], [1.0; 3], [0.0; 3], 0.0, &kernel, &mut rng)
            .unwrap();
        assert!(id.forward_disp.max_norm() == 0.0);

        let d = random_diffeomorphism([16, 16, 16], [1.0; 3], [0.0; 3], 2.0, &kernel, &mut rng)
            .unwrap();
        let det = jacobian_determinant(&d);
        assert!(det.samples().iter().all(|&v| v > 0.0));
        let peak = d.forward_disp.max_norm();
        assert!((peak - 2.0).abs() <= 0.1, "peak displacement {peak}");
    }

    fn tiny_estimator() -> JointConfig {
        JointConfig {
            match_settings: MatchSettings {
                kernel: KernelSpec::new(4.0, 2).unwrap(),
                timesteps: 3,
                alpha: 50.0,
                step_size: 0.2,
                max_iters: 10,
                rel_tol: 1e-5,
            },
            prior: RigidPrior::new(0.5, 4.0, 0.5).unwrap(),
            rigid: RigidOptConfig {
                step_size: 0.3,
                max_iters: 80,
                rel_tol: 1e-7,
            },
            outer_iters: 2,
            outer_rel_tol: 1e-4,
            mode: EstimatorMode::AtlasInformed,
            init: InitMode::Identity,
            presmooth_sigma: 0.0,
        }
    }

    #[test]
    fn trials_zero_jitter_zero_noise() {
        let v = make_grayscale_phantom([24, 24, 16], [1.0; 3], &BendParams {
            length: 6.0,
            tube_radius: 4.0,
            bend_angle: 0.4,
        })
        .unwrap();
        let sim = SimConfig {
            seed: 42,
            jitter_sigma_t: 0.0,
            jitter_sigma_theta: 0.0,
            theta_unit: ThetaUnit::Degrees,
            noise_sigmas: vec![0.0],
            shear_offset: 0.0,
            trials: 1,
            deformation: DeformationKind::None,
            diffeo_amplitude: 0.0,
        };
        let out = run_trials(&v, &sim, &tiny_estimator(), Some(1)).unwrap();
        assert_eq!(out.failures, 0);
        for row in &out.summary {
            match row.param {
                "theta" => assert!(row.rmse <= 0.1, "theta RMSE {} deg", row.rmse),
                _ => assert!(row.rmse <= 0.1, "{} RMSE {} px", row.param, row.rmse),
            }
        }
    }

    #[test]
    fn trials_rmse_identity_and_determinism() {
        let v = make_grayscale_phantom([24, 24, 16], [1.0; 3], &BendParams {
            length: 6.0,
            tube_radius: 4.0,
            bend_angle: 0.4,
        })
        .unwrap();
        let sim = SimConfig {
            seed: 7,
            jitter_sigma_t: 1.0,
            jitter_sigma_theta: 3.0,
            theta_unit: ThetaUnit::Degrees,
            noise_sigmas: vec![0.05, 0.1],
            shear_offset: 0.0,
            trials: 3,
            deformation: DeformationKind::None,
            diffeo_amplitude: 0.0,
        };
        let out = run_trials(&v, &sim, &tiny_estimator(), None).unwrap();
        // RMSE^2 = bias^2 + variance for every row.
        for row in out.summary.iter().chain(&out.summary_raw) {
            if row.n_trials == 0 {
                continue;
            }
            let lhs = row.rmse * row.rmse;
            let rhs = row.bias * row.bias + row.std * row.std;
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.max(1e-300),
                "{} at {}: {lhs} vs {rhs}",
                row.param,
                row.noise_sigma
            );
        }
        // Byte-identical CSVs on a rerun, regardless of scheduling.
        let rerun = run_trials(&v, &sim, &tiny_estimator(), Some(1)).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_records_csv(&mut a, &out, 1.0, false).unwrap();
        write_records_csv(&mut b, &rerun, 1.0, false).unwrap();
        assert_eq!(a, b);
        let mut sa = Vec::new();
        let mut sb = Vec::new();
        write_summary_csv(&mut sa, &out.summary).unwrap();
        write_summary_csv(&mut sb, &rerun.summary).unwrap();
        assert_eq!(sa, sb);
    }
}
