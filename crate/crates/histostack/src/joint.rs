//! The alternating estimator: block-coordinate descent on the joint energy
//! over per-section rigid motions and the velocity path.
//!
//! One outer iteration runs dense matching against the current restack
//! (`lddmm`), deforms the template, then re-optimizes the rigid motions
//! against the deformed template (`restack`). Both blocks are warm-started,
//! and both score the shared data term with the same code, so the outer
//! total-energy trace is non-increasing.
//!
//! Atlas-free mode instead restacks once under the smoothness prior alone
//! and finishes with a single dense match onto the restacked volume; its
//! outer trace covers the restacking phase (the final match keeps its own
//! monotone trace).

use crate::error::{Error, Result};
use crate::flow::VelocityPath;
use crate::grid::{warp_volume, Section, SectionStack, Volume, VolumeKind};
use crate::kernel::{KernelOperator, KernelSpec};
use crate::lddmm::{
    check_common_frame, lddmm_match, MatchChannel, MatchConfig, MatchResult, Termination,
};
use crate::restack::{
    apply_rigid, optimize_rigid, restack, rigid_energy, RestackState, RigidMotion, RigidOptConfig,
    RigidPrior,
};
use serde::{Deserialize, Serialize};

/// Atlas-free restacks under the smoothness prior alone; atlas-informed
/// alternates matching and restacking against the deformed template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    AtlasFree,
    AtlasInformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Identity,
    CoarseRigid3d,
}

/// Matching-block settings (the channel data is assembled per iteration).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSettings {
    pub kernel: KernelSpec,
    pub timesteps: usize,
    /// Scalar data weight multiplying each section's own alpha.
    pub alpha: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl MatchSettings {
    pub fn to_config(
        &self,
        template: Volume,
        target: SectionStack,
        cost_mask: Option<Volume>,
    ) -> MatchConfig {
        MatchConfig {
            kernel: self.kernel,
            timesteps: self.timesteps,
            alpha: self.alpha,
            step_size: self.step_size,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            channels: vec![MatchChannel {
                template,
                target,
                weight: 1.0,
            }],
            cost_mask,
        }
    }
}

/// Full configuration of the joint estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(rename = "match")]
    pub match_settings: MatchSettings,
    pub prior: RigidPrior,
    pub rigid: RigidOptConfig,
    pub outer_iters: usize,
    pub outer_rel_tol: f64,
    pub mode: EstimatorMode,
    pub init: InitMode,
    /// In-plane Gaussian prefilter (pixels) applied to the estimator's view
    /// of both the stack and the template; 0 disables. Outputs are always
    /// produced from the raw inputs.
    #[serde(default)]
    pub presmooth_sigma: f64,
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::InvalidGeometry("outer_iters must be >= 1".into()));
        }
        if !(self.outer_rel_tol > 0.0) {
            return Err(Error::InvalidGeometry("outer_rel_tol must be > 0".into()));
        }
        if !(self.presmooth_sigma >= 0.0) {
            return Err(Error::InvalidGeometry("presmooth_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Energy breakdown of the joint objective at one state.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyBreakdown {
    pub velocity_prior: f64,
    pub smoothness: f64,
    pub rigid_prior: f64,
    pub data: f64,
    pub total: f64,
}

/// One outer iteration of the alternation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OuterTraceEntry {
    pub iteration: usize,
    pub energy: EnergyBreakdown,
}

/// Everything the estimator produces.
#[derive(Debug, Clone)]
pub struct JointResult {
    pub motions: RestackState,
    pub match_result: MatchResult,
    pub outer_trace: Vec<OuterTraceEntry>,
    /// Raw sections restacked with the final motions.
    pub reconstructed: Volume,
    /// Raw template warped by the final diffeomorphism.
    pub deformed_atlas: Volume,
}

/// Evaluates the joint energy of a state: velocity prior from the path,
/// smoothness / rigid prior / data from the rigid energy against the
/// deformed template.
pub fn total_energy(
    template: &Volume,
    stack: &SectionStack,
    motions: &[RigidMotion],
    path: &VelocityPath,
    kernel: &KernelSpec,
    prior: &RigidPrior,
    alpha: f64,
    cost_mask: Option<&Volume>,
) -> Result<EnergyBreakdown> {
    check_common_frame(template, stack)?;
    let op = KernelOperator::new(kernel, template.dims, template.spacing)?;
    let velocity_prior = 0.5 * path.energy(&op)?;
    let (_, inv) = crate::flow::integrate_displacements(path, crate::flow::FlowDirection::Inverse);
    let deformed = warp_volume(template, &inv)?;
    let (_, rigid_prior, smoothness, data) =
        rigid_energy(stack, motions, prior, Some(&deformed), alpha, cost_mask)?;
    Ok(EnergyBreakdown {
        velocity_prior,
        smoothness,
        rigid_prior,
        data,
        total: velocity_prior + smoothness + rigid_prior + data,
    })
}

/// Coarse global pose from exhaustive grid search on downsampled volumes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoarsePose {
    pub rotation_z: f64,
    pub scale: f64,
    pub translation: [f64; 3],
    /// True when the images were constant and the search fell back to the
    /// identity pose.
    pub degenerate: bool,
}

impl CoarsePose {
    pub const IDENTITY: CoarsePose = CoarsePose {
        rotation_z: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0, 0.0],
        degenerate: false,
    };

    /// Maps a point of the target frame into the template frame:
    /// `T(x) = c_t + scale * rot_z (x - c_s) + translation`.
    pub fn map_point(
        &self,
        p: [f64; 3],
        source_center: [f64; 3],
        template_center: [f64; 3],
    ) -> [f64; 3] {
        let (s, c) = self.rotation_z.sin_cos();
        let d = [
            p[0] - source_center[0],
            p[1] - source_center[1],
            p[2] - source_center[2],
        ];
        [
            template_center[0] + self.scale * (c * d[0] + s * d[1]) + self.translation[0],
            template_center[1] + self.scale * (-s * d[0] + c * d[1]) + self.translation[1],
            template_center[2] + self.scale * d[2] + self.translation[2],
        ]
    }
}

fn volume_center(v: &Volume) -> [f64; 3] {
    [
        v.origin[0] + 0.5 * (v.dims[0] - 1) as f64 * v.spacing[0],
        v.origin[1] + 0.5 * (v.dims[1] - 1) as f64 * v.spacing[1],
        v.origin[2] + 0.5 * (v.dims[2] - 1) as f64 * v.spacing[2],
    ]
}

/// Mean-pooled downsampling by an integer factor per axis.
pub(crate) fn downsample_volume(v: &Volume, factor: usize) -> Volume {
    let f = factor.max(1);
    let dims = [
        (v.dims[0] + f - 1) / f,
        (v.dims[1] + f - 1) / f,
        (v.dims[2] + f - 1) / f,
    ];
    let spacing = [
        v.spacing[0] * f as f64,
        v.spacing[1] * f as f64,
        v.spacing[2] * f as f64,
    ];
    let mut out = Volume::zeros(dims, spacing, v.origin, v.kind);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for dk in 0..f {
                    for dj in 0..f {
                        for di in 0..f {
                            let (si, sj, sk) = (i * f + di, j * f + dj, k * f + dk);
                            if si < v.dims[0] && sj < v.dims[1] && sk < v.dims[2] {
                                acc += v.at(si, sj, sk);
                                cnt += 1;
                            }
                        }
                    }
                }
                out.set(i, j, k, acc / cnt as f64);
            }
        }
    }
    out
}

/// Exhaustive coarse search for translation + isotropic scale + rotation
/// about z on 4x-downsampled volumes, scored by SSD. Ties break to the
/// lexicographically smallest `(rotation, scale, tx, ty, tz)`.
pub fn coarse_init(template: &Volume, stack: &SectionStack) -> Result<CoarsePose> {
    if template.kind != VolumeKind::Intensity {
        return Err(Error::ExpectedIntensityVolume);
    }
    let target = stack.to_volume();
    let range = |v: &Volume| -> f64 {
        let lo = v.samples().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.samples().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    if range(template) < 1e-12 || range(&target) < 1e-12 {
        return Ok(CoarsePose {
            degenerate: true,
            ..CoarsePose::IDENTITY
        });
    }
    let t_small = downsample_volume(template, 4);
    let s_small = downsample_volume(&target, 4);
    let c_t = volume_center(&t_small);
    let c_s = volume_center(&s_small);

    let rotations: Vec<f64> = (-2..=2).map(|r| r as f64 * 5f64.to_radians()).collect();
    let scales = [0.9, 1.0, 1.1];
    let t_step = s_small.spacing[0];
    let shifts: Vec<f64> = (-4..=4).map(|t| t as f64 * t_step).collect();

    let mut best: Option<(f64, CoarsePose)> = None;
    for &rot in &rotations {
        for &scale in &scales {
            for &tx in &shifts {
                for &ty in &shifts {
                    for &tz in &shifts {
                        let pose = CoarsePose {
                            rotation_z: rot,
                            scale,
                            translation: [tx, ty, tz],
                            degenerate: false,
                        };
                        let mut ssd = 0.0;
                        for k in 0..s_small.dims[2] {
                            for j in 0..s_small.dims[1] {
                                for i in 0..s_small.dims[0] {
                                    let p = s_small.position(i, j, k);
                                    let q = pose.map_point(p, c_s, c_t);
                                    let r =
                                        s_small.at(i, j, k) - t_small.sample_trilinear_unchecked(q);
                                    ssd += r * r;
                                }
                            }
                        }
                        // Strict improvement keeps the lexicographically
                        // smallest parameters on ties.
                        if best.as_ref().map_or(true, |(b, _)| ssd < *b) {
                            best = Some((ssd, pose));
                        }
                    }
                }
            }
        }
    }
    Ok(best.expect("search grid is nonempty").1)
}

/// Resamples the template onto the stack's grid through a coarse pose.
pub fn resample_template(template: &Volume, stack: &SectionStack, pose: &CoarsePose) -> Volume {
    let [nx, ny] = stack.dims();
    let [sx, sy] = stack.spacing();
    let dims = [nx, ny, stack.len()];
    let spacing = [sx, sy, stack.delta];
    let origin = [0.0, 0.0, stack.z_positions[0]];
    let mut out = Volume::zeros(dims, spacing, origin, template.kind);
    let c_t = volume_center(template);
    let c_s = [
        origin[0] + 0.5 * (dims[0] - 1) as f64 * spacing[0],
        origin[1] + 0.5 * (dims[1] - 1) as f64 * spacing[1],
        origin[2] + 0.5 * (dims[2] - 1) as f64 * spacing[2],
    ];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = out.position(i, j, k);
                let q = pose.map_point(p, c_s, c_t);
                let v = match template.kind {
                    VolumeKind::Intensity => template.sample_trilinear_unchecked(q),
                    VolumeKind::Label => template.sample_nearest(q),
                };
                out.set(i, j, k, v);
            }
        }
    }
    out
}

/// Separable in-plane Gaussian filter of a section (sigma in pixels,
/// truncated at 3 sigma, window renormalized at the boundary).
pub fn gaussian_smooth_section(s: &Section, sigma: f64) -> Section {
    if sigma <= 0.0 {
        return s.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64 * d as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let [nx, ny] = s.dims;
    let mut tmp = vec![0.0f64; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (w, d) in weights.iter().zip(-radius..=radius) {
                let ii = i as isize + d;
                if ii < 0 || ii >= nx as isize {
                    continue;
                }
                acc += w * s.at(ii as usize, j);
                wsum += w;
            }
            tmp[i + nx * j] = acc / wsum;
        }
    }
    let mut out = s.clone();
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (w, d) in weights.iter().zip(-radius..=radius) {
                let jj = j as isize + d;
                if jj < 0 || jj >= ny as isize {
                    continue;
                }
                acc += w * tmp[i + nx * jj as usize];
                wsum += w;
            }
            out.samples[i + nx * j] = acc / wsum;
        }
    }
    out
}

/// In-plane Gaussian filter of every z slice of a volume.
pub fn gaussian_smooth_volume_inplane(v: &Volume, sigma_px: f64) -> Volume {
    if sigma_px <= 0.0 {
        return v.clone();
    }
    let [nx, ny, nz] = v.dims;
    let mut out = v.clone();
    for k in 0..nz {
        let mut sec = Section::zeros([nx, ny], [v.spacing[0], v.spacing[1]]);
        for j in 0..ny {
            for i in 0..nx {
                let idx = sec.idx(i, j);
                sec.samples[idx] = v.at(i, j, k);
            }
        }
        let sm = gaussian_smooth_section(&sec, sigma_px);
        for j in 0..ny {
            for i in 0..nx {
                out.set(i, j, k, sm.at(i, j));
            }
        }
    }
    out
}

fn presmooth_stack(stack: &SectionStack, sigma: f64) -> SectionStack {
    if sigma <= 0.0 {
        return stack.clone();
    }
    SectionStack {
        sections: stack
            .sections
            .iter()
            .map(|s| gaussian_smooth_section(s, sigma))
            .collect(),
        z_positions: stack.z_positions.clone(),
        delta: stack.delta,
    }
}

/// Transported sections under the given motions, as a stack (the matching
/// target `I^R`).
fn transported_stack(stack: &SectionStack, motions: &[RigidMotion]) -> SectionStack {
    SectionStack {
        sections: stack
            .sections
            .iter()
            .zip(motions)
            .map(|(s, m)| apply_rigid(s, m))
            .collect(),
        z_positions: stack.z_positions.clone(),
        delta: stack.delta,
    }
}

/// Runs the joint estimator.
pub fn joint_estimate(
    template: &Volume,
    stack: &SectionStack,
    cfg: &JointConfig,
    cost_mask: Option<&Volume>,
) -> Result<JointResult> {
    cfg.validate()?;

    // Bring the template onto the stack frame if needed.
    let pose = match cfg.init {
        InitMode::Identity => CoarsePose::IDENTITY,
        InitMode::CoarseRigid3d => coarse_init(template, stack)?,
    };
    let stack_volume_frame = stack.to_volume();
    let template_on_frame = if pose.rotation_z == 0.0
        && pose.scale == 1.0
        && pose.translation == [0.0, 0.0, 0.0]
        && template.same_frame(&stack_volume_frame, 1e-9)
    {
        template.clone()
    } else {
        resample_template(template, stack, &pose)
    };

    // The estimator's working view; outputs always use the raw inputs.
    let work_stack = presmooth_stack(stack, cfg.presmooth_sigma);
    let work_template = gaussian_smooth_volume_inplane(&template_on_frame, cfg.presmooth_sigma);

    let n = stack.len();
    let kernel = cfg.match_settings.kernel;
    let grid_dims = work_template.dims;
    let grid_spacing = work_template.spacing;
    let grid_origin = work_template.origin;

    let mut motions = vec![RigidMotion::IDENTITY; n];
    let mut path = VelocityPath::zeros(cfg.match_settings.timesteps, grid_dims, grid_spacing, grid_origin);
    let mut outer_trace = Vec::new();
    let mut rigid_state: Option<RestackState> = None;
    let mut match_state: Option<MatchResult> = None;

    match cfg.mode {
        EstimatorMode::AtlasFree => {
            // Restack under the smoothness prior alone; outer trace covers
            // this phase (alpha plays no role in its objective).
            let (t0, p0, s0, _) =
                rigid_energy(&work_stack, &motions, &cfg.prior, None, 0.0, None)?;
            outer_trace.push(OuterTraceEntry {
                iteration: 0,
                energy: EnergyBreakdown {
                    velocity_prior: 0.0,
                    smoothness: s0,
                    rigid_prior: p0,
                    data: 0.0,
                    total: t0,
                },
            });
            let state = optimize_rigid(
                &work_stack,
                &motions,
                &cfg.prior,
                None,
                0.0,
                None,
                &cfg.rigid,
            )?;
            motions = state.motions.clone();
            let last = state.trace.last().expect("trace nonempty");
            outer_trace.push(OuterTraceEntry {
                iteration: 1,
                energy: EnergyBreakdown {
                    velocity_prior: 0.0,
                    smoothness: last.smoothness,
                    rigid_prior: last.prior,
                    data: 0.0,
                    total: last.total,
                },
            });
            rigid_state = Some(state);

            // Single final dense match onto the restacked sections.
            let target = transported_stack(&work_stack, &motions);
            let match_cfg = cfg.match_settings.to_config(
                work_template.clone(),
                target,
                cost_mask.cloned(),
            );
            let res = lddmm_match(&match_cfg, Some(path.clone()))?;
            path = res.path.clone();
            match_state = Some(res);
        }
        EstimatorMode::AtlasInformed => {
            let energy0 = total_energy(
                &work_template,
                &work_stack,
                &motions,
                &path,
                &kernel,
                &cfg.prior,
                cfg.match_settings.alpha,
                cost_mask,
            )?;
            outer_trace.push(OuterTraceEntry {
                iteration: 0,
                energy: energy0,
            });
            let mut prev_total = energy0.total;

            for outer in 1..=cfg.outer_iters {
                // (a) dense match onto the current restack, warm-started.
                let target = transported_stack(&work_stack, &motions);
                let match_cfg = cfg.match_settings.to_config(
                    work_template.clone(),
                    target,
                    cost_mask.cloned(),
                );
                let res = lddmm_match(&match_cfg, Some(path.clone()))?;
                path = res.path.clone();

                // (b) rigid update against the deformed template.
                let deformed = warp_volume(&work_template, &res.diffeo.inverse_disp)?;
                let state = optimize_rigid(
                    &work_stack,
                    &motions,
                    &cfg.prior,
                    Some(&deformed),
                    cfg.match_settings.alpha,
                    cost_mask,
                    &cfg.rigid,
                )?;
                motions = state.motions.clone();

                let energy = total_energy(
                    &work_template,
                    &work_stack,
                    &motions,
                    &path,
                    &kernel,
                    &cfg.prior,
                    cfg.match_settings.alpha,
                    cost_mask,
                )?;
                outer_trace.push(OuterTraceEntry {
                    iteration: outer,
                    energy,
                });
                match_state = Some(res);
                rigid_state = Some(state);

                let decrease = prev_total - energy.total;
                if decrease <= cfg.outer_rel_tol * prev_total.abs().max(1e-300) {
                    break;
                }
                prev_total = energy.total;
            }
        }
    }

    let match_result = match match_state {
        Some(m) => m,
        None => {
            // Zero-section edge cases cannot reach here; a match always runs.
            return Err(Error::InvalidGeometry("no match was run".into()));
        }
    };
    let rigid_result = rigid_state.unwrap_or(RestackState {
        motions: motions.clone(),
        trace: Vec::new(),
        termination: Termination::Converged,
    });

    // Outputs from the raw inputs.
    let reconstructed = restack(stack, &motions)?;
    let deformed_atlas = warp_volume(&template_on_frame, &match_result.diffeo.inverse_disp)?;

    Ok(JointResult {
        motions: rigid_result,
        match_result,
        outer_trace,
        reconstructed,
        deformed_atlas,
    })
}
