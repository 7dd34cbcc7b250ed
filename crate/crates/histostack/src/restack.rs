//! Per-section rigid motions, their priors, and joint rigid-motion
//! optimization of the restacking energy.
//!
//! Each section is resampled through an in-plane rigid motion
//!
//! ```text
//! R(x, y) = (cos th x + sin th y + tx, -sin th x + cos th y + ty)
//! ```
//!
//! applied about the section's physical center, and the stack of resampled
//! sections `I^R` is scored by
//!
//! ```text
//! E(R) = sum_i (th_i^2/(2 s_th^2) + |t_i|^2/(2 s_t^2))     (prior)
//!      + 1/s_JJ^2 * 1/2 sum_i ||D_z I^R(., z_i)||^2        (smoothness)
//!      + sum_i w alpha_i || I^R(., z_i) - A(., z_i) ||^2   (optional atlas)
//! ```
//!
//! The smoothness term couples neighboring sections through the centered
//! z-difference, so the motions are optimized jointly (full 3n-dimensional
//! gradient steps) rather than section by section. Gradients are the exact
//! derivatives of the discrete energy: the chain rule runs through the
//! bilinear interpolant of each section, which makes them agree with central
//! finite differences to rounding error.

use crate::error::{Error, Result};
use crate::grid::{smoothness_energy, z_difference, Section, SectionStack, Volume, VolumeKind};
use crate::lddmm::{Termination, TraceEntry};
use serde::{Deserialize, Serialize};

/// In-plane rigid motion `(theta, tx, ty)`; rotation is about the section's
/// physical center, translations are in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidMotion {
    pub const IDENTITY: RigidMotion = RigidMotion {
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        RigidMotion { theta, tx, ty }
    }

    /// Applies the motion to a point given in centered coordinates.
    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [
            c * p[0] + s * p[1] + self.tx,
            -s * p[0] + c * p[1] + self.ty,
        ]
    }

    /// Motion with `self.apply(inv.apply(x)) = x`.
    pub fn inverse(&self) -> RigidMotion {
        let (s, c) = (-self.theta).sin_cos();
        RigidMotion {
            theta: -self.theta,
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
        }
    }

    /// Composition `self o other`: first `other`, then `self`.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        let (s, c) = self.theta.sin_cos();
        RigidMotion {
            theta: self.theta + other.theta,
            tx: c * other.tx + s * other.ty + self.tx,
            ty: -s * other.tx + c * other.ty + self.ty,
        }
    }
}

/// Gaussian priors centered at the identity motion, plus the weight of the
/// stack-smoothness term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidPrior {
    /// Rotation prior stddev (radians).
    pub sigma_theta: f64,
    /// Translation prior stddev (mm).
    pub sigma_t: f64,
    /// Smoothness-term weight is `1/sigma_jj^2`; infinity disables it.
    pub sigma_jj: f64,
}

impl RigidPrior {
    pub fn new(sigma_theta: f64, sigma_t: f64, sigma_jj: f64) -> Result<Self> {
        if !(sigma_theta > 0.0) || !(sigma_t > 0.0) || !(sigma_jj > 0.0) {
            return Err(Error::InvalidGeometry(
                "prior sigmas must be positive".into(),
            ));
        }
        Ok(RigidPrior {
            sigma_theta,
            sigma_t,
            sigma_jj,
        })
    }

    fn smoothness_weight(&self) -> f64 {
        if self.sigma_jj.is_infinite() {
            0.0
        } else {
            1.0 / (self.sigma_jj * self.sigma_jj)
        }
    }
}

/// Motions of a converged rigid optimization plus its accepted-energy trace.
#[derive(Debug, Clone)]
pub struct RestackState {
    pub motions: Vec<RigidMotion>,
    pub trace: Vec<RigidTraceEntry>,
    pub termination: Termination,
}

/// One accepted iterate of `optimize_rigid`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RigidTraceEntry {
    pub iteration: usize,
    pub prior: f64,
    pub smoothness: f64,
    pub data: f64,
    pub total: f64,
}

/// Resamples a section through a rigid motion: `out(x) = s(R(x))`, bilinear
/// for intensities, nearest-neighbor for the validity mask.
pub fn apply_rigid(s: &Section, motion: &RigidMotion) -> Section {
    let center = s.center();
    let [nx, ny] = s.dims;
    let mut out = Section::zeros(s.dims, s.spacing);
    out.alpha = s.alpha;
    let mut mask_out = s.mask.as_ref().map(|_| vec![false; nx * ny]);
    for j in 0..ny {
        for i in 0..nx {
            let p = [
                i as f64 * s.spacing[0] - center[0],
                j as f64 * s.spacing[1] - center[1],
            ];
            let q = motion.apply_point(p);
            let src = [q[0] + center[0], q[1] + center[1]];
            let idx = out.idx(i, j);
            out.samples[idx] = s.sample_bilinear(src);
            if let Some(m) = mask_out.as_mut() {
                m[idx] = s.mask_nearest(src);
            }
        }
    }
    out.mask = mask_out;
    out
}

/// `-log` of the product Gaussian prior over all motions (constants dropped).
pub fn rigid_prior_neglog(motions: &[RigidMotion], prior: &RigidPrior) -> f64 {
    let st2 = 2.0 * prior.sigma_theta * prior.sigma_theta;
    let tt2 = 2.0 * prior.sigma_t * prior.sigma_t;
    motions
        .iter()
        .map(|m| m.theta * m.theta / st2 + (m.tx * m.tx + m.ty * m.ty) / tt2)
        .sum()
}

/// Applies each motion and assembles the sections into a volume with z
/// spacing `delta`; the stack's z positions carry through as the z grid.
pub fn restack(stack: &SectionStack, motions: &[RigidMotion]) -> Result<Volume> {
    if motions.len() != stack.len() {
        return Err(Error::CountMismatch {
            sections: stack.len(),
            motions: motions.len(),
        });
    }
    let [nx, ny] = stack.dims();
    let [sx, sy] = stack.spacing();
    let mut v = Volume::zeros(
        [nx, ny, stack.len()],
        [sx, sy, stack.delta],
        [0.0, 0.0, stack.z_positions[0]],
        VolumeKind::Intensity,
    );
    for (k, (sec, m)) in stack.sections.iter().zip(motions).enumerate() {
        let r = apply_rigid(sec, m);
        for j in 0..ny {
            for i in 0..nx {
                v.set(i, j, k, r.at(i, j));
            }
        }
    }
    Ok(v)
}

/// Atlas-free restacking energy: rigid prior + weighted stack smoothness.
pub fn atlas_free_energy(
    stack: &SectionStack,
    motions: &[RigidMotion],
    prior: &RigidPrior,
) -> Result<f64> {
    let (total, ..) = rigid_energy(stack, motions, prior, None, 0.0, None)?;
    Ok(total)
}

/// Full rigid energy breakdown `(total, prior, smoothness, data)`. The data
/// term compares restacked sections against slices of `atlas` with weight
/// `match_weight * section.alpha` when an atlas is present; voxels excluded
/// by `cost_mask` (value < 0.5) contribute nothing, mirroring the matching
/// data term exactly.
pub fn rigid_energy(
    stack: &SectionStack,
    motions: &[RigidMotion],
    prior: &RigidPrior,
    atlas: Option<&Volume>,
    match_weight: f64,
    cost_mask: Option<&Volume>,
) -> Result<(f64, f64, f64, f64)> {
    if motions.len() != stack.len() {
        return Err(Error::CountMismatch {
            sections: stack.len(),
            motions: motions.len(),
        });
    }
    let restacked = restack(stack, motions)?;
    let e_prior = rigid_prior_neglog(motions, prior);
    let w_s = prior.smoothness_weight();
    let e_smooth = if w_s == 0.0 {
        0.0
    } else {
        w_s * smoothness_energy(&restacked, stack.delta)?
    };
    let mut e_data = 0.0;
    if let Some(atlas) = atlas {
        if atlas.dims != restacked.dims {
            return Err(Error::FrameMismatch(format!(
                "atlas dims {:?} != restacked dims {:?}",
                atlas.dims, restacked.dims
            )));
        }
        let area = restacked.pixel_area();
        let [nx, ny] = stack.dims();
        let [sx, sy] = stack.spacing();
        for (k, sec) in stack.sections.iter().enumerate() {
            let w = match_weight * sec.alpha;
            if w == 0.0 {
                continue;
            }
            let center = sec.center();
            let masked = sec.mask.is_some();
            let mut plane = 0.0;
            for j in 0..ny {
                for i in 0..nx {
                    if masked {
                        // The validity mask travels with the section.
                        let p = [i as f64 * sx - center[0], j as f64 * sy - center[1]];
                        let q = motions[k].apply_point(p);
                        if !sec.mask_nearest([q[0] + center[0], q[1] + center[1]]) {
                            continue;
                        }
                    }
                    if let Some(cm) = cost_mask {
                        if cm.at(i, j, k) < 0.5 {
                            continue;
                        }
                    }
                    let r = restacked.at(i, j, k) - atlas.at(i, j, k);
                    plane += r * r;
                }
            }
            e_data += w * plane * area;
        }
    }
    Ok((e_prior + e_smooth + e_data, e_prior, e_smooth, e_data))
}

/// Exact gradient of `rigid_energy` with respect to every `(theta, tx, ty)`.
///
/// Sections with zero data weight still feel the prior and smoothness
/// forces; boundary sections follow the forced-zero z rule through the
/// z-difference adjoint.
pub fn rigid_gradients(
    stack: &SectionStack,
    motions: &[RigidMotion],
    prior: &RigidPrior,
    atlas: Option<&Volume>,
    match_weight: f64,
    cost_mask: Option<&Volume>,
) -> Result<Vec<[f64; 3]>> {
    if motions.len() != stack.len() {
        return Err(Error::CountMismatch {
            sections: stack.len(),
            motions: motions.len(),
        });
    }
    if atlas.is_some() && !(match_weight >= 0.0) {
        return Err(Error::InvalidGeometry("match weight must be >= 0".into()));
    }
    let n = stack.len();
    let [nx, ny] = stack.dims();
    let [sx, sy] = stack.spacing();
    let area = sx * sy;
    let delta = stack.delta;
    let w_s = prior.smoothness_weight();

    let restacked = restack(stack, motions)?;
    let zdiff = if w_s == 0.0 {
        None
    } else {
        Some(z_difference(&restacked, delta)?)
    };

    let st2 = prior.sigma_theta * prior.sigma_theta;
    let tt2 = prior.sigma_t * prior.sigma_t;

    let mut grads = vec![[0.0f64; 3]; n];
    for (k, sec) in stack.sections.iter().enumerate() {
        let center = sec.center();
        let m = &motions[k];
        let (sin_t, cos_t) = m.theta.sin_cos();
        let w_data = match_weight * sec.alpha;
        let mut g = [m.theta / st2, m.tx / tt2, m.ty / tt2];

        let needs_image_terms = w_s != 0.0 || (atlas.is_some() && w_data != 0.0);
        if needs_image_terms {
            let moved_mask_needed = atlas.is_some() && w_data != 0.0 && sec.mask.is_some();
            for j in 0..ny {
                for i in 0..nx {
                    // dE/dW at this pixel: smoothness adjoint + data residual.
                    let mut de_dw = 0.0;
                    if let Some(zd) = &zdiff {
                        let mut s = 0.0;
                        if k >= 1 && k - 1 >= 1 && k - 1 + 1 < n {
                            s += zd.at(i, j, k - 1) / (2.0 * delta);
                        }
                        if k + 1 >= 1 && k + 2 < n {
                            s -= zd.at(i, j, k + 1) / (2.0 * delta);
                        }
                        de_dw += w_s * s * area;
                    }
                    let p = [
                        i as f64 * sx - center[0],
                        j as f64 * sy - center[1],
                    ];
                    let q = m.apply_point(p);
                    let src = [q[0] + center[0], q[1] + center[1]];
                    if let Some(atlas) = atlas {
                        if w_data != 0.0 {
                            let masked_out = (moved_mask_needed && !sec.mask_nearest(src))
                                || cost_mask.map_or(false, |cm| cm.at(i, j, k) < 0.5);
                            if !masked_out {
                                let r = restacked.at(i, j, k) - atlas.at(i, j, k);
                                de_dw += 2.0 * w_data * r * area;
                            }
                        }
                    }
                    if de_dw == 0.0 {
                        continue;
                    }
                    let (_, grad_img) = sec.sample_bilinear_with_grad(src);
                    // dR/dtheta acting on the centered point.
                    let dq_dtheta = [
                        -sin_t * p[0] + cos_t * p[1],
                        -cos_t * p[0] - sin_t * p[1],
                    ];
                    g[0] += de_dw * (grad_img[0] * dq_dtheta[0] + grad_img[1] * dq_dtheta[1]);
                    g[1] += de_dw * grad_img[0];
                    g[2] += de_dw * grad_img[1];
                }
            }
        }
        grads[k] = g;
    }
    Ok(grads)
}

/// Optimization settings for `optimize_rigid`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidOptConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for RigidOptConfig {
    fn default() -> Self {
        RigidOptConfig {
            step_size: 0.5,
            max_iters: 200,
            rel_tol: 1e-6,
        }
    }
}

/// Joint gradient descent over all `3n` motion parameters with backtracking
/// line search; the trace of accepted iterates is non-increasing.
///
/// Steps are preconditioned by the prior variances, which puts rotations
/// (radians) and translations (mm) on comparable scales.
pub fn optimize_rigid(
    stack: &SectionStack,
    init: &[RigidMotion],
    prior: &RigidPrior,
    atlas: Option<&Volume>,
    match_weight: f64,
    cost_mask: Option<&Volume>,
    cfg: &RigidOptConfig,
) -> Result<RestackState> {
    let mut motions = init.to_vec();
    let (mut e_total, mut e_prior, mut e_smooth, mut e_data) =
        rigid_energy(stack, &motions, prior, atlas, match_weight, cost_mask)?;
    let mut trace = vec![RigidTraceEntry {
        iteration: 0,
        prior: e_prior,
        smoothness: e_smooth,
        data: e_data,
        total: e_total,
    }];
    let mut eps = cfg.step_size;
    let eps_min = cfg.step_size * 2f64.powi(-40);
    let mut termination = Termination::MaxIters;
    let pre = [
        prior.sigma_theta * prior.sigma_theta,
        prior.sigma_t * prior.sigma_t,
        prior.sigma_t * prior.sigma_t,
    ];

    for iter in 1..=cfg.max_iters {
        let grads = rigid_gradients(stack, &motions, prior, atlas, match_weight, cost_mask)?;
        let dir_deriv: f64 = grads
            .iter()
            .map(|g| g[0] * g[0] * pre[0] + g[1] * g[1] * pre[1] + g[2] * g[2] * pre[2])
            .sum();
        if dir_deriv <= 1e-24 * (1.0 + e_total.abs()) {
            termination = Termination::Converged;
            break;
        }
        let mut accepted = false;
        while eps >= eps_min {
            let cand: Vec<RigidMotion> = motions
                .iter()
                .zip(&grads)
                .map(|(m, g)| RigidMotion {
                    theta: m.theta - eps * pre[0] * g[0],
                    tx: m.tx - eps * pre[1] * g[1],
                    ty: m.ty - eps * pre[2] * g[2],
                })
                .collect();
            let (t, p, s, d) = rigid_energy(stack, &cand, prior, atlas, match_weight, cost_mask)?;
            if t < e_total {
                motions = cand;
                let prev = e_total;
                e_total = t;
                e_prior = p;
                e_smooth = s;
                e_data = d;
                trace.push(RigidTraceEntry {
                    iteration: iter,
                    prior: e_prior,
                    smoothness: e_smooth,
                    data: e_data,
                    total: e_total,
                });
                eps = (eps * 1.5).min(cfg.step_size * 1e3);
                accepted = true;
                if (prev - e_total) <= cfg.rel_tol * prev.abs().max(1e-300) {
                    termination = Termination::Converged;
                }
                break;
            }
            eps *= 0.5;
        }
        if !accepted {
            return Err(Error::SolverStall { iterations: iter });
        }
        if termination == Termination::Converged {
            break;
        }
    }

    Ok(RestackState {
        motions,
        trace,
        termination,
    })
}

/// Best global rigid pose `g` aligning estimated motions to the truth in the
/// least-squares sense; returns `g` and the gauged motions `est_i o g`.
///
/// Right-composition by a common motion re-poses the whole reconstruction,
/// so only relative alignment is identifiable; errors are measured after
/// removing this gauge.
pub fn factor_global_pose(
    estimated: &[RigidMotion],
    truth: &[RigidMotion],
) -> (RigidMotion, Vec<RigidMotion>) {
    assert_eq!(estimated.len(), truth.len());
    let n = estimated.len() as f64;
    let theta_g = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| t.theta - e.theta)
        .sum::<f64>()
        / n;
    // argmin_t sum_i | rot(th_e_i) t + t_e_i - t_t_i |^2
    let mut acc = [0.0f64; 2];
    for (e, t) in estimated.iter().zip(truth) {
        let (s, c) = e.theta.sin_cos();
        let d = [e.tx - t.tx, e.ty - t.ty];
        // rot(th)^T d with rot = [[c, s], [-s, c]]
        acc[0] += c * d[0] - s * d[1];
        acc[1] += s * d[0] + c * d[1];
    }
    let t_g = [-acc[0] / n, -acc[1] / n];
    let g = RigidMotion {
        theta: theta_g,
        tx: t_g[0],
        ty: t_g[1],
    };
    let gauged = estimated.iter().map(|e| e.compose(&g)).collect();
    (g, gauged)
}

/// Per-parameter residuals `(dtheta, dtx, dty)` between gauged estimates and
/// the truth.
pub fn gauged_errors(estimated: &[RigidMotion], truth: &[RigidMotion]) -> Vec<[f64; 3]> {
    let (_, gauged) = factor_global_pose(estimated, truth);
    gauged
        .iter()
        .zip(truth)
        .map(|(e, t)| [e.theta - t.theta, e.tx - t.tx, e.ty - t.ty])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn band_limited_section(dims: [usize; 2], seed: u64) -> Section {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<(f64, f64, f64, f64)> = (0..5)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let mut s = Section::zeros(dims, [1.0, 1.0]);
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = s.idx(i, j);
                s.samples[idx] = modes
                    .iter()
                    .map(|(a, wx, wy, ph)| a * (wx * i as f64 + wy * j as f64 + ph).sin())
                    .sum();
            }
        }
        s
    }

    fn uniform_stack(sections: Vec<Section>) -> SectionStack {
        let n = sections.len();
        SectionStack::new(sections, (0..n).map(|k| k as f64).collect(), 1.0).unwrap()
    }

    #[test]
    fn identity_motion_preserves_section() {
        let s = band_limited_section([12, 10], 1);
        let out = apply_rigid(&s, &RigidMotion::IDENTITY);
        assert_eq!(out.samples, s.samples);
    }

    #[test]
    fn quarter_turn_maps_unit_x_to_minus_y() {
        let m = RigidMotion::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let q = m.apply_point([1.0, 0.0]);
        assert!((q[0] - 0.0).abs() < 1e-12);
        assert!((q[1] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn rigid_round_trip_small_residual() {
        let s = band_limited_section([24, 24], 2);
        let m = RigidMotion::new(0.2, 1.3, -0.8);
        let inv = m.inverse();
        // Check the point algebra first.
        for p in [[3.0, -2.0], [0.0, 0.0], [-5.5, 4.25]] {
            let q = inv.apply_point(m.apply_point(p));
            assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        }
        let once = apply_rigid(&s, &m);
        let back = apply_rigid(&once, &inv);
        // Interior pixels (border pixels pull clamped values).
        let mut worst: f64 = 0.0;
        for j in 4..20 {
            for i in 4..20 {
                worst = worst.max((back.at(i, j) - s.at(i, j)).abs());
            }
        }
        let amp = s.samples.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(worst <= 0.08 * amp, "round-trip residual {worst}, amplitude {amp}");
    }

    #[test]
    fn prior_neglog_values() {
        let prior = RigidPrior::new(0.1, 2.0, 1.0).unwrap();
        assert_eq!(rigid_prior_neglog(&[RigidMotion::IDENTITY; 4], &prior), 0.0);
        let one = [RigidMotion::new(0.1, 0.0, 0.0)];
        assert!((rigid_prior_neglog(&one, &prior) - 0.5).abs() < 1e-12);
        let m = [RigidMotion::new(0.05, 1.0, -0.5)];
        let m2 = [RigidMotion::new(0.1, 2.0, -1.0)];
        let e1 = rigid_prior_neglog(&m, &prior);
        let e2 = rigid_prior_neglog(&m2, &prior);
        assert!((e2 - 4.0 * e1).abs() < 1e-12 * e2);
    }

    #[test]
    fn restack_identity_is_stack_volume() {
        let stack = uniform_stack((0..5).map(|k| band_limited_section([8, 8], k)).collect());
        let v = restack(&stack, &vec![RigidMotion::IDENTITY; 5]).unwrap();
        assert_eq!(v.samples(), stack.to_volume().samples());
        assert_eq!(v.origin[2], stack.z_positions[0]);
        assert_eq!(v.spacing[2], stack.delta);
    }

    #[test]
    fn restack_count_mismatch() {
        let stack = uniform_stack((0..3).map(|k| band_limited_section([8, 8], k)).collect());
        assert!(matches!(
            restack(&stack, &[RigidMotion::IDENTITY; 2]),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn dejitter_recovers_alignment_energy() {
        // A z-constant smooth stack, jittered; restacking with the inverse
        // motions must recover a lower smoothness energy than leaving the
        // jitter in place.
        let base = band_limited_section([24, 24], 7);
        let n = 9;
        let stack = uniform_stack(vec![base.clone(); n]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let motions: Vec<RigidMotion> = (0..n)
            .map(|_| {
                RigidMotion::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                )
            })
            .collect();
        let jittered = uniform_stack(
            stack
                .sections
                .iter()
                .zip(&motions)
                .map(|(s, m)| apply_rigid(s, m))
                .collect(),
        );
        let prior = RigidPrior::new(0.2, 3.0, 1.0).unwrap();
        let idle = atlas_free_energy(&jittered, &vec![RigidMotion::IDENTITY; n], &prior).unwrap();
        let inverses: Vec<RigidMotion> = motions.iter().map(|m| m.inverse()).collect();
        let fixed = atlas_free_energy(&jittered, &inverses, &prior).unwrap();
        assert!(
            fixed < idle,
            "de-jittered energy {fixed} not below jittered {idle}"
        );
    }

    #[test]
    fn atlas_free_energy_zero_for_constant_stack() {
        let base = band_limited_section([12, 12], 9);
        let stack = uniform_stack(vec![base; 6]);
        let prior = RigidPrior::new(0.2, 3.0, 1.0).unwrap();
        let e = atlas_free_energy(&stack, &[RigidMotion::IDENTITY; 6], &prior).unwrap();
        assert_eq!(e, 0.0);

        // Translating one interior section raises the energy.
        let mut motions = [RigidMotion::IDENTITY; 6];
        motions[3] = RigidMotion::new(0.0, 1.0, 0.0);
        let e2 = atlas_free_energy(&stack, &motions, &prior).unwrap();
        assert!(e2 > 0.0);
    }

    #[test]
    fn gradient_zero_at_matched_identity() {
        // Perfectly stacked (z-constant) sections, atlas equal to the stack:
        // identity motions are a stationary point.
        let base = band_limited_section([12, 12], 10);
        let stack = uniform_stack(vec![base; 5]);
        let atlas = stack.to_volume();
        let prior = RigidPrior::new(0.2, 3.0, 1.0).unwrap();
        let g = rigid_gradients(&stack, &[RigidMotion::IDENTITY; 5], &prior, Some(&atlas), 1.0, None)
            .unwrap();
        for gi in g {
            assert_eq!(gi, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 3-section 16^2 toy stack, both atlas-free and atlas-informed.
        let stack = uniform_stack((0..3).map(|k| band_limited_section([16, 16], 20 + k)).collect());
        let atlas = {
            let v = uniform_stack((0..3).map(|k| band_limited_section([16, 16], 30 + k)).collect());
            v.to_volume()
        };
        let prior = RigidPrior::new(0.15, 2.0, 0.7).unwrap();
        let motions = vec![
            RigidMotion::new(0.05, 0.4, -0.3),
            RigidMotion::new(-0.08, -0.2, 0.6),
            RigidMotion::new(0.02, 0.1, 0.2),
        ];
        for (atlas_opt, w) in [(None, 0.0), (Some(&atlas), 0.8)] {
            let g = rigid_gradients(&stack, &motions, &prior, atlas_opt, w, None).unwrap();
            let h = 1e-6;
            for sec in 0..3 {
                for param in 0..3 {
                    let mut mp = motions.clone();
                    let mut mm = motions.clone();
                    match param {
                        0 => {
                            mp[sec].theta += h;
                            mm[sec].theta -= h;
                        }
                        1 => {
                            mp[sec].tx += h;
                            mm[sec].tx -= h;
                        }
                        _ => {
                            mp[sec].ty += h;
                            mm[sec].ty -= h;
                        }
                    }
                    let (ep, ..) = rigid_energy(&stack, &mp, &prior, atlas_opt, w, None).unwrap();
                    let (em, ..) = rigid_energy(&stack, &mm, &prior, atlas_opt, w, None).unwrap();
                    let fd = (ep - em) / (2.0 * h);
                    let an = g[sec][param];
                    let rel = (an - fd).abs() / fd.abs().max(1e-10);
                    assert!(
                        rel <= 1e-4,
                        "atlas {} sec {sec} param {param}: analytic {an} fd {fd} rel {rel}",
                        atlas_opt.is_some(),
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_reduces_to_prior_without_image_terms() {
        let stack = uniform_stack((0..4).map(|k| band_limited_section([10, 10], 40 + k)).collect());
        let prior = RigidPrior::new(0.1, 1.5, f64::INFINITY).unwrap();
        let motions = vec![
            RigidMotion::new(0.03, 0.5, -0.2),
            RigidMotion::new(-0.01, 0.3, 0.7),
            RigidMotion::new(0.09, -0.4, 0.1),
            RigidMotion::new(0.0, 0.0, 0.0),
        ];
        let g = rigid_gradients(&stack, &motions, &prior, None, 0.0, None).unwrap();
        for (gi, m) in g.iter().zip(&motions) {
            assert_eq!(gi[0], m.theta / (0.1 * 0.1));
            assert_eq!(gi[1], m.tx / (1.5 * 1.5));
            assert_eq!(gi[2], m.ty / (1.5 * 1.5));
        }
    }

    #[test]
    fn optimize_already_optimal_returns_quickly() {
        let base = band_limited_section([12, 12], 50);
        let stack = uniform_stack(vec![base; 5]);
        let prior = RigidPrior::new(0.2, 3.0, 1.0).unwrap();
        let res = optimize_rigid(
            &stack,
            &[RigidMotion::IDENTITY; 5],
            &prior,
            None,
            0.0,
            None,
            &RigidOptConfig::default(),
        )
        .unwrap();
        assert_eq!(res.termination, Termination::Converged);
        assert!(res.trace.len() <= 2);
        for (m, id) in res.motions.iter().zip([RigidMotion::IDENTITY; 5]) {
            assert_eq!(*m, id);
        }
    }

    /// Band-limited cylinder cross-section with two azimuthal marker bumps,
    /// anisotropic so rotations are identifiable.
    fn marker_section(dims: [usize; 2]) -> Section {
        let mut s = Section::zeros(dims, [1.0, 1.0]);
        let c = [(dims[0] - 1) as f64 / 2.0, (dims[1] - 1) as f64 / 2.0];
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let x = i as f64 - c[0];
                let y = j as f64 - c[1];
                let body = 0.7 * (-(x * x / (2.0 * 100.0) + y * y / (2.0 * 49.0))).exp();
                let m1 = 0.6 * (-((x - 10.0).powi(2) + y * y) / (2.0 * 9.0)).exp();
                let m2 = 0.45 * (-(x * x + (y - 9.0).powi(2)) / (2.0 * 6.25)).exp();
                let idx = s.idx(i, j);
                s.samples[idx] = body + m1 + m2;
            }
        }
        s
    }

    #[test]
    fn atlas_free_recovers_relative_alignment() {
        let dims = [48, 48];
        let n = 8;
        let base = marker_section(dims);
        let pristine = uniform_stack(vec![base; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let jitter: Vec<RigidMotion> = (0..n)
            .map(|_| {
                RigidMotion::new(
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();
        let jittered = uniform_stack(
            pristine
                .sections
                .iter()
                .zip(&jitter)
                .map(|(s, m)| apply_rigid(s, m))
                .collect(),
        );
        let prior = RigidPrior::new(1.0, 6.0, 0.3).unwrap();
        let cfg = RigidOptConfig {
            step_size: 0.3,
            max_iters: 3000,
            rel_tol: 1e-12,
        };
        let res = optimize_rigid(
            &jittered,
            &vec![RigidMotion::IDENTITY; n],
            &prior,
            None,
            0.0,
            None,
            &cfg,
        )
        .unwrap();
        // Energy trace is non-increasing.
        for w in res.trace.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
        let truth: Vec<RigidMotion> = jitter.iter().map(|m| m.inverse()).collect();
        let errors = gauged_errors(&res.motions, &truth);
        let rot_rmse = (errors.iter().map(|e| e[0] * e[0]).sum::<f64>() / n as f64).sqrt();
        let t_rmse = (errors
            .iter()
            .map(|e| e[1] * e[1] + e[2] * e[2])
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(
            rot_rmse <= 1f64.to_radians(),
            "rotation RMSE {} deg",
            rot_rmse.to_degrees()
        );
        assert!(t_rmse <= 1.0, "translation RMSE {t_rmse} px");
    }

    #[test]
    fn smoothness_term_gauge_invariant() {
        // Applying one common motion to every section and composing every
        // estimate with its inverse leaves the smoothness term nearly
        // unchanged (only resampling error). Needs features wide enough
        // that bilinear resampling barely attenuates their gradients.
        let dims = [64, 64];
        let n = 6;
        let base = {
            let mut s = Section::zeros(dims, [1.0, 1.0]);
            let c = [(dims[0] - 1) as f64 / 2.0, (dims[1] - 1) as f64 / 2.0];
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let x = i as f64 - c[0];
                    let y = j as f64 - c[1];
                    let body = 0.7 * (-(x * x / (2.0 * 169.0) + y * y / (2.0 * 86.0))).exp();
                    let m1 = 0.5 * (-((x - 12.0).powi(2) + y * y) / (2.0 * 64.0)).exp();
                    let idx = s.idx(i, j);
                    s.samples[idx] = body + m1;
                }
            }
            s
        };
        let mut sections = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..n {
            let m = RigidMotion::new(
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            sections.push(apply_rigid(&base, &m));
        }
        let stack = uniform_stack(sections);
        let prior = RigidPrior::new(0.2, 3.0, 1.0).unwrap();
        let motions = vec![RigidMotion::IDENTITY; n];

        let g = RigidMotion::new(0.12, 0.8, -0.6);
        let moved = uniform_stack(stack.sections.iter().map(|s| apply_rigid(s, &g)).collect());
        let adjusted: Vec<RigidMotion> = motions.iter().map(|m| g.inverse().compose(m)).collect();

        let (_, _, s0, _) = rigid_energy(&stack, &motions, &prior, None, 0.0, None).unwrap();
        let (_, _, s1, _) = rigid_energy(&moved, &adjusted, &prior, None, 0.0, None).unwrap();
        let rel = (s1 - s0).abs() / s0.max(1e-12);
        assert!(rel <= 0.01, "smoothness changed by {rel}: {s0} vs {s1}");
    }

    #[test]
    fn zero_alpha_matches_atlas_free_exactly() {
        let stack = {
            let mut sections: Vec<Section> = (0..4)
                .map(|k| band_limited_section([14, 14], 80 + k))
                .collect();
            for s in sections.iter_mut() {
                s.alpha = 0.0;
            }
            uniform_stack(sections)
        };
        let atlas = uniform_stack((0..4).map(|k| band_limited_section([14, 14], 90 + k)).collect())
            .to_volume();
        let prior = RigidPrior::new(0.2, 2.0, 0.8).unwrap();
        let cfg = RigidOptConfig {
            step_size: 0.3,
            max_iters: 40,
            rel_tol: 1e-8,
        };
        let init = vec![RigidMotion::new(0.02, 0.3, -0.1); 4];
        let with_atlas =
            optimize_rigid(&stack, &init, &prior, Some(&atlas), 1.0, None, &cfg).unwrap();
        let without = optimize_rigid(&stack, &init, &prior, None, 0.0, None, &cfg).unwrap();
        assert_eq!(with_atlas.trace.len(), without.trace.len());
        for (a, b) in with_atlas.trace.iter().zip(&without.trace) {
            assert!((a.total - b.total).abs() <= 1e-10 * b.total.abs().max(1.0));
        }
        for (a, b) in with_atlas.motions.iter().zip(&without.motions) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn factor_global_pose_recovers_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let truth: Vec<RigidMotion> = (0..7)
            .map(|_| {
                RigidMotion::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();
        let g = RigidMotion::new(0.3, 1.5, -2.0);
        // Estimates differ from truth by the common right-composed gauge.
        let estimated: Vec<RigidMotion> = truth.iter().map(|t| t.compose(&g.inverse())).collect();
        let errors = gauged_errors(&estimated, &truth);
        for e in errors {
            assert!(e[0].abs() < 1e-9 && e[1].abs() < 1e-9 && e[2].abs() < 1e-9, "{e:?}");
        }
    }
}
