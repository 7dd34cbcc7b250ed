//! Foreground mask generation for masked-cost matching.
//!
//! The background threshold is estimated RANSAC-style: repeatedly fit a
//! Gaussian to a minimal random sample of intensities, score the fit by how
//! many voxels fall inside its inlier band, keep the best consensus set, and
//! refit on it. Under the model the consensus is the (bright) foreground
//! mode, and the threshold is its mean minus two standard deviations. The
//! binary mask is then denoised with morphological opening and closing.

use crate::error::{Error, Result};
use crate::grid::{Volume, VolumeKind};
use rand::prelude::*;
use serde::{Deserialize, Serialize};

/// Parameters of threshold estimation and mask denoising.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskParams {
    /// Number of random fits to score.
    pub ransac_iters: usize,
    /// Half-width of the inlier band (intensity units); `None` derives the
    /// band from the fit's standard deviation (three sigma, so the refit
    /// sees the foreground distribution essentially untruncated).
    pub inlier_band: Option<f64>,
    /// Opening radius in voxels (0 disables).
    pub open_radius: usize,
    /// Closing radius in voxels (0 disables).
    pub close_radius: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            ransac_iters: 64,
            inlier_band: None,
            open_radius: 1,
            close_radius: 1,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.ransac_iters == 0 {
            return Err(Error::InvalidGeometry("ransac_iters must be >= 1".into()));
        }
        if let Some(b) = self.inlier_band {
            if !(b > 0.0) {
                return Err(Error::InvalidGeometry("inlier band must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Estimates the background threshold: foreground mean minus two foreground
/// standard deviations, with the foreground found by consensus.
///
/// The foreground is assumed to be the bright mode, so candidate fits are
/// drawn from voxels above the global mean; inliers are counted (and the
/// consensus refit runs) over the whole image. Ties on inlier count prefer
/// the brighter fit, then the earlier iteration.
pub fn estimate_background_threshold(
    v: &Volume,
    p: &MaskParams,
    rng: &mut impl Rng,
) -> Result<f64> {
    p.validate()?;
    if v.kind != VolumeKind::Intensity {
        return Err(Error::ExpectedIntensityVolume);
    }
    let samples = v.samples();
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::ConstantImage);
    }
    let global_mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let candidates: Vec<f64> = samples
        .iter()
        .cloned()
        .filter(|&x| x > global_mean)
        .collect();
    let pool: &[f64] = if candidates.is_empty() { samples } else { &candidates };

    let n = pool.len();
    let mut best: Option<(usize, f64, f64)> = None; // (count, mean, band)
    for _ in 0..p.ransac_iters {
        // Minimal sample for a (mean, sigma) fit.
        let a = pool[rng.gen_range(0..n)];
        let b = pool[rng.gen_range(0..n)];
        let mean = 0.5 * (a + b);
        let sigma = 0.5 * (a - b).abs();
        let band = match p.inlier_band {
            Some(w) => w,
            None => 3.0 * sigma,
        };
        let count = if band == 0.0 {
            // Degenerate pair: score exact matches only.
            samples.iter().filter(|&&x| x == mean).count()
        } else {
            samples.iter().filter(|&&x| (x - mean).abs() <= band).count()
        };
        if better(&best, count, mean) {
            best = Some((count, mean, band));
        }
    }
    let (_, mut mean, mut band) = best.expect("at least one iteration ran");

    // Consensus refinement: refit on the inliers, re-deriving the band from
    // the refit spread unless it was given explicitly.
    let mut sigma = 0.0;
    for _ in 0..2 {
        let inliers: Vec<f64> = if band == 0.0 {
            samples.iter().cloned().filter(|&x| x == mean).collect()
        } else {
            samples
                .iter()
                .cloned()
                .filter(|&x| (x - mean).abs() <= band)
                .collect()
        };
        let m = inliers.iter().sum::<f64>() / inliers.len() as f64;
        let var = inliers.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / inliers.len() as f64;
        mean = m;
        sigma = var.sqrt();
        if p.inlier_band.is_none() {
            band = 3.0 * sigma;
        }
    }
    Ok(mean - 2.0 * sigma)
}

fn better(best: &Option<(usize, f64, f64)>, count: usize, mean: f64) -> bool {
    match best {
        None => true,
        Some((bc, bm, _)) => count > *bc || (count == *bc && mean > *bm),
    }
}

/// Thresholds at the estimated background value and denoises with binary
/// opening then closing (discrete-ball structuring element). An empty
/// result is returned as-is; callers decide whether to warn.
pub fn make_brain_mask(v: &Volume, p: &MaskParams, rng: &mut impl Rng) -> Result<Volume> {
    let threshold = estimate_background_threshold(v, p, rng)?;
    let mut mask: Vec<bool> = v.samples().iter().map(|&x| x >= threshold).collect();
    if p.open_radius > 0 {
        mask = erode(&mask, v.dims, p.open_radius);
        mask = dilate(&mask, v.dims, p.open_radius);
    }
    if p.close_radius > 0 {
        mask = dilate(&mask, v.dims, p.close_radius);
        mask = erode(&mask, v.dims, p.close_radius);
    }
    Volume::new(
        v.dims,
        v.spacing,
        v.origin,
        VolumeKind::Label,
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
}

fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn erode(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    morph(mask, dims, radius, true)
}

fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    morph(mask, dims, radius, false)
}

fn morph(mask: &[bool], dims: [usize; 3], radius: usize, erode: bool) -> Vec<bool> {
    let offsets = ball_offsets(radius);
    let [nx, ny, nz] = dims;
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut out = vec![false; mask.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut all = true;
                let mut any = false;
                for o in &offsets {
                    let (ii, jj, kk) = (i as isize + o[0], j as isize + o[1], k as isize + o[2]);
                    let val = if ii < 0
                        || jj < 0
                        || kk < 0
                        || ii >= nx as isize
                        || jj >= ny as isize
                        || kk >= nz as isize
                    {
                        // Outside the grid counts as background.
                        false
                    } else {
                        mask[idx(ii as usize, jj as usize, kk as usize)]
                    };
                    all &= val;
                    any |= val;
                    if erode && !all {
                        break;
                    }
                    if !erode && any {
                        break;
                    }
                }
                out[idx(i, j, k)] = if erode { all } else { any };
            }
        }
    }
    out
}
