//! Dense scalar/vector grids, interpolation, warping, and the difference
//! operators the energies are built from.
//!
//! Conventions used throughout the crate:
//! - samples are stored x-fastest: `idx = i + nx * (j + ny * k)`;
//! - positions are physical (mm): `x = origin + index * spacing`;
//! - out-of-domain sampling clamps to the boundary value;
//! - label volumes are only ever resampled nearest-neighbor;
//! - every energy integrates with voxel volume / pixel area weights so
//!   values are resolution-consistent.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Whether voxel values are continuous intensities or discrete labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// Dense 3D scalar grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: VolumeKind,
    samples: Vec<f64>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be > 0, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if samples.len() != n {
            return Err(Error::DimMismatch(format!(
                "expected {n} samples for dims {dims:?}, got {}",
                samples.len()
            )));
        }
        if kind == VolumeKind::Intensity && samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry(
                "intensity samples must be finite".into(),
            ));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            kind,
            samples,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], kind: VolumeKind) -> Self {
        Volume {
            dims,
            spacing,
            origin,
            kind,
            samples: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Builds a volume by evaluating `f` at every voxel's physical position.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(f64, f64, f64) -> f64,
    ) -> Self {
        let mut v = Volume::zeros(dims, spacing, origin, kind);
        for k in 0..dims[2] {
            let z = origin[2] + k as f64 * spacing[2];
            for j in 0..dims[1] {
                let y = origin[1] + j as f64 * spacing[1];
                for i in 0..dims[0] {
                    let x = origin[0] + i as f64 * spacing[0];
                    let idx = v.idx(i, j, k);
                    v.samples[idx] = f(x, y, z);
                }
            }
        }
        v
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.samples[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.idx(i, j, k);
        self.samples[idx] = v;
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn num_voxels(&self) -> usize {
        self.samples.len()
    }

    /// Physical volume of one voxel (mm^3).
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Physical area of one in-plane pixel (mm^2).
    pub fn pixel_area(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }

    /// Physical position of voxel (i, j, k).
    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Physical extent of the grid on each axis (distance first to last node).
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    pub fn same_frame(&self, other: &Volume, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() <= tol)
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Trilinear interpolation at a physical point; clamps to the boundary
    /// outside the domain. Errors on label volumes.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Result<f64> {
        if self.kind == VolumeKind::Label {
            return Err(Error::InterpolationOnLabels);
        }
        Ok(self.sample_trilinear_unchecked(p))
    }

    #[inline]
    pub(crate) fn sample_trilinear_unchecked(&self, p: [f64; 3]) -> f64 {
        let (c, f) = self.cell_of(p);
        let [i0, j0, k0] = c;
        let i1 = (i0 + 1).min(self.dims[0] - 1);
        let j1 = (j0 + 1).min(self.dims[1] - 1);
        let k1 = (k0 + 1).min(self.dims[2] - 1);
        let [fx, fy, fz] = f;

        let v000 = self.at(i0, j0, k0);
        let v100 = self.at(i1, j0, k0);
        let v010 = self.at(i0, j1, k0);
        let v110 = self.at(i1, j1, k0);
        let v001 = self.at(i0, j0, k1);
        let v101 = self.at(i1, j0, k1);
        let v011 = self.at(i0, j1, k1);
        let v111 = self.at(i1, j1, k1);

        let c00 = v000 + fx * (v100 - v000);
        let c10 = v010 + fx * (v110 - v010);
        let c01 = v001 + fx * (v101 - v001);
        let c11 = v011 + fx * (v111 - v011);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        c0 + fz * (c1 - c0)
    }

    /// Trilinear value together with the exact gradient of the interpolant
    /// with respect to the physical sample position. The gradient is zero
    /// along axes where the point is clamped outside the domain; exactly at
    /// interior nodes the two one-sided cell derivatives are averaged so the
    /// choice is mirror-consistent.
    pub(crate) fn sample_trilinear_with_grad(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        sample_trilinear_grad_raw(self.dims, self.spacing, self.origin, &self.samples, p)
    }

    /// Nearest-neighbor sample at a physical point (clamped).
    pub fn sample_nearest(&self, p: [f64; 3]) -> f64 {
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let u = (p[d] - self.origin[d]) / self.spacing[d];
            let r = u.round();
            let r = r.clamp(0.0, (self.dims[d] - 1) as f64);
            idx[d] = r as usize;
        }
        self.at(idx[0], idx[1], idx[2])
    }

    /// Base cell index and in-cell fractions for a physical point. At exact
    /// nodes (including the far boundary) the fraction is zero, which keeps
    /// node sampling bit-exact.
    #[inline]
    fn cell_of(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for d in 0..3 {
            let u = (p[d] - self.origin[d]) / self.spacing[d];
            let max = (self.dims[d] - 1) as f64;
            let uc = u.clamp(0.0, max);
            let i0 = uc.floor();
            cell[d] = i0 as usize;
            frac[d] = uc - i0;
            if self.dims[d] == 1 {
                cell[d] = 0;
                frac[d] = 0.0;
            }
        }
        (cell, frac)
    }

    /// Set of distinct values, for label volumes.
    pub fn label_alphabet(&self) -> Vec<i64> {
        let mut set: Vec<i64> = self.samples.iter().map(|&v| v as i64).collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Dense 3D vector field on the same lattice layout as `Volume`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField3D {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// One scalar array per spatial axis, x-fastest order.
    pub components: [Vec<f64>; 3],
}

impl VectorField3D {
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        VectorField3D {
            dims,
            spacing,
            origin,
            components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn like(v: &Volume) -> Self {
        VectorField3D::zeros(v.dims, v.spacing, v.origin)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn vector_at(&self, idx: usize) -> [f64; 3] {
        [
            self.components[0][idx],
            self.components[1][idx],
            self.components[2][idx],
        ]
    }

    /// Largest vector magnitude on the grid.
    pub fn max_norm(&self) -> f64 {
        let mut m: f64 = 0.0;
        for idx in 0..self.num_voxels() {
            let v = self.vector_at(idx);
            m = m.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        }
        m
    }

    pub fn scale(&mut self, s: f64) {
        for c in self.components.iter_mut() {
            for v in c.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Trilinear interpolation of all three components at a physical point.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> [f64; 3] {
        // Reuse the scalar sampler via a lightweight per-component view.
        let mut out = [0.0f64; 3];
        for (d, comp) in self.components.iter().enumerate() {
            out[d] = sample_trilinear_raw(self.dims, self.spacing, self.origin, comp, p);
        }
        out
    }

    /// Same as `sample_trilinear` but also returns the 3x3 Jacobian of the
    /// interpolated vector with respect to the physical position
    /// (`jac[r][c] = d out_r / d p_c`).
    pub(crate) fn sample_trilinear_with_jac(&self, p: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut out = [0.0f64; 3];
        let mut jac = [[0.0f64; 3]; 3];
        for (d, comp) in self.components.iter().enumerate() {
            let (v, g) = sample_trilinear_grad_raw(self.dims, self.spacing, self.origin, comp, p);
            out[d] = v;
            jac[d] = g;
        }
        (out, jac)
    }
}

/// Per-axis interpolation stencil: up to two (index, weight) pairs for the
/// value and up to two for the derivative (already scaled per mm).
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisStencil {
    pub value: [(usize, f64); 2],
    pub deriv: [(usize, f64); 2],
}

/// Builds the stencil for one axis at grid coordinate `u` (units of voxels).
///
/// Values clamp to the boundary. The derivative is zero outside the domain,
/// the in-cell slope at generic points, the centered average of the two
/// adjacent cell slopes exactly at interior nodes (mirror-consistent), and
/// the one-sided cell slope at boundary nodes.
pub(crate) fn axis_stencil(u: f64, n: usize, spacing: f64) -> AxisStencil {
    if n == 1 {
        return AxisStencil {
            value: [(0, 1.0), (0, 0.0)],
            deriv: [(0, 0.0), (0, 0.0)],
        };
    }
    let max = (n - 1) as f64;
    let clamped = u < 0.0 || u > max;
    let uc = u.clamp(0.0, max);
    let i0 = uc.floor() as usize;
    let frac = uc - i0 as f64;
    let value = if frac == 0.0 {
        [(i0, 1.0), (i0, 0.0)]
    } else {
        [(i0, 1.0 - frac), (i0 + 1, frac)]
    };
    let deriv = if clamped {
        [(0, 0.0), (0, 0.0)]
    } else if frac > 0.0 {
        [(i0, -1.0 / spacing), (i0 + 1, 1.0 / spacing)]
    } else if i0 == 0 {
        [(0, -1.0 / spacing), (1, 1.0 / spacing)]
    } else if i0 == n - 1 {
        [(n - 2, -1.0 / spacing), (n - 1, 1.0 / spacing)]
    } else {
        [(i0 - 1, -0.5 / spacing), (i0 + 1, 0.5 / spacing)]
    };
    AxisStencil { value, deriv }
}

pub(crate) fn sample_trilinear_raw(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    samples: &[f64],
    p: [f64; 3],
) -> f64 {
    let (c, f) = cell_frac_raw(dims, spacing, origin, p);
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let i1 = (c[0] + 1).min(dims[0] - 1);
    let j1 = (c[1] + 1).min(dims[1] - 1);
    let k1 = (c[2] + 1).min(dims[2] - 1);
    let (fx, fy, fz) = (f[0], f[1], f[2]);
    let v000 = samples[idx(c[0], c[1], c[2])];
    let v100 = samples[idx(i1, c[1], c[2])];
    let v010 = samples[idx(c[0], j1, c[2])];
    let v110 = samples[idx(i1, j1, c[2])];
    let v001 = samples[idx(c[0], c[1], k1)];
    let v101 = samples[idx(i1, c[1], k1)];
    let v011 = samples[idx(c[0], j1, k1)];
    let v111 = samples[idx(i1, j1, k1)];
    let c00 = v000 + fx * (v100 - v000);
    let c10 = v010 + fx * (v110 - v010);
    let c01 = v001 + fx * (v101 - v001);
    let c11 = v011 + fx * (v111 - v011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    c0 + fz * (c1 - c0)
}

#[inline]
fn cell_frac_raw(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    p: [f64; 3],
) -> ([usize; 3], [f64; 3]) {
    let mut cell = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for d in 0..3 {
        let u = (p[d] - origin[d]) / spacing[d];
        let max = (dims[d] - 1) as f64;
        let uc = u.clamp(0.0, max);
        let i0 = uc.floor();
        cell[d] = i0 as usize;
        frac[d] = uc - i0;
        if dims[d] == 1 {
            cell[d] = 0;
            frac[d] = 0.0;
        }
    }
    (cell, frac)
}

pub(crate) fn sample_trilinear_grad_raw(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    samples: &[f64],
    p: [f64; 3],
) -> (f64, [f64; 3]) {
    let sx = axis_stencil((p[0] - origin[0]) / spacing[0], dims[0], spacing[0]);
    let sy = axis_stencil((p[1] - origin[1]) / spacing[1], dims[1], spacing[1]);
    let sz = axis_stencil((p[2] - origin[2]) / spacing[2], dims[2], spacing[2]);
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let reduce = |ax: &[(usize, f64); 2], ay: &[(usize, f64); 2], az: &[(usize, f64); 2]| -> f64 {
        let mut acc = 0.0;
        for &(k, wz) in az.iter() {
            if wz == 0.0 {
                continue;
            }
            for &(j, wy) in ay.iter() {
                if wy == 0.0 {
                    continue;
                }
                for &(i, wx) in ax.iter() {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * samples[idx(i, j, k)];
                }
            }
        }
        acc
    };
    let val = reduce(&sx.value, &sy.value, &sz.value);
    let grad = [
        reduce(&sx.deriv, &sy.value, &sz.value),
        reduce(&sx.value, &sy.deriv, &sz.value),
        reduce(&sx.value, &sy.value, &sz.deriv),
    ];
    (val, grad)
}

/// One imaged 2D section with optional validity mask and data weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub dims: [usize; 2],
    pub spacing: [f64; 2],
    pub samples: Vec<f64>,
    /// `true` marks pixels that carry data; `None` means all pixels valid.
    pub mask: Option<Vec<bool>>,
    /// Data-term weight; 0 marks a damaged/missing section.
    pub alpha: f64,
}

impl Section {
    pub fn new(dims: [usize; 2], spacing: [f64; 2], samples: Vec<f64>) -> Result<Self> {
        if dims[0] == 0 || dims[1] == 0 || spacing[0] <= 0.0 || spacing[1] <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "bad section geometry dims {dims:?} spacing {spacing:?}"
            )));
        }
        if samples.len() != dims[0] * dims[1] {
            return Err(Error::DimMismatch(format!(
                "expected {} samples, got {}",
                dims[0] * dims[1],
                samples.len()
            )));
        }
        Ok(Section {
            dims,
            spacing,
            samples,
            mask: None,
            alpha: 1.0,
        })
    }

    pub fn zeros(dims: [usize; 2], spacing: [f64; 2]) -> Self {
        Section {
            dims,
            spacing,
            samples: vec![0.0; dims[0] * dims[1]],
            mask: None,
            alpha: 1.0,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.samples.len() {
            return Err(Error::DimMismatch(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                self.samples.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::InvalidGeometry(format!("alpha must be >= 0, got {alpha}")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.dims[0] * j
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.samples[self.idx(i, j)]
    }

    pub fn pixel_area(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }

    /// Physical center of the section, the rotation center for rigid motions.
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.dims[0] - 1) as f64 * self.spacing[0],
            0.5 * (self.dims[1] - 1) as f64 * self.spacing[1],
        ]
    }

    /// Bilinear interpolation at a physical in-plane point (clamped).
    pub fn sample_bilinear(&self, p: [f64; 2]) -> f64 {
        self.sample_bilinear_with_grad(p).0
    }

    /// Bilinear value plus exact interpolant gradient. The gradient is zero
    /// where the point is clamped and mirror-consistent exactly at nodes
    /// (see `axis_stencil`).
    pub fn sample_bilinear_with_grad(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let sx = axis_stencil(p[0] / self.spacing[0], self.dims[0], self.spacing[0]);
        let sy = axis_stencil(p[1] / self.spacing[1], self.dims[1], self.spacing[1]);
        let reduce = |ax: &[(usize, f64); 2], ay: &[(usize, f64); 2]| -> f64 {
            let mut acc = 0.0;
            for &(j, wy) in ay.iter() {
                if wy == 0.0 {
                    continue;
                }
                for &(i, wx) in ax.iter() {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * self.at(i, j);
                }
            }
            acc
        };
        let val = reduce(&sx.value, &sy.value);
        let grad = [reduce(&sx.deriv, &sy.value), reduce(&sx.value, &sy.deriv)];
        (val, grad)
    }

    /// Nearest-neighbor mask lookup at a physical point. Without an explicit
    /// mask every pull is valid (clamp padding); with one, pixels pulled from
    /// outside the domain count as invalid.
    pub fn mask_nearest(&self, p: [f64; 2]) -> bool {
        let Some(mask) = &self.mask else {
            return true;
        };
        let mut idx = [0usize; 2];
        for d in 0..2 {
            let u = p[d] / self.spacing[d];
            let r = u.round();
            if r < -0.5 || r > (self.dims[d] - 1) as f64 + 0.5 {
                return false;
            }
            idx[d] = r.clamp(0.0, (self.dims[d] - 1) as f64) as usize;
        }
        mask[self.idx(idx[0], idx[1])]
    }
}

/// Ordered 2D sections at strictly increasing z positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionStack {
    pub sections: Vec<Section>,
    pub z_positions: Vec<f64>,
    /// Section spacing (mm).
    pub delta: f64,
}

impl SectionStack {
    pub fn new(sections: Vec<Section>, z_positions: Vec<f64>, delta: f64) -> Result<Self> {
        if sections.is_empty() {
            return Err(Error::InvalidGeometry("stack has no sections".into()));
        }
        if sections.len() != z_positions.len() {
            return Err(Error::CountMismatch {
                sections: sections.len(),
                motions: z_positions.len(),
            });
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidGeometry(format!("delta must be > 0, got {delta}")));
        }
        let dims = sections[0].dims;
        let spacing = sections[0].spacing;
        for (i, s) in sections.iter().enumerate() {
            if s.dims != dims || s.spacing != spacing {
                return Err(Error::DimMismatch(format!(
                    "section {i} geometry {:?}/{:?} differs from section 0 {:?}/{:?}",
                    s.dims, s.spacing, dims, spacing
                )));
            }
        }
        for w in z_positions.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidGeometry(format!(
                    "z positions must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
            if (w[1] - w[0] - delta).abs() > 1e-9 {
                return Err(Error::InvalidGeometry(format!(
                    "z step {} is inconsistent with delta {delta}",
                    w[1] - w[0]
                )));
            }
        }
        Ok(SectionStack {
            sections,
            z_positions,
            delta,
        })
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn dims(&self) -> [usize; 2] {
        self.sections[0].dims
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.sections[0].spacing
    }

    /// Stacks the sections as-is into a volume (identity motions).
    pub fn to_volume(&self) -> Volume {
        let [nx, ny] = self.dims();
        let [sx, sy] = self.spacing();
        let mut v = Volume::zeros(
            [nx, ny, self.len()],
            [sx, sy, self.delta],
            [0.0, 0.0, self.z_positions[0]],
            VolumeKind::Intensity,
        );
        for (k, s) in self.sections.iter().enumerate() {
            for j in 0..ny {
                for i in 0..nx {
                    v.set(i, j, k, s.at(i, j));
                }
            }
        }
        v
    }
}

/// Warps a volume by a displacement field: `out(x) = v(x + disp(x))`.
/// Intensity volumes resample trilinearly, label volumes nearest-neighbor.
pub fn warp_volume(v: &Volume, disp: &VectorField3D) -> Result<Volume> {
    if disp.dims != v.dims {
        return Err(Error::DimMismatch(format!(
            "displacement dims {:?} != volume dims {:?}",
            disp.dims, v.dims
        )));
    }
    let mut out = Volume::zeros(v.dims, v.spacing, v.origin, v.kind);
    let [nx, ny, nz] = v.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = out.idx(i, j, k);
                let x = out.position(i, j, k);
                let d = disp.vector_at(idx);
                let p = [x[0] + d[0], x[1] + d[1], x[2] + d[2]];
                let val = match v.kind {
                    VolumeKind::Intensity => v.sample_trilinear_unchecked(p),
                    VolumeKind::Label => v.sample_nearest(p),
                };
                out.samples_mut()[idx] = val;
            }
        }
    }
    Ok(out)
}

/// Centered z-difference with the gradient forced to zero on the two
/// boundary slices: `out(.,.,k) = (v(.,.,k+1) - v(.,.,k-1)) / (2 delta)`.
pub fn z_difference(v: &Volume, delta: f64) -> Result<Volume> {
    let [nx, ny, nz] = v.dims;
    if nz < 2 {
        return Err(Error::TooFewSlices(nz));
    }
    let mut out = Volume::zeros(v.dims, v.spacing, v.origin, VolumeKind::Intensity);
    let inv = 1.0 / (2.0 * delta);
    for k in 1..nz - 1 {
        for j in 0..ny {
            for i in 0..nx {
                let d = (v.at(i, j, k + 1) - v.at(i, j, k - 1)) * inv;
                out.set(i, j, k, d);
            }
        }
    }
    Ok(out)
}

/// Sobolev stacking penalty: `1/2 * sum_i || D_h I(., z_i) ||_2^2` with the
/// per-section norm realized as a pixel-area-weighted sum.
pub fn smoothness_energy(v: &Volume, delta: f64) -> Result<f64> {
    let d = z_difference(v, delta)?;
    let area = v.pixel_area();
    let mut acc = 0.0;
    for s in d.samples() {
        acc += s * s;
    }
    Ok(0.5 * acc * area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Axis {
    X,
    Y,
    Z,
}

/// Single-axis first derivative. In-plane axes use centered differences in
/// the interior and one-sided differences at the boundary; the z axis uses
/// the forced-zero boundary rule.
pub(crate) fn axis_derivative(v: &Volume, axis: Axis) -> Volume {
    let [nx, ny, nz] = v.dims;
    let mut out = Volume::zeros(v.dims, v.spacing, v.origin, VolumeKind::Intensity);
    let (n, s) = match axis {
        Axis::X => (nx, v.spacing[0]),
        Axis::Y => (ny, v.spacing[1]),
        Axis::Z => (nz, v.spacing[2]),
    };
    let get = |i: usize, j: usize, k: usize, a: usize| -> f64 {
        match axis {
            Axis::X => v.at(a, j, k),
            Axis::Y => v.at(i, a, k),
            Axis::Z => v.at(i, j, a),
        }
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let a = match axis {
                    Axis::X => i,
                    Axis::Y => j,
                    Axis::Z => k,
                };
                let d = if n == 1 {
                    0.0
                } else if a > 0 && a + 1 < n {
                    (get(i, j, k, a + 1) - get(i, j, k, a - 1)) / (2.0 * s)
                } else if axis == Axis::Z {
                    0.0
                } else if a == 0 {
                    (get(i, j, k, 1) - get(i, j, k, 0)) / s
                } else {
                    (get(i, j, k, n - 1) - get(i, j, k, n - 2)) / s
                };
                out.set(i, j, k, d);
            }
        }
    }
    out
}

/// Squared Sobolev H^k norm: sum over multi-indices |h| <= k of the squared
/// L2 norm of the mixed finite-difference derivative, voxel-volume weighted.
pub fn sobolev_norm_hk(v: &Volume, k: usize) -> Result<f64> {
    if v.kind != VolumeKind::Intensity {
        return Err(Error::ExpectedIntensityVolume);
    }
    if k > 2 {
        return Err(Error::UnsupportedSobolevOrder(k));
    }
    let vol = v.voxel_volume();
    let mut total = 0.0;
    for h1 in 0..=k {
        for h2 in 0..=(k - h1) {
            for h3 in 0..=(k - h1 - h2) {
                let mut d = v.clone();
                for _ in 0..h1 {
                    d = axis_derivative(&d, Axis::X);
                }
                for _ in 0..h2 {
                    d = axis_derivative(&d, Axis::Y);
                }
                for _ in 0..h3 {
                    d = axis_derivative(&d, Axis::Z);
                }
                let mut acc = 0.0;
                for s in d.samples() {
                    acc += s * s;
                }
                total += acc * vol;
            }
        }
    }
    Ok(total)
}

/// In-plane + through-plane gradient of an intensity volume, centered in the
/// interior and one-sided at every boundary. Units: intensity per mm.
pub fn spatial_gradient_volume(v: &Volume) -> Result<VectorField3D> {
    if v.kind != VolumeKind::Intensity {
        return Err(Error::ExpectedIntensityVolume);
    }
    let [nx, ny, nz] = v.dims;
    let mut g = VectorField3D::like(v);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.idx(i, j, k);
                g.components[0][idx] = one_sided_centered(
                    |a| v.at(a, j, k),
                    i,
                    nx,
                    v.spacing[0],
                );
                g.components[1][idx] = one_sided_centered(
                    |a| v.at(i, a, k),
                    j,
                    ny,
                    v.spacing[1],
                );
                g.components[2][idx] = one_sided_centered(
                    |a| v.at(i, j, a),
                    k,
                    nz,
                    v.spacing[2],
                );
            }
        }
    }
    Ok(g)
}

/// 2D in-plane gradient of a section, centered interior / one-sided boundary.
pub fn spatial_gradient_section(s: &Section) -> (Vec<f64>, Vec<f64>) {
    let [nx, ny] = s.dims;
    let mut gx = vec![0.0; nx * ny];
    let mut gy = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let idx = s.idx(i, j);
            gx[idx] = one_sided_centered(|a| s.at(a, j), i, nx, s.spacing[0]);
            gy[idx] = one_sided_centered(|a| s.at(i, a), j, ny, s.spacing[1]);
        }
    }
    (gx, gy)
}

#[inline]
fn one_sided_centered(get: impl Fn(usize) -> f64, a: usize, n: usize, s: f64) -> f64 {
    if n == 1 {
        0.0
    } else if a > 0 && a + 1 < n {
        (get(a + 1) - get(a - 1)) / (2.0 * s)
    } else if a == 0 {
        (get(1) - get(0)) / s
    } else {
        (get(n - 1) - get(n - 2)) / s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_volume(dims: [usize; 3], c: f64) -> Volume {
        Volume::from_fn(dims, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], VolumeKind::Intensity, |_, _, _| c)
    }

    #[test]
    fn trilinear_constant() {
        let v = constant_volume([4, 4, 4], 3.0);
        for p in [[0.1, 2.7, 1.3], [-5.0, 0.0, 0.0], [10.0, 10.0, 10.0]] {
            assert_eq!(v.sample_trilinear(p).unwrap(), 3.0);
        }
    }

    #[test]
    fn trilinear_reproduces_nodes() {
        let v = Volume::from_fn(
            [3, 4, 5],
            [0.5, 0.5, 0.5],
            [1.0, -2.0, 0.0],
            VolumeKind::Intensity,
            |x, y, z| x * 7.0 + y * y - z * 3.0 + x * y * z,
        );
        for k in 0..5 {
            for j in 0..4 {
                for i in 0..3 {
                    let p = v.position(i, j, k);
                    assert_eq!(v.sample_trilinear(p).unwrap(), v.at(i, j, k));
                }
            }
        }
    }

    #[test]
    fn trilinear_cell_center_averages_corners() {
        // 2x2x2 with 0/1 on opposite corners: all 8 weights are 1/8.
        let mut v = Volume::zeros([2, 2, 2], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], VolumeKind::Intensity);
        v.set(0, 0, 0, 0.0);
        v.set(1, 1, 1, 1.0);
        let mean: f64 = v.samples().iter().sum::<f64>() / 8.0;
        let got = v.sample_trilinear([0.5, 0.5, 0.5]).unwrap();
        assert!((got - mean).abs() < 1e-15);
    }

    #[test]
    fn trilinear_stays_in_stencil_hull() {
        let v = Volume::from_fn(
            [5, 5, 5],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |x, y, z| (x * 12.9898 + y * 78.233 + z * 37.719).sin(),
        );
        let lo = v.samples().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.samples().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for t in 0..200 {
            let p = [
                (t as f64 * 0.137) % 6.0 - 1.0,
                (t as f64 * 0.291) % 6.0 - 1.0,
                (t as f64 * 0.433) % 6.0 - 1.0,
            ];
            let s = v.sample_trilinear(p).unwrap();
            assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }

    #[test]
    fn trilinear_rejects_labels() {
        let v = Volume::zeros([2, 2, 2], [1.0; 3], [0.0; 3], VolumeKind::Label);
        assert!(matches!(
            v.sample_trilinear([0.5, 0.5, 0.5]),
            Err(Error::InterpolationOnLabels)
        ));
    }

    #[test]
    fn trilinear_grad_matches_finite_difference() {
        let v = Volume::from_fn(
            [6, 6, 6],
            [0.7, 0.9, 1.1],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |x, y, z| (0.8 * x).sin() + (0.5 * y).cos() * z + 0.3 * x * y,
        );
        let h = 1e-6;
        for p in [[1.3, 2.2, 3.1], [0.45, 3.7, 1.9], [2.9, 1.1, 4.0]] {
            let (_, g) = v.sample_trilinear_with_grad(p);
            for d in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[d] += h;
                pm[d] -= h;
                let fd = (v.sample_trilinear(pp).unwrap() - v.sample_trilinear(pm).unwrap())
                    / (2.0 * h);
                assert!((g[d] - fd).abs() < 1e-6, "axis {d}: {} vs {}", g[d], fd);
            }
        }
    }

    #[test]
    fn warp_zero_displacement_is_identity() {
        let v = Volume::from_fn(
            [5, 4, 3],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |x, y, z| x + 10.0 * y + 100.0 * z,
        );
        let disp = VectorField3D::like(&v);
        let w = warp_volume(&v, &disp).unwrap();
        assert_eq!(w.samples(), v.samples());
    }

    #[test]
    fn warp_shifts_ramp() {
        // One-voxel shift along +x on a linear ramp in x.
        let v = Volume::from_fn(
            [8, 4, 4],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |x, _, _| x,
        );
        let mut disp = VectorField3D::like(&v);
        for d in disp.components[0].iter_mut() {
            *d = 1.0;
        }
        let w = warp_volume(&v, &disp).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..8 {
                    let expected = ((i + 1).min(7)) as f64; // clamped at the far edge
                    assert!((w.at(i, j, k) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_labels_nearest_preserves_alphabet() {
        let v = Volume::from_fn(
            [6, 6, 6],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            VolumeKind::Label,
            |x, y, z| ((x + 2.0 * y + 3.0 * z) as i64 % 4) as f64,
        );
        let mut disp = VectorField3D::like(&v);
        for c in disp.components.iter_mut() {
            for d in c.iter_mut() {
                *d = 0.5; // half-voxel translation
            }
        }
        let w = warp_volume(&v, &disp).unwrap();
        let in_alpha = v.label_alphabet();
        for &l in &w.label_alphabet() {
            assert!(in_alpha.contains(&l));
        }
        // No interpolated (fractional) values.
        for s in w.samples() {
            assert_eq!(*s, s.round());
        }
    }

    #[test]
    fn z_difference_constant_is_zero() {
        let v = constant_volume([4, 4, 6], 2.5);
        let d = z_difference(&v, 1.0).unwrap();
        assert!(d.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn z_difference_linear_slope() {
        let s = 1.7;
        let delta = 0.5;
        let v = Volume::from_fn(
            [3, 3, 6],
            [1.0, 1.0, delta],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |_, _, z| s * z,
        );
        let d = z_difference(&v, delta).unwrap();
        for k in 0..6 {
            let expected = if k == 0 || k == 5 { 0.0 } else { s };
            for j in 0..3 {
                for i in 0..3 {
                    assert!((d.at(i, j, k) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn z_difference_two_slices_all_boundary() {
        let v = Volume::from_fn(
            [3, 3, 2],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |_, _, z| 9.0 * z,
        );
        let d = z_difference(&v, 1.0).unwrap();
        assert!(d.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn z_difference_needs_two_slices() {
        let v = constant_volume([3, 3, 1], 0.0);
        assert!(matches!(z_difference(&v, 1.0), Err(Error::TooFewSlices(1))));
    }

    #[test]
    fn z_difference_is_linear() {
        let a = 1.3;
        let b = -0.7;
        let va = Volume::from_fn([4, 4, 5], [1.0; 3], [0.0; 3], VolumeKind::Intensity, |x, y, z| {
            (x + 0.3 * y * z).sin()
        });
        let vb = Volume::from_fn([4, 4, 5], [1.0; 3], [0.0; 3], VolumeKind::Intensity, |x, y, z| {
            (0.5 * x * y - z).cos()
        });
        let mut combo = va.clone();
        for (c, (sa, sb)) in combo
            .samples_mut()
            .iter_mut()
            .zip(va.samples().iter().zip(vb.samples()))
        {
            *c = a * sa + b * sb;
        }
        let d_combo = z_difference(&combo, 1.0).unwrap();
        let da = z_difference(&va, 1.0).unwrap();
        let db = z_difference(&vb, 1.0).unwrap();
        for idx in 0..d_combo.samples().len() {
            let want = a * da.samples()[idx] + b * db.samples()[idx];
            let got = d_combo.samples()[idx];
            let scale = want.abs().max(1.0);
            assert!((got - want).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn smoothness_energy_zero_for_z_constant() {
        let v = Volume::from_fn([5, 5, 7], [1.0; 3], [0.0; 3], VolumeKind::Intensity, |x, y, _| {
            x * y
        });
        assert_eq!(smoothness_energy(&v, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_energy_negated_slice() {
        // Constant stack with one interior slice negated: only the two
        // neighbors of the flipped slice see a nonzero difference of
        // magnitude 2c/(2 delta).
        let c = 0.8;
        let delta = 0.5;
        let dims = [4, 3, 7];
        let k0 = 3;
        let mut v = Volume::from_fn(
            dims,
            [1.0, 1.0, delta],
            [0.0, 0.0, 0.0],
            VolumeKind::Intensity,
            |_, _, _| c,
        );
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                v.set(i, j, k0, -c);
            }
        }
        let per_pixel = (2.0 * c / (2.0 * delta)).powi(2);
        let n_pixels = (dims[0] * dims[1]) as f64;
        let expected = 0.5 * per_pixel * 2.0 * n_pixels * 1.0; // pixel area 1
        let got = smoothness_energy(&v, delta).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn sobolev_h0_constant() {
        let c = 2.0;
        let dims = [4, 5, 6];
        let spacing = [0.5, 0.5, 0.25];
        let v = Volume::from_fn(dims, spacing, [0.0; 3], VolumeKind::Intensity, |_, _, _| c);
        let phys = (dims[0] * dims[1] * dims[2]) as f64 * spacing[0] * spacing[1] * spacing[2];
        let got = sobolev_norm_hk(&v, 0).unwrap();
        assert!((got - c * c * phys).abs() < 1e-12 * phys);
    }

    #[test]
    fn sobolev_zero_volume() {
        let v = constant_volume([3, 3, 3], 0.0);
        for k in 0..=2 {
            assert_eq!(sobolev_norm_hk(&v, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn sobolev_rejects_large_order() {
        let v = constant_volume([3, 3, 3], 0.0);
        assert!(matches!(
            sobolev_norm_hk(&v, 3),
            Err(Error::UnsupportedSobolevOrder(3))
        ));
    }

    #[test]
    fn sobolev_h1_ramp_matches_brute_force() {
        // Independent oracle: direct summation of the defining formula.
        let dims = [6, 5, 7];
        let spacing = [0.4, 0.5, 0.6];
        let (a, b, c, d) = (1.2, -0.8, 0.5, 0.3);
        let v = Volume::from_fn(dims, spacing, [0.0; 3], VolumeKind::Intensity, |x, y, z| {
            a * x + b * y + c * z + d
        });
        let vol = spacing[0] * spacing[1] * spacing[2];

        // Brute force: |f|^2 + |Dx f|^2 + |Dy f|^2 + |Dz f|^2, each summed
        // voxelwise with the same difference rules.
        let mut brute = 0.0;
        for term in [
            v.clone(),
            axis_derivative(&v, Axis::X),
            axis_derivative(&v, Axis::Y),
            axis_derivative(&v, Axis::Z),
        ] {
            brute += term.samples().iter().map(|s| s * s).sum::<f64>() * vol;
        }
        let got = sobolev_norm_hk(&v, 1).unwrap();
        assert!((got - brute).abs() <= 1e-12 * brute.max(1.0));

        // Closed form: L2 term + in-plane slopes over the full grid + the z
        // slope only on interior slices (forced-zero boundary rule).
        let n = (dims[0] * dims[1] * dims[2]) as f64;
        let l2: f64 = v.samples().iter().map(|s| s * s).sum::<f64>() * vol;
        let phys = n * vol;
        let z_interior = ((dims[2] - 2) * dims[0] * dims[1]) as f64 * vol;
        let closed = l2 + a * a * phys + b * b * phys + c * c * z_interior;
        assert!((got - closed).abs() <= 1e-9 * closed.max(1.0));
    }

    #[test]
    fn sobolev_monotone_in_order() {
        let v = Volume::from_fn([6, 6, 6], [0.8; 3], [0.0; 3], VolumeKind::Intensity, |x, y, z| {
            (x * 1.3).sin() + (y * 0.7 + z).cos()
        });
        let h0 = sobolev_norm_hk(&v, 0).unwrap();
        let h1 = sobolev_norm_hk(&v, 1).unwrap();
        let h2 = sobolev_norm_hk(&v, 2).unwrap();
        assert!(h1 >= h0);
        assert!(h2 >= h1);
    }

    #[test]
    fn gradient_constant_zero() {
        let v = constant_volume([4, 4, 4], 5.0);
        let g = spatial_gradient_volume(&v).unwrap();
        for c in &g.components {
            assert!(c.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradient_ramp_exact() {
        let s = 2.3;
        let v = Volume::from_fn([6, 5, 4], [0.5, 1.0, 1.0], [0.0; 3], VolumeKind::Intensity, |x, _, _| {
            s * x
        });
        let g = spatial_gradient_volume(&v).unwrap();
        for idx in 0..g.num_voxels() {
            assert!((g.components[0][idx] - s).abs() < 1e-12);
            assert_eq!(g.components[1][idx], 0.0);
            assert_eq!(g.components[2][idx], 0.0);
        }
    }

    #[test]
    fn gradient_product_image() {
        // f = x*y has gradient (y, x); centered differences are exact on
        // bilinear functions in the interior.
        let s = Section::new(
            [8, 8],
            [0.5, 0.5],
            (0..64)
                .map(|idx| {
                    let i = idx % 8;
                    let j = idx / 8;
                    (i as f64 * 0.5) * (j as f64 * 0.5)
                })
                .collect(),
        )
        .unwrap();
        let (gx, gy) = spatial_gradient_section(&s);
        for j in 1..7 {
            for i in 1..7 {
                let x = i as f64 * 0.5;
                let y = j as f64 * 0.5;
                assert!((gx[s.idx(i, j)] - y).abs() < 1e-12);
                assert!((gy[s.idx(i, j)] - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_validation() {
        let s = Section::zeros([4, 4], [1.0, 1.0]);
        let stack = SectionStack::new(vec![s.clone(), s.clone()], vec![0.0, 1.0], 1.0);
        assert!(stack.is_ok());
        let bad = SectionStack::new(vec![s.clone(), s.clone()], vec![1.0, 0.0], 1.0);
        assert!(bad.is_err());
        let held = SectionStack::new(vec![s.clone(), s], vec![0.0, 2.0], 1.0);
        assert!(held.is_err()); // inconsistent with delta
    }
}
