//! File formats: NRRD volumes/sections, PGM images, JSON stack manifests,
//! run configuration, and the run report.
//!
//! Readers reject rather than coerce: unsupported NRRD fields, unknown JSON
//! keys, and schema-version mismatches are hard errors, so a run is fully
//! reconstructible from its emitted report (config echo + seed).

pub mod nrrd;
pub mod pgm;

use crate::error::{Error, Result};
use crate::grid::{Section, SectionStack};
use crate::joint::JointConfig;
use crate::preprocess::MaskParams;
use crate::simulate::{BendParams, SimConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// One entry of a stack manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSection {
    pub file: String,
    /// Section plane position (mm).
    pub z_position: f64,
    /// Data weight; omitted means 1.0, 0 marks a damaged section.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Optional validity-mask image (PGM; zero pixels are excluded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

fn default_alpha() -> f64 {
    1.0
}

/// JSON manifest describing a section stack on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub schema_version: u32,
    /// In-plane pixel spacing (mm).
    pub pixel_spacing: [f64; 2],
    /// Section spacing (mm).
    pub delta: f64,
    pub sections: Vec<ManifestSection>,
}

/// Parses and structurally validates a manifest (file existence is checked
/// only when the stack is actually loaded).
pub fn parse_manifest(bytes: &[u8]) -> Result<StackManifest> {
    let manifest: StackManifest = serde_json::from_slice(bytes)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Manifest(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.sections.is_empty() {
        return Err(Error::Manifest("manifest lists no sections".into()));
    }
    if manifest.pixel_spacing.iter().any(|&s| !(s > 0.0)) || !(manifest.delta > 0.0) {
        return Err(Error::Manifest("pixel_spacing and delta must be positive".into()));
    }
    for (i, s) in manifest.sections.iter().enumerate() {
        if s.alpha < 0.0 {
            return Err(Error::Manifest(format!("section {i}: alpha must be >= 0")));
        }
        if !s.z_position.is_finite() {
            return Err(Error::Manifest(format!("section {i}: non-finite z position")));
        }
    }
    for i in 1..manifest.sections.len() {
        let (a, b) = (
            manifest.sections[i - 1].z_position,
            manifest.sections[i].z_position,
        );
        if b == a {
            return Err(Error::Manifest(format!("duplicate z position {b} at section {i}")));
        }
        if b < a {
            return Err(Error::Manifest(format!(
                "z positions not increasing at section {i}: {a} then {b}"
            )));
        }
    }
    Ok(manifest)
}

fn load_section_image(path: &Path, pixel_spacing: [f64; 2]) -> Result<Section> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" => {
            let p = pgm::read_pgm(path)?;
            Section::new([p.width, p.height], pixel_spacing, p.samples)
        }
        _ => {
            let mut s = nrrd::read_section(path)?;
            s.spacing = pixel_spacing;
            Ok(s)
        }
    }
}

/// Loads a stack from a manifest file: section images (2D NRRD or PGM),
/// optional masks, weights, and geometry validation.
pub fn read_stack(manifest_path: &Path) -> Result<SectionStack> {
    let bytes = std::fs::read(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest = parse_manifest(&bytes)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut sections = Vec::with_capacity(manifest.sections.len());
    let mut dims: Option<[usize; 2]> = None;
    for (i, entry) in manifest.sections.iter().enumerate() {
        let mut s = load_section_image(&dir.join(&entry.file), manifest.pixel_spacing)?;
        if let Some(d) = dims {
            if s.dims != d {
                return Err(Error::Manifest(format!(
                    "section {i} ({}) has dims {:?}, expected {:?}",
                    entry.file, s.dims, d
                )));
            }
        } else {
            dims = Some(s.dims);
        }
        s = s.with_alpha(entry.alpha)?;
        if let Some(mask_file) = &entry.mask {
            let m = pgm::read_pgm(&dir.join(mask_file))?;
            if [m.width, m.height] != s.dims {
                return Err(Error::Manifest(format!(
                    "section {i}: mask {mask_file} dims {}x{} != image {:?}",
                    m.width, m.height, s.dims
                )));
            }
            s = s.with_mask(m.samples.iter().map(|&v| v > 0.0).collect())?;
        }
        sections.push(s);
    }
    let z: Vec<f64> = manifest.sections.iter().map(|s| s.z_position).collect();
    SectionStack::new(sections, z, manifest.delta)
}

/// Writes a stack as per-section float32 NRRDs (+ PGM masks) and a manifest;
/// returns the manifest path.
pub fn write_stack(dir: &Path, stem: &str, stack: &SectionStack) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(stack.len());
    for (i, (sec, &z)) in stack.sections.iter().zip(&stack.z_positions).enumerate() {
        let file = format!("{stem}_{i:04}.nrrd");
        nrrd::write_section(&dir.join(&file), sec)?;
        let mask = if let Some(m) = &sec.mask {
            let mask_file = format!("{stem}_{i:04}_mask.pgm");
            let samples: Vec<f64> = m.iter().map(|&b| if b { 255.0 } else { 0.0 }).collect();
            pgm::write_pgm(&dir.join(&mask_file), sec.dims[0], sec.dims[1], 255, &samples)?;
            Some(mask_file)
        } else {
            None
        };
        entries.push(ManifestSection {
            file,
            z_position: z,
            alpha: sec.alpha,
            mask,
        });
    }
    let manifest = StackManifest {
        schema_version: SCHEMA_VERSION,
        pixel_spacing: stack.spacing(),
        delta: stack.delta,
        sections: entries,
    };
    let path = dir.join(format!("{stem}_manifest.json"));
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Phantom construction settings for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    /// Isotropic voxel size (mm).
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    pub bend: BendParams,
}

fn default_spacing() -> f64 {
    0.04
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Curved,
    Grayscale,
}

/// Top-level run configuration; unknown keys are rejected everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
}

impl RunConfig {
    pub fn from_bytes(bytes: &[u8]) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_slice(bytes)
            .map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn empty() -> RunConfig {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            joint: None,
            sim: None,
            mask: None,
            phantom: None,
        }
    }
}

/// Deterministic run report: config echo, seed, solver work, energies, and
/// the list of emitted files. Wall-clock timing goes to stderr, not here, so
/// reruns with the same config and seed are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub work: WorkCounters,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energies: Option<serde_json::Value>,
}

/// Deterministic measures of solver effort (iteration counts, not wall time).
#[derive(Debug, Clone, Default, Serialize)]
pub struct WorkCounters {
    pub outer_iterations: usize,
    pub match_iterations: usize,
    pub rigid_iterations: usize,
    pub trials: usize,
    pub trial_failures: usize,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, threads: usize, config: RunConfig) -> RunReport {
        RunReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            threads,
            config,
            outputs: Vec::new(),
            work: WorkCounters::default(),
            warnings: Vec::new(),
            energies: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Section;

    fn sample_stack() -> SectionStack {
        let mut sections = Vec::new();
        for k in 0..3 {
            let mut s = Section::zeros([4, 3], [0.04, 0.04]);
            for (i, v) in s.samples.iter_mut().enumerate() {
                *v = ((i + k) as f32 * 0.5) as f64;
            }
            if k == 1 {
                s = s
                    .with_mask((0..12).map(|i| i % 2 == 0).collect())
                    .unwrap()
                    .with_alpha(0.5)
                    .unwrap();
            }
            sections.push(s);
        }
        SectionStack::new(sections, vec![0.0, 0.04, 0.08], 0.04).unwrap()
    }

    #[test]
    fn stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stack = sample_stack();
        let manifest = write_stack(dir.path(), "sec", &stack).unwrap();
        let back = read_stack(&manifest).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.delta, stack.delta);
        for (a, b) in back.sections.iter().zip(&stack.sections) {
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn manifest_validation_errors() {
        let base = serde_json::json!({
            "schema_version": 1,
            "pixel_spacing": [0.04, 0.04],
            "delta": 0.04,
            "sections": [
                {"file": "a.nrrd", "z_position": 0.0},
                {"file": "b.nrrd", "z_position": 0.0}
            ]
        });
        let err = parse_manifest(base.to_string().as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate z"), "{err}");

        let decreasing = serde_json::json!({
            "schema_version": 1,
            "pixel_spacing": [0.04, 0.04],
            "delta": 0.04,
            "sections": [
                {"file": "a.nrrd", "z_position": 0.04},
                {"file": "b.nrrd", "z_position": 0.0}
            ]
        });
        let err = parse_manifest(decreasing.to_string().as_bytes()).unwrap_err();
        assert!(err.to_string().contains("not increasing"), "{err}");

        let unknown = serde_json::json!({
            "schema_version": 1,
            "pixel_spacing": [0.04, 0.04],
            "delta": 0.04,
            "surprise": true,
            "sections": [{"file": "a.nrrd", "z_position": 0.0}]
        });
        assert!(parse_manifest(unknown.to_string().as_bytes()).is_err());
    }

    #[test]
    fn alpha_defaults_to_one() {
        let m = serde_json::json!({
            "schema_version": 1,
            "pixel_spacing": [0.04, 0.04],
            "delta": 0.04,
            "sections": [{"file": "a.nrrd", "z_position": 0.0}]
        });
        let parsed = parse_manifest(m.to_string().as_bytes()).unwrap();
        assert_eq!(parsed.sections[0].alpha, 1.0);
    }

    #[test]
    fn missing_section_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = serde_json::json!({
            "schema_version": 1,
            "pixel_spacing": [0.04, 0.04],
            "delta": 0.04,
            "sections": [{"file": "nope.nrrd", "z_position": 0.0}]
        });
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, m.to_string()).unwrap();
        let err = read_stack(&path).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn run_config_rejects_unknown_and_bad_version() {
        let ok = serde_json::json!({"schema_version": 1});
        assert!(RunConfig::from_bytes(ok.to_string().as_bytes()).is_ok());
        let bad_version = serde_json::json!({"schema_version": 99});
        assert!(RunConfig::from_bytes(bad_version.to_string().as_bytes()).is_err());
        let unknown = serde_json::json!({"schema_version": 1, "mystery": 3});
        assert!(RunConfig::from_bytes(unknown.to_string().as_bytes()).is_err());
    }
}
