//! NRRD reader/writer for a strict subset: raw encoding, little-endian
//! uint8/uint16/float32, 2 or 3 dims, diagonal space directions, attached or
//! detached headers. Anything outside the subset is a hard parse error with
//! a line number; nothing is silently coerced.

use crate::error::{Error, Result};
use crate::grid::{Section, Volume, VolumeKind};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrrdType {
    U8,
    U16,
    F32,
}

impl NrrdType {
    fn parse(s: &str) -> Option<NrrdType> {
        match s {
            "uint8" | "uchar" | "unsigned char" | "uint8_t" => Some(NrrdType::U8),
            "uint16" | "ushort" | "unsigned short" | "uint16_t" => Some(NrrdType::U16),
            "float" => Some(NrrdType::F32),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            NrrdType::U8 => "uint8",
            NrrdType::U16 => "uint16",
            NrrdType::F32 => "float",
        }
    }

    fn bytes(&self) -> usize {
        match self {
            NrrdType::U8 => 1,
            NrrdType::U16 => 2,
            NrrdType::F32 => 4,
        }
    }
}

/// Parsed subset header plus where the data lives.
#[derive(Debug, Clone)]
pub struct NrrdHeader {
    pub dtype: NrrdType,
    pub sizes: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub kind: VolumeKind,
    /// `None` = data attached after the header; `Some(name)` = detached file.
    pub data_file: Option<String>,
}

const SUPPORTED_FIELDS: [&str; 10] = [
    "type",
    "dimension",
    "sizes",
    "encoding",
    "endian",
    "space dimension",
    "space directions",
    "space origin",
    "content",
    "data file",
];

/// Parses the header portion; returns the header and the byte offset where
/// attached data begins.
pub fn parse_header(bytes: &[u8], label: &str) -> Result<(NrrdHeader, usize)> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut next_line = |pos: &mut usize| -> Option<&[u8]> {
        if *pos >= bytes.len() {
            return None;
        }
        let start = *pos;
        let mut end = start;
        while end < bytes.len() && bytes[end] != b'\n' {
            end += 1;
        }
        let line = &bytes[start..end];
        *pos = (end + 1).min(bytes.len() + 1);
        Some(line)
    };

    let magic = next_line(&mut pos).ok_or_else(|| Error::parse(label, 1, "empty file"))?;
    line_no += 1;
    let magic = std::str::from_utf8(magic)
        .map_err(|_| Error::parse(label, line_no, "magic line is not UTF-8"))?
        .trim_end_matches('\r');
    if magic.len() != 8 || !magic.starts_with("NRRD000") {
        return Err(Error::parse(label, line_no, format!("bad magic {magic:?}")));
    }
    let version = magic.as_bytes()[7];
    if !(b'1'..=b'5').contains(&version) {
        return Err(Error::parse(
            label,
            line_no,
            format!("unsupported NRRD version {}", version as char),
        ));
    }

    let mut dtype = None;
    let mut dimension: Option<usize> = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut encoding: Option<String> = None;
    let mut endian: Option<String> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut origin: Option<Vec<f64>> = None;
    let mut kind = VolumeKind::Intensity;
    let mut data_file: Option<String> = None;

    loop {
        let raw = match next_line(&mut pos) {
            Some(l) => l,
            None => {
                if data_file.is_some() {
                    break;
                }
                return Err(Error::parse(label, line_no, "header never ended (missing blank line)"));
            }
        };
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::parse(label, line_no, "header line is not UTF-8"))?
            .trim_end_matches('\r');
        if line.is_empty() {
            break; // end of header; attached data follows
        }
        if line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(label, line_no, format!("not a 'field: value' line: {line:?}")))?;
        let key = key.trim();
        let value = value.trim();
        if !SUPPORTED_FIELDS.contains(&key) {
            return Err(Error::parse(
                label,
                line_no,
                format!("unsupported header field {key:?}"),
            ));
        }
        match key {
            "type" => {
                dtype = Some(NrrdType::parse(value).ok_or_else(|| {
                    Error::parse(label, line_no, format!("unsupported type {value:?} (expected uint8, uint16 or float)"))
                })?);
            }
            "dimension" => {
                let d: usize = value
                    .parse()
                    .map_err(|_| Error::parse(label, line_no, format!("bad dimension {value:?}")))?;
                if d != 2 && d != 3 {
                    return Err(Error::parse(label, line_no, format!("dimension must be 2 or 3, got {d}")));
                }
                dimension = Some(d);
            }
            "sizes" => {
                let s: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(|t| t.parse()).collect();
                let s = s.map_err(|_| Error::parse(label, line_no, format!("bad sizes {value:?}")))?;
                if s.iter().any(|&x| x == 0) {
                    return Err(Error::parse(label, line_no, "sizes must be positive"));
                }
                sizes = Some(s);
            }
            "encoding" => {
                if value != "raw" {
                    return Err(Error::parse(
                        label,
                        line_no,
                        format!("unsupported encoding {value:?} (only raw)"),
                    ));
                }
                encoding = Some(value.to_string());
            }
            "endian" => {
                if value != "little" {
                    return Err(Error::parse(
                        label,
                        line_no,
                        format!("unsupported endian {value:?} (only little)"),
                    ));
                }
                endian = Some(value.to_string());
            }
            "space dimension" => {
                let d: usize = value
                    .parse()
                    .map_err(|_| Error::parse(label, line_no, format!("bad space dimension {value:?}")))?;
                if let Some(dim) = dimension {
                    if d != dim {
                        return Err(Error::parse(
                            label,
                            line_no,
                            format!("space dimension {d} != dimension {dim}"),
                        ));
                    }
                }
            }
            "space directions" => {
                spacing = Some(parse_directions(value, label, line_no)?);
            }
            "space origin" => {
                origin = Some(parse_vector(value, label, line_no)?);
            }
            "content" => {
                kind = match value {
                    "intensity" => VolumeKind::Intensity,
                    "label" => VolumeKind::Label,
                    _ => {
                        return Err(Error::parse(
                            label,
                            line_no,
                            format!("unsupported content {value:?} (intensity or label)"),
                        ))
                    }
                };
            }
            "data file" => {
                if value.is_empty() {
                    return Err(Error::parse(label, line_no, "empty data file name"));
                }
                data_file = Some(value.to_string());
            }
            _ => unreachable!(),
        }
    }

    let dtype = dtype.ok_or_else(|| Error::parse(label, line_no, "missing 'type' field"))?;
    let dimension = dimension.ok_or_else(|| Error::parse(label, line_no, "missing 'dimension' field"))?;
    let sizes = sizes.ok_or_else(|| Error::parse(label, line_no, "missing 'sizes' field"))?;
    encoding.ok_or_else(|| Error::parse(label, line_no, "missing 'encoding' field"))?;
    if dtype != NrrdType::U8 && endian.is_none() {
        return Err(Error::parse(label, line_no, "missing 'endian' field for multi-byte type"));
    }
    if sizes.len() != dimension {
        return Err(Error::parse(
            label,
            line_no,
            format!("sizes has {} entries for dimension {dimension}", sizes.len()),
        ));
    }
    let spacing = match spacing {
        Some(s) => {
            if s.len() != dimension {
                return Err(Error::parse(
                    label,
                    line_no,
                    format!("space directions rank {} != dimension {dimension}", s.len()),
                ));
            }
            s
        }
        None => vec![1.0; dimension],
    };
    let origin = match origin {
        Some(o) => {
            if o.len() != dimension {
                return Err(Error::parse(
                    label,
                    line_no,
                    format!("space origin rank {} != dimension {dimension}", o.len()),
                ));
            }
            o
        }
        None => vec![0.0; dimension],
    };
    if kind == VolumeKind::Label && dtype == NrrdType::F32 {
        return Err(Error::parse(label, line_no, "label volumes must be uint8 or uint16"));
    }

    Ok((
        NrrdHeader {
            dtype,
            sizes,
            spacing,
            origin,
            kind,
            data_file,
        },
        pos.min(bytes.len()),
    ))
}

/// Parses `(a,0,0) (0,b,0) (0,0,c)` and requires it diagonal and positive.
fn parse_directions(value: &str, label: &str, line_no: usize) -> Result<Vec<f64>> {
    let mut vectors = Vec::new();
    for tok in value.split_whitespace() {
        vectors.push(parse_vector(tok, label, line_no)?);
    }
    let n = vectors.len();
    let mut spacing = Vec::with_capacity(n);
    for (axis, v) in vectors.iter().enumerate() {
        if v.len() != n {
            return Err(Error::parse(
                label,
                line_no,
                format!("direction vector {axis} has {} entries, expected {n}", v.len()),
            ));
        }
        for (d, &x) in v.iter().enumerate() {
            if d == axis {
                if !(x > 0.0) {
                    return Err(Error::parse(
                        label,
                        line_no,
                        format!("diagonal entry of direction {axis} must be positive, got {x}"),
                    ));
                }
                spacing.push(x);
            } else if x != 0.0 {
                return Err(Error::parse(
                    label,
                    line_no,
                    format!("space directions must be diagonal, got {x} at ({axis},{d})"),
                ));
            }
        }
    }
    Ok(spacing)
}

fn parse_vector(tok: &str, label: &str, line_no: usize) -> Result<Vec<f64>> {
    let inner = tok
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::parse(label, line_no, format!("expected (a,b,...) vector, got {tok:?}")))?;
    inner
        .split(',')
        .map(|x| {
            let x = x.trim();
            x.parse::<f64>()
                .map_err(|_| Error::parse(label, line_no, format!("bad number {x:?}")))
        })
        .collect()
}

fn decode_samples(header: &NrrdHeader, data: &[u8], label: &str) -> Result<Vec<f64>> {
    let n: usize = header.sizes.iter().product();
    let want = n * header.dtype.bytes();
    if data.len() < want {
        return Err(Error::parse(
            label,
            0,
            format!("raw data has {} bytes, expected {want}", data.len()),
        ));
    }
    let data = &data[..want];
    let out = match header.dtype {
        NrrdType::U8 => data.iter().map(|&b| b as f64).collect(),
        NrrdType::U16 => data
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        NrrdType::F32 => {
            let mut out = Vec::with_capacity(n);
            for c in data.chunks_exact(4) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !v.is_finite() && header.kind == VolumeKind::Intensity {
                    return Err(Error::parse(label, 0, "non-finite sample in intensity data"));
                }
                out.push(v as f64);
            }
            out
        }
    };
    Ok(out)
}

/// Decodes an attached-data NRRD volume from bytes. Detached headers are
/// rejected here (they need a filesystem); use `read_volume` for those.
pub fn read_volume_bytes(bytes: &[u8], label: &str) -> Result<Volume> {
    let (header, offset) = parse_header(bytes, label)?;
    if header.data_file.is_some() {
        return Err(Error::parse(
            label,
            0,
            "detached data file not supported for in-memory decode",
        ));
    }
    if header.sizes.len() != 3 {
        return Err(Error::parse(label, 0, "expected a 3D volume"));
    }
    let samples = decode_samples(&header, &bytes[offset..], label)?;
    Volume::new(
        [header.sizes[0], header.sizes[1], header.sizes[2]],
        [header.spacing[0], header.spacing[1], header.spacing[2]],
        [header.origin[0], header.origin[1], header.origin[2]],
        header.kind,
        samples,
    )
}

/// Decodes an attached-data 2D NRRD section from bytes.
pub fn read_section_bytes(bytes: &[u8], label: &str) -> Result<Section> {
    let (header, offset) = parse_header(bytes, label)?;
    if header.data_file.is_some() {
        return Err(Error::parse(
            label,
            0,
            "detached data file not supported for in-memory decode",
        ));
    }
    if header.sizes.len() != 2 {
        return Err(Error::parse(label, 0, "expected a 2D section"));
    }
    let samples = decode_samples(&header, &bytes[offset..], label)?;
    Section::new(
        [header.sizes[0], header.sizes[1]],
        [header.spacing[0], header.spacing[1]],
        samples,
    )
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn resolve_detached(path: &Path, header: &NrrdHeader) -> Result<Option<Vec<u8>>> {
    if let Some(name) = &header.data_file {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let data_path: PathBuf = dir.join(name);
        Ok(Some(read_bytes(&data_path)?))
    } else {
        Ok(None)
    }
}

/// Reads a 3D volume from disk (attached or detached header).
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    let label = path.display().to_string();
    let (header, offset) = parse_header(&bytes, &label)?;
    if header.sizes.len() != 3 {
        return Err(Error::parse(&label, 0, "expected a 3D volume"));
    }
    let samples = match resolve_detached(path, &header)? {
        Some(data) => decode_samples(&header, &data, &label)?,
        None => decode_samples(&header, &bytes[offset..], &label)?,
    };
    Volume::new(
        [header.sizes[0], header.sizes[1], header.sizes[2]],
        [header.spacing[0], header.spacing[1], header.spacing[2]],
        [header.origin[0], header.origin[1], header.origin[2]],
        header.kind,
        samples,
    )
}

/// Reads a 2D section from disk (attached or detached header).
pub fn read_section(path: &Path) -> Result<Section> {
    let bytes = read_bytes(path)?;
    let label = path.display().to_string();
    let (header, offset) = parse_header(&bytes, &label)?;
    if header.sizes.len() != 2 {
        return Err(Error::parse(&label, 0, "expected a 2D section"));
    }
    let samples = match resolve_detached(path, &header)? {
        Some(data) => decode_samples(&header, &data, &label)?,
        None => decode_samples(&header, &bytes[offset..], &label)?,
    };
    Section::new(
        [header.sizes[0], header.sizes[1]],
        [header.spacing[0], header.spacing[1]],
        samples,
    )
}

fn choose_dtype(kind: VolumeKind, samples: &[f64]) -> Result<NrrdType> {
    match kind {
        VolumeKind::Intensity => Ok(NrrdType::F32),
        VolumeKind::Label => {
            let mut max = 0.0f64;
            for &s in samples {
                if s < 0.0 || s.fract() != 0.0 {
                    return Err(Error::InvalidGeometry(format!(
                        "label value {s} is not a nonnegative integer"
                    )));
                }
                max = max.max(s);
            }
            if max <= 255.0 {
                Ok(NrrdType::U8)
            } else if max <= 65535.0 {
                Ok(NrrdType::U16)
            } else {
                Err(Error::InvalidGeometry(format!("label value {max} exceeds uint16")))
            }
        }
    }
}

fn encode_samples(dtype: NrrdType, samples: &[f64], out: &mut Vec<u8>) {
    match dtype {
        NrrdType::U8 => out.extend(samples.iter().map(|&s| s as u8)),
        NrrdType::U16 => {
            for &s in samples {
                out.extend_from_slice(&(s as u16).to_le_bytes());
            }
        }
        NrrdType::F32 => {
            for &s in samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
}

fn write_header(
    out: &mut Vec<u8>,
    dtype: NrrdType,
    sizes: &[usize],
    spacing: &[f64],
    origin: &[f64],
    kind: VolumeKind,
) {
    let dim = sizes.len();
    let _ = writeln!(out, "NRRD0004");
    let _ = writeln!(out, "type: {}", dtype.name());
    let _ = writeln!(out, "dimension: {dim}");
    let _ = writeln!(
        out,
        "sizes: {}",
        sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
    );
    let _ = writeln!(out, "encoding: raw");
    let _ = writeln!(out, "endian: little");
    let _ = writeln!(out, "space dimension: {dim}");
    let dirs: Vec<String> = (0..dim)
        .map(|a| {
            let mut v = vec!["0".to_string(); dim];
            v[a] = format!("{}", spacing[a]);
            format!("({})", v.join(","))
        })
        .collect();
    let _ = writeln!(out, "space directions: {}", dirs.join(" "));
    let _ = writeln!(
        out,
        "space origin: ({})",
        origin.iter().map(|o| format!("{o}")).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(
        out,
        "content: {}",
        match kind {
            VolumeKind::Intensity => "intensity",
            VolumeKind::Label => "label",
        }
    );
    let _ = writeln!(out);
}

/// Serializes a volume as attached-data NRRD (float32 for intensity,
/// uint8/uint16 for labels).
pub fn volume_to_bytes(v: &Volume) -> Result<Vec<u8>> {
    let dtype = choose_dtype(v.kind, v.samples())?;
    let mut out = Vec::new();
    write_header(&mut out, dtype, &v.dims, &v.spacing, &v.origin, v.kind);
    encode_samples(dtype, v.samples(), &mut out);
    Ok(out)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let bytes = volume_to_bytes(v)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Serializes a 2D section as attached-data float32 NRRD.
pub fn section_to_bytes(s: &Section) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(
        &mut out,
        NrrdType::F32,
        &s.dims,
        &s.spacing,
        &[0.0, 0.0],
        VolumeKind::Intensity,
    );
    encode_samples(NrrdType::F32, &s.samples, &mut out);
    out
}

pub fn write_section(path: &Path, s: &Section) -> Result<()> {
    std::fs::write(path, section_to_bytes(s)).map_err(|e| Error::io(path.display().to_string(), e))
}
