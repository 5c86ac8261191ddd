//! MetaImage (`.mhd` header + `.raw` payload) reader and writer.
//!
//! Header axes are listed fastest-first (x y z); internally everything is (z, y, x).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
    UChar,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::UChar => "MET_UCHAR",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_FLOAT" => Ok(ElementType::Float),
            "MET_UCHAR" => Ok(ElementType::UChar),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::UChar => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaHeader {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    pub element_type: ElementType,
    pub data_file: PathBuf,
    pub msb: bool,
}

fn parse_bool(field: &str, s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::header(
            field,
            format!("expected True/False, got `{s}`"),
        )),
    }
}

fn parse_triple<T: std::str::FromStr>(field: &str, s: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split_whitespace()
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::header(field, format!("cannot parse `{p}`")))
        })
        .collect::<Result<_>>()?;
    let parts: [T; 3] = parts
        .try_into()
        .map_err(|_| Error::header(field, "expected exactly 3 values"))?;
    // x y z on disk -> z y x
    let [x, y, z] = parts;
    Ok([z, y, x])
}

pub fn parse_header(text: &str, dir: &Path) -> Result<MetaHeader> {
    let mut dims = None;
    let mut spacing = [1.0f32; 3];
    let mut origin = [0.0f32; 3];
    let mut element_type = None;
    let mut data_file = None;
    let mut msb = false;
    let mut ndims = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::header(line, "expected `Key = Value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(Error::header(
                        key,
                        format!("unsupported object type `{value}`"),
                    ));
                }
            }
            "NDims" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::header(key, format!("cannot parse `{value}`")))?;
                ndims = Some(n);
            }
            "DimSize" => dims = Some(Dims(parse_triple::<usize>(key, value)?)),
            "ElementSpacing" | "ElementSize" => spacing = parse_triple(key, value)?,
            "Offset" | "Origin" | "Position" => origin = parse_triple(key, value)?,
            "ElementType" => element_type = Some(ElementType::parse(value)?),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => msb = parse_bool(key, value)?,
            "ElementNumberOfChannels" => {
                if value != "1" {
                    return Err(Error::header(
                        key,
                        "only single-channel images are supported",
                    ));
                }
            }
            "CompressedData" => {
                if parse_bool(key, value)? {
                    return Err(Error::header(key, "compressed payloads are not supported"));
                }
            }
            "ElementDataFile" => {
                if value.eq_ignore_ascii_case("LOCAL") || value.starts_with("LIST") {
                    return Err(Error::header(
                        key,
                        format!("unsupported data file `{value}`"),
                    ));
                }
                data_file = Some(dir.join(value));
            }
            _ => {}
        }
    }
    if ndims != Some(3) {
        return Err(Error::header("NDims", format!("expected 3, got {ndims:?}")));
    }
    let dims = dims.ok_or_else(|| Error::header("DimSize", "missing"))?;
    if dims.is_empty() {
        return Err(Error::header("DimSize", "zero extent"));
    }
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::header("ElementSpacing", "must be strictly positive"));
    }
    Ok(MetaHeader {
        dims,
        spacing,
        origin,
        element_type: element_type.ok_or_else(|| Error::header("ElementType", "missing"))?,
        data_file: data_file.ok_or_else(|| Error::header("ElementDataFile", "missing"))?,
        msb,
    })
}

/// Read header and payload; values are widened to f64 (exact for all supported types).
pub fn read(path: &Path) -> Result<(MetaHeader, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let header = parse_header(&text, dir)?;
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let size = header.element_type.size();
    let expected = header.dims.len() * size;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(size)
        .map(|c| match (header.element_type, header.msb) {
            (ElementType::UChar, _) => c[0] as f64,
            (ElementType::Short, false) => i16::from_le_bytes([c[0], c[1]]) as f64,
            (ElementType::Short, true) => i16::from_be_bytes([c[0], c[1]]) as f64,
            (ElementType::Float, false) => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            (ElementType::Float, true) => f32::from_be_bytes(c.try_into().unwrap()) as f64,
        })
        .collect();
    Ok((header, values))
}

fn header_text(
    dims: Dims,
    spacing: [f32; 3],
    origin: [f32; 3],
    element_type: ElementType,
    data_file: &str,
) -> String {
    let mut s = String::new();
    let [d, h, w] = dims.0;
    writeln!(s, "ObjectType = Image").unwrap();
    writeln!(s, "NDims = 3").unwrap();
    writeln!(s, "BinaryData = True").unwrap();
    writeln!(s, "BinaryDataByteOrderMSB = False").unwrap();
    writeln!(s, "CompressedData = False").unwrap();
    writeln!(s, "Offset = {} {} {}", origin[2], origin[1], origin[0]).unwrap();
    writeln!(
        s,
        "ElementSpacing = {} {} {}",
        spacing[2], spacing[1], spacing[0]
    )
    .unwrap();
    writeln!(s, "DimSize = {w} {h} {d}").unwrap();
    writeln!(s, "ElementType = {}", element_type.tag()).unwrap();
    writeln!(s, "ElementDataFile = {data_file}").unwrap();
    s
}

/// Write `values` (already representable in `element_type`) little-endian next to the header.
pub fn write(
    path: &Path,
    dims: Dims,
    spacing: [f32; 3],
    origin: [f32; 3],
    element_type: ElementType,
    values: &[f64],
) -> Result<()> {
    if values.len() != dims.len() {
        return Err(Error::SizeMismatch {
            expected: dims.len() * element_type.size(),
            found: values.len() * element_type.size(),
        });
    }
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidParameter(format!("bad output path {}", path.display())))?
        .to_string();
    let mut bytes = Vec::with_capacity(values.len() * element_type.size());
    for &v in values {
        match element_type {
            ElementType::UChar => bytes.push(v as u8),
            ElementType::Short => bytes.extend_from_slice(&(v as i16).to_le_bytes()),
            ElementType::Float => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    let text = header_text(dims, spacing, origin, element_type, &raw_name);
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}
