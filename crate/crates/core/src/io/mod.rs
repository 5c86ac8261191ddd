//! File I/O: MetaImage and the native `.evol` container.
//!
//! Scalar volumes and labels may be stored as either format (chosen by
//! extension); embeddings and displacement fields are `.evol` only.

pub mod evol;
pub mod metaimage;

use std::path::Path;

use crate::embedding::{normalize_embedding, EmbeddingVolume};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::labels::LabelVolume;
use crate::volume::Volume;

use evol::EvolImage;
use metaimage::ElementType;

fn is_mhd(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("mhd") | Some("MHD")
    )
}

fn channels_check(img: &EvolImage, expected: usize, what: &str) -> Result<()> {
    if img.channels != expected {
        return Err(Error::header(
            "C",
            format!(
                "{what} expects {expected} channel(s), file has {}",
                img.channels
            ),
        ));
    }
    Ok(())
}

/// Load a scalar volume from `.mhd` (+ raw) or `.evol`.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if is_mhd(path) {
        let (h, values) = metaimage::read(path)?;
        Volume::new(
            h.dims,
            h.spacing,
            h.origin,
            values.into_iter().map(|v| v as f32).collect(),
        )
    } else {
        let img = evol::read(path)?;
        channels_check(&img, 1, "a scalar volume")?;
        Volume::new(img.dims, img.spacing, img.origin, img.data)
    }
}

/// Save a scalar volume; `.mhd` is written as MET_FLOAT so the round trip is lossless.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    if is_mhd(path) {
        let values: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        metaimage::write(
            path,
            v.dims(),
            v.spacing(),
            v.origin(),
            ElementType::Float,
            &values,
        )
    } else {
        evol::write(
            path,
            &EvolImage {
                channels: 1,
                dims: v.dims(),
                spacing: v.spacing(),
                origin: v.origin(),
                data: v.data().to_vec(),
            },
        )
    }
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let img = evol::read(path)?;
    channels_check(&img, 3, "a displacement field")?;
    Ok(DisplacementField::new(img.dims, img.data)?.with_geometry(img.spacing, img.origin))
}

pub fn save_field(f: &DisplacementField, path: &Path) -> Result<()> {
    evol::write(
        path,
        &EvolImage {
            channels: 3,
            dims: f.dims(),
            spacing: f.spacing(),
            origin: f.origin(),
            data: f.data().to_vec(),
        },
    )
}

/// Load an embedding and unit-normalize it.
pub fn load_embedding(path: &Path) -> Result<EmbeddingVolume> {
    let img = evol::read(path)?;
    let e = EmbeddingVolume::new(img.channels, img.dims, img.data)?
        .with_geometry(img.spacing, img.origin);
    Ok(normalize_embedding(&e))
}

pub fn save_embedding(e: &EmbeddingVolume, path: &Path) -> Result<()> {
    evol::write(
        path,
        &EvolImage {
            channels: e.channels(),
            dims: e.dims(),
            spacing: e.spacing(),
            origin: e.origin(),
            data: e.data().to_vec(),
        },
    )
}

/// Raw multi-channel write (e.g. correlation features).
pub fn save_channels(path: &Path, channels: usize, like: &Volume, data: Vec<f32>) -> Result<()> {
    evol::write(
        path,
        &EvolImage {
            channels,
            dims: like.dims(),
            spacing: like.spacing(),
            origin: like.origin(),
            data,
        },
    )
}

/// Load labels from MET_UCHAR / MET_SHORT MetaImage or single-channel `.evol`.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let (dims, spacing, origin, values) = if is_mhd(path) {
        let (h, values) = metaimage::read(path)?;
        if h.element_type == ElementType::Float {
            return Err(Error::header(
                "ElementType",
                "labels must be MET_UCHAR or MET_SHORT",
            ));
        }
        (h.dims, h.spacing, h.origin, values)
    } else {
        let img = evol::read(path)?;
        channels_check(&img, 1, "a label volume")?;
        let values = img.data.iter().map(|&v| v as f64).collect();
        (img.dims, img.spacing, img.origin, values)
    };
    let data = values
        .into_iter()
        .map(|v| {
            if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
                Err(Error::header(
                    "ElementDataFile",
                    format!("invalid label value {v}"),
                ))
            } else {
                Ok(v as u16)
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    Ok(LabelVolume::new(dims, data)?.with_geometry(spacing, origin))
}

/// Save labels as MetaImage (MET_UCHAR when every label fits, else MET_SHORT) or `.evol`.
pub fn save_labels(l: &LabelVolume, path: &Path) -> Result<()> {
    let values: Vec<f64> = l.data().iter().map(|&v| v as f64).collect();
    if is_mhd(path) {
        let max = l.data().iter().copied().max().unwrap_or(0);
        let ty = if max <= u8::MAX as u16 {
            ElementType::UChar
        } else if max <= i16::MAX as u16 {
            ElementType::Short
        } else {
            return Err(Error::InvalidParameter(format!(
                "label {max} does not fit MET_SHORT"
            )));
        };
        metaimage::write(path, l.dims(), l.spacing(), l.origin(), ty, &values)
    } else {
        evol::write(
            path,
            &EvolImage {
                channels: 1,
                dims: l.dims(),
                spacing: l.spacing(),
                origin: l.origin(),
                data: values.iter().map(|&v| v as f32).collect(),
            },
        )
    }
}
