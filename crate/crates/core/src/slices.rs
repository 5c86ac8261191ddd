//! PNG slice panels with optional label contours.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{check_dims, Error, Result};
use crate::labels::LabelVolume;
use crate::volume::{Dims, Volume};

/// Contour colors; label `l` uses entry `(l − 1) mod 8`.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// One image to render.
#[derive(Debug, Clone, Copy)]
pub struct SlicePanel<'a> {
    /// File stem of the PNG.
    pub name: &'a str,
    pub volume: &'a Volume,
    pub labels: Option<&'a LabelVolume>,
}

/// A 2D cut through a z-major volume: `(rows, cols, index of pixel (r, c))`.
#[derive(Debug, Clone, Copy)]
pub struct SliceGeometry {
    pub rows: usize,
    pub cols: usize,
    axis: usize,
    index: usize,
    dims: Dims,
}

impl SliceGeometry {
    /// Slice `index` along `axis` (0 = z, 1 = y, 2 = x). Rows and columns are
    /// the remaining axes in z, y, x order.
    pub fn new(dims: Dims, axis: usize, index: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::InvalidParameter(format!(
                "slice axis must be 0, 1 or 2, got {axis}"
            )));
        }
        if index >= dims.0[axis] {
            return Err(Error::IndexOutOfRange {
                index,
                len: dims.0[axis],
            });
        }
        let rest: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| dims.0[a]).collect();
        Ok(SliceGeometry {
            rows: rest[0],
            cols: rest[1],
            axis,
            index,
            dims,
        })
    }

    /// Voxel index of pixel `(r, c)`.
    pub fn voxel(&self, r: usize, c: usize) -> usize {
        let p = match self.axis {
            0 => [self.index, r, c],
            1 => [r, self.index, c],
            _ => [r, c, self.index],
        };
        self.dims.index(p[0], p[1], p[2])
    }
}

/// Gray level of a normalized intensity: `[-1, 1] ↦ [0, 255]`, clamped.
pub fn gray_level(v: f32) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

/// Pixels of a nonzero label that touch a different label (4-neighbourhood)
/// or the slice border.
pub fn contour_mask(labels: &LabelVolume, g: &SliceGeometry) -> Vec<bool> {
    let d = labels.data();
    let mut out = vec![false; g.rows * g.cols];
    for r in 0..g.rows {
        for c in 0..g.cols {
            let l = d[g.voxel(r, c)];
            if l == 0 {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == g.rows || c + 1 == g.cols;
            out[r * g.cols + c] = edge
                || d[g.voxel(r - 1, c)] != l
                || d[g.voxel(r + 1, c)] != l
                || d[g.voxel(r, c - 1)] != l
                || d[g.voxel(r, c + 1)] != l;
        }
    }
    out
}

/// Write one PNG per panel into `out_dir` (`<name>.png`) showing slice `index`
/// along `axis`. Intensities are read as normalized values in `[-1, 1]`.
/// Panels with labels are written as RGB with label contours drawn in
/// [`PALETTE`]; others as 8-bit grayscale.
pub fn emit_slices(
    panels: &[SlicePanel],
    axis: usize,
    index: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let Some(first) = panels.first() else {
        return Ok(Vec::new());
    };
    let dims = first.volume.dims();
    for p in panels {
        check_dims(dims.0, p.volume.dims().0)?;
        if let Some(l) = p.labels {
            check_dims(dims.0, l.dims().0)?;
        }
    }
    let g = SliceGeometry::new(dims, axis, index)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(panels.len());
    for p in panels {
        let path = out_dir.join(format!("{}.png", p.name));
        let vals = p.volume.data();
        let gray: Vec<u8> = (0..g.rows * g.cols)
            .map(|k| gray_level(vals[g.voxel(k / g.cols, k % g.cols)]))
            .collect();
        match p.labels {
            None => write_png(&path, g.cols, g.rows, png::ColorType::Grayscale, &gray)?,
            Some(labels) => {
                let contour = contour_mask(labels, &g);
                let mut rgb = Vec::with_capacity(3 * gray.len());
                for (k, &v) in gray.iter().enumerate() {
                    if contour[k] {
                        let l = labels.data()[g.voxel(k / g.cols, k % g.cols)];
                        rgb.extend_from_slice(&PALETTE[(l as usize - 1) % PALETTE.len()]);
                    } else {
                        rgb.extend_from_slice(&[v, v, v]);
                    }
                }
                write_png(&path, g.cols, g.rows, png::ColorType::Rgb, &rgb)?;
            }
        }
        paths.push(path);
    }
    Ok(paths)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(data)?;
    w.finish()?;
    Ok(())
}
