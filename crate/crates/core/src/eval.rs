//! Registration quality metrics: Dice, average surface distance and
//! Jacobian-determinant statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::field::DisplacementField;
use crate::labels::LabelVolume;
use crate::mask::BodyMask;
use crate::par::ordered_sum;
use crate::volume::Dims;

/// Per-label Dice and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    pub mean: f64,
}

/// Dice for every label present in either volume. A label missing from one
/// side scores 0 and counts toward the mean. With no labels at all the mean is 1.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceReport> {
    check_dims(a.dims().0, b.dims().0)?;
    let max = a.data().iter().chain(b.data()).copied().max().unwrap_or(0) as usize;
    let mut ca = vec![0usize; max + 1];
    let mut cb = vec![0usize; max + 1];
    let mut both = vec![0usize; max + 1];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ca[x as usize] += 1;
        cb[y as usize] += 1;
        if x == y {
            both[x as usize] += 1;
        }
    }
    let mut per_label = BTreeMap::new();
    for l in 1..=max {
        let denom = ca[l] + cb[l];
        if denom > 0 {
            per_label.insert(l as u16, 2.0 * both[l] as f64 / denom as f64);
        }
    }
    let mean = if per_label.is_empty() {
        1.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceReport { per_label, mean })
}

/// Per-label symmetric average surface distance in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsdReport {
    pub per_label: BTreeMap<u16, f64>,
    /// Mean over evaluated labels; `None` when no label is present in both volumes.
    pub mean: Option<f64>,
    /// Labels present in only one volume, for which ASD is undefined.
    pub skipped: Vec<u16>,
}

/// Labelled voxels with at least one 6-neighbor outside the label; voxels on
/// the volume border count as surface.
pub fn surface(labels: &[u16], dims: Dims, label: u16) -> Vec<bool> {
    (0..dims.len())
        .into_par_iter()
        .map(|i| {
            if labels[i] != label {
                return false;
            }
            let c = dims.coords(i);
            (0..3).any(|a| {
                let s = dims.stride(a);
                c[a] == 0
                    || c[a] + 1 == dims.0[a]
                    || labels[i - s] != label
                    || labels[i + s] != label
            })
        })
        .collect()
}

/// Squared Euclidean distance (in spacing units) from every voxel to the
/// nearest `true` voxel; `f64::INFINITY` if there is none.
pub fn squared_distance_transform(feature: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = feature
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        let n = dims.0[axis];
        let stride = dims.stride(axis);
        let w2 = spacing[axis] * spacing[axis];
        let starts: Vec<usize> = (0..dims.len())
            .filter(|&i| dims.coords(i)[axis] == 0)
            .collect();
        let lines: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let f: Vec<f64> = (0..n).map(|k| d[s + k * stride]).collect();
                lower_envelope(&f, w2)
            })
            .collect();
        for (&s, line) in starts.iter().zip(&lines) {
            for (k, &v) in line.iter().enumerate() {
                d[s + k * stride] = v;
            }
        }
    }
    d
}

/// 1-D squared distance transform `min_q f(q) + w2·(p − q)²` by the lower
/// envelope of parabolas.
fn lower_envelope(f: &[f64], w2: f64) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let meet = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&p) = v.last() {
            if meet(p, q) <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(if v.is_empty() {
            f64::NEG_INFINITY
        } else {
            meet(*v.last().unwrap(), q)
        });
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dq = p as f64 - q as f64;
        *o = f[q] + w2 * dq * dq;
    }
    out
}

fn one_sided_mean(from: &[bool], to_dist2: &[f64]) -> (f64, usize) {
    let mut s = 0.0;
    let mut k = 0;
    for (i, &f) in from.iter().enumerate() {
        if f {
            s += to_dist2[i].sqrt();
            k += 1;
        }
    }
    (s, k)
}

/// Symmetric mean distance between the two label surfaces, in the units of `spacing`.
pub fn label_asd(
    a: &LabelVolume,
    b: &LabelVolume,
    label: u16,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    check_dims(a.dims().0, b.dims().0)?;
    let dims = a.dims();
    let sa = surface(a.data(), dims, label);
    let sb = surface(b.data(), dims, label);
    if !sa.iter().any(|&v| v) || !sb.iter().any(|&v| v) {
        return Ok(None);
    }
    let da = squared_distance_transform(&sa, dims, spacing);
    let db = squared_distance_transform(&sb, dims, spacing);
    let (s1, k1) = one_sided_mean(&sa, &db);
    let (s2, k2) = one_sided_mean(&sb, &da);
    Ok(Some((s1 + s2) / (k1 + k2) as f64))
}

/// ASD for every label present in both volumes; spacing in mm.
pub fn average_surface_distance(
    a: &LabelVolume,
    b: &LabelVolume,
    spacing: [f64; 3],
) -> Result<AsdReport> {
    check_dims(a.dims().0, b.dims().0)?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "invalid spacing {spacing:?}"
        )));
    }
    let la = a.label_set();
    let lb = b.label_set();
    let mut all: Vec<u16> = la.iter().chain(&lb).copied().collect();
    all.sort_unstable();
    all.dedup();
    let mut per_label = BTreeMap::new();
    let mut skipped = Vec::new();
    for l in all {
        match label_asd(a, b, l, spacing)? {
            Some(d) => {
                per_label.insert(l, d);
            }
            None => skipped.push(l),
        }
    }
    if !skipped.is_empty() {
        log::warn!("ASD skipped for labels present in only one volume: {skipped:?}");
    }
    let mean =
        (!per_label.is_empty()).then(|| per_label.values().sum::<f64>() / per_label.len() as f64);
    Ok(AsdReport {
        per_label,
        mean,
        skipped,
    })
}

/// Statistics of `det(I + ∇τ)` over a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Fraction of mask voxels with `det ≤ 0`.
    pub negative_fraction: f64,
}

/// Per-voxel `det(I + ∂τ/∂u)`, central differences inside and one-sided
/// differences on the border (zero derivative along singleton axes).
pub fn jacobian_determinants(tau: &DisplacementField) -> Vec<f64> {
    let dims = tau.dims();
    let n = dims.len();
    let data = tau.data();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let c = dims.coords(i);
            let mut j = [[0.0f64; 3]; 3];
            for b in 0..3 {
                let len = dims.0[b];
                if len < 2 {
                    continue;
                }
                let s = dims.stride(b);
                let (hi, lo, h) = if c[b] == 0 {
                    (i + s, i, 1.0)
                } else if c[b] + 1 == len {
                    (i, i - s, 1.0)
                } else {
                    (i + s, i - s, 2.0)
                };
                for (a, row) in j.iter_mut().enumerate() {
                    row[b] = (data[a * n + hi] as f64 - data[a * n + lo] as f64) / h;
                }
            }
            for (a, row) in j.iter_mut().enumerate() {
                row[a] += 1.0;
            }
            det3(&j)
        })
        .collect()
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn jacobian_stats(tau: &DisplacementField, mask: &BodyMask) -> Result<JacobianStats> {
    check_dims(tau.dims().0, mask.dims().0)?;
    let k = mask.voxel_count();
    if k == 0 {
        return Err(Error::InvalidParameter("body mask is empty".into()));
    }
    let det = jacobian_determinants(tau);
    let m = mask.data();
    let pick = |i: usize| if m[i] { det[i] } else { 0.0 };
    let mean = ordered_sum(det.len(), pick) / k as f64;
    let var = ordered_sum(
        det.len(),
        |i| if m[i] { (det[i] - mean).powi(2) } else { 0.0 },
    ) / k as f64;
    let negative = (0..det.len()).filter(|&i| m[i] && det[i] <= 0.0).count();
    Ok(JacobianStats {
        mean,
        std: var.sqrt(),
        negative_fraction: negative as f64 / k as f64,
    })
}

/// Everything reported for one registration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label_dice: BTreeMap<u16, f64>,
    pub mean_dice: f64,
    pub per_label_asd_mm: BTreeMap<u16, f64>,
    pub mean_asd_mm: Option<f64>,
    pub asd_skipped_labels: Vec<u16>,
    pub jacobian_std: Option<f64>,
    pub jacobian_negative_fraction: Option<f64>,
}

impl MetricsReport {
    /// Label metrics of `warped` against `reference`, plus Jacobian statistics
    /// of `field` over `mask` when given. Distances use the reference spacing.
    pub fn compute(
        reference: &LabelVolume,
        warped: &LabelVolume,
        field: Option<(&DisplacementField, &BodyMask)>,
    ) -> Result<MetricsReport> {
        let d = dice(reference, warped)?;
        let asd =
            average_surface_distance(reference, warped, reference.spacing().map(|s| s as f64))?;
        let jac = field.map(|(f, m)| jacobian_stats(f, m)).transpose()?;
        Ok(MetricsReport {
            per_label_dice: d.per_label,
            mean_dice: d.mean,
            per_label_asd_mm: asd.per_label,
            mean_asd_mm: asd.mean,
            asd_skipped_labels: asd.skipped,
            jacobian_std: jac.map(|j| j.std),
            jacobian_negative_fraction: jac.map(|j| j.negative_fraction),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Long-format CSV: `metric,label,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "label", "value"])?;
        for (l, v) in &self.per_label_dice {
            w.write_record(["dice", &l.to_string(), &v.to_string()])?;
        }
        for (l, v) in &self.per_label_asd_mm {
            w.write_record(["asd_mm", &l.to_string(), &v.to_string()])?;
        }
        let mut summary = vec![("mean_dice", Some(self.mean_dice))];
        summary.push(("mean_asd_mm", self.mean_asd_mm));
        summary.push(("jacobian_std", self.jacobian_std));
        summary.push((
            "jacobian_negative_fraction",
            self.jacobian_negative_fraction,
        ));
        for (name, v) in summary {
            if let Some(v) = v {
                w.write_record([name, "", &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_matches_brute_force() {
        let f = [
            f64::INFINITY,
            0.0,
            f64::INFINITY,
            f64::INFINITY,
            4.0,
            f64::INFINITY,
            0.0,
        ];
        let out = lower_envelope(&f, 2.25);
        for p in 0..f.len() {
            let brute = (0..f.len())
                .filter(|&q| f[q].is_finite())
                .map(|q| f[q] + 2.25 * (p as f64 - q as f64).powi(2))
                .fold(f64::INFINITY, f64::min);
            assert!(
                (out[p] - brute).abs() < 1e-12,
                "p={p}: {} vs {brute}",
                out[p]
            );
        }
    }

    #[test]
    fn empty_feature_set_is_infinite() {
        let d = squared_distance_transform(&[false; 8], Dims::new(2, 2, 2), [1.0; 3]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }
}
