//! The affine → coarse → deform cascade with configuration and reporting.
//!
//! Each stage warps the *original* preprocessed moving image by the composed
//! total field, so images are interpolated once regardless of stage count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::affine::fit_affine;
use crate::deform::{
    correlation_feature, optimize_field, write_loss_history, LossReport, OptParams,
    CORRELATION_CHANNELS,
};
use crate::embedding::{synth_descriptors, EmbeddingVolume};
use crate::error::{check_dims, Error, Result};
use crate::eval::MetricsReport;
use crate::field::{
    build_coarse_field, compose_fields, warp_by_field, warp_embedding_by_field,
    warp_labels_by_field, DisplacementField,
};
use crate::io;
use crate::labels::LabelVolume;
use crate::mask::{compute_body_mask, BodyMask};
use crate::matching::{grid_match, match_points, MatchParams};
use crate::slices::{emit_slices, SlicePanel};
use crate::volume::{resample_isotropic, window_normalize, Volume};

/// Registration stages in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Affine,
    Coarse,
    Deform,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Affine, Stage::Coarse, Stage::Deform];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Affine => "affine",
            Stage::Coarse => "coarse",
            Stage::Deform => "deform",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage `{s}` (expected affine, coarse or deform)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTag {
    Synth,
}

/// Where embeddings come from: the built-in descriptor (`embeddings = "synth"`)
/// or a pair of `.evol` files on the preprocessed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbeddingSource {
    Synth(SynthTag),
    Files { fixed: PathBuf, moving: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Synth(SynthTag::Synth)
    }
}

/// Preprocessing knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    /// Optional `[lo, hi)` voxel bounds per axis (z, y, x), applied before resampling.
    pub crop: Option<[[usize; 2]; 3]>,
    /// Resample to isotropic spacing. Default true.
    pub resample: bool,
    /// Target spacing in mm. Default 2.0, the published setting.
    pub target_spacing_mm: f32,
    /// Intensity window in HU mapped to [-1, 1]. Default (-800, 400), the published setting.
    pub hu_window: [f32; 2],
    /// Body threshold on normalized intensity. Default -0.5 (decision, about -500 HU).
    pub body_threshold: f32,
    /// Channels of the synthetic descriptor. Default 16 (decision).
    pub synth_channels: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            crop: None,
            resample: true,
            target_spacing_mm: 2.0,
            hu_window: [-800.0, 400.0],
            body_threshold: -0.5,
            synth_channels: 16,
        }
    }
}

/// Which artifacts to write besides the mandatory ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputOptions {
    /// Write the moving embedding after each stage. Default true.
    pub write_embeddings: bool,
    /// Write PNG slice panels. Default true.
    pub slices: bool,
    /// Slice axis (0 = z). Default 0.
    pub slice_axis: usize,
    /// Slice index; the middle slice when absent.
    pub slice_index: Option<usize>,
    /// Write the 27-channel correlation feature of the deform stage's inputs. Default false.
    pub correlation_feature: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions {
            write_embeddings: true,
            slices: true,
            slice_axis: 0,
            slice_index: None,
            correlation_feature: false,
        }
    }
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

/// Full run configuration, read from a TOML file.
///
/// Relative paths are resolved against the directory of the config file.
/// Matching defaults: grid stride 8 and θ = 0.7 (published), search stride 4
/// (published), 32 refinement candidates (decision). Deformable defaults:
/// λ = 1, γ = 0.5 (published); pyramid, radii and iteration caps are
/// decisions, see [`OptParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    #[serde(default)]
    pub embeddings: EmbeddingSource,
    /// Label volumes; either both or neither.
    #[serde(default)]
    pub fixed_labels: Option<PathBuf>,
    #[serde(default)]
    pub moving_labels: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Enabled stages; order in the file is irrelevant, execution order is fixed.
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    /// Seed for randomized harness paths (synthetic inputs); registration itself is deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default)]
    pub matching: MatchParams,
    #[serde(default)]
    pub deform: OptParams,
    #[serde(default)]
    pub output: OutputOptions,
}

impl PipelineConfig {
    /// Defaults with the given input and output paths.
    pub fn new(
        fixed: impl Into<PathBuf>,
        moving: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        PipelineConfig {
            fixed: fixed.into(),
            moving: moving.into(),
            embeddings: EmbeddingSource::default(),
            fixed_labels: None,
            moving_labels: None,
            output_dir: output_dir.into(),
            stages: default_stages(),
            seed: 0,
            preprocess: Preprocess::default(),
            matching: MatchParams::default(),
            deform: OptParams::default(),
            output: OutputOptions::default(),
        }
    }

    /// Parse TOML text, apply `key=value` overrides (dotted keys for nested
    /// tables, e.g. `deform.gamma=1.0`) and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths become relative to its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.fixed);
        fix(&mut self.moving);
        fix(&mut self.output_dir);
        if let Some(p) = self.fixed_labels.as_mut() {
            fix(p);
        }
        if let Some(p) = self.moving_labels.as_mut() {
            fix(p);
        }
        if let EmbeddingSource::Files { fixed, moving } = &mut self.embeddings {
            fix(fixed);
            fix(moving);
        }
    }

    /// Enabled stages in execution order.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage must be enabled".into());
        }
        let s = self.ordered_stages();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("stage listed twice in {:?}", self.stages));
        }
        if s.contains(&Stage::Coarse) && !s.contains(&Stage::Affine) {
            return bad(
                "the coarse stage re-matches affine correspondences and requires the affine stage"
                    .into(),
            );
        }
        if self.fixed_labels.is_some() != self.moving_labels.is_some() {
            return bad("fixed_labels and moving_labels must be given together".into());
        }
        let p = &self.preprocess;
        if !(p.hu_window[0] < p.hu_window[1]) {
            return bad(format!(
                "hu_window must satisfy lo < hi, got {:?}",
                p.hu_window
            ));
        }
        if p.resample && !(p.target_spacing_mm > 0.0) {
            return bad("target_spacing_mm must be positive".into());
        }
        if self.output.slice_axis > 2 {
            return bad("slice_axis must be 0, 1 or 2".into());
        }
        let m = &self.matching;
        if m.grid_stride == 0 || m.search_stride == 0 {
            return bad("grid_stride and search_stride must be ≥ 1".into());
        }
        if !(-1.0..=1.0).contains(&m.theta) {
            return bad(format!("theta must lie in [-1, 1], got {}", m.theta));
        }
        self.deform
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Per-stage record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Wall time of the stage including its outputs; hardware dependent.
    pub seconds: f64,
    pub metrics: Option<MetricsReport>,
    /// Surviving correspondences and grid candidates (affine and coarse).
    pub matches: Option<usize>,
    pub candidates: Option<usize>,
    /// Affine fit residual RMS in voxels.
    pub residual_rms: Option<f64>,
    pub loss_history: Option<PathBuf>,
    pub final_loss: Option<LossReport>,
    /// Mean norm of this stage's own field, in voxels.
    pub mean_displacement: f64,
    pub artifacts: Vec<PathBuf>,
}

/// Summary of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub body_voxels: usize,
    pub preprocess_seconds: f64,
    /// Metrics of the unregistered pair.
    pub initial_metrics: Option<MetricsReport>,
    pub stages: Vec<StageReport>,
    pub total_field: PathBuf,
    pub total_mean_displacement: f64,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn stage(&self, s: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|r| r.stage == s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// In-memory inputs of a run, before preprocessing.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub fixed: Volume,
    pub moving: Volume,
    pub labels: Option<(LabelVolume, LabelVolume)>,
    /// External embeddings on the preprocessed grid; synthetic descriptors when `None`.
    pub embeddings: Option<(EmbeddingVolume, EmbeddingVolume)>,
}

impl PipelineInputs {
    /// Load everything named in `cfg`.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let fixed = io::load_volume(&cfg.fixed)?;
        let moving = io::load_volume(&cfg.moving)?;
        let labels = match (&cfg.fixed_labels, &cfg.moving_labels) {
            (Some(f), Some(m)) => Some((io::load_labels(f)?, io::load_labels(m)?)),
            _ => None,
        };
        let embeddings = match &cfg.embeddings {
            EmbeddingSource::Synth(_) => None,
            EmbeddingSource::Files { fixed, moving } => {
                Some((io::load_embedding(fixed)?, io::load_embedding(moving)?))
            }
        };
        Ok(PipelineInputs {
            fixed,
            moving,
            labels,
            embeddings,
        })
    }
}

/// Load the inputs named in `cfg` and run the enabled stages.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let inputs = PipelineInputs::load(cfg).map_err(|e| e.in_stage("load"))?;
    run_with_inputs(cfg, inputs)
}

struct Prepared {
    fixed: Volume,
    moving: Volume,
    labels: Option<(LabelVolume, LabelVolume)>,
    mask: BodyMask,
    sf: EmbeddingVolume,
    sm: EmbeddingVolume,
}

fn preprocess(cfg: &PipelineConfig, inputs: PipelineInputs) -> Result<Prepared> {
    let p = &cfg.preprocess;
    let mut fixed = inputs.fixed;
    let mut moving = inputs.moving;
    let mut labels = inputs.labels;
    check_dims(fixed.dims().0, moving.dims().0)?;
    if let Some((lf, lm)) = &labels {
        check_dims(fixed.dims().0, lf.dims().0)?;
        check_dims(moving.dims().0, lm.dims().0)?;
    }
    if let Some(b) = p.crop {
        fixed = fixed.crop(b)?;
        moving = moving.crop(b)?;
        if let Some((lf, lm)) = labels {
            labels = Some((lf.crop(b)?, lm.crop(b)?));
        }
    }
    if p.resample {
        fixed = resample_isotropic(&fixed, p.target_spacing_mm)?;
        moving = resample_isotropic(&moving, p.target_spacing_mm)?;
        if let Some((lf, lm)) = labels {
            labels = Some((
                lf.resample_isotropic(p.target_spacing_mm)?,
                lm.resample_isotropic(p.target_spacing_mm)?,
            ));
        }
    }
    check_dims(fixed.dims().0, moving.dims().0)?;
    let [lo, hi] = p.hu_window;
    let fixed = window_normalize(&fixed, lo, hi)?;
    let moving = window_normalize(&moving, lo, hi)?;
    let mask = compute_body_mask(&fixed, p.body_threshold)?;
    let (sf, sm) = match inputs.embeddings {
        None => (
            synth_descriptors(&fixed, p.synth_channels)?,
            synth_descriptors(&moving, p.synth_channels)?,
        ),
        Some((sf, sm)) => {
            check_dims(fixed.dims().0, sf.dims().0)?;
            check_dims(fixed.dims().0, sm.dims().0)?;
            (sf, sm)
        }
    };
    Ok(Prepared {
        fixed,
        moving,
        labels,
        mask,
        sf,
        sm,
    })
}

/// Run on already loaded inputs, writing artifacts under `cfg.output_dir`.
pub fn run_with_inputs(cfg: &PipelineConfig, inputs: PipelineInputs) -> Result<RunReport> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("preprocess"))?;
    let synth = inputs.embeddings.is_none();
    let t0 = Instant::now();
    let prep = preprocess(cfg, inputs).map_err(|e| e.in_stage("preprocess"))?;
    let dims = prep.fixed.dims();
    let mut artifacts = Vec::new();
    let initial_metrics = match &prep.labels {
        Some((lf, lm)) => {
            let m = MetricsReport::compute(lf, lm, None).map_err(|e| e.in_stage("preprocess"))?;
            let path = out.join("initial_metrics.json");
            m.write_json(&path).map_err(|e| e.in_stage("preprocess"))?;
            artifacts.push(path);
            Some(m)
        }
        None => None,
    };
    let write =
        |f: &dyn Fn(&Path) -> Result<()>, name: &str, list: &mut Vec<PathBuf>| -> Result<()> {
            let path = out.join(name);
            f(&path)?;
            list.push(path);
            Ok(())
        };
    write(
        &|p| io::save_volume(&prep.fixed, p),
        "fixed.mhd",
        &mut artifacts,
    )
    .and_then(|_| {
        write(
            &|p| io::save_volume(&prep.moving, p),
            "moving.mhd",
            &mut artifacts,
        )
    })
    .map_err(|e| e.in_stage("preprocess"))?;
    if cfg.output.write_embeddings {
        write(
            &|p| io::save_embedding(&prep.sf, p),
            "fixed_embedding.evol",
            &mut artifacts,
        )
        .and_then(|_| {
            write(
                &|p| io::save_embedding(&prep.sm, p),
                "moving_embedding.evol",
                &mut artifacts,
            )
        })
        .map_err(|e| e.in_stage("preprocess"))?;
    }
    let preprocess_seconds = t0.elapsed().as_secs_f64();

    let mut state = State {
        total: DisplacementField::zeros(dims)
            .with_geometry(prep.fixed.spacing(), prep.fixed.origin()),
        warped: prep.moving.clone(),
        sm: prep.sm.clone(),
        affine_points: Vec::new(),
    };
    let mut panels: Vec<(String, Volume, Option<LabelVolume>)> = vec![
        (
            "fixed".into(),
            prep.fixed.clone(),
            prep.labels.as_ref().map(|l| l.0.clone()),
        ),
        (
            "moving".into(),
            prep.moving.clone(),
            prep.labels.as_ref().map(|l| l.1.clone()),
        ),
    ];
    let mut stages = Vec::new();
    for stage in cfg.ordered_stages() {
        let t = Instant::now();
        let (mut report, labels) = run_stage(cfg, stage, &prep, &mut state, synth)
            .map_err(|e| e.in_stage(stage.name()))?;
        report.seconds = t.elapsed().as_secs_f64();
        log::info!(
            "stage {stage}: {:.2} s{}",
            report.seconds,
            report
                .metrics
                .as_ref()
                .map(|m| format!(", mean Dice {:.4}", m.mean_dice))
                .unwrap_or_default()
        );
        panels.push((stage.name().into(), state.warped.clone(), labels));
        stages.push(report);
    }

    let total_field = out.join("total_field.evol");
    io::save_field(&state.total, &total_field).map_err(|e| e.in_stage("output"))?;
    artifacts.push(total_field.clone());
    if cfg.output.slices {
        let axis = cfg.output.slice_axis;
        let index = cfg.output.slice_index.unwrap_or(dims.0[axis] / 2);
        let list: Vec<SlicePanel> = panels
            .iter()
            .map(|(name, v, l)| SlicePanel {
                name,
                volume: v,
                labels: l.as_ref(),
            })
            .collect();
        let paths = emit_slices(&list, axis, index, &out.join("slices"))
            .map_err(|e| e.in_stage("output"))?;
        artifacts.extend(paths);
    }
    let report = RunReport {
        dims: dims.0,
        spacing: prep.fixed.spacing(),
        body_voxels: prep.mask.voxel_count(),
        preprocess_seconds,
        initial_metrics,
        stages,
        total_field,
        total_mean_displacement: state.total.mean_norm(),
        artifacts,
    };
    report
        .write_json(&out.join("report.json"))
        .map_err(|e| e.in_stage("output"))?;
    Ok(report)
}

struct State {
    /// Composed field from the fixed grid into the original moving image.
    total: DisplacementField,
    warped: Volume,
    sm: EmbeddingVolume,
    /// Fixed grid points that survived affine matching.
    affine_points: Vec<[usize; 3]>,
}

fn run_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    prep: &Prepared,
    state: &mut State,
    synth: bool,
) -> Result<(StageReport, Option<LabelVolume>)> {
    let dir = cfg.output_dir.join(stage.name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut report = StageReport {
        stage,
        seconds: 0.0,
        metrics: None,
        matches: None,
        candidates: None,
        residual_rms: None,
        loss_history: None,
        final_loss: None,
        mean_displacement: 0.0,
        artifacts: Vec::new(),
    };
    let geometry =
        |f: DisplacementField| f.with_geometry(prep.fixed.spacing(), prep.fixed.origin());
    let field = match stage {
        Stage::Affine => {
            let ms = grid_match(&prep.sf, &state.sm, &prep.mask, &cfg.matching)?;
            report.matches = Some(ms.len());
            report.candidates = Some(ms.candidates);
            let path = dir.join("matches.csv");
            ms.write_csv(&path)?;
            report.artifacts.push(path);
            let fit = fit_affine(&ms)?;
            report.residual_rms = Some(fit.residual_rms);
            let path = dir.join("affine.txt");
            fit.transform.save(&path)?;
            report.artifacts.push(path);
            state.affine_points = ms
                .fixed_points
                .iter()
                .map(|p| p.map(|v| v as usize))
                .collect();
            geometry(fit.transform.to_field(prep.fixed.dims())?)
        }
        Stage::Coarse => {
            let ms = match_points(&prep.sf, &state.sm, &state.affine_points, &cfg.matching)?;
            report.matches = Some(ms.len());
            report.candidates = Some(ms.candidates);
            let path = dir.join("matches.csv");
            ms.write_csv(&path)?;
            report.artifacts.push(path);
            geometry(build_coarse_field(
                &ms,
                prep.fixed.dims(),
                cfg.matching.grid_stride,
            )?)
        }
        Stage::Deform => {
            if cfg.output.correlation_feature {
                let feat = correlation_feature(&prep.sf, &state.sm, 2)?;
                let path = dir.join("correlation.evol");
                io::save_channels(&path, CORRELATION_CHANNELS, &prep.fixed, feat.into_data())?;
                report.artifacts.push(path);
            }
            let (field, history) = optimize_field(
                &prep.fixed,
                &state.warped,
                &prep.sf,
                &state.sm,
                &prep.mask,
                &cfg.deform,
            )?;
            let path = dir.join("loss.csv");
            write_loss_history(&history, &path)?;
            report.final_loss = history.last().copied();
            report.loss_history = Some(path.clone());
            report.artifacts.push(path);
            field
        }
    };
    report.mean_displacement = field.mean_norm();
    let path = dir.join("field.evol");
    io::save_field(&field, &path)?;
    report.artifacts.push(path);

    state.total = compose_fields(&state.total, &field)?;
    state.warped = warp_by_field(&prep.moving, &state.total)?;
    state.sm = if synth {
        synth_descriptors(&state.warped, prep.sf.channels())?
    } else {
        warp_embedding_by_field(&prep.sm, &state.total)?
    };
    let path = dir.join("warped.mhd");
    io::save_volume(&state.warped, &path)?;
    report.artifacts.push(path);
    if cfg.output.write_embeddings {
        let path = dir.join("embedding.evol");
        io::save_embedding(&state.sm, &path)?;
        report.artifacts.push(path);
    }

    let mut warped_labels = None;
    if let Some((lf, lm)) = &prep.labels {
        let wl = warp_labels_by_field(lm, &state.total)?;
        let metrics = MetricsReport::compute(lf, &wl, Some((&state.total, &prep.mask)))?;
        let path = dir.join("warped_labels.mhd");
        io::save_labels(&wl, &path)?;
        report.artifacts.push(path);
        let path = dir.join("metrics.json");
        metrics.write_json(&path)?;
        report.artifacts.push(path);
        let path = dir.join("metrics.csv");
        metrics.write_csv(&path)?;
        report.artifacts.push(path);
        report.metrics = Some(metrics);
        warped_labels = Some(wl);
    }
    Ok((report, warped_labels))
}
