use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use embreg::synthetic::{random_affine, render_pair, Phantom, SmoothField};
use embreg::*;
use rand::SeedableRng;

#[derive(Parser)]
#[command(
    name = "embreg",
    version,
    about = "Embedding-guided 3D image registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the affine → coarse → deformable cascade from a TOML config.
    Register {
        config: PathBuf,
        /// Override a config key, e.g. `--set deform.gamma=1.0`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Compute embeddings.
    Embed {
        #[command(subcommand)]
        kind: EmbedKind,
    },
    /// Match grid points of the fixed embedding into the moving one.
    Match {
        fixed: PathBuf,
        moving: PathBuf,
        /// Volume (in HU) whose body mask restricts the query grid; defaults to the whole volume.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        window: Window,
        #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
        body_threshold: f32,
        #[arg(long, default_value_t = 8)]
        grid_stride: usize,
        #[arg(long, default_value_t = 4)]
        search_stride: usize,
        #[arg(long, default_value_t = 0.7, allow_negative_numbers = true)]
        theta: f32,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Least-squares affine from a match CSV.
    FitAffine {
        matches: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Warp a volume, label map or embedding by a field or an affine.
    Warp {
        input: PathBuf,
        #[arg(long, conflicts_with = "affine", required_unless_present = "affine")]
        field: Option<PathBuf>,
        #[arg(long)]
        affine: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Kind::Volume)]
        kind: Kind,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Dice, surface distance and optional Jacobian statistics.
    Metrics {
        reference: PathBuf,
        warped: PathBuf,
        #[arg(long)]
        field: Option<PathBuf>,
        /// Volume (in HU) whose body mask selects Jacobian voxels; defaults to the whole volume.
        #[arg(long, requires = "field")]
        mask: Option<PathBuf>,
        #[command(flatten)]
        window: Window,
        #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
        body_threshold: f32,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write PNG slices of one or more volumes.
    Slices {
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
        /// Label map drawn as contours on every panel.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        /// Slice index; defaults to the middle.
        #[arg(long)]
        index: Option<usize>,
        /// Map HU through this window first; without it inputs must already be in [-1, 1].
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
        hu_window: Option<Vec<f32>>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare analytic loss gradients with finite differences on a synthetic case.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic fixed/moving pair with labels and a matching config.
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        organs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Maximum rotation of the random affine, degrees.
        #[arg(long, default_value_t = 10.0)]
        rotation: f64,
        /// Maximum norm of the smooth deformation, voxels; 0 for affine only.
        #[arg(long, default_value_t = 6.0)]
        deform: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedKind {
    /// Handcrafted descriptors from a CT volume.
    Synth {
        volume: PathBuf,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[command(flatten)]
        window: Window,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Window {
    /// HU window mapped to [-1, 1].
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [-800.0, 400.0], allow_negative_numbers = true)]
    hu_window: Vec<f32>,
}

impl Window {
    fn apply(&self, v: &Volume) -> embreg::Result<Volume> {
        window_normalize(v, self.hu_window[0], self.hu_window[1])
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Volume,
    Labels,
    Embedding,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("embreg: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Register {
            config,
            overrides,
            print_config,
        } => register(&config, &overrides, print_config),
        Command::Embed {
            kind:
                EmbedKind::Synth {
                    volume,
                    channels,
                    window,
                    output,
                },
        } => (|| {
            let v = window.apply(&io::load_volume(&volume)?)?;
            let e = synth_descriptors(&v, channels)?;
            io::save_embedding(&e, &output)?;
            println!(
                "wrote {} ({} channels, {:?})",
                output.display(),
                e.channels(),
                e.dims().0
            );
            Ok::<_, embreg::Error>(())
        })()
        .context("embed"),
        Command::Match {
            fixed,
            moving,
            mask,
            window,
            body_threshold,
            grid_stride,
            search_stride,
            theta,
            output,
        } => (|| {
            let sf = io::load_embedding(&fixed)?;
            let sm = io::load_embedding(&moving)?;
            let mask = match mask {
                Some(p) => {
                    compute_body_mask(&window.apply(&io::load_volume(&p)?)?, body_threshold)?
                }
                None => BodyMask::full(sf.dims()),
            };
            let params = MatchParams {
                grid_stride,
                search_stride,
                theta,
                ..MatchParams::default()
            };
            let set = grid_match(&sf, &sm, &mask, &params)?;
            set.write_csv(&output)?;
            println!(
                "{} of {} grid points matched with similarity ≥ {theta}",
                set.len(),
                set.candidates
            );
            Ok::<_, embreg::Error>(())
        })()
        .context("match"),
        Command::FitAffine { matches, output } => (|| {
            let fit = fit_affine(&MatchSet::read_csv(&matches)?)?;
            fit.transform.save(&output)?;
            print!("{}", fit.transform.to_text());
            println!("residual RMS {:.4} voxels", fit.residual_rms);
            Ok::<_, embreg::Error>(())
        })()
        .context("fit-affine"),
        Command::Warp {
            input,
            field,
            affine,
            kind,
            output,
        } => warp(&input, field.as_deref(), affine.as_deref(), kind, &output).context("warp"),
        Command::Metrics {
            reference,
            warped,
            field,
            mask,
            window,
            body_threshold,
            json,
        } => (|| {
            let a = io::load_labels(&reference)?;
            let b = io::load_labels(&warped)?;
            let field = field.map(|p| io::load_field(&p)).transpose()?;
            let mask = match (&field, mask) {
                (Some(_), Some(p)) => Some(compute_body_mask(
                    &window.apply(&io::load_volume(&p)?)?,
                    body_threshold,
                )?),
                (Some(f), None) => Some(BodyMask::full(f.dims())),
                _ => None,
            };
            let report = MetricsReport::compute(&a, &b, field.as_ref().zip(mask.as_ref()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(p) = json {
                report.write_json(&p)?;
            }
            Ok::<_, embreg::Error>(())
        })()
        .context("metrics"),
        Command::Slices {
            volumes,
            labels,
            axis,
            index,
            hu_window,
            output,
        } => slices(
            &volumes,
            labels.as_deref(),
            axis,
            index,
            hu_window.as_deref(),
            &output,
        )
        .context("slices"),
        Command::Gradcheck {
            size,
            samples,
            seed,
        } => gradcheck(size, samples, seed).context("gradcheck"),
        Command::Phantom {
            size,
            organs,
            seed,
            rotation,
            deform,
            output,
        } => phantom(size, organs, seed, rotation, deform, &output).context("phantom"),
    }
}

fn register(config: &Path, overrides: &[String], print_config: bool) -> Result<()> {
    let cfg = PipelineConfig::load(config, overrides)?;
    if print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let report = run_pipeline(&cfg)?;
    if let Some(m) = &report.initial_metrics {
        println!("{:<8} {:>8} dice {:.4}", "initial", "", m.mean_dice);
    }
    for s in &report.stages {
        let mut line = format!("{:<8} {:>7.2}s", s.stage.name(), s.seconds);
        if let Some(m) = &s.metrics {
            line += &format!(" dice {:.4}", m.mean_dice);
            if let Some(asd) = m.mean_asd_mm {
                line += &format!(" asd {asd:.2}mm");
            }
            if let Some(j) = m.jacobian_std {
                line += &format!(" jac-std {j:.4}");
            }
        }
        if let (Some(k), Some(rms)) = (s.matches, s.residual_rms) {
            line += &format!(" matches {k} rms {rms:.3}");
        }
        if let Some(l) = s.final_loss {
            line += &format!(" loss {:.4}", l.total);
        }
        println!("{line}");
    }
    println!("report: {}", cfg.output_dir.join("report.json").display());
    Ok(())
}

fn warp(
    input: &Path,
    field: Option<&Path>,
    affine: Option<&Path>,
    kind: Kind,
    output: &Path,
) -> embreg::Result<()> {
    let affine = affine.map(AffineTransform::load).transpose()?;
    let field_for = |dims: Dims| -> embreg::Result<DisplacementField> {
        match (&affine, field) {
            (Some(a), _) => a.to_field(dims),
            (None, Some(p)) => io::load_field(p),
            (None, None) => Err(Error::InvalidParameter("need --field or --affine".into())),
        }
    };
    match kind {
        Kind::Volume => {
            let v = io::load_volume(input)?;
            let out = match &affine {
                Some(a) => apply_affine(&v, a)?,
                None => warp_by_field(&v, &field_for(v.dims())?)?,
            };
            io::save_volume(&out, output)
        }
        Kind::Labels => {
            let l = io::load_labels(input)?;
            io::save_labels(&warp_labels_by_field(&l, &field_for(l.dims())?)?, output)
        }
        Kind::Embedding => {
            let e = io::load_embedding(input)?;
            let out = match &affine {
                Some(a) => apply_affine_embedding(&e, a)?,
                None => warp_embedding_by_field(&e, &field_for(e.dims())?)?,
            };
            io::save_embedding(&out, output)
        }
    }
}

fn slices(
    volumes: &[PathBuf],
    labels: Option<&Path>,
    axis: usize,
    index: Option<usize>,
    window: Option<&[f32]>,
    output: &Path,
) -> embreg::Result<()> {
    let vols = volumes
        .iter()
        .map(|p| {
            let v = io::load_volume(p)?;
            match window {
                Some(w) => window_normalize(&v, w[0], w[1]),
                None => Ok(v),
            }
        })
        .collect::<embreg::Result<Vec<_>>>()?;
    let names: Vec<String> = volumes
        .iter()
        .map(|p| {
            p.file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let labels = labels.map(io::load_labels).transpose()?;
    if axis > 2 {
        return Err(Error::InvalidParameter(format!(
            "slice axis must be 0, 1 or 2, got {axis}"
        )));
    }
    let index = index.unwrap_or(vols[0].dims().0[axis] / 2);
    let panels: Vec<SlicePanel> = vols
        .iter()
        .zip(&names)
        .map(|(v, n)| SlicePanel {
            name: n,
            volume: v,
            labels: labels.as_ref(),
        })
        .collect();
    for p in emit_slices(&panels, axis, index, output)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck(size: usize, samples: usize, seed: u64) -> Result<()> {
    if size < 6 {
        bail!("size must be at least 6");
    }
    let dims = Dims::new(size, size, size);
    let ph = Phantom::generate(dims, 3, seed);
    let (f, _) = ph.render(|u| u);
    let (m, _) = ph.render(|u| [u[0] + 0.6, u[1] - 0.35, u[2] + 0.25]);
    let f = window_normalize(&f, -800.0, 400.0)?;
    let m = window_normalize(&m, -800.0, 400.0)?;
    let sf = synth_descriptors(&f, 16)?;
    let sm = synth_descriptors(&m, 16)?;
    let mask = BodyMask::full(dims);
    let inputs = LossInputs::new(&f, &m, &sf, &sm, &mask, 2)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tau = SmoothField::random(&mut rng, dims, 4, size as f64 / 4.0, 1.5);
    let tau = DisplacementField::from_fn(dims, |p| tau.eval(p));
    let mut failed = false;
    for (name, term, tol) in [
        ("smoothness", LossTerm::Smoothness, 1e-3),
        ("sam", LossTerm::Sam, 1e-3),
        ("ncc", LossTerm::Ncc, 1e-2),
    ] {
        let err = gradient_check(term, &inputs, &tau, samples, seed)?;
        let ok = err < tol;
        failed |= !ok;
        println!(
            "{name:<10} max relative error {err:.3e} (tolerance {tol:.0e}) {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        bail!("gradient check exceeded tolerance");
    }
    Ok(())
}

fn phantom(
    size: usize,
    organs: usize,
    seed: u64,
    rotation: f64,
    deform: f64,
    out: &Path,
) -> Result<()> {
    let dims = Dims::new(size, size, size);
    let ph = Phantom::generate(dims, organs, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = random_affine(
        &mut rng,
        dims.center(),
        rotation,
        (0.92, 1.08),
        size as f64 / 12.0,
    );
    let phi =
        (deform > 0.0).then(|| SmoothField::random(&mut rng, dims, 6, size as f64 / 6.0, deform));
    let pair = render_pair(&ph, &a, phi.as_ref());
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::save_volume(&pair.fixed, &out.join("fixed.mhd"))?;
    io::save_volume(&pair.moving, &out.join("moving.mhd"))?;
    io::save_labels(&pair.fixed_labels, &out.join("fixed_labels.mhd"))?;
    io::save_labels(&pair.moving_labels, &out.join("moving_labels.mhd"))?;
    io::save_field(&pair.truth, &out.join("truth_field.evol"))?;
    let mut cfg = PipelineConfig::new("fixed.mhd", "moving.mhd", "run");
    cfg.fixed_labels = Some("fixed_labels.mhd".into());
    cfg.moving_labels = Some("moving_labels.mhd".into());
    cfg.seed = seed;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    println!("wrote pair and config.toml to {}", out.display());
    Ok(())
}
