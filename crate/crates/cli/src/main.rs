use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fcm_fracture::calibrate::{run_sweep, SWEEP_TXT};
use fcm_fracture::config::RunConfig;
use fcm_fracture::image::RawType;
use fcm_fracture::phantom::{generate, PhantomSpec, KINDS};
use fcm_fracture::pipeline::{self, CHECKPOINT};
use fcm_fracture::{configure_threads, Error};

#[derive(Parser)]
#[command(name = "fcmfrac", version, about = "Phase-field fracture simulation on voxel images")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "FCMFRAC_THREADS")]
    threads: Option<usize>,
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `output.dir` of the configuration.
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.output.dir = dir.clone();
        }
        let out = cfg.output.dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    I16,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write all artifacts.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a synthetic voxel image (raw data plus JSON sidecar).
    Phantom {
        /// One of uniform-bar, notched-plate, sphere, layered-bone-surrogate.
        #[arg(long)]
        kind: Option<String>,
        /// Image size as NX,NY,NZ.
        #[arg(long, value_parser = parse_triple::<usize>)]
        size: Option<[usize; 3]>,
        /// Voxel edge length [mm].
        #[arg(long)]
        spacing: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Bulk ash density [g/cm³].
        #[arg(long)]
        density: Option<f64>,
        /// Sphere radius in voxels.
        #[arg(long)]
        radius: Option<f64>,
        /// TOML file with the full phantom parameter set; flags override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long, short, default_value = ".")]
        output: PathBuf,
        /// File stem of the written files.
        #[arg(long, default_value = "phantom")]
        stem: String,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: Dtype,
    },
    /// Run the parameter sweep of the configuration and rank the candidates.
    Calibrate {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Print the probe strain of the checkpointed state.
    Probe {
        #[command(flatten)]
        args: ConfigArgs,
        /// Probe center as X,Y,Z [mm]; defaults to `postproc.probe.center`.
        #[arg(long, value_parser = parse_triple::<f64>, allow_hyphen_values = true)]
        center: Option<[f64; 3]>,
        /// Probe radius [mm]; defaults to `postproc.probe.radius`.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Regenerate CSV and VTK outputs from the checkpoint.
    Postproc {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Print the program version.
    Version,
}

/// Parse `A,B,C` into three values.
fn parse_triple<T: std::str::FromStr + Copy>(text: &str) -> Result<[T; 3], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got '{text}'"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|e| format!("'{p}': {e}"))?);
    }
    Ok([out[0], out[1], out[2]])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_secs()
        .init();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { args, resume } => cmd_run(&args, resume),
        Command::Phantom {
            kind,
            size,
            spacing,
            seed,
            density,
            radius,
            spec,
            output,
            stem,
            dtype,
        } => {
            let mut p = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => PhantomSpec::default(),
            };
            if let Some(k) = kind {
                p.kind = k;
            } else if p.kind.is_empty() {
                return Err(Error::Config(format!("phantom: --kind is required ({})", KINDS.join(", "))));
            }
            p.dims = size.unwrap_or(p.dims);
            p.spacing = spacing.unwrap_or(p.spacing);
            p.seed = seed.unwrap_or(p.seed);
            p.density = density.unwrap_or(p.density);
            p.radius_voxels = radius.unwrap_or(p.radius_voxels);
            let image = generate(&p)?;
            let dtype = match dtype {
                Dtype::F32 => RawType::F32,
                Dtype::I16 => RawType::I16,
            };
            let sidecar = image.save(&output, &stem, dtype)?;
            println!(
                "{}: {} x {} x {} voxels, {} inside -> {}",
                p.kind,
                p.dims[0],
                p.dims[1],
                p.dims[2],
                image.inside_count(),
                sidecar.display()
            );
            Ok(())
        }
        Command::Calibrate { args } => {
            let (cfg, out) = args.load()?;
            let results = run_sweep(&cfg, &out)?;
            let table = std::fs::read_to_string(out.join(SWEEP_TXT)).map_err(|e| Error::io(&out.join(SWEEP_TXT), e))?;
            print!("{table}");
            if results.iter().all(|r| r.error.is_some()) {
                return Err(Error::Postproc("every sweep candidate failed".into()));
            }
            Ok(())
        }
        Command::Probe { args, center, radius } => {
            let (cfg, out) = args.load()?;
            let probe = cfg.postproc.probe.as_ref();
            let center = match (center, probe) {
                (Some(c), _) => c,
                (None, Some(p)) => p.center,
                (None, None) => {
                    return Err(Error::Config(
                        "probe: no probe center; pass --center or set postproc.probe.center".into(),
                    ))
                }
            };
            let radius = radius.or(probe.map(|p| p.radius)).unwrap_or(0.0);
            let eps3 = pipeline::probe_checkpoint(&cfg, &out, center, radius)?;
            println!("eps3_ustrain = {eps3}");
            Ok(())
        }
        Command::Postproc { args } => {
            let (cfg, out) = args.load()?;
            let summary = pipeline::postprocess(&cfg, &out)?;
            match summary.failure_load {
                Some(f) => println!("regenerated outputs in {}; failure load {:.3} N at step {}", out.display(), f.force, f.step),
                None => println!("regenerated outputs in {}", out.display()),
            }
            Ok(())
        }
        Command::Version => {
            println!("fcmfrac {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn cmd_run(args: &ConfigArgs, resume: bool) -> Result<(), Error> {
    let (cfg, out) = args.load()?;
    let checkpoint = out.join(CHECKPOINT);
    let resume_from: Option<&Path> = resume.then_some(checkpoint.as_path());
    if let Some(p) = resume_from {
        if !p.is_file() {
            return Err(Error::Checkpoint(format!("--resume: no checkpoint at {}", p.display())));
        }
    }
    let report = pipeline::run_with(&cfg, &out, resume_from, |state, _| {
        if let (Some(r), Some(s)) = (state.records.last(), state.summaries.last()) {
            log::info!(
                "step {:4}  u = {:.5}  F = {:10.3} N  iterations {:2}{}",
                r.step,
                r.applied_displacement,
                r.reaction_force,
                s.iterations,
                if s.converged { "" } else { "  (not converged)" }
            );
        }
    })?;
    let s = &report.summary;
    match &s.failure_load {
        Some(f) => println!(
            "failure load {:.3} N at step {} (u = {}){}",
            f.force,
            f.step,
            f.applied_displacement,
            if f.peak_detected { "" } else { " [no peak: last recorded maximum]" }
        ),
        None => println!("no load steps recorded"),
    }
    println!(
        "{} steps, {} not converged, termination {:?}, wall time {:.1} s",
        s.steps, s.nonconverged_steps, s.termination, s.wall_time_s
    );
    if let Some(r) = &s.strain_regression {
        println!("strain regression: slope {:.4}, R² {:.4}, RMSE {:.1} µstrain", r.slope, r.r2, r.rmse);
    }
    println!("outputs in {}", out.display());
    Ok(())
}
