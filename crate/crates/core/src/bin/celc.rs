use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use celc::clustering::ClusteringParams;
use celc::geometry::Vec3;
use celc::harness::compare::compare_methods;
use celc::harness::export::{export_stream, synth_stream};
use celc::harness::io::{read_calibration, read_csv, write_csv, write_csv_to};
use celc::harness::pipeline::{estimate_from_files, PipelineParams};
use celc::harness::sweep::{run_sweep, SweepConfig, SweepVariable, TrialRecord};
use celc::linefit::LineFitParams;
use celc::refine::RefineParams;
use celc::solver::SolverParams;
use celc::synth::MotionSpec;
use celc::Result;

#[derive(Parser)]
#[command(name = "celc", version, about = "Linear velocity of an event camera from line clusters and a known angular velocity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single-variable synthetic sweep.
    SynthSweep(SweepArgs),
    /// Estimate per-window velocity directions from recorded files.
    Estimate(EstimateArgs),
    /// Summarize trial CSVs per method.
    Compare(CompareArgs),
    /// Write a synthetic stream as event, gyro and calibration files.
    ExportSynth(ExportArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// event_noise, line_noise, omega_noise, speed, interval or n_lines
    #[arg(long)]
    variable: SweepVariable,
    /// Comma-separated grid; defaults to the variable's standard grid.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    n_events: usize,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    no_ce3lc: bool,
    /// Record wall time per trial (makes output run-dependent).
    #[arg(long)]
    timing: bool,
    /// Draw independent seeds per grid point instead of reusing them across points.
    #[arg(long)]
    unpaired: bool,
    /// Per-trial CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-point summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    gyro: PathBuf,
    /// TOML with fx, fy, cx, cy, dist, width, height.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    window: usize,
    #[arg(long)]
    polarity_split: bool,
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    allow_partial: bool,
    /// Largest gyro sample spacing tolerated at a window midpoint, s.
    #[arg(long)]
    max_gyro_gap: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    neighbor_radius: f64,
    #[arg(long, default_value_t = 2.0)]
    plane_dist_thresh: f64,
    #[arg(long, default_value_t = 0.2)]
    normal_angle_thresh: f64,
    #[arg(long, default_value_t = 200)]
    min_cluster_size: usize,
    /// Sub-window length for boundary line fits, s.
    #[arg(long, default_value_t = 0.005)]
    line_window: f64,
    #[arg(long, default_value_t = 1000)]
    sample_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Trial CSVs written by synth-sweep.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    n_lines: usize,
    #[arg(long, default_value_t = 25_000)]
    n_events: usize,
    #[arg(long, default_value_t = 0.0)]
    event_noise: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,0,2")]
    omega: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,0")]
    v: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    duration: f64,
}

fn vec3(xs: &[f64], name: &str) -> Result<Vec3> {
    match xs {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(celc::CelcError::InvalidParameter(format!("{name} needs three comma-separated values"))),
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = SweepConfig::new(a.variable);
    if let Some(g) = a.grid {
        cfg.grid = g;
    }
    cfg.trials = a.trials;
    cfg.seed = a.seed;
    cfg.base.n_events = a.n_events;
    cfg.refine = !a.no_refine;
    cfg.ce3lc = !a.no_ce3lc;
    cfg.timing = a.timing;
    cfg.paired = !a.unpaired;
    let res = run_sweep(&cfg)?;
    write_csv(&a.out, &res.records)?;
    match a.summary {
        Some(p) => write_csv(&p, &res.summary)?,
        None => write_csv_to(io::stdout().lock(), &res.summary)?,
    }
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let cam = read_calibration(&a.calib)?;
    let clustering = ClusteringParams {
        window: a.window,
        neighbor_radius: a.neighbor_radius,
        plane_dist_thresh: a.plane_dist_thresh,
        normal_angle_thresh: a.normal_angle_thresh,
        min_cluster_size: a.min_cluster_size,
        split_by_polarity: a.polarity_split,
        sensor_width: cam.width as f64,
        ..Default::default()
    };
    let params = PipelineParams {
        window: a.window,
        clustering,
        linefit: LineFitParams {
            window_len: a.line_window,
            ..Default::default()
        },
        solver: SolverParams {
            sample_size: a.sample_size,
            seed: a.seed,
            ..Default::default()
        },
        refine: a.refine.then(|| RefineParams::for_camera(&cam)),
        max_gyro_gap: a.max_gyro_gap,
        allow_partial: a.allow_partial,
        ..Default::default()
    };
    let reports = estimate_from_files(&a.events, &a.gyro, &a.calib, &params)?;
    match a.out {
        Some(p) => write_csv(&p, &reports),
        None => write_csv_to(io::stdout().lock(), &reports),
    }
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut records: Vec<TrialRecord> = Vec::new();
    for p in &a.reports {
        records.extend(read_csv::<TrialRecord>(p)?);
    }
    let table = compare_methods(&records)?;
    match a.out {
        Some(p) => write_csv(&p, &table),
        None => write_csv_to(io::stdout().lock(), &table),
    }
}

fn export(a: ExportArgs) -> Result<()> {
    let motion = MotionSpec {
        omega: vec3(&a.omega, "--omega")?,
        v: vec3(&a.v, "--v")?,
        duration: a.duration,
    };
    if !(motion.duration > 0.0) {
        return Err(celc::CelcError::InvalidParameter("--duration must be positive".into()));
    }
    let stream = synth_stream(a.seed, &motion, a.n_lines, a.n_events, a.event_noise)?;
    let paths = export_stream(&a.dir, &stream)?;
    eprintln!(
        "wrote {} events to {}, gyro to {}, calibration to {}",
        stream.events.len(),
        paths.events.display(),
        paths.gyro.display(),
        paths.calibration.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthSweep(a) => sweep(a),
        Command::Estimate(a) => estimate(a),
        Command::Compare(a) => compare(a),
        Command::ExportSynth(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
