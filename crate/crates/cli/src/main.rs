//! `dpmhm`: simulate logs, run the estimator, evaluate trajectories and export plot data.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use dpmhm::config::RunConfig;
use dpmhm::io::{self, fmt_f64};
use dpmhm::pipeline::{integrate_odometry, run_pipeline, RunInputs};
use dpmhm::sim::{generate_world, simulate};
use dpmhm::types::Pose;

const MEASUREMENTS: &str = "measurements.csv";
const ODOMETRY: &str = "odometry.csv";
const GROUND_TRUTH: &str = "ground_truth.csv";

#[derive(Parser, Debug)]
#[command(name = "dpmhm", version, about = "Multiple-hypothesis semantic SLAM on synthetic or recorded logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and write measurement, odometry and ground-truth logs.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator on logs; writes trajectory.csv, map.csv and metrics.csv.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding measurements.csv, odometry.csv and optionally ground_truth.csv.
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long)]
        odometry: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a trajectory with ground truth and write the per-step error series.
    Eval {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// metrics.csv of the run, for the hypothesis-count series.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Odometry log, to report the drift reduction against dead reckoning.
        #[arg(long)]
        odometry: Option<PathBuf>,
        /// Per-step CSV output; printed summary only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect the per-frame RMSE series of several runs into one CSV.
    ExportPlot {
        /// `label=path/to/metrics.csv`; repeat for each run.
        #[arg(long = "series", value_name = "LABEL=METRICS", required = true)]
        series: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set mode=mhm_threshold`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn simulate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world = generate_world(&cfg.world_spec())?;
    let log = simulate(&world, &cfg.detector_spec(), &cfg.odometry_spec(), cfg.run_seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_measurements(create(&out.join(MEASUREMENTS))?, &log.measurements)?;
    io::write_odometry(create(&out.join(ODOMETRY))?, &log.odometry)?;
    io::write_poses(create(&out.join(GROUND_TRUTH))?, &log.ground_truth)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    println!(
        "wrote {} scenes, {} measurements, {} landmarks to {}",
        log.odometry.len(),
        log.measurements.len(),
        world.landmarks.len(),
        out.display()
    );
    Ok(())
}

fn run_cmd(
    cfg: &RunConfig,
    logs: Option<&Path>,
    measurements: Option<PathBuf>,
    odometry: Option<PathBuf>,
    ground_truth: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let in_logs = |name: &str| logs.map(|d| d.join(name));
    let mpath = measurements.or_else(|| in_logs(MEASUREMENTS)).context("no measurement log given (--measurements or --logs)")?;
    let opath = odometry.or_else(|| in_logs(ODOMETRY)).context("no odometry log given (--odometry or --logs)")?;
    let gpath = ground_truth.or_else(|| in_logs(GROUND_TRUTH).filter(|p| p.exists()));

    let inputs = RunInputs {
        measurements: io::read_measurements(open(&mpath)?).with_context(|| format!("in {}", mpath.display()))?,
        odometry: io::read_odometry(open(&opath)?).with_context(|| format!("in {}", opath.display()))?,
        ground_truth: match &gpath {
            Some(p) => Some(io::read_poses(open(p)?).with_context(|| format!("in {}", p.display()))?),
            None => None,
        },
    };
    let output = run_pipeline(cfg, &inputs)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_poses(create(&out.join("trajectory.csv"))?, &output.trajectory)?;
    io::write_map(create(&out.join("map.csv"))?, &output.map)?;
    io::write_metrics(create(&out.join("metrics.csv"))?, &output.metrics)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    println!("scenes {}", output.trajectory.len());
    println!("landmarks {}", output.map.len());
    println!("loop_closures {}", output.closures.len());
    println!("mean_hypotheses {}", fmt_f64(output.mean_hypotheses));
    if let (Some(r), Some(o)) = (output.rmse, output.odometry_rmse) {
        println!("rmse {}", fmt_f64(r));
        println!("odometry_rmse {}", fmt_f64(o));
    }
    Ok(())
}

/// Per-step translation errors after checking that both series share timestamps.
fn step_errors(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<Vec<f64>> {
    ensure!(est.len() == gt.len(), "trajectory has {} rows but ground truth has {}", est.len(), gt.len());
    est.iter()
        .zip(gt)
        .enumerate()
        .map(|(k, ((ta, a), (tb, b)))| {
            if (ta - tb).abs() > 1e-6 {
                bail!("misaligned timestamps at row {}: {ta} vs {tb}", k + 1);
            }
            Ok((a.translation - b.translation).norm())
        })
        .collect()
}

fn rms(e: &[f64]) -> f64 {
    (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()
}

fn eval_cmd(
    trajectory: &Path,
    ground_truth: &Path,
    metrics: Option<&Path>,
    odometry: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let est = io::read_poses(open(trajectory)?).with_context(|| format!("in {}", trajectory.display()))?;
    let gt = io::read_poses(open(ground_truth)?).with_context(|| format!("in {}", ground_truth.display()))?;
    let errors = step_errors(&est, &gt)?;
    let hyps = match metrics {
        Some(p) => {
            let rows = io::read_metrics(open(p)?).with_context(|| format!("in {}", p.display()))?;
            ensure!(rows.len() == errors.len(), "metrics has {} rows but trajectory has {}", rows.len(), errors.len());
            Some(rows.iter().map(|r| r.n_hypotheses).collect::<Vec<_>>())
        }
        None => None,
    };

    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmse = rms(&errors);
    println!("rmse {}", fmt_f64(rmse));
    println!("mean_error {}", fmt_f64(mean));
    println!("std_error {}", fmt_f64(std));
    println!("max_error {}", fmt_f64(errors.iter().copied().fold(0.0, f64::max)));
    if let Some(h) = &hyps {
        println!("mean_hypotheses {}", fmt_f64(h.iter().sum::<usize>() as f64 / n));
    }
    if let Some(p) = odometry {
        let odo = io::read_odometry(open(p)?).with_context(|| format!("in {}", p.display()))?;
        let dead: Vec<(f64, Pose)> = odo.iter().map(|r| r.0).zip(integrate_odometry(gt[0].1, &odo)).collect();
        let odo_rmse = rms(&step_errors(&dead, &gt)?);
        println!("odometry_rmse {}", fmt_f64(odo_rmse));
        if odo_rmse > 0.0 {
            println!("drift_reduction_percent {}", fmt_f64(100.0 * (1.0 - rmse / odo_rmse)));
        }
    }

    if let Some(out) = out {
        let mut w = create(out)?;
        let header = if hyps.is_some() { "frame,t,error,n_hypotheses" } else { "frame,t,error" };
        writeln!(w, "{header}")?;
        for (k, e) in errors.iter().enumerate() {
            write!(w, "{k},{},{}", fmt_f64(gt[k].0), fmt_f64(*e))?;
            if let Some(h) = &hyps {
                write!(w, ",{}", h[k])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn export_plot_cmd(series: &[String], out: &Path) -> Result<()> {
    let mut labels = vec![];
    let mut table: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
    for (i, s) in series.iter().enumerate() {
        let (label, path) = s.split_once('=').with_context(|| format!("--series expects LABEL=PATH, got '{s}'"))?;
        ensure!(!label.is_empty() && !label.contains(','), "invalid series label '{label}'");
        let rows = io::read_metrics(open(Path::new(path))?).with_context(|| format!("in {path}"))?;
        for r in rows {
            let row = table.entry(r.frame).or_insert_with(|| vec![None; series.len()]);
            row[i] = Some(r.rmse);
        }
        labels.push(label.to_string());
    }
    let mut w = create(out)?;
    writeln!(w, "frame,{}", labels.join(","))?;
    for (frame, vals) in &table {
        let cells: Vec<String> = vals.iter().map(|v| v.map(fmt_f64).unwrap_or_default()).collect();
        writeln!(w, "{frame},{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, out } => simulate_cmd(&config.load()?, &out),
        Command::Run { config, logs, measurements, odometry, ground_truth, out } => {
            run_cmd(&config.load()?, logs.as_deref(), measurements, odometry, ground_truth, &out)
        }
        Command::Eval { trajectory, ground_truth, metrics, odometry, out } => {
            eval_cmd(&trajectory, &ground_truth, metrics.as_deref(), odometry.as_deref(), out.as_deref())
        }
        Command::ExportPlot { series, out } => export_plot_cmd(&series, &out),
    }
}
