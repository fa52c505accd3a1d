use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lidar_oss::checkpoint::Checkpoint;
use lidar_oss::io::{generate_scene, read_labeled_scan, read_scan, write_labels, write_scan};
use lidar_oss::network::Topology;
use lidar_oss::openset::{segment, OpenSetConfig};
use lidar_oss::trainer::{
    create_run_dir, evaluate, feature_dump, sweep_threshold, threshold_range, train, write_predictions,
    Dataset, Scan, TrainConfig,
};
use lidar_oss::{gradcheck, Error, Result};

/// Open-set semantic segmentation of LiDAR scans.
#[derive(Parser)]
#[command(name = "lidar-oss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scans and labels to a directory.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint, config and reports to a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on validation data.
    Eval(EvalArgs),
    /// Label a single scan.
    Infer(InferArgs),
    /// Fraction of voxels flagged unknown across a threshold range.
    Sweep(SweepArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
    /// Per-voxel open-set features of one scan as a text table.
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of the timestamped run directories.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Write artifacts here instead of a new run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn output_dir(&self, seed: u64) -> Result<PathBuf> {
        match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                Ok(dir.clone())
            }
            None => create_run_dir(&self.runs_dir, seed),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Index of the first scene.
    #[arg(long, default_value_t = 0)]
    offset: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// a, b, c or a topology name.
    #[arg(long)]
    topology: Option<String>,
    /// Five comma-separated loss weights.
    #[arg(long, value_delimiter = ',', num_args = 5)]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    /// Skip the validation pass after training.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    xi: Option<f64>,
    /// Also write per-point labels and scores.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    unknown_id: Option<u16>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long, default_value_t = -1.0)]
    from: f64,
    #[arg(long, default_value_t = 2.0)]
    to: f64,
    #[arg(long, default_value_t = 31)]
    steps: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    /// Defaults to the scan path with a `.label` extension.
    #[arg(long)]
    labels: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NON_FINITE: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.common.load()?;
    cfg.scene.validate()?;
    let dir = a.common.output_dir(cfg.scene.seed)?;
    for i in a.offset..a.offset + a.count as u64 {
        let (cloud, labels) = generate_scene(&cfg.scene.with_scene_index(i))?;
        write_scan(&cloud, dir.join(format!("{i:06}.bin")))?;
        write_labels(&labels, dir.join(format!("{i:06}.label")))?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = &a.train_dir {
        t.train_dir = Some(v.clone());
    }
    if let Some(v) = &a.val_dir {
        t.val_dir = Some(v.clone());
    }
    if let Some(v) = a.train_scenes {
        t.train_scenes = v;
    }
    if let Some(v) = a.val_scenes {
        t.val_scenes = v;
    }
    if let Some(v) = &a.topology {
        cfg.net.topology = Topology::parse(v)?;
    }
    if let Some(v) = &a.lambda {
        cfg.loss.lambda.copy_from_slice(v);
    }
    cfg.validate()?;
    let dir = a.common.output_dir(cfg.train.seed)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    let data = cfg.training_data()?;
    let ck_path = cfg.train.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    let mut outcome = match train(&cfg, &data) {
        Ok(o) => o,
        Err(abort) => {
            let path = dir.join("last_good.ckpt");
            abort.last_good.save(&path)?;
            eprintln!("training aborted; last good parameters in {}", path.display());
            return Err(abort.error);
        }
    };
    outcome.checkpoint.save(&ck_path)?;
    if !a.no_eval {
        let val = cfg.validation_data()?;
        let ev = evaluate(&outcome.checkpoint, &val, &cfg.openset)?;
        write_file(&dir.join("metrics.json"), &ev.report.to_json())?;
        outcome.report.metrics = Some(ev.report);
    }
    write_file(&dir.join("run_report.json"), &outcome.report.to_json())?;
    println!("{}", dir.display());
    Ok(())
}

fn openset_with(cfg: &TrainConfig, xi: Option<f64>) -> OpenSetConfig {
    let mut os = cfg.openset.clone();
    if let Some(x) = xi {
        os.xi = x;
    }
    os
}

fn validation(cfg: &mut TrainConfig, ck: &Checkpoint, val_dir: &Option<PathBuf>) -> Result<Dataset> {
    if let Some(d) = val_dir {
        cfg.train.val_dir = Some(d.clone());
    }
    if ck.known != cfg.known()? {
        return Err(Error::Config(format!(
            "checkpoint classes {:?} differ from config classes {:?}",
            ck.known.ids(),
            cfg.known()?.ids()
        )));
    }
    cfg.validation_data()
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let os = openset_with(&cfg, a.xi);
    let data = validation(&mut cfg, &ck, &a.val_dir)?;
    let ev = evaluate(&ck, &data, &os)?;
    let dir = a.common.output_dir(cfg.train.seed)?;
    write_file(&dir.join("metrics.json"), &ev.report.to_json())?;
    if a.predictions {
        for (scan, res) in data.scans.iter().zip(&ev.results) {
            write_predictions(dir.join("predictions"), &scan.name, res)?;
        }
    }
    println!("{}", ev.report.to_json());
    Ok(())
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut os = openset_with(&cfg, a.xi);
    if let Some(id) = a.unknown_id {
        os.unknown_output_id = id;
    }
    os.validate(&ck.known)?;
    let cloud = read_scan(&a.scan)?;
    let mapping = lidar_oss::voxel::voxelize(&cloud, &cfg.grid);
    let (f_s, f_o) = ck.net.infer(&cloud, &mapping);
    let res = segment(&f_s, &f_o, &mapping, &ck.known, &os);
    let dir = a.common.output_dir(cfg.train.seed)?;
    let name = a.scan.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("scan".into());
    write_predictions(&dir, &name, &res)?;
    println!("{}", dir.display());
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let xis = threshold_range(a.from, a.to, a.steps)?;
    let data = validation(&mut cfg, &ck, &a.val_dir)?;
    let rows = sweep_threshold(&ck, &data, &xis)?;
    let mut table = String::from("xi flagged_fraction\n");
    for r in &rows {
        table.push_str(&format!("{:.6} {:.6}\n", r.xi, r.flagged_fraction));
    }
    let dir = a.common.output_dir(cfg.train.seed)?;
    write_file(&dir.join("sweep.txt"), &table)?;
    print!("{table}");
    println!("# AUROC and AUPR rank the continuous score and do not depend on xi.");
    Ok(())
}

fn run_dump(a: &DumpArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let labels = a.labels.clone().unwrap_or_else(|| a.scan.with_extension("label"));
    let (cloud, labels) = read_labeled_scan(&a.scan, &labels)?;
    let name = a.scan.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("scan".into());
    let scan = Scan::prepare(name.clone(), cloud, labels, &cfg.grid, &ck.known)?;
    let dir = a.common.output_dir(cfg.train.seed)?;
    let path = dir.join(format!("{name}.features.txt"));
    write_file(&path, &feature_dump(&ck, &scan))?;
    println!("{}", path.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Sweep(a) => run_sweep(a),
        Command::DumpFeatures(a) => run_dump(a),
        Command::Gradcheck(a) => {
            let report = gradcheck::run(a.seed, a.tolerance, a.inject_fault);
            println!("{report}");
            if !report.passed() {
                return ExitCode::from(EXIT_CHECK_FAILED);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
