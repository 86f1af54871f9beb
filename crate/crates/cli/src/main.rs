use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lipkit::align::{align_clip, FitMode, Point, Template};
use lipkit::data::{generate_synthetic, Split, SynthConfig};
use lipkit::harness::{exit_code, run_ablation, run_eval, run_train, AblationOptions, RunConfig, Suite, TrainOptions};
use lipkit::{Error, Result, Tensor};

/// Train, evaluate and compare word-level lip reading models on the CPU.
#[derive(Parser)]
#[command(name = "lipkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic word dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 120)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Rendered frame side in pixels.
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Oscillate the mouth at another class's rate outside the word.
        #[arg(long)]
        boundary_context: bool,
        /// Jitter head pose per frame and write landmarks plus a template.
        #[arg(long)]
        jitter: bool,
        /// Per-pixel noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs; the run can be resumed later.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Write per-clip predictions as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Base config the presets modify (default: the desk basic pipeline).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run only these presets of the suite.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Align clips to a template using per-frame landmarks.
    Align {
        /// Directory of `.lkt` clips.
        #[arg(long)]
        frames: PathBuf,
        /// JSON object mapping clip name to per-frame landmarks, or a
        /// directory holding one `<clip>.json` per clip.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Similarity)]
        mode: ModeArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Similarity,
    Affine,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn align_dir(frames: &Path, landmarks: &Path, template: &Path, out: &Path, mode: FitMode) -> Result<usize> {
    let template: Template = read_json(template)?;
    template.validate()?;
    let table: Option<BTreeMap<String, Vec<Vec<Point>>>> =
        if landmarks.is_dir() { None } else { Some(read_json(landmarks)?) };
    let mut clips: Vec<PathBuf> = fs::read_dir(frames)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", frames.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lkt"))
        .collect();
    clips.sort();
    if clips.is_empty() {
        return Err(Error::Data(format!("no .lkt clips in {}", frames.display())));
    }
    fs::create_dir_all(out)?;
    for clip in &clips {
        let stem = clip.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let marks = match &table {
            Some(t) => t.get(&stem).cloned().ok_or_else(|| Error::Data(format!("no landmarks for clip `{stem}`")))?,
            None => read_json(&landmarks.join(format!("{stem}.json")))?,
        };
        let video = Tensor::<f32>::load(clip).map_err(|e| Error::Data(format!("{}: {e}", clip.display())))?;
        let aligned = align_clip(&video, &marks, &template, mode)?;
        aligned.save(out.join(clip.file_name().unwrap()))?;
    }
    Ok(clips.len())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, classes, per_class, frames, size, boundary_context, jitter, noise, seed } => {
            let mut cfg = SynthConfig { classes, per_class, frames, size, boundary_context, jitter, seed, ..Default::default() };
            if let Some(n) = noise {
                cfg.noise = n;
            }
            let m = generate_synthetic(&cfg, &out)?;
            println!("wrote {} clips of {} classes to {}", m.samples.len(), m.class_names.len(), out.display());
        }
        Command::Train { config, data, out, resume, stop_after } => {
            let cfg = RunConfig::load(&config)?;
            let s = run_train(&cfg, &data, &out, &TrainOptions { resume, stop_after })?;
            println!(
                "trained {} epochs; best val acc {:.4} at epoch {}; config {}",
                s.epochs, s.best_val_acc, s.best_epoch, s.config_hash
            );
        }
        Command::Eval { ckpt, data, split, predictions, json } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let report = run_eval(&ckpt, &data, split)?;
            if let Some(p) = predictions {
                fs::write(p, report.predictions_csv())?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::Ablate { suite, data, out, seeds, config, only } => {
            let suite: Suite = suite.parse()?;
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::desk_basic(),
            };
            let report = run_ablation(suite, &data, &out, &AblationOptions { seeds, base, only })?;
            print!("{}", report.table());
        }
        Command::Align { frames, landmarks, template, out, mode } => {
            let mode = match mode {
                ModeArg::Similarity => FitMode::Similarity,
                ModeArg::Affine => FitMode::Affine,
            };
            let n = align_dir(&frames, &landmarks, &template, &out, mode)?;
            println!("aligned {n} clips into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
