use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adbench::data::PrepConfig;
use adbench::models::ModelKind;
use adbench::occlusion::Baseline;
use adbench::volume::NormMode;
use adbench_cli::commands::{self, AblationGrid, ClassChoice, OcclusionArgs};
use adbench_cli::config::ExperimentConfig;
use adbench_cli::results::RESULTS_FILE;
use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// FDG-PET Alzheimer's benchmark on synthetic or real cohorts.
#[derive(Parser)]
#[command(name = "adbench", version)]
struct Cli {
    /// Force sequential, bit-reproducible kernels (same as ADBENCH_STRICT=1).
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum CohortKind {
    AdniLike,
    FleniLike,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    ZscorePerImage,
    Minmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Zero,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Predicted,
    Given,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort: volumes, manifest.csv and cohort.json.
    Synth {
        #[arg(long, value_enum)]
        cohort: CohortKind,
        /// Number of subjects.
        #[arg(short = 'n', long)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coarsen the grid by this factor, keeping the field of view.
        #[arg(long, default_value_t = 1)]
        coarsen: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a cohort onto the common grid (and optionally normalise).
    Preprocess {
        /// Cohort directory or manifest CSV.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target grid as X,Y,Z.
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 128, 77])]
        grid: Vec<usize>,
        #[arg(long, default_value_t = adbench::volume::DEFAULT_MASK_TAU)]
        mask_tau: f64,
        #[arg(long, value_enum)]
        normalization: Option<Norm>,
    },
    /// Cross-validate one experiment config; appends to <out>/results.csv.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Re-run even if results for this config already exist.
        #[arg(long)]
        force: bool,
    },
    /// Run every valid combination of an ablation grid and print the summary.
    Ablate {
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Occlusion relevance map for one preprocessed volume.
    Occlusion {
        /// Fold checkpoint written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Volume on the model's grid (see `preprocess`).
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
        #[arg(long, value_enum, default_value_t = BaselineArg::Zero)]
        baseline: BaselineArg,
        /// Explain the predicted class or the one named by --label.
        #[arg(long, value_enum, default_value_t = ClassArg::Predicted)]
        class: ClassArg,
        #[arg(long)]
        label: Option<String>,
    },
    /// Render the mean (std) AUC table from a results file.
    Report {
        /// results.csv, or the directory holding it.
        results: PathBuf,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a model's parameter breakdown.
    Describe {
        #[arg(long)]
        model: ModelKind,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        slices: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        /// Name components to group by.
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
}

fn execute(cli: Cli) -> Result<()> {
    if cli.strict {
        adbench_tensor::exec::set_strict(Some(true));
    }
    match cli.cmd {
        Cmd::Synth { cohort, subjects, seed, coarsen, out } => {
            let name = match cohort {
                CohortKind::AdniLike => "adni-like",
                CohortKind::FleniLike => "fleni-like",
            };
            commands::synth(name, subjects, seed, coarsen, &out)
        }
        Cmd::Preprocess { cohort, out, grid, mask_tau, normalization } => {
            if grid.len() != 3 {
                bail!("--grid takes three comma-separated sizes, got {}", grid.len());
            }
            let prep = PrepConfig { grid: [grid[0], grid[1], grid[2]], mask_tau };
            let norm = normalization.map(|n| match n {
                Norm::ZscorePerImage => NormMode::ZscorePerImage,
                Norm::Minmax => NormMode::Minmax,
            });
            commands::preprocess(&cohort, &out, &prep, norm)
        }
        Cmd::Run { config, out, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = commands::run(&cfg, &out, force)?;
            if r.skipped {
                println!("config {} already has results in {}; nothing to do (use --force to re-run)", &r.config_hash[..12], out.join(RESULTS_FILE).display());
            } else {
                println!("config {}: {} rows appended to {}", &r.config_hash[..12], r.appended, out.join(RESULTS_FILE).display());
            }
            Ok(())
        }
        Cmd::Ablate { grid, out, force } => {
            let g = AblationGrid::load(&grid)?;
            let table = commands::ablate(&g, grid.parent().unwrap_or(Path::new(".")), &out, force)?;
            print!("{table}");
            Ok(())
        }
        Cmd::Occlusion { checkpoint, volume, out, patch, stride, baseline, class, label } => {
            let class = match (class, label) {
                (ClassArg::Predicted, None) => ClassChoice::Predicted,
                (ClassArg::Predicted, Some(_)) => bail!("--label only applies with --class given"),
                (ClassArg::Given, Some(l)) => ClassChoice::Given(l),
                (ClassArg::Given, None) => bail!("--class given needs --label"),
            };
            let baseline = match baseline {
                BaselineArg::Zero => Baseline::Zero,
                BaselineArg::Mean => Baseline::ImageMean,
            };
            let (csv, pgm) = commands::occlusion(&OcclusionArgs { checkpoint: &checkpoint, volume: &volume, out: &out, patch, stride, baseline, class })?;
            println!("wrote {} and {}", csv.display(), pgm.display());
            Ok(())
        }
        Cmd::Report { results, out } => {
            let path = if results.is_dir() { results.join(RESULTS_FILE) } else { results };
            let table = commands::report(&path)?;
            if let Some(o) = out {
                std::fs::write(&o, &table)?;
            }
            print!("{table}");
            Ok(())
        }
        Cmd::Describe { model, classes, slices, image_size, depth } => {
            print!("{}", commands::describe(model, classes, slices, image_size, depth)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
