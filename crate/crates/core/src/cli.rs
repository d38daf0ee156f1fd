//! The `cmdistill` command line: data generation, training, evaluation,
//! diagnostics and the ablation grid.
//!
//! A training run directory holds `config.resolved`, `metrics.csv`,
//! `ckpt-*.bin` and the `report-*.csv` files written by later commands.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ConfigFile;
use crate::data::{gen_synthetic, Dataset, Split, SyntheticSpec};
use crate::diagnostics::{grad_check, gradient_concentration, toy_config, ConcentrationObjective, Nets};
use crate::error::{Error, Result};
use crate::eval::{extract_features, linear_probe, metrics_table, retrieval_on_test, ProbeConfig, Similarity};
use crate::experiment::{ablation_cells, run_cell, ABLATION_HEADER};
use crate::trainer::{fit, DistillState, CONFIG_FILE};

#[derive(Parser, Debug)]
#[command(name = "cmdistill", version, about = "Cross-level multi-instance self-distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetChoice {
    Teacher,
    Student,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset described by a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe top-1 of a checkpoint's frozen features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long, value_enum, default_value_t = NetChoice::Teacher)]
        net: NetChoice,
    },
    /// Rank-1, Rank-5 and mAP retrieval on the test split.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cosine")]
        similarity: String,
        #[arg(long, value_enum, default_value_t = NetChoice::Teacher)]
        net: NetChoice,
    },
    /// Finite-difference check of the full objective on a toy problem.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Share of input-gradient mass inside the glyph.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// image_only or cmd
        #[arg(long)]
        objective: String,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Train and evaluate every cell of the component and λ1 grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report-ablate.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one command line, writing results to `out`. Returns the process
/// exit code; errors are returned for the caller to report.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}").map_err(stdout_error)?;
                return Ok(0);
            }
            return Err(Error::usage(e.to_string()));
        }
    };
    execute(cli.command, out)
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run configuration and state of a checkpoint inside a run directory.
fn load_run(checkpoint: &Path) -> Result<(ConfigFile, DistillState, PathBuf)> {
    let dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::usage(format!(
            "{} not found; checkpoints are read from the run directory written by train",
            cfg_path.display()
        )));
    }
    let cfg = ConfigFile::load(&cfg_path)?;
    let state = DistillState::load(checkpoint)?;
    cfg.run.encoder().check(&state.student)?;
    Ok((cfg, state, dir))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::read_dir(dir)?.1)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData { spec, out: dir } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec = SyntheticSpec::parse(&text)?;
            let data = gen_synthetic(&spec)?;
            data.write_dir(&spec, &dir)?;
            writeln!(out, "wrote {} records to {}", data.len(), dir.display()).map_err(stdout_error)?;
        }
        Command::Train { config, data, out: dir } => {
            let mut cfg = ConfigFile::load(&config)?;
            cfg.apply_env()?;
            cfg.run.validate()?;
            let (spec, dataset) = Dataset::read_dir(&data)?;
            // the run directory records the data actually trained on
            cfg.data = spec;
            let fitted = fit(&dataset, &cfg.run, Some(&dir), Some(&cfg.resolved()))?;
            let last = fitted.metrics.last().expect("at least one step");
            writeln!(
                out,
                "trained {} steps, final loss {:.6}; run directory {}",
                fitted.state.step,
                last.loss_total,
                dir.display()
            )
            .map_err(stdout_error)?;
        }
        Command::Probe {
            checkpoint,
            data,
            label_fraction,
            net,
        } => {
            let (cfg, state, dir) = load_run(&checkpoint)?;
            let dataset = load_data(&data)?;
            let params = pick(&state, net);
            let table = extract_features(&dataset, params, &cfg.run.encoder(), cfg.run.image_crop_px)?;
            let top1 = linear_probe(&table, label_fraction, cfg.run.seed, &ProbeConfig::default())?;
            let report = metrics_table(&[("label_fraction", label_fraction), ("top1", top1)]);
            write_file(&dir.join("report-probe.csv"), &report)?;
            writeln!(out, "top-1 {top1:.2}").map_err(stdout_error)?;
        }
        Command::Retrieve {
            checkpoint,
            data,
            similarity,
            net,
        } => {
            let kind: Similarity = similarity.parse()?;
            let (cfg, state, dir) = load_run(&checkpoint)?;
            let dataset = load_data(&data)?;
            let table = extract_features(&dataset, pick(&state, net), &cfg.run.encoder(), cfg.run.image_crop_px)?;
            let m = retrieval_on_test(&table, kind)?;
            let report = metrics_table(&[("rank1", m.rank1), ("rank5", m.rank5), ("map", m.map)]);
            write_file(&dir.join("report-retrieve.csv"), &report)?;
            writeln!(out, "{m}").map_err(stdout_error)?;
        }
        Command::Gradcheck { seed } => {
            let report = grad_check(&toy_config(), seed)?;
            writeln!(out, "{report}").map_err(stdout_error)?;
            return Ok(if report.passed { 0 } else { 1 });
        }
        Command::Diagnose {
            checkpoint,
            data,
            objective,
            samples,
        } => {
            let objective: ConcentrationObjective = objective.parse()?;
            let (cfg, state, dir) = load_run(&checkpoint)?;
            let dataset = load_data(&data)?;
            let test = dataset.indices(Split::Test);
            let picked = &test[..samples.min(test.len())];
            let nets = Nets {
                student: &state.student,
                teacher: &state.teacher,
                center: &state.center,
            };
            let report = gradient_concentration(nets, &dataset, picked, &cfg.run, objective, cfg.run.seed)?;
            write_file(
                &dir.join(format!("report-diagnose-{}.csv", objective.as_str())),
                &report.to_csv(),
            )?;
            writeln!(out, "{report}").map_err(stdout_error)?;
        }
        Command::Ablate { config, data, out: dir } => {
            let mut cfg = ConfigFile::load(&config)?;
            cfg.apply_env()?;
            cfg.run.validate()?;
            let dataset = load_data(&data)?;
            let mut csv = format!("{ABLATION_HEADER}\n");
            writeln!(out, "{ABLATION_HEADER}").map_err(stdout_error)?;
            for cell in ablation_cells(&cfg.run) {
                let row = run_cell(&dataset, &cell)?;
                writeln!(out, "{row}").map_err(stdout_error)?;
                csv.push_str(&row);
                csv.push('\n');
            }
            if let Some(dir) = dir {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_file(&dir.join("report-ablate.csv"), &csv)?;
            }
        }
    }
    Ok(0)
}

fn pick(state: &DistillState, net: NetChoice) -> &crate::encoder::ParamSet {
    match net {
        NetChoice::Teacher => &state.teacher,
        NetChoice::Student => &state.student,
    }
}

/// Exit code for an error: 2 for configuration and usage mistakes, 1 for
/// everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        _ => 1,
    }
}
