use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spikeaudit::data::DatasetName;
use spikeaudit::harness::verify;
use spikeaudit::harness::{
    expand, prepare_data, read_records, report, run_cells, BitsTarget, Cell, ExperimentConfig, ReportStyle,
    ResultsStore, RunOptions, SweepAxes,
};
use spikeaudit::nets::{build_model, checkpoint, evaluate_accuracy, train_model, Paradigm};
use spikeaudit::spiking::SurrogateKind;

#[derive(Parser)]
#[command(
    name = "spikeaudit",
    version,
    about = "Train SNN/ANN classifiers and audit them with membership inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train target models only and save their checkpoints.
    Train(RunArgs),
    /// Train target and shadow models, attack the target, and record the result.
    Attack(RunArgs),
    /// Run the Cartesian product of the given axes, skipping finished cells.
    Sweep(RunArgs),
    /// Summarize stored results as a table or as threshold curves.
    Report(ReportArgs),
    /// Print the default configuration for a dataset and paradigm.
    Defaults(DefaultsArgs),
    /// Run the randomized property suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "iris")]
    dataset: DatasetName,
    #[arg(long, default_value = "snn")]
    paradigm: Paradigm,
    /// Bit widths; more than one value is only meaningful for `sweep`.
    #[arg(long, value_delimiter = ',')]
    bits: Vec<u32>,
    /// Which quantizer `--bits` sets.
    #[arg(long, value_enum, default_value = "state")]
    bits_target: BitsFlag,
    /// Clip thresholds θq of the state quantizer.
    #[arg(long, value_delimiter = ',')]
    threshold: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    surrogate: Vec<SurrogateKind>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    subset: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BitsFlag {
    Weight,
    State,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Results directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, default_value = "data")]
    data_root: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also save target and shadow checkpoints under `<out>/checkpoints`.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// `table` or `curves`.
    #[arg(long, default_value = "table")]
    style: ReportStyle,
    /// Restrict to one dataset; required when the store holds several.
    #[arg(long)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    paradigm: Option<Paradigm>,
}

#[derive(Args)]
struct DefaultsArgs {
    #[arg(long, default_value = "iris")]
    dataset: DatasetName,
    #[arg(long, default_value = "snn")]
    paradigm: Paradigm,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn some<T: Clone>(v: &[T]) -> Option<Vec<T>> {
    (!v.is_empty()).then(|| v.to_vec())
}

impl ConfigArgs {
    fn template(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::defaults(self.dataset, self.paradigm),
        };
        if let Some(s) = self.subset {
            cfg.subset_fraction = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        } else if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn axes(&self) -> SweepAxes {
        SweepAxes {
            bits: some(&self.bits),
            bits_target: match self.bits_target {
                BitsFlag::Weight => BitsTarget::Weight,
                BitsFlag::State => BitsTarget::State,
            },
            thresholds: some(&self.threshold),
            surrogates: some(&self.surrogate),
            seeds: None,
            paradigms: None,
        }
    }

    /// Cells of a single configuration, rejecting multi-valued axes.
    fn single(&self) -> Result<Vec<Cell>> {
        if self.bits.len() > 1 || self.threshold.len() > 1 || self.surrogate.len() > 1 {
            bail!("several values given for one axis; use `sweep`");
        }
        Ok(expand(&self.template()?, &self.axes())?)
    }
}

fn run(args: &RunArgs, cells: &[Cell]) -> Result<bool> {
    let store = ResultsStore::open(&args.out)?;
    let opts = RunOptions {
        data_root: args.data_root.clone(),
        checkpoint_dir: args.checkpoints.then(|| args.out.join("checkpoints")),
    };
    let outcome = run_cells(cells, &opts, &store, args.workers)?;
    for r in &outcome.records {
        println!(
            "{} {} {} seed {}: train {:.4} test {:.4} auc {:.4}",
            r.dataset,
            r.paradigm,
            r.quant_label(),
            r.seed,
            r.train_accuracy,
            r.test_accuracy,
            r.mia_auc
        );
    }
    if outcome.skipped > 0 {
        println!("{} cells already in {}", outcome.skipped, store.path().display());
    }
    for f in &outcome.failed {
        eprintln!(
            "failed {} seed {} at {}: {}",
            &f.digest[..12],
            f.seed,
            f.stage.unwrap_or("-"),
            f.message
        );
    }
    Ok(outcome.success())
}

fn train(args: &RunArgs) -> Result<bool> {
    let dir = args.out.join("checkpoints");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut ok = true;
    for cell in args.config.single()? {
        let cfg = &cell.config;
        let result = (|| -> spikeaudit::Result<(f64, f64, PathBuf)> {
            let split = prepare_data(cfg, cell.seed, &args.data_root)?;
            let spec = cfg.model_spec(split.num_classes, split.input_shape.clone());
            let trained = train_model(build_model(spec, cell.seed)?, &split, &cfg.train, cell.seed)?;
            let path = dir.join(format!("{}-{}-target.ckpt", &cell.digest()[..16], cell.seed));
            checkpoint::save(&trained.model, &path)?;
            let train_acc = evaluate_accuracy(&trained.model, &split.train)?;
            let test_acc = evaluate_accuracy(&trained.model, &split.test)?;
            Ok((train_acc, test_acc, path))
        })();
        match result {
            Ok((tr, te, path)) => println!("seed {}: train {tr:.4} test {te:.4} -> {}", cell.seed, path.display()),
            Err(e) => {
                eprintln!("seed {} failed: {e}", cell.seed);
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn sweep(args: &RunArgs) -> Result<bool> {
    let cells = expand(&args.config.template()?, &args.config.axes())?;
    log::info!("{} cells", cells.len());
    run(args, &cells)
}

fn report_cmd(args: &ReportArgs) -> Result<bool> {
    let path = args.out.join(ResultsStore::FILE_NAME);
    let records: Vec<_> = read_records(&path)?
        .into_iter()
        .filter(|r| args.dataset.is_none_or(|d| r.dataset == d))
        .filter(|r| args.paradigm.is_none_or(|p| r.paradigm == p))
        .collect();
    let mut datasets: Vec<DatasetName> = records.iter().map(|r| r.dataset).collect();
    datasets.dedup();
    if args.dataset.is_none() && datasets.len() > 1 {
        for d in DatasetName::ALL {
            let subset: Vec<_> = records.iter().filter(|r| r.dataset == d).cloned().collect();
            if !subset.is_empty() {
                print_report(&subset, args.style, &args.out, Some(d))?;
            }
        }
        return Ok(true);
    }
    print_report(&records, args.style, &args.out, args.dataset)?;
    Ok(true)
}

fn print_report(
    records: &[spikeaudit::harness::ResultRecord],
    style: ReportStyle,
    out: &Path,
    dataset: Option<DatasetName>,
) -> Result<()> {
    let text = report(records, style).with_context(|| format!("no matching records in {}", out.display()))?;
    match style {
        ReportStyle::Table => println!("{text}"),
        ReportStyle::Curves => {
            let name = dataset.unwrap_or(records[0].dataset);
            let path = out.join(format!("curves-{name}.csv"));
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn defaults(args: &DefaultsArgs) -> Result<bool> {
    let cfg = ExperimentConfig::defaults(args.dataset, args.paradigm);
    print!("{}", cfg.to_toml()?);
    Ok(true)
}

fn verify_cmd(args: &VerifyArgs) -> Result<bool> {
    let suites = verify::run_all(args.seed)?;
    for s in &suites {
        print!("{s}");
    }
    Ok(suites.iter().all(|s| s.passed()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => a.config.single().and_then(|cells| run(a, &cells)),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report_cmd(a),
        Command::Defaults(a) => defaults(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
