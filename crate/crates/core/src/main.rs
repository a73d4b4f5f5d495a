use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tagnoise::dataset::CorpusSpec;
use tagnoise::experiment::{
    cmd_report, cmd_sweep, cmd_synth, cmd_train, Condition, CorpusLayout, ExperimentConfig,
};
use tagnoise::noise::sweep_plan;
use tagnoise::{Error, Result};

#[derive(Parser)]
#[command(name = "tagnoise", version, about = "Label-noise experiments for multi-label music tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (WAVs, manifests, vocabulary).
    Synth(SynthArgs),
    /// Train one 5-seed suite on a label condition.
    Train(TrainArgs),
    /// Train one suite per corruption rate and tabulate against r = 0.
    Sweep(SweepArgs),
    /// Render MAP/MAUC tables from finished suite directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with a corpus spec; defaults to the desk preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    curated_per_class: Option<usize>,
    #[arg(long)]
    noisy_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct SuiteArgs {
    /// Experiment config file; flags given alongside override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Directory written by `synth`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    label_seed: Option<u64>,
    /// Hold out a fraction of curated training clips for validation.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.15")]
    holdout: Option<f64>,
    /// Allow feature prefetch on a helper thread.
    #[arg(long)]
    prefetch: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// curated | noisy | noisy_subsampled[:N] | shuffled | corrupted:R
    #[arg(long)]
    condition: Option<Condition>,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Explicit rates in percent, e.g. 0,50,100.
    #[arg(long, value_delimiter = ',', conflicts_with = "step")]
    rates: Option<Vec<u32>>,
    /// Grid 0..=100 with this step.
    #[arg(long)]
    step: Option<u32>,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Suite directories, one table row each.
    #[arg(required = true)]
    suites: Vec<PathBuf>,
}

fn resolve(args: &SuiteArgs, condition: Option<Condition>) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let corpus = args
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Usage("--corpus is required without --config".into()))?;
            let out = args
                .out
                .clone()
                .ok_or_else(|| Error::Usage("--out is required without --config".into()))?;
            let condition = condition.unwrap_or(Condition::Curated);
            match args.preset {
                Preset::Desk => ExperimentConfig::desk(condition, corpus, out),
                Preset::Paper => ExperimentConfig::paper(condition, corpus, out),
            }
        }
    };
    if let Some(c) = condition {
        cfg.condition = c;
    }
    if let Some(dir) = &args.corpus {
        cfg.corpus = CorpusLayout::in_dir(dir);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seeds) = &args.seeds {
        cfg.train.seeds = seeds.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.total_epochs = e;
        if args.lr_drop_epoch.is_none() {
            cfg.train.lr_drop_epoch = e * 4 / 5;
        }
    }
    if let Some(d) = args.lr_drop_epoch {
        cfg.train.lr_drop_epoch = d;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = args.label_seed {
        cfg.label_seed = s;
    }
    if let Some(h) = args.holdout {
        cfg.holdout = Some(h);
    }
    if args.prefetch {
        cfg.train.strict_deterministic = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(args: SynthArgs) -> Result<bool> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => CorpusSpec::desk(),
    };
    if let Some(n) = args.curated_per_class {
        spec.curated_per_class = n;
    }
    if let Some(n) = args.noisy_per_class {
        spec.noisy_per_class = n;
    }
    if let Some(n) = args.test_per_class {
        spec.test_per_class = n;
    }
    let paths = cmd_synth(&spec, args.seed, &args.out)?;
    println!("vocabulary     {}", paths.vocabulary.display());
    println!("curated train  {}", paths.curated_train.display());
    println!("noisy train    {}", paths.noisy_train.display());
    println!("test           {}", paths.test.display());
    Ok(true)
}

fn train(args: TrainArgs) -> Result<bool> {
    let cfg = resolve(&args.suite, args.condition)?;
    if args.suite.print_config {
        print!("{}", cfg.to_text());
        return Ok(true);
    }
    let summary = cmd_train(&cfg)?;
    for r in &summary.runs {
        println!("seed {:>4}  MAP {:.3}  MAUC {:.3}", r.seed, r.report.map, r.report.mauc);
    }
    for (seed, e) in &summary.failures {
        eprintln!("seed {seed} failed: {e}");
    }
    if let Ok(a) = summary.aggregate() {
        println!("{}: MAP {}  MAUC {}", cfg.condition, a.map, a.mauc);
    }
    Ok(summary.is_complete())
}

fn sweep(args: SweepArgs) -> Result<bool> {
    let mut cfg = resolve(&args.suite, None)?;
    if let Some(rates) = args.rates {
        cfg.sweep_rates = rates;
    } else if let Some(step) = args.step {
        cfg.sweep_rates = sweep_plan(0, 100, step)?;
    }
    cfg.validate()?;
    if args.suite.print_config {
        print!("{}", cfg.to_text());
        return Ok(true);
    }
    let summary = cmd_sweep(&cfg)?;
    print!(
        "{}",
        std::fs::read_to_string(cfg.output_dir.join("sweep.txt")).unwrap_or_default()
    );
    Ok(summary.is_complete())
}

fn report(args: ReportArgs) -> Result<bool> {
    let table = cmd_report(&args.suites, &args.out)?;
    print!("{}", table.render_text());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some runs failed; see error.txt in the run directories");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
