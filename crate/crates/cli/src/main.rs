use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segdec::gradsuite::Scope;
use segdec_cli::commands::{self, Split};
use segdec_cli::exit_code;
use segdec_cli::settings::RunConfig;

/// Segmentation decoder toolkit: data generation, training, evaluation,
/// gradient verification, cost accounting and attention maps.
#[derive(Parser)]
#[command(name = "segdec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of PGM images and masks.
    Gen(Settings),
    /// Train a model and write the log and checkpoints.
    Train(Settings),
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or all
        #[arg(long, default_value = "val")]
        split: String,
        #[command(flatten)]
        settings: Settings,
    },
    /// Finite-difference gradient checks: op, acfa, tffa, smmm, net or all.
    Gradcheck {
        #[arg(required = true)]
        scopes: Vec<String>,
    },
    /// Parameters, MACs and forward time per module.
    Bench(Settings),
    /// Export attention gates and masks for one sample.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id or index.
        #[arg(long)]
        sample: String,
        #[command(flatten)]
        settings: Settings,
    },
}

/// Configuration sources. Flags win over the file, which wins over defaults.
#[derive(Args, Default)]
struct Settings {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key, e.g. `--set tffa.fourier=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    count: Option<String>,
    /// Image side length for both the data and the model.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    blur: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    val_count: Option<String>,
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    use_acfa: Option<String>,
    #[arg(long)]
    use_tffa: Option<String>,
    #[arg(long)]
    use_smmm: Option<String>,
}

impl Settings {
    fn resolve(&self) -> segdec::Result<RunConfig> {
        let named = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("data.dir", &self.data),
            ("data.count", &self.count),
            ("data.size", &self.size),
            ("data.family", &self.family),
            ("data.blur", &self.blur),
            ("data.noise", &self.noise),
            ("train.epochs", &self.epochs),
            ("train.batch_size", &self.batch_size),
            ("train.lr", &self.lr),
            ("train.weight_decay", &self.weight_decay),
            ("train.val_count", &self.val_count),
            ("train.dtype", &self.dtype),
            ("model.encoder_channels", &self.channels),
            ("model.use_acfa", &self.use_acfa),
            ("model.use_tffa", &self.use_tffa),
            ("model.use_smmm", &self.use_smmm),
        ];
        let mut overrides: Vec<(String, String)> = named
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if let Some(size) = &self.size {
            for k in ["model.height", "model.width"] {
                overrides.push((k.to_string(), size.clone()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| segdec::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn scopes(names: &[String]) -> segdec::Result<Vec<Scope>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Scope::ALL.to_vec());
    }
    names.iter().map(|n| Scope::parse(n)).collect()
}

fn run(cli: Cli) -> segdec::Result<bool> {
    match cli.command {
        Command::Gen(s) => commands::gen(&s.resolve()?).map(|_| true),
        Command::Train(s) => commands::train(&s.resolve()?).map(|_| true),
        Command::Eval {
            checkpoint,
            split,
            settings,
        } => {
            let split = Split::parse(&split)?;
            commands::eval(&settings.resolve()?, &checkpoint, split).map(|_| true)
        }
        Command::Gradcheck { scopes: names } => commands::gradcheck(&scopes(&names)?),
        Command::Bench(s) => commands::bench(&s.resolve()?).map(|_| true),
        Command::Heatmap {
            checkpoint,
            sample,
            settings,
        } => commands::heatmap(&settings.resolve()?, &checkpoint, &sample).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SEGDEC_THREADS").ok().and_then(|v| v.parse().ok()) {
        // an already-initialized pool keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
