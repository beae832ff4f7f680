use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands;
use crate::config;
use crate::run::Run;

#[derive(Debug, Parser)]
#[command(name = "asuka-lab", version, about = "Toy-scale runs for aligned latent inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set align_train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Use this exact run directory instead of a timestamped one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Continue an interrupted run in `--out`, reusing finished stages.
    #[arg(long, global = true, requires = "out")]
    pub resume: bool,

    /// Earlier run directories to read checkpoints from (later ones win).
    #[arg(long = "from", global = true, value_name = "RUN_DIR")]
    pub from: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample masks from the mixture recipe.
    MaskGen {
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Offline latent augmentation with a trained VAE and base generator.
    AugmentCorpus {
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train the toy VAE and the base denoiser.
    TrainBase {
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train the toy masked autoencoder.
    TrainMae {
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train the alignment module against the frozen generator.
    TrainAlign {
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train adapters, gates and prompt (and fine-tune alignment).
    TrainInject {
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train the conditional harmonization decoder.
    TrainDecoder {
        #[arg(long)]
        images: Option<PathBuf>,
        /// Output directory of `augment-corpus` (its `augmented/` folder).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// G@e of baseline and conditional decoders on the color-shift set.
    Eval {
        /// Saved evaluation set instead of a freshly generated one.
        #[arg(long = "eval-set")]
        eval_set: Option<PathBuf>,
    },
    /// Hallucination verdicts from a chat-completions judge.
    Judge {
        #[arg(long)]
        composites: Option<PathBuf>,
    },
    /// Cluster-center benchmark selection with background masks.
    BuildDataset {
        /// Directory with one sub-folder per source dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Domain tag of a source folder, as `name=tag`.
        #[arg(long = "domain", value_name = "NAME=TAG")]
        domains: Vec<String>,
    },
    /// Train missing models at demo sizes and inpaint a few images.
    DemoInpaint,
    /// Summary and plots for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MaskGen { .. } => "mask-gen",
            Command::AugmentCorpus { .. } => "augment-corpus",
            Command::TrainBase { .. } => "train-base",
            Command::TrainMae { .. } => "train-mae",
            Command::TrainAlign { .. } => "train-align",
            Command::TrainInject { .. } => "train-inject",
            Command::TrainDecoder { .. } => "train-decoder",
            Command::Eval { .. } => "eval",
            Command::Judge { .. } => "judge",
            Command::BuildDataset { .. } => "build-dataset",
            Command::DemoInpaint => "demo-inpaint",
            Command::Report { .. } => "report",
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Command::Report { run } = &cli.command {
        let summary = crate::report::report(run)?;
        println!("{}", run.join(crate::report::SUMMARY).display());
        if let Some(g) = &summary.gae {
            println!("G@e baseline {:.4}{}", g.baseline_mean, g.trained_mean.map(|t| format!(", conditional {t:.4}")).unwrap_or_default());
        }
        return Ok(());
    }
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    let mut run = Run::create(cfg, cli.command.name(), cli.out.as_deref(), cli.resume, cli.from.clone())?;
    let result = match &cli.command {
        Command::MaskGen { n } => commands::mask_gen(&mut run, *n),
        Command::AugmentCorpus { images } => commands::augment_corpus(&mut run, images.as_deref()),
        Command::TrainBase { images } => commands::train_base(&mut run, images.as_deref()),
        Command::TrainMae { images } => commands::train_mae_cmd(&mut run, images.as_deref()),
        Command::TrainAlign { images } => commands::train_align_cmd(&mut run, images.as_deref()),
        Command::TrainInject { images } => commands::train_inject_cmd(&mut run, images.as_deref()),
        Command::TrainDecoder { images, cache } => commands::train_decoder_cmd(&mut run, images.as_deref(), cache.as_deref()),
        Command::Eval { eval_set } => commands::eval(&mut run, eval_set.as_deref()),
        Command::Judge { composites } => commands::judge(&mut run, composites.as_deref()),
        Command::BuildDataset { input, domains } => commands::build_dataset(&mut run, input.as_deref(), domains),
        Command::DemoInpaint => commands::demo_inpaint(&mut run),
        Command::Report { .. } => unreachable!("handled above"),
    };
    // Seeds drawn before a failure are still worth keeping.
    run.save_manifest()?;
    result?;
    run.finish()?;
    println!("{}", run.dir.display());
    Ok(())
}

/// Parses `args`, runs, and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
