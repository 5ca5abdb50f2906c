use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gelina_cli::config::OUT_DIR_ENV;
use gelina_cli::{Pipeline, PipelineError, RunConfig};

/// Joint speech and gesture synthesis pipeline.
///
/// Any configuration key can be overridden with `--<key> <value>`, e.g.
/// `--backbone.finetune_steps 200 --seed 3`. Run `gelina config` to list them.
#[derive(Parser, Debug)]
#[command(name = "gelina", version)]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Do not print the resolved configuration or progress.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpus.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Gesture, speech and text tokenizers.
    Tokenizer {
        #[command(subcommand)]
        action: TokenizerAction,
    },
    /// Autoregressive backbone training.
    Backbone {
        #[command(subcommand)]
        action: BackboneAction,
    },
    /// Flow-matching gesture decoder.
    Flow {
        #[command(subcommand)]
        action: TrainAction,
    },
    /// Feature extractor used by the gesture distance metric.
    Extractor {
        #[command(subcommand)]
        action: TrainAction,
    },
    /// Generate speech and gestures from text.
    Synthesize {
        #[arg(long)]
        text: String,
        /// Output file stem under synth/.
        #[arg(long, default_value = "sample")]
        name: String,
    },
    /// Continue a corpus clip used as a speech and gesture prompt.
    Clone {
        /// Clip id from the corpus manifest.
        #[arg(long)]
        prompt: String,
        /// Leading words of the prompt clip to keep (default: all).
        #[arg(long)]
        prompt_words: Option<usize>,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "clone")]
        name: String,
    },
    /// Gestures for the recorded speech of a corpus clip.
    S2g {
        #[arg(long)]
        clip: String,
        #[arg(long, default_value = "s2g")]
        name: String,
    },
    /// Objective metrics on held-out clips.
    Evaluate,
    /// Every stage from corpus generation to evaluation.
    Pipeline,
    /// Print the resolved configuration.
    Config,
}

#[derive(Subcommand, Debug)]
enum CorpusAction {
    Gen,
}

#[derive(Subcommand, Debug)]
enum TokenizerAction {
    Train { kind: TokenizerKind },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TokenizerKind {
    Gesture,
    Speech,
    Text,
}

#[derive(Subcommand, Debug)]
enum BackboneAction {
    Pretrain,
    Finetune,
}

#[derive(Subcommand, Debug)]
enum TrainAction {
    Train,
}

/// Pull `--<config key> <value>` and `--<config key>=<value>` out of argv.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), PipelineError> {
    let keys = RunConfig::keys();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if keys.contains(&name) {
            let value = match inline {
                Some(v) => v,
                None => it
                    .next()
                    .ok_or_else(|| PipelineError::Usage(format!("--{name} needs a value")))?,
            };
            overrides.push((name, value));
        } else if name.contains('.') {
            return Err(PipelineError::Usage(format!("unknown config key {name:?}")));
        } else {
            rest.push(a);
        }
    }
    Ok((rest, overrides))
}

fn resolve(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        cfg.apply([("out_dir", dir.as_str())])?;
    }
    cfg.apply(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

fn run(cli: Cli, cfg: RunConfig) -> Result<(), PipelineError> {
    if let Command::Config = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let mut p = Pipeline::new(cfg)?;
    if cli.quiet {
        p = p.quiet();
    } else {
        eprint!("{}", p.config().to_text());
        eprintln!("# out_dir resolved to {}", p.root().display());
    }
    match cli.command {
        Command::Corpus { action: CorpusAction::Gen } => p.generate_corpus().map(drop),
        Command::Tokenizer {
            action: TokenizerAction::Train { kind },
        } => match kind {
            TokenizerKind::Gesture => p.train_gesture_tokenizer(),
            TokenizerKind::Speech => p.train_speech_tokenizer(),
            TokenizerKind::Text => p.train_text_tokenizer(),
        },
        Command::Backbone { action } => match action {
            BackboneAction::Pretrain => p.pretrain_backbone(),
            BackboneAction::Finetune => p.finetune_backbone(),
        },
        Command::Flow { .. } => p.train_flow(),
        Command::Extractor { .. } => p.train_extractor(),
        Command::Synthesize { text, name } => p.synthesize(&text, &name).map(drop),
        Command::Clone {
            prompt,
            prompt_words,
            text,
            name,
        } => p.clone_clip(&prompt, prompt_words, &text, &name).map(drop),
        Command::S2g { clip, name } => p.speech_to_gesture(&clip, &name).map(drop),
        Command::Evaluate => p.evaluate().map(drop),
        Command::Pipeline => p.run_all().map(drop),
        Command::Config => unreachable!("handled above"),
    }
}

fn fail(e: PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match resolve(&cli, &overrides) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
