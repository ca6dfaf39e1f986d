//! Command-line driver. `run` parses arguments, resolves the [`RunConfig`] and
//! dispatches to one subcommand.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Dotted config keys and raw values, in the order given.
pub type Overrides = Vec<(String, String)>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] cerberus::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub(crate) fn io(err: std::io::Error, path: &Path) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io(err)
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "missing_file",
            _ => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(cerberus::Error::Config(_)) => 2,
            CliError::MissingFile(_) | CliError::Core(cerberus::Error::NotFound(_)) => 3,
            _ => 1,
        }
    }

    /// Single-line JSON: `{"error": kind, "code": n, "message": ...}`.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string().replace('\n', " "),
        })
        .to_string()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cerberus",
    version,
    about = "Train, decode and benchmark parallel decoding heads"
)]
#[command(after_help = "Any config key can be overridden with a dotted flag, e.g. --gate.threshold 0.5")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// vanilla, medusa or cerberus.
    #[arg(long, global = true)]
    pub paradigm: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the backbone language model on the corpus.
    TrainBackbone,
    /// Train decoding heads on a frozen backbone.
    TrainHeads,
    /// Greedy-decode one prompt; the continuation goes to stdout.
    Decode {
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Write per-step traces as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Decode the prompt suite under every configuration and write reports.
    Bench,
    /// Rebuild reports from a traces file.
    Analyze {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Pick an entropy threshold and store it with the heads.
    CalibrateGate,
    /// Write a path-template set.
    GenTemplates {
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        /// Rank by the trained heads' statistics instead of a uniform prior.
        #[arg(long)]
        from_heads: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's header.
    InspectCkpt { path: PathBuf },
}

/// Pulls `--a.b value` and `--a.b=value` out of `args`.
pub fn split_dotted(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Parses `args` into the subcommand and its ordered config overrides.
/// `Ok(None)` means help or version text was printed.
pub fn parse(args: Vec<String>) -> Result<Option<(Cli, Overrides)>, CliError> {
    let (args, mut overrides) = split_dotted(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(None);
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            return Err(CliError::Config(line.trim_start_matches("error: ").to_string()));
        }
    };
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &cli.out_dir {
        overrides.push((
            "out_dir".into(),
            serde_json::Value::from(d.to_string_lossy()).to_string(),
        ));
    }
    if let Some(p) = &cli.paradigm {
        overrides.push(("paradigm".into(), serde_json::Value::from(p.as_str()).to_string()));
    }
    if let Command::GenTemplates {
        paths, top_k, heads, ..
    } = &cli.command
    {
        let named = [("tree.paths", paths), ("tree.top_k", top_k), ("heads.n_heads", heads)];
        overrides.extend(
            named
                .iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string()))),
        );
    }
    Ok(Some((cli, overrides)))
}

pub fn run(args: Vec<String>) -> Result<(), CliError> {
    let Some((cli, overrides)) = parse(args)? else {
        return Ok(());
    };
    if let Command::InspectCkpt { path } = &cli.command {
        return commands::inspect_ckpt(path);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::TrainBackbone => commands::train_backbone(&cfg),
        Command::TrainHeads => commands::train_heads(&cfg),
        Command::Decode {
            prompt,
            prompt_file,
            trace,
        } => {
            let text = match (prompt, prompt_file) {
                (Some(p), _) => p.into_bytes(),
                (None, Some(f)) => std::fs::read(&f).map_err(|e| CliError::io(e, &f))?,
                (None, None) => Vec::new(),
            };
            commands::decode(&cfg, &text, trace.as_deref())
        }
        Command::Bench => commands::bench(&cfg),
        Command::Analyze { traces } => {
            let path = traces.unwrap_or_else(|| cfg.out_dir.join("bench").join("traces.jsonl"));
            commands::analyze(&cfg, &path)
        }
        Command::CalibrateGate => commands::calibrate_gate(&cfg),
        Command::GenTemplates { from_heads, out, .. } => commands::gen_templates(&cfg, from_heads, out),
        Command::InspectCkpt { .. } => unreachable!("handled before config resolution"),
    }
}
