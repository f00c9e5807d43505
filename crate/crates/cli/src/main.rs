use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;
use layerforge::expansion::Strategy;
use layerforge::predictor::NormMode;
use layerforge::trainpipe::FreezeMode;
use layerforge::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "layerforge", version, about = "Depth scaling-up toolkit for toy decoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run config; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct PredictorFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    norm_mode: Option<NormMode>,
}

#[derive(Args, Debug, Default)]
struct EvalFlags {
    #[arg(long)]
    eval_count: Option<usize>,
    /// Tokens per evaluation sequence, BOS included.
    #[arg(long)]
    eval_len: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a toy model from scratch.
    TrainToy {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long)]
        max_seq_len: Option<usize>,
        #[arg(long)]
        init_std: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// SVD-decompose families and export signature projections.
    Analyze {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// A family name or "all".
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one layer predictor per family.
    TrainPredictor {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        extra_ckpts: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        pred: PredictorFlags,
        #[arg(long)]
        no_svd: bool,
        #[arg(long)]
        holdout_frac: Option<f64>,
        #[arg(long)]
        family: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Grow a checkpoint with one strategy.
    Expand {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Insertion interval `a:b` (1-based, learned strategies).
        #[arg(long)]
        interval: Option<String>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[arg(long)]
        identity_init: bool,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        n_copies: Option<usize>,
        #[arg(long)]
        n_overlap: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pred_lr: Option<f64>,
        #[command(flatten)]
        pred: PredictorFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Continual pre-training of a (usually expanded) checkpoint.
    Pretrain {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        freeze: Option<FreezeMode>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Perplexity on the held-out split of a corpus.
    EvalPpl {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Expand with several strategies and seeds, then continue training each.
    Compare {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        interval: Option<String>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        pred: PredictorFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn parse_interval(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::arg(format!("interval '{s}' is not of the form a:b")))?;
    let p = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| Error::arg(format!("interval bound '{x}' is not a non-negative integer")))
    };
    Ok((p(a)?, p(b)?))
}

impl TrainFlags {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.train.total_steps, self.steps);
        set(&mut c.train.lr, self.lr);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.grad_accum_steps, self.grad_accum);
        set(&mut c.train.cutoff_len, self.cutoff);
        set(&mut c.train.warmup_ratio, self.warmup_ratio);
    }
}

impl PredictorFlags {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.predictor.lambda, self.lambda);
        set(&mut c.predictor.epochs, self.epochs);
        set(&mut c.predictor.hidden, self.hidden);
        set(&mut c.predictor.norm_mode, self.norm_mode);
    }
}

impl EvalFlags {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.eval_count, self.eval_count);
        set(&mut c.eval_len, self.eval_len);
    }
}

fn load(name: &str, common: &Common) -> Result<RunConfig> {
    let mut c = RunConfig::load(common.config.as_deref(), name)?;
    c.command = name.to_string();
    set(&mut c.seed, common.seed);
    Ok(c)
}

/// Resolves the run configuration (defaults < config file < flags).
fn resolve(cmd: Command) -> Result<RunConfig> {
    Ok(match cmd {
        Command::TrainToy { data, out, layers, d_model, heads, d_ff, max_seq_len, init_std, train, eval, common } => {
            let mut c = load("train-toy", &common)?;
            set_opt(&mut c.paths.data, data);
            set_opt(&mut c.paths.out, out);
            set(&mut c.model.n_layers, layers);
            set(&mut c.model.d_model, d_model);
            set(&mut c.model.n_heads, heads);
            set(&mut c.model.d_ff, d_ff);
            set(&mut c.model.max_seq_len, max_seq_len);
            set(&mut c.init_std, init_std);
            train.apply(&mut c);
            eval.apply(&mut c);
            c
        }
        Command::Analyze { ckpt, family, out, perplexity, iterations, common } => {
            let mut c = load("analyze", &common)?;
            set_opt(&mut c.paths.ckpt, ckpt);
            set_opt(&mut c.paths.out, out);
            set(&mut c.family, family);
            set(&mut c.tsne.perplexity, perplexity);
            set(&mut c.tsne.iterations, iterations);
            c
        }
        Command::TrainPredictor { ckpt, extra_ckpts, out, lr, pred, no_svd, holdout_frac, family, common } => {
            let mut c = load("train-predictor", &common)?;
            set_opt(&mut c.paths.ckpt, ckpt);
            set_opt(&mut c.paths.out, out);
            if !extra_ckpts.is_empty() {
                c.paths.extra_ckpts = extra_ckpts;
            }
            set(&mut c.predictor.lr, lr);
            pred.apply(&mut c);
            if no_svd {
                c.use_svd = false;
            }
            set(&mut c.holdout_frac, holdout_frac);
            set(&mut c.family, family);
            c
        }
        Command::Expand {
            ckpt, strategy, interval, predictors, identity_init, group_size, n_copies, n_overlap, out, pred_lr, pred, common,
        } => {
            let mut c = load("expand", &common)?;
            set_opt(&mut c.paths.ckpt, ckpt);
            set_opt(&mut c.paths.out, out);
            set_opt(&mut c.paths.predictors, predictors);
            set_opt(&mut c.strategy, strategy);
            if let Some(s) = interval {
                c.expansion.interval = Some(parse_interval(&s)?);
            }
            if identity_init {
                c.expansion.identity_init = true;
            }
            set_opt(&mut c.expansion.group_size, group_size);
            set_opt(&mut c.expansion.n_copies, n_copies);
            set_opt(&mut c.expansion.n_overlap, n_overlap);
            set(&mut c.predictor.lr, pred_lr);
            pred.apply(&mut c);
            c
        }
        Command::Pretrain { ckpt, data, freeze, out, train, eval, common } => {
            let mut c = load("pretrain", &common)?;
            set_opt(&mut c.paths.ckpt, ckpt);
            set_opt(&mut c.paths.data, data);
            set_opt(&mut c.paths.out, out);
            set_opt(&mut c.freeze, freeze);
            train.apply(&mut c);
            eval.apply(&mut c);
            c
        }
        Command::EvalPpl { ckpt, data, out, eval, common } => {
            let mut c = load("eval-ppl", &common)?;
            set_opt(&mut c.paths.ckpt, ckpt);
            set_opt(&mut c.paths.data, data);
            set_opt(&mut c.paths.out, out);
            eval.apply(&mut c);
            c
        }
        Command::Compare { base, data, strategies, seeds, out, interval, train, pred, eval, common } => {
            let mut c = load("compare", &common)?;
            set_opt(&mut c.paths.base, base);
            set_opt(&mut c.paths.data, data);
            set_opt(&mut c.paths.out, out);
            if !strategies.is_empty() {
                c.strategies = strategies;
            }
            if !seeds.is_empty() {
                c.seeds = seeds;
            }
            if let Some(s) = interval {
                c.expansion.interval = Some(parse_interval(&s)?);
            }
            train.apply(&mut c);
            pred.apply(&mut c);
            eval.apply(&mut c);
            c
        }
    })
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LAYERFORGE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::arg(format!("LAYERFORGE_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn fail(code: i32, msg: &str) -> ExitCode {
    let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or(msg).trim();
    eprintln!("ERROR {code}: {line}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail(2, &e.to_string().replace("error: ", ""));
        }
    };
    let result = init_threads()
        .and_then(|_| resolve(cli.command))
        .and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.exit_code(), &e.to_string()),
    }
}
