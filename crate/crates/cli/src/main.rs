use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod plot;

use commands::Run;
use config::{parse_assignment, RunConfig};
use error::{CliError, CliResult};

#[derive(Args, Debug, Default)]
struct Common {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (or file, for `decompose` and `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fill missing CSV cells by linear interpolation: `linear` or `none`.
    #[arg(long, global = true)]
    interp: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Global trend/season/residual decomposition of every channel.
    Decompose {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        period: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train on one dataset and evaluate on its test split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        smape_clip: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        smape_clip: Option<String>,
    },
    /// Forecast the horizon after the end of every channel.
    Forecast {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on pooled sources, evaluate on an unseen target.
    ZeroShot {
        /// Comma-separated source CSV files.
        #[arg(long)]
        sources: Option<String>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        source_periods: Option<String>,
        #[arg(long)]
        target_period: Option<usize>,
        #[arg(long)]
        smape_clip: Option<String>,
    },
    /// Full model plus the selected ablations, same seed and data.
    Ablate {
        /// Comma-separated subset of no_dec, no_prompt, no_dec_loss.
        #[arg(long)]
        flags: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sources: Option<String>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        smape_clip: Option<String>,
    },
    /// Coalition table and Shapley attribution over the components.
    Shap {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        buckets: Option<usize>,
        /// `mse` or `mae`.
        #[arg(long)]
        metric: Option<String>,
        /// Attribute through the additive surrogate fit.
        #[arg(long)]
        via_gam: bool,
    },
    /// Prompt-pool retrieval histogram of a finished run.
    PromptStats {
        #[arg(long)]
        run: PathBuf,
    },
    /// Executable checks of the spectral arguments.
    TheoryCheck {
        /// dft, extend, disentangle or all.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Write a synthetic line + sine + noise series.
    Synth {
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        period: Option<usize>,
        #[arg(long)]
        slope: Option<f64>,
        #[arg(long)]
        amp: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

/// Decomposition-prompted transformer forecasting.
///
/// Every option can also be given in a key=value file via --config or as
/// --set key=value. Command-line values override the file, which overrides
/// the defaults.
#[derive(Parser, Debug)]
#[command(name = "tempo", version)]
struct Full {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn put(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
    }

    fn put_path(&mut self, key: &str, value: &Option<PathBuf>) {
        self.put(key, value.as_ref().map(|p| p.display().to_string()));
    }
}

fn overrides(common: &Common, command: &Command) -> CliResult<Vec<(String, String)>> {
    let mut o = Overrides(common.set.iter().map(|s| parse_assignment(s)).collect::<CliResult<_>>()?);
    o.put_path("out", &common.out);
    o.put("seed", common.seed);
    o.put("interp", common.interp.as_ref());
    match command {
        Command::Decompose { input, period, k } => {
            o.put_path("input", input);
            o.put("period", *period);
            o.put("trend_k", *k);
        }
        Command::Train { data, smape_clip } => {
            o.put_path("data", data);
            o.put("smape_clip", smape_clip.as_ref());
        }
        Command::Eval { ckpt, data, smape_clip } => {
            o.put_path("ckpt", ckpt);
            o.put_path("data", data);
            o.put("smape_clip", smape_clip.as_ref());
        }
        Command::Forecast { ckpt, data } => {
            o.put_path("ckpt", ckpt);
            o.put_path("data", data);
        }
        Command::ZeroShot { sources, target, source_periods, target_period, smape_clip } => {
            o.put("sources", sources.as_ref());
            o.put_path("target", target);
            o.put("source_periods", source_periods.as_ref());
            o.put("target_period", *target_period);
            o.put("smape_clip", smape_clip.as_ref());
        }
        Command::Ablate { flags, data, sources, target, smape_clip } => {
            o.put("ablations", flags.as_ref());
            o.put_path("data", data);
            o.put("sources", sources.as_ref());
            o.put_path("target", target);
            o.put("smape_clip", smape_clip.as_ref());
        }
        Command::Shap { ckpt, data, buckets, metric, via_gam } => {
            o.put_path("ckpt", ckpt);
            o.put_path("data", data);
            o.put("shap_buckets", *buckets);
            o.put("shap_metric", metric.as_ref());
            if *via_gam {
                o.put("via_gam", Some(true));
            }
        }
        Command::PromptStats { .. } => {}
        Command::TheoryCheck { suite } => o.put("suite", suite.as_ref()),
        Command::Synth { length, period, slope, amp, noise } => {
            o.put("synth_length", *length);
            o.put("period", *period);
            o.put("trend_slope", *slope);
            o.put("season_amp", *amp);
            o.put("noise_std", *noise);
        }
    }
    Ok(o.0)
}

fn run(full: Full) -> CliResult<()> {
    let Full { common, command } = full;
    let config_file = match (&common.config, &command) {
        (Some(p), _) => Some(p.clone()),
        (None, Command::PromptStats { run }) => Some(run.join("resolved.cfg")),
        (None, _) => None,
    };
    let mut cfg = RunConfig::resolve(config_file.as_deref(), &overrides(&common, &command)?)?;
    if let Command::PromptStats { run } = &command {
        // The run's own config names the run directory as `out`; never write there.
        cfg.ckpt = Some(run.join("checkpoint"));
        cfg.out = Some(common.out.clone().unwrap_or_else(|| run.join("prompt-stats")));
    }
    let run = Run::new(cfg);
    match &command {
        Command::Decompose { .. } => commands::decompose(&run),
        Command::Train { .. } => commands::train(&run),
        Command::Eval { .. } => commands::eval(run),
        Command::Forecast { .. } => commands::forecast(run),
        Command::ZeroShot { .. } => commands::zero_shot(&run),
        Command::Ablate { .. } => commands::ablate(&run),
        Command::Shap { .. } => commands::shap(run),
        Command::PromptStats { .. } => commands::prompt_stats(run),
        Command::TheoryCheck { .. } => commands::theory_check(&run),
        Command::Synth { .. } => commands::synth(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let full = match Full::try_parse() {
        Ok(f) => f,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")).to_line());
            return ExitCode::from(1);
        }
    };
    match run(full) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.code)
        }
    }
}
