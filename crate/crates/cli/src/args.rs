use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;
use crate::run_config::split_client_arg;

#[derive(Debug, Parser)]
#[command(
    name = "fedlitecan",
    version,
    about = "Transformer intrusion detection for CAN bus traffic"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic CAN capture.
    Synth(SynthArgs),
    /// Window captures and print split and class statistics.
    Preprocess(PreprocessArgs),
    /// Centralized training.
    Train(TrainArgs),
    /// Federated training across simulated clients.
    Fedtrain(FedtrainArgs),
    /// Score a checkpoint on captures.
    Eval(EvalArgs),
    /// Time single-threaded inference.
    Bench(BenchArgs),
    /// Print a checkpoint's header and parameter table.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic capture config (`key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in vehicle profile: a or b.
    #[arg(long)]
    pub profile: Option<String>,
    /// none, flooding, fuzzy or malfunction.
    #[arg(long)]
    pub attack: Option<String>,
    /// Capture length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Injection rate during bursts.
    #[arg(long)]
    pub rate_hz: Option<f64>,
    #[arg(long)]
    pub burst_s: Option<f64>,
    /// Time between burst starts.
    #[arg(long)]
    pub interval_s: Option<f64>,
    /// Start of the first burst.
    #[arg(long)]
    pub offset_s: Option<f64>,
    /// Identifier a malfunction attack spoofs (hex with 0x, or decimal).
    #[arg(long)]
    pub target_id: Option<String>,
    /// Keep only the first N messages.
    #[arg(long)]
    pub messages: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        push(&mut out, "profile", &self.profile);
        push(&mut out, "attack", &self.attack);
        push(&mut out, "duration_s", &self.duration);
        push(&mut out, "seed", &self.seed);
        push(&mut out, "rate_hz", &self.rate_hz);
        push(&mut out, "burst_s", &self.burst_s);
        push(&mut out, "interval_s", &self.interval_s);
        push(&mut out, "offset_s", &self.offset_s);
        push(&mut out, "target_id", &self.target_id);
        out
    }
}

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.to_string()));
    }
}

/// Settings shared by every command that reads captures or trains.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Run config file (`key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Capture as `path:class`; repeatable. A bare path is normal traffic.
    #[arg(long = "data", value_name = "PATH:CLASS")]
    pub data: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Focal-loss focusing parameter.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// carhacking5, survival4 or unified4.
    #[arg(long)]
    pub label_space: Option<String>,
    /// Chronological split ratios `train,val,test`.
    #[arg(long)]
    pub split: Option<String>,
    /// Leading fraction of each capture to use.
    #[arg(long)]
    pub fraction: Option<f64>,
}

impl RunArgs {
    /// Command-line overrides in application order: `--set` first, then
    /// the dedicated flags.
    pub fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if !self.data.is_empty() {
            out.push(("data".into(), self.data.join(",")));
        }
        push(&mut out, "seed", &self.seed);
        push(&mut out, "lr", &self.lr);
        push(&mut out, "batch", &self.batch);
        push(&mut out, "max_epochs", &self.epochs);
        push(&mut out, "patience", &self.patience);
        push(&mut out, "gamma", &self.gamma);
        push(&mut out, "window", &self.window);
        push(&mut out, "stride", &self.stride);
        push(&mut out, "label_space", &self.label_space);
        push(&mut out, "split", &self.split);
        push(&mut out, "fraction", &self.fraction);
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct FedArgs {
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    /// fedavg or fedprox.
    #[arg(long)]
    pub strategy: Option<String>,
    /// FedProx proximal weight.
    #[arg(long)]
    pub mu: Option<f64>,
    /// One client's captures, `path:class[,path:class...][@fraction]`;
    /// repeat once per client.
    #[arg(long = "client", value_name = "CAPTURES")]
    pub client: Vec<String>,
    /// Run clients one after another (the default).
    #[arg(long, conflicts_with = "parallel_clients")]
    pub sequential: bool,
    /// Train clients concurrently, one thread each.
    #[arg(long)]
    pub parallel_clients: bool,
    /// Also train a centralized baseline and FedAvg / FedProx variants and
    /// print their test accuracy side by side.
    #[arg(long)]
    pub compare_strategies: bool,
}

impl FedArgs {
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        push(&mut out, "clients", &self.clients);
        push(&mut out, "rounds", &self.rounds);
        push(&mut out, "local_epochs", &self.local_epochs);
        push(&mut out, "strategy", &self.strategy);
        push(&mut out, "mu", &self.mu);
        for (i, arg) in self.client.iter().enumerate() {
            let (captures, fraction) = split_client_arg(arg);
            out.push((format!("client.{}", i + 1), captures));
            if let Some(f) = fraction {
                out.push((format!("client.{}.fraction", i + 1), f));
            }
        }
        if self.sequential {
            out.push(("parallel_clients".into(), "false".into()));
        }
        if self.parallel_clients {
            out.push(("parallel_clients".into(), "true".into()));
        }
        out
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory for the checkpoint, history and metrics.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FedtrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub fed: FedArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    /// Every window of each capture, unsplit.
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to score.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub on: EvalSplit,
    /// Score attack-vs-normal only: any non-normal prediction on an attack
    /// window is a detection. Allows label spaces that differ from the
    /// checkpoint's.
    #[arg(long)]
    pub binary_detection: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly initialised default model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_become_overrides_after_set() {
        let cli = Cli::try_parse_from([
            "fedlitecan",
            "train",
            "--out-dir",
            "o",
            "--set",
            "lr=0.5",
            "--lr",
            "0.002",
            "--data",
            "a.csv:fuzzy",
            "--data",
            "b.csv",
            "--epochs",
            "3",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else {
            panic!("parsed the wrong command")
        };
        let o = t.run.overrides().unwrap();
        let lr: Vec<_> = o.iter().filter(|(k, _)| k == "lr").map(|(_, v)| v.as_str()).collect();
        assert_eq!(lr, ["0.5", "0.002"]);
        assert!(o.contains(&("data".into(), "a.csv:fuzzy,b.csv".into())));
        assert!(o.contains(&("max_epochs".into(), "3".into())));
    }

    #[test]
    fn client_flags_number_from_one() {
        let cli = Cli::try_parse_from([
            "fedlitecan",
            "fedtrain",
            "--out-dir",
            "o",
            "--client",
            "a.csv:dos@0.333",
            "--client",
            "b.csv:fuzzy",
            "--parallel-clients",
        ])
        .unwrap();
        let Command::Fedtrain(f) = cli.command else {
            panic!("parsed the wrong command")
        };
        let o = f.fed.overrides();
        assert!(o.contains(&("client.1".into(), "a.csv:dos".into())));
        assert!(o.contains(&("client.1.fraction".into(), "0.333".into())));
        assert!(o.contains(&("client.2".into(), "b.csv:fuzzy".into())));
        assert!(o.contains(&("parallel_clients".into(), "true".into())));
        assert!(Cli::try_parse_from([
            "fedlitecan",
            "fedtrain",
            "--out-dir",
            "o",
            "--sequential",
            "--parallel-clients"
        ])
        .is_err());
    }

    #[test]
    fn malformed_set_is_a_config_error() {
        let run = RunArgs {
            set: vec!["lr".into()],
            ..RunArgs::default()
        };
        assert_eq!(run.overrides().unwrap_err().exit_code(), 2);
    }
}
