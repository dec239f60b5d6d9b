//! Layered run configuration: built-in defaults, then an optional
//! `key = value` file, then command-line overrides.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use fedlitecan::config::{ConfigError, KvConfig};
use fedlitecan::data::{CaptureSpec, LabelSpace, PreprocessConfig, SplitRatios};
use fedlitecan::federated::{Execution, FedConfig, Strategy};
use fedlitecan::model::{ModelConfig, PositionalEncoding};
use fedlitecan::training::TrainConfig;

use crate::error::CliError;

/// Every plain key a run config may set. Per-client data uses the
/// indexed keys `client.N` and `client.N.fraction` on top of these.
pub const KEYS: &[&str] = &[
    // model
    "d_model",
    "n_heads",
    "n_layers",
    "d_ff",
    "dropout",
    "positional",
    // optimisation
    "lr",
    "batch",
    "max_epochs",
    "patience",
    "gamma",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "seed",
    // data
    "data",
    "label_space",
    "window",
    "stride",
    "split",
    "fraction",
    // federation
    "clients",
    "rounds",
    "local_epochs",
    "strategy",
    "mu",
    "parallel_clients",
];

pub fn is_known_key(key: &str) -> bool {
    KEYS.contains(&key) || client_key(key).is_some()
}

/// `client.N` -> (N, false), `client.N.fraction` -> (N, true).
fn client_key(key: &str) -> Option<(usize, bool)> {
    let rest = key.strip_prefix("client.")?;
    let (index, fraction) = match rest.split_once('.') {
        Some((i, "fraction")) => (i, true),
        Some(_) => return None,
        None => (rest, false),
    };
    let n: usize = index.parse().ok()?;
    (n >= 1).then_some((n, fraction))
}

/// The captures one federated client trains on.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub captures: Vec<CaptureSpec>,
    /// Leading fraction of each capture this client keeps; defaults to the
    /// run-wide `fraction`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fed: FedConfig,
    pub preprocess: PreprocessConfig,
    pub data: Vec<CaptureSpec>,
    pub clients: Vec<ClientSpec>,
    /// Keys set by the file or the command line rather than defaulted.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_kv(&KvConfig::default()).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Defaults < `file` < `overrides`, applied in order.
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut kv = match file {
            Some(p) => KvConfig::from_path(p)?,
            None => KvConfig::default(),
        };
        for (k, v) in overrides {
            kv.set(k, v);
        }
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, CliError> {
        kv.ensure_known(is_known_key)?;
        let train_defaults = TrainConfig::default();
        let pre_defaults = PreprocessConfig::default();
        let fed_defaults = FedConfig::default();
        let model_defaults = ModelConfig::default();

        let label_space: LabelSpace = kv.parsed("label_space")?.unwrap_or(pre_defaults.label_space);
        let window = kv.parsed("window")?.unwrap_or(pre_defaults.window);
        let preprocess = PreprocessConfig {
            label_space,
            window,
            stride: kv.parsed("stride")?.unwrap_or(pre_defaults.stride),
            ratios: kv.parsed::<SplitRatios>("split")?.unwrap_or(pre_defaults.ratios),
            fraction: kv.parsed("fraction")?.unwrap_or(pre_defaults.fraction),
        };
        if !(preprocess.fraction > 0.0 && preprocess.fraction <= 1.0) {
            return Err(invalid("fraction", "must lie in (0, 1]"));
        }
        if preprocess.stride == 0 {
            return Err(invalid("stride", "must be positive"));
        }

        let model = ModelConfig {
            d_model: kv.parsed("d_model")?.unwrap_or(model_defaults.d_model),
            n_heads: kv.parsed("n_heads")?.unwrap_or(model_defaults.n_heads),
            n_layers: kv.parsed("n_layers")?.unwrap_or(model_defaults.n_layers),
            d_ff: kv.parsed("d_ff")?.unwrap_or(model_defaults.d_ff),
            dropout: kv.parsed("dropout")?.unwrap_or(model_defaults.dropout),
            positional: kv
                .parsed::<PositionalEncoding>("positional")?
                .unwrap_or(model_defaults.positional),
            window,
            n_classes: label_space.len(),
            ..model_defaults
        };
        model.validate()?;

        let train = TrainConfig {
            lr: kv.parsed("lr")?.unwrap_or(train_defaults.lr),
            batch: kv.parsed("batch")?.unwrap_or(train_defaults.batch),
            max_epochs: kv.parsed("max_epochs")?.unwrap_or(train_defaults.max_epochs),
            patience: kv.parsed("patience")?.unwrap_or(train_defaults.patience),
            gamma: kv.parsed("gamma")?.unwrap_or(train_defaults.gamma),
            weight_decay: kv.parsed("weight_decay")?.unwrap_or(train_defaults.weight_decay),
            beta1: kv.parsed("beta1")?.unwrap_or(train_defaults.beta1),
            beta2: kv.parsed("beta2")?.unwrap_or(train_defaults.beta2),
            eps: kv.parsed("eps")?.unwrap_or(train_defaults.eps),
            seed: kv.parsed("seed")?.unwrap_or(train_defaults.seed),
        };
        train.validate()?;

        let mu: Option<f64> = kv.parsed("mu")?;
        let strategy = match kv.get("strategy") {
            Some(s) if s.contains('(') => {
                let parsed: Strategy = s.parse().map_err(|e: String| invalid("strategy", &e))?;
                if mu.is_some() {
                    return Err(invalid("mu", "conflicts with a strategy that already names its mu"));
                }
                parsed
            }
            Some(s) => Strategy::from_parts(s, mu).map_err(|e| invalid("strategy", &e))?,
            None if mu.is_some() => return Err(invalid("mu", "only applies to the fedprox strategy")),
            None => fed_defaults.strategy,
        };
        if strategy == Strategy::FedAvg && mu.is_some() {
            return Err(invalid("mu", "only applies to the fedprox strategy"));
        }
        let execution = if kv.parsed::<bool>("parallel_clients")?.unwrap_or(false) {
            Execution::Parallel
        } else {
            Execution::Sequential
        };

        let clients = client_specs(kv, preprocess.fraction)?;
        let n_clients = match kv.parsed::<usize>("clients")? {
            Some(n) if !clients.is_empty() && n != clients.len() => {
                return Err(invalid(
                    "clients",
                    &format!("{n} clients but {} client datasets are configured", clients.len()),
                ))
            }
            Some(n) => n,
            None if !clients.is_empty() => clients.len(),
            None => fed_defaults.n_clients,
        };
        let fed = FedConfig {
            n_clients,
            rounds: kv.parsed("rounds")?.unwrap_or(fed_defaults.rounds),
            local_epochs: kv.parsed("local_epochs")?.unwrap_or(fed_defaults.local_epochs),
            strategy,
            execution,
        };
        fed.validate()?;

        Ok(Self {
            model,
            train,
            fed,
            preprocess,
            data: kv.list("data")?.unwrap_or_default(),
            clients,
            explicit: kv.keys().map(str::to_string).collect(),
        })
    }

    /// The settings a run echoes before it starts.
    pub fn header(&self) -> String {
        let t = &self.train;
        format!(
            "lr={:?} batch={} window={} gamma={:?} weight_decay={:?} max_epochs={} patience={} seed={} label_space={}",
            t.lr,
            t.batch,
            self.preprocess.window,
            t.gamma,
            t.weight_decay,
            t.max_epochs,
            t.patience,
            t.seed,
            self.preprocess.label_space
        )
    }

    pub fn fed_header(&self) -> String {
        let f = &self.fed;
        format!(
            "clients={} rounds={} local_epochs={} strategy={} execution={}",
            f.n_clients,
            f.rounds,
            f.local_epochs,
            f.strategy,
            match f.execution {
                Execution::Sequential => "sequential",
                Execution::Parallel => "parallel",
            }
        )
    }

    /// Every effective setting as a config file that parses back to `self`
    /// (up to which keys count as explicit).
    pub fn to_kv_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let p = &self.preprocess;
        let f = &self.fed;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("d_model", m.d_model.to_string());
        put("n_heads", m.n_heads.to_string());
        put("n_layers", m.n_layers.to_string());
        put("d_ff", m.d_ff.to_string());
        put("dropout", format!("{:?}", m.dropout));
        put("positional", m.positional.to_string());
        put("lr", format!("{:?}", t.lr));
        put("batch", t.batch.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("gamma", format!("{:?}", t.gamma));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("eps", format!("{:?}", t.eps));
        put("seed", t.seed.to_string());
        put("label_space", p.label_space.to_string());
        put("window", p.window.to_string());
        put("stride", p.stride.to_string());
        put(
            "split",
            format!("{:?},{:?},{:?}", p.ratios.train, p.ratios.val, p.ratios.test),
        );
        put("fraction", format!("{:?}", p.fraction));
        if !self.data.is_empty() {
            put("data", join_captures(&self.data));
        }
        put("clients", f.n_clients.to_string());
        put("rounds", f.rounds.to_string());
        put("local_epochs", f.local_epochs.to_string());
        put("strategy", f.strategy.name().to_string());
        if let Some(mu) = f.strategy.mu() {
            put("mu", format!("{mu:?}"));
        }
        put("parallel_clients", (f.execution == Execution::Parallel).to_string());
        for (i, c) in self.clients.iter().enumerate() {
            put(&format!("client.{}", i + 1), join_captures(&c.captures));
            put(&format!("client.{}.fraction", i + 1), format!("{:?}", c.fraction));
        }
        s
    }

    pub fn class_names(&self) -> Vec<&'static str> {
        self.preprocess.label_space.class_names()
    }
}

fn join_captures(caps: &[CaptureSpec]) -> String {
    caps.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn invalid(key: &str, message: &str) -> CliError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
    .into()
}

/// Clients must be numbered from 1 without gaps.
fn client_specs(kv: &KvConfig, default_fraction: f64) -> Result<Vec<ClientSpec>, CliError> {
    let mut highest = 0;
    for key in kv.keys() {
        if let Some((n, _)) = client_key(key) {
            highest = highest.max(n);
        }
    }
    let mut out = Vec::with_capacity(highest);
    for n in 1..=highest {
        let key = format!("client.{n}");
        let fraction_key = format!("{key}.fraction");
        let captures: Vec<CaptureSpec> = kv
            .list(&key)?
            .ok_or_else(|| invalid(&key, "missing; clients must be numbered from 1 without gaps"))?;
        if captures.is_empty() {
            return Err(invalid(&key, "lists no captures"));
        }
        let fraction = kv.parsed(&fraction_key)?.unwrap_or(default_fraction);
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(&fraction_key, "must lie in (0, 1]"));
        }
        out.push(ClientSpec { captures, fraction });
    }
    Ok(out)
}

/// `path:class[,path:class...][@fraction]` as given to `--client`.
pub fn split_client_arg(arg: &str) -> (String, Option<String>) {
    match arg.rsplit_once('@') {
        Some((caps, fraction)) => (caps.to_string(), Some(fraction.to_string())),
        None => (arg.to_string(), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedlitecan::data::AttackClass;

    fn kv(text: &str) -> KvConfig {
        KvConfig::parse(text).unwrap()
    }

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_mirror_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch, 128);
        assert_eq!(c.train.gamma, 2.0);
        assert_eq!(c.train.max_epochs, 200);
        assert_eq!(c.preprocess.window, 10);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.n_heads, 2);
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.model.dropout, 0.15);
        assert_eq!(c.fed.rounds, 40);
        assert_eq!(c.fed.n_clients, 4);
        assert_eq!(c.fed.local_epochs, 5);
        assert!(c.explicit.is_empty());
        let h = c.header();
        assert!(h.contains("lr=0.001") && h.contains("batch=128"), "{h}");
        assert!(h.contains("window=10") && h.contains("gamma=2.0"), "{h}");
    }

    #[test]
    fn precedence_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "lr = 0.01\nbatch = 64\n").unwrap();

        // (file?, overrides, expected lr, expected batch)
        type Case = (bool, Vec<(String, String)>, f64, usize);
        let cases: Vec<Case> = vec![
            (false, vec![], 0.001, 128),
            (true, vec![], 0.01, 64),
            (false, ov(&[("lr", "0.005")]), 0.005, 128),
            (true, ov(&[("lr", "0.005")]), 0.005, 64),
            (true, ov(&[("batch", "32"), ("lr", "0.002")]), 0.002, 32),
            // later command-line settings win over earlier ones
            (true, ov(&[("lr", "0.1"), ("lr", "0.003")]), 0.003, 64),
        ];
        for (use_file, overrides, lr, batch) in cases {
            let c = RunConfig::layered(use_file.then_some(file.as_path()), &overrides).unwrap();
            assert_eq!(
                (c.train.lr, c.train.batch),
                (lr, batch),
                "file={use_file} {overrides:?}"
            );
        }
    }

    #[test]
    fn unknown_keys_are_rejected_from_file_and_flags() {
        let err = RunConfig::from_kv(&kv("lr = 0.1\nlearning_rate = 0.1\n")).unwrap_err();
        assert!(
            err.to_string().contains("learning_rate") && err.to_string().contains("line 2"),
            "{err}"
        );
        let err = RunConfig::layered(None, &ov(&[("bogus", "1")])).unwrap_err();
        assert!(err.to_string().contains("command line"), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(RunConfig::from_kv(&kv("client.0 = a.csv\n")).is_err());
        assert!(RunConfig::from_kv(&kv("client.1.weight = 2\n")).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "lr = -1",
            "batch = 0",
            "window = x",
            "fraction = 1.5",
            "split = 0.5,0.5,0.5",
            "mu = 0.1",
        ] {
            let err = RunConfig::from_kv(&kv(text)).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn strategy_forms() {
        let c = RunConfig::from_kv(&kv("strategy = fedprox\nmu = 0.01")).unwrap();
        assert_eq!(c.fed.strategy, Strategy::FedProx { mu: 0.01 });
        let c = RunConfig::from_kv(&kv("strategy = fedprox")).unwrap();
        assert_eq!(c.fed.strategy, Strategy::FedProx { mu: 0.1 });
        let c = RunConfig::from_kv(&kv("strategy = FedProx(0.5)")).unwrap();
        assert_eq!(c.fed.strategy, Strategy::FedProx { mu: 0.5 });
        assert!(RunConfig::from_kv(&kv("strategy = fedavg\nmu = 0.1")).is_err());
    }

    #[test]
    fn clients_and_data_lists() {
        let c = RunConfig::from_kv(&kv(
            "data = a.csv:flooding, b.csv\nclient.1 = x.csv:dos\nclient.1.fraction = 0.333\nclient.2 = y.csv:fuzzy,z.csv:gear\n",
        ))
        .unwrap();
        assert_eq!(c.data.len(), 2);
        assert_eq!(c.data[1].class, AttackClass::Normal);
        assert_eq!(c.fed.n_clients, 2);
        assert_eq!(c.clients[0].fraction, 0.333);
        assert_eq!(c.clients[1].captures.len(), 2);
        assert_eq!(c.clients[1].fraction, 1.0);
        assert!(RunConfig::from_kv(&kv("client.2 = a.csv")).is_err());
        assert!(RunConfig::from_kv(&kv("client.1 = a.csv\nclients = 3")).is_err());
        assert_eq!(
            split_client_arg("a.csv:dos,b.csv@0.5"),
            ("a.csv:dos,b.csv".into(), Some("0.5".into()))
        );
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::from_kv(&kv(
            "lr = 0.0005\nwindow = 12\nlabel_space = carhacking5\nstrategy = fedprox\nmu = 0.01\nparallel_clients = true\nclient.1 = a.csv:dos\nclient.1.fraction = 0.25\nsplit = 0.8,0.1,0.1\npositional = learned\n",
        ))
        .unwrap();
        assert_eq!(c.model.n_classes, 5);
        assert_eq!(c.model.window, 12);
        let back = RunConfig::from_kv(&kv(&c.to_kv_text())).unwrap();
        assert_eq!(
            RunConfig {
                explicit: BTreeSet::new(),
                ..back
            },
            RunConfig {
                explicit: BTreeSet::new(),
                ..c
            }
        );
    }
}
