//! In-process federated training: a coordinator broadcasts global weights,
//! each client trains locally, and the coordinator averages the results
//! weighted by client sample counts.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{class_frequencies, WindowSample};
use crate::model::{ModelConfig, ModelParams};
use crate::training::{
    alpha_f32, alpha_weights, compute_metrics, evaluate, stream_rng, train_epochs, Proximal, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation configuration: {0}")]
    Config(String),
    #[error("client {client} has no training windows")]
    EmptyClient { client: usize },
    #[error("round {round}: client {client} failed: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: TrainError,
    },
    #[error("aggregation: {0}")]
    Aggregate(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("round report I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("round report line {line}: {message}")]
    Report { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    FedAvg,
    /// Local objective gains `mu/2 · ‖w − w_global‖²`.
    FedProx {
        mu: f64,
    },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match *self {
            Strategy::FedAvg => None,
            Strategy::FedProx { mu } => Some(mu),
        }
    }

    /// Builds a strategy from its name and an optional proximal weight.
    pub fn from_parts(name: &str, mu: Option<f64>) -> Result<Self, String> {
        match name.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Strategy::FedAvg),
            "fedprox" => Ok(Strategy::FedProx { mu: mu.unwrap_or(0.1) }),
            other => Err(format!("unknown strategy `{other}` (expected fedavg or fedprox)")),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    /// `fedavg`, `fedprox` (mu 0.1) or `fedprox(0.01)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(inner) = s
            .to_ascii_lowercase()
            .strip_prefix("fedprox(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let mu = inner.trim().parse().map_err(|_| format!("invalid mu `{inner}`"))?;
            return Ok(Strategy::FedProx { mu });
        }
        Strategy::from_parts(s, None)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FedAvg => f.write_str("FedAvg"),
            Strategy::FedProx { mu } => write!(f, "FedProx({mu})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Clients run one after another; bit-reproducible.
    Sequential,
    /// One scoped thread per client; aggregation order is still fixed.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub strategy: Strategy,
    pub execution: Execution,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_clients: 4,
            rounds: 40,
            local_epochs: 5,
            strategy: Strategy::FedAvg,
            execution: Execution::Sequential,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.n_clients == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(FedError::Config(format!(
                "clients, rounds and local_epochs must be >= 1 (got {}, {}, {})",
                self.n_clients, self.rounds, self.local_epochs
            )));
        }
        if let Strategy::FedProx { mu } = self.strategy {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(FedError::Config(format!("FedProx mu must be >= 0, got {mu}")));
            }
        }
        Ok(())
    }
}

/// One participant's private data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    alpha: Vec<f32>,
}

impl ClientData {
    /// Focal weights come from the client's own training labels.
    pub fn new(
        id: usize,
        train: Vec<WindowSample>,
        val: Vec<WindowSample>,
        n_classes: usize,
    ) -> Result<Self, FedError> {
        if train.is_empty() {
            return Err(FedError::EmptyClient { client: id });
        }
        let alpha = alpha_f32(&alpha_weights(&class_frequencies(&train, n_classes))?);
        Ok(Self { id, train, val, alpha })
    }

    pub fn n_samples(&self) -> usize {
        self.train.len()
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }
}

/// Result of one client's local training in one round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ModelParams<f32>,
    pub n_samples: usize,
    pub train_losses: Vec<f64>,
}

/// Local epochs from the broadcast weights. Under FedProx the proximal
/// anchor is the broadcast itself.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    global: &ModelParams<f32>,
    client: &ClientData,
    strategy: Strategy,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    local_epochs: usize,
    rng_stream: u64,
) -> Result<ClientUpdate, TrainError> {
    let mut params = global.clone();
    let prox = strategy.mu().map(|mu| Proximal { anchor: global, mu });
    let mut rng = stream_rng(tc.seed, rng_stream);
    let train_losses = train_epochs(
        &mut params,
        cfg,
        &client.train,
        &client.alpha,
        tc,
        local_epochs,
        prox,
        &mut rng,
    )?;
    Ok(ClientUpdate {
        client: client.id,
        params,
        n_samples: client.n_samples(),
        train_losses,
    })
}

/// Elementwise `Σ nᵢ·wᵢ / Σ nᵢ`, accumulated in f64 in client order.
pub fn aggregate(updates: &[(&ModelParams<f32>, usize)]) -> Result<ModelParams<f32>, FedError> {
    let (first, _) = *updates
        .first()
        .ok_or_else(|| FedError::Aggregate("no client weights".into()))?;
    if let Some((_, _)) = updates.iter().find(|(p, _)| !p.same_shapes(first)) {
        return Err(FedError::Aggregate("client weights differ in shape".into()));
    }
    let total: usize = updates.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Err(FedError::Aggregate("total sample count is zero".into()));
    }
    let total = total as f64;
    let mut out = first.clone();
    for (ti, tensor) in out.tensors_mut().iter_mut().enumerate() {
        let mut acc = vec![0.0f64; tensor.len()];
        for &(p, n) in updates {
            let n = n as f64;
            for (a, &w) in acc.iter_mut().zip(p.tensors()[ti].data()) {
                *a += n * w as f64;
            }
        }
        for (dst, a) in tensor.data_mut().iter_mut().zip(acc) {
            *dst = (a / total) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundEntry {
    pub client: usize,
    pub n_samples: usize,
    /// Mean training loss of the final local epoch.
    pub train_loss: f64,
    /// Local model on the client's own validation split, if it has one.
    pub val_loss: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundEntry>,
    /// Aggregated model on the pooled validation set.
    pub global_val_loss: f64,
    pub global_val_macro_f1: f64,
    pub global_val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub params: ModelParams<f32>,
    pub reports: Vec<RoundReport>,
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| c.to_string()).collect()
}

fn macro_f1_and_accuracy(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, f64), TrainError> {
    let names = class_names(n_classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let r = compute_metrics(pred, labels, &names)?;
    Ok((r.macro_f1, r.accuracy))
}

/// Runs `fc.rounds` synchronous rounds with full participation. Any client
/// failure aborts the run before aggregation.
pub fn run_federation(
    fc: &FedConfig,
    clients: &[ClientData],
    initial: ModelParams<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<FedOutcome, FedError> {
    fc.validate()?;
    tc.validate()?;
    if clients.len() != fc.n_clients {
        return Err(FedError::Config(format!(
            "{} client datasets for {} clients",
            clients.len(),
            fc.n_clients
        )));
    }
    let pooled_val: Vec<WindowSample> = clients.iter().flat_map(|c| c.val.iter().cloned()).collect();
    if pooled_val.is_empty() {
        return Err(FedError::Config("no client has validation windows".into()));
    }
    let mut counts = vec![0usize; cfg.n_classes];
    for c in clients {
        for (total, n) in counts.iter_mut().zip(class_frequencies(&c.train, cfg.n_classes)) {
            *total += n;
        }
    }
    let pooled_alpha = alpha_f32(&alpha_weights(&counts)?);

    let mut global = initial;
    let mut reports = Vec::with_capacity(fc.rounds);
    let n = clients.len() as u64;
    for round in 0..fc.rounds {
        let stream = |k: usize| round as u64 * n + k as u64;
        let run_client = |k: usize, client: &ClientData| -> Result<(ClientUpdate, ClientRoundEntry), TrainError> {
            let update = local_update(&global, client, fc.strategy, cfg, tc, fc.local_epochs, stream(k))?;
            let (val_loss, val_macro_f1) = if client.val.is_empty() {
                (None, None)
            } else {
                let ev = evaluate(&update.params, cfg, &client.val, &client.alpha, tc.gamma)?;
                let (f1, _) = macro_f1_and_accuracy(&ev.predictions, &ev.labels, cfg.n_classes)?;
                (Some(ev.loss), Some(f1))
            };
            let entry = ClientRoundEntry {
                client: client.id,
                n_samples: update.n_samples,
                train_loss: *update.train_losses.last().expect("local_epochs >= 1"),
                val_loss,
                val_macro_f1,
            };
            Ok((update, entry))
        };
        let results: Vec<Result<(ClientUpdate, ClientRoundEntry), TrainError>> = match fc.execution {
            Execution::Sequential => clients.iter().enumerate().map(|(k, c)| run_client(k, c)).collect(),
            Execution::Parallel => std::thread::scope(|s| {
                let handles: Vec<_> = clients
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let run_client = &run_client;
                        s.spawn(move || run_client(k, c))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client thread panicked"))
                    .collect()
            }),
        };
        let mut updates = Vec::with_capacity(clients.len());
        let mut entries = Vec::with_capacity(clients.len());
        for (k, r) in results.into_iter().enumerate() {
            let (u, e) = r.map_err(|source| FedError::Client {
                round: round + 1,
                client: clients[k].id,
                source,
            })?;
            updates.push(u);
            entries.push(e);
        }
        let weighted: Vec<(&ModelParams<f32>, usize)> = updates.iter().map(|u| (&u.params, u.n_samples)).collect();
        global = aggregate(&weighted)?;

        let ev = evaluate(&global, cfg, &pooled_val, &pooled_alpha, tc.gamma)?;
        let (f1, acc) = macro_f1_and_accuracy(&ev.predictions, &ev.labels, cfg.n_classes)?;
        let report = RoundReport {
            round: round + 1,
            clients: entries,
            global_val_loss: ev.loss,
            global_val_macro_f1: f1,
            global_val_accuracy: acc,
        };
        log::info!(
            "round {}/{}: global val loss {:.6}, macro-F1 {:.4}",
            report.round,
            fc.rounds,
            report.global_val_loss,
            report.global_val_macro_f1
        );
        on_round(&report);
        reports.push(report);
    }
    Ok(FedOutcome {
        params: global,
        reports,
    })
}

pub const ROUNDS_HEADER: &str = "round,scope,n_samples,train_loss,val_loss,val_macro_f1,val_accuracy";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// One row per client per round plus one `global` row per round.
pub fn write_rounds_csv<W: Write>(reports: &[RoundReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ROUNDS_HEADER}")?;
    for r in reports {
        for c in &r.clients {
            writeln!(
                out,
                "{},client{},{},{},{},{},",
                r.round,
                c.client,
                c.n_samples,
                c.train_loss,
                opt(c.val_loss),
                opt(c.val_macro_f1)
            )?;
        }
        writeln!(
            out,
            "{},global,,,{},{},{}",
            r.round, r.global_val_loss, r.global_val_macro_f1, r.global_val_accuracy
        )?;
    }
    Ok(())
}

pub fn read_rounds_csv<R: BufRead>(input: R) -> Result<Vec<RoundReport>, FedError> {
    let mut reports: Vec<RoundReport> = Vec::new();
    let mut pending: Vec<ClientRoundEntry> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let err = |message: String| FedError::Report { line: i + 1, message };
        if i == 0 {
            if line.trim() != ROUNDS_HEADER {
                return Err(err(format!("expected header `{ROUNDS_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let round: usize = f[0].parse().map_err(|_| err(format!("bad round `{}`", f[0])))?;
        if f[1] == "global" {
            reports.push(RoundReport {
                round,
                clients: std::mem::take(&mut pending),
                global_val_loss: num(f[4])?,
                global_val_macro_f1: num(f[5])?,
                global_val_accuracy: num(f[6])?,
            });
        } else {
            let client = f[1]
                .strip_prefix("client")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| err(format!("bad scope `{}`", f[1])))?;
            pending.push(ClientRoundEntry {
                client,
                n_samples: f[2].parse().map_err(|_| err(format!("bad count `{}`", f[2])))?,
                train_loss: num(f[3])?,
                val_loss: opt_num(f[4])?,
                val_macro_f1: opt_num(f[5])?,
            });
        }
    }
    if !pending.is_empty() {
        return Err(FedError::Report {
            line: 0,
            message: "client rows after the last global row".into(),
        });
    }
    Ok(reports)
}

/// Test-set scores of one federated strategy against a centralized baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Accuracy loss versus the centralized model, in percentage points.
    pub drop_pct: f64,
}

/// Runs one federation per strategy from the same initial weights and
/// scores each final model on `test_set`.
#[allow(clippy::too_many_arguments)]
pub fn compare_strategies(
    strategies: &[Strategy],
    base: &FedConfig,
    clients: &[ClientData],
    initial: &ModelParams<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    test_set: &[WindowSample],
    centralized_accuracy: f64,
) -> Result<Vec<StrategyResult>, FedError> {
    let alpha = vec![1.0f32; cfg.n_classes];
    strategies
        .iter()
        .map(|&strategy| {
            let fc = FedConfig { strategy, ..*base };
            let out = run_federation(&fc, clients, initial.clone(), cfg, tc, |_| {})?;
            let ev = evaluate(&out.params, cfg, test_set, &alpha, tc.gamma)?;
            let (macro_f1, accuracy) = macro_f1_and_accuracy(&ev.predictions, &ev.labels, cfg.n_classes)?;
            Ok(StrategyResult {
                strategy,
                accuracy,
                macro_f1,
                drop_pct: 100.0 * (centralized_accuracy - accuracy),
            })
        })
        .collect()
}

pub fn comparison_table(n_clients: usize, centralized_accuracy: f64, results: &[StrategyResult]) -> String {
    let mut s = format!(
        "{:<8} {:<16} {:>9} {:>9} {:>10}\n",
        "clients", "strategy", "accuracy", "macro_f1", "drop"
    );
    s.push_str(&format!(
        "{:<8} {:<16} {:>9.4} {:>9} {:>10}\n",
        1, "centralized", centralized_accuracy, "-", "-"
    ));
    for r in results {
        s.push_str(&format!(
            "{:<8} {:<16} {:>9.4} {:>9.4} {:>9.2}%\n",
            n_clients,
            r.strategy.to_string(),
            r.accuracy,
            r.macro_f1,
            r.drop_pct
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EncodedMessage;
    use crate::tensor::Tensor;
    use crate::training::{init_params, train_epochs};
    use proptest::{prop_assert, proptest};
    use rand::Rng;

    fn constant_params(cfg: &ModelConfig, value: f32) -> ModelParams<f32> {
        let named = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                (name, Tensor::new(shape, vec![value; n]).unwrap())
            })
            .collect();
        ModelParams::from_named(cfg, named).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn windows(n: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = stream_rng(seed, 3);
        (0..n)
            .map(|i| {
                let label = rng.gen_range(0..4);
                WindowSample {
                    rows: (0..10)
                        .map(|_| {
                            EncodedMessage(std::array::from_fn(|j| {
                                if j == 0 {
                                    256 + label as u16 * 100
                                } else {
                                    rng.gen_range(0..256)
                                }
                            }))
                        })
                        .collect(),
                    label,
                    origin: (0, i),
                }
            })
            .collect()
    }

    fn client(id: usize, n: usize, seed: u64) -> ClientData {
        ClientData::new(id, windows(n, seed), windows(n / 4 + 1, seed + 100), 4).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let cfg = small_cfg();
        let (a, b) = (constant_params(&cfg, 1.0), constant_params(&cfg, 3.0));
        let g = aggregate(&[(&a, 1), (&b, 3)]).unwrap();
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 2.5)));

        let w = init_params(&cfg, 5).unwrap();
        assert_eq!(aggregate(&[(&w, 7), (&w, 1), (&w, 123)]).unwrap(), w);
        assert_eq!(aggregate(&[(&w, 17)]).unwrap(), w);

        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(&w, 0), (&w, 0)]).is_err());
        let other = init_params(&ModelConfig { d_model: 8, ..cfg }, 5).unwrap();
        assert!(aggregate(&[(&w, 1), (&other, 1)]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_a_convex_combination(
            values in proptest::collection::vec(-5.0f32..5.0, 2..5),
            counts in proptest::collection::vec(1usize..1000, 5),
        ) {
            let cfg = small_cfg();
            let params: Vec<_> = values.iter().map(|&v| constant_params(&cfg, v)).collect();
            let weighted: Vec<_> = params.iter().zip(&counts).map(|(p, &n)| (p, n)).collect();
            let g = aggregate(&weighted).unwrap();
            let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v >= lo && v <= hi)));

            let equal: Vec<_> = params.iter().map(|p| (p, 10)).collect();
            let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
            let g = aggregate(&equal).unwrap();
            prop_assert!(g.tensors()[0].data().iter().all(|&v| (v as f64 - mean).abs() < 1e-6));
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("fedavg".parse::<Strategy>().unwrap(), Strategy::FedAvg);
        assert_eq!(
            "FedProx(0.01)".parse::<Strategy>().unwrap(),
            Strategy::FedProx { mu: 0.01 }
        );
        assert_eq!(
            Strategy::from_parts("fedprox", Some(0.5)).unwrap(),
            Strategy::FedProx { mu: 0.5 }
        );
        assert!("fedsgd".parse::<Strategy>().is_err());
        assert_eq!(Strategy::FedProx { mu: 0.1 }.to_string(), "FedProx(0.1)");
    }

    #[test]
    fn config_and_client_validation() {
        assert!(FedConfig {
            rounds: 0,
            ..FedConfig::default()
        }
        .validate()
        .is_err());
        assert!(FedConfig {
            strategy: Strategy::FedProx { mu: -1.0 },
            ..FedConfig::default()
        }
        .validate()
        .is_err());
        assert!(matches!(
            ClientData::new(3, vec![], vec![], 4),
            Err(FedError::EmptyClient { client: 3 })
        ));
    }

    fn fast_tc() -> TrainConfig {
        TrainConfig {
            batch: 16,
            seed: 21,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_mu_proximal_matches_fedavg() {
        let cfg = small_cfg();
        let c = client(0, 48, 1);
        let w = init_params(&cfg, 2).unwrap();
        let a = local_update(&w, &c, Strategy::FedAvg, &cfg, &fast_tc(), 2, 0).unwrap();
        let b = local_update(&w, &c, Strategy::FedProx { mu: 0.0 }, &cfg, &fast_tc(), 2, 0).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.train_losses, b.train_losses);
    }

    #[test]
    fn large_mu_stays_near_the_broadcast() {
        let cfg = small_cfg();
        let c = client(0, 48, 1);
        let w = init_params(&cfg, 2).unwrap();
        let avg = local_update(&w, &c, Strategy::FedAvg, &cfg, &fast_tc(), 1, 0).unwrap();
        let prox = local_update(&w, &c, Strategy::FedProx { mu: 1e6 }, &cfg, &fast_tc(), 1, 0).unwrap();
        assert!(prox.params.distance(&w) < avg.params.distance(&w));
    }

    #[test]
    fn single_step_trace() {
        let cfg = small_cfg();
        let c = client(0, 8, 4);
        let w = init_params(&cfg, 2).unwrap();
        let tc = TrainConfig { batch: 8, ..fast_tc() };
        let u = local_update(&w, &c, Strategy::FedAvg, &cfg, &tc, 1, 9).unwrap();
        let mut manual = w.clone();
        train_epochs(
            &mut manual,
            &cfg,
            &c.train,
            c.alpha(),
            &tc,
            1,
            None,
            &mut stream_rng(tc.seed, 9),
        )
        .unwrap();
        assert_eq!(u.params, manual);
        assert_ne!(u.params, w);
    }

    #[test]
    fn one_client_federation_equals_centralized_epochs() {
        let cfg = small_cfg();
        let c = client(0, 40, 6);
        let tc = fast_tc();
        let init = init_params(&cfg, tc.seed).unwrap();
        let fc = FedConfig {
            n_clients: 1,
            rounds: 1,
            local_epochs: 3,
            ..FedConfig::default()
        };
        let fed = run_federation(&fc, std::slice::from_ref(&c), init.clone(), &cfg, &tc, |_| {}).unwrap();
        let mut central = init;
        train_epochs(
            &mut central,
            &cfg,
            &c.train,
            c.alpha(),
            &tc,
            3,
            None,
            &mut stream_rng(tc.seed, 0),
        )
        .unwrap();
        assert_eq!(fed.params, central);
    }

    #[test]
    fn sequential_and_parallel_runs_agree_and_report_every_client() {
        let cfg = small_cfg();
        let clients: Vec<_> = (0..3).map(|k| client(k, 24 + 8 * k, 10 + k as u64)).collect();
        let tc = fast_tc();
        let init = init_params(&cfg, tc.seed).unwrap();
        let fc = FedConfig {
            n_clients: 3,
            rounds: 2,
            local_epochs: 1,
            ..FedConfig::default()
        };
        let mut seen = 0;
        let seq = run_federation(&fc, &clients, init.clone(), &cfg, &tc, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        let again = run_federation(&fc, &clients, init.clone(), &cfg, &tc, |_| {}).unwrap();
        assert_eq!(seq.params, again.params);
        let par = run_federation(
            &FedConfig {
                execution: Execution::Parallel,
                ..fc
            },
            &clients,
            init,
            &cfg,
            &tc,
            |_| {},
        )
        .unwrap();
        assert_eq!(seq.params, par.params);
        assert_eq!(seq.reports, par.reports);

        let entries: usize = seq.reports.iter().map(|r| r.clients.len()).sum();
        assert_eq!(entries, fc.rounds * fc.n_clients);

        let mut buf = Vec::new();
        write_rounds_csv(&seq.reports, &mut buf).unwrap();
        assert_eq!(read_rounds_csv(buf.as_slice()).unwrap(), seq.reports);
    }

    #[test]
    fn client_failure_aborts_the_round() {
        let cfg = small_cfg();
        let clients = vec![client(0, 16, 1), client(1, 16, 2)];
        let tc = TrainConfig { lr: 1e38, ..fast_tc() };
        let fc = FedConfig {
            n_clients: 2,
            rounds: 1,
            local_epochs: 4,
            ..FedConfig::default()
        };
        let init = init_params(&cfg, 1).unwrap();
        let err = run_federation(&fc, &clients, init.clone(), &cfg, &tc, |_| {}).unwrap_err();
        assert!(
            matches!(
                err,
                FedError::Client {
                    round: 1,
                    client: 0,
                    ..
                }
            ),
            "{err}"
        );
        let fc3 = FedConfig { n_clients: 3, ..fc };
        assert!(matches!(
            run_federation(&fc3, &clients, init, &cfg, &fast_tc(), |_| {}),
            Err(FedError::Config(_))
        ));
    }

    #[test]
    fn comparison_table_layout() {
        let results = vec![
            StrategyResult {
                strategy: Strategy::FedAvg,
                accuracy: 0.9,
                macro_f1: 0.88,
                drop_pct: 6.46,
            },
            StrategyResult {
                strategy: Strategy::FedProx { mu: 0.1 },
                accuracy: 0.89,
                macro_f1: 0.87,
                drop_pct: 6.78,
            },
        ];
        let t = comparison_table(4, 0.9646, &results);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("FedProx(0.1)"));
        assert!(t.contains("6.46%"));
    }
}
