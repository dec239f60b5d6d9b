use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use fedlitecan::config::KvConfig;
use fedlitecan::data::{
    class_frequencies, load_captures, write_can_csv, AttackClass, DatasetSplits, SplitRatios, SynthConfig, WindowSample,
};
use fedlitecan::federated::{
    compare_strategies, comparison_table, run_federation, write_rounds_csv, ClientData, Strategy,
};
use fedlitecan::model::{
    load_checkpoint, predict_windows, save_checkpoint, ModelConfig, ModelParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
use fedlitecan::training::{
    alpha_f32, alpha_weights, compute_metrics, detection_report, evaluate, init_params, train, write_history_csv,
    MetricsReport,
};

use crate::args::{
    BenchArgs, Cli, Command, EvalArgs, EvalSplit, FedtrainArgs, InspectArgs, PreprocessArgs, RunArgs, SynthArgs,
    TrainArgs,
};
use crate::bench::run_bench;
use crate::error::CliError;
use crate::run_config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.fltc";
pub const HISTORY_FILE: &str = "history.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const METRICS_KV_FILE: &str = "metrics.kv";
pub const CONFIG_FILE: &str = "config.txt";
pub const COMPARISON_FILE: &str = "comparison.txt";

const PREDICT_BATCH: usize = 256;

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Preprocess(a) => preprocess(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Fedtrain(a) => fedtrain(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

fn run_config(run: &RunArgs, extra: Vec<(String, String)>) -> Result<RunConfig, CliError> {
    let mut overrides = run.overrides()?;
    overrides.extend(extra);
    RunConfig::layered(run.config.as_deref(), &overrides)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut kv = match &a.config {
        Some(p) => KvConfig::from_path(p)?,
        None => KvConfig::default(),
    };
    for (k, v) in a.overrides() {
        kv.set(&k, &v);
    }
    let cfg = SynthConfig::from_kv(&kv)?;
    let mut messages = cfg.generate()?;
    if let Some(n) = a.messages {
        messages.truncate(n);
    }
    let mut out = create_writer(&a.out)?;
    write_can_csv(&messages, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(&a.out, e))?;
    let attacks = messages
        .iter()
        .filter(|m| m.attack_class() != AttackClass::Normal)
        .count();
    println!(
        "wrote {} messages ({attacks} attack) to {}",
        messages.len(),
        a.out.display()
    );
    Ok(())
}

fn require_data(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.data.is_empty() {
        return Err(CliError::Config(
            "no captures given; pass --data PATH:CLASS or set `data`".into(),
        ));
    }
    Ok(())
}

fn describe(label: &str, windows: &[WindowSample], names: &[&str]) -> String {
    let counts = class_frequencies(windows, names.len());
    let parts: Vec<String> = names.iter().zip(&counts).map(|(n, c)| format!("{n}={c}")).collect();
    format!("{label}: {} windows ({})", windows.len(), parts.join(" "))
}

fn print_splits(splits: &DatasetSplits, names: &[&str]) {
    println!("{}", describe("train", &splits.train, names));
    println!("{}", describe("val", &splits.val, names));
    println!("{}", describe("test", &splits.test, names));
}

fn preprocess(a: &PreprocessArgs) -> Result<(), CliError> {
    let cfg = run_config(&a.run, vec![])?;
    require_data(&cfg)?;
    let names = cfg.class_names();
    let splits = load_captures(&cfg.data, &cfg.preprocess)?;
    print_splits(&splits, &names);
    let alpha = alpha_weights(&class_frequencies(&splits.train, names.len()))?;
    let parts: Vec<String> = names.iter().zip(&alpha).map(|(n, w)| format!("{n}={w:.6}")).collect();
    println!("alpha: {}", parts.join(" "));
    Ok(())
}

/// Scores `windows` exactly as both `train` and `eval` report them.
pub fn score(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    names: &[&str],
    gamma: f64,
) -> Result<MetricsReport, CliError> {
    let uniform = vec![1.0f32; cfg.n_classes];
    let ev = evaluate(params, cfg, windows, &uniform, gamma)?;
    Ok(compute_metrics(&ev.predictions, &ev.labels, names)?)
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write_file(&dir.join(METRICS_TEXT_FILE), report.to_text().as_bytes())?;
    write_file(&dir.join(METRICS_KV_FILE), report.to_key_values().as_bytes())
}

fn report_test_metrics(
    dir: &Path,
    params: &ModelParams<f32>,
    cfg: &RunConfig,
    test: &[WindowSample],
) -> Result<(), CliError> {
    if test.is_empty() {
        println!("test split is empty; no metrics written");
        return Ok(());
    }
    let report = score(params, &cfg.model, test, &cfg.class_names(), cfg.train.gamma)?;
    write_metrics(dir, &report)?;
    println!("test metrics:\n{}", report.to_text());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = run_config(&a.run, vec![])?;
    println!("run {}", cfg.header());
    require_data(&cfg)?;
    let names = cfg.class_names();
    let splits = load_captures(&cfg.data, &cfg.preprocess)?;
    print_splits(&splits, &names);
    let alpha = alpha_f32(&alpha_weights(&class_frequencies(&splits.train, names.len()))?);
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join(CONFIG_FILE), cfg.to_kv_text().as_bytes())?;

    let initial = init_params(&cfg.model, cfg.train.seed)?;
    println!("model: {} parameters", initial.total_len());
    let outcome = train(
        initial,
        &cfg.model,
        &splits.train,
        &splits.val,
        &alpha,
        &cfg.train,
        |r| {
            println!(
                "epoch {:>3} train_loss={:.6} val_loss={:.6} val_macro_f1={:.4}",
                r.epoch, r.train_loss, r.val_loss, r.val_macro_f1
            );
        },
    )?;
    println!(
        "best epoch {}{}",
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );

    save_checkpoint(&a.out_dir.join(CHECKPOINT_FILE), &outcome.params, &cfg.model)?;
    let history_path = a.out_dir.join(HISTORY_FILE);
    let mut w = create_writer(&history_path)?;
    write_history_csv(&outcome.history, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&history_path, e))?;
    report_test_metrics(&a.out_dir, &outcome.params, &cfg, &splits.test)
}

/// Per-client train/val sets plus the pooled test split. Explicit client
/// captures take precedence; otherwise the pooled `data` windows are dealt
/// round-robin to `clients` clients.
fn build_clients(cfg: &RunConfig) -> Result<(Vec<ClientData>, Vec<WindowSample>), CliError> {
    let n_classes = cfg.model.n_classes;
    let mut clients = Vec::with_capacity(cfg.fed.n_clients);
    let mut test = Vec::new();
    if !cfg.clients.is_empty() {
        for (k, spec) in cfg.clients.iter().enumerate() {
            let pre = fedlitecan::data::PreprocessConfig {
                fraction: spec.fraction,
                ..cfg.preprocess
            };
            let splits = load_captures(&spec.captures, &pre)?;
            test.extend(splits.test);
            clients.push(ClientData::new(k, splits.train, splits.val, n_classes)?);
        }
        return Ok((clients, test));
    }
    require_data(cfg)?;
    let splits = load_captures(&cfg.data, &cfg.preprocess)?;
    let n = cfg.fed.n_clients;
    let deal = |windows: &[WindowSample], k: usize| -> Vec<WindowSample> {
        windows.iter().skip(k).step_by(n).cloned().collect()
    };
    for k in 0..n {
        clients.push(ClientData::new(
            k,
            deal(&splits.train, k),
            deal(&splits.val, k),
            n_classes,
        )?);
    }
    Ok((clients, splits.test))
}

fn fedtrain(a: &FedtrainArgs) -> Result<(), CliError> {
    let cfg = run_config(&a.run, a.fed.overrides())?;
    println!("run {}", cfg.header());
    println!("federation {}", cfg.fed_header());
    let names = cfg.class_names();
    let (clients, test) = build_clients(&cfg)?;
    for c in &clients {
        println!("{}", describe(&format!("client {} train", c.id), &c.train, &names));
    }
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join(CONFIG_FILE), cfg.to_kv_text().as_bytes())?;

    let initial = init_params(&cfg.model, cfg.train.seed)?;
    let outcome = run_federation(&cfg.fed, &clients, initial.clone(), &cfg.model, &cfg.train, |r| {
        println!(
            "round {:>3} val_loss={:.6} val_macro_f1={:.4} val_accuracy={:.4}",
            r.round, r.global_val_loss, r.global_val_macro_f1, r.global_val_accuracy
        );
    })?;

    save_checkpoint(&a.out_dir.join(CHECKPOINT_FILE), &outcome.params, &cfg.model)?;
    let rounds_path = a.out_dir.join(ROUNDS_FILE);
    let mut w = create_writer(&rounds_path)?;
    write_rounds_csv(&outcome.reports, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&rounds_path, e))?;
    report_test_metrics(&a.out_dir, &outcome.params, &cfg, &test)?;

    if a.fed.compare_strategies {
        compare(&a.out_dir, &cfg, &clients, &initial, &test)?;
    }
    Ok(())
}

/// Centralized baseline on the pooled client data, then one federation
/// per strategy from the same initial weights.
fn compare(
    dir: &Path,
    cfg: &RunConfig,
    clients: &[ClientData],
    initial: &ModelParams<f32>,
    test: &[WindowSample],
) -> Result<(), CliError> {
    if test.is_empty() {
        return Err(CliError::Config(
            "strategy comparison needs a non-empty test split".into(),
        ));
    }
    let names = cfg.class_names();
    let pooled_train: Vec<WindowSample> = clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let pooled_val: Vec<WindowSample> = clients.iter().flat_map(|c| c.val.iter().cloned()).collect();
    let alpha = alpha_f32(&alpha_weights(&class_frequencies(&pooled_train, names.len()))?);
    println!("centralized baseline on pooled client data");
    let central = train(
        initial.clone(),
        &cfg.model,
        &pooled_train,
        &pooled_val,
        &alpha,
        &cfg.train,
        |_| {},
    )?;
    let central_accuracy = score(&central.params, &cfg.model, test, &names, cfg.train.gamma)?.accuracy;
    let strategies = [
        Strategy::FedAvg,
        Strategy::FedProx { mu: 0.1 },
        Strategy::FedProx { mu: 0.01 },
    ];
    let results = compare_strategies(
        &strategies,
        &cfg.fed,
        clients,
        initial,
        &cfg.model,
        &cfg.train,
        test,
        central_accuracy,
    )?;
    let table = comparison_table(cfg.fed.n_clients, central_accuracy, &results);
    write_file(&dir.join(COMPARISON_FILE), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = run_config(&a.run, vec![])?;
    require_data(&cfg)?;
    let (params, model) = load_checkpoint(&a.model)?;
    if cfg.explicit.contains("window") && cfg.preprocess.window != model.window {
        return Err(CliError::Config(format!(
            "window {} does not match the checkpoint's window {}",
            cfg.preprocess.window, model.window
        )));
    }
    let space = cfg.preprocess.label_space;
    if !a.binary_detection && model.n_classes != space.len() {
        return Err(CliError::Config(format!(
            "checkpoint predicts {} classes but label space {space} has {}; use --binary-detection to score \
             attack-vs-normal across label spaces",
            model.n_classes,
            space.len()
        )));
    }
    let mut pre = fedlitecan::data::PreprocessConfig {
        window: model.window,
        ..cfg.preprocess
    };
    if a.on == EvalSplit::All {
        pre.ratios = SplitRatios::new(1.0, 0.0, 0.0)?;
    }
    let splits = load_captures(&cfg.data, &pre)?;
    let windows = match a.on {
        EvalSplit::Train | EvalSplit::All => splits.train,
        EvalSplit::Val => splits.val,
        EvalSplit::Test => splits.test,
    };
    if windows.is_empty() {
        return Err(CliError::Data("selected split has no windows".into()));
    }
    let text = if a.binary_detection {
        let predictions = predict_windows(&params, &model, &windows, PREDICT_BATCH)?;
        let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
        // Normal is class 0 in every label space
        detection_report(&predictions, &labels, 0, 0)?.to_key_values()
    } else {
        score(&params, &model, &windows, &cfg.class_names(), cfg.train.gamma)?.to_key_values()
    };
    print!("{text}");
    if let Some(path) = &a.out {
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let (params, model) = match &a.model {
        Some(p) => load_checkpoint(p)?,
        None => {
            let cfg = ModelConfig::default();
            (init_params(&cfg, a.seed)?, cfg)
        }
    };
    let report = run_bench(&params, &model, a.warmup, a.iters, a.batch, a.seed)?;
    print!("{}", report.to_key_values());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.model).map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.model.display())))?;
    let (params, cfg) = fedlitecan::model::checkpoint_from_bytes(&bytes)?;
    print!("{}", inspect_text(&a.model, bytes.len(), &params, &cfg));
    Ok(())
}

pub fn inspect_text(path: &Path, file_bytes: usize, params: &ModelParams<f32>, cfg: &ModelConfig) -> String {
    let mut s = format!(
        "file {} ({file_bytes} bytes)\nformat {} version {}\n",
        path.display(),
        String::from_utf8_lossy(CHECKPOINT_MAGIC),
        CHECKPOINT_VERSION
    );
    s += &format!(
        "d_in={} d_model={} n_heads={} n_layers={} d_ff={} window={} n_classes={} dropout={:?} positional={}\n",
        cfg.d_in,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.d_ff,
        cfg.window,
        cfg.n_classes,
        cfg.dropout,
        cfg.positional
    );
    s += &format!(
        "tensors={} params={} param_bytes={}\n",
        params.len(),
        params.total_len(),
        cfg.size_bytes()
    );
    s += &format!("{:<32} {:<14} {:>8}\n", "name", "shape", "count");
    for (name, t) in params.iter() {
        s += &format!("{:<32} {:<14} {:>8}\n", name, format!("{:?}", t.shape()), t.len());
    }
    s
}
