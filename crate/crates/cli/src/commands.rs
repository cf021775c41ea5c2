use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use mrp_core::diagnostics::{self, DiagnoseOptions};
use mrp_core::experiment::{base_training, run as run_experiment, Checkpoint};
use mrp_core::metrics::{evaluate_dataset, MetricsReport, RunRow};
use mrp_core::tasks::{domain_shift, generate, Dataset, ShiftDescriptor, TaskSpec};
use mrp_core::trainer::{train as train_prompts, FrozenModel, LabeledBatch, Regime, TrainConfig};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{self, overrides, RunConfig};
use crate::{BenchmarkArgs, DiagnoseArgs, EvalArgs, Failure, GenDataArgs, ReportArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const MODULATOR_FILE: &str = "modulator.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Gradcheck,
    Taylor,
    Alignment,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_timing(dir: &Path, command: &str, started: Instant) -> Result<(), Failure> {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let doc = json!({
        "command": command,
        "finished_unix_seconds": unix,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    write(&dir.join(TIMING_FILE), format!("{doc:#}\n"))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::load(dir).map_err(Failure::runtime)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn parse_shift(s: &str) -> Result<ShiftDescriptor, Failure> {
    s.parse().map_err(Failure::usage)
}

/// Worker count: `MRP_THREADS` when set, else `requested`.
fn thread_pool(requested: usize) -> Result<rayon::ThreadPool, Failure> {
    let threads = match std::env::var("MRP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("MRP_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => requested.max(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(Failure::runtime)
}

pub fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let mut value = match &args.spec {
        Some(p) => config::read_json(p)?,
        None => json!({}),
    };
    let origin = args.spec.as_ref().map_or("command line".to_owned(), |p| p.display().to_string());
    let Value::Object(spec) = &mut value else {
        return Err(Failure::usage(format!("{origin}: spec must be a JSON object")));
    };
    if let Value::Object(flags) = overrides("task", &args.task).1 {
        spec.extend(flags);
    }
    if let Some(seed) = args.seed {
        spec.insert("seed".into(), json!(seed));
    }
    let spec: TaskSpec = serde_json::from_value(value).map_err(|e| Failure::usage(format!("{origin}: {e}")))?;
    spec.validate().map_err(Failure::usage)?;
    let dataset = generate(&spec).map_err(Failure::runtime)?;
    dataset.save(&args.out).map_err(Failure::runtime)?;
    println!("digest {}", dataset.digest());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut top = json!({});
    if let Some(out) = &args.out {
        top["out"] = json!(out);
    }
    let mut run_flags = json!({});
    if let Some(r) = args.regime {
        run_flags["regime"] = json!(r);
    }
    if let Some(s) = args.seed {
        run_flags["seed"] = json!(s);
    }
    let config = config::load(
        args.config.as_deref(),
        &[
            ("", top),
            overrides("train", &args.train),
            ("train", run_flags),
            overrides("model", &args.model),
        ],
    )?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set `out` in the config"))?;

    let dataset = load_dataset(&args.data)?;
    let weights = config.model.encoder(&dataset);
    let (model, data) = base_training(&dataset, &weights, config.train.tau).map_err(Failure::runtime)?;
    let outcome = train_prompts(&data, &model, &config.train).map_err(Failure::runtime)?;
    let ck = Checkpoint::new(&outcome, &weights, &config.train, &config.model, &dataset.digest());

    write(&out.join(CONFIG_FILE), config.to_json())?;
    write(&out.join(CHECKPOINT_FILE), ck.to_json())?;
    write(&out.join(PROMPTS_FILE), outcome.prompts.to_doc().to_json())?;
    write(&out.join(MODULATOR_FILE), outcome.phi.to_doc().to_json())?;
    write(&out.join(LOG_FILE), outcome.log.to_jsonl())?;
    write_timing(&out, "train", started)?;
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    println!("prompts {}", ck.prompts_digest);
    Ok(())
}

fn evaluate_checkpoint(ck: &Checkpoint, sets: &[Dataset]) -> Result<Vec<RunRow>, Failure> {
    let weights = ck.check_dataset(&sets[0]).map_err(Failure::runtime)?;
    let prompts = ck.prompts().map_err(Failure::runtime)?;
    sets.iter()
        .map(|ds| evaluate_dataset(&prompts, &weights, ds, ck.config.tau, ck.regime.as_str(), ck.seed).map_err(Failure::runtime))
        .collect()
}

fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let config = config::load(args.config.as_deref(), &[])?;
    let mut shifts = config.eval.shifts.clone();
    for s in &args.shift {
        shifts.push(parse_shift(s)?);
    }
    let dataset = load_dataset(&args.data)?;
    let sets: Vec<Dataset> = if shifts.is_empty() {
        vec![dataset]
    } else {
        shifts.iter().map(|&s| domain_shift(&dataset, s)).collect()
    };
    let checkpoints = args
        .checkpoint
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let pool = thread_pool(checkpoints.len())?;
    let rows: Vec<Vec<RunRow>> = pool.install(|| {
        checkpoints
            .par_iter()
            .zip(&args.checkpoint)
            .map(|(ck, path)| {
                evaluate_checkpoint(ck, &sets).map_err(|e| match e {
                    Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
                    other => other,
                })
            })
            .collect::<Result<_, _>>()
    })?;
    let report = MetricsReport::from_rows(rows.into_iter().flatten().collect());
    write(&args.out, report.to_json())?;
    write(&csv_path(&args.out), report.to_csv())?;
    for row in &report.rows {
        println!(
            "{} seed {} shift {}: base {:.2} new {:.2} hm {:.2} tos {:.2}",
            row.regime, row.seed, row.shift, row.base_acc, row.new_acc, row.hm, row.tos
        );
    }
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    model: FrozenModel,
    data: LabeledBatch,
}

fn load_for_diagnosis(checkpoint: &Path, data: &Path) -> Result<Loaded, Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let weights = ck.check_dataset(&dataset).map_err(Failure::runtime)?;
    let (model, data) = base_training(&dataset, &weights, ck.config.tau).map_err(Failure::runtime)?;
    Ok(Loaded { ck, model, data })
}

pub fn diagnose(args: DiagnoseArgs) -> Result<(), Failure> {
    let config = config::load(args.config.as_deref(), &[overrides("diagnose", &args.diagnose)])?;
    let opts: DiagnoseOptions = config.diagnose;
    if let Some(g) = opts.gate {
        if !(0.0..=1.0).contains(&g) {
            return Err(Failure::usage(format!("gate must lie in [0, 1], got {g}")));
        }
    }
    let Loaded { ck, model, data } = load_for_diagnosis(&args.checkpoint, &args.data)?;
    let theta = ck.prompts().map_err(Failure::runtime)?;
    let phi = ck.modulator().map_err(Failure::runtime)?;
    let header = |mode: &str| {
        json!({
            "mode": mode,
            "regime": ck.regime,
            "seed": ck.seed,
            "prompts_digest": ck.prompts_digest,
            "options": opts,
        })
    };
    match args.mode {
        Mode::Gradcheck => {
            let report = diagnostics::gradcheck_at(&theta, &phi, &data, &model, &ck.config, &opts).map_err(Failure::runtime)?;
            let mut doc = header("gradcheck");
            doc["report"] = json!(report);
            write(&args.out, format!("{doc:#}\n"))?;
            for e in &report.entries {
                println!(
                    "{}: {} coordinates, max rel err {:.3e}, max abs err (small) {:.3e}, extrapolated rel err {:.3e}",
                    e.name, e.coordinates, e.max_rel_err, e.max_abs_err_small, e.extrapolated_max_rel_err
                );
            }
            println!("kink margin {:.3e}", report.kink_margin);
            if let Some(worst) = report.worst() {
                return Err(Failure::runtime(format!(
                    "gradient check failed ({}): max rel err {:.3e} > {:.1e} at {}",
                    worst.name,
                    worst.max_rel_err,
                    report.rel_tol,
                    worst.worst_coordinate.as_deref().unwrap_or("?")
                )));
            }
        }
        Mode::Taylor => {
            let report = diagnostics::taylor(&theta, &phi, &data, &model, &ck.config, &opts).map_err(Failure::runtime)?;
            let mut doc = header("taylor");
            doc["report"] = json!(report);
            write(&args.out, format!("{doc:#}\n"))?;
            let a = report.loss_gap.alpha;
            println!("loss gap, alpha {a:e} -> {:e}", a / 2.0);
            for (k, r) in report.loss_gap.ratios.iter().enumerate() {
                println!("  direction {k}: ratio {r:.4}");
            }
            println!("  mean ratio {:.4}", report.loss_gap.mean_ratio);
            println!("alignment prediction, alpha {a:e} -> {:e}", a / 2.0);
            for (k, r) in report.alignment.ratios.iter().enumerate() {
                println!("  episode {k}: ratio {r:.4}");
            }
            println!("  mean ratio {:.4}", report.alignment.mean_ratio);
            if !report.passed {
                return Err(Failure::runtime(format!(
                    "halving ratios outside [{}, {}]: loss gap {:.4}, alignment {:.4}",
                    report.band.0, report.band.1, report.loss_gap.mean_ratio, report.alignment.mean_ratio
                )));
            }
        }
        Mode::Alignment => {
            let d = diagnostics::alignment(&theta, &phi, &data, &model, &ck.config, &opts).map_err(Failure::runtime)?;
            let mut doc = header("alignment");
            doc["report"] = json!(d);
            write(&args.out, format!("{doc:#}\n"))?;
            println!("validation loss term {:.6e}", d.term_val_loss);
            println!("gradient alignment term {:.6e}", d.term_g_align);
            println!("regularizer alignment term {:.6e}", d.term_reg_align);
            println!("one-step loss {:.6e}, predicted {:.6e}", d.one_step_loss, d.predicted_loss);
        }
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<MetricsReport, Failure> {
    let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Failure::runtime(format!("{}: {e}", file.display())))?;
    MetricsReport::from_json(&text).map_err(|e| Failure::runtime(format!("{}: invalid report: {e}", file.display())))
}

pub fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &args.runs {
        rows.extend(read_report(path)?.rows);
    }
    let merged = MetricsReport::from_rows(rows);
    write(&args.out, merged.to_summary_csv())?;
    for a in &merged.aggregates {
        println!(
            "{} shift {} ({} runs): base {:.2} new {:.2} hm {:.2} tos {:.2}",
            a.regime, a.shift, a.runs, a.base_acc_mean, a.new_acc_mean, a.hm_of_means, a.tos_mean
        );
    }
    Ok(())
}

/// `base` with the regime-specific keys kept only where they apply.
pub fn regime_config(base: &TrainConfig, regime: Regime, seed: u64) -> TrainConfig {
    TrainConfig {
        regime,
        seed,
        lambda: base.lambda.filter(|_| regime == Regime::LossPlusReg),
        gate_override: base.gate_override.filter(|_| regime == Regime::Prometar),
        ..base.clone()
    }
}

fn benchmark_job(config: &RunConfig, seed: u64, regime: Regime, out: &Path) -> Result<Vec<RunRow>, Failure> {
    let spec = TaskSpec {
        seed,
        ..config.task.clone()
    };
    let dataset = generate(&spec).map_err(Failure::runtime)?;
    let mut sets = vec![dataset.clone()];
    sets.extend(config.eval.shifts.iter().map(|&s| domain_shift(&dataset, s)));
    let refs: Vec<&Dataset> = sets.iter().collect();
    let weights = config.model.encoder(&dataset);
    let train_config = regime_config(&config.train, regime, seed);
    let (outcome, rows) = run_experiment(&dataset, &weights, &train_config, &refs).map_err(Failure::runtime)?;
    let ck = Checkpoint::new(&outcome, &weights, &train_config, &config.model, &dataset.digest());
    write(&out.join("runs").join(format!("{regime}-{seed}")).join(CHECKPOINT_FILE), ck.to_json())?;
    Ok(rows)
}

pub fn benchmark(args: BenchmarkArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut top = json!({});
    if let Some(out) = &args.out {
        top["out"] = json!(out);
    }
    let mut eval = json!({});
    if let Some(shifts) = &args.shifts {
        for s in shifts {
            parse_shift(s)?;
        }
        eval["shifts"] = json!(shifts);
    }
    let config = config::load(
        args.config.as_deref(),
        &[
            ("", top),
            overrides("task", &args.task),
            overrides("train", &args.train),
            overrides("model", &args.model),
            ("eval", eval),
        ],
    )?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set `out` in the config"))?;
    if args.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let regimes = if args.regimes.is_empty() { Regime::ALL.to_vec() } else { args.regimes.clone() };
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let jobs: Vec<(u64, Regime)> = seeds.iter().flat_map(|&s| regimes.iter().map(move |&r| (s, r))).collect();

    let pool = thread_pool(seeds.len())?;
    let rows: Vec<Vec<RunRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, regime)| benchmark_job(&config, seed, regime, &out))
            .collect::<Result<_, _>>()
    })?;
    let report = MetricsReport::from_rows(rows.into_iter().flatten().collect());
    write(&out.join(CONFIG_FILE), config.to_json())?;
    write(&out.join(REPORT_FILE), report.to_json())?;
    write(&csv_path(&out.join(REPORT_FILE)), report.to_csv())?;
    write(&out.join(SUMMARY_FILE), report.to_summary_csv())?;
    write_timing(&out, "benchmark", started)?;
    for a in &report.aggregates {
        println!(
            "{} shift {}: base {:.2} new {:.2} hm {:.2} tos {:.2} ({} runs)",
            a.regime, a.shift, a.base_acc_mean, a.new_acc_mean, a.hm_of_means, a.tos_mean, a.runs
        );
    }
    Ok(())
}
