//! Command dispatch. Every command writes `effective_config.toml` first,
//! then its artifacts under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use cfbeam_core::beamspace::{build_dataset, predictor_accuracy, train_predictor, BeamPredictor, PredictorDataset};
use cfbeam_core::sim::{evaluate, policy_parameters, train, CandidateMode, EvalReport, Policy, Scenario, Scheme};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::manifest::Manifest;
use crate::output::{comparison_csv, emit_histogram, eval_csv, learning_curve_csv, Summary};
use crate::selftest;
use crate::HarnessError;

#[derive(Debug, Parser)]
#[command(name = "cfbeam", about = "Traffic-aware beam selection simulator for cell-free mmWave uplinks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Manifest (TOML) with scenario, rl, predictor and eval sections.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Master seed; sets the scenario, learner and predictor seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training episodes (`evaluate`: evaluation episodes).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Manifest override `key=value`; repeatable. Bare keys resolve to the
    /// one section that has them.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for data generation and evaluation.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a wide/narrow beam-response data set.
    GenDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Train the candidate-beam predictor and report its test accuracy.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        /// Data set CSV from `gen-dataset`; generated in-process when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a learned scheme, then evaluate it greedily.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: String,
    },
    /// Evaluate a baseline, or a learned scheme from its checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: String,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run several schemes and write a comparison table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scheme names.
        #[arg(long, value_delimiter = ',')]
        scheme: Vec<String>,
    },
    /// Run the invariant suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenDataset { common }
            | Command::TrainPredictor { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Selftest { common } => common,
        }
    }
}

/// Manifest after file, seed, episode and `--set` overrides, plus the log
/// of applied overrides.
pub fn resolve_manifest(common: &Common, episodes_are_eval: bool) -> Result<(Manifest, Vec<String>), HarnessError> {
    let mut m = match &common.scenario {
        Some(p) => Manifest::load(p)?,
        None => Manifest::default(),
    };
    let mut log = Vec::new();
    if let Some(s) = common.seed {
        for key in ["scenario.seed", "rl.seed", "predictor.training.seed"] {
            log.push(m.apply_override(&format!("{key}={s}"))?);
        }
    }
    if let Some(e) = common.episodes {
        let key = if episodes_are_eval { "eval.episodes" } else { "rl.episodes" };
        log.push(m.apply_override(&format!("{key}={e}"))?);
    }
    for s in &common.set {
        log.push(m.apply_override(s)?);
    }
    m.validate()?;
    Ok((m, log))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

fn echo_config(out: &Path, m: &Manifest, log: &[String]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for l in log {
        text.push_str(&format!("# override: {l}\n"));
        eprintln!("override {l}");
    }
    text.push_str(&m.to_toml());
    write(&out.join("effective_config.toml"), &text)
}

fn parse_scheme(s: &str) -> Result<Scheme, HarnessError> {
    Scheme::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
        HarnessError::Usage(format!("unknown scheme '{s}'; expected one of {}", names.join(", ")))
    })
}

fn uses_predictor(scheme: Scheme) -> bool {
    scheme.candidate_mode() == CandidateMode::Predicted && !matches!(scheme, Scheme::Lcb | Scheme::Lbs)
}

fn dataset(m: &Manifest, sc: &Scenario) -> PredictorDataset {
    build_dataset(&m.scenario, &sc.bs, m.predictor.samples, m.scenario.seed)
}

struct PredictorRun {
    model: BeamPredictor,
    curve: String,
    summary: serde_json::Value,
}

fn fit_predictor(m: &Manifest, data: &PredictorDataset) -> Result<PredictorRun, HarnessError> {
    let p = &m.predictor;
    if data.samples.len() <= p.train + p.validation {
        return Err(HarnessError::Usage(format!(
            "data set has {} samples; the split needs more than {}",
            data.samples.len(),
            p.train + p.validation
        )));
    }
    let (tr, val, test) = data.split(p.train, p.validation);
    let (model, report) = train_predictor(&tr, &val, &p.arch, &p.training)?;
    let acc = predictor_accuracy(&model, &test, p.top_k)?;
    let mut curve = String::from("epoch,train_mse,val_mse\n");
    for (i, (t, v)) in report.train_mse.iter().zip(&report.val_mse).enumerate() {
        curve.push_str(&format!("{},{t},{v}\n", i + 1));
    }
    let summary = serde_json::json!({
        "train_samples": tr.samples.len(),
        "validation_samples": val.samples.len(),
        "test_samples": test.samples.len(),
        "best_epoch": report.best_epoch,
        "best_val_mse": report.best_val_mse,
        "top_k": p.top_k,
        "test_rows": acc.rows,
        "test_contains_strongest": acc.contains_strongest,
        "test_exact_set": acc.exact_set,
    });
    Ok(PredictorRun { model, curve, summary })
}

/// Scenario with candidates ready for `scheme`: genie sweep, a saved
/// predictor, or one trained now and saved under `out/predictor`.
fn prepare_scenario(m: &Manifest, scheme: Scheme, out: &Path) -> Result<Scenario, HarnessError> {
    let mut sc = Scenario::new(m.scenario.clone())?;
    if !uses_predictor(scheme) {
        return Ok(sc);
    }
    if m.predictor.genie {
        sc.genie_candidates = true;
        return Ok(sc);
    }
    let cfg = &m.scenario;
    let model = if m.predictor.checkpoint.is_empty() {
        let run = fit_predictor(m, &dataset(m, &sc))?;
        let dir = out.join("predictor");
        checkpoint::save_predictor(&dir, &m.predictor.arch, &run.model)?;
        write(&dir.join("predictor_curve.csv"), &run.curve)?;
        write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&run.summary).expect("json") + "\n"))?;
        run.model
    } else {
        checkpoint::load_predictor(Path::new(&m.predictor.checkpoint), &m.predictor.arch, cfg.n_bs, cfg.m_wide, cfg.antennas())?
    };
    Ok(sc.with_predictor(model))
}

fn write_eval(out: &Path, m: &Manifest, report: &EvalReport, params: usize, log: &[String]) -> Result<Summary, HarnessError> {
    write(&out.join("eval.csv"), &eval_csv(report))?;
    let max = (m.eval.histogram_max > 0.0).then_some(m.eval.histogram_max);
    write(
        &out.join("histogram.csv"),
        &emit_histogram(&report.per_episode_metrics(), m.eval.histogram_bins, max)?,
    )?;
    let summary = Summary::new(report, params, log);
    write(&out.join("summary.json"), &summary.to_json())?;
    Ok(summary)
}

/// Trains (learned schemes) or directly evaluates (baselines) one scheme
/// into `out`.
fn run_scheme(m: &Manifest, scheme: Scheme, out: &Path, log: &[String]) -> Result<Summary, HarnessError> {
    let sc = prepare_scenario(m, scheme, out)?;
    let policy = if scheme.is_learned() {
        let trained = train(&sc, scheme, &m.rl)?;
        write(&out.join("learning_curve.csv"), &learning_curve_csv(&trained.curve))?;
        checkpoint::save_policy(&out.join("checkpoints"), &sc, &m.rl, &trained.policy, trained.mixer.as_ref())?;
        trained.policy
    } else {
        Policy::Baseline(scheme)
    };
    let report = evaluate(&sc, &policy, m.eval.episodes)?;
    write_eval(out, m, &report, policy_parameters(&policy), log)
}

fn configure_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        // A second call (tests running several commands) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn execute(cli: Cli) -> Result<(), HarnessError> {
    let common = cli.command.common().clone();
    configure_workers(common.workers);
    let eval_episodes = matches!(cli.command, Command::Evaluate { .. });
    let (m, log) = resolve_manifest(&common, eval_episodes)?;
    let out = common.out.as_path();
    echo_config(out, &m, &log)?;
    match cli.command {
        Command::GenDataset { .. } => {
            let sc = Scenario::new(m.scenario.clone())?;
            write(&out.join("dataset.csv"), &dataset(&m, &sc).to_csv())
        }
        Command::TrainPredictor { dataset: file, .. } => {
            let cfg = &m.scenario;
            let data = match file {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| HarnessError::Usage(format!("{}: {e}", p.display())))?;
                    PredictorDataset::from_csv(&text, cfg.n_bs, cfg.m_wide, cfg.antennas())?
                }
                None => dataset(&m, &Scenario::new(cfg.clone())?),
            };
            let run = fit_predictor(&m, &data)?;
            checkpoint::save_predictor(&out.join("checkpoints"), &m.predictor.arch, &run.model)?;
            write(&out.join("predictor_curve.csv"), &run.curve)?;
            write(&out.join("summary.json"), &(serde_json::to_string_pretty(&run.summary).expect("json") + "\n"))
        }
        Command::Train { scheme, .. } => {
            let scheme = parse_scheme(&scheme)?;
            if !scheme.is_learned() {
                return Err(HarnessError::Usage(format!("{} has nothing to train; use evaluate", scheme.name())));
            }
            run_scheme(&m, scheme, out, &log).map(|_| ())
        }
        Command::Evaluate { scheme, checkpoint: dir, .. } => {
            let scheme = parse_scheme(&scheme)?;
            let sc = prepare_scenario(&m, scheme, out)?;
            let policy = if scheme.is_learned() {
                let dir = dir.ok_or_else(|| HarnessError::Usage(format!("{} needs --checkpoint", scheme.name())))?;
                checkpoint::load_policy(&dir, &sc, scheme, &m.rl)?
            } else {
                Policy::Baseline(scheme)
            };
            let report = evaluate(&sc, &policy, m.eval.episodes)?;
            write_eval(out, &m, &report, policy_parameters(&policy), &log).map(|_| ())
        }
        Command::Sweep { scheme, .. } => {
            if scheme.is_empty() {
                return Err(HarnessError::Usage("sweep needs --scheme a,b,...".into()));
            }
            let schemes = scheme.iter().map(|s| parse_scheme(s)).collect::<Result<Vec<_>, _>>()?;
            let mut rows = Vec::new();
            for s in schemes {
                let dir = out.join(s.name());
                echo_config(&dir, &m, &log)?;
                let summary = run_scheme(&m, s, &dir, &log)?;
                rows.push((s, summary.training_overhead_symbols, summary.system_satisfaction));
            }
            write(&out.join("comparison.csv"), &comparison_csv(&rows, m.scenario.symbol_s))
        }
        Command::Selftest { .. } => {
            let checks = selftest::run_all();
            let mut text = String::new();
            for c in &checks {
                eprintln!("{}", c.line());
                text.push_str(&format!("{} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name));
            }
            write(&out.join("selftest.txt"), &text)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Selftest(failed.join(", ")))
            }
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit
/// status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
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
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
