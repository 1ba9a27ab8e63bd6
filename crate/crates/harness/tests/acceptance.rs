//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing output capture) and then asserts. Tests hold a shared
//! lock so that wall-clock limits are measured without contention.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use cfbeam::manifest::Manifest;
use cfbeam::selftest;
use cfbeam_core::beamspace::{build_dataset, predictor_accuracy, train_predictor};
use cfbeam_core::sim::{evaluate, train, Policy, Scenario, Scheme};
use cfbeam_core::ScenarioConfig;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: usize, name: &str, passed: bool, detail: &str) {
    let line = format!("criterion {id:>2} {} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {id} ({name}) failed: {detail}");
}

fn scenario_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn manifest(name: &str) -> Manifest {
    Manifest::load(&scenario_file(name)).expect("shipped manifest loads")
}

fn genie(cfg: &ScenarioConfig) -> Scenario {
    let mut sc = Scenario::new(cfg.clone()).expect("valid scenario");
    sc.genie_candidates = true;
    sc
}

fn satisfaction(sc: &Scenario, policy: &Policy, episodes: usize) -> f64 {
    evaluate(sc, policy, episodes).expect("evaluation runs").rates.system
}

fn selftest_criterion(id: usize, limit_s: f64, check: selftest::Check) {
    let within = check.seconds < limit_s;
    report(
        id,
        &check.name,
        check.passed && within,
        &format!("{} ({:.2}s, limit {limit_s}s)", check.detail, check.seconds),
    );
}

#[test]
fn c01_algebra() {
    let _g = serial();
    selftest_criterion(1, 10.0, selftest::algebra(1000));
}

#[test]
fn c02_distributions() {
    let _g = serial();
    selftest_criterion(2, 30.0, selftest::distributions(100_000));
}

#[test]
fn c03_oracles() {
    let _g = serial();
    selftest_criterion(3, 60.0, selftest::oracles(500, 10));
}

#[test]
fn c04_gradients() {
    let _g = serial();
    let check = selftest::gradients(20, 1000);
    report(4, &check.name, check.passed, &format!("{} ({:.2}s)", check.detail, check.seconds));
}

#[test]
fn c05_predictor_top2() {
    let _g = serial();
    let m = Manifest::default();
    let cfg = &m.scenario;
    assert_eq!((cfg.n_bs, cfg.antennas(), cfg.m_wide), (3, 32, 8));
    let p = &m.predictor;
    assert_eq!((p.samples, p.train, p.validation, p.top_k), (3000, 2000, 500, 2));
    let sc = Scenario::new(cfg.clone()).unwrap();
    let data = build_dataset(cfg, &sc.bs, p.samples, cfg.seed);
    let (tr, val, test) = data.split(p.train, p.validation);
    let start = Instant::now();
    let (model, fit) = train_predictor(&tr, &val, &p.arch, &p.training).expect("predictor trains");
    let seconds = start.elapsed().as_secs_f64();
    let acc = predictor_accuracy(&model, &test, p.top_k).unwrap();
    report(
        5,
        "predictor top-2",
        acc.contains_strongest >= 0.90 && seconds < 600.0,
        &format!(
            "top-2 contains strongest {:.2}% of {} test rows (need 90%), exact set {:.2}%, best epoch {}, training {seconds:.0}s (limit 600s)",
            100.0 * acc.contains_strongest,
            acc.rows,
            100.0 * acc.exact_set,
            fit.best_epoch
        ),
    );
}

#[test]
fn c06_learning_trend() {
    let _g = serial();
    let start = Instant::now();
    let m = manifest("reduced-2user.toml");
    let cfg = &m.scenario;
    assert_eq!((cfg.n_bs, cfg.antennas(), cfg.n_users, cfg.k_centralized), (2, 8, 2, 2));
    assert_eq!((m.rl.episodes, m.eval.episodes), (2000, 500));
    let sc = genie(cfg);
    let n = m.eval.episodes;
    let trained = train(&sc, Scheme::WbrD3qn, &m.rl).expect("training runs");
    let wbr = satisfaction(&sc, &trained.policy, n);
    let random = satisfaction(&sc, &Policy::Baseline(Scheme::Random), n);
    let strongest = satisfaction(&sc, &Policy::Baseline(Scheme::Strongest), n);
    let hdlo = satisfaction(&sc, &Policy::Baseline(Scheme::Hdlo), n);
    let seconds = start.elapsed().as_secs_f64();
    let passed = wbr >= random + 0.10 && wbr >= strongest && hdlo >= random + 0.10 && seconds < 1800.0;
    report(
        6,
        "learning trend",
        passed,
        &format!("WBR-D3QN {wbr:.3}, random {random:.3}, strongest {strongest:.3}, HDLO {hdlo:.3}; {seconds:.0}s (limit 1800s)"),
    );
}

#[test]
fn c07_ordering_trend() {
    let _g = serial();
    let m = manifest("reduced-4user.toml");
    let sc = genie(&m.scenario);
    let n = m.eval.episodes;
    let mut rows = Vec::new();
    let mut good = 0;
    for seed in 1..=3u64 {
        let hyper = cfbeam_core::sim::RlHyper { seed, ..m.rl.clone() };
        let score = |scheme| satisfaction(&sc, &train(&sc, scheme, &hyper).expect("training runs").policy, n);
        let (qmix, dd, wbr) = (score(Scheme::QmixPdbs), score(Scheme::DDdqn), score(Scheme::WbrD3qn));
        let ok = qmix >= dd - 0.03 && (qmix - wbr).abs() <= 0.15 && (dd - wbr).abs() <= 0.15;
        good += usize::from(ok);
        rows.push(format!("seed {seed}: QMIX-PDBS {qmix:.3}, D-DDQN {dd:.3}, WBR-D3QN {wbr:.3} [{}]", if ok { "ok" } else { "violated" }));
    }
    report(7, "ordering trend", good >= 2, &format!("{good}/3 seeds hold; {}", rows.join("; ")));
}

#[test]
fn c08_littles_law() {
    let _g = serial();
    let cfg = ScenarioConfig {
        initial_queue_fraction: 0.0,
        service_scale: 1e-3,
        ..manifest("reduced-2user.toml").scenario
    };
    let sc = genie(&cfg);
    let report_ = evaluate(&sc, &Policy::Baseline(Scheme::Strongest), 200).unwrap();
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for u in 0..cfg.n_users {
        let q_tilde = report_.episodes.iter().map(|e| e.metrics[u].avg_queue).sum::<f64>() / report_.episodes.len() as f64;
        let (weighted, bits) = report_.episodes.iter().fold((0.0, 0.0), |(w, b), e| (w + e.sojourn[u].0, b + e.sojourn[u].1));
        let little = sc.traffic.omega(u) * weighted / bits;
        let rel = (q_tilde - little).abs() / q_tilde;
        worst = worst.max(rel);
        rows.push(format!("user {u}: q~ {q_tilde:.3} vs omega*W {little:.3} ({:.2}%)", 100.0 * rel));
    }
    report(8, "Little's law", worst <= 0.05, &rows.join("; "));
}

fn cfbeam(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cfbeam")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

const SWEEP: &str = "lcb,lbs,hdlo,random,strongest,wbr-d3qn,sba-d3qn,d-ddqn,qmix-pdbs";

fn sweep(out: &Path, extra: &[&str]) {
    let tiny = scenario_file("tiny.toml");
    let mut args = vec!["sweep", "--scheme", SWEEP, "--scenario", tiny.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    let (code, err) = cfbeam(&args);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn c09_overhead_accounting() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    sweep(dir.path(), &[]);
    let m = manifest("tiny.toml");
    let cfg = &m.scenario;
    let (u, big_m, tau) = (cfg.n_users as f64, cfg.antennas() as f64, cfg.symbol_s);
    let hdlo_cap = (cfg.k_distributed * cfg.n_users).min(cfg.antennas());
    let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let mut problems = Vec::new();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let scheme = Scheme::parse(f[0]).unwrap();
        let (symbols, seconds): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        let expected = match scheme {
            Scheme::Lcb | Scheme::Lbs => Some(big_m),
            Scheme::Hdlo => None,
            _ => Some(u),
        };
        match expected {
            Some(e) if symbols != e || seconds != e * tau => problems.push(format!("{line} (expected {e} symbols)")),
            None if symbols > hdlo_cap as f64 || seconds != symbols * tau => problems.push(format!("{line} (cap {hdlo_cap})")),
            _ => {}
        }
        rows += 1;
    }
    let sc = genie(cfg);
    let hdlo = evaluate(&sc, &Policy::Baseline(Scheme::Hdlo), 50).unwrap();
    let slots: Vec<usize> = hdlo.episodes.iter().flat_map(|e| e.training_symbols.iter().copied()).collect();
    let over = slots.iter().filter(|&&s| s > hdlo_cap || s == 0).count();
    if over > 0 {
        problems.push(format!("{over} HDLO slots outside 1..={hdlo_cap}"));
    }
    report(
        9,
        "overhead accounting",
        problems.is_empty() && rows == SWEEP.split(',').count(),
        &format!(
            "{rows} schemes; RL = U x tau_c = {}s, LCB/LBS = M x tau_c = {}s, HDLO <= {hdlo_cap} on all {} slots; {}",
            u * tau,
            big_m * tau,
            slots.len(),
            if problems.is_empty() { "no mismatches".to_string() } else { problems.join("; ") }
        ),
    );
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|r| dir.path().join(r)).collect();
    sweep(&runs[0], &["--seed", "5"]);
    sweep(&runs[1], &["--seed", "5"]);
    sweep(&runs[2], &["--seed", "5", "--workers", "1"]);
    let tiny = scenario_file("tiny.toml");
    let small = ["--set", "predictor.samples=80", "--set", "predictor.train=50", "--set", "predictor.validation=10"];
    for run in &runs {
        let mut args = vec!["gen-dataset", "--scenario", tiny.to_str().unwrap(), "--seed", "5", "--out"];
        let out = run.join("dataset");
        args.push(out.to_str().unwrap());
        args.extend(small);
        assert_eq!(cfbeam(&args).0, 0);
        let out = run.join("predictor");
        let mut args = vec!["train-predictor", "--scenario", tiny.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()];
        args.extend(small);
        args.extend(["--set", "predictor.training.epochs=3", "--set", "predictor.arch.hidden=[16]"]);
        assert_eq!(cfbeam(&args).0, 0);
    }
    let base = csv_files(&runs[0]);
    let differing: Vec<String> = runs[1..]
        .iter()
        .flat_map(|r| {
            let other = csv_files(r);
            let mut bad: Vec<String> = base
                .iter()
                .filter(|(k, v)| other.get(*k) != Some(v))
                .map(|(k, _)| format!("{}:{}", r.file_name().unwrap().to_string_lossy(), k.display()))
                .collect();
            if other.len() != base.len() {
                bad.push(format!("{} file count", r.display()));
            }
            bad
        })
        .collect();
    report(
        10,
        "determinism",
        differing.is_empty() && base.len() > 20,
        &format!("{} CSV files compared across 3 runs (one single-worker); {} differ {:?}", base.len(), differing.len(), differing),
    );
}
