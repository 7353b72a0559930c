//! End-to-end acceptance checks on the default configuration.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero if any
//! criterion fails. Run with `cargo test -p dfm-cli --test acceptance`.

use std::collections::BTreeSet;
use std::time::Instant;

use dfm_cli::commands::{self, RunSummary, Summary};
use dfm_cli::selftest;
use dfm_core::config::ExperimentConfig;
use dfm_core::eval;
use dfm_core::flow::TRANSITION_COLUMNS;
use dfm_core::orchestrator::{self, Method, RunConfig, RunOutcome};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Runs {
    config: RunConfig,
    outcomes: Vec<RunOutcome>,
    summary: Summary,
    seconds: f64,
}

impl Runs {
    fn load() -> Runs {
        let config = ExperimentConfig {
            methods: vec![Method::Dfm, Method::ModelBased, Method::ModelFree],
            seeds: SEEDS.to_vec(),
            ..ExperimentConfig::default()
        };
        let jobs = std::thread::available_parallelism().map_or(1, usize::from);
        let start = Instant::now();
        let outcomes = commands::execute(&config, jobs).expect("default runs");
        let seconds = start.elapsed().as_secs_f64();
        let run_config = config.run_config();
        let summary = commands::summarize(&run_config, &outcomes).expect("summary");
        Runs { config: run_config, outcomes, summary, seconds }
    }

    fn summaries(&self, method: Method) -> Vec<&RunSummary> {
        self.summary.runs.iter().filter(|r| r.method == method.name()).collect()
    }

    fn outcome(&self, method: Method, seed: u64) -> &RunOutcome {
        self.outcomes
            .iter()
            .find(|o| o.log.method == method.name() && o.log.seed == seed)
            .expect("outcome present")
    }
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", items.join(", "))
}

fn corr_gap_per_seed(runs: &Runs, method: Method) -> Vec<f64> {
    runs.summaries(method)
        .iter()
        .map(|r| r.synthetic.as_ref().expect("synthetic batch").corr_gap)
        .collect()
}

fn correlation_fidelity(runs: &Runs) -> Verdict {
    let dfm = corr_gap_per_seed(runs, Method::Dfm);
    let mb = corr_gap_per_seed(runs, Method::ModelBased);
    let (a, b) = (eval::median(&dfm), eval::median(&mb));
    Verdict {
        passed: a < b,
        detail: format!(
            "median corr_gap dfm {a:.4} {} vs model_based {b:.4} {}; need dfm < model_based; 15 runs took {:.0}s (target < 600s)",
            fmt_list(&dfm),
            fmt_list(&mb),
            runs.seconds
        ),
    }
}

fn action_std(o: &RunOutcome, layout: &dfm_core::flow::TransitionLayout) -> f64 {
    let m = orchestrator::memory_matrix(&o.synthetic, layout);
    let j = TRANSITION_COLUMNS.iter().position(|c| *c == "action").unwrap();
    eval::column_stds(m.view())[j]
}

fn distribution_diversity(runs: &Runs) -> Verdict {
    let layout = runs.config.layout();
    let mut worst = f64::INFINITY;
    let mut worst_at = String::new();
    let mut all_dims = true;
    for r in runs.summaries(Method::Dfm) {
        let cmp = r.synthetic.as_ref().expect("synthetic batch");
        all_dims &= cmp.rows_synth == 1000;
        for (label, ratio) in &cmp.std_ratio {
            // A column constant in the real memory is trivially matched.
            if let Some(ratio) = ratio {
                if *ratio < worst {
                    worst = *ratio;
                    worst_at = format!("{label}, seed {}", r.seed);
                }
                all_dims &= *ratio >= 0.5;
            }
        }
    }
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let d = action_std(runs.outcome(Method::Dfm, seed), &layout);
        let m = action_std(runs.outcome(Method::ModelBased, seed), &layout);
        wins += usize::from(d > m);
        pairs.push(format!("{d:.2}/{m:.2}"));
    }
    Verdict {
        passed: all_dims && wins >= 4,
        detail: format!(
            "min synth/real std {worst:.3} ({worst_at}), need >= 0.5 on every dim; action std dfm/model_based [{}], dfm higher in {wins}/5, need >= 4",
            pairs.join(", ")
        ),
    }
}

fn early_fps_gain(runs: &Runs) -> Verdict {
    let gains: Vec<f64> = runs
        .summaries(Method::Dfm)
        .iter()
        .map(|r| r.early_fps_gain.expect("model_free reference"))
        .collect();
    let m = eval::median(&gains);
    Verdict {
        passed: m >= 1.15,
        detail: format!("median early_fps_gain(dfm, model_free, 50) {m:.4} {}; need >= 1.15", fmt_list(&gains)),
    }
}

fn q_stability(runs: &Runs) -> Verdict {
    let per = |m: Method| -> Vec<f64> { runs.summaries(m).iter().map(|r| r.qvalue_stability).collect() };
    let (dfm, free) = (per(Method::Dfm), per(Method::ModelFree));
    let (a, b) = (eval::median(&dfm), eval::median(&free));
    Verdict {
        passed: a <= b,
        detail: format!(
            "median qvalue_stability dfm {a:.4} {} vs model_free {b:.4} {}; need dfm <= model_free",
            fmt_list(&dfm),
            fmt_list(&free)
        ),
    }
}

fn named_checks(names: &[&str], full: bool) -> Verdict {
    let checks = selftest::run_all(full);
    let picked: Vec<_> = checks.iter().filter(|c| names.iter().any(|n| c.name.starts_with(n))).collect();
    assert!(!picked.is_empty());
    let detail: Vec<String> = picked
        .iter()
        .map(|c| format!("{}{}: {}", if c.passed { "" } else { "FAILED " }, c.name, c.detail))
        .collect();
    Verdict {
        passed: picked.iter().all(|c| c.passed),
        detail: detail.join("; "),
    }
}

fn lln_convergence() -> Verdict {
    let mut v = named_checks(&["tabular dqn"], false);
    v.detail.push_str("; need < 5.00e-2 within 5000 updates");
    v
}

fn regret_trend(runs: &Runs) -> Verdict {
    let dfm: Vec<f64> = runs.summaries(Method::Dfm).iter().map(|r| r.final_regret).collect();
    let random: Vec<f64> = runs.summaries(Method::Dfm).iter().map(|r| r.random_policy_regret).collect();
    let (a, b) = (eval::median(&dfm), eval::median(&random));
    let mut trace = Vec::new();
    for seed in SEEDS {
        let regret = eval::empirical_regret(&runs.outcome(Method::Dfm, seed).log, &runs.config.env).unwrap();
        let points: Vec<String> = [50, 100, 150, 200].iter().map(|&t| format!("{:.1}", regret[t - 1])).collect();
        trace.push(format!("s{seed}:{}", points.join("/")));
    }
    Verdict {
        passed: a < b,
        detail: format!(
            "median regret at T=200 dfm {a:.2} {} vs random {b:.2} {}; need dfm < random; dfm trace at t=50/100/150/200 {}",
            fmt_list(&dfm),
            fmt_list(&random),
            trace.join(" ")
        ),
    }
}

fn numerical_correctness() -> Verdict {
    let mut v = named_checks(&["grad", "pearson", "bootstrap", "flow 2-d"], true);
    v.detail.push_str("; need grad < 1e-4, pearson < 1e-12, flow moments within 0.15/0.1, bootstrap 0.632 +- 0.02");
    v
}

fn scheduling_contract(runs: &Runs) -> Verdict {
    let s = &runs.config.schedule;
    let beta = runs.config.agent.batch_size as u64;
    let mut violations = Vec::new();
    for o in &runs.outcomes {
        let name = format!("{} seed {}", o.log.method, o.log.seed);
        let fits: BTreeSet<usize> = o.model_train_steps.iter().copied().collect();
        let trains: BTreeSet<usize> = o.agent_train_steps.iter().copied().collect();
        let generative = o.log.method != Method::ModelFree.name();
        for (i, c) in o.counters.iter().enumerate() {
            let step = i + 1;
            let expect_fit = generative && step % s.retrain_period == 0 && c.real > beta;
            if fits.contains(&step) != expect_fit {
                violations.push(format!("{name}: fit at step {step} is {}", fits.contains(&step)));
            }
            if trains.contains(&step) && c.real + c.synthetic <= s.exploit_threshold {
                violations.push(format!("{name}: agent trained at step {step} below the threshold"));
            }
            if i > 0 {
                let p = &o.counters[i - 1];
                if c.real < p.real || c.synthetic < p.synthetic {
                    violations.push(format!("{name}: counter decreased at step {step}"));
                }
            }
        }
    }
    let dfm = runs.outcome(Method::Dfm, 0);
    Verdict {
        passed: violations.is_empty(),
        detail: format!(
            "{} instrumented runs, dfm seed 0 fits at {:?}, first agent update at {:?}; {} violation(s){}",
            runs.outcomes.len(),
            dfm.model_train_steps,
            dfm.agent_train_steps.first(),
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    }
}

fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let code = dfm_cli::run_cli([
            "dfm".as_ref(),
            "run".as_ref(),
            "--methods".as_ref(),
            "dfm,model_free".as_ref(),
            "--seeds".as_ref(),
            "3".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 0, "run exited with {code}");
        let logs: Vec<Vec<u8>> = ["dfm", "model_free"]
            .iter()
            .map(|m| std::fs::read(out.join(commands::runlog_path(m, 3))).unwrap())
            .collect();
        bytes.push(logs);
    }
    let same = bytes[0] == bytes[1];
    Verdict {
        passed: same,
        detail: format!(
            "two `run` executions, seed 3, dfm and model_free RunLog CSVs ({} and {} bytes) {}",
            bytes[0][0].len(),
            bytes[0][1].len(),
            if same { "byte-identical" } else { "differ" }
        ),
    }
}

fn main() {
    let runs = Runs::load();
    let results = [
        ("1 correlation fidelity", correlation_fidelity(&runs)),
        ("2 distribution diversity", distribution_diversity(&runs)),
        ("3 early fps gain", early_fps_gain(&runs)),
        ("4 q-value stability", q_stability(&runs)),
        ("5 tabular convergence", lln_convergence()),
        ("6 regret vs random", regret_trend(&runs)),
        ("7 numerical correctness", numerical_correctness()),
        ("8 scheduling contract", scheduling_contract(&runs)),
        ("9 reproducibility", reproducibility()),
    ];
    for (name, v) in &results {
        println!("{} {:<26} {}", if v.passed { "PASS" } else { "FAIL" }, name, v.detail);
    }
    let failed = results.iter().filter(|(_, v)| !v.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
