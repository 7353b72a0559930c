use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dfm_core::agent::{Origin, ReplayMemory, Transition};
use dfm_core::config::ExperimentConfig;
use dfm_core::eval::{self, CorrelationMatrix};
use dfm_core::flow::{self, FlowModel, TRANSITION_COLUMNS};
use dfm_core::io;
use dfm_core::orchestrator::{self, Method, RunConfig, RunLog, RunOutcome};
use dfm_core::rng::{self, STREAM_SAMPLE};
use dfm_core::sim::EnvConfig;
use dfm_core::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{svg, EvalArgs, GenArgs, ReportArgs, RunArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn runlog_path(method: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{method}_seed{seed}.csv"))
}

pub fn memory_path(method: &str, seed: u64, which: &str) -> PathBuf {
    PathBuf::from("memory").join(format!("{method}_seed{seed}_{which}.csv"))
}

pub fn regret_path(method: &str, seed: u64) -> PathBuf {
    PathBuf::from("regret").join(format!("{method}_seed{seed}.csv"))
}

/// Fidelity of one synthetic batch against the real memory it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchComparison {
    pub rows_real: usize,
    pub rows_synth: usize,
    pub corr_gap: f64,
    pub compared_pairs: usize,
    pub excluded_pairs: usize,
    pub zero_variance_real: Vec<String>,
    pub zero_variance_synth: Vec<String>,
    pub wasserstein: BTreeMap<String, f64>,
    /// Synthetic std over real std, per column; absent where the real std is 0.
    pub std_ratio: BTreeMap<String, Option<f64>>,
}

fn correlations(data: &Array2<f64>) -> Result<CorrelationMatrix> {
    eval::pearson_matrix(data.view(), &TRANSITION_COLUMNS)
}

fn zero_variance_labels(c: &CorrelationMatrix) -> Vec<String> {
    c.zero_variance.iter().map(|&i| c.labels[i].clone()).collect()
}

pub fn compare_batches(real: &Array2<f64>, synth: &Array2<f64>) -> Result<BatchComparison> {
    let cr = correlations(real)?;
    let cs = correlations(synth)?;
    let gap = eval::corr_gap(&cr, &cs)?;
    let w1 = eval::feature_wasserstein(real.view(), synth.view())?;
    let sr = eval::column_stds(real.view());
    let ss = eval::column_stds(synth.view());
    let label = |j: usize| TRANSITION_COLUMNS[j].to_string();
    Ok(BatchComparison {
        rows_real: real.nrows(),
        rows_synth: synth.nrows(),
        corr_gap: gap.gap,
        compared_pairs: gap.compared,
        excluded_pairs: gap.excluded,
        zero_variance_real: zero_variance_labels(&cr),
        zero_variance_synth: zero_variance_labels(&cs),
        wasserstein: (0..w1.len()).map(|j| (label(j), w1[j])).collect(),
        std_ratio: (0..sr.len())
            .map(|j| (label(j), (sr[j] > 0.0).then(|| ss[j] / sr[j])))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub mean_fps: f64,
    pub mean_reward: f64,
    pub final_regret: f64,
    pub random_policy_regret: f64,
    pub qvalue_stability: f64,
    /// Against the model-free run on the same seed, when one was made.
    pub early_fps_gain: Option<f64>,
    pub final_epsilon: f64,
    pub model_train_steps: Vec<usize>,
    pub agent_train_steps: usize,
    pub lr_resets: u64,
    pub target_syncs: u64,
    pub real_inserted: u64,
    pub synthetic_inserted: u64,
    pub lambda: Option<Vec<f64>>,
    pub synthetic: Option<BatchComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub summary: String,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub files: Vec<ManifestEntry>,
}

/// Runs every `(seed, method)` pair on up to `jobs` threads. Results are
/// returned in seed-major, method-minor order regardless of scheduling.
pub fn execute(config: &ExperimentConfig, jobs: usize) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let run_config = config.run_config();
    let work: Vec<(u64, Method)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.methods.iter().map(move |&m| (s, m)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome>>>> =
        Mutex::new((0..work.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, work.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(seed, method)) = work.get(i) else { break };
                let outcome = orchestrator::run_experiment(method, &run_config, seed);
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every job ran"))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn summarize(config: &RunConfig, outcomes: &[RunOutcome]) -> Result<Summary> {
    let layout = config.layout();
    let mut runs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let log = &o.log;
        let reference = outcomes
            .iter()
            .find(|r| r.log.seed == log.seed && r.log.method == Method::ModelFree.name());
        let early_fps_gain = match reference {
            Some(r) if log.records.len() >= 50 => Some(eval::early_fps_gain(log, &r.log, 50)?),
            _ => None,
        };
        let random = orchestrator::run_random_policy(&config.env, log.records.len(), log.seed)?;
        let regret = eval::empirical_regret(log, &config.env)?;
        let random_regret = eval::empirical_regret(&random, &config.env)?;
        let synthetic = if o.synthetic.len() >= 2 && o.real.len() >= 2 {
            let real = orchestrator::memory_matrix(&o.real, &layout);
            let synth = orchestrator::memory_matrix(&o.synthetic, &layout);
            Some(compare_batches(&real, &synth)?)
        } else {
            None
        };
        runs.push(RunSummary {
            method: log.method.clone(),
            seed: log.seed,
            mean_fps: mean(&log.fps()),
            mean_reward: mean(&log.rewards()),
            final_regret: regret.last().copied().unwrap_or(0.0),
            random_policy_regret: random_regret.last().copied().unwrap_or(0.0),
            qvalue_stability: eval::qvalue_stability(log, 0.25)?,
            early_fps_gain,
            final_epsilon: o.final_epsilon,
            model_train_steps: o.model_train_steps.clone(),
            agent_train_steps: o.agent_train_steps.len(),
            lr_resets: o.lr_resets,
            target_syncs: o.target_syncs,
            real_inserted: o.real.inserted(),
            synthetic_inserted: o.synthetic.inserted(),
            lambda: o.lambda.as_ref().map(|l| l.to_vec()),
            synthetic,
        });
    }
    Ok(Summary { runs })
}

fn regret_csv(log: &RunLog, random: &RunLog, env: &EnvConfig) -> Result<String> {
    let a = eval::empirical_regret(log, env)?;
    let b = eval::empirical_regret(random, env)?;
    let mut out = String::from("t,regret,random_policy_regret\n");
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        out.push_str(&format!("{},{x},{y}\n", i + 1));
    }
    Ok(out)
}

/// Writes everything `run` produces under `config.output_dir`.
pub fn write_run_dir(config: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<Manifest> {
    let dir = &config.output_dir;
    let run_config = config.run_config();
    let mut files: Vec<(PathBuf, String)> = vec![(PathBuf::from(CONFIG_FILE), config.to_json())];
    for o in outcomes {
        let (m, s) = (o.log.method.as_str(), o.log.seed);
        files.push((runlog_path(m, s), io::runlog_to_csv(&o.log)));
        files.push((memory_path(m, s, "real"), io::transitions_to_csv(o.real.iter())));
        files.push((memory_path(m, s, "synthetic"), io::transitions_to_csv(o.synthetic.iter())));
        let random = orchestrator::run_random_policy(&run_config.env, o.log.records.len(), s)?;
        files.push((regret_path(m, s), regret_csv(&o.log, &random, &run_config.env)?));
    }
    files.push((
        PathBuf::from(SUMMARY_FILE),
        to_json(&summarize(&run_config, outcomes)?),
    ));
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut entries = Vec::with_capacity(files.len());
    for (rel, contents) in &files {
        write(&dir.join(rel), contents)?;
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: contents.len() as u64,
        });
    }
    let manifest = Manifest {
        config: CONFIG_FILE.into(),
        summary: SUMMARY_FILE.into(),
        methods: config.methods.iter().map(|m| m.name().to_string()).collect(),
        seeds: config.seeds.clone(),
        files: entries,
    };
    write(&dir.join(MANIFEST_FILE), &to_json(&manifest))?;
    Ok(manifest)
}

pub fn effective_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(m) = &args.methods {
        config.methods = m.clone();
    }
    if let Some(s) = &args.seeds {
        config.seeds = s.0.clone();
    }
    if let Some(o) = &args.out {
        config.output_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn run(args: &RunArgs) -> Result<()> {
    let config = effective_config(args)?;
    if args.print_config {
        println!("{}", config.to_json());
        return Ok(());
    }
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let outcomes = execute(&config, jobs)?;
    let manifest = write_run_dir(&config, &outcomes)?;
    println!(
        "wrote {} files under {}",
        manifest.files.len() + 1,
        config.output_dir.display()
    );
    Ok(())
}

fn read_transitions(path: &Path, num_actions: usize) -> Result<Vec<Transition>> {
    io::parse_transitions_csv(&fs::read_to_string(path)?, num_actions)
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?.run_config();
    let model = match (&args.model, &args.memory) {
        (Some(path), _) => FlowModel::from_json(&fs::read_to_string(path)?)?,
        (None, Some(path)) => {
            if !matches!(args.method, Method::Dfm | Method::PureFm) {
                return Err(Error::config("method", "gen fits `dfm` or `pure_fm` only"));
            }
            let transitions = read_transitions(path, config.env.num_actions)?;
            let mut memory = ReplayMemory::new(transitions.len().max(1));
            for t in transitions {
                memory.push(t, Origin::Simulator);
            }
            orchestrator::fit_flow_on(&memory, args.method, &config, args.seed)?
        }
        (None, None) => return Err(Error::config("memory", "either --memory or --model is required")),
    };
    if let Some(path) = &args.checkpoint {
        write(path, &model.to_json())?;
    }
    let mut rng = rng::stream(args.seed, STREAM_SAMPLE);
    let generated = flow::generate_transitions(&model, args.n, &mut rng)?;
    write(&args.out, &io::transitions_to_csv(&generated))?;
    println!("wrote {} transitions to {}", generated.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogScore {
    pub path: String,
    pub steps: usize,
    pub mean_fps: f64,
    pub final_regret: f64,
    pub qvalue_stability: Option<f64>,
    pub early_fps_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub synthetic: Option<BatchComparison>,
    pub baseline: Option<BatchComparison>,
    pub logs: Vec<LogScore>,
}

fn read_log(path: &Path) -> Result<RunLog> {
    io::parse_runlog_csv(&fs::read_to_string(path)?, &path.display().to_string(), 0)
}

pub fn evaluate(args: &EvalArgs) -> Result<EvalReport> {
    let config = load_config(args.config.as_deref())?.run_config();
    let layout = config.layout();
    let k = config.env.num_actions;
    let matrix = |p: &Path| -> Result<Array2<f64>> { Ok(layout.matrix(&read_transitions(p, k)?)) };

    let mut report = EvalReport {
        synthetic: None,
        baseline: None,
        logs: Vec::new(),
    };
    if let (Some(real), Some(synth)) = (&args.real, &args.synth) {
        let real = matrix(real)?;
        report.synthetic = Some(compare_batches(&real, &matrix(synth)?)?);
        if let Some(b) = &args.baseline {
            report.baseline = Some(compare_batches(&real, &matrix(b)?)?);
        }
    }
    let reference = args.reference.as_deref().map(read_log).transpose()?;
    for path in &args.logs {
        let log = read_log(path)?;
        let early_fps_gain = match &reference {
            Some(r) => Some(eval::early_fps_gain(&log, r, 50)?),
            None => None,
        };
        report.logs.push(LogScore {
            path: path.display().to_string(),
            steps: log.records.len(),
            mean_fps: mean(&log.fps()),
            final_regret: eval::empirical_regret(&log, &config.env)?.last().copied().unwrap_or(0.0),
            qvalue_stability: eval::qvalue_stability(&log, 0.25).ok(),
            early_fps_gain,
        });
    }
    if report.synthetic.is_none() && report.logs.is_empty() {
        return Err(Error::config("eval", "nothing to evaluate: pass --real/--synth or --log"));
    }
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let json = to_json(&evaluate(args)?);
    match &args.out {
        Some(path) => write(path, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMedians {
    pub runs: usize,
    pub mean_fps: f64,
    pub final_regret: f64,
    pub random_policy_regret: f64,
    pub qvalue_stability: f64,
    pub early_fps_gain: Option<f64>,
    pub corr_gap: Option<f64>,
}

fn median_of(runs: &[&RunSummary], f: impl Fn(&RunSummary) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
    (!v.is_empty()).then(|| eval::median(&v))
}

pub fn method_medians(summary: &Summary) -> BTreeMap<String, MethodMedians> {
    let mut by_method: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in &summary.runs {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, runs)| {
            let m = MethodMedians {
                runs: runs.len(),
                mean_fps: median_of(&runs, |r| Some(r.mean_fps)).unwrap_or(f64::NAN),
                final_regret: median_of(&runs, |r| Some(r.final_regret)).unwrap_or(f64::NAN),
                random_policy_regret: median_of(&runs, |r| Some(r.random_policy_regret))
                    .unwrap_or(f64::NAN),
                qvalue_stability: median_of(&runs, |r| Some(r.qvalue_stability)).unwrap_or(f64::NAN),
                early_fps_gain: median_of(&runs, |r| r.early_fps_gain),
                corr_gap: median_of(&runs, |r| r.synthetic.as_ref().map(|s| s.corr_gap)),
            };
            (method, m)
        })
        .collect()
}

fn per_step_mean(logs: &[RunLog], f: impl Fn(&dfm_core::orchestrator::StepRecord) -> f64) -> Vec<f64> {
    let steps = logs.iter().map(|l| l.records.len()).min().unwrap_or(0);
    (0..steps)
        .map(|t| logs.iter().map(|l| f(&l.records[t])).sum::<f64>() / logs.len() as f64)
        .collect()
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let dir = &args.dir;
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let summary: Summary = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)
        .map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
    let out = dir.join("report");
    let medians = method_medians(&summary);
    write(&out.join("medians.json"), &to_json(&medians))?;

    let mut table = String::from(
        "method,seed,mean_fps,mean_reward,final_regret,random_policy_regret,qvalue_stability,early_fps_gain,corr_gap\n",
    );
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &summary.runs {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            r.mean_fps,
            r.mean_reward,
            r.final_regret,
            r.random_policy_regret,
            r.qvalue_stability,
            opt(r.early_fps_gain),
            opt(r.synthetic.as_ref().map(|s| s.corr_gap)),
        ));
    }
    write(&out.join("runs.csv"), &table)?;

    let mut fps = Vec::new();
    let mut max_q = Vec::new();
    let mut regret = Vec::new();
    for method in &config.methods {
        let name = method.name();
        let mut logs = Vec::new();
        let mut regrets = Vec::new();
        for &seed in &config.seeds {
            let text = fs::read_to_string(dir.join(runlog_path(name, seed)))?;
            let log = io::parse_runlog_csv(&text, name, seed)?;
            regrets.push(eval::empirical_regret(&log, &config.env)?);
            logs.push(log);
        }
        fps.push((name.to_string(), per_step_mean(&logs, |r| r.state.fps)));
        max_q.push((name.to_string(), per_step_mean(&logs, |r| r.max_q)));
        let steps = regrets.iter().map(Vec::len).min().unwrap_or(0);
        regret.push((
            name.to_string(),
            (0..steps).map(|t| mean(&regrets.iter().map(|r| r[t]).collect::<Vec<_>>())).collect(),
        ));
    }
    write(&out.join("fps.svg"), &svg::line_chart("Mean fps per step", "fps", &fps))?;
    write(&out.join("max_q.svg"), &svg::line_chart("Mean max-Q per step", "max Q", &max_q))?;
    write(
        &out.join("regret.svg"),
        &svg::line_chart("Mean cumulative regret", "regret", &regret),
    )?;

    let layout = config.run_config().layout();
    if let Some(&seed) = config.seeds.first() {
        for method in &config.methods {
            let name = method.name();
            for which in ["real", "synthetic"] {
                let text = fs::read_to_string(dir.join(memory_path(name, seed, which)))?;
                let rows = io::parse_transitions_csv(&text, config.env.num_actions)?;
                if rows.len() < 2 || (which == "real" && method != &config.methods[0]) {
                    continue;
                }
                let c = correlations(&layout.matrix(&rows))?;
                let file = if which == "real" {
                    format!("corr_real_seed{seed}.svg")
                } else {
                    format!("corr_{name}_seed{seed}.svg")
                };
                let title = format!("Pearson correlation, {} seed {seed}", if which == "real" { "real" } else { name });
                write(&out.join(file), &svg::heatmap(&title, &c))?;
            }
        }
    }
    println!("wrote report to {}", out.display());
    Ok(())
}
