//! Quick numerical checks runnable from the command line.

use dfm_core::agent::{sync_target, train_q_step, QBatch};
use dfm_core::eval;
use dfm_core::flow::{self, FlowConfig, FlowModel};
use dfm_core::nn::{grad_check, Activation, Adam, LossWeights, Mlp};
use dfm_core::rng;
use dfm_core::sim::{self, EnvConfig, NoiseStd, ProcessorState};
use ndarray::{array, Array1, Array2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn random_matrix(rows: usize, cols: usize, r: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn gradients() -> Vec<Check> {
    let mut r = rng::seeded(11);
    let mut out = Vec::new();

    let q = Mlp::new(&[4, 6, 6, 12], Activation::Tanh, 1).unwrap();
    let x = random_matrix(16, 4, &mut r);
    let y = random_matrix(16, 12, &mut r);
    let mask = Array2::from_shape_fn((16, 12), |(i, j)| if j == (i * 5) % 12 { 1.0 } else { 0.0 });
    let worst = grad_check(&q, x.view(), y.view(), &LossWeights::PerElement(mask), 60, &mut r).unwrap();
    out.push(check("grad q-network", worst < 1e-4, format!("max rel err {worst:.2e}")));

    let field = Mlp::new(&[12, 64, 64, 11], Activation::Tanh, 2).unwrap();
    let x1 = random_matrix(8, 11, &mut r);
    let batch = flow::draw_cfm_batch(x1.view(), 0.01, 4, &mut r).unwrap();
    let lambda = Array1::from_shape_fn(11, |j| (j + 1) as f64 / 66.0);
    let worst = grad_check(
        &field,
        batch.inputs.view(),
        batch.targets.view(),
        &LossWeights::PerDim(lambda),
        60,
        &mut r,
    )
    .unwrap();
    out.push(check("grad vector field", worst < 1e-4, format!("max rel err {worst:.2e}")));

    let p = Mlp::new(&[5, 32, 32, 6], Activation::Tanh, 3).unwrap();
    let x = random_matrix(16, 5, &mut r);
    let y = random_matrix(16, 6, &mut r);
    let worst = grad_check(&p, x.view(), y.view(), &LossWeights::ones(6), 60, &mut r).unwrap();
    out.push(check("grad predictor", worst < 1e-4, format!("max rel err {worst:.2e}")));
    out
}

fn pearson() -> Check {
    let mut r = rng::seeded(12);
    let data = random_matrix(50, 11, &mut r);
    let labels: Vec<String> = (0..11).map(|j| format!("c{j}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let c = eval::pearson_matrix(data.view(), &refs).unwrap();
    let n = data.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let (mut mi, mut mj) = (0.0, 0.0);
            for k in 0..n {
                mi += data[[k, i]];
                mj += data[[k, j]];
            }
            mi /= n as f64;
            mj /= n as f64;
            let (mut num, mut di, mut dj) = (0.0, 0.0, 0.0);
            for k in 0..n {
                num += (data[[k, i]] - mi) * (data[[k, j]] - mj);
                di += (data[[k, i]] - mi).powi(2);
                dj += (data[[k, j]] - mj).powi(2);
            }
            worst = worst.max((num / (di.sqrt() * dj.sqrt()) - c.values[[i, j]]).abs());
        }
    }
    check("pearson vs double loop", worst < 1e-12, format!("max abs err {worst:.2e}"))
}

fn bootstrap() -> Check {
    let mut r = rng::seeded(13);
    let pool = Array2::from_shape_fn((1000, 1), |(i, _)| i as f64);
    let boots = flow::bootstrap_latents(pool.view(), 20, &mut r).unwrap();
    let fractions: Vec<f64> = boots
        .iter()
        .map(|b| {
            let mut seen = vec![false; 1000];
            b.iter().for_each(|&v| seen[v as usize] = true);
            seen.iter().filter(|&&s| s).count() as f64 / 1000.0
        })
        .collect();
    let f = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let expected = 1.0 - (-1.0f64).exp();
    check("bootstrap distinct fraction", (f - expected).abs() < 0.02, format!("{f:.4}"))
}

fn fixed_point() -> Check {
    let env = EnvConfig {
        noise_std: NoiseStd::zero(),
        episode_horizon: 5000,
        ..EnvConfig::default()
    };
    let mut r = rng::seeded(0);
    let mut worst: f64 = 0.0;
    for a in [0, 5, 11] {
        let mut theta_star = env.ambient_temp;
        for _ in 0..10_000 {
            let rho = env.dynamic_power(env.level(a)) + env.static_coeff * theta_star;
            theta_star = env.ambient_temp + env.thermal_resistance * rho;
        }
        let mut s: ProcessorState = sim::reset(&env).unwrap();
        for _ in 0..2000 {
            s = sim::dynamics(&s, a, &env, &mut r).unwrap();
        }
        worst = worst.max((s.temp - theta_star).abs());
    }
    check("thermal fixed point", worst < 1e-6, format!("max abs err {worst:.2e}"))
}

/// Value iteration on a two-state, two-action deterministic MDP.
fn value_iteration(next: [[usize; 2]; 2], reward: [[f64; 2]; 2], gamma: f64) -> [[f64; 2]; 2] {
    let mut q = [[0.0f64; 2]; 2];
    for _ in 0..2000 {
        let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        for s in 0..2 {
            for a in 0..2 {
                q[s][a] = reward[s][a] + gamma * v[next[s][a]];
            }
        }
    }
    q
}

fn tabular_dqn() -> Check {
    let next = [[0, 1], [0, 1]];
    let reward = [[1.0, 0.0], [0.0, 2.0]];
    let q_star = value_iteration(next, reward, 0.9);
    let one_hot = |s: usize| if s == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
    let batch = QBatch {
        states: array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
        actions: vec![0, 1, 0, 1],
        rewards: vec![reward[0][0], reward[0][1], reward[1][0], reward[1][1]],
        next_states: Array2::from_shape_fn((4, 2), |(i, j)| one_hot(next[i / 2][i % 2])[j]),
        dones: vec![false; 4],
    };
    let mut q = Mlp::new(&[2, 2], Activation::Tanh, 0).unwrap();
    let mut adam = Adam::new(&q, 0.05);
    let mut target = sync_target(&q);
    let mut err: f64 = 0.0;
    for step in 1..=5000 {
        train_q_step(&mut q, &mut adam, &target, &batch, 0.9).unwrap();
        if step % 20 == 0 {
            target = sync_target(&q);
        }
    }
    for s in 0..2 {
        let row = q.forward(&one_hot(s)).unwrap();
        for a in 0..2 {
            let e = (row[a] - q_star[s][a]).abs();
            err = err.max(e);
        }
    }
    check("tabular dqn vs value iteration", err < 0.05, format!("max entry err {err:.2e}"))
}

fn flow_moments() -> Check {
    let mut r = rng::seeded(14);
    let data = Array2::from_shape_fn((512, 2), |(_, j)| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
        [3.0, -1.0][j] + 0.5 * z
    });
    let config = FlowConfig {
        hidden: vec![32, 32],
        epochs: 200,
        ..FlowConfig::default()
    };
    let model = FlowModel::train(data.view(), flow::uniform_lambda(2), None, &config, &mut r).unwrap();
    let samples = model.sample(2000, &mut r).unwrap();
    let mean = samples.mean_axis(ndarray::Axis(0)).unwrap();
    let std = samples.std_axis(ndarray::Axis(0), 0.0);
    let ok = (mean[0] - 3.0).abs() < 0.15
        && (mean[1] + 1.0).abs() < 0.15
        && (std[0] - 0.5).abs() < 0.1
        && (std[1] - 0.5).abs() < 0.1;
    check(
        "flow 2-d moments",
        ok,
        format!("mean ({:.3}, {:.3}) std ({:.3}, {:.3})", mean[0], mean[1], std[0], std[1]),
    )
}

pub fn run_all(full: bool) -> Vec<Check> {
    let mut checks = gradients();
    checks.push(pearson());
    checks.push(bootstrap());
    checks.push(fixed_point());
    checks.push(tabular_dqn());
    if full {
        checks.push(flow_moments());
    }
    checks
}
