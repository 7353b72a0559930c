//! The Dyna-style training loop and its baselines.
//!
//! Every method collects one real transition per step into the real memory
//! `M`. The generative methods periodically refit a model on all of `M` and
//! refill the synthetic memory `M'`; the DQN then trains on batches mixed
//! from both memories once enough data has been seen.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, AgentConfig, DqnAgent, Origin, ReplayMemory, Transition};
use crate::error::{Error, Result};
use crate::flow::{
    self, FlowConfig, FlowModel, Normalizer, TransitionLayout, TRANSITION_DIM,
};
use crate::forest::{self, ForestConfig};
use crate::nn::{self, Activation, Adam, LossWeights, Mlp};
use crate::rng::{self, STREAM_ENV, STREAM_INIT, STREAM_MODEL, STREAM_POLICY, STREAM_REPLAY};
use crate::sim::{self, EnvConfig, Environment, NoiseStd, ProcessorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Bootstrapped, feature-weighted flow matching.
    Dfm,
    /// Plain conditional flow matching: uniform weights, one replicate.
    PureFm,
    /// Dense transition predictor seeded with real `(s, a)` pairs.
    ModelBased,
    /// Real data only.
    ModelFree,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Dfm,
        Method::PureFm,
        Method::ModelBased,
        Method::ModelFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dfm => "dfm",
            Method::PureFm => "pure_fm",
            Method::ModelBased => "model_based",
            Method::ModelFree => "model_free",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::config("methods", format!("unknown method `{name}`")))
    }

    fn plans(self) -> bool {
        self != Method::ModelFree
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub horizon: usize,
    /// Agent training starts once real + synthetic insertions exceed this.
    pub exploit_threshold: u64,
    /// Generative model refit period, in steps.
    pub retrain_period: usize,
    /// Synthetic transitions generated after each refit.
    pub planning_breadth: usize,
    pub real_capacity: usize,
    pub synthetic_capacity: usize,
    /// Share of each agent batch drawn from the synthetic memory.
    pub synthetic_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            horizon: 200,
            exploit_threshold: 100,
            retrain_period: 50,
            planning_breadth: 1000,
            real_capacity: 1000,
            synthetic_capacity: 1000,
            synthetic_fraction: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("schedule.horizon", self.horizon),
            ("schedule.retrain_period", self.retrain_period),
            ("schedule.planning_breadth", self.planning_breadth),
            ("schedule.real_capacity", self.real_capacity),
            ("schedule.synthetic_capacity", self.synthetic_capacity),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.planning_breadth > self.synthetic_capacity {
            return Err(Error::config(
                "schedule.planning_breadth",
                "must not exceed synthetic_capacity",
            ));
        }
        if !(0.0..=1.0).contains(&self.synthetic_fraction) {
            return Err(Error::config("schedule.synthetic_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Transition predictor used by the model-based baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: vec![32, 32],
            epochs: 400,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("predictor.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("predictor.learning_rate", "must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("predictor.hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }
}

/// Everything one run needs apart from the method and the seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub flow: FlowConfig,
    pub forest: ForestConfig,
    pub predictor: PredictorConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.schedule.validate()?;
        self.flow.validate()?;
        self.forest.validate()?;
        self.predictor.validate()?;
        if self.env.episode_horizon < self.schedule.horizon {
            return Err(Error::config(
                "env.episode_horizon",
                "must cover schedule.horizon",
            ));
        }
        if self.schedule.real_capacity < self.schedule.horizon {
            return Err(Error::config(
                "schedule.real_capacity",
                "must hold every real transition of a run",
            ));
        }
        if let Some(first) = self.first_refit() {
            let available = first.min(self.schedule.real_capacity);
            let reason = format!("exceeds the {available} real transitions available at the first refit");
            if self.forest.min_samples > available {
                return Err(Error::config("forest.min_samples", reason));
            }
            if self.flow.train_start > available {
                return Err(Error::config("flow.train_start", reason));
            }
        }
        Ok(())
    }

    /// First step at which a generative model is fitted, if any.
    pub fn first_refit(&self) -> Option<usize> {
        let period = self.schedule.retrain_period;
        let step = (self.agent.batch_size / period + 1) * period;
        (step <= self.schedule.horizon).then_some(step)
    }

    pub fn layout(&self) -> TransitionLayout {
        TransitionLayout {
            num_actions: self.env.num_actions,
            ambient_temp: self.env.ambient_temp,
        }
    }
}

/// One row of a run log. `state` is the state the action was chosen in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: ProcessorState,
    pub action: usize,
    pub reward: f64,
    pub epsilon: f64,
    pub max_q: f64,
    pub agent_loss: Option<f64>,
    pub fm_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn fps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.state.fps).collect()
    }

    pub fn max_q(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_q).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }
}

/// Memory counters after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub real: u64,
    pub synthetic: u64,
}

/// Full result of a run, including the instrumentation used to check the
/// schedule.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub real: ReplayMemory,
    pub synthetic: ReplayMemory,
    /// Feature weights of the last flow refit (dfm and pure_fm).
    pub lambda: Option<Array1<f64>>,
    /// Steps at which the generative model was refit.
    pub model_train_steps: Vec<usize>,
    /// Steps at which the agent trained.
    pub agent_train_steps: Vec<usize>,
    pub counters: Vec<Counters>,
    pub lr_resets: u64,
    pub target_syncs: u64,
    /// Mean epoch loss curve of each generative refit.
    pub model_loss_curves: Vec<Vec<f64>>,
    pub final_epsilon: f64,
}

/// Restores the initial learning rate and clears Adam's moments every
/// `period` training steps. Returns whether a reset happened.
pub fn learning_rate_reset(train_steps: u64, adam: &mut Adam, initial_lr: f64, period: usize) -> bool {
    if train_steps > 0 && train_steps.is_multiple_of(period as u64) {
        adam.reset(initial_lr);
        true
    } else {
        false
    }
}

/// Best noise-free one-step reward over all actions from `state`.
pub fn regret_oracle(env: &EnvConfig, state: &ProcessorState) -> Result<f64> {
    let quiet = EnvConfig {
        noise_std: NoiseStd::zero(),
        ..env.clone()
    };
    let mut unused = rng::seeded(0);
    let mut best = f64::NEG_INFINITY;
    for a in 0..quiet.num_actions {
        let next = sim::dynamics(state, a, &quiet, &mut unused)?;
        best = best.max(sim::reward(&next, &quiet)?);
    }
    Ok(best)
}

/// Dense `(s, a) -> (s', r, done)` model trained with unweighted MSE in
/// normalized coordinates.
#[derive(Debug, Clone)]
pub struct TransitionPredictor {
    net: Mlp,
    normalizer: Normalizer,
    layout: TransitionLayout,
    pub loss_history: Vec<f64>,
}

impl TransitionPredictor {
    pub fn train<R: Rng + ?Sized>(
        memory: &ReplayMemory,
        layout: TransitionLayout,
        config: &PredictorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let data = layout.matrix(memory.iter());
        if data.nrows() == 0 {
            return Err(Error::InsufficientData {
                needed: 1,
                available: 0,
            });
        }
        let normalizer = Normalizer::fit(data.view())?;
        let z = normalizer.normalize(data.view());
        let inputs = z.slice(s![.., ..5]).to_owned();
        let targets = z.slice(s![.., 5..]).to_owned();

        let mut sizes = vec![5];
        sizes.extend(&config.hidden);
        sizes.push(TRANSITION_DIM - 5);
        let mut net = Mlp::new(&sizes, Activation::Tanh, rng.random())?;
        let mut adam = Adam::new(&net, config.learning_rate);
        let weights = LossWeights::ones(TRANSITION_DIM - 5);
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        let mut loss_history = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(config.batch_size) {
                let x = inputs.select(Axis(0), chunk);
                let y = targets.select(Axis(0), chunk);
                total += nn::train_step(&mut net, &mut adam, x.view(), y.view(), &weights)?;
                batches += 1;
            }
            loss_history.push(total / batches as f64);
        }
        Ok(TransitionPredictor {
            net,
            normalizer,
            layout,
            loss_history,
        })
    }

    /// Predicted transitions for real `(s, a)` seeds.
    pub fn predict(&self, seeds: &[Transition]) -> Result<Vec<Transition>> {
        let data = self.layout.matrix(seeds);
        let z = self.normalizer.normalize(data.view());
        let out = self.net.forward_batch(z.slice(s![.., ..5]))?;
        let mut full = z;
        full.slice_mut(s![.., 5..]).assign(&out);
        let raw = self.normalizer.denormalize(full.view());
        seeds
            .iter()
            .zip(raw.rows())
            .map(|(seed, row)| {
                let mut t = self.layout.decode(row.as_slice().unwrap())?;
                t.s = seed.s;
                t.a = seed.a;
                Ok(t)
            })
            .collect()
    }
}

/// `n` seed transitions drawn without replacement, starting a fresh
/// permutation whenever the memory is exhausted.
fn planning_seeds<R: Rng + ?Sized>(memory: &ReplayMemory, n: usize, rng: &mut R) -> Vec<Transition> {
    let mut seeds = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..memory.len()).collect();
    while seeds.len() < n {
        order.shuffle(rng);
        for &i in order.iter().take(n - seeds.len()) {
            seeds.push(*memory.get(i).unwrap());
        }
    }
    seeds
}

fn sample_mixed<R: Rng + ?Sized>(
    real: &ReplayMemory,
    synthetic: &ReplayMemory,
    batch: usize,
    synthetic_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let n_synth = if synthetic.is_empty() {
        0
    } else {
        ((batch as f64 * synthetic_fraction).round() as usize).min(synthetic.len())
    };
    let n_real = (batch - n_synth).min(real.len());
    let mut out = real.sample_batch(n_real, rng)?;
    out.extend(synthetic.sample_batch(n_synth, rng)?);
    Ok(out)
}

/// Runs one method for `schedule.horizon` steps.
pub fn run_experiment(method: Method, config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let schedule = &config.schedule;
    let layout = config.layout();

    let mut env = Environment::new(config.env.clone(), rng::stream(seed, STREAM_ENV))?;
    let mut policy_rng = rng::stream(seed, STREAM_POLICY);
    let mut replay_rng = rng::stream(seed, STREAM_REPLAY);
    let mut model_rng = rng::stream(seed, STREAM_MODEL);
    let init_seed = rng::stream(seed, STREAM_INIT).random::<u64>();
    let mut agent = DqnAgent::new(config.agent.clone(), &config.env, init_seed)?;

    let mut real = ReplayMemory::new(schedule.real_capacity);
    let mut synthetic = ReplayMemory::new(schedule.synthetic_capacity);
    let mut records = Vec::with_capacity(schedule.horizon);
    let mut counters = Vec::with_capacity(schedule.horizon);
    let mut model_train_steps = Vec::new();
    let mut agent_train_steps = Vec::new();
    let mut model_loss_curves = Vec::new();
    let mut lambda = None;
    let mut lr_resets = 0;

    for i in 1..=schedule.horizon {
        let state = env.state();
        let q = agent.q_values(&state)?;
        let max_q = q[argmax(&q)];
        let epsilon = agent.epsilon();
        let action = agent.act(&state, &mut policy_rng)?;
        let step = env.step(action)?;
        real.push(
            Transition {
                s: state,
                a: action,
                r: step.reward,
                s_next: step.next,
                done: step.done,
            },
            Origin::Simulator,
        );

        let mut fm_loss = None;
        let batch = config.agent.batch_size as u64;
        if method.plans() && i % schedule.retrain_period == 0 && real.inserted() > batch {
            let generated = match method {
                Method::Dfm | Method::PureFm => {
                    let (weights, flow_cfg) = if method == Method::Dfm {
                        let w = forest::transition_feature_weights(
                            &real,
                            config.env.num_actions,
                            &config.forest,
                            &mut model_rng,
                        )?;
                        (w, config.flow.clone())
                    } else {
                        let cfg = FlowConfig {
                            bootstrap: 1,
                            ..config.flow.clone()
                        };
                        (flow::uniform_lambda(TRANSITION_DIM), cfg)
                    };
                    let model = flow::train_flow_model(
                        &real,
                        weights.clone(),
                        layout,
                        &flow_cfg,
                        &mut model_rng,
                    )?;
                    fm_loss = model.loss_history.last().copied();
                    model_loss_curves.push(model.loss_history.clone());
                    lambda = Some(weights);
                    let out = flow::generate_transitions(
                        &model,
                        schedule.planning_breadth,
                        &mut model_rng,
                    )?;
                    out.into_iter().map(|t| (t, Origin::FlowModel)).collect::<Vec<_>>()
                }
                Method::ModelBased => {
                    let predictor = TransitionPredictor::train(
                        &real,
                        layout,
                        &config.predictor,
                        &mut model_rng,
                    )?;
                    fm_loss = predictor.loss_history.last().copied();
                    model_loss_curves.push(predictor.loss_history.clone());
                    let seeds = planning_seeds(&real, schedule.planning_breadth, &mut model_rng);
                    predictor
                        .predict(&seeds)?
                        .into_iter()
                        .map(|t| (t, Origin::Predictor))
                        .collect()
                }
                Method::ModelFree => unreachable!(),
            };
            model_train_steps.push(i);
            for (t, origin) in generated {
                synthetic.push(t, origin);
            }
        }

        let mut agent_loss = None;
        if real.inserted() + synthetic.inserted() > schedule.exploit_threshold {
            let batch = sample_mixed(
                &real,
                &synthetic,
                config.agent.batch_size,
                schedule.synthetic_fraction,
                &mut replay_rng,
            )?;
            agent_loss = Some(agent.train(&batch)?);
            agent_train_steps.push(i);
            let lr = config.agent.learning_rate;
            let period = config.agent.lr_reset_period;
            if learning_rate_reset(agent.train_steps(), agent.adam_mut(), lr, period) {
                lr_resets += 1;
            }
        }
        agent.decay_epsilon();

        records.push(StepRecord {
            t: i,
            state,
            action,
            reward: step.reward,
            epsilon,
            max_q,
            agent_loss,
            fm_loss,
        });
        counters.push(Counters {
            real: real.inserted(),
            synthetic: synthetic.inserted(),
        });
    }

    Ok(RunOutcome {
        log: RunLog {
            method: method.name().to_string(),
            seed,
            records,
        },
        real,
        synthetic,
        lambda,
        model_train_steps,
        agent_train_steps,
        counters,
        lr_resets,
        target_syncs: agent.target_syncs(),
        model_loss_curves,
        final_epsilon: agent.epsilon(),
    })
}

/// Uniform-random policy on the same environment noise stream; the
/// reference point for regret comparisons.
pub fn run_random_policy(env: &EnvConfig, horizon: usize, seed: u64) -> Result<RunLog> {
    let mut environment = Environment::new(env.clone(), rng::stream(seed, STREAM_ENV))?;
    let mut policy_rng = rng::stream(seed, STREAM_POLICY);
    let mut records = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let state = environment.state();
        let action = policy_rng.random_range(0..env.num_actions);
        let step = environment.step(action)?;
        records.push(StepRecord {
            t,
            state,
            action,
            reward: step.reward,
            epsilon: 1.0,
            max_q: 0.0,
            agent_loss: None,
            fm_loss: None,
        });
    }
    Ok(RunLog {
        method: "random".into(),
        seed,
        records,
    })
}

/// Matrix of flattened transitions, rows in memory order.
pub fn memory_matrix(memory: &ReplayMemory, layout: &TransitionLayout) -> Array2<f64> {
    layout.matrix(memory.iter())
}

/// Convenience used by the flow checkpoint command.
pub fn fit_flow_on(
    memory: &ReplayMemory,
    method: Method,
    config: &RunConfig,
    seed: u64,
) -> Result<FlowModel> {
    let mut r = rng::stream(seed, STREAM_MODEL);
    let (lambda, cfg) = match method {
        Method::Dfm => (
            forest::transition_feature_weights(memory, config.env.num_actions, &config.forest, &mut r)?,
            config.flow.clone(),
        ),
        _ => (
            flow::uniform_lambda(TRANSITION_DIM),
            FlowConfig {
                bootstrap: 1,
                ..config.flow.clone()
            },
        ),
    };
    flow::train_flow_model(memory, lambda, config.layout(), &cfg, &mut r)
}
