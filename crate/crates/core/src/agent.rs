//! Replay memories and the DQN agent.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, LossWeights, Mlp};
use crate::sim::{EnvConfig, ProcessorState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: ProcessorState,
    pub a: usize,
    pub r: f64,
    pub s_next: ProcessorState,
    pub done: bool,
}

/// Where a stored transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Simulator,
    FlowModel,
    Predictor,
}

/// Bounded FIFO of transitions with a running insertion counter.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: VecDeque<(Transition, Origin)>,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay memory needs a positive capacity");
        ReplayMemory {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of transitions ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, transition: Transition, origin: Origin) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((transition, origin));
        self.inserted += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        self.items.iter().map(|(t, _)| t)
    }

    pub fn origins(&self) -> impl Iterator<Item = Origin> + '_ {
        self.items.iter().map(|(_, o)| *o)
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index).map(|(t, _)| t)
    }

    pub fn to_vec(&self) -> Vec<Transition> {
        self.iter().copied().collect()
    }

    /// `n` distinct transitions chosen uniformly.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if n > self.items.len() {
            return Err(Error::InsufficientData {
                needed: n,
                available: self.items.len(),
            });
        }
        Ok(sample_indices(rng, self.items.len(), n)
            .into_iter()
            .map(|i| self.items[i].0)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every training step.
    pub lr_decay: f64,
    /// Training steps between learning-rate resets.
    pub lr_reset_period: usize,
    pub batch_size: usize,
    pub target_sync_period: usize,
    pub hidden: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            discount: 0.99,
            epsilon_start: 1.0,
            epsilon_decay: 0.99,
            epsilon_floor: 0.05,
            learning_rate: 0.05,
            lr_decay: 0.99,
            lr_reset_period: 100,
            batch_size: 32,
            target_sync_period: 20,
            hidden: vec![6, 6],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::config("discount", "must lie in (0, 1)"));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::config("epsilon_decay", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_floor) {
            return Err(Error::config("epsilon_floor", "must lie in [0, 1]"));
        }
        if !(self.epsilon_start >= self.epsilon_floor && self.epsilon_start <= 1.0) {
            return Err(Error::config(
                "epsilon_start",
                "must lie in [epsilon_floor, 1]",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.lr_reset_period == 0 {
            return Err(Error::config("lr_reset_period", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.target_sync_period == 0 {
            return Err(Error::config("target_sync_period", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }
}

pub fn decay_epsilon(epsilon: f64, config: &AgentConfig) -> f64 {
    (epsilon * config.epsilon_decay).max(config.epsilon_floor)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over the network's Q-values for `features`.
pub fn select_action<R: Rng + ?Sized>(
    qnet: &Mlp,
    features: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let k = qnet.output_dim();
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..k));
    }
    Ok(argmax(&qnet.forward(features)?))
}

/// A minibatch in network-input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct QBatch {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
}

impl QBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Bootstrapped targets `r + gamma * max_a' Q(s', a'; W-)`, or `r` on terminal
/// transitions.
pub fn q_targets(target_net: &Mlp, batch: &QBatch, discount: f64) -> Result<Vec<f64>> {
    let next_q = target_net.forward_batch(batch.next_states.view())?;
    let targets: Vec<f64> = (0..batch.len())
        .map(|i| {
            if batch.dones[i] {
                batch.rewards[i]
            } else {
                let row = next_q.row(i);
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                batch.rewards[i] + discount * best
            }
        })
        .collect();
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("non-finite Q target".into()));
    }
    Ok(targets)
}

/// One Adam step on the squared TD error of the taken actions only.
pub fn train_q_step(
    qnet: &mut Mlp,
    adam: &mut Adam,
    target_net: &Mlp,
    batch: &QBatch,
    discount: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    let y = q_targets(target_net, batch, discount)?;
    let k = qnet.output_dim();
    let mut targets = Array2::zeros((batch.len(), k));
    let mut mask = Array2::zeros((batch.len(), k));
    for (i, (&a, &yi)) in batch.actions.iter().zip(&y).enumerate() {
        if a >= k {
            return Err(Error::Domain(format!("action {a} out of range 0..{k}")));
        }
        targets[[i, a]] = yi;
        mask[[i, a]] = 1.0;
    }
    nn::train_step(
        qnet,
        adam,
        batch.states.view(),
        targets.view(),
        &LossWeights::PerElement(mask),
    )
}

pub fn sync_target(qnet: &Mlp) -> Mlp {
    qnet.clone()
}

/// DQN agent acting on normalized processor states.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    config: AgentConfig,
    scales: [f64; 4],
    qnet: Mlp,
    target: Mlp,
    adam: Adam,
    epsilon: f64,
    train_steps: u64,
    syncs: u64,
}

impl DqnAgent {
    pub fn new(config: AgentConfig, env: &EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![ProcessorState::DIM];
        sizes.extend(&config.hidden);
        sizes.push(env.num_actions);
        let qnet = Mlp::new(&sizes, Activation::Tanh, seed)?;
        let adam = Adam::new(&qnet, config.learning_rate);
        Ok(DqnAgent {
            scales: env.state_scales(),
            target: sync_target(&qnet),
            qnet,
            adam,
            epsilon: config.epsilon_start,
            train_steps: 0,
            syncs: 0,
            config,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn qnet(&self) -> &Mlp {
        &self.qnet
    }

    pub fn target_net(&self) -> &Mlp {
        &self.target
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut Adam {
        &mut self.adam
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn target_syncs(&self) -> u64 {
        self.syncs
    }

    pub fn features(&self, s: &ProcessorState) -> [f64; 4] {
        let raw = s.to_array();
        std::array::from_fn(|i| raw[i] / self.scales[i])
    }

    pub fn q_values(&self, s: &ProcessorState) -> Result<Vec<f64>> {
        self.qnet.forward(&self.features(s))
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &ProcessorState, rng: &mut R) -> Result<usize> {
        select_action(&self.qnet, &self.features(s), self.epsilon, rng)
    }

    pub fn decay_epsilon(&mut self) {
        self.epsilon = decay_epsilon(self.epsilon, &self.config);
    }

    pub fn batch(&self, transitions: &[Transition]) -> QBatch {
        let n = transitions.len();
        let mut states = Array2::zeros((n, 4));
        let mut next_states = Array2::zeros((n, 4));
        for (i, t) in transitions.iter().enumerate() {
            states.row_mut(i).assign(&Array1::from(self.features(&t.s).to_vec()));
            next_states
                .row_mut(i)
                .assign(&Array1::from(self.features(&t.s_next).to_vec()));
        }
        QBatch {
            states,
            actions: transitions.iter().map(|t| t.a).collect(),
            rewards: transitions.iter().map(|t| t.r).collect(),
            next_states,
            dones: transitions.iter().map(|t| t.done).collect(),
        }
    }

    /// One training step; syncs the target network every `target_sync_period`
    /// steps and decays the learning rate.
    pub fn train(&mut self, transitions: &[Transition]) -> Result<f64> {
        let batch = self.batch(transitions);
        let loss = train_q_step(
            &mut self.qnet,
            &mut self.adam,
            &self.target,
            &batch,
            self.config.discount,
        )?;
        self.train_steps += 1;
        self.adam.lr *= self.config.lr_decay;
        if self.train_steps.is_multiple_of(self.config.target_sync_period as u64) {
            self.target = sync_target(&self.qnet);
            self.syncs += 1;
        }
        Ok(loss)
    }
}
