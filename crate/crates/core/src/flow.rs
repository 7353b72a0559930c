//! Distribution-aware conditional flow matching.
//!
//! A time-conditioned vector field `v(x, t)` is regressed onto the
//! optimal-transport conditional target `x1 - (1 - sigma_min) x0` along
//! `x(t) = (1 - (1 - sigma_min) t) x0 + t x1`. Two changes make it
//! distribution-aware:
//!
//! * the latent pool `x0` is bootstrapped into `B` replicates, each re-paired
//!   with a fresh shuffle of the data batch, and the loss averages over them;
//! * the squared error is weighted per dimension by `lambda`.
//!
//! Sampling integrates the learned field with explicit Euler from `t = 0`
//! (standard normal) to `t = 1`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{ReplayMemory, Transition};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, Gradients, LossWeights, Mlp, MlpCheckpoint};
use crate::sim::ProcessorState;

/// Width of the flattened transition `[s (4), a, s' (4), r, done]`.
pub const TRANSITION_DIM: usize = 11;

pub const TRANSITION_COLUMNS: [&str; TRANSITION_DIM] = [
    "fps", "freq", "power", "temp", "action", "next_fps", "next_freq", "next_power",
    "next_temp", "reward", "done",
];

pub const ACTION_COL: usize = 4;
pub const DONE_COL: usize = 10;

/// Smallest power a decoded state may carry, in watts.
const MIN_POWER: f64 = 1e-3;

/// Encoding of transitions as real vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionLayout {
    pub num_actions: usize,
    pub ambient_temp: f64,
}

impl TransitionLayout {
    fn action_scale(&self) -> f64 {
        (self.num_actions.max(2) - 1) as f64
    }

    pub fn flatten(&self, t: &Transition) -> [f64; TRANSITION_DIM] {
        let s = t.s.to_array();
        let n = t.s_next.to_array();
        [
            s[0],
            s[1],
            s[2],
            s[3],
            t.a as f64 / self.action_scale(),
            n[0],
            n[1],
            n[2],
            n[3],
            t.r,
            if t.done { 1.0 } else { 0.0 },
        ]
    }

    /// Exact inverse of [`flatten`](Self::flatten) on its image.
    pub fn unflatten(&self, v: &[f64]) -> Result<Transition> {
        if v.len() != TRANSITION_DIM {
            return Err(Error::Domain(format!(
                "transition vector has {} dims, expected {TRANSITION_DIM}",
                v.len()
            )));
        }
        let a = (v[ACTION_COL] * self.action_scale()).round();
        if !(a >= 0.0 && a < self.num_actions as f64) {
            return Err(Error::Domain(format!("encoded action {} out of range", v[4])));
        }
        Ok(Transition {
            s: ProcessorState::from_slice(&v[0..4]),
            a: a as usize,
            r: v[9],
            s_next: ProcessorState::from_slice(&v[5..9]),
            done: v[DONE_COL] >= 0.5,
        })
    }

    /// Turns a generated vector into a physically valid transition: rounds
    /// and clamps the action, thresholds done, and clamps state fields.
    pub fn decode(&self, v: &[f64]) -> Result<Transition> {
        if v.len() != TRANSITION_DIM {
            return Err(Error::Domain(format!(
                "transition vector has {} dims, expected {TRANSITION_DIM}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("generated a non-finite transition".into()));
        }
        let clamp_state = |x: &[f64]| ProcessorState {
            fps: x[0].max(0.0),
            freq: x[1].clamp(0.0, 1.0),
            power: x[2].max(MIN_POWER),
            temp: x[3].max(self.ambient_temp),
        };
        let a = (v[ACTION_COL] * self.action_scale())
            .round()
            .clamp(0.0, (self.num_actions - 1) as f64);
        Ok(Transition {
            s: clamp_state(&v[0..4]),
            a: a as usize,
            r: v[9],
            s_next: clamp_state(&v[5..9]),
            done: v[DONE_COL] >= 0.5,
        })
    }

    pub fn matrix<'a>(&self, transitions: impl IntoIterator<Item = &'a Transition>) -> Array2<f64> {
        let rows: Vec<[f64; TRANSITION_DIM]> =
            transitions.into_iter().map(|t| self.flatten(t)).collect();
        let mut m = Array2::zeros((rows.len(), TRANSITION_DIM));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(&ArrayView2::from_shape((1, TRANSITION_DIM), r).unwrap().row(0));
        }
        m
    }
}

/// Per-dimension standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InsufficientData {
                needed: 1,
                available: 0,
            });
        }
        let mean = data.mean_axis(Axis(0)).unwrap();
        let std = data.std_axis(Axis(0), 0.0);
        Ok(Normalizer {
            mean: mean.to_vec(),
            std: std.iter().map(|s| s.max(Self::STD_FLOOR)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        (&data - &mean) / &std
    }

    pub fn denormalize(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        &data * &std + &mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub sigma_min: f64,
    /// Bootstrap replicates of the latent pool per minibatch.
    pub bootstrap: usize,
    /// Euler steps used when sampling.
    pub ode_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Minimum number of real transitions before the model is trained.
    pub train_start: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            hidden: vec![64, 64],
            sigma_min: 0.01,
            bootstrap: 8,
            ode_steps: 100,
            epochs: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            train_start: 32,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::config("flow.sigma_min", "must lie in [0, 1)"));
        }
        if self.bootstrap == 0 {
            return Err(Error::config("flow.bootstrap", "must be >= 1"));
        }
        if self.ode_steps == 0 {
            return Err(Error::config("flow.ode_steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("flow.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("flow.learning_rate", "must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("flow.hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }
}

/// `B` replicates of the pool, each `m` rows drawn with replacement.
pub fn bootstrap_latents<R: Rng + ?Sized>(
    pool: ArrayView2<f64>,
    replicates: usize,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    let m = pool.nrows();
    if m == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    Ok((0..replicates)
        .map(|_| {
            let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            pool.select(Axis(0), &rows)
        })
        .collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Regression problem for one conditional flow-matching step: network inputs
/// `[x(t), t]` and target velocities, stacked over all replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Builds the OT conditional path for explicit draws.
pub fn cfm_pairs(
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    t: &[f64],
    sigma_min: f64,
) -> CfmBatch {
    let (n, d) = x1.dim();
    let mut inputs = Array2::zeros((n, d + 1));
    let mut targets = Array2::zeros((n, d));
    for i in 0..n {
        let ti = t[i];
        for j in 0..d {
            inputs[[i, j]] = (1.0 - (1.0 - sigma_min) * ti) * x0[[i, j]] + ti * x1[[i, j]];
            targets[[i, j]] = x1[[i, j]] - (1.0 - sigma_min) * x0[[i, j]];
        }
        inputs[[i, d]] = ti;
    }
    CfmBatch { inputs, targets }
}

/// Draws a latent pool, bootstraps it, pairs each replicate with a shuffled
/// copy of `x1`, and samples `t ~ U[0, 1]` per pair.
pub fn draw_cfm_batch<R: Rng + ?Sized>(
    x1: ArrayView2<f64>,
    sigma_min: f64,
    replicates: usize,
    rng: &mut R,
) -> Result<CfmBatch> {
    let (m, d) = x1.dim();
    if m == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    let pool = standard_normal(m, d, rng);
    let boots = bootstrap_latents(pool.view(), replicates, rng)?;
    let mut parts = Vec::with_capacity(replicates);
    for x0 in &boots {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        let data = x1.select(Axis(0), &order);
        let t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        parts.push(cfm_pairs(x0.view(), data.view(), &t, sigma_min));
    }
    let inputs: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
    let targets: Vec<_> = parts.iter().map(|p| p.targets.view()).collect();
    Ok(CfmBatch {
        inputs: concatenate(Axis(0), &inputs).unwrap(),
        targets: concatenate(Axis(0), &targets).unwrap(),
    })
}

/// Bootstrapped, feature-weighted CFM loss on a normalized data batch and
/// its gradient with respect to the vector-field parameters.
///
/// Every replicate has the same number of pairs, so the mean over the
/// stacked pairs equals the average of per-replicate means.
pub fn cfm_loss<R: Rng + ?Sized>(
    field: &Mlp,
    lambda: &Array1<f64>,
    x1: ArrayView2<f64>,
    sigma_min: f64,
    replicates: usize,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in flow training batch".into()));
    }
    let batch = draw_cfm_batch(x1, sigma_min, replicates, rng)?;
    field.loss_and_grad(
        batch.inputs.view(),
        batch.targets.view(),
        &LossWeights::PerDim(lambda.clone()),
    )
}

/// Trained vector field plus everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub field: Mlp,
    pub normalizer: Normalizer,
    pub lambda: Array1<f64>,
    pub sigma_min: f64,
    pub bootstrap: usize,
    pub ode_steps: usize,
    pub layout: Option<TransitionLayout>,
    pub epochs_trained: usize,
    /// Mean minibatch loss of each training epoch.
    pub loss_history: Vec<f64>,
}

fn check_lambda(lambda: &Array1<f64>, d: usize) -> Result<()> {
    if lambda.len() != d {
        return Err(Error::Domain(format!(
            "lambda has {} entries, data has {d} dims",
            lambda.len()
        )));
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Domain("lambda entries must be finite and >= 0".into()));
    }
    if (lambda.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain("lambda must sum to 1".into()));
    }
    Ok(())
}

impl FlowModel {
    /// Fits a fresh model to the rows of `data` (raw, unnormalized).
    pub fn train<R: Rng + ?Sized>(
        data: ArrayView2<f64>,
        lambda: Array1<f64>,
        layout: Option<TransitionLayout>,
        config: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d) = data.dim();
        if n < config.train_start.max(1) {
            return Err(Error::InsufficientData {
                needed: config.train_start.max(1),
                available: n,
            });
        }
        check_lambda(&lambda, d)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in flow training data".into()));
        }
        let normalizer = Normalizer::fit(data)?;
        let x = normalizer.normalize(data);

        let mut sizes = vec![d + 1];
        sizes.extend(&config.hidden);
        sizes.push(d);
        let mut field = Mlp::new(&sizes, Activation::Tanh, rng.random())?;
        let mut adam = Adam::new(&field, config.learning_rate);
        let weights = LossWeights::PerDim(lambda.clone());

        let mut loss_history = Vec::with_capacity(config.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..config.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(config.batch_size) {
                let x1 = x.select(Axis(0), chunk);
                let batch = draw_cfm_batch(x1.view(), config.sigma_min, config.bootstrap, rng)?;
                total += nn::train_step(
                    &mut field,
                    &mut adam,
                    batch.inputs.view(),
                    batch.targets.view(),
                    &weights,
                )?;
                batches += 1;
            }
            loss_history.push(total / batches as f64);
        }

        Ok(FlowModel {
            field,
            normalizer,
            lambda,
            sigma_min: config.sigma_min,
            bootstrap: config.bootstrap,
            ode_steps: config.ode_steps,
            layout,
            epochs_trained: config.epochs,
            loss_history,
        })
    }

    pub fn dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Euler integration of the field from `x0` (normalized coordinates).
    pub fn integrate(&self, x0: Array2<f64>, steps: usize) -> Result<Array2<f64>> {
        let (n, d) = x0.dim();
        let mut x = x0;
        let dt = 1.0 / steps as f64;
        let mut input = Array2::zeros((n, d + 1));
        for k in 0..steps {
            input.slice_mut(s![.., ..d]).assign(&x);
            input.column_mut(d).fill(k as f64 * dt);
            let v = self.field.forward_batch(input.view())?;
            x.scaled_add(dt, &v);
        }
        Ok(x)
    }

    /// `n` samples in normalized coordinates using `steps` Euler steps.
    pub fn sample_normalized<R: Rng + ?Sized>(
        &self,
        n: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        if self.epochs_trained == 0 {
            return Err(Error::State("flow model has not been trained".into()));
        }
        if steps == 0 {
            return Err(Error::config("flow.ode_steps", "must be >= 1"));
        }
        let x0 = standard_normal(n, self.dim(), rng);
        self.integrate(x0, steps)
    }

    /// `n` raw-scale samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let x = self.sample_normalized(n, self.ode_steps, rng)?;
        Ok(self.normalizer.denormalize(x.view()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&FlowCheckpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: FlowCheckpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        FlowModel::try_from(ck)
    }
}

/// Trains on every transition in the real memory.
pub fn train_flow_model<R: Rng + ?Sized>(
    memory: &ReplayMemory,
    lambda: Array1<f64>,
    layout: TransitionLayout,
    config: &FlowConfig,
    rng: &mut R,
) -> Result<FlowModel> {
    let data = layout.matrix(memory.iter());
    FlowModel::train(data.view(), lambda, Some(layout), config, rng)
}

pub fn generate_transitions<R: Rng + ?Sized>(
    model: &FlowModel,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let layout = model
        .layout
        .ok_or_else(|| Error::State("flow model carries no transition layout".into()))?;
    if model.dim() != TRANSITION_DIM {
        return Err(Error::Domain("flow model is not over transitions".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let raw = model.sample(n, rng)?;
    raw.rows()
        .into_iter()
        .map(|row| layout.decode(row.as_slice().unwrap()))
        .collect()
}

pub fn uniform_lambda(d: usize) -> Array1<f64> {
    Array1::from_elem(d, 1.0 / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCheckpoint {
    pub version: u32,
    pub field: MlpCheckpoint,
    pub normalizer: Normalizer,
    pub lambda: Vec<f64>,
    pub sigma_min: f64,
    pub bootstrap: usize,
    pub ode_steps: usize,
    pub layout: Option<TransitionLayout>,
    pub epochs_trained: usize,
}

impl From<&FlowModel> for FlowCheckpoint {
    fn from(m: &FlowModel) -> Self {
        FlowCheckpoint {
            version: nn::CHECKPOINT_VERSION,
            field: MlpCheckpoint::from(&m.field),
            normalizer: m.normalizer.clone(),
            lambda: m.lambda.to_vec(),
            sigma_min: m.sigma_min,
            bootstrap: m.bootstrap,
            ode_steps: m.ode_steps,
            layout: m.layout,
            epochs_trained: m.epochs_trained,
        }
    }
}

impl TryFrom<FlowCheckpoint> for FlowModel {
    type Error = Error;

    fn try_from(ck: FlowCheckpoint) -> Result<Self> {
        if ck.version != nn::CHECKPOINT_VERSION {
            return Err(Error::Domain(format!("unsupported version {}", ck.version)));
        }
        let field = Mlp::try_from(ck.field)?;
        let d = ck.normalizer.mean.len();
        if d == 0
            || ck.normalizer.std.len() != d
            || field.input_dim() != d + 1
            || field.output_dim() != d
        {
            return Err(Error::Domain("flow checkpoint dimensions disagree".into()));
        }
        if ck
            .normalizer
            .std
            .iter()
            .any(|s| !(s.is_finite() && *s >= Normalizer::STD_FLOOR))
            || ck.normalizer.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Domain("normalizer statistics are invalid".into()));
        }
        let lambda = Array1::from(ck.lambda);
        check_lambda(&lambda, d)?;
        if !(0.0..1.0).contains(&ck.sigma_min) || ck.bootstrap == 0 || ck.ode_steps == 0 {
            return Err(Error::Domain("flow checkpoint settings are invalid".into()));
        }
        if let Some(layout) = ck.layout {
            if d != TRANSITION_DIM || layout.num_actions == 0 || !layout.ambient_temp.is_finite() {
                return Err(Error::Domain("transition layout is invalid".into()));
            }
        }
        Ok(FlowModel {
            field,
            normalizer: ck.normalizer,
            lambda,
            sigma_min: ck.sigma_min,
            bootstrap: ck.bootstrap,
            ode_steps: ck.ode_steps,
            layout: ck.layout,
            epochs_trained: ck.epochs_trained,
            loss_history: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    const LAYOUT: TransitionLayout = TransitionLayout {
        num_actions: 12,
        ambient_temp: 25.0,
    };

    fn sample_transition() -> Transition {
        Transition {
            s: ProcessorState {
                fps: 61.0,
                freq: 0.6,
                power: 5.0,
                temp: 40.0,
            },
            a: 11,
            r: 1.7,
            s_next: ProcessorState {
                fps: 120.0,
                freq: 1.0,
                power: 9.0,
                temp: 43.0,
            },
            done: false,
        }
    }

    #[test]
    fn flatten_encoding() {
        let t = sample_transition();
        let v = LAYOUT.flatten(&t);
        assert_eq!(v[ACTION_COL], 1.0);
        assert_eq!(v[DONE_COL], 0.0);
        assert_eq!(LAYOUT.unflatten(&v).unwrap(), t);
        assert!(LAYOUT.unflatten(&v[..10]).is_err());
    }

    #[test]
    fn decode_clamps_to_physical_ranges() {
        let v = [-5.0, 1.4, -1.0, 3.0, 1.3, 10.0, -0.2, 0.0, 80.0, 0.3, 0.7];
        let t = LAYOUT.decode(&v).unwrap();
        assert_eq!(t.s.fps, 0.0);
        assert_eq!(t.s.freq, 1.0);
        assert!(t.s.power > 0.0);
        assert_eq!(t.s.temp, 25.0);
        assert_eq!(t.a, 11);
        assert_eq!(t.s_next.freq, 0.0);
        assert!(t.done);
    }

    #[test]
    fn normalizer_round_trip() {
        let data = array![[1.0, 5.0, 3.0], [2.0, 5.0, -1.0], [4.0, 5.0, 0.5]];
        let n = Normalizer::fit(data.view()).unwrap();
        assert_eq!(n.std[1], Normalizer::STD_FLOOR);
        let back = n.denormalize(n.normalize(data.view()).view());
        for (a, b) in back.iter().zip(data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bootstrap_rows_come_from_pool() {
        let mut r = rng::seeded(0);
        let pool = standard_normal(20, 3, &mut r);
        let reps = bootstrap_latents(pool.view(), 4, &mut r).unwrap();
        assert_eq!(reps.len(), 4);
        for rep in &reps {
            assert_eq!(rep.dim(), (20, 3));
            for row in rep.rows() {
                assert!(pool.rows().into_iter().any(|p| p == row));
            }
        }
        let a = bootstrap_latents(pool.view(), 1, &mut rng::seeded(5)).unwrap();
        let b = bootstrap_latents(pool.view(), 1, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_latents(Array2::zeros((0, 3)).view(), 1, &mut r).is_err());
    }

    #[test]
    fn bootstrap_distinct_fraction() {
        let mut r = rng::seeded(17);
        let m = 20_000;
        let pool = Array2::from_shape_fn((m, 1), |(i, _)| i as f64);
        let rep = &bootstrap_latents(pool.view(), 1, &mut r).unwrap()[0];
        let mut seen = vec![false; m];
        for v in rep.column(0) {
            seen[*v as usize] = true;
        }
        let frac = seen.iter().filter(|&&s| s).count() as f64 / m as f64;
        assert!((frac - (1.0 - (-1.0f64).exp())).abs() < 0.02, "{frac}");
    }

    #[test]
    fn closed_form_single_pair_loss() {
        // sigma_min = 0, one pair, fixed t: loss = sum_i lambda_i (v_i - (x1 - x0)_i)^2.
        let field = Mlp::new(&[3, 5, 2], Activation::Tanh, 4).unwrap();
        let x0 = array![[0.3, -1.2]];
        let x1 = array![[1.5, 0.4]];
        let t = 0.37;
        let lambda = array![0.25, 0.75];
        let batch = cfm_pairs(x0.view(), x1.view(), &[t], 0.0);
        let loss = field
            .loss(batch.inputs.view(), batch.targets.view(), &LossWeights::PerDim(lambda.clone()))
            .unwrap();

        let xt = [(1.0 - t) * 0.3 + t * 1.5, (1.0 - t) * -1.2 + t * 0.4];
        let v = field.forward(&[xt[0], xt[1], t]).unwrap();
        let w = [1.5 - 0.3, 0.4 + 1.2];
        let expected = 0.25 * (v[0] - w[0]).powi(2) + 0.75 * (v[1] - w[1]).powi(2);
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn exact_field_has_zero_loss() {
        // A zero latent pool makes the target the data itself; a net whose
        // bias equals that constant target is then exact.
        let x1 = array![[0.5, -0.25], [0.5, -0.25]];
        let field = Mlp::from_parts(
            vec![3, 2],
            Activation::Tanh,
            vec![Array2::zeros((2, 3))],
            vec![array![0.5, -0.25]],
        )
        .unwrap();
        let x0 = Array2::zeros((2, 2));
        let batch = cfm_pairs(x0.view(), x1.view(), &[0.2, 0.9], 0.01);
        let loss = field
            .loss(batch.inputs.view(), batch.targets.view(), &LossWeights::PerDim(array![0.5, 0.5]))
            .unwrap();
        assert_eq!(loss, 0.0);

        // One-hot lambda on an exact dimension ignores the wrong one.
        let wrong = Mlp::from_parts(
            vec![3, 2],
            Activation::Tanh,
            vec![Array2::zeros((2, 3))],
            vec![array![0.5, 9.0]],
        )
        .unwrap();
        let loss = wrong
            .loss(batch.inputs.view(), batch.targets.view(), &LossWeights::PerDim(array![1.0, 0.0]))
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_single_replicate_is_plain_cfm() {
        let field = Mlp::new(&[4, 8, 3], Activation::Tanh, 2).unwrap();
        let mut r = rng::seeded(3);
        let x1 = standard_normal(16, 3, &mut r);
        let (weighted, _) =
            cfm_loss(&field, &uniform_lambda(3), x1.view(), 0.01, 1, &mut rng::seeded(9)).unwrap();
        let batch = draw_cfm_batch(x1.view(), 0.01, 1, &mut rng::seeded(9)).unwrap();
        let pred = field.forward_batch(batch.inputs.view()).unwrap();
        let plain = (&pred - &batch.targets).mapv(|e| e * e).mean().unwrap();
        assert!((weighted - plain).abs() < 1e-14);
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let field = Mlp::new(&[12, 64, 64, 11], Activation::Tanh, 6).unwrap();
        let mut r = rng::seeded(4);
        let x1 = standard_normal(8, 11, &mut r);
        let lambda = Array1::linspace(1.0, 2.0, 11);
        let lambda = &lambda / lambda.sum();
        let batch = draw_cfm_batch(x1.view(), 0.01, 3, &mut r).unwrap();
        let err = nn::grad_check(
            &field,
            batch.inputs.view(),
            batch.targets.view(),
            &LossWeights::PerDim(lambda),
            60,
            &mut r,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn untrained_or_empty_generation() {
        let field = Mlp::new(&[12, 4, 11], Activation::Tanh, 0).unwrap();
        let mut model = FlowModel {
            field,
            normalizer: Normalizer {
                mean: vec![0.0; 11],
                std: vec![1.0; 11],
            },
            lambda: uniform_lambda(11),
            sigma_min: 0.01,
            bootstrap: 1,
            ode_steps: 10,
            layout: Some(LAYOUT),
            epochs_trained: 0,
            loss_history: vec![],
        };
        let mut r = rng::seeded(0);
        assert!(matches!(
            generate_transitions(&model, 5, &mut r),
            Err(Error::State(_))
        ));
        model.epochs_trained = 1;
        assert!(generate_transitions(&model, 0, &mut r).unwrap().is_empty());
        let back = FlowModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back.field, model.field);
        assert_eq!(back.normalizer, model.normalizer);
    }

    #[test]
    fn training_requires_enough_rows() {
        let data = Array2::zeros((10, 2));
        let err = FlowModel::train(
            data.view(),
            uniform_lambda(2),
            None,
            &FlowConfig::default(),
            &mut rng::seeded(0),
        );
        assert!(matches!(err, Err(Error::InsufficientData { .. })));
    }
}
