//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Weights are stored per layer as `out x in` matrices; a batch is a matrix
//! with one sample per row. Everything is `f64`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Multi-layer perceptron with a shared hidden activation and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Gradient (or any parameter-shaped quantity) of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            weights: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Entry in the flat parameter order of [`Mlp::param_mut`].
    pub fn get(&self, index: usize) -> f64 {
        let mut idx = index;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.len() {
                return w[[idx / w.ncols(), idx % w.ncols()]];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("gradient index {index} out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(
            "layer_sizes",
            "need at least an input and an output layer",
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config("layer_sizes", "every layer needs >= 1 unit"));
    }
    Ok(())
}

impl Mlp {
    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).unwrap();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                dist.sample(&mut rng)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights: layer_sizes
                .windows(2)
                .map(|p| Array2::zeros((p[1], p[0])))
                .collect(),
            biases: layer_sizes.windows(2).map(|p| Array1::zeros(p[1])).collect(),
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activation: Activation,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Domain(format!(
                "expected {layers} weight/bias pairs, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].dim() != (pair[1], pair[0]) || biases[l].len() != pair[1] {
                return Err(Error::Domain(format!("layer {l} has inconsistent shape")));
            }
        }
        let mlp = Mlp {
            layer_sizes,
            activation,
            weights,
            biases,
        };
        if !mlp.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(mlp)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Mutable access to one parameter. Flat order is, per layer, the
    /// row-major weights followed by the biases.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut idx = index;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if idx < w.len() {
                let cols = w.ncols();
                return &mut w[[idx / cols, idx % cols]];
            }
            idx -= w.len();
            if idx < b.len() {
                return &mut b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Domain(format!(
                "input has {} dims, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.pop().unwrap())
    }

    /// Layer outputs `[input, hidden..., output]`.
    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Domain(format!(
                "input has {} dims, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            acts.push(z);
        }
        Ok(acts)
    }

    fn backward(&self, acts: &[Array2<f64>], d_out: Array2<f64>) -> Gradients {
        let layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_out;
        for l in (0..layers).rev() {
            grads.weights[l] = delta.t().dot(&acts[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l]);
                let act = self.activation;
                Zip::from(&mut prev)
                    .and(&acts[l])
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
                delta = prev;
            }
        }
        grads
    }

    /// Weighted squared error `mean_rows sum_j w_ij (pred_ij - target_ij)^2`
    /// and its gradient.
    pub fn loss_and_grad(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        weights: &LossWeights,
    ) -> Result<(f64, Gradients)> {
        let acts = self.forward_cached(inputs)?;
        let pred = acts.last().unwrap();
        check_targets(pred, targets, weights)?;
        let n = inputs.nrows().max(1) as f64;
        let mut diff = pred - &targets;
        let mut weighted = diff.clone();
        match weights {
            LossWeights::PerDim(lambda) => weighted *= lambda,
            LossWeights::PerElement(w) => weighted *= w,
        }
        let loss = Zip::from(&diff)
            .and(&weighted)
            .fold(0.0, |acc, &d, &wd| acc + d * wd)
            / n;
        diff.assign(&weighted);
        diff *= 2.0 / n;
        Ok((loss, self.backward(&acts, diff)))
    }

    pub fn loss(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        weights: &LossWeights,
    ) -> Result<f64> {
        let pred = self.forward_batch(inputs)?;
        check_targets(&pred, targets, weights)?;
        let n = inputs.nrows().max(1) as f64;
        let mut total = 0.0;
        for ((i, j), p) in pred.indexed_iter() {
            let d = p - targets[[i, j]];
            let w = match weights {
                LossWeights::PerDim(l) => l[j],
                LossWeights::PerElement(m) => m[[i, j]],
            };
            total += w * d * d;
        }
        Ok(total / n)
    }
}

fn check_targets(
    pred: &Array2<f64>,
    targets: ArrayView2<f64>,
    weights: &LossWeights,
) -> Result<()> {
    if pred.dim() != targets.dim() {
        return Err(Error::Domain(format!(
            "targets have shape {:?}, predictions {:?}",
            targets.dim(),
            pred.dim()
        )));
    }
    match weights {
        LossWeights::PerDim(l) if l.len() != pred.ncols() => Err(Error::Domain(format!(
            "loss weights have {} dims, output has {}",
            l.len(),
            pred.ncols()
        ))),
        LossWeights::PerElement(m) if m.dim() != pred.dim() => {
            Err(Error::Domain("loss weight mask has the wrong shape".into()))
        }
        _ => Ok(()),
    }
}

/// Per-output weighting of the squared-error loss.
#[derive(Debug, Clone, PartialEq)]
pub enum LossWeights {
    /// One weight per output dimension, shared by every row.
    PerDim(Array1<f64>),
    /// Individual weight for every prediction.
    PerElement(Array2<f64>),
}

impl LossWeights {
    pub fn ones(dim: usize) -> Self {
        LossWeights::PerDim(Array1::ones(dim))
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LossWeights::PerDim(l) => l.iter().all(|x| x.is_finite() && *x >= 0.0),
            LossWeights::PerElement(m) => m.iter().all(|x| x.is_finite() && *x >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain("loss weights must be finite and >= 0".into()))
        }
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Gradients::zeros_like(mlp),
            second: Gradients::zeros_like(mlp),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.first
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.second
    }

    /// Clears both moment estimates and the step counter and sets a new rate.
    pub fn reset(&mut self, lr: f64) {
        self.lr = lr;
        self.step = 0;
        for w in self.first.weights.iter_mut().chain(self.second.weights.iter_mut()) {
            w.fill(0.0);
        }
        for b in self.first.biases.iter_mut().chain(self.second.biases.iter_mut()) {
            b.fill(0.0);
        }
    }

    pub fn apply(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..mlp.weights.len() {
            Zip::from(&mut mlp.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.first.weights[l])
                .and(&mut self.second.weights[l])
                .for_each(update);
            Zip::from(&mut mlp.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.first.biases[l])
                .and(&mut self.second.biases[l])
                .for_each(update);
        }
    }
}

fn check_finite(name: &str, x: ArrayView2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {name}")))
    }
}

/// One Adam step on the weighted squared error. Returns the loss measured
/// before the update.
pub fn train_step(
    mlp: &mut Mlp,
    adam: &mut Adam,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    check_finite("inputs", inputs)?;
    check_finite("targets", targets)?;
    weights.validate()?;
    let (loss, grads) = mlp.loss_and_grad(inputs, targets, weights)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    adam.apply(mlp, &grads);
    Ok(loss)
}

/// Maximum relative error between backprop and central finite differences
/// (step `1e-5`) over a random subsample of at least 50 parameters (all of
/// them for smaller nets).
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// vanishing gradients from turning rounding noise into large ratios.
pub fn grad_check<R: Rng + ?Sized>(
    mlp: &Mlp,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: &LossWeights,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    const H: f64 = 1e-5;
    let (_, analytic) = mlp.loss_and_grad(inputs, targets, weights)?;
    let total = mlp.num_params();
    let count = samples.max(50).min(total);
    let mut probe = mlp.clone();
    let mut worst: f64 = 0.0;
    for idx in sample_indices(rng, total, count).into_iter() {
        let original = *probe.param_mut(idx);
        *probe.param_mut(idx) = original + H;
        let up = probe.loss(inputs, targets, weights)?;
        *probe.param_mut(idx) = original - H;
        let down = probe.loss(inputs, targets, weights)?;
        *probe.param_mut(idx) = original;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.get(idx);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// On-disk layout of an [`Mlp`]. Weights are row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl From<&Mlp> for MlpCheckpoint {
    fn from(mlp: &Mlp) -> Self {
        MlpCheckpoint {
            version: CHECKPOINT_VERSION,
            layer_sizes: mlp.layer_sizes.clone(),
            activation: mlp.activation,
            weights: mlp.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: mlp.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(ck: MlpCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Domain(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        validate_sizes(&ck.layer_sizes)?;
        let layers = ck.layer_sizes.len() - 1;
        if ck.weights.len() != layers || ck.biases.len() != layers {
            return Err(Error::Domain("checkpoint layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in ck.weights.into_iter().zip(ck.biases).enumerate() {
            let (fan_in, fan_out) = (ck.layer_sizes[l], ck.layer_sizes[l + 1]);
            let w = Array2::from_shape_vec((fan_out, fan_in), w)
                .map_err(|_| Error::Domain(format!("layer {l} weight shape mismatch")))?;
            weights.push(w);
            biases.push(Array1::from(b));
        }
        Mlp::from_parts(ck.layer_sizes, ck.activation, weights, biases)
    }
}

impl Mlp {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&MlpCheckpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: MlpCheckpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Mlp::try_from(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        let d = Uniform::new(-1.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |_| d.sample(&mut r))
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Mlp::new(&[4, 6, 6, 12], Activation::Tanh, 1).unwrap();
        let b = Mlp::new(&[4, 6, 6, 12], Activation::Tanh, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.biases().iter().all(|b| b.iter().all(|&x| x == 0.0)));
        for (w, fan_in) in a.weights().iter().zip([4.0f64, 6.0, 6.0]) {
            assert!(w.iter().all(|x| x.abs() <= 1.0 / fan_in.sqrt()));
        }
    }

    #[test]
    fn weight_shapes() {
        let m = Mlp::new(&[2, 3, 1], Activation::Tanh, 0).unwrap();
        assert_eq!(m.weights()[0].dim(), (3, 2));
        assert_eq!(m.weights()[1].dim(), (1, 3));
        assert_eq!(m.num_params(), 6 + 3 + 3 + 1);
    }

    #[test]
    fn invalid_layer_lists() {
        assert!(matches!(
            Mlp::new(&[], Activation::Tanh, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            Mlp::new(&[3], Activation::Tanh, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            Mlp::new(&[3, 0, 1], Activation::Tanh, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn zero_net_outputs_zero() {
        let m = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_net() {
        let m = Mlp::from_parts(
            vec![3, 3],
            Activation::Tanh,
            vec![Array2::eye(3)],
            vec![Array1::zeros(3)],
        )
        .unwrap();
        assert_eq!(m.forward(&[0.5, -7.0, 2.0]).unwrap(), vec![0.5, -7.0, 2.0]);
    }

    #[test]
    fn tanh_output_is_bounded_by_final_weights() {
        let m = Mlp::new(&[3, 8, 2], Activation::Tanh, 4).unwrap();
        let w = &m.weights()[1];
        for x in [[100.0, -50.0, 3.0], [1e6, 1e6, -1e6]] {
            let y = m.forward(&x).unwrap();
            for (j, yj) in y.iter().enumerate() {
                let bound: f64 = w.row(j).iter().map(|v| v.abs()).sum();
                assert!(yj.abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn forward_dimension_mismatch() {
        let m = Mlp::new(&[3, 2], Activation::Tanh, 0).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn perfect_predictions_have_zero_loss_and_gradient() {
        let m = Mlp::new(&[3, 4, 2], Activation::Tanh, 2).unwrap();
        let x = random_batch(5, 3, 1);
        let y = m.forward_batch(x.view()).unwrap();
        let (loss, g) = m
            .loss_and_grad(x.view(), y.view(), &LossWeights::ones(2))
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn masked_dimension_contributes_nothing() {
        let m = Mlp::zeros(&[1, 2], Activation::Tanh).unwrap();
        let x = array![[1.0], [2.0]];
        let y = array![[0.0, 5.0], [0.0, -3.0]];
        let w = LossWeights::PerDim(array![1.0, 0.0]);
        let (loss, g) = m.loss_and_grad(x.view(), y.view(), &w).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn unit_weights_give_plain_mse() {
        let m = Mlp::new(&[3, 4, 2], Activation::Tanh, 2).unwrap();
        let x = random_batch(6, 3, 5);
        let y = random_batch(6, 2, 6);
        let loss = m.loss(x.view(), y.view(), &LossWeights::ones(2)).unwrap();
        let pred = m.forward_batch(x.view()).unwrap();
        let mse = (&pred - &y).mapv(|d| d * d).sum() / 6.0;
        assert!((loss - mse).abs() < 1e-14);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // Scalar linear net y = w x with x = 1 and target far away:
        // g = 2 (w - t); bias-corrected m_hat = g, v_hat = g^2.
        let mut m = Mlp::from_parts(
            vec![1, 1],
            Activation::Tanh,
            vec![array![[0.5]]],
            vec![array![0.0]],
        )
        .unwrap();
        let mut adam = Adam::new(&m, 0.01);
        train_step(
            &mut m,
            &mut adam,
            array![[1.0]].view(),
            array![[10.0]].view(),
            &LossWeights::ones(1),
        )
        .unwrap();
        let g: f64 = 2.0 * (0.5 - 10.0);
        let expected = 0.5 - 0.01 * g / (g.abs() + 1e-8);
        assert!((m.weights()[0][[0, 0]] - expected).abs() < 1e-15);
        assert!((m.weights()[0][[0, 0]] - 0.51).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut m = Mlp::new(&[3, 4, 2], Activation::Tanh, 2).unwrap();
        let before = m.clone();
        let mut adam = Adam::new(&m, 0.0);
        let x = random_batch(4, 3, 1);
        let y = random_batch(4, 2, 2);
        train_step(&mut m, &mut adam, x.view(), y.view(), &LossWeights::ones(2)).unwrap();
        assert_eq!(m, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn nan_inputs_rejected_before_update() {
        let mut m = Mlp::new(&[2, 2], Activation::Tanh, 2).unwrap();
        let before = m.clone();
        let mut adam = Adam::new(&m, 0.1);
        let err = train_step(
            &mut m,
            &mut adam,
            array![[f64::NAN, 0.0]].view(),
            array![[0.0, 0.0]].view(),
            &LossWeights::ones(2),
        );
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(m, before);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn closed_form_linear_gradient() {
        // L = (w x - y)^2 with one sample, dL/dw = 2 (w x - y) x.
        let (w, x, y) = (0.7, 1.3, -0.4);
        let m = Mlp::from_parts(
            vec![1, 1],
            Activation::Tanh,
            vec![array![[w]]],
            vec![array![0.0]],
        )
        .unwrap();
        let (_, g) = m
            .loss_and_grad(array![[x]].view(), array![[y]].view(), &LossWeights::ones(1))
            .unwrap();
        assert!((g.get(0) - 2.0 * (w * x - y) * x).abs() < 1e-14);
        let err = grad_check(
            &m,
            array![[x]].view(),
            array![[y]].view(),
            &LossWeights::ones(1),
            50,
            &mut rng::seeded(0),
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn grad_check_on_random_nets() {
        for (sizes, act) in [
            (vec![4, 6, 6, 12], Activation::Tanh),
            (vec![12, 64, 64, 11], Activation::Tanh),
            (vec![5, 32, 32, 6], Activation::Tanh),
            (vec![3, 7, 2], Activation::Relu),
        ] {
            let m = Mlp::new(&sizes, act, 11).unwrap();
            let x = random_batch(8, sizes[0], 3);
            let y = random_batch(8, *sizes.last().unwrap(), 4);
            let lambda = LossWeights::PerDim(Array1::linspace(0.1, 1.0, *sizes.last().unwrap()));
            let err = grad_check(&m, x.view(), y.view(), &lambda, 80, &mut rng::seeded(1)).unwrap();
            assert!(err < 1e-4, "{sizes:?}: {err}");
        }
    }

    #[test]
    fn zero_loss_batch_has_vanishing_gradients() {
        let m = Mlp::new(&[3, 5, 2], Activation::Tanh, 9).unwrap();
        let x = random_batch(4, 3, 9);
        let y = m.forward_batch(x.view()).unwrap();
        let err = grad_check(&m, x.view(), y.view(), &LossWeights::ones(2), 50, &mut rng::seeded(0))
            .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::new(&[4, 6, 6, 12], Activation::Relu, 7).unwrap();
        let back = Mlp::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let text = r#"{"version":1,"layer_sizes":[2,1],"activation":"tanh","weights":[[1.0]],"biases":[[0.0]]}"#;
        assert!(Mlp::from_json(text).is_err());
        assert!(matches!(Mlp::from_json("{"), Err(Error::Parse { .. })));
    }
}
