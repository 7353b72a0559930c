//! Random-forest regression with impurity-based feature importances.
//!
//! The importances weight the flow-matching loss: one forest per next-state
//! component is fit on `(state, action)` inputs, and the normalized input
//! importances are spread over the flattened transition layout.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::ReplayMemory;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Smallest replay memory the transition weights are fit on.
    pub min_samples: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 50,
            max_depth: 6,
            min_leaf: 5,
            min_samples: 50,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::config("forest.n_trees", "must be >= 1"));
        }
        if self.min_leaf == 0 {
            return Err(Error::config("forest.min_leaf", "must be >= 1"));
        }
        if self.min_samples < 2 * self.min_leaf {
            return Err(Error::config(
                "forest.min_samples",
                "must be at least 2 * min_leaf",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
        samples: usize,
        impurity: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        samples: usize,
        impurity: f64,
    },
}

impl Node {
    pub fn samples(&self) -> usize {
        match self {
            Node::Leaf { samples, .. } | Node::Split { samples, .. } => *samples,
        }
    }
}

/// Binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

fn mean_and_variance(y: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    /// Reduction in summed squared deviation.
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

/// Best variance-reducing split of `idx` on one feature, honoring `min_leaf`.
fn best_split_on(
    x: ArrayView2<f64>,
    y: &[f64],
    idx: &[usize],
    feature: usize,
    min_leaf: usize,
) -> Option<(f64, f64)> {
    let mut order: Vec<usize> = idx.to_vec();
    order.sort_by(|&a, &b| x[[a, feature]].total_cmp(&x[[b, feature]]));
    let n = order.len();
    let total: f64 = order.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
    let parent_sse = total_sq - total * total / n as f64;

    let (mut left_sum, mut left_sq) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for pos in 0..n - 1 {
        let yi = y[order[pos]];
        left_sum += yi;
        left_sq += yi * yi;
        let n_left = pos + 1;
        let n_right = n - n_left;
        if n_left < min_leaf || n_right < min_leaf {
            continue;
        }
        let here = x[[order[pos], feature]];
        let next = x[[order[pos + 1], feature]];
        if here == next {
            continue;
        }
        let right_sum = total - left_sum;
        let right_sq = total_sq - left_sq;
        let sse = (left_sq - left_sum * left_sum / n_left as f64)
            + (right_sq - right_sum * right_sum / n_right as f64);
        let gain = parent_sse - sse;
        if best.is_none_or(|(g, _)| gain > g) {
            best = Some((gain, 0.5 * (here + next)));
        }
    }
    best
}

struct TreeBuilder<'a, R> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    max_features: usize,
    total_samples: f64,
    importances: Vec<f64>,
    nodes: Vec<Node>,
    rng: R,
}

impl<R: Rng> TreeBuilder<'_, R> {
    fn find_split(&mut self, idx: &[usize]) -> Option<BestSplit> {
        let d = self.x.ncols();
        let features = rand::seq::index::sample(&mut self.rng, d, self.max_features.min(d));
        let mut best: Option<(usize, f64, f64)> = None;
        // Visit sampled features in index order so ties resolve to the lowest.
        let mut features = features.into_vec();
        features.sort_unstable();
        for f in features {
            if let Some((gain, threshold)) = best_split_on(self.x, self.y, idx, f, self.min_leaf) {
                if best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((f, threshold, gain));
                }
            }
        }
        let (feature, threshold, gain) = best?;
        if gain <= 1e-12 * idx.len() as f64 {
            return None;
        }
        let (left, right) = idx
            .iter()
            .partition(|&&i| self.x[[i, feature]] <= threshold);
        Some(BestSplit {
            feature,
            threshold,
            gain,
            left,
            right,
        })
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (mean, var) = mean_and_variance(self.y, &idx);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: mean,
            samples: idx.len(),
            impurity: var,
        });
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf || var <= 0.0 {
            return id;
        }
        let Some(split) = self.find_split(&idx) else {
            return id;
        };
        // (n_node / n_total) * variance reduction == SSE reduction / n_total
        self.importances[split.feature] += split.gain / self.total_samples;
        let samples = idx.len();
        let left = self.build(split.left, depth + 1);
        let right = self.build(split.right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            samples,
            impurity: var,
        };
        id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<RegressionTree>,
    tree_seeds: Vec<u64>,
    n_features: usize,
    /// Raw impurity importances averaged over trees.
    importances: Vec<f64>,
}

impl Forest {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn tree_seeds(&self) -> &[u64] {
        &self.tree_seeds
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn raw_importances(&self) -> &[f64] {
        &self.importances
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Domain(format!(
                "input has {} features, forest expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Importances scaled to sum to one; uniform when every importance is zero.
    pub fn normalized_importances(&self) -> Array1<f64> {
        normalize_importances(&self.importances)
    }
}

pub fn normalize_importances(raw: &[f64]) -> Array1<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.iter().map(|v| v / total).collect()
    } else {
        Array1::from_elem(raw.len(), 1.0 / raw.len() as f64)
    }
}

/// Fits `n_trees` trees, each on its own bootstrap resample, considering
/// `ceil(sqrt(d))` random features per split.
pub fn fit_forest<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: &[f64],
    config: &ForestConfig,
    rng: &mut R,
) -> Result<Forest> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::Domain(format!("{n} rows but {} targets", y.len())));
    }
    if d == 0 {
        return Err(Error::Domain("no input features".into()));
    }
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(Error::config("forest", "n_trees and min_leaf must be >= 1"));
    }
    if n < 2 * config.min_leaf {
        return Err(Error::InsufficientData {
            needed: 2 * config.min_leaf,
            available: n,
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in forest training data".into()));
    }
    let max_features = ((d as f64).sqrt().ceil() as usize).max(1);
    let tree_seeds: Vec<u64> = (0..config.n_trees).map(|_| rng.next_u64()).collect();

    let mut trees = Vec::with_capacity(config.n_trees);
    let mut importances = vec![0.0; d];
    for &seed in &tree_seeds {
        let mut tree_rng = rng::seeded(seed);
        let sample: Vec<usize> = (0..n).map(|_| tree_rng.random_range(0..n)).collect();
        let mut builder = TreeBuilder {
            x,
            y,
            max_depth: config.max_depth,
            min_leaf: config.min_leaf,
            max_features,
            total_samples: n as f64,
            importances: vec![0.0; d],
            nodes: Vec::new(),
            rng: tree_rng,
        };
        builder.build(sample, 0);
        for (acc, v) in importances.iter_mut().zip(&builder.importances) {
            *acc += v;
        }
        trees.push(RegressionTree {
            nodes: builder.nodes,
        });
    }
    for v in &mut importances {
        *v /= config.n_trees as f64;
    }
    Ok(Forest {
        trees,
        tree_seeds,
        n_features: d,
        importances,
    })
}

/// Loss weights over the 11-dim transition layout
/// `[s (4), a, s' (4), r, done]`.
///
/// One forest per next-state component is fit on `(s, a)`. Their normalized
/// input importances are averaged and renormalized; state weights are
/// mirrored onto `s'`, reward and done get the mean state weight, and the
/// whole vector is renormalized.
pub fn transition_feature_weights<R: Rng + ?Sized>(
    memory: &ReplayMemory,
    num_actions: usize,
    config: &ForestConfig,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let n = memory.len();
    if n < config.min_samples {
        return Err(Error::InsufficientData {
            needed: config.min_samples,
            available: n,
        });
    }
    let action_scale = (num_actions.max(2) - 1) as f64;
    let mut x = Array2::zeros((n, 5));
    let mut targets = Array2::zeros((n, 4));
    for (i, t) in memory.iter().enumerate() {
        let s = t.s.to_array();
        for j in 0..4 {
            x[[i, j]] = s[j];
        }
        x[[i, 4]] = t.a as f64 / action_scale;
        targets.row_mut(i).assign(&Array1::from(t.s_next.to_array().to_vec()));
    }

    let mut input_weights = Array1::<f64>::zeros(5);
    for j in 0..4 {
        let y = targets.column(j).to_vec();
        let forest = fit_forest(x.view(), &y, config, rng)?;
        input_weights += &forest.normalized_importances();
    }
    let input_weights = normalize_importances(input_weights.as_slice().unwrap());

    let state_mean = input_weights.iter().take(4).sum::<f64>() / 4.0;
    let mut full = Vec::with_capacity(11);
    full.extend(input_weights.iter().take(4));
    full.push(input_weights[4]);
    full.extend(input_weights.iter().take(4));
    full.push(state_mean);
    full.push(state_mean);
    Ok(normalize_importances(&full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal, Uniform};

    fn uniform_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| u.sample(&mut r))
    }

    #[test]
    fn constant_target_gives_single_leaves() {
        let x = uniform_matrix(40, 3, 1);
        let y = vec![2.5; 40];
        let f = fit_forest(x.view(), &y, &ForestConfig::default(), &mut rng::seeded(0)).unwrap();
        for t in f.trees() {
            assert_eq!(t.nodes().len(), 1);
            assert!(matches!(t.root(), Node::Leaf { value, .. } if *value == 2.5));
        }
        assert_eq!(f.predict(&[0.0, 0.0, 0.0]).unwrap(), 2.5);
        let lambda = f.normalized_importances();
        for v in lambda.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_inputs_and_target_are_valid() {
        let x = Array2::from_elem((20, 2), 1.0);
        let y = vec![0.0; 20];
        let f = fit_forest(x.view(), &y, &ForestConfig::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(f.trees().len(), 50);
    }

    /// Exhaustive enumeration of every (feature, threshold) split.
    fn brute_force_best_feature(x: &Array2<f64>, y: &[f64], min_leaf: usize) -> usize {
        let n = y.len();
        let sse = |ix: &[usize]| {
            let m = ix.iter().map(|&i| y[i]).sum::<f64>() / ix.len() as f64;
            ix.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
        };
        let all: Vec<usize> = (0..n).collect();
        let parent = sse(&all);
        let mut best = (0, f64::NEG_INFINITY);
        for f in 0..x.ncols() {
            for k in 0..n {
                let thr = x[[k, f]];
                let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[[i, f]] <= thr);
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let gain = parent - sse(&l) - sse(&r);
                if gain > best.1 {
                    best = (f, gain);
                }
            }
        }
        best.0
    }

    #[test]
    fn step_target_splits_root_on_first_feature() {
        let x = uniform_matrix(60, 2, 3);
        let y: Vec<f64> = x.column(0).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(brute_force_best_feature(&x, &y, 5), 0);
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            ..ForestConfig::default()
        };
        let f = fit_forest(x.view(), &y, &cfg, &mut rng::seeded(2)).unwrap();
        match f.trees()[0].root() {
            Node::Split { feature, .. } => assert_eq!(*feature, 0),
            other => panic!("root should split: {other:?}"),
        }
        assert_eq!(f.trees()[0].depth(), 1);
    }

    #[test]
    fn same_seed_same_forest() {
        let x = uniform_matrix(80, 4, 5);
        let y: Vec<f64> = x.rows().into_iter().map(|r| r[0] * 2.0 - r[2]).collect();
        let cfg = ForestConfig::default();
        let a = fit_forest(x.view(), &y, &cfg, &mut rng::seeded(7)).unwrap();
        let b = fit_forest(x.view(), &y, &cfg, &mut rng::seeded(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_target_fit_quality_and_range() {
        let x = uniform_matrix(200, 2, 9);
        let y: Vec<f64> = x.column(0).iter().map(|v| 3.0 * v).collect();
        let cfg = ForestConfig {
            max_depth: 6,
            ..ForestConfig::default()
        };
        let f = fit_forest(x.view(), &y, &cfg, &mut rng::seeded(1)).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (lo, hi) = y.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (row, &target) in x.rows().into_iter().zip(&y) {
            let p = f.predict(row.as_slice().unwrap()).unwrap();
            assert!(p >= lo && p <= hi);
            ss_res += (p - target).powi(2);
            ss_tot += (target - mean).powi(2);
        }
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.9, "R^2 = {r2}");
    }

    #[test]
    fn relevant_feature_dominates_importance() {
        let x = uniform_matrix(200, 2, 4);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut r = rng::seeded(8);
        let y: Vec<f64> = x
            .column(0)
            .iter()
            .map(|v| 3.0 * v + 0.01 * noise.sample(&mut r))
            .collect();
        let f = fit_forest(x.view(), &y, &ForestConfig::default(), &mut rng::seeded(0)).unwrap();
        let lambda = f.normalized_importances();
        assert!((lambda.sum() - 1.0).abs() < 1e-12);
        assert!(lambda[0] > 0.8, "{lambda}");
    }

    #[test]
    fn predict_dimension_mismatch() {
        let x = uniform_matrix(20, 2, 4);
        let y = vec![1.0; 20];
        let f = fit_forest(x.view(), &y, &ForestConfig::default(), &mut rng::seeded(0)).unwrap();
        assert!(matches!(f.predict(&[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn too_few_rows() {
        let x = uniform_matrix(9, 2, 4);
        let y = vec![1.0; 9];
        assert!(matches!(
            fit_forest(x.view(), &y, &ForestConfig::default(), &mut rng::seeded(0)),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn node_counts_are_consistent() {
        let x = uniform_matrix(150, 3, 12);
        let y: Vec<f64> = x.rows().into_iter().map(|r| r[0].sin() + r[1] * r[2]).collect();
        let cfg = ForestConfig::default();
        let f = fit_forest(x.view(), &y, &cfg, &mut rng::seeded(0)).unwrap();
        for t in f.trees() {
            assert_eq!(t.root().samples(), 150);
            assert!(t.depth() <= cfg.max_depth);
            for node in t.nodes() {
                if let Node::Split { left, right, samples, .. } = node {
                    let nodes = t.nodes();
                    assert_eq!(nodes[*left].samples() + nodes[*right].samples(), *samples);
                }
            }
        }
    }
}
