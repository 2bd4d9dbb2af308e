//! Central finite-difference verification of analytic gradients at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{BatchNormState, Graph, Mode, PoolKind, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Anything that can evaluate a scalar loss and claim its gradient.
pub trait GradientSource {
    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// A loss built on an autodiff [`Graph`] from leaf inputs.
pub struct GraphLoss<F>(pub F);

impl<F> GradientSource for GraphLoss<F>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.0)(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.0)(&mut g, &vars)?;
        g.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Error measure `|a − n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the claimed gradient against central differences on the
/// selected coordinates (`None` checks every element of every input).
pub fn check<S: GradientSource>(
    name: &str,
    seed: u64,
    source: &S,
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    tolerance: f64,
) -> Result<CheckReport> {
    let analytic = source.gradient(inputs)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut work = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + STEP;
        let up = source.loss(&work)?;
        work[i].data_mut()[j] = orig - STEP;
        let down = source.loss(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        max_rel = max_rel.max(relative_error(analytic[i][j], numeric));
    }
    Ok(CheckReport {
        name: name.to_owned(),
        seed,
        checked: coords.len(),
        max_rel_err: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Projects an op output to a scalar with fixed random weights so every
/// output element carries a distinct upstream gradient.
fn project(weights: Vec<f64>) -> impl Fn(&mut Graph<f64>, Var) -> Result<Var> {
    move |g, v| g.weighted_sum(v, weights.clone())
}

/// `(name, inputs, loss builder)` for every differentiable op.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Builder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Builder)> = Vec::new();
    let w = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };

    let inputs = vec![
        uniform(&mut rng, &[2, 3, 5, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
    ];
    let p = project(w(&mut rng, 2 * 4 * 3 * 2));
    cases.push((
        "conv2d",
        inputs,
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            p(g, y)
        }),
    ));

    let inputs = vec![uniform(&mut rng, &[2, 3], -1.0, 1.0), uniform(&mut rng, &[2, 3], -1.0, 1.0)];
    let p = project(w(&mut rng, 6));
    cases.push((
        "add",
        inputs,
        Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            p(g, y)
        }),
    ));

    let inputs = vec![uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)];
    let p = project(w(&mut rng, 2 * 5 * 9));
    cases.push((
        "concat_channels",
        inputs,
        Box::new(move |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            p(g, y)
        }),
    ));

    let inputs = vec![uniform(&mut rng, &[2, 5, 2, 2], -1.0, 1.0)];
    let p = project(w(&mut rng, 2 * 2 * 4));
    cases.push((
        "slice_channels",
        inputs,
        Box::new(move |g, v| {
            let y = g.slice_channels(v[0], 1, 2)?;
            p(g, y)
        }),
    ));

    let inputs = vec![away_from_zero(&mut rng, &[3, 7])];
    let p = project(w(&mut rng, 21));
    cases.push((
        "relu",
        inputs,
        Box::new(move |g, v| {
            let y = g.relu(v[0])?;
            p(g, y)
        }),
    ));

    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_infer", Mode::Infer)] {
        let inputs = vec![
            uniform(&mut rng, &[3, 2, 2, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], 0.5, 1.5),
            uniform(&mut rng, &[2], -0.5, 0.5),
        ];
        let mean = w(&mut rng, 2);
        let var: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..2.0)).collect();
        let p = project(w(&mut rng, 36));
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let mut state = BatchNormState::new(2);
                state.running_mean = mean.clone();
                state.running_var = var.clone();
                let y = g.batch_norm(v[0], v[1], v[2], &mut state, mode)?;
                p(g, y)
            }),
        ));
    }

    for (name, kind) in [("max_pool2d", PoolKind::Max), ("avg_pool2d", PoolKind::Avg)] {
        let inputs = vec![uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0)];
        let p = project(w(&mut rng, 2 * 2 * 2 * 2));
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = g.pool2d(v[0], kind, 2, 2)?;
                p(g, y)
            }),
        ));
    }

    let inputs = vec![uniform(&mut rng, &[2, 3, 4, 2], -1.0, 1.0)];
    let p = project(w(&mut rng, 6));
    cases.push((
        "global_avg_pool",
        inputs,
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            p(g, y)
        }),
    ));

    let inputs = vec![
        uniform(&mut rng, &[3, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 2], -1.0, 1.0),
        uniform(&mut rng, &[2], -1.0, 1.0),
    ];
    let p = project(w(&mut rng, 6));
    cases.push((
        "dense",
        inputs,
        Box::new(move |g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            p(g, y)
        }),
    ));

    let inputs = vec![uniform(&mut rng, &[3, 4], -2.0, 2.0)];
    let p = project(w(&mut rng, 12));
    cases.push((
        "softmax",
        inputs,
        Box::new(move |g, v| {
            let y = g.softmax(v[0])?;
            p(g, y)
        }),
    ));

    let inputs = vec![uniform(&mut rng, &[4, 3], -2.0, 2.0)];
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    cases.push((
        "sparse_categorical_cross_entropy",
        inputs,
        Box::new(move |g, v| g.sparse_categorical_cross_entropy(v[0], &labels)),
    ));

    let inputs = vec![uniform(&mut rng, &[2, 3], -1.0, 1.0)];
    cases.push(("sum", inputs, Box::new(|g, v| g.sum(v[0]))));

    cases
}

pub fn check_ops(seed: u64, tolerance: f64) -> Result<Vec<CheckReport>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, build)| check(name, seed, &GraphLoss(build), &inputs, None, tolerance))
        .collect()
}

/// Train-mode cross-entropy of a whole model with its parameters exposed as
/// flat inputs, one per parameter tensor.
struct ModelLoss {
    model: Model<f64>,
    batch: Tensor<f64>,
    labels: Vec<usize>,
}

impl ModelLoss {
    fn with_params(&self, inputs: &[Tensor<f64>]) -> Model<f64> {
        let mut m = self.model.clone();
        let mut it = inputs.iter();
        for layer in m.layers_mut() {
            for p in layer.params.iter_mut() {
                *p = it.next().expect("one input per parameter").clone();
            }
        }
        m
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        self.model
            .layers()
            .iter()
            .flat_map(|l| l.params.iter().cloned())
            .collect()
    }
}

impl GradientSource for ModelLoss {
    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let m = self.with_params(inputs);
        let mut pass = m.forward(self.batch.clone(), Mode::Train)?;
        let loss = pass.graph.sparse_categorical_cross_entropy(pass.logits, &self.labels)?;
        Ok(pass.graph.value(loss).data()[0])
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = self.with_params(inputs);
        let mut pass = m.forward(self.batch.clone(), Mode::Train)?;
        let loss = pass.graph.sparse_categorical_cross_entropy(pass.logits, &self.labels)?;
        pass.graph.backward(loss)?;
        let mut out = Vec::new();
        for l in 0..m.num_layers() {
            for (g, p) in pass.layer_grads(l).into_iter().zip(&m.layers()[l].params) {
                out.push(g.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]));
            }
        }
        Ok(out)
    }
}

/// Samples up to `per_kind` parameter coordinates from each layer kind
/// (convolution, batch norm, dense) of a small model and checks them.
pub fn check_model(config: &ModelConfig, seed: u64, per_kind: usize, tolerance: f64) -> Result<Vec<CheckReport>> {
    let model = Model::<f64>::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = config.input_size;
    let n = 4;
    let batch = uniform(&mut rng, &[n, config.input_channels, h, w], -1.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    let source = ModelLoss {
        model,
        batch,
        labels,
    };
    let inputs = source.params();

    let mut by_kind: [(&str, Vec<(usize, usize)>); 3] = [("model_conv", vec![]), ("model_batch_norm", vec![]), ("model_dense", vec![])];
    let mut flat = 0;
    for layer in source.model.layers() {
        let slot = match layer.kind {
            crate::model::LayerKind::Conv { .. } => 0,
            crate::model::LayerKind::BatchNorm => 1,
            crate::model::LayerKind::Dense => 2,
        };
        for p in &layer.params {
            for j in 0..p.numel() {
                by_kind[slot].1.push((flat, j));
            }
            flat += 1;
        }
    }
    let mut reports = Vec::new();
    for (name, mut coords) in by_kind {
        if coords.is_empty() {
            return Err(Error::config(format!("model has no parameters of kind {name}")));
        }
        // Partial Fisher-Yates: first `per_kind` entries become the sample.
        let take = per_kind.min(coords.len());
        for i in 0..take {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(take);
        reports.push(check(name, seed, &source, &inputs, Some(&coords), tolerance)?);
    }
    Ok(reports)
}

/// Small configuration for model-level checks.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::micro(8);
    cfg.res.stem_channels = 3;
    cfg.res.stages[0].channels = 3;
    cfg.res.stages[1].channels = 4;
    cfg.dense.stem_channels = 3;
    cfg.dense.blocks[0].growth_rate = 3;
    cfg.seed = seed;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Correct loss, gradient off by 50%.
    struct Broken;

    impl GradientSource for Broken {
        fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
            Ok(inputs[0].data().iter().map(|v| v * v).sum())
        }
        fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![inputs[0].data().iter().map(|v| 3.0 * v).collect()])
        }
    }

    #[test]
    fn harness_flags_a_wrong_gradient() {
        let x = Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let r = check("broken", 0, &Broken, &[x], None, 1e-4).unwrap();
        assert!(!r.passed);
        // |3x - 2x| / max(1, |2x|) peaks at x = 1 with value 0.5.
        assert!((r.max_rel_err - 0.5).abs() < 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn reports_are_reproducible() {
        assert_eq!(check_ops(3, 1e-4).unwrap(), check_ops(3, 1e-4).unwrap());
    }
}
