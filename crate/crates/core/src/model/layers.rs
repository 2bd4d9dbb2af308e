use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Residual,
    Dense,
    Projection,
    Head,
}

impl Branch {
    /// Backbone layers, as opposed to the fusion head.
    pub fn is_backbone(self) -> bool {
        matches!(self, Branch::Residual | Branch::Dense)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { stride: usize, padding: usize },
    BatchNorm,
    Dense,
}

/// One parameterized layer. Parameter order: conv `[weight, bias?]`,
/// batch-norm `[gamma, beta]`, dense `[weight, bias]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind,
    pub branch: Branch,
    pub params: Vec<Tensor<T>>,
    pub bn: Option<BatchNormState<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Layer<T> {
    pub fn param_names(&self) -> Vec<&'static str> {
        match self.kind {
            LayerKind::Conv { .. } if self.params.len() == 2 => vec!["weight", "bias"],
            LayerKind::Conv { .. } => vec!["weight"],
            LayerKind::BatchNorm => vec!["gamma", "beta"],
            LayerKind::Dense => vec!["weight", "bias"],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }
}

/// Appends freshly initialized layers in topological order.
///
/// Weights are He-normal (`std = sqrt(2 / fan_in)`), drawn as `f64` from a
/// seeded ChaCha stream and then cast, so a seed gives the same values at
/// every precision up to rounding.
pub struct LayerBuilder<T> {
    pub layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> LayerBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn he_normal(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("builder shapes are valid")
    }

    fn push(&mut self, layer: Layer<T>) -> usize {
        self.layers.push(layer);
        self.layers.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        branch: Branch,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<usize> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::config("conv layers need positive channels and kernel"));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be positive"));
        }
        let weight = self.he_normal(
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        let mut params = vec![weight];
        if bias {
            params.push(Tensor::zeros(vec![out_channels]));
        }
        Ok(self.push(Layer {
            name: name.into(),
            kind: LayerKind::Conv { stride, padding },
            branch,
            params,
            bn: None,
            trainable: true,
        }))
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, branch: Branch, channels: usize) -> usize {
        self.push(Layer {
            name: name.into(),
            kind: LayerKind::BatchNorm,
            branch,
            params: vec![Tensor::ones(vec![channels]), Tensor::zeros(vec![channels])],
            bn: Some(BatchNormState::new(channels)),
            trainable: true,
        })
    }

    pub fn dense(&mut self, name: impl Into<String>, branch: Branch, features: usize, outputs: usize) -> usize {
        let weight = self.he_normal(vec![features, outputs], features);
        self.push(Layer {
            name: name.into(),
            kind: LayerKind::Dense,
            branch,
            params: vec![weight, Tensor::zeros(vec![outputs])],
            bn: None,
            trainable: true,
        })
    }
}

/// Forward-pass context: binds every layer's parameters as graph leaves and
/// collects batch-norm statistic updates without mutating the layers.
pub struct Forward<'a, T> {
    pub graph: Graph<T>,
    layers: &'a [Layer<T>],
    params: Vec<Vec<Var>>,
    mode: Mode,
    bn_updates: Vec<(usize, BatchNormState<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// In `Mode::Train`, parameters of trainable layers require gradients and
    /// every batch-norm layer, frozen or not, uses batch statistics. Freezing
    /// only withholds gradients from gamma and beta.
    pub fn new(layers: &'a [Layer<T>], mode: Mode) -> Self {
        let mut graph = Graph::new();
        let params = layers
            .iter()
            .map(|layer| {
                let grad = mode == Mode::Train && layer.trainable;
                layer
                    .params
                    .iter()
                    .map(|p| graph.leaf(p.clone().with_grad(grad)))
                    .collect()
            })
            .collect();
        Self {
            graph,
            layers,
            params,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param_vars(&self, layer: usize) -> &[Var] {
        &self.params[layer]
    }

    pub fn conv(&mut self, layer: usize, x: Var) -> Result<Var> {
        let LayerKind::Conv { stride, padding } = self.layers[layer].kind else {
            return Err(Error::Graph(format!("layer {layer} is not a convolution")));
        };
        let p = &self.params[layer];
        self.graph.conv2d(x, p[0], p.get(1).copied(), stride, padding)
    }

    pub fn batch_norm(&mut self, layer: usize, x: Var) -> Result<Var> {
        let l = &self.layers[layer];
        let mut state = l
            .bn
            .clone()
            .ok_or_else(|| Error::Graph(format!("layer {layer} is not a batch norm")))?;
        let mode = self.mode;
        let p = &self.params[layer];
        let out = self.graph.batch_norm(x, p[0], p[1], &mut state, mode)?;
        if mode == Mode::Train {
            self.bn_updates.push((layer, state));
        }
        Ok(out)
    }

    pub fn dense(&mut self, layer: usize, x: Var) -> Result<Var> {
        if self.layers[layer].kind != LayerKind::Dense {
            return Err(Error::Graph(format!("layer {layer} is not a dense layer")));
        }
        let p = &self.params[layer];
        self.graph.dense(x, p[0], p[1])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.graph.relu(x)
    }

    pub fn finish(self) -> (Graph<T>, Vec<Vec<Var>>, Vec<(usize, BatchNormState<T>)>) {
        (self.graph, self.params, self.bn_updates)
    }
}
