//! Two-branch Res-Dense classifier.
//!
//! A residual branch and a densely connected branch run side by side on the
//! same input. The residual output is projected by a convolution onto the
//! dense output's shape, the two maps are added, and the sum is globally
//! average-pooled into a linear classifier.

pub mod blocks;
mod features;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Graph, Mode, PoolKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use blocks::{DenseBlock, DenseLayer, DenseTrace, Injection, ResidualBlock, Transition};
pub use features::{export_features, feature_grid};
pub use layers::{Branch, Forward, Layer, LayerBuilder, LayerKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResStage {
    pub num_blocks: usize,
    pub channels: usize,
    pub first_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResBranchConfig {
    pub stem_channels: usize,
    pub stages: Vec<ResStage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    /// Layers per block (L).
    pub layers: usize,
    /// Channels added per layer (k).
    pub growth_rate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseBranchConfig {
    pub stem_channels: usize,
    pub blocks: Vec<DenseBlockConfig>,
    pub transition_compression: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub kernel: usize,
    /// `None` derives the stride from the ratio of branch spatial extents.
    #[serde(default)]
    pub stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[height, width]`.
    pub input_size: [usize; 2],
    pub input_channels: usize,
    pub res: ResBranchConfig,
    pub dense: DenseBranchConfig,
    pub projection: ProjectionConfig,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration used for desk-scale training: two residual stages
    /// `(1 block, 8 ch, stride 1)`, `(1 block, 16 ch, stride 2)` and one dense
    /// block with `L = 2`, `k = 4`, fused through an auto-strided 1×1
    /// projection.
    pub fn micro(input_size: usize) -> Self {
        Self {
            input_size: [input_size, input_size],
            input_channels: 1,
            res: ResBranchConfig {
                stem_channels: 8,
                stages: vec![
                    ResStage {
                        num_blocks: 1,
                        channels: 8,
                        first_stride: 1,
                    },
                    ResStage {
                        num_blocks: 1,
                        channels: 16,
                        first_stride: 2,
                    },
                ],
            },
            dense: DenseBranchConfig {
                stem_channels: 8,
                blocks: vec![DenseBlockConfig {
                    layers: 2,
                    growth_rate: 4,
                }],
                transition_compression: 0.5,
            },
            projection: ProjectionConfig {
                kernel: 1,
                stride: None,
            },
            num_classes: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || self.input_channels == 0 {
            return Err(Error::config("input size and channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.res.stem_channels == 0 || self.dense.stem_channels == 0 {
            return Err(Error::config("stem channels must be positive"));
        }
        if self.res.stages.is_empty() {
            return Err(Error::config("residual branch needs at least one stage"));
        }
        for (i, s) in self.res.stages.iter().enumerate() {
            if s.num_blocks == 0 || s.channels == 0 || !(1..=2).contains(&s.first_stride) {
                return Err(Error::config(format!(
                    "residual stage {i} invalid: {s:?} (needs ≥1 block, channels > 0, stride 1 or 2)"
                )));
            }
        }
        if self.dense.blocks.is_empty() {
            return Err(Error::config("dense branch needs at least one block"));
        }
        for (i, b) in self.dense.blocks.iter().enumerate() {
            if b.layers == 0 || b.growth_rate == 0 {
                return Err(Error::config(format!(
                    "dense block {i} invalid: {b:?} (needs L ≥ 1, k ≥ 1)"
                )));
            }
        }
        let c = self.dense.transition_compression;
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::config(format!(
                "transition_compression must lie in (0, 1], got {c}"
            )));
        }
        if self.projection.kernel == 0 || self.projection.stride == Some(0) {
            return Err(Error::config("projection kernel and stride must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum DenseStage {
    Block(DenseBlock),
    Transition(Transition),
}

/// Layer wiring of a built model. Indices refer to [`Model::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    res_stem: (usize, usize),
    res_blocks: Vec<ResidualBlock>,
    dense_stem: (usize, usize),
    dense_stages: Vec<DenseStage>,
    dense_final_bn: usize,
    pub projection: usize,
    pub classifier: usize,
    pub projection_stride: usize,
    /// `[C, H, W]` of the residual branch output.
    pub res_shape: [usize; 3],
    /// `[C, H, W]` of the dense branch output, which is also the fused shape.
    pub dense_shape: [usize; 3],
}

impl Architecture {
    pub fn dense_blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.dense_stages.iter().filter_map(|s| match s {
            DenseStage::Block(b) => Some(b),
            DenseStage::Transition(_) => None,
        })
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        &self.res_blocks
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    (kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    arch: Architecture,
}

/// Result of one forward pass, owning its graph.
pub struct Pass<T> {
    pub graph: Graph<T>,
    pub params: Vec<Vec<Var>>,
    pub logits: Var,
    pub fused: Var,
    pub res_out: Var,
    pub dense_out: Var,
    pub bn_updates: Vec<(usize, BatchNormState<T>)>,
}

impl<T: Scalar> Pass<T> {
    /// Gradient buffers of a layer's parameters after `backward`, `None` for
    /// parameters that did not require one.
    pub fn layer_grads(&self, layer: usize) -> Vec<Option<&[T]>> {
        self.params[layer].iter().map(|&v| self.graph.grad(v)).collect()
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let [h, w] = config.input_size;
        let mut b = LayerBuilder::new(config.seed);

        // Residual branch: conv3x3-BN-ReLU stem, then stages of basic blocks.
        let rs = config.res.stem_channels;
        let res_stem = (
            b.conv("res.stem.conv", Branch::Residual, config.input_channels, rs, 3, 1, 1, false)?,
            b.batch_norm("res.stem.bn", Branch::Residual, rs),
        );
        let mut res_blocks = Vec::new();
        let (mut c, mut rh, mut rw) = (rs, h, w);
        for (si, stage) in config.res.stages.iter().enumerate() {
            for bi in 0..stage.num_blocks {
                let stride = if bi == 0 { stage.first_stride } else { 1 };
                let block = ResidualBlock::build(&mut b, &format!("res.stage{si}.block{bi}"), c, stage.channels, stride)?;
                rh = conv_out(rh, 3, stride, 1).expect("3x3 pad-1 conv fits any extent");
                rw = conv_out(rw, 3, stride, 1).expect("3x3 pad-1 conv fits any extent");
                c = stage.channels;
                res_blocks.push(block);
            }
        }
        let res_shape = [c, rh, rw];

        // Dense branch: conv3x3-BN-ReLU-maxpool2 stem, blocks with transitions
        // between them, and a closing BN-ReLU.
        let ds = config.dense.stem_channels;
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "input {h}×{w} too small for the dense stem pooling"
            )));
        }
        let dense_stem = (
            b.conv("dense.stem.conv", Branch::Dense, config.input_channels, ds, 3, 1, 1, false)?,
            b.batch_norm("dense.stem.bn", Branch::Dense, ds),
        );
        let (mut dc, mut dh, mut dw) = (ds, h / 2, w / 2);
        let mut dense_stages = Vec::new();
        let nblocks = config.dense.blocks.len();
        for (bi, bc) in config.dense.blocks.iter().enumerate() {
            let block = DenseBlock::build(&mut b, &format!("dense.block{bi}"), dc, bc.layers, bc.growth_rate)?;
            dc = block.out_channels();
            dense_stages.push(DenseStage::Block(block));
            if bi + 1 < nblocks {
                if dh < 2 || dw < 2 {
                    return Err(Error::config(format!(
                        "dense transition {bi} cannot pool a {dh}×{dw} map"
                    )));
                }
                let t = Transition::build(&mut b, &format!("dense.transition{bi}"), dc, config.dense.transition_compression)?;
                dc = t.out_channels;
                dh /= 2;
                dw /= 2;
                dense_stages.push(DenseStage::Transition(t));
            }
        }
        let dense_final_bn = b.batch_norm("dense.final.bn", Branch::Dense, dc);
        let dense_shape = [dc, dh, dw];

        // Projection of the residual map onto the dense map's shape.
        let k = config.projection.kernel;
        let stride = match config.projection.stride {
            Some(s) => s,
            None => {
                if rh % dh != 0 || rw % dw != 0 || rh / dh != rw / dw || rh < dh {
                    return Err(Error::config(format!(
                        "cannot reconcile residual output {res_shape:?} with dense output {dense_shape:?}: \
                         spatial ratio is not a common positive integer"
                    )));
                }
                rh / dh
            }
        };
        let pad = k / 2;
        let projected = (conv_out(rh, k, stride, pad), conv_out(rw, k, stride, pad));
        if projected != (Some(dh), Some(dw)) {
            return Err(Error::config(format!(
                "projection {k}×{k}/{stride} maps residual output {res_shape:?} to {projected:?}, \
                 not the dense output {dense_shape:?}"
            )));
        }
        let projection = b.conv("fusion.projection", Branch::Projection, res_shape[0], dc, k, stride, pad, true)?;
        let classifier = b.dense("head.classifier", Branch::Head, dc, config.num_classes);

        Ok(Self {
            config: config.clone(),
            layers: b.layers,
            arch: Architecture {
                res_stem,
                res_blocks,
                dense_stem,
                dense_stages,
                dense_final_bn,
                projection,
                classifier,
                projection_stride: stride,
                res_shape,
                dense_shape,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// `[C, H, W]` of the fused map fed to global average pooling.
    pub fn fused_shape(&self) -> [usize; 3] {
        self.arch.dense_shape
    }

    pub fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4("model input")?;
        let [eh, ew] = self.config.input_size;
        if (c, h, w) != (self.config.input_channels, eh, ew) {
            return Err(Error::dim(format!(
                "model expects N×{}×{eh}×{ew} input, got {:?}",
                self.config.input_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Runs both branches, the fusion and the classifier. The model itself is
    /// not modified; train-mode batch-norm statistics are returned in
    /// [`Pass::bn_updates`].
    pub fn forward(&self, batch: Tensor<T>, mode: Mode) -> Result<Pass<T>> {
        self.check_input(&batch)?;
        let mut ctx = Forward::new(&self.layers, mode);
        let x = ctx.graph.constant(batch);
        let (res_out, dense_out) = self.branches(&mut ctx, x)?;
        let projected = ctx.conv(self.arch.projection, res_out)?;
        let fused = ctx.graph.add(projected, dense_out)?;
        let pooled = ctx.graph.global_avg_pool(fused)?;
        let logits = ctx.dense(self.arch.classifier, pooled)?;
        let (graph, params, bn_updates) = ctx.finish();
        Ok(Pass {
            graph,
            params,
            logits,
            fused,
            res_out,
            dense_out,
            bn_updates,
        })
    }

    fn branches(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<(Var, Var)> {
        let a = &self.arch;
        let mut r = ctx.conv(a.res_stem.0, x)?;
        r = ctx.batch_norm(a.res_stem.1, r)?;
        r = ctx.relu(r)?;
        for block in &a.res_blocks {
            r = block.forward(ctx, r)?;
        }

        let mut d = ctx.conv(a.dense_stem.0, x)?;
        d = ctx.batch_norm(a.dense_stem.1, d)?;
        d = ctx.relu(d)?;
        d = ctx.graph.pool2d(d, PoolKind::Max, 2, 2)?;
        for stage in &a.dense_stages {
            d = match stage {
                DenseStage::Block(b) => b.forward(ctx, d)?,
                DenseStage::Transition(t) => t.forward(ctx, d)?,
            };
        }
        d = ctx.batch_norm(a.dense_final_bn, d)?;
        d = ctx.relu(d)?;
        Ok((r, d))
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running statistics of every batch-norm layer.
    pub fn forward_train(&mut self, batch: Tensor<T>) -> Result<Pass<T>> {
        let mut pass = self.forward(batch, Mode::Train)?;
        for (layer, state) in pass.bn_updates.drain(..) {
            self.layers[layer].bn = Some(state);
        }
        Ok(pass)
    }

    /// Inference-mode logits, `N × num_classes`.
    pub fn logits(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let pass = self.forward(batch, Mode::Infer)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    pub fn set_trainable(&mut self, layer: usize, trainable: bool) {
        self.layers[layer].trainable = trainable;
    }

    /// Replaces every parameter and running statistic from another model of
    /// the same configuration.
    pub fn load_layers(&mut self, layers: Vec<Layer<T>>) -> Result<()> {
        if layers.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "expected {} layers, got {}",
                self.layers.len(),
                layers.len()
            )));
        }
        for (have, new) in self.layers.iter().zip(&layers) {
            let same = have.name == new.name
                && have.kind == new.kind
                && have.params.len() == new.params.len()
                && have.params.iter().zip(&new.params).all(|(a, b)| a.shape() == b.shape());
            if !same {
                return Err(Error::dim(format!("layer {} does not match the architecture", new.name)));
            }
        }
        self.layers = layers;
        Ok(())
    }
}
