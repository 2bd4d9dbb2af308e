use crate::autodiff::{PoolKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::layers::{Branch, Forward, LayerBuilder};

/// Post-activation basic block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
///
/// The shortcut is the identity when the block preserves shape, otherwise a
/// 1×1 convolution with the block's stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub conv1: usize,
    pub bn1: usize,
    pub conv2: usize,
    pub bn2: usize,
    pub shortcut: Option<usize>,
}

impl ResidualBlock {
    pub fn build<T: Scalar>(
        builder: &mut LayerBuilder<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!(
                "residual block {name}: stride {stride} not in {{1, 2}}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config(format!(
                "residual block {name}: channels must be positive"
            )));
        }
        let b = Branch::Residual;
        let conv1 = builder.conv(format!("{name}.conv1"), b, in_channels, out_channels, 3, stride, 1, false)?;
        let bn1 = builder.batch_norm(format!("{name}.bn1"), b, out_channels);
        let conv2 = builder.conv(format!("{name}.conv2"), b, out_channels, out_channels, 3, 1, 1, false)?;
        let bn2 = builder.batch_norm(format!("{name}.bn2"), b, out_channels);
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some(builder.conv(format!("{name}.shortcut"), b, in_channels, out_channels, 1, stride, 0, true)?)
        } else {
            None
        };
        Ok(Self {
            in_channels,
            out_channels,
            stride,
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.conv(self.conv1, x)?;
        let h = ctx.batch_norm(self.bn1, h)?;
        let h = ctx.relu(h)?;
        let h = ctx.conv(self.conv2, h)?;
        let main = ctx.batch_norm(self.bn2, h)?;
        let skip = match self.shortcut {
            Some(layer) => ctx.conv(layer, x)?,
            None => x,
        };
        let sum = ctx.graph.add(main, skip)?;
        ctx.relu(sum)
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        let mut v = vec![self.conv1, self.bn1, self.conv2, self.bn2];
        v.extend(self.shortcut);
        v
    }
}

/// One pre-activation layer inside a dense block (`conv(relu(bn(·)))`, k
/// output channels).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub bn: usize,
    pub conv: usize,
    /// Feature maps this layer consumes: 0 is the block input, `j ≥ 1` the
    /// output of layer `j` of the same block.
    pub sources: Vec<usize>,
}

/// Perturbation added to one source feature map as seen by exactly one
/// consumer layer. Used by the connectivity probe.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub source: usize,
    /// 1-based index of the consuming layer.
    pub consumer: usize,
    pub delta: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth_rate: usize,
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn build<T: Scalar>(
        builder: &mut LayerBuilder<T>,
        name: &str,
        in_channels: usize,
        num_layers: usize,
        growth_rate: usize,
    ) -> Result<Self> {
        if num_layers == 0 || growth_rate == 0 || in_channels == 0 {
            return Err(Error::config(format!(
                "dense block {name}: layers, growth rate and input channels must be positive"
            )));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for j in 1..=num_layers {
            let consumed = in_channels + (j - 1) * growth_rate;
            let bn = builder.batch_norm(format!("{name}.layer{j}.bn"), Branch::Dense, consumed);
            let conv = builder.conv(
                format!("{name}.layer{j}.conv"),
                Branch::Dense,
                consumed,
                growth_rate,
                3,
                1,
                1,
                false,
            )?;
            layers.push(DenseLayer {
                bn,
                conv,
                sources: (0..j).collect(),
            });
        }
        Ok(Self {
            in_channels,
            growth_rate,
            layers,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }

    /// Number of direct source→layer edges recorded in the block structure.
    pub fn connection_count(&self) -> usize {
        self.layers.iter().map(|l| l.sources.len()).sum()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x, None)?.output)
    }

    /// Forward pass that also reports each layer's output, optionally
    /// injecting a perturbation into a single source→consumer edge.
    pub fn forward_traced<T: Scalar>(
        &self,
        ctx: &mut Forward<'_, T>,
        x: Var,
        injection: Option<Injection>,
    ) -> Result<DenseTrace> {
        let mut features = vec![x];
        for (idx, layer) in self.layers.iter().enumerate() {
            let consumer = idx + 1;
            let mut inputs = Vec::with_capacity(layer.sources.len());
            for &s in &layer.sources {
                let mut f = features[s];
                if let Some(inj) = injection {
                    if inj.source == s && inj.consumer == consumer {
                        f = ctx.graph.add(f, inj.delta)?;
                    }
                }
                inputs.push(f);
            }
            let h = ctx.graph.concat_channels(&inputs)?;
            let h = ctx.batch_norm(layer.bn, h)?;
            let h = ctx.relu(h)?;
            features.push(ctx.conv(layer.conv, h)?);
        }
        let output = ctx.graph.concat_channels(&features)?;
        Ok(DenseTrace {
            layer_outputs: features[1..].to_vec(),
            output,
        })
    }
}

pub struct DenseTrace {
    pub layer_outputs: Vec<Var>,
    pub output: Var,
}

/// Between dense blocks: `avgpool2(conv1x1(relu(bn(·))))` with channel
/// compression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub bn: usize,
    pub conv: usize,
    pub out_channels: usize,
}

impl Transition {
    pub fn build<T: Scalar>(builder: &mut LayerBuilder<T>, name: &str, in_channels: usize, compression: f64) -> Result<Self> {
        let out_channels = ((in_channels as f64 * compression).floor() as usize).max(1);
        let bn = builder.batch_norm(format!("{name}.bn"), Branch::Dense, in_channels);
        let conv = builder.conv(format!("{name}.conv"), Branch::Dense, in_channels, out_channels, 1, 1, 0, false)?;
        Ok(Self {
            bn,
            conv,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.batch_norm(self.bn, x)?;
        let h = ctx.relu(h)?;
        let h = ctx.conv(self.conv, h)?;
        ctx.graph.pool2d(h, PoolKind::Avg, 2, 2)
    }
}
