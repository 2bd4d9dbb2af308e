use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Both backbones frozen; only the projection and classifier train.
    HeadOnly = 1,
    /// Layers below the freeze boundary frozen, everything after trains.
    FineTune = 2,
}

/// Sets every layer's trainable flag for a training phase. `boundary` is
/// only consulted in [`Phase::FineTune`] but is validated in both.
pub fn apply_freeze_mask<T: Scalar>(model: &mut Model<T>, phase: Phase, boundary: usize) -> Result<()> {
    let count = model.num_layers();
    if boundary > count {
        return Err(Error::config(format!(
            "freeze boundary {boundary} exceeds the model's {count} layers"
        )));
    }
    for i in 0..count {
        let trainable = match phase {
            Phase::HeadOnly => !model.layers()[i].branch.is_backbone(),
            Phase::FineTune => i >= boundary,
        };
        model.set_trainable(i, trainable);
    }
    Ok(())
}
