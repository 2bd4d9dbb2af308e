use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::tensor::Scalar;

/// One RMSprop update in place:
/// `v ← ρ·v + (1−ρ)·g²`, `θ ← θ − lr·g / (√v + ε)`.
///
/// The gradient is checked for finiteness before anything is modified.
pub fn rmsprop_step<T: Scalar>(param: &mut [T], grad: &[T], accum: &mut [T], lr: T, rho: T, eps: T) -> Result<()> {
    if param.len() != grad.len() || param.len() != accum.len() {
        return Err(Error::dim(format!(
            "rmsprop buffers disagree: param {}, grad {}, accumulator {}",
            param.len(),
            grad.len(),
            accum.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at flat index {i}")));
    }
    let keep = T::one() - rho;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *v = rho * *v + keep * g * g;
        *p = *p - lr * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// Accumulators for every parameter of a model, indexed by layer then
/// parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub lr: T,
    pub rho: T,
    pub eps: T,
    pub accum: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(layers: &[Layer<T>], lr: f64, rho: f64, eps: f64) -> Self {
        Self {
            lr: T::of(lr),
            rho: T::of(rho),
            eps: T::of(eps),
            accum: layers
                .iter()
                .map(|l| l.params.iter().map(|p| vec![T::zero(); p.numel()]).collect())
                .collect(),
        }
    }

    /// Updates every trainable layer that received gradients. Frozen layers
    /// and their accumulators are left untouched.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<Option<Vec<T>>>]) -> Result<()> {
        for (idx, layer) in model.layers_mut().iter_mut().enumerate() {
            if !layer.trainable {
                continue;
            }
            for (p, param) in layer.params.iter_mut().enumerate() {
                let Some(g) = grads[idx][p].as_deref() else { continue };
                rmsprop_step(param.data_mut(), g, &mut self.accum[idx][p], self.lr, self.rho, self.eps)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("layer {}: {m}", layer.name)),
                        other => other,
                    })?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_only_decays_accumulator() {
        let mut p = [1.5f64];
        let mut v = [0.4];
        rmsprop_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 1e-7).unwrap();
        assert_eq!(p, [1.5]);
        assert!((v[0] - 0.36).abs() < 1e-15);
    }

    #[test]
    fn one_step_by_hand() {
        let mut p = [0.0f64];
        let mut v = [0.0];
        rmsprop_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v[0] - 0.1).abs() < 1e-15);
        assert!((p[0] - (-0.316_227_766_016_837_94)).abs() < 1e-12);
    }

    #[test]
    fn repeated_steps_are_reproducible() {
        let run = || {
            let mut p = [0.3f32, -0.2];
            let mut v = [0.0f32; 2];
            for _ in 0..2 {
                rmsprop_step(&mut p, &[0.5, -1.25], &mut v, 1e-3, 0.9, 1e-7).unwrap();
            }
            (p, v)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = [1.0f64, 2.0];
        let mut v = [0.0; 2];
        let err = rmsprop_step(&mut p, &[0.1, f64::NAN], &mut v, 0.1, 0.9, 1e-7);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(v, [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn accumulator_stays_non_negative(grads in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut p = [0.0f64];
            let mut v = [0.0f64];
            for g in grads {
                rmsprop_step(&mut p, &[g], &mut v, 1e-4, 0.9, 1e-7).unwrap();
                prop_assert!(v[0] >= 0.0);
            }
        }
    }
}
