//! SGD with momentum, the polynomial learning-rate schedule and flip augmentation.

use rand::Rng;

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;

/// `base_lr * (1 - step / total)^power`.
pub fn poly_lr(step: usize, total: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Invalid(format!("schedule step {step} outside 0..={total}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total as f64).powf(power))
}

/// Momentum buffers, one per parameter of the store they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState { velocity: store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(), step: 0 }
    }
}

/// `v <- momentum * v + (g + weight_decay * p); p <- p - lr * v` for every
/// trainable parameter. Frozen parameters and their buffers are untouched.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} momentum buffers for {} parameters", state.velocity.len(), store.len()),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(&mut state.velocity) {
        let p = store.get_mut(id);
        if v.shape() != p.tensor.shape() {
            return Err(Error::shape("sgd_step", format!("{}: buffer {} vs parameter {}", p.name, v.shape(), p.tensor.shape())));
        }
        if !p.trainable {
            continue;
        }
        let grad = p.grad.data();
        for ((w, v), &g) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// One fair coin per sample.
pub fn draw_flip<R: Rng>(rng: &mut R) -> bool {
    rng.gen_bool(0.5)
}

/// Width-reverses EO, IR and labels together.
pub fn hflip(sample: &PairedSample) -> PairedSample {
    PairedSample {
        id: sample.id.clone(),
        eo: sample.eo.as_ref().map(Tensor::flip_width),
        ir: sample.ir.as_ref().map(Tensor::flip_width),
        label: sample.label.flipped(),
        night: sample.night,
    }
}

/// Flips the whole triple with probability 0.5.
pub fn augment_hflip<R: Rng>(sample: &PairedSample, rng: &mut R) -> PairedSample {
    if draw_flip(rng) {
        hflip(sample)
    } else {
        sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0, 200, 5e-3, POLY_POWER).unwrap(), 5e-3);
        assert_eq!(poly_lr(200, 200, 5e-3, POLY_POWER).unwrap(), 0.0);
        assert!((poly_lr(100, 200, 5e-3, POLY_POWER).unwrap() - 2.679_433e-3).abs() < 1e-8);
        assert!(poly_lr(201, 200, 5e-3, POLY_POWER).is_err());
    }

    #[test]
    fn plain_step_and_frozen_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full([1, 1, 1, 1], 5.0)).unwrap();
        store.get_mut(a).grad = Tensor::full([1, 1, 1, 1], 2.0);
        let mut st = OptimizerState::new(&store);
        sgd_step(&mut store, &mut st, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(store.value(a).data(), &[3.0]);
        store.freeze();
        sgd_step(&mut store, &mut st, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(store.value(a).data(), &[3.0]);
    }
}
