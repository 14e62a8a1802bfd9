//! SGD with momentum and weight decay, plus cosine learning-rate annealing.

use crate::net::{GradientSet, WeightStore};

/// Per-tensor momentum buffers for one weight store.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(store: &WeightStore) -> Self {
        Self {
            velocity: store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.values().len()])
                .collect(),
        }
    }
}

/// One SGD update:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * w)
/// w <- w - lr * v
/// w <- w . mask      (masked positions stay exactly zero)
/// ```
pub fn sgd_step(
    store: &mut WeightStore,
    state: &mut SgdState,
    grads: &GradientSet,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
        let grad = &grads.grads()[idx];
        let velocity = &mut state.velocity[idx];
        let values = entry.values_mut().data_mut();
        for i in 0..values.len() {
            let v = momentum * velocity[i] + (grad.data()[i] + weight_decay * values[i]);
            velocity[i] = v;
            values[i] -= lr * v;
        }
        entry.apply_mask();
    }
}

/// Cosine annealing: `lr_t = base * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(base_lr: f32, epoch: usize, total_epochs: usize) -> f32 {
    debug_assert!(epoch < total_epochs);
    let progress = epoch as f64 / total_epochs as f64;
    (base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::GradientSet;
    use crate::tensor::Tensor;

    fn scalar_store(w: f32) -> WeightStore {
        let mut store = WeightStore::new();
        store.register("w", Tensor::vector(vec![w]), true);
        store
    }

    fn scalar_grads(store: &WeightStore, g: f32) -> GradientSet {
        let mut set = GradientSet::zeros_like(store);
        set.grads_mut()[0].data_mut()[0] = g;
        set
    }

    #[test]
    fn zero_grad_zero_decay_leaves_weights() {
        let mut store = scalar_store(1.5);
        let mut state = SgdState::new(&store);
        let grads = GradientSet::zeros_like(&store);
        sgd_step(&mut store, &mut state, &grads, 0.1, 0.9, 0.0);
        assert_eq!(store.get("w").unwrap().values().data()[0], 1.5);
    }

    #[test]
    fn two_step_momentum_recurrence() {
        // w=1, g=1, lr=0.1, momentum=0.9, wd=0:
        //   step 1: v=1,   w=0.9
        //   step 2: v=1.9, w=0.9-0.19=0.71
        let mut store = scalar_store(1.0);
        let mut state = SgdState::new(&store);
        let grads = scalar_grads(&store, 1.0);
        sgd_step(&mut store, &mut state, &grads, 0.1, 0.9, 0.0);
        assert!((store.get("w").unwrap().values().data()[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut store, &mut state, &grads, 0.1, 0.9, 0.0);
        assert!((store.get("w").unwrap().values().data()[0] - 0.71).abs() < 1e-7);
    }

    #[test]
    fn masked_position_stays_exactly_zero() {
        let mut store = scalar_store(0.7);
        store.get_mut("w").unwrap().set_mask(vec![0]).unwrap();
        let mut state = SgdState::new(&store);
        let grads = scalar_grads(&store, 2.5);
        for _ in 0..5 {
            sgd_step(&mut store, &mut state, &grads, 0.1, 0.9, 5e-4);
            assert_eq!(store.get("w").unwrap().values().data()[0], 0.0);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.4, 0, 100), 0.4);
        assert!((cosine_lr(0.4, 50, 100) - 0.2).abs() < 1e-7);
        // epoch total-1 of 100: base * 0.5 * (1 + cos(0.99 pi)) ~= base * 2.467e-4
        let tail = cosine_lr(1.0, 99, 100);
        assert!((tail as f64 - 0.000246756).abs() < 1e-6, "tail {tail}");
    }
}
