//! Magnitude pruning: cubic sparsity schedules, mask computation, gradual
//! and delayed-gradual hooks for training loops, and post-training one-shot
//! pruning.
//!
//! Only affine weight matrices are prunable; biases are exempt. Already
//! masked positions never come back: they are forced into every later
//! pruned set, so achieved sparsity is nondecreasing over any run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::WeightStore;
use crate::train::ModelBundle;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("target sparsity {0} outside [0, 1)")]
    InvalidTarget(f64),
    #[error("target would leave tensor '{name}' with zero surviving weights")]
    DegenerateLayer { name: String },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// Cubic-ramp gradual pruning plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub begin_step: u64,
    pub end_step: u64,
    pub frequency: u64,
}

impl SparsitySchedule {
    pub fn validate(&self) -> Result<(), PruneError> {
        if self.begin_step >= self.end_step {
            return Err(PruneError::InvalidSchedule(format!(
                "begin_step {} must precede end_step {}",
                self.begin_step, self.end_step
            )));
        }
        if self.frequency < 1 {
            return Err(PruneError::InvalidSchedule("frequency must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.initial_sparsity)
            || !(0.0..1.0).contains(&self.final_sparsity)
        {
            return Err(PruneError::InvalidSchedule(
                "sparsities must lie in [0, 1)".into(),
            ));
        }
        if self.initial_sparsity > self.final_sparsity {
            return Err(PruneError::InvalidSchedule(
                "initial sparsity must not exceed final sparsity".into(),
            ));
        }
        Ok(())
    }

    /// Shift both endpoints later by `delay` steps, preserving ramp length.
    pub fn delayed_by(&self, delay: u64) -> Self {
        Self {
            begin_step: self.begin_step + delay,
            end_step: self.end_step + delay,
            ..*self
        }
    }
}

/// Target sparsity of the cubic ramp at a given step:
///
/// ```text
/// s(t) = s_f + (s_i - s_f) * (1 - (t - t0) / (te - t0))^3
/// ```
///
/// clamped to `s_i` before `begin_step` and `s_f` from `end_step` onward.
pub fn sparsity_at(schedule: &SparsitySchedule, step: u64) -> f64 {
    if step < schedule.begin_step {
        schedule.initial_sparsity
    } else if step >= schedule.end_step {
        schedule.final_sparsity
    } else {
        let progress = (step - schedule.begin_step) as f64
            / (schedule.end_step - schedule.begin_step) as f64;
        schedule.final_sparsity
            + (schedule.initial_sparsity - schedule.final_sparsity) * (1.0 - progress).powi(3)
    }
}

/// Where the magnitude ranking runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Rank all prunable weights across every tensor together.
    Global,
    /// Rank within each tensor independently.
    PerLayer,
}

/// Snapshot of the masks produced by one pruning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<(String, Vec<u8>)>,
    pub achieved_sparsity: f64,
}

/// Mutable view over the prunable stores of one model, with a label used to
/// qualify tensor names in mask snapshots and checkpoints.
pub type LabeledStore<'a> = (&'a str, &'a mut WeightStore);

/// Fraction of prunable weights currently masked across several stores.
pub fn achieved_sparsity(stores: &[&WeightStore]) -> f64 {
    let mut total = 0usize;
    let mut zeros = 0usize;
    for store in stores {
        for e in store.entries().iter().filter(|e| e.prunable()) {
            total += e.values().len();
            if let Some(m) = e.mask() {
                zeros += m.iter().filter(|&&b| b == 0).count();
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

struct Candidate {
    store_idx: usize,
    entry_idx: usize,
    flat_idx: usize,
    magnitude: f32,
    already_masked: bool,
}

/// Mask the smallest-magnitude prunable weights down to `target` sparsity.
///
/// Already masked positions always remain masked. Ties break by tensor
/// registration order, then flat element index, so the result is
/// deterministic and invariant under any positive rescaling of the weights.
pub fn magnitude_mask(
    stores: &mut [LabeledStore<'_>],
    target: f64,
    scope: MaskScope,
) -> Result<MaskSet, PruneError> {
    if !(0.0..1.0).contains(&target) {
        return Err(PruneError::InvalidTarget(target));
    }

    // Gather (store, entry) pairs of prunable tensors in registration order.
    let mut tensors: Vec<(usize, usize)> = Vec::new();
    for (si, (_, store)) in stores.iter().enumerate() {
        for (ei, entry) in store.entries().iter().enumerate() {
            if entry.prunable() {
                tensors.push((si, ei));
            }
        }
    }

    let gather = |stores: &[LabeledStore<'_>], si: usize, ei: usize| -> Vec<Candidate> {
        let entry = &stores[si].1.entries()[ei];
        let mask = entry.mask();
        entry
            .values()
            .data()
            .iter()
            .enumerate()
            .map(|(flat_idx, &w)| Candidate {
                store_idx: si,
                entry_idx: ei,
                flat_idx,
                magnitude: w.abs(),
                already_masked: matches!(mask, Some(m) if m[flat_idx] == 0),
            })
            .collect()
    };

    // Per tensor: the new mask (1 = keep), computed before any is applied so
    // a degenerate layer aborts without side effects.
    let mut new_masks: Vec<Vec<u8>> = tensors
        .iter()
        .map(|&(si, ei)| vec![1u8; stores[si].1.entries()[ei].values().len()])
        .collect();

    let sort_and_take = |mut candidates: Vec<Candidate>, prune_count: usize| -> Vec<Candidate> {
        candidates.sort_by(|a, b| {
            b.already_masked
                .cmp(&a.already_masked)
                .then(a.magnitude.total_cmp(&b.magnitude))
                .then(a.store_idx.cmp(&b.store_idx))
                .then(a.entry_idx.cmp(&b.entry_idx))
                .then(a.flat_idx.cmp(&b.flat_idx))
        });
        let masked = candidates.iter().filter(|c| c.already_masked).count();
        candidates.truncate(prune_count.max(masked));
        candidates
    };

    match scope {
        MaskScope::Global => {
            let mut candidates = Vec::new();
            for &(si, ei) in &tensors {
                candidates.extend(gather(stores, si, ei));
            }
            let total = candidates.len();
            let prune_count = (target * total as f64).floor() as usize;
            for c in sort_and_take(candidates, prune_count) {
                let t = tensors
                    .iter()
                    .position(|&(si, ei)| si == c.store_idx && ei == c.entry_idx)
                    .expect("candidate from gathered tensor");
                new_masks[t][c.flat_idx] = 0;
            }
        }
        MaskScope::PerLayer => {
            for (t, &(si, ei)) in tensors.iter().enumerate() {
                let candidates = gather(stores, si, ei);
                let prune_count = (target * candidates.len() as f64).floor() as usize;
                for c in sort_and_take(candidates, prune_count) {
                    new_masks[t][c.flat_idx] = 0;
                }
            }
        }
    }

    for (t, &(si, ei)) in tensors.iter().enumerate() {
        if new_masks[t].iter().all(|&b| b == 0) {
            let (label, store) = &stores[si];
            return Err(PruneError::DegenerateLayer {
                name: format!("{label}.{}", store.entries()[ei].name()),
            });
        }
    }

    let mut snapshot = Vec::with_capacity(tensors.len());
    for (t, &(si, ei)) in tensors.iter().enumerate() {
        let mask = std::mem::take(&mut new_masks[t]);
        let (label, store) = &mut stores[si];
        let entry = &mut store.entries_mut()[ei];
        entry.set_mask(mask.clone())?;
        snapshot.push((format!("{label}.{}", entry.name()), mask));
    }
    let views: Vec<&WeightStore> = stores.iter().map(|(_, s)| &**s).collect();
    Ok(MaskSet {
        masks: snapshot,
        achieved_sparsity: achieved_sparsity(&views),
    })
}

/// Step callback driving gradual magnitude pruning during training.
///
/// At each step `t >= begin` with `(t - begin) % frequency == 0` the masks
/// are recomputed to the schedule's target. If the run is shorter than the
/// schedule, [`PruneHook::finish`] clamps the last update to the final
/// sparsity and records a warning.
#[derive(Debug, Clone)]
pub struct PruneHook {
    schedule: SparsitySchedule,
    scope: MaskScope,
    trace: Vec<(u64, f64)>,
    warnings: Vec<String>,
    last_step: Option<u64>,
    fired: bool,
}

impl PruneHook {
    /// Gradual magnitude pruning on the given schedule.
    pub fn gmp(schedule: SparsitySchedule, scope: MaskScope) -> Result<Self, PruneError> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            scope,
            trace: Vec::new(),
            warnings: Vec::new(),
            last_step: None,
            fired: false,
        })
    }

    /// Delayed GMP: both schedule endpoints shift later by
    /// `delay_epochs * steps_per_epoch`, preserving the ramp length.
    pub fn delayed_gmp(
        schedule: SparsitySchedule,
        delay_epochs: u64,
        steps_per_epoch: u64,
        scope: MaskScope,
    ) -> Result<Self, PruneError> {
        Self::gmp(schedule.delayed_by(delay_epochs * steps_per_epoch), scope)
    }

    pub fn schedule(&self) -> &SparsitySchedule {
        &self.schedule
    }

    /// Called once before the training loop with the planned step count.
    pub fn begin(&mut self, total_steps: u64) {
        if self.schedule.begin_step < total_steps && self.schedule.end_step > total_steps {
            self.warnings.push(format!(
                "schedule end step {} exceeds run length {}; final update will clamp to sparsity {}",
                self.schedule.end_step, total_steps, self.schedule.final_sparsity
            ));
        }
    }

    /// Invoke after optimizer step `step` (0-based). Returns the achieved
    /// sparsity when the masks were updated.
    pub fn on_step(
        &mut self,
        step: u64,
        stores: &mut [LabeledStore<'_>],
    ) -> Result<Option<f64>, PruneError> {
        self.last_step = Some(step);
        if step < self.schedule.begin_step
            || (step - self.schedule.begin_step) % self.schedule.frequency != 0
        {
            return Ok(None);
        }
        let target = sparsity_at(&self.schedule, step);
        let set = magnitude_mask(stores, target, self.scope)?;
        self.fired = true;
        self.trace.push((step, set.achieved_sparsity));
        Ok(Some(set.achieved_sparsity))
    }

    /// Called after the last step: if the ramp began but the run ended before
    /// the schedule did, apply one final update at the final sparsity.
    pub fn finish(&mut self, stores: &mut [LabeledStore<'_>]) -> Result<(), PruneError> {
        let Some(last) = self.last_step else {
            return Ok(());
        };
        if self.fired && last < self.schedule.end_step {
            let set = magnitude_mask(stores, self.schedule.final_sparsity, self.scope)?;
            self.trace.push((last, set.achieved_sparsity));
        }
        Ok(())
    }

    /// (step, achieved sparsity) for every mask update, in order.
    pub fn trace(&self) -> &[(u64, f64)] {
        &self.trace
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Post-training global one-shot pruning of encoder and classifier head.
/// The caller is expected to fine-tune afterwards to recover accuracy.
pub fn one_shot_prune(bundle: &mut ModelBundle, target: f64) -> Result<MaskSet, PruneError> {
    let mut stores = bundle.labeled_stores_mut();
    magnitude_mask(&mut stores, target, MaskScope::Global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn schedule() -> SparsitySchedule {
        SparsitySchedule {
            initial_sparsity: 0.0,
            final_sparsity: 0.9,
            begin_step: 0,
            end_step: 1000,
            frequency: 100,
        }
    }

    fn store_with(name: &str, weights: Vec<f32>) -> WeightStore {
        let mut s = WeightStore::new();
        s.register(name, Tensor::vector(weights), true);
        s
    }

    #[test]
    fn ramp_endpoints_are_exact() {
        let s = SparsitySchedule {
            initial_sparsity: 0.1,
            final_sparsity: 0.9,
            begin_step: 50,
            end_step: 450,
            frequency: 10,
        };
        assert_eq!(sparsity_at(&s, 0), 0.1);
        assert_eq!(sparsity_at(&s, 50), 0.1);
        assert_eq!(sparsity_at(&s, 450), 0.9);
        assert_eq!(sparsity_at(&s, 100_000), 0.9);
    }

    #[test]
    fn ramp_midpoint_matches_cubic() {
        let s = SparsitySchedule {
            initial_sparsity: 0.0,
            final_sparsity: 0.9,
            begin_step: 0,
            end_step: 1000,
            frequency: 1,
        };
        let mid = sparsity_at(&s, 500);
        assert!((mid - 0.7875).abs() < 1e-12, "mid {mid}");
    }

    #[test]
    fn ramp_is_nondecreasing() {
        let s = schedule();
        let mut prev = 0.0;
        for step in 0..1200 {
            let v = sparsity_at(&s, step);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn target_zero_keeps_everything() {
        let mut store = store_with("w0", vec![0.1, -0.5, 0.3, -0.05]);
        let mut labeled = [("m", &mut store)];
        let set = magnitude_mask(&mut labeled, 0.0, MaskScope::Global).unwrap();
        assert_eq!(set.masks[0].1, vec![1, 1, 1, 1]);
        assert_eq!(set.achieved_sparsity, 0.0);
    }

    #[test]
    fn global_half_prunes_two_smallest() {
        let mut store = store_with("w0", vec![0.1, -0.5, 0.3, -0.05]);
        let mut labeled = [("m", &mut store)];
        let set = magnitude_mask(&mut labeled, 0.5, MaskScope::Global).unwrap();
        assert_eq!(set.masks[0].1, vec![0, 1, 1, 0]);
        assert_eq!(store.get("w0").unwrap().values().data(), &[0.0, -0.5, 0.3, 0.0]);
    }

    #[test]
    fn masking_is_idempotent_and_deterministic() {
        let mut store = store_with("w0", vec![0.4, 0.2, -0.7, 0.2, 0.9, -0.1]);
        let mut labeled = [("m", &mut store)];
        let a = magnitude_mask(&mut labeled, 0.5, MaskScope::PerLayer).unwrap();
        let b = magnitude_mask(&mut labeled, 0.5, MaskScope::PerLayer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_are_scale_invariant() {
        let weights = vec![0.4f32, -0.2, 0.7, 0.05, -0.9, 0.33, 0.21, -0.46];
        let mut a = store_with("w0", weights.clone());
        let mut b = store_with("w0", weights.iter().map(|w| w * 17.0).collect());
        let mut la = [("m", &mut a)];
        let mut lb = [("m", &mut b)];
        let ma = magnitude_mask(&mut la, 0.5, MaskScope::Global).unwrap();
        let mb = magnitude_mask(&mut lb, 0.5, MaskScope::Global).unwrap();
        assert_eq!(ma.masks, mb.masks);
    }

    #[test]
    fn previously_masked_stay_masked() {
        let mut store = store_with("w0", vec![0.5, 0.1, 0.9, 0.3]);
        let mut labeled = [("m", &mut store)];
        magnitude_mask(&mut labeled, 0.25, MaskScope::Global).unwrap();
        // 0.1 is now zeroed; repruning at 0.5 must keep it masked and add 0.3.
        let mut labeled = [("m", &mut store)];
        let set = magnitude_mask(&mut labeled, 0.5, MaskScope::Global).unwrap();
        assert_eq!(set.masks[0].1, vec![1, 0, 1, 0]);
    }

    #[test]
    fn nested_targets_match_single_shot() {
        let weights: Vec<f32> = (0..40).map(|i| ((i * 37 % 101) as f32 - 50.0) / 25.0).collect();
        let mut twice = store_with("w0", weights.clone());
        {
            let mut l = [("m", &mut twice)];
            magnitude_mask(&mut l, 0.5, MaskScope::Global).unwrap();
        }
        let second = {
            let mut l = [("m", &mut twice)];
            magnitude_mask(&mut l, 0.9, MaskScope::Global).unwrap()
        };
        let mut once = store_with("w0", weights);
        let direct = {
            let mut l = [("m", &mut once)];
            magnitude_mask(&mut l, 0.9, MaskScope::Global).unwrap()
        };
        assert_eq!(second.masks, direct.masks);
    }

    #[test]
    fn wiped_tensor_is_a_degenerate_layer() {
        let mut tiny = WeightStore::new();
        tiny.register("w0", Tensor::vector(vec![1e-6, 2e-6]), true);
        tiny.register("w1", Tensor::vector(vec![5.0, 6.0, 7.0, 8.0]), true);
        let mut labeled = [("m", &mut tiny)];
        let err = magnitude_mask(&mut labeled, 0.5, MaskScope::Global).unwrap_err();
        assert!(matches!(err, PruneError::DegenerateLayer { ref name } if name == "m.w0"), "{err}");
        // No partial application: both tensors still unmasked.
        assert!(tiny.entries().iter().all(|e| e.mask().is_none()));
    }

    #[test]
    fn hook_never_fires_when_begin_is_beyond_run() {
        let mut hook = PruneHook::gmp(
            SparsitySchedule {
                begin_step: 10_000,
                end_step: 20_000,
                ..schedule()
            },
            MaskScope::PerLayer,
        )
        .unwrap();
        let mut store = store_with("w0", (0..20).map(|i| i as f32 + 1.0).collect());
        hook.begin(100);
        for step in 0..100 {
            let mut labeled = [("m", &mut store)];
            hook.on_step(step, &mut labeled).unwrap();
        }
        let mut labeled = [("m", &mut store)];
        hook.finish(&mut labeled).unwrap();
        assert_eq!(store.sparsity(), 0.0);
        assert!(hook.trace().is_empty());
    }

    #[test]
    fn hook_trace_is_nondecreasing_and_reaches_target() {
        let sched = SparsitySchedule {
            initial_sparsity: 0.0,
            final_sparsity: 0.9,
            begin_step: 10,
            end_step: 200,
            frequency: 10,
        };
        let mut hook = PruneHook::gmp(sched, MaskScope::PerLayer).unwrap();
        let weights: Vec<f32> = (0..200).map(|i| ((i * 61 % 199) as f32 - 99.0) / 40.0).collect();
        let mut store = store_with("w0", weights);
        hook.begin(240);
        for step in 0..240 {
            let mut labeled = [("m", &mut store)];
            hook.on_step(step, &mut labeled).unwrap();
        }
        let mut labeled = [("m", &mut store)];
        hook.finish(&mut labeled).unwrap();
        let trace = hook.trace();
        assert!(!trace.is_empty());
        for w in trace.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        let total = store.prunable_len() as f64;
        assert!((store.sparsity() - 0.9).abs() <= 1.0 / total);
    }

    #[test]
    fn delayed_hook_shifts_both_endpoints() {
        let sched = SparsitySchedule {
            initial_sparsity: 0.0,
            final_sparsity: 0.5,
            begin_step: 5,
            end_step: 105,
            frequency: 10,
        };
        let plain = PruneHook::gmp(sched, MaskScope::PerLayer).unwrap();
        let delayed = PruneHook::delayed_gmp(sched, 50, 10, MaskScope::PerLayer).unwrap();
        assert_eq!(delayed.schedule().begin_step, 505);
        assert_eq!(delayed.schedule().end_step, 605);
        assert_eq!(
            delayed.schedule().end_step - delayed.schedule().begin_step,
            plain.schedule().end_step - plain.schedule().begin_step
        );

        // Zero delay reduces to plain GMP.
        let zero = PruneHook::delayed_gmp(sched, 0, 10, MaskScope::PerLayer).unwrap();
        assert_eq!(zero.schedule(), plain.schedule());
    }

    #[test]
    fn delayed_updates_land_on_shifted_frequency_grid() {
        // Paper-profile SCL schedule, delayed; every update step must be
        // congruent to the shifted begin step modulo the frequency.
        let sched = SparsitySchedule {
            initial_sparsity: 0.0,
            final_sparsity: 0.9,
            begin_step: 125,
            end_step: 2476,
            frequency: 62,
        };
        let mut hook = PruneHook::delayed_gmp(sched, 2, 100, MaskScope::PerLayer).unwrap();
        let begin = hook.schedule().begin_step;
        let weights: Vec<f32> = (0..500).map(|i| ((i * 17 % 499) as f32 - 249.0) / 100.0).collect();
        let mut store = store_with("w0", weights);
        hook.begin(3000);
        for step in 0..3000 {
            let mut labeled = [("m", &mut store)];
            hook.on_step(step, &mut labeled).unwrap();
        }
        let mut labeled = [("m", &mut store)];
        hook.finish(&mut labeled).unwrap();
        assert!(!hook.trace().is_empty());
        for &(step, _) in hook.trace() {
            assert_eq!((step - begin) % 62, 0, "update at {step}");
        }
        let total = store.prunable_len() as f64;
        assert!((store.sparsity() - 0.9).abs() <= 1.0 / total);
    }

    #[test]
    fn short_run_clamps_final_update_and_warns() {
        let sched = SparsitySchedule {
            initial_sparsity: 0.0,
            final_sparsity: 0.8,
            begin_step: 0,
            end_step: 10_000,
            frequency: 10,
        };
        let mut hook = PruneHook::gmp(sched, MaskScope::PerLayer).unwrap();
        let weights: Vec<f32> = (0..100).map(|i| (i as f32 + 1.0) / 10.0).collect();
        let mut store = store_with("w0", weights);
        hook.begin(50);
        assert_eq!(hook.warnings().len(), 1);
        for step in 0..50 {
            let mut labeled = [("m", &mut store)];
            hook.on_step(step, &mut labeled).unwrap();
        }
        let mut labeled = [("m", &mut store)];
        hook.finish(&mut labeled).unwrap();
        let total = store.prunable_len() as f64;
        assert!((store.sparsity() - 0.8).abs() <= 1.0 / total);
    }
}
