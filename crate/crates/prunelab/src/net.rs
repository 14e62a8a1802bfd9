//! Small feedforward networks with exact backpropagation.
//!
//! A [`Module`] is a layer list plus a [`WeightStore`]. Affine weights carry
//! optional binary prune masks; masked positions contribute exactly zero to
//! the forward pass and receive exactly zero gradient. Dot products and row
//! norms accumulate in f64.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{l2_norm, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: expected input width {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: non-finite output")]
    NonFinite { layer: usize },
    #[error("layer {layer}: zero-norm row cannot be normalized")]
    DegenerateRow { layer: usize },
    #[error("gradient shape does not match network output")]
    StaleTrace,
    #[error("mask length {mask_len} does not match tensor length {tensor_len}")]
    MaskLength { mask_len: usize, tensor_len: usize },
}

/// One layer of a feedforward stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { in_dim: usize, out_dim: usize },
    Relu,
    L2Norm,
}

/// A named parameter tensor with an optional binary prune mask.
///
/// Mask entries are 1 (keep) or 0 (pruned). Setting a mask zeroes the masked
/// weight values so checkpoints always store exact zeros at pruned positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    name: String,
    values: Tensor,
    mask: Option<Vec<u8>>,
    prunable: bool,
}

impl WeightEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    pub fn prunable(&self) -> bool {
        self.prunable
    }

    /// Weight value with the mask applied.
    #[inline]
    fn effective(&self, i: usize) -> f32 {
        match &self.mask {
            Some(m) if m[i] == 0 => 0.0,
            _ => self.values.data()[i],
        }
    }

    pub fn set_mask(&mut self, mask: Vec<u8>) -> Result<(), NetError> {
        if mask.len() != self.values.len() {
            return Err(NetError::MaskLength {
                mask_len: mask.len(),
                tensor_len: self.values.len(),
            });
        }
        for (v, &m) in self.values.data_mut().iter_mut().zip(&mask) {
            if m == 0 {
                *v = 0.0;
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// Re-zero masked positions. Called after every optimizer update.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &m) in self.values.data_mut().iter_mut().zip(mask) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Ordered collection of named weight tensors. Registration order is part of
/// the contract: pruning tie-breaks and checkpoints both follow it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, values: Tensor, prunable: bool) {
        self.entries.push(WeightEntry {
            name: name.to_string(),
            values,
            mask: None,
            prunable,
        });
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [WeightEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn apply_masks(&mut self) {
        for e in &mut self.entries {
            e.apply_mask();
        }
    }

    /// Fraction of prunable weights whose mask bit is zero.
    pub fn sparsity(&self) -> f64 {
        let mut total = 0usize;
        let mut zeros = 0usize;
        for e in self.entries.iter().filter(|e| e.prunable) {
            total += e.values.len();
            if let Some(m) = &e.mask {
                zeros += m.iter().filter(|&&b| b == 0).count();
            }
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    pub fn prunable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.prunable)
            .map(|e| e.values.len())
            .sum()
    }
}

/// Gradients aligned index-for-index with a store's entries.
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(store: &WeightStore) -> Self {
        Self {
            grads: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.values().dims().to_vec()))
                .collect(),
        }
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn get(&self, store: &WeightStore, name: &str) -> Option<&Tensor> {
        store
            .entries()
            .iter()
            .position(|e| e.name() == name)
            .map(|i| &self.grads[i])
    }
}

/// A layer stack bound to its parameters.
///
/// Affine layer at position `i` owns tensors `w{i}` with dims
/// `[in_dim, out_dim]` (prunable) and `b{i}` with dims `[out_dim]` (exempt).
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub layers: Vec<LayerSpec>,
    pub store: WeightStore,
}

impl Module {
    /// Build a module with zero-initialized parameters.
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        let mut store = WeightStore::new();
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::Affine { in_dim, out_dim } = layer {
                store.register(&format!("w{i}"), Tensor::zeros(vec![*in_dim, *out_dim]), true);
                store.register(&format!("b{i}"), Tensor::zeros(vec![*out_dim]), false);
            }
        }
        Self { layers, store }
    }

    /// Build a module with Xavier-uniform weights and zero biases, drawing
    /// from `rng` in registration order.
    pub fn with_xavier_init<R: Rng>(layers: Vec<LayerSpec>, rng: &mut R) -> Self {
        let mut module = Self::new(layers);
        for (i, layer) in module.layers.clone().iter().enumerate() {
            if let LayerSpec::Affine { in_dim, out_dim } = layer {
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt() as f32;
                let w = module.store.get_mut(&format!("w{i}")).unwrap();
                for v in w.values_mut().data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        module
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Affine { in_dim, .. } => Some(*in_dim),
            _ => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Affine { out_dim, .. } => Some(*out_dim),
            _ => None,
        })
    }
}

/// Activations recorded by [`forward`]; consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    activations: Vec<Tensor>,
}

impl ForwardTrace {
    /// Activations after every layer, in order. The last entry is the output.
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn output(&self) -> &Tensor {
        self.activations
            .last()
            .expect("trace from a module with no layers")
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

/// Run the module on a batch `x` of shape `[batch, in_dim]`.
pub fn forward(module: &Module, x: &Tensor) -> Result<ForwardTrace, NetError> {
    x.expect_rank(2)?;
    let mut current = x.clone();
    let mut activations = Vec::with_capacity(module.layers.len());
    for (li, layer) in module.layers.iter().enumerate() {
        let out = match layer {
            LayerSpec::Affine { in_dim, out_dim } => {
                if current.row_len() != *in_dim {
                    return Err(NetError::ShapeMismatch {
                        layer: li,
                        expected: *in_dim,
                        got: current.row_len(),
                    });
                }
                let w = module
                    .store
                    .get(&format!("w{li}"))
                    .expect("affine layer weights registered at build time");
                let b = module
                    .store
                    .get(&format!("b{li}"))
                    .expect("affine layer bias registered at build time");
                affine_forward(&current, w, b, *in_dim, *out_dim)
            }
            LayerSpec::Relu => relu_forward(&current),
            LayerSpec::L2Norm => l2norm_forward(&current, li)?,
        };
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite { layer: li });
        }
        activations.push(out.clone());
        current = out;
    }
    Ok(ForwardTrace {
        input: x.clone(),
        activations,
    })
}

fn affine_forward(x: &Tensor, w: &WeightEntry, b: &WeightEntry, in_dim: usize, out_dim: usize) -> Tensor {
    let batch = x.rows();
    let mut out = Tensor::zeros(vec![batch, out_dim]);
    let bias = b.values().data();
    for r in 0..batch {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for o in 0..out_dim {
            let mut acc = bias[o] as f64;
            for i in 0..in_dim {
                acc += xr[i] as f64 * w.effective(i * out_dim + o) as f64;
            }
            or[o] = acc as f32;
        }
    }
    out
}

fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn l2norm_forward(x: &Tensor, layer: usize) -> Result<Tensor, NetError> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let norm = l2_norm(x.row(r));
        if norm == 0.0 {
            return Err(NetError::DegenerateRow { layer });
        }
        for v in out.row_mut(r) {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(out)
}

/// Backpropagate `output_gradient` through the module.
///
/// Returns the parameter gradients (zero at masked positions) and the
/// gradient with respect to the module input.
pub fn backward(
    module: &Module,
    trace: &ForwardTrace,
    output_gradient: &Tensor,
) -> Result<(GradientSet, Tensor), NetError> {
    if trace.activations.len() != module.layers.len() {
        return Err(NetError::StaleTrace);
    }
    let out = trace.output();
    if output_gradient.dims() != out.dims() {
        return Err(NetError::StaleTrace);
    }
    let mut grads = GradientSet::zeros_like(&module.store);
    let mut g = output_gradient.clone();
    for li in (0..module.layers.len()).rev() {
        let input = if li == 0 {
            &trace.input
        } else {
            &trace.activations[li - 1]
        };
        g = match &module.layers[li] {
            LayerSpec::Affine { in_dim, out_dim } => {
                let w_idx = module
                    .store
                    .entries()
                    .iter()
                    .position(|e| e.name() == format!("w{li}"))
                    .expect("registered");
                // Bias follows its weight in registration order.
                let (head, tail) = grads.grads.split_at_mut(w_idx + 1);
                affine_backward(
                    input,
                    &g,
                    &module.store.entries()[w_idx],
                    *in_dim,
                    *out_dim,
                    &mut head[w_idx],
                    &mut tail[0],
                )
            }
            LayerSpec::Relu => relu_backward(input, &g),
            LayerSpec::L2Norm => l2norm_backward(input, &trace.activations[li], &g),
        };
    }
    Ok((grads, g))
}

#[allow(clippy::too_many_arguments)]
fn affine_backward(
    input: &Tensor,
    g: &Tensor,
    w: &WeightEntry,
    in_dim: usize,
    out_dim: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let batch = input.rows();
    // dW = X^T G, masked positions forced to zero
    for i in 0..in_dim {
        for o in 0..out_dim {
            let masked = matches!(w.mask(), Some(m) if m[i * out_dim + o] == 0);
            if masked {
                dw.data_mut()[i * out_dim + o] = 0.0;
                continue;
            }
            let mut acc = 0.0f64;
            for r in 0..batch {
                acc += input.row(r)[i] as f64 * g.row(r)[o] as f64;
            }
            dw.data_mut()[i * out_dim + o] = acc as f32;
        }
    }
    // db = column sums of G
    for o in 0..out_dim {
        let mut acc = 0.0f64;
        for r in 0..batch {
            acc += g.row(r)[o] as f64;
        }
        db.data_mut()[o] = acc as f32;
    }
    // dX = G W^T with masked weights contributing zero
    let mut dx = Tensor::zeros(vec![batch, in_dim]);
    for r in 0..batch {
        let gr = g.row(r);
        let dr = dx.row_mut(r);
        for i in 0..in_dim {
            let mut acc = 0.0f64;
            for o in 0..out_dim {
                acc += gr[o] as f64 * w.effective(i * out_dim + o) as f64;
            }
            dr[i] = acc as f32;
        }
    }
    dx
}

fn relu_backward(input: &Tensor, g: &Tensor) -> Tensor {
    let mut dx = g.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

fn l2norm_backward(input: &Tensor, output: &Tensor, g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input.dims().to_vec());
    for r in 0..input.rows() {
        let norm = l2_norm(input.row(r));
        let y = output.row(r);
        let gr = g.row(r);
        let dot: f64 = gr
            .iter()
            .zip(y)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        for (i, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = ((gr[i] as f64 - dot * y[i] as f64) / norm) as f32;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_affine(in_dim: usize, out_dim: usize, w: Vec<f32>, b: Vec<f32>) -> Module {
        let mut m = Module::new(vec![LayerSpec::Affine { in_dim, out_dim }]);
        m.store
            .get_mut("w0")
            .unwrap()
            .values_mut()
            .data_mut()
            .copy_from_slice(&w);
        m.store
            .get_mut("b0")
            .unwrap()
            .values_mut()
            .data_mut()
            .copy_from_slice(&b);
        m
    }

    #[test]
    fn identity_affine_passes_input_through() {
        let m = single_affine(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let trace = forward(&m, &x).unwrap();
        assert_eq!(trace.output().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let m = Module::new(vec![LayerSpec::Relu]);
        let x = Tensor::matrix(1, 3, vec![-1.0, 0.0, 3.0]).unwrap();
        let trace = forward(&m, &x).unwrap();
        assert_eq!(trace.output().data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn two_layer_hand_computed_forward() {
        // Pencil-and-paper oracle, computed before implementation:
        //   W0 = [[1, 2], [3, -1]], b0 = (0.5, -0.5), x = (1, 1)
        //   z  = (1+3+0.5, 2-1-0.5) = (4.5, 0.5); relu keeps both
        //   W1 = [[1], [-2]], b1 = (0.25)
        //   out = 4.5*1 + 0.5*(-2) + 0.25 = 3.75
        let mut m = Module::new(vec![
            LayerSpec::Affine { in_dim: 2, out_dim: 2 },
            LayerSpec::Relu,
            LayerSpec::Affine { in_dim: 2, out_dim: 1 },
        ]);
        m.store
            .get_mut("w0")
            .unwrap()
            .values_mut()
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, -1.0]);
        m.store
            .get_mut("b0")
            .unwrap()
            .values_mut()
            .data_mut()
            .copy_from_slice(&[0.5, -0.5]);
        m.store
            .get_mut("w2")
            .unwrap()
            .values_mut()
            .data_mut()
            .copy_from_slice(&[1.0, -2.0]);
        m.store
            .get_mut("b2")
            .unwrap()
            .values_mut()
            .data_mut()
            .copy_from_slice(&[0.25]);
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let trace = forward(&m, &x).unwrap();
        assert_eq!(trace.activations()[0].data(), &[4.5, 0.5]);
        assert_eq!(trace.output().data(), &[3.75]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let m = Module::with_xavier_init(
            vec![
                LayerSpec::Affine { in_dim: 3, out_dim: 4 },
                LayerSpec::Relu,
                LayerSpec::Affine { in_dim: 4, out_dim: 2 },
            ],
            &mut rng,
        );
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.5, -0.7]).unwrap();
        let a = forward(&m, &x).unwrap();
        let b = forward(&m, &x).unwrap();
        assert_eq!(a.output().data(), b.output().data());
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = single_affine(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            forward(&m, &x),
            Err(NetError::ShapeMismatch { layer: 0, .. })
        ));
    }

    #[test]
    fn masked_weights_are_dead() {
        let mut m = single_affine(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]);
        m.store
            .get_mut("w0")
            .unwrap()
            .set_mask(vec![1, 0, 0, 1])
            .unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let expected = forward(&m, &x).unwrap().output().clone();

        // Overwrite masked slots with garbage directly; forward must not see it.
        let w = m.store.get_mut("w0").unwrap();
        w.values_mut().data_mut()[1] = 1e9;
        w.values_mut().data_mut()[2] = -777.0;
        let got = forward(&m, &x).unwrap();
        assert_eq!(got.output().data(), expected.data());
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let m = Module::with_xavier_init(
            vec![
                LayerSpec::Affine { in_dim: 2, out_dim: 3 },
                LayerSpec::Relu,
                LayerSpec::Affine { in_dim: 3, out_dim: 2 },
            ],
            &mut rng,
        );
        let x = Tensor::matrix(2, 2, vec![0.3, -0.4, 0.9, 0.1]).unwrap();
        let trace = forward(&m, &x).unwrap();
        let g = Tensor::zeros(vec![2, 2]);
        let (grads, dx) = backward(&m, &trace, &g).unwrap();
        assert!(grads.grads().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_masked_layer_gets_zero_gradient() {
        let mut m = single_affine(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]);
        m.store
            .get_mut("w0")
            .unwrap()
            .set_mask(vec![0, 0, 0, 0])
            .unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let trace = forward(&m, &x).unwrap();
        let g = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let (grads, _) = backward(&m, &trace, &g).unwrap();
        let dw = grads.get(&m.store, "w0").unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let m = single_affine(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let trace = forward(&m, &x).unwrap();
        let bad_g = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            backward(&m, &trace, &bad_g),
            Err(NetError::StaleTrace)
        ));
    }
}
