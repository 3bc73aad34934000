//! Dense tanh networks with a scaled sigmoid head.
//!
//! Inputs are `(x, t)` columns; a batch is a `(n_in, batch)` matrix. The
//! [`Tape`] records a forward sweep (optionally carrying the exact input
//! tangents `∂/∂x`, `∂/∂t` alongside the primal values) so that a single
//! reverse sweep yields parameter gradients of losses that depend on both
//! the outputs and their input derivatives.

pub mod activation;
mod adam;
mod pool;
mod checkpoint;
mod tape;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use tape::{Gradients, OutputSeeds, Tape};

use ndarray::{Array1, Array2, ArrayView2};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("tape already consumed by a reverse sweep")]
    TapeConsumed,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("the tape was recorded without input tangents")]
    NoTangents,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Output activation, applied per output unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputHead {
    /// `scale · σ(z)`.
    Sigmoid { scale: f64 },
    /// `scale · z`.
    Linear { scale: f64 },
}

impl OutputHead {
    /// Value and first two derivatives with respect to the pre-activation.
    #[inline]
    pub(crate) fn jet(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            OutputHead::Sigmoid { scale } => {
                let s = sigmoid(z);
                let d1 = s * (1.0 - s);
                (scale * s, scale * d1, scale * d1 * (1.0 - 2.0 * s))
            }
            OutputHead::Linear { scale } => (scale * z, scale, 0.0),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `(fan_out, fan_in)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub heads: Vec<OutputHead>,
    /// Fixed input map `x̂ = (x − shift) · scale`, applied before layer 0.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
}

/// Glorot/Xavier uniform matrix of shape `(fan_out, fan_in)` on `[−L, L]`,
/// `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let limit = glorot_limit(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-limit, limit);
    Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng))
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl DenseNet {
    /// Glorot-initialized network with zero biases and sigmoid heads.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], heads: Vec<OutputHead>, rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        assert_eq!(heads.len(), *layer_sizes.last().unwrap(), "one head per output");
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                w: glorot_init(w[0], w[1], rng),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            heads,
            input_shift: vec![0.0; layer_sizes[0]],
            input_scale: vec![1.0; layer_sizes[0]],
        }
    }

    /// Maps each input interval `[lo, hi]` onto `[−1, 1]`.
    pub fn with_input_box(mut self, bounds: &[(f64, f64)]) -> Self {
        assert_eq!(bounds.len(), self.n_inputs());
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            self.input_shift[i] = 0.5 * (lo + hi);
            self.input_scale[i] = 2.0 / (hi - lo);
        }
        self
    }

    pub(crate) fn normalize(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut a = input.to_owned();
        for (i, mut row) in a.rows_mut().into_iter().enumerate() {
            let (c, k) = (self.input_shift[i], self.input_scale[i]);
            row.mapv_inplace(|v| (v - c) * k);
        }
        a
    }

    /// `n_in → [width; depth] → n_out` with sigmoid heads of the given scales.
    pub fn mlp<R: Rng + ?Sized>(
        n_in: usize,
        width: usize,
        depth: usize,
        head_scales: &[f64],
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![n_in];
        sizes.extend(std::iter::repeat_n(width, depth));
        sizes.push(head_scales.len());
        let heads = head_scales
            .iter()
            .map(|&scale| OutputHead::Sigmoid { scale })
            .collect();
        Self::new(&sizes, heads, rng)
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Batched forward pass; `input` is `(n_in, batch)`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut a = self.normalize(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.dot(&a);
            for (mut row, &b) in z.rows_mut().into_iter().zip(&layer.b) {
                row += b;
                if l < last {
                    activation::tanh_in_place(row.as_slice_mut().expect("standard layout"));
                }
            }
            a = z;
        }
        for (mut row, head) in a.rows_mut().into_iter().zip(&self.heads) {
            row.mapv_inplace(|z| head.jet(z).0);
        }
        a
    }

    pub fn forward_point(&self, input: &[f64]) -> Vec<f64> {
        let col = ArrayView2::from_shape((input.len(), 1), input).expect("column input");
        self.forward(col).column(0).to_vec()
    }

    /// Records a forward sweep for a later reverse sweep.
    pub fn record(&self, input: ArrayView2<f64>, with_tangents: bool) -> Tape<'_> {
        Tape::record(self, input, with_tangents)
    }

    /// Outputs and their exact derivatives with respect to the first two
    /// inputs, each `(n_out, batch)`.
    pub fn input_jacobian(&self, input: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let tape = self.record(input, true);
        (
            tape.output().to_owned(),
            tape.output_dx().expect("tangents recorded").to_owned(),
            tape.output_dt().expect("tangents recorded").to_owned(),
        )
    }

    /// All parameters in layer order (`w` row-major, then `b`).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.n_params() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.b.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn glorot_support_and_variance() {
        let mut r = rng();
        let w = glorot_init(40, 40, &mut r);
        let l = glorot_limit(40, 40);
        assert!(w.iter().all(|v| v.abs() <= l));

        let big = glorot_init(400, 250, &mut r);
        assert_eq!(big.len(), 100_000);
        let mean = big.mean().unwrap();
        let var = big.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let expect = glorot_limit(400, 250).powi(2) / 3.0;
        assert!((var - expect).abs() / expect < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn glorot_is_deterministic() {
        let a = glorot_init(8, 5, &mut rng());
        let b = glorot_init(8, 5, &mut rng());
        assert_eq!(a, b);
        let n1 = DenseNet::mlp(2, 40, 8, &[1.0, 1.0], &mut rng());
        let n2 = DenseNet::mlp(2, 40, 8, &[1.0, 1.0], &mut rng());
        assert_eq!(n1, n2);
        assert!(n1.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = DenseNet::mlp(2, 10, 3, &[1.0, 1.0], &mut rng()).zeroed();
        let out = net.forward(array![[0.3, -1.0, 5.0], [0.1, 2.0, 0.0]].view());
        assert!(out.iter().all(|&v| v == 0.5));
        let (_, dx, dt) = net.input_jacobian(array![[0.3], [0.1]].view());
        assert!(dx.iter().chain(dt.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_hand_computation() {
        let mut net = DenseNet::new(&[2, 1], vec![OutputHead::Sigmoid { scale: 2.0 }], &mut rng());
        net.layers[0].w = array![[0.5, -0.25]];
        net.layers[0].b = array![0.1];
        let z: f64 = 0.5 * 0.4 - 0.25 * 2.0 + 0.1;
        let s = 1.0 / (1.0 + (-z).exp());
        let out = net.forward_point(&[0.4, 2.0]);
        assert!((out[0] - 2.0 * s).abs() < 1e-15);
        // chain rule: d/dx = scale * σ'(z) * w_x
        let (_, dx, dt) = net.input_jacobian(array![[0.4], [2.0]].view());
        assert!((dx[[0, 0]] - 2.0 * s * (1.0 - s) * 0.5).abs() < 1e-15);
        assert!((dt[[0, 0]] + 2.0 * s * (1.0 - s) * 0.25).abs() < 1e-15);
    }

    #[test]
    fn batched_equals_pointwise() {
        let net = DenseNet::mlp(2, 16, 4, &[0.7, 1.3], &mut rng());
        let input = array![[0.1, -0.4, 2.0, 7.5], [0.0, 1.0, 2.5, 0.3]];
        let out = net.forward(input.view());
        for j in 0..4 {
            let p = net.forward_point(&[input[[0, j]], input[[1, j]]]);
            assert_eq!(p[0], out[[0, j]]);
            assert_eq!(p[1], out[[1, j]]);
        }
        let tape = net.record(input.view(), true);
        assert_eq!(tape.output(), out.view());
    }

    #[test]
    fn input_box_chains_into_derivatives() {
        let base = DenseNet::mlp(2, 6, 2, &[1.0], &mut rng());
        let boxed = base.clone().with_input_box(&[(-1.0, 10.0), (0.0, 3.0)]);
        let raw = [4.2, 1.1];
        let mapped = [(4.2 - 4.5) * 2.0 / 11.0, (1.1 - 1.5) * 2.0 / 3.0];
        assert!((boxed.forward_point(&raw)[0] - base.forward_point(&mapped)[0]).abs() < 1e-15);
        let (_, dx_b, dt_b) = boxed.input_jacobian(array![[4.2], [1.1]].view());
        let (_, dx, dt) = base.input_jacobian(array![[mapped[0]], [mapped[1]]].view());
        assert!((dx_b[[0, 0]] - dx[[0, 0]] * 2.0 / 11.0).abs() < 1e-15);
        assert!((dt_b[[0, 0]] - dt[[0, 0]] * 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = DenseNet::mlp(2, 5, 2, &[1.0], &mut rng());
        let p = net.params_flat();
        assert_eq!(p.len(), net.n_params());
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        net.set_params_flat(&doubled).unwrap();
        assert_eq!(net.params_flat(), doubled);
        assert!(net.set_params_flat(&doubled[1..]).is_err());
    }
}
