//! Forward record and reverse sweep.
//!
//! Each recorded block stores `k` column groups of width `batch`: the primal
//! values and, with tangents, the `∂/∂x` and `∂/∂t` groups. Propagating the
//! tangents forward is exact forward-mode differentiation in the inputs; the
//! reverse sweep then differentiates the whole (primal, tangent) computation
//! with respect to the parameters, so losses built from input derivatives
//! get exact parameter gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::activation::tanh_in_place;
use super::pool;
use super::{DenseNet, NnError};

struct Record {
    /// Layer input `[a | a_x | a_t]`, `(fan_in, k·batch)`.
    input: Array2<f64>,
    /// `[h | z_x | z_t]` for hidden layers (activation, then pre-activation
    /// tangents); `[z | z_x | z_t]` for the output layer.
    zh: Array2<f64>,
}

pub struct Tape<'a> {
    net: &'a DenseNet,
    batch: usize,
    tangents: bool,
    records: Vec<Record>,
    output: Array2<f64>,
    consumed: bool,
}

/// Loss sensitivities with respect to the outputs and, when tangents were
/// recorded, their `x` and `t` derivatives. All `(n_out, batch)`.
#[derive(Debug, Clone)]
pub struct OutputSeeds {
    pub value: Array2<f64>,
    pub dx: Option<Array2<f64>>,
    pub dt: Option<Array2<f64>>,
}

impl OutputSeeds {
    pub fn zeros(n_out: usize, batch: usize, tangents: bool) -> Self {
        let z = || Array2::zeros((n_out, batch));
        Self {
            value: z(),
            dx: tangents.then(z),
            dt: tangents.then(z),
        }
    }
}

/// Parameter gradients with the same layout as [`DenseNet::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((gw, gb), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *gw += ow;
            *gb += ob;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl<'a> Tape<'a> {
    pub(super) fn record(net: &'a DenseNet, input: ArrayView2<f64>, tangents: bool) -> Self {
        let batch = input.ncols();
        let k = if tangents { 3 } else { 1 };
        let n_in = input.nrows();
        let mut a = pool::zeros((n_in, k * batch));
        a.slice_mut(s![.., 0..batch]).assign(&net.normalize(input));
        if tangents {
            a.slice_mut(s![0, batch..2 * batch]).fill(net.input_scale[0]);
            if n_in > 1 {
                a.slice_mut(s![1, 2 * batch..3 * batch]).fill(net.input_scale[1]);
            }
        }

        let last = net.layers.len() - 1;
        let mut records = Vec::with_capacity(net.layers.len());
        let mut output = Array2::zeros((0, 0));
        for (l, layer) in net.layers.iter().enumerate() {
            let fan_out = layer.w.nrows();
            let mut z = pool::zeros((fan_out, k * batch));
            general_mat_mul(1.0, &layer.w, &a, 0.0, &mut z);
            if l < last {
                let mut next = pool::zeros((fan_out, k * batch));
                for (r, (mut zr, mut nr)) in z.rows_mut().into_iter().zip(next.rows_mut()).enumerate() {
                    let b = layer.b[r];
                    let zr = zr.as_slice_mut().expect("standard layout");
                    let nr = nr.as_slice_mut().expect("standard layout");
                    zr[..batch].iter_mut().for_each(|v| *v += b);
                    tanh_in_place(&mut zr[..batch]);
                    nr[..batch].copy_from_slice(&zr[..batch]);
                    if tangents {
                        let (hp, tan) = zr.split_at(batch);
                        let ntan = &mut nr[batch..];
                        for j in 0..batch {
                            let d = 1.0 - hp[j] * hp[j];
                            ntan[j] = d * tan[j];
                            ntan[batch + j] = d * tan[batch + j];
                        }
                    }
                }
                records.push(Record {
                    input: std::mem::replace(&mut a, next),
                    zh: z,
                });
            } else {
                let mut out = pool::zeros((fan_out, k * batch));
                for (o, head) in net.heads.iter().enumerate() {
                    let b = layer.b[o];
                    let mut zr = z.row_mut(o);
                    let zr = zr.as_slice_mut().expect("standard layout");
                    let mut orow = out.row_mut(o);
                    let orow = orow.as_slice_mut().expect("standard layout");
                    for j in 0..batch {
                        zr[j] += b;
                        let (y, d1, _) = head.jet(zr[j]);
                        orow[j] = y;
                        if tangents {
                            orow[batch + j] = d1 * zr[batch + j];
                            orow[2 * batch + j] = d1 * zr[2 * batch + j];
                        }
                    }
                }
                records.push(Record {
                    input: std::mem::take(&mut a),
                    zh: z,
                });
                output = out;
            }
        }
        Self {
            net,
            batch,
            tangents,
            records,
            output,
            consumed: false,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn has_tangents(&self) -> bool {
        self.tangents
    }

    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.output.slice(s![.., 0..self.batch])
    }

    pub fn output_dx(&self) -> Option<ArrayView2<'_, f64>> {
        self.tangents
            .then(|| self.output.slice(s![.., self.batch..2 * self.batch]))
    }

    pub fn output_dt(&self) -> Option<ArrayView2<'_, f64>> {
        self.tangents
            .then(|| self.output.slice(s![.., 2 * self.batch..3 * self.batch]))
    }

    /// Reverse sweep; a tape supports exactly one.
    pub fn backward(&mut self, seeds: &OutputSeeds) -> Result<Gradients, NnError> {
        if self.consumed {
            return Err(NnError::TapeConsumed);
        }
        let n = self.batch;
        let k = if self.tangents { 3 } else { 1 };
        let n_out = self.net.n_outputs();
        if seeds.value.dim() != (n_out, n) {
            return Err(NnError::ShapeMismatch(format!(
                "seed shape {:?}, expected {:?}",
                seeds.value.dim(),
                (n_out, n)
            )));
        }
        if !self.tangents && (seeds.dx.is_some() || seeds.dt.is_some()) {
            return Err(NnError::NoTangents);
        }
        self.consumed = true;

        // Head: y = h(z), y_x = h'(z) z_x, y_t = h'(z) z_t.
        let z = &self.records.last().unwrap().zh;
        let mut gz = pool::zeros((n_out, k * n));
        for (o, head) in self.net.heads.iter().enumerate() {
            for j in 0..n {
                let (_, d1, d2) = head.jet(z[[o, j]]);
                let gy = seeds.value[[o, j]];
                let mut g = gy * d1;
                if self.tangents {
                    let gyx = seeds.dx.as_ref().map_or(0.0, |s| s[[o, j]]);
                    let gyt = seeds.dt.as_ref().map_or(0.0, |s| s[[o, j]]);
                    g += (gyx * z[[o, n + j]] + gyt * z[[o, 2 * n + j]]) * d2;
                    gz[[o, n + j]] = gyx * d1;
                    gz[[o, 2 * n + j]] = gyt * d1;
                }
                gz[[o, j]] = g;
            }
        }

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.records.len());
        for l in (0..self.records.len()).rev() {
            let rec = &self.records[l];
            let layer = &self.net.layers[l];
            let mut gw = Array2::<f64>::zeros(layer.w.raw_dim());
            general_mat_mul(1.0, &gz, &rec.input.t(), 0.0, &mut gw);
            let gb = gz.slice(s![.., 0..n]).sum_axis(Axis(1));
            grads.push((gw, gb));
            if l == 0 {
                break;
            }
            // gradient with respect to this layer's input = previous tanh block
            let mut ga = pool::zeros((layer.w.ncols(), k * n));
            general_mat_mul(1.0, &layer.w.t(), &gz, 0.0, &mut ga);
            let next = tanh_backward(&ga, &self.records[l - 1].zh, self.tangents, n);
            pool::recycle(ga);
            pool::recycle(std::mem::replace(&mut gz, next));
        }
        pool::recycle(gz);
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

impl Drop for Tape<'_> {
    fn drop(&mut self) {
        for rec in self.records.drain(..) {
            pool::recycle(rec.input);
            pool::recycle(rec.zh);
        }
        pool::recycle(std::mem::take(&mut self.output));
    }
}

/// Back-propagates through `h = tanh(z)`, `h_x = (1 − h²) z_x`,
/// `h_t = (1 − h²) z_t`, reading `[h | z_x | z_t]` from `zh`.
fn tanh_backward(ga: &Array2<f64>, zh: &Array2<f64>, tangents: bool, n: usize) -> Array2<f64> {
    let mut gz = pool::zeros(ga.dim());
    for ((mut out, gh), rec) in gz.rows_mut().into_iter().zip(ga.rows()).zip(zh.rows()) {
        let out = out.as_slice_mut().expect("standard layout");
        let gh = gh.as_slice().expect("standard layout");
        let rec = rec.as_slice().expect("standard layout");
        if !tangents {
            for j in 0..n {
                let h = rec[j];
                out[j] = gh[j] * (1.0 - h * h);
            }
            continue;
        }
        for j in 0..n {
            let h = rec[j];
            let d = 1.0 - h * h;
            let (ghx, ght) = (gh[n + j], gh[2 * n + j]);
            let gd = ghx * rec[n + j] + ght * rec[2 * n + j];
            out[j] = (gh[j] - 2.0 * h * gd) * d;
            out[n + j] = ghx * d;
            out[2 * n + j] = ght * d;
        }
    }
    gz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputHead;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], seed: u64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..*sizes.last().unwrap())
            .map(|i| OutputHead::Sigmoid { scale: 0.5 + i as f64 })
            .collect();
        let mut net = DenseNet::new(sizes, heads, &mut rng);
        for l in &mut net.layers {
            l.b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        }
        net
    }

    fn random_input(batch: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((2, batch), || rng.gen_range(-1.0..1.0))
    }

    /// Loss combining outputs and input derivatives nonlinearly.
    fn loss_and_seeds(tape: &Tape) -> (f64, OutputSeeds) {
        let y = tape.output();
        let yx = tape.output_dx().unwrap();
        let yt = tape.output_dt().unwrap();
        let (o, n) = y.dim();
        let mut seeds = OutputSeeds::zeros(o, n, true);
        let mut loss = 0.0;
        for i in 0..o {
            for j in 0..n {
                // r = y_t + y² y_x ; loss = Σ r² + 0.5 Σ y²
                let r = yt[[i, j]] + y[[i, j]].powi(2) * yx[[i, j]];
                loss += r * r + 0.5 * y[[i, j]].powi(2);
                seeds.dt.as_mut().unwrap()[[i, j]] = 2.0 * r;
                seeds.dx.as_mut().unwrap()[[i, j]] = 2.0 * r * y[[i, j]].powi(2);
                seeds.value[[i, j]] = 2.0 * r * 2.0 * y[[i, j]] * yx[[i, j]] + y[[i, j]];
            }
        }
        (loss, seeds)
    }

    fn loss_of(net: &DenseNet, input: &Array2<f64>) -> f64 {
        let tape = net.record(input.view(), true);
        loss_and_seeds(&tape).0
    }

    #[test]
    fn quadratic_toy_gradient() {
        // single weight, linear head, input 1: y = w, loss = (w − a)²
        let mut net = DenseNet::new(&[1, 1], vec![OutputHead::Linear { scale: 1.0 }], &mut ChaCha8Rng::seed_from_u64(1));
        net.layers[0].w = array![[0.8]];
        net.layers[0].b = array![0.0];
        let a = 0.3;
        let mut tape = net.record(array![[1.0]].view(), false);
        let y = tape.output()[[0, 0]];
        let seeds = OutputSeeds {
            value: array![[2.0 * (y - a)]],
            dx: None,
            dt: None,
        };
        let g = tape.backward(&seeds).unwrap();
        assert!((g.layers[0].0[[0, 0]] - 2.0 * (0.8 - a)).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = random_net(&[2, 6, 6, 2], 3);
        let input = random_input(5, 4);
        let mut tape = net.record(input.view(), true);
        let g = tape.backward(&OutputSeeds::zeros(2, 5, true)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn double_reverse_is_rejected() {
        let net = random_net(&[2, 4, 1], 3);
        let input = random_input(3, 4);
        let mut tape = net.record(input.view(), false);
        let seeds = OutputSeeds::zeros(1, 3, false);
        tape.backward(&seeds).unwrap();
        assert_eq!(tape.backward(&seeds), Err(NnError::TapeConsumed));
    }

    #[test]
    fn seed_shapes_are_checked() {
        let net = random_net(&[2, 4, 1], 3);
        let input = random_input(3, 4);
        let mut tape = net.record(input.view(), false);
        assert!(matches!(tape.backward(&OutputSeeds::zeros(2, 3, false)), Err(NnError::ShapeMismatch(_))));
        let mut tape = net.record(input.view(), false);
        assert_eq!(tape.backward(&OutputSeeds::zeros(1, 3, true)), Err(NnError::NoTangents));
    }

    #[test]
    fn input_derivatives_match_finite_differences() {
        let net = random_net(&[2, 12, 12, 2], 9);
        let input = random_input(6, 10);
        let (_, dx, dt) = net.input_jacobian(input.view());
        let h = 1e-6;
        for j in 0..6 {
            for (axis, exact) in [(0, &dx), (1, &dt)] {
                let mut p = [input[[0, j]], input[[1, j]]];
                p[axis] += h;
                let up = net.forward_point(&p);
                p[axis] -= 2.0 * h;
                let dn = net.forward_point(&p);
                for o in 0..2 {
                    let fd = (up[o] - dn[o]) / (2.0 * h);
                    let e = exact[[o, j]];
                    assert!((e - fd).abs() <= 1e-6 * e.abs().max(1e-4), "{e} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn parameter_gradient_of_derivative_loss_matches_fd() {
        let mut net = random_net(&[2, 8, 8, 2], 11);
        let input = random_input(7, 12);
        let mut tape = net.record(input.view(), true);
        let (_, seeds) = loss_and_seeds(&tape);
        let g = tape.backward(&seeds).unwrap().flat();
        drop(tape);
        let p0 = net.params_flat();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += h;
            net.set_params_flat(&p).unwrap();
            let up = loss_of(&net, &input);
            p[i] -= 2.0 * h;
            net.set_params_flat(&p).unwrap();
            let dn = loss_of(&net, &input);
            let fd = (up - dn) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-6 * g[i].abs().max(1e-3), "param {i}: {} vs {fd}", g[i]);
        }
    }
}
