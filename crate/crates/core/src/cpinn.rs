//! Two-subdomain conservative PINN.
//!
//! SD1 covers `[x_min, x_I]` and learns `(u, φ)` as a system; SD2 covers
//! `[x_I, x_max]` with `φ ≡ φ_R` and learns `u` alone, using the Oleinik
//! entropy flux `f̃` in its residual. The two nets are coupled by flux
//! continuity and average matching at `x = x_I`.
//!
//! Network outputs are in *network units*: `v = y/δ2` and `w = φ/δ1`, where
//! `y` is the form variable (`u` in conservative form, `ũ = u/φ` in
//! non-conservative form) and `(δ1, δ2) = (1, 1)` unless rescaling is
//! enabled for that subdomain.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::distributions::{Distribution, Open01, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flux::{self, Mobility};
use crate::harness::{CaseConfig, Form, Method, Sample, SolutionField};
use crate::nn::{
    AdamConfig, AdamState, Checkpoint, DenseNet, Gradients, NnError, OutputSeeds, LrSchedule,
};
use crate::riemann::{self, RiemannError, RiemannFan};
use crate::State;

pub const INTERFACE_X: f64 = 0.01;
pub const SD1_DEPTH: usize = 8;
pub const SD2_DEPTH: usize = 10;
pub const WIDTH: usize = 40;
/// Output heads span `[0, HEAD_MARGIN · upper bound]`.
pub const HEAD_MARGIN: f64 = 1.25;
const PHI_FLOOR: f64 = 16.0 * f64::EPSILON;

#[derive(Debug, Error)]
pub enum CpinnError {
    #[error("entropy context does not match its own orderings")]
    ContextMismatch,
    /// `checkpoint` holds the last state whose loss was finite.
    #[error("loss became non-finite at epoch {epoch}")]
    DivergenceDetected { epoch: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Riemann(#[from] RiemannError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubdomainId {
    Sd1,
    Sd2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleParams {
    pub delta1: f64,
    pub delta2: f64,
    pub enabled: bool,
    pub subdomain: SubdomainId,
}

impl RescaleParams {
    pub fn new(delta1: f64, delta2: f64, subdomain: SubdomainId) -> Self {
        Self {
            delta1,
            delta2,
            enabled: true,
            subdomain,
        }
    }

    /// `(δ1, δ2)` in force on `sd`.
    pub fn deltas_for(&self, sd: SubdomainId) -> (f64, f64) {
        if self.enabled && self.subdomain == sd {
            (self.delta1, self.delta2)
        } else {
            (1.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub omega_u: f64,
    pub omega_f: f64,
    pub omega_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega_u: 1.0,
            omega_f: 1.0,
            omega_i: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointCounts {
    pub n_u1: usize,
    pub n_u2: usize,
    pub n_f1: usize,
    pub n_f2: usize,
    pub n_i: usize,
}

impl PointCounts {
    pub fn full(long_domain: bool) -> Self {
        Self {
            n_u1: 101,
            n_u2: 499,
            n_f1: 3000,
            n_f2: if long_domain { 17500 } else { 12500 },
            n_i: 99,
        }
    }

    /// Interior counts divided by `factor`; data and interface counts kept.
    pub fn reduced(self, factor: usize) -> Self {
        Self {
            n_f1: self.n_f1 / factor,
            n_f2: self.n_f2 / factor,
            ..self
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// `n` points of a Latin hypercube in `(0, 1)^d`: along every axis each
/// stratum `[k/n, (k+1)/n)` holds exactly one point.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for axis in 0..d {
        perm.shuffle(rng);
        for (p, &k) in points.iter_mut().zip(&perm) {
            let jitter: f64 = Open01.sample(rng);
            p[axis] = (k as f64 + jitter) / n as f64;
        }
    }
    points
}

/// Points at `t = 0` with their initial-data targets in form variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPoints {
    /// `(2, n)`: rows `x`, `t`.
    pub xt: Array2<f64>,
    pub y: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub sd1_initial: InitialPoints,
    pub sd2_initial: InitialPoints,
    pub sd1_interior: Array2<f64>,
    pub sd2_interior: Array2<f64>,
    pub interface: Array2<f64>,
    pub x_interface: f64,
}

fn to_columns(points: &[(f64, f64)]) -> Array2<f64> {
    let mut a = Array2::zeros((2, points.len()));
    for (j, &(x, t)) in points.iter().enumerate() {
        a[[0, j]] = x;
        a[[1, j]] = t;
    }
    a
}

pub fn sample_points<R: Rng + ?Sized>(case: &CaseConfig, counts: PointCounts, rng: &mut R) -> Result<SampleSet, CpinnError> {
    let data = case.riemann_data()?;
    let (x_min, x_max, t_max) = case.domain;
    let x_i = case.interface_x;
    let initial = |n: usize, lo: f64, hi: f64, rng: &mut R| {
        let dist = Uniform::new_inclusive(lo, hi);
        let xs: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let mut y = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        for &x in &xs {
            let s = data.initial_state(x);
            y.push(form_value(case.form, s));
            phi.push(s.phi);
        }
        let pts: Vec<(f64, f64)> = xs.iter().map(|&x| (x, 0.0)).collect();
        InitialPoints {
            xt: to_columns(&pts),
            y,
            phi,
        }
    };
    let sd1_initial = initial(counts.n_u1, x_min, x_i, rng);
    let sd2_initial = initial(counts.n_u2, x_i, x_max, rng);
    let interior = |n: usize, lo: f64, hi: f64, rng: &mut R| {
        let pts: Vec<(f64, f64)> = latin_hypercube(n, 2, rng)
            .into_iter()
            .map(|p| (lo + (hi - lo) * p[0], t_max * p[1]))
            .collect();
        to_columns(&pts)
    };
    let sd1_interior = interior(counts.n_f1, x_min, x_i, rng);
    let sd2_interior = interior(counts.n_f2, x_i, x_max, rng);
    let t_dist = Uniform::new_inclusive(0.0, t_max);
    let iface: Vec<(f64, f64)> = (0..counts.n_i).map(|_| (x_i, t_dist.sample(rng))).collect();
    Ok(SampleSet {
        sd1_initial,
        sd2_initial,
        sd1_interior,
        sd2_interior,
        interface: to_columns(&iface),
        x_interface: x_i,
    })
}

fn form_value(form: Form, s: State) -> f64 {
    match form {
        Form::Conservative => s.u,
        Form::NonConservative => s.u / s.phi,
    }
}

// ---------------------------------------------------------------------------
// Entropy flux

/// Row of the `f̃` table, keyed by the orderings of `u_M`, `u_R` and `u*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyBranch {
    /// `u_M > u_R`, `u_M > u*`: `f̃₁`.
    DecreasingFan,
    /// `u_M > u_R`, `u_M ≤ u*`: `s·u`.
    DecreasingShock,
    /// `u_M ≤ u_R`, `u_M < u*`: `f̃₁`.
    IncreasingFan,
    /// `u_M ≤ u_R`, `u_M ≥ u*`: `s·u`.
    IncreasingShock,
}

impl EntropyBranch {
    pub fn classify(u_m: f64, u_r: f64, u_star: f64) -> Self {
        if u_m > u_r {
            if u_m > u_star {
                Self::DecreasingFan
            } else {
                Self::DecreasingShock
            }
        } else if u_m < u_star {
            Self::IncreasingFan
        } else {
            Self::IncreasingShock
        }
    }

    pub fn uses_fan(self) -> bool {
        matches!(self, Self::DecreasingFan | Self::IncreasingFan)
    }
}

/// Quantities of the right-going wave needed by `f̃`, expressed in network
/// units: saturations divided by `δ2`, porosity by `δ1`, and speeds
/// multiplied by `δ2` so that `s/δ2` is the physical speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyContext {
    pub u_m: f64,
    pub u_r: f64,
    pub u_star: f64,
    /// Rankine-Hugoniot speed between `u_M` and `u_R`.
    pub s: f64,
    /// Speed of the shock piece of the fan (equals `s` for a single shock).
    pub shock_speed: f64,
    /// Saturation interval covered by the shock piece, if any.
    pub shock_interval: Option<(f64, f64)>,
    pub branch: EntropyBranch,
    pub phi_r: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl EntropyContext {
    pub fn from_fan(fan: &RiemannFan, delta1: f64, delta2: f64) -> Self {
        let m = &fan.data.mobility;
        let u_m = fan.u_m;
        let u_r = fan.data.right.u;
        let phi_r = fan.data.right.phi;
        let u_star = fan
            .u_star
            .or_else(|| riemann::u_star(u_r, phi_r, m).ok())
            .unwrap_or(u_r);
        let s = if (u_m - u_r).abs() > riemann::SAME_STATE_TOL {
            riemann::rh_speed(u_m, u_r, phi_r, m)
        } else {
            flux::flux_f_u(u_r, phi_r, m).unwrap_or(0.0)
        };
        let shock_speed = fan.shock_speed().unwrap_or(s);
        Self {
            u_m: u_m / delta2,
            u_r: u_r / delta2,
            u_star: u_star / delta2,
            s: s * delta2,
            shock_speed: shock_speed * delta2,
            shock_interval: fan.shock_interval().map(|(a, b)| (a / delta2, b / delta2)),
            branch: EntropyBranch::classify(u_m, u_r, u_star),
            phi_r: phi_r / delta1,
            delta1,
            delta2,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.branch == EntropyBranch::classify(self.u_m, self.u_r, self.u_star)
    }

    fn on_shock(&self, u: f64) -> bool {
        match self.shock_interval {
            Some((a, b)) => a <= u && u <= b,
            None => false,
        }
    }

    /// `f̃(u)` and its first two derivatives (rescaled units).
    pub fn jet(&self, u: f64, phi: f64, m: &Mobility) -> Result<(f64, f64, f64), CpinnError> {
        if !self.is_consistent() {
            return Err(CpinnError::ContextMismatch);
        }
        let (d1, d2) = (self.delta1, self.delta2);
        if !u.is_finite() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }
        if !self.branch.uses_fan() {
            let c = self.s / d2;
            return Ok((c * u, c, 0.0));
        }
        if self.on_shock(u) {
            let c = self.shock_speed / d2;
            return Ok((c * u, c, 0.0));
        }
        let (up, pp) = (d2 * u, (d1 * phi).max(PHI_FLOOR));
        let f = flux::flux_f(up, pp, m).map_err(RiemannError::from)?;
        let fu = flux::flux_f_u(up, pp, m).map_err(RiemannError::from)?;
        let fuu = flux::flux_f_uu(up, pp, m).map_err(RiemannError::from)?;
        Ok((f / d2, fu, d2 * fuu))
    }
}

/// Oleinik-modified flux `f̃(u)` evaluated with the context's porosity.
pub fn entropy_flux(u: f64, ctx: &EntropyContext, phi_r: f64, m: &Mobility) -> Result<f64, CpinnError> {
    Ok(ctx.jet(u, phi_r, m)?.0)
}

// ---------------------------------------------------------------------------
// Problem encoding

/// Scalings that relate network outputs to physical variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub form: Form,
    /// `(δ1, δ2)` in SD1.
    pub sd1: (f64, f64),
    /// `(δ1, δ2)` in SD2.
    pub sd2: (f64, f64),
    pub phi_r: f64,
    pub x_interface: f64,
}

impl Encoding {
    pub fn for_case(case: &CaseConfig) -> Self {
        let r = case.rescale.unwrap_or(RescaleParams {
            delta1: 1.0,
            delta2: 1.0,
            enabled: false,
            subdomain: SubdomainId::Sd1,
        });
        Self {
            form: case.form,
            sd1: r.deltas_for(SubdomainId::Sd1),
            sd2: r.deltas_for(SubdomainId::Sd2),
            phi_r: case.phi_r,
            x_interface: case.interface_x,
        }
    }

    /// Head scales for `(SD1 [v, w], SD2 [v])`.
    ///
    /// A rescaled SD1 `v` head spans the critical range `[0, critical]`
    /// (see [`critical_level`]) instead of the full physical range: the
    /// non-critical data right of the porosity jump would otherwise sit at
    /// `O(1/δ2)` in network units and swamp the fit.
    pub fn head_scales(&self, phi_l: f64, critical: f64) -> ([f64; 2], [f64; 1]) {
        let phi_max = phi_l.max(self.phi_r);
        let (mut y1, y2) = match self.form {
            Form::Conservative => (phi_max, self.phi_r),
            Form::NonConservative => (1.0, 1.0),
        };
        if self.sd1.1 != 1.0 {
            y1 = critical;
        }
        (
            [HEAD_MARGIN * y1 / self.sd1.1, HEAD_MARGIN * phi_max / self.sd1.0],
            [HEAD_MARGIN * y2 / self.sd2.1],
        )
    }

    /// SD2 network-unit-to-conservative factor `u = c·v`.
    fn sd2_u_factor(&self) -> f64 {
        match self.form {
            Form::Conservative => self.sd2.1,
            Form::NonConservative => self.phi_r * self.sd2.1,
        }
    }
}

/// `max(y_L, y_M)` in form variables: the largest state left of the
/// interface once the initial jump has left SD1.
pub fn critical_level(case: &CaseConfig) -> Result<f64, CpinnError> {
    let fan = riemann::solve_riemann(&case.riemann_data()?)?;
    let y_m = match case.form {
        Form::Conservative => fan.u_m,
        Form::NonConservative => fan.u_m / case.phi_r,
    };
    Ok(case.u_l.max(y_m))
}

/// Fresh SD1/SD2 nets with the standard architecture.
pub fn build_nets<R: Rng + ?Sized>(case: &CaseConfig, rng: &mut R) -> Result<(DenseNet, DenseNet), CpinnError> {
    let enc = Encoding::for_case(case);
    let (s1, s2) = enc.head_scales(case.phi_l, critical_level(case)?);
    let (x_min, x_max, t_max) = case.domain;
    let x_i = case.interface_x;
    let net1 = DenseNet::mlp(2, WIDTH, SD1_DEPTH, &s1, rng).with_input_box(&[(x_min, x_i), (0.0, t_max)]);
    let net2 = DenseNet::mlp(2, WIDTH, SD2_DEPTH, &s2, rng).with_input_box(&[(x_i, x_max), (0.0, t_max)]);
    Ok((net1, net2))
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse_u: f64,
    pub mse_f: f64,
    pub mse_flux: f64,
    pub mse_avg: f64,
}

#[derive(Debug, Clone)]
pub struct SubdomainLoss {
    pub breakdown: LossBreakdown,
    pub grads: Gradients,
}

/// Everything a loss evaluation needs besides the two nets.
#[derive(Debug, Clone)]
pub struct Problem {
    pub encoding: Encoding,
    pub mobility: Mobility,
    pub weights: LossWeights,
    pub ctx: EntropyContext,
    pub samples: SampleSet,
}

/// Interface traces in form variables: `y1, φ1` from SD1, `y2` from SD2.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceTraces {
    pub y1: Vec<f64>,
    pub phi1: Vec<f64>,
    pub y2: Vec<f64>,
}

/// Interface penalties and their sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceTerms {
    pub mse_flux: f64,
    /// Identical on both sides.
    pub mse_avg: f64,
    pub d_y1: Vec<f64>,
    pub d_phi1: Vec<f64>,
    pub d_y2: Vec<f64>,
}

/// `MSE_flux = mean (F₁ − F₂)²`, `MSE_avg = mean (y − {{y}})² + mean (φ − {{φ}})²`.
pub fn interface_terms(traces: &InterfaceTraces, phi_r: f64, form: Form, m: &Mobility) -> InterfaceTerms {
    let n = traces.y1.len();
    let nf = n.max(1) as f64;
    let mut out = InterfaceTerms {
        mse_flux: 0.0,
        mse_avg: 0.0,
        d_y1: vec![0.0; n],
        d_phi1: vec![0.0; n],
        d_y2: vec![0.0; n],
    };
    for i in 0..n {
        let (y1, y2) = (traces.y1[i], traces.y2[i]);
        if !(y1.is_finite() && y2.is_finite() && traces.phi1[i].is_finite()) {
            // a diverged net; report it through the loss value
            out.mse_flux = f64::NAN;
            continue;
        }
        let p1 = traces.phi1[i].max(PHI_FLOOR);
        let (f1, f1_y, f1_p, f2, f2_y) = match form {
            Form::Conservative => {
                let j1 = flux::flux_jet(y1, p1, m).expect("positive porosity");
                let j2 = flux::flux_jet(y2, phi_r, m).expect("positive porosity");
                (j1.f, j1.f_u, j1.f_phi, j2.f, j2.f_u)
            }
            Form::NonConservative => (
                flux::flux_g(y1, m),
                flux::flux_g_u(y1, m),
                0.0,
                flux::flux_g(y2, m),
                flux::flux_g_u(y2, m),
            ),
        };
        let df = f1 - f2;
        out.mse_flux += df * df / nf;
        let dy = 0.5 * (y1 - y2);
        let dp = 0.5 * (traces.phi1[i] - phi_r);
        out.mse_avg += (dy * dy + dp * dp) / nf;
        // d/dy1 of the flux term and the average term.
        out.d_y1[i] = 2.0 * df * f1_y / nf + dy / nf;
        out.d_phi1[i] = 2.0 * df * f1_p / nf + dp / nf;
        out.d_y2[i] = -2.0 * df * f2_y / nf - dy / nf;
    }
    out
}

/// SD1 transport residual and its partials with respect to the network
/// quantities `(v, w, v_x, w_x, v_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sd1Residual {
    pub r: f64,
    pub d_v: f64,
    pub d_w: f64,
    pub d_vx: f64,
    pub d_wx: f64,
    pub d_vt: f64,
}

/// Conservative: `u_t + f(u, φ)_x` with `u = δ2 v`, `φ = δ1 w`.
/// Non-conservative: `φ ũ_t + g(ũ)_x` with `ũ = δ2 v`, `φ = δ1 w`.
pub fn sd1_residual(form: Form, deltas: (f64, f64), q: [f64; 5], m: &Mobility) -> Result<Sd1Residual, CpinnError> {
    let (d1, d2) = deltas;
    let [v, w, v_x, w_x, v_t] = q;
    if q.iter().any(|x| !x.is_finite()) {
        let nan = f64::NAN;
        return Ok(Sd1Residual { r: nan, d_v: nan, d_w: nan, d_vx: nan, d_wx: nan, d_vt: nan });
    }
    Ok(match form {
        Form::Conservative => {
            let phi = (d1 * w).max(PHI_FLOOR);
            let j = flux::flux_jet(d2 * v, phi, m).map_err(RiemannError::from)?;
            Sd1Residual {
                r: d2 * v_t + d2 * j.f_u * v_x + d1 * j.f_phi * w_x,
                d_v: d2 * (d2 * j.f_uu * v_x + d1 * j.f_uphi * w_x),
                d_w: d1 * (d2 * j.f_uphi * v_x + d1 * j.f_phiphi * w_x),
                d_vx: d2 * j.f_u,
                d_wx: d1 * j.f_phi,
                d_vt: d2,
            }
        }
        Form::NonConservative => {
            let ut = d2 * v;
            let g_u = flux::flux_g_u(ut, m);
            let g_uu = flux::flux_g_uu(ut, m);
            Sd1Residual {
                r: d1 * d2 * w * v_t + d2 * g_u * v_x,
                d_v: d2 * d2 * g_uu * v_x,
                d_w: d1 * d2 * v_t,
                d_vx: d2 * g_u,
                d_wx: 0.0,
                d_vt: d1 * d2 * w,
            }
        }
    })
}

impl Problem {
    pub fn new(case: &CaseConfig, samples: SampleSet) -> Result<Self, CpinnError> {
        let data = case.riemann_data()?;
        let fan = riemann::solve_riemann(&data)?;
        let encoding = Encoding::for_case(case);
        let ctx = sd2_context(&fan, &encoding);
        Ok(Self {
            encoding,
            mobility: data.mobility.clone(),
            weights: case.weights,
            ctx,
            samples,
        })
    }

    pub fn traces(&self, net1: &DenseNet, net2: &DenseNet) -> InterfaceTraces {
        let a = net1.forward(self.samples.interface.view());
        let b = net2.forward(self.samples.interface.view());
        let (d1, d2) = (self.encoding.sd1, self.encoding.sd2);
        InterfaceTraces {
            y1: a.row(0).iter().map(|v| d1.1 * v).collect(),
            phi1: a.row(1).iter().map(|w| d1.0 * w).collect(),
            y2: b.row(0).iter().map(|v| d2.1 * v).collect(),
        }
    }

    fn interface(&self, net1: &DenseNet, net2: &DenseNet) -> InterfaceTerms {
        interface_terms(&self.traces(net1, net2), self.encoding.phi_r, self.encoding.form, &self.mobility)
    }

    pub fn loss_sd1(&self, net1: &DenseNet, net2: &DenseNet) -> Result<SubdomainLoss, CpinnError> {
        let iface = self.interface(net1, net2);
        self.sd1_with(net1, &iface)
    }

    pub fn loss_sd2(&self, net1: &DenseNet, net2: &DenseNet) -> Result<SubdomainLoss, CpinnError> {
        let iface = self.interface(net1, net2);
        self.sd2_with(net2, &iface)
    }

    /// Both subdomain losses, sharing one interface evaluation.
    pub fn losses(&self, net1: &DenseNet, net2: &DenseNet) -> Result<(SubdomainLoss, SubdomainLoss), CpinnError> {
        let iface = self.interface(net1, net2);
        Ok((self.sd1_with(net1, &iface)?, self.sd2_with(net2, &iface)?))
    }

    fn sd1_with(&self, net: &DenseNet, iface: &InterfaceTerms) -> Result<SubdomainLoss, CpinnError> {
        let w = self.weights;
        let (d1, d2) = self.encoding.sd1;
        let m = &self.mobility;
        let mut grads = Gradients::zeros_like(net);

        // initial data, in network units
        let init = &self.samples.sd1_initial;
        let mut tape = net.record(init.xt.view(), false);
        let n = init.y.len();
        let nf = n.max(1) as f64;
        let out = tape.output();
        let mut seeds = OutputSeeds::zeros(2, n, false);
        let mut mse_u = 0.0;
        for j in 0..n {
            let ev = out[[0, j]] - init.y[j] / d2;
            let ew = out[[1, j]] - init.phi[j] / d1;
            mse_u += (ev * ev + ew * ew) / nf;
            seeds.value[[0, j]] = w.omega_u * 2.0 * ev / nf;
            seeds.value[[1, j]] = w.omega_u * 2.0 * ew / nf;
        }
        grads.add_assign(&tape.backward(&seeds)?);

        // residuals
        let xt = &self.samples.sd1_interior;
        let mut tape = net.record(xt.view(), true);
        let n = xt.ncols();
        let nf = n.max(1) as f64;
        let mut seeds = OutputSeeds::zeros(2, n, true);
        let mut mse_f = 0.0;
        {
            let y = tape.output();
            let yx = tape.output_dx().expect("tangents");
            let yt = tape.output_dt().expect("tangents");
            let (sv, rest) = (&mut seeds.value, (seeds.dx.as_mut().unwrap(), seeds.dt.as_mut().unwrap()));
            let (sx, st) = rest;
            for j in 0..n {
                let (v, wv) = (y[[0, j]], y[[1, j]]);
                let (v_x, w_x) = (yx[[0, j]], yx[[1, j]]);
                let (v_t, w_t) = (yt[[0, j]], yt[[1, j]]);
                let c = w.omega_f * 2.0 / nf;
                let res = sd1_residual(self.encoding.form, (d1, d2), [v, wv, v_x, w_x, v_t], m)?;
                let r = res.r;
                mse_f += r * r / nf;
                sv[[0, j]] += c * r * res.d_v;
                sv[[1, j]] += c * r * res.d_w;
                sx[[0, j]] += c * r * res.d_vx;
                sx[[1, j]] += c * r * res.d_wx;
                st[[0, j]] += c * r * res.d_vt;
                mse_f += w_t * w_t / nf;
                st[[1, j]] += c * w_t;
            }
        }
        grads.add_assign(&tape.backward(&seeds)?);

        // interface, chained from form variables to network units
        let xi = &self.samples.interface;
        let mut tape = net.record(xi.view(), false);
        let n = xi.ncols();
        let mut seeds = OutputSeeds::zeros(2, n, false);
        for j in 0..n {
            seeds.value[[0, j]] = w.omega_i * iface.d_y1[j] * d2;
            seeds.value[[1, j]] = w.omega_i * iface.d_phi1[j] * d1;
        }
        grads.add_assign(&tape.backward(&seeds)?);

        let total = w.omega_u * mse_u + w.omega_f * mse_f + w.omega_i * (iface.mse_flux + iface.mse_avg);
        Ok(SubdomainLoss {
            breakdown: LossBreakdown {
                total,
                mse_u,
                mse_f,
                mse_flux: iface.mse_flux,
                mse_avg: iface.mse_avg,
            },
            grads,
        })
    }

    fn sd2_with(&self, net: &DenseNet, iface: &InterfaceTerms) -> Result<SubdomainLoss, CpinnError> {
        let w = self.weights;
        let (_, d2) = self.encoding.sd2;
        let m = &self.mobility;
        let ctx = &self.ctx;
        let kappa = match self.encoding.form {
            Form::Conservative => 1.0,
            Form::NonConservative => self.encoding.sd2_u_factor(),
        };
        let mut grads = Gradients::zeros_like(net);

        let init = &self.samples.sd2_initial;
        let mut tape = net.record(init.xt.view(), false);
        let n = init.y.len();
        let nf = n.max(1) as f64;
        let out = tape.output();
        let mut seeds = OutputSeeds::zeros(1, n, false);
        let mut mse_u = 0.0;
        for j in 0..n {
            let ev = out[[0, j]] - init.y[j] / d2;
            mse_u += ev * ev / nf;
            seeds.value[[0, j]] = w.omega_u * 2.0 * ev / nf;
        }
        grads.add_assign(&tape.backward(&seeds)?);

        let xt = &self.samples.sd2_interior;
        let mut tape = net.record(xt.view(), true);
        let n = xt.ncols();
        let nf = n.max(1) as f64;
        let mut seeds = OutputSeeds::zeros(1, n, true);
        let mut mse_f = 0.0;
        {
            let y = tape.output();
            let yx = tape.output_dx().expect("tangents");
            let yt = tape.output_dt().expect("tangents");
            let c = w.omega_f * 2.0 / nf;
            for j in 0..n {
                let (v, v_x, v_t) = (y[[0, j]], yx[[0, j]], yt[[0, j]]);
                let (_, fp, fpp) = ctx.jet(v, ctx.phi_r, m)?;
                let r = kappa * (v_t + fp * v_x);
                mse_f += r * r / nf;
                seeds.dt.as_mut().unwrap()[[0, j]] = c * r * kappa;
                seeds.dx.as_mut().unwrap()[[0, j]] = c * r * kappa * fp;
                seeds.value[[0, j]] = c * r * kappa * fpp * v_x;
            }
        }
        grads.add_assign(&tape.backward(&seeds)?);

        let xi = &self.samples.interface;
        let mut tape = net.record(xi.view(), false);
        let n = xi.ncols();
        let mut seeds = OutputSeeds::zeros(1, n, false);
        for j in 0..n {
            seeds.value[[0, j]] = w.omega_i * iface.d_y2[j] * d2;
        }
        grads.add_assign(&tape.backward(&seeds)?);

        let total = w.omega_u * mse_u + w.omega_f * mse_f + w.omega_i * (iface.mse_flux + iface.mse_avg);
        Ok(SubdomainLoss {
            breakdown: LossBreakdown {
                total,
                mse_u,
                mse_f,
                mse_flux: iface.mse_flux,
                mse_avg: iface.mse_avg,
            },
            grads,
        })
    }
}

/// Context in SD2 network units: conservative `v = u/δ2`; non-conservative
/// `v = ũ/δ2 = u/(φ_R δ2)`.
pub fn sd2_context(fan: &RiemannFan, enc: &Encoding) -> EntropyContext {
    EntropyContext::from_fan(fan, enc.sd2.0, enc.sd2_u_factor())
}

// ---------------------------------------------------------------------------
// Prediction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpinnModel {
    pub encoding: Encoding,
    pub sd1: DenseNet,
    pub sd2: DenseNet,
}

impl CpinnModel {
    /// Physical conservative state at `(x, t)`.
    pub fn predict(&self, x: f64, t: f64) -> State {
        self.predict_batch(&[(x, t)])[0]
    }

    pub fn predict_batch(&self, points: &[(f64, f64)]) -> Vec<State> {
        let enc = &self.encoding;
        let left: Vec<usize> = (0..points.len()).filter(|&i| points[i].0 <= enc.x_interface).collect();
        let right: Vec<usize> = (0..points.len()).filter(|&i| points[i].0 > enc.x_interface).collect();
        let mut out = vec![State::new(0.0, 0.0); points.len()];
        let pick = |idx: &[usize]| to_columns(&idx.iter().map(|&i| points[i]).collect::<Vec<_>>());
        if !left.is_empty() {
            let y = self.sd1.forward(pick(&left).view());
            for (k, &i) in left.iter().enumerate() {
                let phi = enc.sd1.0 * y[[1, k]];
                let val = enc.sd1.1 * y[[0, k]];
                out[i] = to_state(enc.form, val, phi);
            }
        }
        if !right.is_empty() {
            let y = self.sd2.forward(pick(&right).view());
            for (k, &i) in right.iter().enumerate() {
                out[i] = to_state(enc.form, enc.sd2.1 * y[[0, k]], enc.phi_r);
            }
        }
        out
    }

    pub fn solution_field(&self, case: &CaseConfig, seed: Option<u64>) -> SolutionField {
        let pts = case.eval.points(case.domain);
        let states = self.predict_batch(&pts);
        let samples = pts
            .iter()
            .zip(states)
            .map(|(&(x, t), s)| Sample { x, t, u: s.u, phi: s.phi })
            .collect();
        SolutionField::new(&case.name, Method::Cpinn, seed, samples).with_form(case.form)
    }
}

fn to_state(form: Form, y: f64, phi: f64) -> State {
    match form {
        Form::Conservative => State::new(y, phi),
        Form::NonConservative => State::new(phi * y, phi),
    }
}

pub fn predict(model: &CpinnModel, x: f64, t: f64) -> State {
    model.predict(x, t)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_sd1: f64,
    pub loss_sd2: f64,
    pub l2_vs_exact: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub counts: PointCounts,
    pub lr0: f64,
    /// Epochs between metric rows with an L2 evaluation (0 disables them).
    pub eval_every: usize,
    /// Epochs between checkpoints (0 disables them).
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    pub model: CpinnModel,
    pub history: Vec<EpochMetrics>,
    pub l2: f64,
    pub field: SolutionField,
}

struct Run {
    problem: Problem,
    model: CpinnModel,
    opt1: AdamState,
    opt2: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

fn checkpoint_of(run: &Run) -> Checkpoint {
    Checkpoint::new(
        run.epoch,
        vec![run.model.sd1.clone(), run.model.sd2.clone()],
        vec![run.opt1.clone(), run.opt2.clone()],
        run.rng.clone(),
    )
}

/// Trains one seed. Samples and initial weights are drawn from a
/// `ChaCha8Rng` seeded with `seed`, so equal seeds replay identically.
pub fn train(case: &CaseConfig, seed: u64, opts: &TrainOptions) -> Result<TrainOutcome, CpinnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sample_points(case, opts.counts, &mut rng)?;
    let problem = Problem::new(case, samples)?;
    let (sd1, sd2) = build_nets(case, &mut rng)?;
    let exact = crate::harness::exact_field(case)?;
    let eval_pts = case.eval.points(case.domain);
    let cfg = AdamConfig::default();
    let mut run = Run {
        opt1: AdamState::new(&sd1, cfg),
        opt2: AdamState::new(&sd2, cfg),
        model: CpinnModel {
            encoding: problem.encoding,
            sd1,
            sd2,
        },
        problem,
        rng,
        epoch: 0,
    };
    let schedule = LrSchedule::new(opts.lr0, opts.epochs);
    let mut history = Vec::new();
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join(format!("metrics-seed{seed}.csv")))?;
            writeln!(f, "epoch,loss_sd1,loss_sd2,l2_vs_exact,lr")?;
            Some(f)
        }
        None => None,
    };

    let l2_now = |model: &CpinnModel| {
        let states = model.predict_batch(&eval_pts);
        let samples: Vec<Sample> = eval_pts
            .iter()
            .zip(states)
            .map(|(&(x, t), s)| Sample { x, t, u: s.u, phi: s.phi })
            .collect();
        let field = SolutionField::new(&case.name, Method::Cpinn, Some(seed), samples).with_form(case.form);
        crate::harness::relative_l2(&field, &exact).unwrap_or(f64::NAN)
    };

    // state before the most recent step, which is what a divergence report saves
    let mut last_finite: Option<Checkpoint> = None;
    while run.epoch < opts.epochs {
        let lr = schedule.at(run.epoch);
        let (l1, l2) = run.problem.losses(&run.model.sd1, &run.model.sd2)?;
        let (a, b) = (l1.breakdown.total, l2.breakdown.total);
        if !a.is_finite() || !b.is_finite() {
            let path = match (&opts.out_dir, &last_finite) {
                (Some(dir), Some(cp)) => {
                    let p = dir.join(format!("diverged-seed{seed}.json"));
                    cp.save(&p)?;
                    Some(p)
                }
                _ => None,
            };
            warn!("{}: seed {seed} diverged at epoch {}", case.name, run.epoch);
            return Err(CpinnError::DivergenceDetected {
                epoch: run.epoch,
                checkpoint: path,
            });
        }
        if opts.out_dir.is_some() {
            last_finite = Some(checkpoint_of(&run));
        }
        run.opt1.step(&mut run.model.sd1, &l1.grads, lr);
        run.opt2.step(&mut run.model.sd2, &l2.grads, lr);
        run.epoch += 1;

        let last = run.epoch == opts.epochs;
        let log_row = opts.eval_every > 0 && (run.epoch.is_multiple_of(opts.eval_every) || last);
        let row = EpochMetrics {
            epoch: run.epoch,
            loss_sd1: a,
            loss_sd2: b,
            l2_vs_exact: log_row.then(|| l2_now(&run.model)),
            lr,
        };
        if let Some(f) = csv.as_mut() {
            let l2s = row.l2_vs_exact.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{},{},{}", row.epoch, a, b, l2s, lr)?;
        }
        if let Some(l2v) = row.l2_vs_exact {
            info!(
                "{} seed {seed} epoch {}: loss {:.3e} + {:.3e}, L2 {:.3e}",
                case.name, row.epoch, a, b, l2v
            );
        }
        history.push(row);
        if opts.checkpoint_every > 0 && (run.epoch.is_multiple_of(opts.checkpoint_every) || last) {
            if let Some(dir) = &opts.out_dir {
                checkpoint_of(&run).save(&dir.join(format!("checkpoint-seed{seed}.json")))?;
            }
        }
    }

    let field = run.model.solution_field(case, Some(seed));
    let l2 = crate::harness::relative_l2(&field, &exact).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        seed,
        model: run.model,
        history,
        l2,
        field,
    })
}

/// Restores the nets from a checkpoint written by [`train`].
pub fn model_from_checkpoint(case: &CaseConfig, path: &Path) -> Result<CpinnModel, CpinnError> {
    let cp = Checkpoint::load(path)?;
    let mut nets = cp.nets.into_iter();
    let (Some(sd1), Some(sd2)) = (nets.next(), nets.next()) else {
        return Err(NnError::Checkpoint("expected two nets".into()).into());
    };
    Ok(CpinnModel {
        encoding: Encoding::for_case(case),
        sd1,
        sd2,
    })
}

/// Trains every seed and reports the mean relative L2.
pub fn train_seeds(case: &CaseConfig, seeds: &[u64], opts: &TrainOptions) -> Result<(Vec<TrainOutcome>, f64), CpinnError> {
    let mut outs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        outs.push(train(case, seed, opts)?);
    }
    let mean = outs.iter().map(|o| o.l2).sum::<f64>() / outs.len().max(1) as f64;
    Ok((outs, mean))
}

/// Run manifest: case, options and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub case: CaseConfig,
    pub options: TrainOptions,
    pub seeds: Vec<u64>,
    pub l2: Vec<f64>,
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CpinnError> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
