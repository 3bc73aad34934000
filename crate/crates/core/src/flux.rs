//! Closed-form flux algebra for the generalized Buckley-Leverett equation.
//!
//! The conservative flux is `f(u, φ) = u² / D(u, φ)` with
//! `D(u, φ) = u² + M (φ − u)²`, where `u = φ ũ` and `ũ` is the water
//! saturation. Everything here is a pure function of its arguments.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluxError {
    #[error("flux is undefined at the degenerate corner u = phi = 0")]
    DegenerateState,
    #[error("mobility ratio must be positive and finite, got {0}")]
    InvalidMobility(f64),
    #[error("no sign change of f_uu along rays phi = m*u for m in (1, {upper}] (M = {mobility})")]
    NoRoot { mobility: f64, upper: f64 },
}

/// Upper end of the bracket used to locate `m*`.
pub const M_STAR_BRACKET_MAX: f64 = 50.0;
const M_STAR_TOL: f64 = 1e-12;

/// Water/oil viscosity ratio `M`.
///
/// The inflection ray `m*` is computed on first use and cached.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Mobility {
    value: f64,
    #[serde(skip)]
    m_star: OnceLock<Result<f64, FluxError>>,
}

impl Mobility {
    pub fn new(value: f64) -> Result<Self, FluxError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(FluxError::InvalidMobility(value));
        }
        Ok(Self {
            value,
            m_star: OnceLock::new(),
        })
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.value
    }

    /// `M / (M + 1)`, the reduced ratio appearing in the tangency cubic.
    #[inline]
    pub fn reduced(&self) -> f64 {
        self.value / (self.value + 1.0)
    }
}

impl Default for Mobility {
    fn default() -> Self {
        Self::new(2.0).expect("default mobility is valid")
    }
}

impl fmt::Debug for Mobility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Mobility").field(&self.value).finish()
    }
}

impl PartialEq for Mobility {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl TryFrom<f64> for Mobility {
    type Error = FluxError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Mobility::new(value)
    }
}

impl From<Mobility> for f64 {
    fn from(m: Mobility) -> f64 {
        m.value
    }
}

/// A point `(u, φ)` of the phase plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub u: f64,
    pub phi: f64,
}

impl State {
    pub fn new(u: f64, phi: f64) -> Self {
        Self { u, phi }
    }

    /// `0 ≤ u ≤ φ` and `φ > 0`.
    pub fn is_admissible(&self) -> bool {
        self.phi > 0.0 && self.u >= 0.0 && self.u <= self.phi
    }

    /// Saturation `ũ = u / φ`.
    pub fn saturation(&self) -> f64 {
        self.u / self.phi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `0 < u < φ < m* u`, where `f_uu < 0`.
    OmegaMinus,
    /// `0 < u < m* u < φ`, where `f_uu > 0`.
    OmegaPlus,
    Boundary,
}

#[inline]
pub fn denom(u: f64, phi: f64, m: &Mobility) -> f64 {
    let v = phi - u;
    u * u + m.value * v * v
}

#[inline]
fn checked_denom(u: f64, phi: f64, m: &Mobility) -> Result<f64, FluxError> {
    let d = denom(u, phi, m);
    if d > 0.0 {
        Ok(d)
    } else {
        Err(FluxError::DegenerateState)
    }
}

pub fn flux_f(u: f64, phi: f64, m: &Mobility) -> Result<f64, FluxError> {
    let d = checked_denom(u, phi, m)?;
    Ok(u * u / d)
}

/// `λ₁ = f_u = 2Mφu(φ − u) / D²`.
pub fn flux_f_u(u: f64, phi: f64, m: &Mobility) -> Result<f64, FluxError> {
    let d = checked_denom(u, phi, m)?;
    Ok(2.0 * m.value * phi * u * (phi - u) / (d * d))
}

/// `f_uu = (2Mφ / D³) [−u³ + (φ − u)(−3u² + 3Mu(φ − u) + M(φ − u)²)]`.
pub fn flux_f_uu(u: f64, phi: f64, m: &Mobility) -> Result<f64, FluxError> {
    let d = checked_denom(u, phi, m)?;
    Ok(2.0 * m.value * phi * curvature_bracket(u, phi, m.value) / (d * d * d))
}

#[inline]
fn curvature_bracket(u: f64, phi: f64, m: f64) -> f64 {
    let v = phi - u;
    -u * u * u + v * (-3.0 * u * u + 3.0 * m * u * v + m * v * v)
}

/// `f_φ = −2Mu²(φ − u) / D²`.
pub fn flux_f_phi(u: f64, phi: f64, m: &Mobility) -> Result<f64, FluxError> {
    let d = checked_denom(u, phi, m)?;
    Ok(-2.0 * m.value * u * u * (phi - u) / (d * d))
}

/// First and second partial derivatives of `f(u, φ)`.
///
/// Needed by the PINN residual gradients, where `f(u, φ)_x` is expanded by
/// the chain rule and then differentiated once more with respect to the
/// network outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxJet {
    pub f: f64,
    pub f_u: f64,
    pub f_phi: f64,
    pub f_uu: f64,
    pub f_uphi: f64,
    pub f_phiphi: f64,
}

pub fn flux_jet(u: f64, phi: f64, m: &Mobility) -> Result<FluxJet, FluxError> {
    let d = checked_denom(u, phi, m)?;
    let mv = m.value;
    let v = phi - u;
    let d2 = d * d;
    let d3 = d2 * d;
    let f = u * u / d;
    let f_u = 2.0 * mv * phi * u * v / d2;
    let f_phi = -2.0 * mv * u * u * v / d2;
    let f_uu = 2.0 * mv * phi * curvature_bracket(u, phi, mv) / d3;
    // f_φ = −2M P / D² with P = u² v; D_u = 2u − 2Mv, D_φ = 2Mv.
    let p = u * u * v;
    let p_u = 2.0 * u * v - u * u;
    let d_u = 2.0 * u - 2.0 * mv * v;
    let f_uphi = -2.0 * mv * (p_u * d - 2.0 * p * d_u) / d3;
    let f_phiphi = -2.0 * mv * u * u * (d - 4.0 * mv * v * v) / d3;
    Ok(FluxJet {
        f,
        f_u,
        f_phi,
        f_uu,
        f_uphi,
        f_phiphi,
    })
}

/// Locates the ray `φ = m* u` on which `f_uu` vanishes.
///
/// `f_uu` is homogeneous along rays, so its sign on `φ = m u` is that of
/// `M w³ + 3M w² − 3w − 1` with `w = m − 1`; bisection runs on `f_uu(1, m)`.
pub fn m_star(m: &Mobility) -> Result<f64, FluxError> {
    m.m_star.get_or_init(|| locate_m_star(m.value)).clone()
}

fn locate_m_star(mv: f64) -> Result<f64, FluxError> {
    let sign_at = |ray: f64| curvature_bracket(1.0, ray, mv);
    let (mut lo, mut hi) = (1.0_f64, M_STAR_BRACKET_MAX);
    // Ω₋ side (negative) just above 1, Ω₊ side (positive) at the top.
    if !(sign_at(lo) < 0.0 && sign_at(hi) > 0.0) {
        return Err(FluxError::NoRoot {
            mobility: mv,
            upper: M_STAR_BRACKET_MAX,
        });
    }
    while hi - lo > M_STAR_TOL {
        let mid = 0.5 * (lo + hi);
        if sign_at(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn classify_region(s: State, m: &Mobility) -> Region {
    let Ok(ms) = m_star(m) else {
        return Region::Boundary;
    };
    let (u, phi) = (s.u, s.phi);
    if !(0.0 < u && u < phi) {
        return Region::Boundary;
    }
    let ray = ms * u;
    if phi < ray {
        Region::OmegaMinus
    } else if ray < phi {
        Region::OmegaPlus
    } else {
        Region::Boundary
    }
}

/// Inflection point of `u ↦ f(u, φ)` on `(0, φ)`.
///
/// Found by bisection on the sign of `f_uu`, which is positive near `u = 0`
/// and negative at `u = φ` for every `M > 0`.
pub fn inflection_point(phi: f64, m: &Mobility) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, phi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if curvature_bracket(mid, phi, m.value) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * phi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Non-conservative flux `g(ũ) = ũ² / (ũ² + M(1 − ũ)²)`.
#[inline]
pub fn flux_g(u_tilde: f64, m: &Mobility) -> f64 {
    let v = 1.0 - u_tilde;
    u_tilde * u_tilde / (u_tilde * u_tilde + m.value * v * v)
}

#[inline]
pub fn flux_g_u(u_tilde: f64, m: &Mobility) -> f64 {
    let d = denom(u_tilde, 1.0, m);
    2.0 * m.value * u_tilde * (1.0 - u_tilde) / (d * d)
}

#[inline]
pub fn flux_g_uu(u_tilde: f64, m: &Mobility) -> f64 {
    let d = denom(u_tilde, 1.0, m);
    2.0 * m.value * curvature_bracket(u_tilde, 1.0, m.value) / (d * d * d)
}
