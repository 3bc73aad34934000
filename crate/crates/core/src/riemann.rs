//! Exact Riemann solver for `u_t + f(u, φ(x))_x = 0` with a single porosity
//! jump at `x = 0`.
//!
//! The solution is a zero-speed standing wave from `(u_L, φ_L)` to
//! `(u_M, φ_R)` along the curve `u/φ = const`, followed by the entropy
//! solution of the scalar problem with flux `f(·, φ_R)` between `u_M` and
//! `u_R`. That flux has a single inflection, so the 1-wave is a shock, a
//! rarefaction, or a rarefaction followed by a contact shock at `u*`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flux::{self, FluxError, Mobility, State};

pub const FAN_SCHEMA: &str = "fan_v1";

/// Equality tolerance for `u_M = u_R` (the 1-wave is omitted below it).
pub const SAME_STATE_TOL: f64 = 1e-12;
const RAREFACTION_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiemannError {
    #[error("invalid Riemann data: {0}")]
    InvalidData(String),
    #[error("u* requires M > 1, got M = {0}")]
    MobilityOutOfRange(f64),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error("fan document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiemannData {
    pub left: State,
    pub right: State,
    pub mobility: Mobility,
}

impl RiemannData {
    pub fn new(left: State, right: State, mobility: Mobility) -> Result<Self, RiemannError> {
        for (side, s) in [("left", left), ("right", right)] {
            if !(s.phi > 0.0 && s.u > 0.0 && s.u <= s.phi) {
                return Err(RiemannError::InvalidData(format!(
                    "{side} state must satisfy 0 < u <= phi, got u = {}, phi = {}",
                    s.u, s.phi
                )));
            }
        }
        Ok(Self {
            left,
            right,
            mobility,
        })
    }

    /// Initial data; the jump point itself belongs to the left state.
    pub fn initial_state(&self, x: f64) -> State {
        if x <= 0.0 {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandingWave {
    pub u_minus: f64,
    pub u_plus: f64,
    pub phi_minus: f64,
    pub phi_plus: f64,
    pub speed: f64,
}

impl StandingWave {
    /// `f(u₋, φ₋) − f(u₊, φ₊)`, which vanishes for a zero-speed jump.
    pub fn rh_residual(&self, m: &Mobility) -> f64 {
        let a = flux::flux_f(self.u_minus, self.phi_minus, m).unwrap_or(0.0);
        let b = flux::flux_f(self.u_plus, self.phi_plus, m).unwrap_or(0.0);
        a - b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaveKind {
    Shock,
    Rarefaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavePiece {
    pub kind: WaveKind,
    pub u_left: f64,
    pub u_right: f64,
    pub speed_left: f64,
    pub speed_right: f64,
}

impl WavePiece {
    fn shock(u_left: f64, u_right: f64, phi: f64, m: &Mobility) -> Self {
        let s = rh_speed(u_left, u_right, phi, m);
        Self {
            kind: WaveKind::Shock,
            u_left,
            u_right,
            speed_left: s,
            speed_right: s,
        }
    }

    fn rarefaction(u_left: f64, u_right: f64, phi: f64, m: &Mobility) -> Self {
        Self {
            kind: WaveKind::Rarefaction,
            u_left,
            u_right,
            speed_left: char_speed(u_left, phi, m),
            speed_right: char_speed(u_right, phi, m),
        }
    }

    /// Closed interval of `u` values swept by the piece.
    pub fn u_range(&self) -> (f64, f64) {
        (self.u_left.min(self.u_right), self.u_left.max(self.u_right))
    }
}

fn char_speed(u: f64, phi: f64, m: &Mobility) -> f64 {
    flux::flux_f_u(u, phi, m).unwrap_or(0.0)
}

fn flux_at(u: f64, phi: f64, m: &Mobility) -> f64 {
    flux::flux_f(u, phi, m).unwrap_or(0.0)
}

/// Rankine-Hugoniot speed of a jump between `a` and `b` at porosity `phi`.
pub fn rh_speed(a: f64, b: f64, phi: f64, m: &Mobility) -> f64 {
    if (a - b).abs() <= SAME_STATE_TOL {
        return char_speed(0.5 * (a + b), phi, m);
    }
    (flux_at(a, phi, m) - flux_at(b, phi, m)) / (a - b)
}

/// `u_M = (u_L / φ_L) φ_R`, the right state of the standing wave.
pub fn middle_state(d: &RiemannData) -> f64 {
    d.left.u / d.left.phi * d.right.phi
}

/// Tangency state `u*` with `f_u(u*) = (f(u*) − f(u_R)) / (u* − u_R)`.
///
/// Requires `M > 1`.
pub fn u_star(u_r: f64, phi_r: f64, m: &Mobility) -> Result<f64, RiemannError> {
    if m.value() <= 1.0 {
        return Err(RiemannError::MobilityOutOfRange(m.value()));
    }
    Ok(tangent_point(u_r, phi_r, m))
}

/// Root `u₊` of `(φ − 2u_R) y² + 2φu_R y − M̃φ³` inside `(0, φ)`.
///
/// Written as `−2c / (b + √Δ)`, which equals the textbook
/// `(−b + √Δ) / 2a` but stays finite as `φ → 2u_R`. Valid for any `M > 0`.
pub(crate) fn tangent_point(u_r: f64, phi: f64, m: &Mobility) -> f64 {
    if (phi - 2.0 * u_r).abs() <= 1e-12 * phi {
        return 2.0 * m.value() * u_r / (m.value() + 1.0);
    }
    let mt = m.reduced();
    let a = phi - 2.0 * u_r;
    let b = 2.0 * phi * u_r;
    let c = -mt * phi * phi * phi;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    -2.0 * c / (b + disc.sqrt())
}

/// Discriminant of the tangency quadratic (nonnegative by construction).
pub fn tangency_discriminant(u_r: f64, phi_r: f64, m: &Mobility) -> f64 {
    let mt = m.reduced();
    let b = 2.0 * phi_r * u_r;
    b * b + 4.0 * mt * (phi_r - 2.0 * u_r) * phi_r.powi(3)
}

/// Entropy-admissible decomposition of the jump `u_from → u_to` (in
/// `x`-order) for the flux `f(·, φ)`.
///
/// Decreasing jumps follow the upper concave envelope, increasing jumps the
/// lower convex envelope. The flux is convex below its inflection and
/// concave above, so the envelope is either the chord (single shock),
/// the flux itself (single rarefaction), or the flux up to the tangency
/// point `u*` followed by the chord from `u*` to `u_to`.
pub fn envelope_construct(u_from: f64, u_to: f64, phi: f64, m: &Mobility) -> Vec<WavePiece> {
    if (u_from - u_to).abs() <= SAME_STATE_TOL {
        return Vec::new();
    }
    let ui = flux::inflection_point(phi, m);
    let decreasing = u_from > u_to;
    // "rarefaction side" of the inflection: concave part for decreasing
    // jumps, convex part for increasing ones.
    let on_fan_side = |u: f64| if decreasing { u >= ui } else { u <= ui };
    if on_fan_side(u_from) && on_fan_side(u_to) {
        return vec![WavePiece::rarefaction(u_from, u_to, phi, m)];
    }
    // Monotonicity of the jump means u_to on the fan side forces u_from there
    // too, so only "neither" and "u_from only" remain.
    if !on_fan_side(u_from) {
        return vec![WavePiece::shock(u_from, u_to, phi, m)];
    }
    let us = tangent_point(u_to, phi, m);
    let tangency_inside = if decreasing { us < u_from } else { us > u_from };
    if tangency_inside {
        vec![
            WavePiece::rarefaction(u_from, us, phi, m),
            WavePiece::shock(us, u_to, phi, m),
        ]
    } else {
        vec![WavePiece::shock(u_from, u_to, phi, m)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiemannFan {
    pub data: RiemannData,
    pub u_m: f64,
    pub standing: StandingWave,
    pub pieces: Vec<WavePiece>,
    pub u_star: Option<f64>,
}

pub fn solve_riemann(d: &RiemannData) -> Result<RiemannFan, RiemannError> {
    let m = &d.mobility;
    let u_m = middle_state(d);
    let phi_r = d.right.phi;
    let standing = StandingWave {
        u_minus: d.left.u,
        u_plus: u_m,
        phi_minus: d.left.phi,
        phi_plus: phi_r,
        speed: 0.0,
    };
    let (pieces, u_star) = if (u_m - d.right.u).abs() <= SAME_STATE_TOL {
        (Vec::new(), None)
    } else {
        let us = u_star(d.right.u, phi_r, m)?;
        (envelope_construct(u_m, d.right.u, phi_r, m), Some(us))
    };
    Ok(RiemannFan {
        data: d.clone(),
        u_m,
        standing,
        pieces,
        u_star,
    })
}

impl RiemannFan {
    /// `U(x, t)` for `t > 0`; at `t ≤ 0` the initial data is returned.
    pub fn evaluate(&self, x: f64, t: f64) -> State {
        if t <= 0.0 {
            return self.data.initial_state(x);
        }
        if x < 0.0 {
            return self.data.left;
        }
        let phi = self.data.right.phi;
        State::new(self.u_at_speed(x / t), phi)
    }

    fn u_at_speed(&self, xi: f64) -> f64 {
        let m = &self.data.mobility;
        let phi = self.data.right.phi;
        let mut current = self.u_m;
        for p in &self.pieces {
            if xi < p.speed_left {
                return current;
            }
            match p.kind {
                WaveKind::Shock => {}
                WaveKind::Rarefaction => {
                    if xi <= p.speed_right {
                        return invert_speed(xi, p, phi, m);
                    }
                }
            }
            current = p.u_right;
        }
        current
    }

    /// Conservative variables at `(x, t)` divided by `φ`.
    pub fn evaluate_saturation(&self, x: f64, t: f64) -> f64 {
        let s = self.evaluate(x, t);
        to_nonconservative(s.u, s.phi)
    }

    /// `[min, max]` of the `u` values crossed by the shock piece, if any.
    pub fn shock_interval(&self) -> Option<(f64, f64)> {
        self.pieces
            .iter()
            .find(|p| p.kind == WaveKind::Shock)
            .map(|p| p.u_range())
    }

    pub fn shock_speed(&self) -> Option<f64> {
        self.pieces
            .iter()
            .find(|p| p.kind == WaveKind::Shock)
            .map(|p| p.speed_left)
    }

    pub fn total_variation(&self) -> f64 {
        (self.standing.u_minus - self.standing.u_plus).abs()
            + self
                .pieces
                .iter()
                .map(|p| (p.u_left - p.u_right).abs())
                .sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        let doc = FanDocument {
            schema: FAN_SCHEMA.to_string(),
            data: self.data.clone(),
            u_m: self.u_m,
            u_star: self.u_star,
            standing: self.standing,
            pieces: self.pieces.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("fan document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RiemannError> {
        let doc: FanDocument =
            serde_json::from_str(text).map_err(|e| RiemannError::Document(e.to_string()))?;
        if doc.schema != FAN_SCHEMA {
            return Err(RiemannError::Document(format!(
                "unsupported schema {:?}",
                doc.schema
            )));
        }
        Ok(Self {
            data: doc.data,
            u_m: doc.u_m,
            standing: doc.standing,
            pieces: doc.pieces,
            u_star: doc.u_star,
        })
    }
}

pub fn evaluate_fan(fan: &RiemannFan, x: f64, t: f64) -> State {
    fan.evaluate(x, t)
}

/// `ũ = u / φ`.
pub fn to_nonconservative(u: f64, phi: f64) -> f64 {
    u / phi
}

#[derive(Serialize, Deserialize)]
struct FanDocument {
    schema: String,
    data: RiemannData,
    u_m: f64,
    u_star: Option<f64>,
    standing: StandingWave,
    pieces: Vec<WavePiece>,
}

/// Solves `f_u(u, φ) = ξ` on a rarefaction piece by bisection.
fn invert_speed(xi: f64, p: &WavePiece, phi: f64, m: &Mobility) -> f64 {
    // along the piece, speed grows from u_left to u_right
    let (mut a, mut b) = (p.u_left, p.u_right);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if char_speed(mid, phi, m) < xi {
            a = mid;
        } else {
            b = mid;
        }
        if (a - b).abs() <= RAREFACTION_TOL {
            break;
        }
    }
    0.5 * (a + b)
}
