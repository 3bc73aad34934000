//! Generalized Buckley-Leverett laboratory.
//!
//! * [`flux`]: closed-form flux algebra (`f`, its derivatives, `m*`, `g`).
//! * [`riemann`]: exact self-similar Riemann solutions with a porosity jump.
//! * [`weno`]: fifth-order WENO / TVD-RK3 reference solver.
//! * [`nn`]: dense networks with exact parameter and input derivatives, Adam.
//! * [`cpinn`]: the two-subdomain conservative PINN with the Oleinik flux.
//! * [`harness`]: case registry, shared evaluation set, metrics and artifacts.

pub mod cpinn;
pub mod flux;
pub mod harness;
pub mod nn;
pub mod riemann;
pub mod weno;

pub use flux::{Mobility, Region, State};
pub use harness::{CaseConfig, Form, MetricsRow, Method, SolutionField};
pub use riemann::{RiemannData, RiemannFan, WaveKind, WavePiece};
