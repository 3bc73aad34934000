//! Shared fixtures for the benchmarks.

use gbl_core::cpinn::{build_nets, sample_points, Problem};
use gbl_core::harness::find_case;
use gbl_core::nn::DenseNet;
use gbl_core::weno::{FieldPair, Grid1D, WenoSolver};
use gbl_core::CaseConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A ready-to-evaluate cPINN problem with freshly initialized nets.
pub struct TrainingFixture {
    pub case: CaseConfig,
    pub problem: Problem,
    pub net1: DenseNet,
    pub net2: DenseNet,
}

/// Desk-budget sampling for `name` under a fixed seed.
pub fn training_fixture(name: &str) -> TrainingFixture {
    let case = find_case(name).expect("registry case");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = sample_points(&case, case.budget.counts, &mut rng).expect("sampling");
    let (net1, net2) = build_nets(&case, &mut rng).expect("nets");
    let problem = Problem::new(&case, samples).expect("problem");
    TrainingFixture {
        case,
        problem,
        net1,
        net2,
    }
}

/// WENO solver and Riemann initial fields at the case's configured resolution.
pub fn weno_fixture(name: &str) -> (WenoSolver, FieldPair) {
    let case = find_case(name).expect("registry case");
    let data = case.riemann_data().expect("riemann data");
    let (x_min, x_max, _) = case.domain;
    let grid = Grid1D::new(x_min, x_max, case.weno.cells_for(x_max - x_min)).expect("grid");
    let fields = FieldPair::from_fn(&grid, |x| {
        let s = data.initial_state(x);
        (s.u, s.phi)
    });
    (WenoSolver::new(grid, case.mobility.clone(), case.weno.cfl), fields)
}
