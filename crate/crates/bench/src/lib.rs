//! Fixtures shared by the criterion benches.

use statedchoice::{
    estimate_individual_moments, simulate_dataset, DgpConfig, IndividualMoments, LinkFunction, PseudoPanel,
};

/// Built-in design with `n` persons, simulated at a fixed seed.
pub fn panel(n: usize) -> PseudoPanel {
    let mut cfg = DgpConfig::baseline();
    cfg.n = n;
    simulate_dataset(&cfg, 7).expect("built-in design is valid").0
}

pub fn moments(panel: &PseudoPanel) -> Vec<IndividualMoments> {
    estimate_individual_moments(panel, &[0.0, 1.0], &LinkFunction::default()).expect("panel has full rank")
}
