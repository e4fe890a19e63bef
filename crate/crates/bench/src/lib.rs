//! Fixtures shared by the kernel benchmarks.

use ucv_core::driver::{Campaign, Explorer, RunConfig};
use ucv_core::freeenergy::{run_umbrella, UmbrellaPlan};
use ucv_core::{Axis, GmmUncertainty, GridSpec, GroundTruthPotential};

/// Calibrated generation-1 uncertainty of a default Müller-Brown campaign.
pub fn muller_brown_uncertainty() -> (Campaign, GmmUncertainty) {
    let cfg = RunConfig {
        test_points: 10,
        pmf_generations: vec![],
        ..RunConfig::default()
    };
    let camp = Campaign::new(cfg).expect("default config");
    let (explorer, _) = camp.fit_explorer(1).expect("fit");
    match explorer {
        Explorer::Gmm(u) => (camp, u),
        _ => unreachable!("default method is gmm_cv"),
    }
}

/// Umbrella windows on the 1-D double well, `bins` windows over `[-2, 2]`.
pub fn double_well_windows(bins: usize, steps: u64) -> Vec<ucv_core::freeenergy::UmbrellaWindow> {
    let gt = GroundTruthPotential::double_well(1, 1.0, 1.0);
    let grid = GridSpec::new(vec![Axis::new(-2.0, 2.0, bins)]);
    let plan = UmbrellaPlan::on_grid(&grid, vec![0], 0.25, steps, steps / 10, 3);
    run_umbrella(&gt, &gt.config(vec![0.0]), &plan).expect("umbrella")
}
