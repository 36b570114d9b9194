//! Shared fixtures for unit tests.

use crate::dataset::{Observation, TrialData};
use crate::nuisance::{NuisanceConfig, NuisanceSet};

/// A small discrete fixture with every (x, z) cell exactly balanced, so the
/// empirical propensity is exactly 1/2 in every covariate cell and saturated
/// fits reproduce all cell frequencies.
pub fn balanced_fixture() -> TrialData {
    const ONE_THIRD: f64 = 1.0 / 3.0;
    const TWO_THIRDS: f64 = 2.0 / 3.0;
    let mut rows = Vec::new();
    // For each covariate level, fixed counts of (z, s) and a deterministic
    // outcome schedule within each (z, s) cell.
    let plan: &[(f64, [usize; 4], [f64; 4])] = &[
        // x, counts [n(z=0,s=0), n(0,1), n(1,0), n(1,1)], cell mean levels
        // Within each covariate level the infected-control and
        // uninfected-vaccinee outcome means coincide, so inverse-probability
        // and plug-in forms agree exactly under saturated fits.
        (0.0, [6, 10, 10, 6], [ONE_THIRD, 0.5, 0.5, TWO_THIRDS]),
        (1.0, [4, 12, 8, 8], [0.25, 0.75, 0.75, 0.25]),
    ];
    for &(x, counts, means) in plan {
        for (k, &count) in counts.iter().enumerate() {
            let (z, s) = ((k / 2) as u8, (k % 2) as u8);
            let ones = (count as f64 * means[k]).round() as usize;
            for j in 0..count {
                // Binary outcomes whose cell mean is exactly means[k]:
                // count*mean is an integer throughout the plan.
                let y = (j < ones) as u8 as f64;
                rows.push(Observation {
                    x: vec![x],
                    z,
                    s,
                    y,
                });
            }
        }
    }
    TrialData::new(rows, vec!["x".into()]).unwrap()
}

/// Fully saturated nuisances (including the propensity, which the balanced
/// fixture makes exactly 1/2 in every cell).
pub fn saturated_nuis(data: &TrialData) -> NuisanceSet {
    NuisanceSet::fit(data, &NuisanceConfig::all_saturated(), None).unwrap()
}
