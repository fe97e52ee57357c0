//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use ctxdbn_core::learning::initialize_params;
use ctxdbn_core::simulator::{generate_dataset, SimConfig};
use ctxdbn_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub map: BuildingMap,
    pub params: ModelParams,
    pub frames: Vec<Frame>,
}

/// One simulated trace of `len` frames on the default world, with jittered
/// parameters.
pub fn fixture(len: usize) -> Fixture {
    let (map, traces) = generate_dataset(&SimConfig::default(), 1, len).expect("simulated trace");
    Fixture {
        map,
        params: initialize_params(1, 1.0),
        frames: traces.into_iter().next().expect("one trace").frames,
    }
}

/// `n` random admissible states with random scores.
pub fn scored_states(n: usize, seed: u64) -> BTreeMap<JointState, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<SePair> = SePair::all().collect();
    let mut out = BTreeMap::new();
    while out.len() < n {
        let se = pairs[rng.gen_range(0..pairs.len())];
        let s = JointState::new(
            GridLocation::new(rng.gen_range(0..100), rng.gen_range(0..100)),
            PolarVelocity::new(rng.gen_range(0..NUM_SPEEDS), rng.gen_range(0..NUM_HEADINGS)).unwrap(),
            se.state(),
            se.env(),
        )
        .unwrap();
        out.insert(s, -rng.gen_range(0.0..30.0));
    }
    out
}
