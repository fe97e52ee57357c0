//! Beam-pruned inference over joint (location, velocity, state, env) states.
//!
//! Each frame transition is evaluated as four staged sweeps over dense
//! per-cell blocks: displacement (previous velocity moves the location),
//! the (state, env) chain, heading change given the new state, and speed
//! change given the new state's sharing group. Sums run in the linear
//! domain with one normalizer per frame; scores at frame boundaries are
//! logs.

mod lattice;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::Model;
use crate::learning::VeSchedule;
use crate::types::{
    validate_frames, Environment, Frame, JointState, MotionState, NUM_HEADINGS, NUM_SE,
    NUM_SPEEDS, NUM_SPEED_GROUPS,
};

pub use lattice::pairwise_posterior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub max_states: usize,
    /// Drop states scoring more than this many nats below the frame's best.
    pub log_threshold: f64,
    /// Disable all pruning (states with zero probability are still dropped).
    pub exact_mode: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            max_states: 10_000,
            log_threshold: 12.0,
            exact_mode: false,
        }
    }
}

impl BeamConfig {
    pub fn exact() -> Self {
        BeamConfig {
            exact_mode: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_states < 1 {
            return Err(Error::invalid("max_states must be at least 1"));
        }
        if !(self.log_threshold >= 0.0) {
            return Err(Error::invalid("log_threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Sparse distribution over the states retained at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosterior {
    /// States in key order with their probabilities.
    pub states: Vec<(JointState, f64)>,
    /// log of this frame's normalizer.
    pub log_normalizer: f64,
}

impl FramePosterior {
    pub fn total(&self) -> f64 {
        self.states.iter().map(|(_, p)| p).sum()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_marginal(&self) -> [f64; MotionState::COUNT] {
        let mut out = [0.0; MotionState::COUNT];
        for (st, p) in &self.states {
            out[st.state.index()] += p;
        }
        out
    }

    pub fn env_marginal(&self) -> [f64; Environment::COUNT] {
        let mut out = [0.0; Environment::COUNT];
        for (st, p) in &self.states {
            out[st.env.index()] += p;
        }
        out
    }

    pub fn prob(&self, state: &JointState) -> f64 {
        self.states
            .binary_search_by(|(s, _)| s.cmp(state))
            .map_or(0.0, |i| self.states[i].1)
    }
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub posteriors: Vec<FramePosterior>,
    /// Sum of per-frame log normalizers. Exact without pruning, a lower
    /// bound otherwise.
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub path: Vec<JointState>,
    pub log_score: f64,
}

/// Expected sufficient statistics from smoothing, summed over frames. The
/// transition tables are the pairwise posteriors summed over everything but
/// the variables each CPT touches.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    /// [se][se'] summed over frame pairs.
    pub se_trans: [[f64; NUM_SE]; NUM_SE],
    /// [state'][heading offset index]
    pub heading: [[f64; NUM_HEADINGS]; MotionState::COUNT],
    /// [group][speed][speed']
    pub speed: [[[f64; NUM_SPEEDS]; NUM_SPEEDS]; NUM_SPEED_GROUPS],
    /// [classifier][state][bin-1]
    pub obs_state: [[[f64; crate::types::NUM_BINS]; MotionState::COUNT]; MotionState::COUNT],
    /// [classifier][env][bin-1]
    pub obs_env: [[[f64; crate::types::NUM_BINS]; Environment::COUNT]; Environment::COUNT],
    pub init_se: [f64; NUM_SE],
    pub init_speed: [f64; NUM_SPEEDS],
    pub init_heading: [f64; NUM_HEADINGS],
    /// Number of frame pairs accumulated.
    pub transitions: usize,
}

impl Default for ExpectedCounts {
    fn default() -> Self {
        ExpectedCounts {
            se_trans: [[0.0; NUM_SE]; NUM_SE],
            heading: [[0.0; NUM_HEADINGS]; MotionState::COUNT],
            speed: [[[0.0; NUM_SPEEDS]; NUM_SPEEDS]; NUM_SPEED_GROUPS],
            obs_state: Default::default(),
            obs_env: Default::default(),
            init_se: [0.0; NUM_SE],
            init_speed: [0.0; NUM_SPEEDS],
            init_heading: [0.0; NUM_HEADINGS],
            transitions: 0,
        }
    }
}

impl ExpectedCounts {
    /// Element-wise sum. Addition order is the caller's; reduce in a fixed
    /// order for reproducible results.
    pub fn merge(&mut self, other: &ExpectedCounts) {
        fn add<const N: usize>(a: &mut [f64; N], b: &[f64; N]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.se_trans.iter_mut().zip(&other.se_trans) {
            add(a, b);
        }
        for (a, b) in self.heading.iter_mut().zip(&other.heading) {
            add(a, b);
        }
        for (a, b) in self.speed.iter_mut().flatten().zip(other.speed.iter().flatten()) {
            add(a, b);
        }
        for (a, b) in self.obs_state.iter_mut().flatten().zip(other.obs_state.iter().flatten()) {
            add(a, b);
        }
        for (a, b) in self.obs_env.iter_mut().flatten().zip(other.obs_env.iter().flatten()) {
            add(a, b);
        }
        add(&mut self.init_se, &other.init_se);
        add(&mut self.init_speed, &other.init_speed);
        add(&mut self.init_heading, &other.init_heading);
        self.transitions += other.transitions;
    }
}

#[derive(Debug, Clone)]
pub struct Smoothed {
    pub posteriors: Vec<FramePosterior>,
    pub filtered: Vec<FramePosterior>,
    pub counts: ExpectedCounts,
    pub log_likelihood: f64,
}

fn check_inputs(frames: &[Frame], beam: &BeamConfig, ve: Option<&VeSchedule>) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("need at least one frame"));
    }
    beam.validate()?;
    validate_frames(frames)?;
    if let Some(ve) = ve {
        if ve.len() != frames.len() {
            return Err(Error::invalid(format!(
                "virtual evidence covers {} frames, trace has {}",
                ve.len(),
                frames.len()
            )));
        }
    }
    Ok(())
}

/// Filtered posteriors for every frame.
pub fn forward_filter(
    frames: &[Frame],
    model: &Model<'_>,
    beam: &BeamConfig,
    ve: Option<&VeSchedule>,
) -> Result<Filtered> {
    check_inputs(frames, beam, ve)?;
    let lattice = lattice::forward::<false>(frames, model, beam, ve)?;
    Ok(Filtered {
        log_likelihood: lattice.log_likelihood(),
        posteriors: lattice.frames.iter().map(|f| f.posterior()).collect(),
    })
}

/// Most probable joint-state path (max-product with back-pointers).
pub fn viterbi_decode(
    frames: &[Frame],
    model: &Model<'_>,
    beam: &BeamConfig,
    ve: Option<&VeSchedule>,
) -> Result<Decoded> {
    check_inputs(frames, beam, ve)?;
    let lattice = lattice::forward::<true>(frames, model, beam, ve)?;
    Ok(lattice.backtrack())
}

/// Smoothed posteriors and expected counts over the forward-retained lattice.
pub fn forward_backward(
    frames: &[Frame],
    model: &Model<'_>,
    beam: &BeamConfig,
    ve: Option<&VeSchedule>,
) -> Result<Smoothed> {
    check_inputs(frames, beam, ve)?;
    let lattice = lattice::forward::<false>(frames, model, beam, ve)?;
    let (counts, gammas) = lattice::backward(&lattice, frames, model, ve, true);
    let gammas = gammas.expect("posteriors requested");
    Ok(Smoothed {
        posteriors: gammas,
        filtered: lattice.frames.iter().map(|f| f.posterior()).collect(),
        counts,
        log_likelihood: lattice.log_likelihood(),
    })
}

/// Expected counts and log-likelihood only; what an EM E-step needs.
pub fn expected_counts(
    frames: &[Frame],
    model: &Model<'_>,
    beam: &BeamConfig,
    ve: Option<&VeSchedule>,
) -> Result<(ExpectedCounts, f64)> {
    check_inputs(frames, beam, ve)?;
    let lattice = lattice::forward::<false>(frames, model, beam, ve)?;
    let (counts, _) = lattice::backward(&lattice, frames, model, ve, false);
    Ok((counts, lattice.log_likelihood()))
}

/// Descending score, then ascending key.
pub(crate) fn rank<K: Ord>(a: &(f64, K), b: &(f64, K)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Keep the `k` best entries under [`rank`]; order of the result is unspecified.
pub(crate) fn truncate_best<K: Ord>(items: &mut Vec<(f64, K)>, k: usize) {
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, rank);
        items.truncate(k);
    }
}

/// Threshold then cap a scored state set. The best entry always survives.
pub fn prune(scored: &BTreeMap<JointState, f64>, beam: &BeamConfig) -> BTreeMap<JointState, f64> {
    let Some(best) = scored
        .iter()
        .map(|(k, v)| (*v, *k))
        .min_by(rank)
    else {
        return BTreeMap::new();
    };
    let floor = if beam.exact_mode {
        f64::NEG_INFINITY
    } else {
        best.0 - beam.log_threshold
    };
    let mut kept: Vec<(f64, JointState)> = scored
        .iter()
        .filter(|(_, v)| **v >= floor && **v > f64::NEG_INFINITY)
        .map(|(k, v)| (*v, *k))
        .collect();
    if kept.is_empty() {
        kept.push(best);
    }
    if beam.exact_mode {
        return kept.into_iter().map(|(v, k)| (k, v)).collect();
    }
    truncate_best(&mut kept, beam.max_states);
    kept.into_iter().map(|(v, k)| (k, v)).collect()
}
