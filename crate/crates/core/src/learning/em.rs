//! Expectation-maximization over partially labeled traces.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VeSchedule;
use crate::error::{Error, Result};
use crate::factors::{FactorMask, Model};
use crate::inference::{expected_counts, BeamConfig, ExpectedCounts};
use crate::map::BuildingMap;
use crate::params::ModelParams;
use crate::types::{
    heading_offset_index, Environment, Frame, MotionState, SePair, NUM_HEADINGS, NUM_SPEEDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood gain drops below this.
    pub rel_ll_tolerance: f64,
    /// Pseudo-count added to every non-structural CPT cell. Zero gives
    /// plain maximum-likelihood updates.
    pub dirichlet_smoothing: f64,
    pub beam: BeamConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 50,
            rel_ll_tolerance: 1e-5,
            dirichlet_smoothing: 0.1,
            beam: BeamConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.rel_ll_tolerance > 0.0) {
            return Err(Error::invalid("rel_ll_tolerance must be positive"));
        }
        if !(self.dirichlet_smoothing >= 0.0 && self.dirichlet_smoothing.is_finite()) {
            return Err(Error::invalid("dirichlet_smoothing must be >= 0"));
        }
        self.beam.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub frames: Vec<Frame>,
    pub ve: Option<VeSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Training log-likelihood under the parameters entering this iteration.
    pub log_likelihood: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EmReport {
    pub params: ModelParams,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    iterations: &'a [IterationRecord],
    converged: bool,
}

impl EmReport {
    pub fn log_likelihoods(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.log_likelihood).collect()
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&ReportFile {
            iterations: &self.iterations,
            converged: self.converged,
        })
        .expect("report serializes")
    }
}

/// E-step over all traces, reduced in trace order.
pub fn e_step(
    traces: &[TrainingTrace],
    model: &Model<'_>,
    beam: &BeamConfig,
) -> Result<(ExpectedCounts, f64)> {
    let results: Vec<Result<(ExpectedCounts, f64)>> = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            expected_counts(&t.frames, model, beam, t.ve.as_ref()).map_err(|e| match e {
                Error::InferenceCollapse { frame } => Error::TraceCollapse { trace: i, frame },
                other => other,
            })
        })
        .collect();
    let mut total = ExpectedCounts::default();
    let mut ll = 0.0;
    for r in results {
        let (c, l) = r?;
        total.merge(&c);
        ll += l;
    }
    Ok((total, ll))
}

/// Re-estimate every CPT from expected counts. Entries that are exactly
/// zero in `prev` stay zero; rows without any expected count keep their
/// previous values.
pub fn m_step(prev: &ModelParams, counts: &ExpectedCounts, smoothing: f64) -> ModelParams {
    let tallies = counts_as_tables(counts);
    let mut next = prev.clone();
    let rows = tallies.rows();
    for ((dst, c), old) in next.rows_mut().into_iter().zip(&rows).zip(prev.rows()) {
        let observed: f64 = c.values.iter().sum();
        if !(observed > 0.0) {
            continue;
        }
        let mut z = 0.0;
        for ((d, &n), &o) in dst.iter_mut().zip(c.values).zip(old.values) {
            *d = if o == 0.0 { 0.0 } else { n + smoothing };
            z += *d;
        }
        if z > 0.0 {
            for d in dst.iter_mut() {
                *d /= z;
            }
        } else {
            dst.copy_from_slice(old.values);
        }
    }
    next
}

/// Lay expected counts out in the shape of the parameter tables.
fn counts_as_tables(c: &ExpectedCounts) -> ModelParams {
    let mut t = ModelParams::uniform();
    t.env_trans = Default::default();
    t.state_trans = Default::default();
    t.init_env = Default::default();
    t.init_state = Default::default();
    for a in SePair::all() {
        for b in SePair::all() {
            let n = c.se_trans[a.index()][b.index()];
            t.env_trans[a.env().index()][b.env().index()] += n;
            t.state_trans[a.state().index()][b.env().index()][b.state().index()] += n;
        }
        let n = c.init_se[a.index()];
        t.init_env[a.env().index()] += n;
        t.init_state[a.env().index()][a.state().index()] += n;
    }
    t.heading_trans = c.heading;
    t.speed_trans = c.speed;
    t.obs_state = c.obs_state;
    t.obs_env = c.obs_env;
    t.init_speed = c.init_speed;
    t.init_heading = c.init_heading;
    t
}

/// Run EM from `init` until the relative log-likelihood gain falls below
/// tolerance or `max_iters` E-steps have run.
pub fn em_train(
    traces: &[TrainingTrace],
    map: &BuildingMap,
    factors: FactorMask,
    init: &ModelParams,
    config: &EmConfig,
) -> Result<EmReport> {
    if traces.is_empty() {
        return Err(Error::invalid("need at least one training trace"));
    }
    config.validate()?;
    init.validate(1e-9)?;
    let mut params = init.clone();
    let mut iterations = Vec::new();
    let mut converged = false;
    for it in 0..config.max_iters {
        let started = Instant::now();
        let model = Model::new(&params, map, factors)?;
        let (counts, ll) = e_step(traces, &model, &config.beam)?;
        if let Some(prev) = iterations.last().map(|r: &IterationRecord| r.log_likelihood) {
            let gain = (ll - prev) / prev.abs().max(f64::MIN_POSITIVE);
            if gain < config.rel_ll_tolerance {
                converged = true;
            }
        }
        log::debug!("em iteration {it}: log-likelihood {ll:.6}");
        if converged {
            iterations.push(IterationRecord {
                iteration: it,
                log_likelihood: ll,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            break;
        }
        params = m_step(&params, &counts, config.dirichlet_smoothing);
        iterations.push(IterationRecord {
            iteration: it,
            log_likelihood: ll,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(EmReport {
        params,
        iterations,
        converged,
    })
}

/// Uniform CPTs perturbed by seeded noise of the given magnitude, then
/// renormalized. Structural zeros stay zero.
pub fn initialize_params(seed: u64, jitter: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::uniform();
    if jitter == 0.0 {
        return p;
    }
    for row in p.rows_mut() {
        let mut z = 0.0;
        for v in row.iter_mut() {
            if *v != 0.0 {
                *v += jitter * rng.gen::<f64>();
            }
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

/// Uniform CPTs except velocity, which keeps its speed bin and heading with
/// probability `stay` and spreads the rest evenly.
pub fn sticky_motion_params(stay: f64) -> ModelParams {
    let mut p = ModelParams::uniform();
    let same_heading = heading_offset_index(0, 0);
    for row in p.heading_trans.iter_mut() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = if i == same_heading { stay } else { (1.0 - stay) / (NUM_HEADINGS - 1) as f64 };
        }
    }
    for group in p.speed_trans.iter_mut() {
        for (from, row) in group.iter_mut().enumerate() {
            for (to, v) in row.iter_mut().enumerate() {
                *v = if to == from { stay } else { (1.0 - stay) / (NUM_SPEEDS - 1) as f64 };
            }
        }
    }
    p
}

/// Direct counts from fully labeled (state, env) sequences, smoothed the
/// same way as the M-step. Location and velocity tables are left as in
/// `prev`.
pub fn supervised_estimate(
    sequences: &[(&[Frame], &[(MotionState, Environment)])],
    prev: &ModelParams,
    smoothing: f64,
) -> ModelParams {
    let mut c = ExpectedCounts::default();
    for (frames, labels) in sequences {
        for (k, (f, &(s, e))) in frames.iter().zip(labels.iter()).enumerate() {
            let se = SePair::new(s, e).expect("labels are admissible");
            if k == 0 {
                c.init_se[se.index()] += 1.0;
            } else {
                let (ps, pe) = labels[k - 1];
                let prev_se = SePair::new(ps, pe).expect("labels are admissible");
                c.se_trans[prev_se.index()][se.index()] += 1.0;
            }
            for (i, &b) in f.msb.state_bins.iter().enumerate() {
                c.obs_state[i][s.index()][b as usize - 1] += 1.0;
            }
            for (i, &b) in f.msb.env_bins.iter().enumerate() {
                c.obs_env[i][e.index()][b as usize - 1] += 1.0;
            }
        }
    }
    m_step(prev, &c, smoothing)
}
