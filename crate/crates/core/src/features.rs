//! Boosted decision stumps turning feature vectors into per-class detection
//! probabilities, and the probability-to-bin step feeding the sensor-board
//! observation.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Environment, MotionState, MsbObservation, NUM_BINS};

/// Errors within this distance are treated as ties.
const TIE_EPS: f64 = 1e-12;
/// Keeps boosting weights finite when a stump is perfect.
const MIN_ERROR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    State(MotionState),
    Env(Environment),
}

impl Target {
    /// The eight classifier targets in sensor-board order.
    pub fn all() -> Vec<Target> {
        MotionState::ALL
            .into_iter()
            .map(Target::State)
            .chain(Environment::ALL.into_iter().map(Target::Env))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionStump {
    pub feature_index: usize,
    pub threshold: f64,
    /// +1 predicts the positive class above the threshold, -1 below.
    pub polarity: i8,
    pub weight: f64,
}

impl DecisionStump {
    pub fn predict(&self, x: &[f64]) -> i8 {
        if x[self.feature_index] > self.threshold {
            self.polarity
        } else {
            -self.polarity
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub target: Target,
    pub stumps: Vec<DecisionStump>,
    pub sigmoid_scale: f64,
    /// Per-feature divisor applied to distances from a threshold.
    pub feature_scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub label: i8,
    pub weight: f64,
}

/// The stump with the lowest weighted 0/1 error, and that error as a
/// fraction of the total weight. Candidate thresholds are midpoints between
/// consecutive distinct values; ties go to the lowest feature, then the
/// lowest threshold, then polarity +1.
pub fn train_stump(samples: &[Sample<'_>]) -> Result<(DecisionStump, f64)> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("no samples"));
    };
    let dim = first.x.len();
    let mut total = 0.0;
    let (mut pos, mut neg) = (false, false);
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::invalid("samples have different dimensions"));
        }
        if !(s.weight >= 0.0 && s.weight.is_finite()) {
            return Err(Error::invalid(format!("weight {} must be >= 0", s.weight)));
        }
        match s.label {
            1 => pos = true,
            -1 => neg = true,
            l => return Err(Error::invalid(format!("label {l} must be +1 or -1"))),
        }
        total += s.weight;
    }
    if !(total > 0.0) {
        return Err(Error::invalid("weights sum to zero"));
    }
    if !(pos && neg) {
        return Err(Error::invalid("need samples of both labels"));
    }

    let mut best: Option<(DecisionStump, f64)> = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for f in 0..dim {
        order.sort_by(|&a, &b| samples[a].x[f].total_cmp(&samples[b].x[f]));
        // error of polarity +1 with threshold below everything: all predicted +1
        let mut err_pos: f64 = samples
            .iter()
            .filter(|s| s.label == -1)
            .map(|s| s.weight)
            .sum();
        let mut i = 0;
        while i < order.len() {
            let v = samples[order[i]].x[f];
            while i < order.len() && samples[order[i]].x[f] == v {
                let s = &samples[order[i]];
                // moving below the threshold flips this sample's prediction to -1
                err_pos += if s.label == 1 { s.weight } else { -s.weight };
                i += 1;
            }
            if i == order.len() {
                break;
            }
            let threshold = 0.5 * (v + samples[order[i]].x[f]);
            for (polarity, err) in [(1i8, err_pos), (-1, total - err_pos)] {
                let err = err / total;
                if best.as_ref().map_or(true, |b| err < b.1 - TIE_EPS) {
                    best = Some((
                        DecisionStump {
                            feature_index: f,
                            threshold,
                            polarity,
                            weight: 1.0,
                        },
                        err,
                    ));
                }
            }
        }
    }
    let (stump, err) = best.ok_or(Error::NoSplit)?;
    // running sums leave rounding residue on perfect splits
    let err = if err < TIE_EPS { 0.0 } else { err };
    if err >= 0.5 {
        return Err(Error::BoostingStall(err));
    }
    Ok((stump, err))
}

/// Population standard deviation per feature, 1 where a feature is constant.
pub fn feature_scales(x: &[Vec<f64>]) -> Vec<f64> {
    let dim = x.first().map_or(0, |r| r.len());
    let n = x.len() as f64;
    (0..dim)
        .map(|f| {
            let mean = x.iter().map(|r| r[f]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// Discrete AdaBoost with decision stumps. Stops early when a round finds a
/// perfect stump or can no longer beat chance; fails only if the first
/// round does.
pub fn train_adaboost(
    x: &[Vec<f64>],
    labels: &[i8],
    rounds: usize,
    target: Target,
) -> Result<StumpEnsemble> {
    if rounds == 0 {
        return Err(Error::invalid("rounds must be at least 1"));
    }
    if x.len() != labels.len() {
        return Err(Error::invalid("feature rows and labels differ in length"));
    }
    let n = x.len();
    let mut w = vec![1.0 / n as f64; n];
    let mut stumps = Vec::new();
    for round in 0..rounds {
        let samples: Vec<Sample<'_>> = x
            .iter()
            .zip(labels)
            .zip(&w)
            .map(|((x, &label), &weight)| Sample { x, label, weight })
            .collect();
        let (mut stump, err) = match train_stump(&samples) {
            Ok(r) => r,
            Err(e @ (Error::NoSplit | Error::BoostingStall(_))) if round > 0 => {
                log::debug!("boosting stopped after {round} rounds: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        let eps = err.clamp(MIN_ERROR, 1.0 - MIN_ERROR);
        stump.weight = 0.5 * ((1.0 - eps) / eps).ln();
        stumps.push(stump);
        if err == 0.0 {
            break;
        }
        let mut z = 0.0;
        for ((wi, xi), &y) in w.iter_mut().zip(x).zip(labels) {
            *wi *= (-stump.weight * (y * stump.predict(xi)) as f64).exp();
            z += *wi;
        }
        for wi in &mut w {
            *wi /= z;
        }
    }
    Ok(StumpEnsemble {
        target,
        stumps,
        sigmoid_scale: 1.0,
        feature_scales: feature_scales(x),
    })
}

impl StumpEnsemble {
    fn check_dim(&self, x: &[f64]) -> Result<()> {
        let need = self
            .stumps
            .iter()
            .map(|s| s.feature_index + 1)
            .max()
            .unwrap_or(0)
            .max(self.feature_scales.len());
        if x.len() < need {
            return Err(Error::invalid(format!(
                "feature vector has {} entries, ensemble needs {need}",
                x.len()
            )));
        }
        Ok(())
    }

    /// Weighted vote, +1 or -1 (+1 on a tie).
    pub fn predict(&self, x: &[f64]) -> Result<i8> {
        self.check_dim(x)?;
        let vote: f64 = self
            .stumps
            .iter()
            .map(|s| s.weight * s.predict(x) as f64)
            .sum();
        Ok(if vote >= 0.0 { 1 } else { -1 })
    }

    /// Boosting-weighted mean of the signed, per-feature-scaled distances
    /// to each stump's threshold.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let total: f64 = self.stumps.iter().map(|s| s.weight).sum();
        if !(total > 0.0) {
            return Ok(0.0);
        }
        let sum: f64 = self
            .stumps
            .iter()
            .map(|s| {
                let scale = self.feature_scales.get(s.feature_index).copied().unwrap_or(1.0);
                s.weight * s.polarity as f64 * (x[s.feature_index] - s.threshold) / scale
            })
            .sum();
        Ok(sum / total)
    }
}

pub fn detection_probability(ensemble: &StumpEnsemble, x: &[f64]) -> Result<f64> {
    let m = ensemble.margin(x)?;
    Ok(1.0 / (1.0 + (-ensemble.sigmoid_scale * m).exp()))
}

/// Uniform half-open bins over [0, 1] with the top bin closed, numbered 1..=b.
pub fn quantize(p: f64, bins: usize) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    if bins == 0 || bins > u8::MAX as usize {
        return Err(Error::invalid(format!("bin count {bins} out of range")));
    }
    Ok(((p * bins as f64).floor() as usize + 1).min(bins) as u8)
}

/// One sensor-board observation from the eight per-class ensembles
/// (five motion states, then three environments, in enum order).
pub fn featurize_frame(ensembles: &[StumpEnsemble], x: &[f64]) -> Result<MsbObservation> {
    let targets = Target::all();
    if ensembles.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need {} ensembles, got {}",
            targets.len(),
            ensembles.len()
        )));
    }
    let mut bins = [0u8; 8];
    for ((b, e), t) in bins.iter_mut().zip(ensembles).zip(&targets) {
        if e.target != *t {
            return Err(Error::invalid(format!(
                "ensemble for {:?} found where {:?} was expected",
                e.target, t
            )));
        }
        *b = quantize(detection_probability(e, x)?, NUM_BINS)?;
    }
    MsbObservation::new(
        [bins[0], bins[1], bins[2], bins[3], bins[4]],
        [bins[5], bins[6], bins[7]],
    )
}

/// Feature vectors with optional per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub states: Option<Vec<MotionState>>,
    pub envs: Option<Vec<Environment>>,
}

/// Header row of feature names; `label_state` and `label_env` columns, if
/// present, hold variant names.
pub fn read_feature_csv<R: Read>(reader: R) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let state_col = header.iter().position(|h| h == "label_state");
    let env_col = header.iter().position(|h| h == "label_env");
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&i| Some(i) != state_col && Some(i) != env_col)
        .collect();
    let names = feature_cols.iter().map(|&i| header[i].to_string()).collect();
    let mut rows = Vec::new();
    let mut states = state_col.map(|_| Vec::new());
    let mut envs = env_col.map(|_| Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let v: f64 = rec[c].parse().map_err(|_| {
                Error::parse(format!("line {line}"), format!("`{}` is not a number", &rec[c]))
            })?;
            row.push(v);
        }
        rows.push(row);
        if let (Some(c), Some(out)) = (state_col, states.as_mut()) {
            out.push(rec[c].parse().map_err(|e: Error| Error::parse(format!("line {line}"), e.to_string()))?);
        }
        if let (Some(c), Some(out)) = (env_col, envs.as_mut()) {
            out.push(rec[c].parse().map_err(|e: Error| Error::parse(format!("line {line}"), e.to_string()))?);
        }
    }
    Ok(FeatureTable {
        names,
        rows,
        states,
        envs,
    })
}

/// One-vs-rest ensembles for all eight targets from a labeled table.
pub fn train_classifier_bank(table: &FeatureTable, rounds: usize) -> Result<Vec<StumpEnsemble>> {
    let (Some(states), Some(envs)) = (&table.states, &table.envs) else {
        return Err(Error::invalid("feature table needs label_state and label_env columns"));
    };
    Target::all()
        .into_iter()
        .map(|t| {
            let labels: Vec<i8> = match t {
                Target::State(s) => states.iter().map(|&v| if v == s { 1 } else { -1 }).collect(),
                Target::Env(e) => envs.iter().map(|&v| if v == e { 1 } else { -1 }).collect(),
            };
            train_adaboost(&table.rows, &labels, rounds, t)
        })
        .collect()
}

pub fn ensembles_to_json(ensembles: &[StumpEnsemble]) -> String {
    serde_json::to_string_pretty(ensembles).expect("ensembles serialize")
}

pub fn ensembles_from_json(s: &str) -> Result<Vec<StumpEnsemble>> {
    let v: Vec<StumpEnsemble> = serde_json::from_str(s)?;
    for e in &v {
        if !(e.sigmoid_scale > 0.0) {
            return Err(Error::invalid("sigmoid_scale must be positive"));
        }
        if e.stumps.is_empty() {
            return Err(Error::invalid(format!("ensemble for {:?} has no stumps", e.target)));
        }
    }
    Ok(v)
}
