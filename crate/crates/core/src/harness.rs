//! Trace ingestion, accuracy metrics, the evaluation protocols and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{FactorMask, Model};
use crate::inference::{expected_counts, viterbi_decode, BeamConfig, ExpectedCounts};
use crate::learning::{
    drop_labels, drop_labels_random, e_step, em_train, expand_annotations, initialize_params,
    m_step, sticky_motion_params, EmConfig, ScheduleKind, TrainingTrace, VeSchedule,
};
use crate::map::{BuildingMap, GeoReference};
use crate::params::ModelParams;
use crate::types::*;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Equirectangular projection about `reference`: x east, y north, meters.
pub fn project(lat: f64, lon: f64, reference: GeoReference) -> (f64, f64) {
    let x = EARTH_RADIUS_M * (lon - reference.lon).to_radians() * reference.lat.to_radians().cos();
    let y = EARTH_RADIUS_M * (lat - reference.lat).to_radians();
    (x, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub frames: Vec<Frame>,
    /// Fixes dropped because they fall outside the world.
    pub out_of_bounds: usize,
    /// Fixes dropped because they snap past the last frame or onto a frame
    /// that already holds a fix.
    pub unmatched: usize,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::parse(format!("line {line}"), format!("missing column {}", i + 1)))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::parse(format!("line {line}"), format!("cannot parse `{raw}`")))
}

/// Read a trace file: `msb,t,<5 state bins>,<3 env bins>` rows at the frame
/// rate plus `gps,t,x,y,hdop` (meters) or `gps_ll,t,lat,lon,hdop` rows.
/// GPS times snap to the nearest frame.
pub fn ingest_trace<R: Read>(input: R, map: &BuildingMap) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(input);
    let mut msb: Vec<MsbObservation> = Vec::new();
    let mut fixes: Vec<(f64, GpsFix, u64)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let kind = rec.get(0).unwrap_or("").trim();
        let t: f64 = field(&rec, 1, line)?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::parse(format!("line {line}"), format!("bad time {t}")));
        }
        match kind {
            "msb" => {
                if rec.len() != 10 {
                    return Err(Error::parse(format!("line {line}"), "msb row needs 8 bins"));
                }
                let k = (t / FRAME_DT).round() as usize;
                if k != msb.len() {
                    return Err(Error::parse(
                        format!("line {line}"),
                        format!("expected frame {} but time {t} is frame {k}", msb.len()),
                    ));
                }
                let mut bins = [0u8; 8];
                for (j, b) in bins.iter_mut().enumerate() {
                    *b = field(&rec, 2 + j, line)?;
                }
                let obs = MsbObservation::new(
                    bins[..5].try_into().expect("five"),
                    bins[5..].try_into().expect("three"),
                )
                .map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
                msb.push(obs);
            }
            "gps" | "gps_ll" => {
                if rec.len() != 5 {
                    return Err(Error::parse(format!("line {line}"), "gps row needs 3 values"));
                }
                let a: f64 = field(&rec, 2, line)?;
                let b: f64 = field(&rec, 3, line)?;
                let hdop: f64 = field(&rec, 4, line)?;
                if !(hdop > 0.0) {
                    return Err(Error::parse(format!("line {line}"), "hdop must be positive"));
                }
                let (x_m, y_m) = if kind == "gps" {
                    (a, b)
                } else {
                    let reference = map.reference().ok_or_else(|| {
                        Error::Config("lat/lon fixes need a reference point in the map".into())
                    })?;
                    project(a, b, reference)
                };
                fixes.push((t, GpsFix { x_m, y_m, hdop }, line));
            }
            other => {
                return Err(Error::parse(format!("line {line}"), format!("unknown row kind `{other}`")))
            }
        }
    }
    if msb.is_empty() {
        return Err(Error::parse("end of file", "no msb rows"));
    }
    let mut frames: Vec<Frame> = msb
        .into_iter()
        .enumerate()
        .map(|(index, msb)| Frame { index, msb, gps: None })
        .collect();
    let (mut out_of_bounds, mut unmatched) = (0, 0);
    for (t, fix, line) in fixes {
        let k = (t / FRAME_DT).round() as usize;
        if !map.contains_point(fix.x_m, fix.y_m) {
            log::warn!("line {line}: fix ({:.1}, {:.1}) outside the world", fix.x_m, fix.y_m);
            out_of_bounds += 1;
        } else if k >= frames.len() || frames[k].gps.is_some() {
            unmatched += 1;
        } else {
            frames[k].gps = Some(fix);
        }
    }
    Ok(Ingested {
        frames,
        out_of_bounds,
        unmatched,
    })
}

/// Mean and normal-approximation 95% interval half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub ci: f64,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        };
        Summary { values, mean, ci }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub state: Summary,
    pub env: Summary,
}

pub type Labels = Vec<(MotionState, Environment)>;

/// Per-trace frame accuracy for state and environment, summarized across traces.
pub fn evaluate_accuracy(decoded: &[Labels], truth: &[Labels]) -> Result<Accuracy> {
    if decoded.len() != truth.len() || decoded.is_empty() {
        return Err(Error::invalid(format!(
            "{} decoded traces for {} truth traces",
            decoded.len(),
            truth.len()
        )));
    }
    let mut state = Vec::new();
    let mut env = Vec::new();
    for (i, (d, t)) in decoded.iter().zip(truth).enumerate() {
        if d.len() != t.len() || d.is_empty() {
            return Err(Error::invalid(format!(
                "trace {i}: {} decoded frames for {} truth frames",
                d.len(),
                t.len()
            )));
        }
        let n = d.len() as f64;
        state.push(d.iter().zip(t).filter(|(a, b)| a.0 == b.0).count() as f64 / n);
        env.push(d.iter().zip(t).filter(|(a, b)| a.1 == b.1).count() as f64 / n);
    }
    Ok(Accuracy {
        state: Summary::of(state),
        env: Summary::of(env),
    })
}

pub fn path_labels(path: &[JointState]) -> Labels {
    path.iter().map(|s| (s.state, s.env)).collect()
}

/// Per-frame labels from spans that cover every frame.
pub fn labels_from_spans(spans: &[LabelSpan], len: usize) -> Result<Labels> {
    validate_spans(spans)?;
    let mut out = Vec::with_capacity(len);
    for s in spans {
        if s.start != out.len() {
            return Err(Error::invalid(format!("no label for frame {}", out.len())));
        }
        out.extend(std::iter::repeat((s.state, s.env)).take(s.len()));
    }
    if out.len() != len {
        return Err(Error::invalid(format!("labels cover {} of {len} frames", out.len())));
    }
    Ok(out)
}

fn argmax_first(bins: &[u8]) -> usize {
    let mut best = 0;
    for (i, &b) in bins.iter().enumerate() {
        if b > bins[best] {
            best = i;
        }
    }
    best
}

/// The classifier baseline: highest bin per variable, lowest index on ties.
/// No temporal model, so forbidden pairs can occur.
pub fn argmax_labels(frames: &[Frame]) -> Labels {
    frames
        .iter()
        .map(|f| {
            let s = MotionState::from_index(argmax_first(&f.msb.state_bins)).expect("state index");
            let e = Environment::from_index(argmax_first(&f.msb.env_bins)).expect("env index");
            (s, e)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainVariable {
    State,
    Env,
}

impl ChainVariable {
    fn arity(self) -> usize {
        match self {
            ChainVariable::State => MotionState::COUNT,
            ChainVariable::Env => Environment::COUNT,
        }
    }

    fn bins(self, f: &Frame) -> &[u8] {
        match self {
            ChainVariable::State => &f.msb.state_bins,
            ChainVariable::Env => &f.msb.env_bins,
        }
    }

    fn label(self, l: (MotionState, Environment)) -> usize {
        match self {
            ChainVariable::State => l.0.index(),
            ChainVariable::Env => l.1.index(),
        }
    }
}

/// Single-variable HMM over one group of classifiers, fit by counting.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainHmm {
    pub variable: ChainVariable,
    log_init: Vec<f64>,
    log_trans: Vec<Vec<f64>>,
    /// [classifier][class][bin - 1]
    log_obs: Vec<Vec<Vec<f64>>>,
}

fn log_normalized(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().sum();
    row.iter().map(|v| (v / z).ln()).collect()
}

impl ChainHmm {
    pub fn fit(variable: ChainVariable, traces: &[(&[Frame], &Labels)], smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0) {
            return Err(Error::invalid("chain smoothing must be positive"));
        }
        let n = variable.arity();
        let mut init = vec![smoothing; n];
        let mut trans = vec![vec![smoothing; n]; n];
        let mut obs = vec![vec![vec![smoothing; NUM_BINS]; n]; n];
        for (frames, labels) in traces {
            if frames.len() != labels.len() {
                return Err(Error::invalid("labels and frames differ in length"));
            }
            for (k, (f, &l)) in frames.iter().zip(labels.iter()).enumerate() {
                let c = variable.label(l);
                if k == 0 {
                    init[c] += 1.0;
                } else {
                    trans[variable.label(labels[k - 1])][c] += 1.0;
                }
                for (j, &b) in variable.bins(f).iter().enumerate() {
                    obs[j][c][b as usize - 1] += 1.0;
                }
            }
        }
        Ok(ChainHmm {
            variable,
            log_init: log_normalized(&init),
            log_trans: trans.iter().map(|r| log_normalized(r)).collect(),
            log_obs: obs
                .iter()
                .map(|per_class| per_class.iter().map(|r| log_normalized(r)).collect())
                .collect(),
        })
    }

    fn emission(&self, f: &Frame, c: usize) -> f64 {
        self.variable
            .bins(f)
            .iter()
            .enumerate()
            .map(|(j, &b)| self.log_obs[j][c][b as usize - 1])
            .sum()
    }

    /// Viterbi path as class indices; ties go to the lowest index.
    pub fn decode(&self, frames: &[Frame]) -> Vec<usize> {
        let n = self.variable.arity();
        if frames.is_empty() {
            return Vec::new();
        }
        let mut delta: Vec<f64> = (0..n).map(|c| self.log_init[c] + self.emission(&frames[0], c)).collect();
        let mut back = vec![vec![0usize; n]; frames.len()];
        for (k, f) in frames.iter().enumerate().skip(1) {
            let mut next = vec![0.0; n];
            for c in 0..n {
                let mut best = 0;
                for p in 1..n {
                    if delta[p] + self.log_trans[p][c] > delta[best] + self.log_trans[best][c] {
                        best = p;
                    }
                }
                back[k][c] = best;
                next[c] = delta[best] + self.log_trans[best][c] + self.emission(f, c);
            }
            delta = next;
        }
        let mut c = argmax_f64(&delta);
        let mut path = vec![0; frames.len()];
        for k in (0..frames.len()).rev() {
            path[k] = c;
            c = back[k][c];
        }
        path
    }
}

fn argmax_f64(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// A simulated or annotated trace with complete labels.
#[derive(Debug, Clone)]
pub struct LabeledTrace {
    pub frames: Vec<Frame>,
    pub spans: Vec<LabelSpan>,
}

impl LabeledTrace {
    pub fn labels(&self) -> Result<Labels> {
        labels_from_spans(&self.spans, self.frames.len())
    }
}

/// Training and decoding settings shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub beam: BeamConfig,
    pub smoothing: f64,
    /// Probability that velocity keeps its speed bin and heading in the
    /// starting parameters of full-model training.
    pub motion_stay: f64,
    /// Hard-label EM iterations for the full model.
    pub em_iters: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            beam: BeamConfig {
                max_states: 2000,
                log_threshold: 10.0,
                exact_mode: false,
            },
            smoothing: 0.1,
            motion_stay: 0.7,
            em_iters: 1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        if !(self.smoothing > 0.0) {
            return Err(Error::invalid("smoothing must be positive"));
        }
        if !(self.motion_stay > 0.0 && self.motion_stay < 1.0) {
            return Err(Error::invalid("motion_stay must be in (0, 1)"));
        }
        if self.em_iters == 0 {
            return Err(Error::invalid("em_iters must be at least 1"));
        }
        Ok(())
    }
}

fn hard_label_traces(traces: &[&LabeledTrace]) -> Result<Vec<TrainingTrace>> {
    traces
        .iter()
        .map(|t| {
            Ok(TrainingTrace {
                frames: t.frames.clone(),
                ve: Some(expand_annotations(&t.spans, t.frames.len(), ScheduleKind::HardLabels)?),
            })
        })
        .collect()
}

/// Train the full model on completely labeled traces.
pub fn train_supervised(
    traces: &[&LabeledTrace],
    map: &BuildingMap,
    config: &ExperimentConfig,
) -> Result<ModelParams> {
    config.validate()?;
    let training = hard_label_traces(traces)?;
    let mut params = sticky_motion_params(config.motion_stay);
    for _ in 0..config.em_iters {
        let model = Model::new(&params, map, FactorMask::FULL)?;
        let (counts, _) = e_step(&training, &model, &config.beam)?;
        params = m_step(&params, &counts, config.smoothing);
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    /// Per-frame classifier argmax.
    Argmax,
    /// Separate state and environment HMMs.
    SingleChain,
    /// Joint (state, env) HMM on the sensor board.
    JointMsb,
    /// Joint model with GPS and motion, no map.
    MsbGps,
    /// Everything.
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Argmax,
        AblationRow::SingleChain,
        AblationRow::JointMsb,
        AblationRow::MsbGps,
        AblationRow::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Argmax => "argmax",
            AblationRow::SingleChain => "single_chain",
            AblationRow::JointMsb => "joint_msb",
            AblationRow::MsbGps => "msb_gps",
            AblationRow::Full => "full",
        }
    }

    /// Factors of the joint model behind this row, if it has one.
    pub fn mask(self) -> Option<FactorMask> {
        match self {
            AblationRow::JointMsb => Some(FactorMask::MSB_ONLY),
            AblationRow::MsbGps => Some(FactorMask::NO_MAP),
            AblationRow::Full => Some(FactorMask::FULL),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RowResult {
    pub row: AblationRow,
    pub accuracy: Accuracy,
    pub labels: Vec<Labels>,
    /// Decoded joint paths, for rows backed by the joint model.
    pub paths: Option<Vec<Vec<JointState>>>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    pub fn row(&self, row: AblationRow) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row == row)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,state_mean,state_ci,env_mean,env_ci\n");
        for r in &self.rows {
            let a = &r.accuracy;
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.row.name(),
                a.state.mean,
                a.state.ci,
                a.env.mean,
                a.env.ci
            )
            .expect("string write");
        }
        out
    }
}

struct FoldOutput {
    labels: BTreeMap<AblationRow, Labels>,
    paths: BTreeMap<AblationRow, Vec<JointState>>,
}

/// Leave-one-out cross-validation over the requested rows. The joint-model
/// rows share one parameter set per fold and differ only in factors.
pub fn run_ablation(
    traces: &[LabeledTrace],
    map: &BuildingMap,
    rows: &[AblationRow],
    config: &ExperimentConfig,
) -> Result<AblationTable> {
    config.validate()?;
    if traces.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two traces"));
    }
    let truth: Vec<Labels> = traces.iter().map(|t| t.labels()).collect::<Result<_>>()?;
    let needs_model = rows.iter().any(|r| r.mask().is_some());

    // the first E-step starts from the same parameters in every fold, so
    // per-trace counts are computed once and recombined
    let start = sticky_motion_params(config.motion_stay);
    let first_counts: Vec<ExpectedCounts> = if needs_model {
        let model = Model::new(&start, map, FactorMask::FULL)?;
        traces
            .par_iter()
            .map(|t| {
                let ve = expand_annotations(&t.spans, t.frames.len(), ScheduleKind::HardLabels)?;
                Ok(expected_counts(&t.frames, &model, &config.beam, Some(&ve))?.0)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let folds: Vec<FoldOutput> = (0..traces.len())
        .into_par_iter()
        .map(|i| {
            let held = &traces[i];
            let train: Vec<&LabeledTrace> =
                traces.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t).collect();
            let mut out = FoldOutput {
                labels: BTreeMap::new(),
                paths: BTreeMap::new(),
            };
            let params = if needs_model {
                let mut total = ExpectedCounts::default();
                for (j, c) in first_counts.iter().enumerate() {
                    if j != i {
                        total.merge(c);
                    }
                }
                let mut params = m_step(&start, &total, config.smoothing);
                if config.em_iters > 1 {
                    let training = hard_label_traces(&train)?;
                    for _ in 1..config.em_iters {
                        let model = Model::new(&params, map, FactorMask::FULL)?;
                        let (counts, _) = e_step(&training, &model, &config.beam)?;
                        params = m_step(&params, &counts, config.smoothing);
                    }
                }
                Some(params)
            } else {
                None
            };
            for &row in rows {
                let labels = match row {
                    AblationRow::Argmax => argmax_labels(&held.frames),
                    AblationRow::SingleChain => {
                        let data: Vec<(&[Frame], &Labels)> = (0..traces.len())
                            .filter(|&j| j != i)
                            .map(|j| (traces[j].frames.as_slice(), &truth[j]))
                            .collect();
                        let s = ChainHmm::fit(ChainVariable::State, &data, config.smoothing)?
                            .decode(&held.frames);
                        let e = ChainHmm::fit(ChainVariable::Env, &data, config.smoothing)?
                            .decode(&held.frames);
                        s.iter()
                            .zip(&e)
                            .map(|(&s, &e)| {
                                (
                                    MotionState::from_index(s).expect("state"),
                                    Environment::from_index(e).expect("env"),
                                )
                            })
                            .collect()
                    }
                    _ => {
                        let mask = row.mask().expect("joint row");
                        let params = params.as_ref().expect("trained for joint rows");
                        let model = Model::new(params, map, mask)?;
                        let path = viterbi_decode(&held.frames, &model, &config.beam, None)
                            .map_err(|e| match e {
                                Error::InferenceCollapse { frame } => {
                                    Error::TraceCollapse { trace: i, frame }
                                }
                                other => other,
                            })?
                            .path;
                        let labels = path_labels(&path);
                        out.paths.insert(row, path);
                        labels
                    }
                };
                out.labels.insert(row, labels);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut table = AblationTable { rows: Vec::new() };
    for &row in rows {
        let labels: Vec<Labels> = folds.iter().map(|f| f.labels[&row].clone()).collect();
        let paths = row
            .mask()
            .map(|_| folds.iter().map(|f| f.paths[&row].clone()).collect());
        table.rows.push(RowResult {
            row,
            accuracy: evaluate_accuracy(&labels, &truth)?,
            labels,
            paths,
        });
    }
    Ok(table)
}

/// Fraction of frames decoded Indoors at a cell outside every building.
pub fn indoor_outside_fraction(paths: &[Vec<JointState>], map: &BuildingMap) -> f64 {
    let total: usize = paths.iter().map(|p| p.len()).sum();
    let bad = paths
        .iter()
        .flatten()
        .filter(|s| s.env == Environment::Indoors && !map.is_inside(s.location))
        .count();
    bad as f64 / total.max(1) as f64
}

/// Frames carrying a forbidden (state, env) pair.
pub fn forbidden_frames(paths: &[Vec<JointState>]) -> usize {
    paths
        .iter()
        .flatten()
        .filter(|s| !is_admissible(s.state, s.env))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VeExperimentConfig {
    pub percents: Vec<u32>,
    pub kinds: Vec<ScheduleKind>,
    /// Repeats of the random single-frame variant; zero skips it.
    pub repeats: usize,
    pub seed: u64,
    /// Jitter on the uniform starting parameters.
    pub init_jitter: f64,
    pub em: EmConfig,
    /// Factors of the trained and decoded model.
    pub factors: FactorMask,
}

impl Default for VeExperimentConfig {
    fn default() -> Self {
        VeExperimentConfig {
            percents: vec![0, 25, 50, 75, 90, 100],
            kinds: vec![
                ScheduleKind::LinearFade,
                ScheduleKind::TwoWayUniform,
                ScheduleKind::AllUniform,
            ],
            repeats: 20,
            seed: 0,
            init_jitter: 1.0,
            em: EmConfig {
                max_iters: 30,
                ..Default::default()
            },
            factors: FactorMask::MSB_ONLY,
        }
    }
}

pub const RANDOM_SINGLE_FRAME: &str = "random_single_frame";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: String,
    pub percent: u32,
    pub state: Summary,
    pub env: Summary,
    /// Decoded held-out paths, one per trace (first repeat only for the
    /// random variant).
    #[serde(skip)]
    pub paths: Vec<Vec<JointState>>,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("kind,percent,state_mean,state_ci,env_mean,env_ci\n");
    for p in points {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            p.kind, p.percent, p.state.mean, p.state.ci, p.env.mean, p.env.ci
        )
        .expect("string write");
    }
    out
}

/// Leave-one-out EM on partially labeled traces, then Viterbi on the
/// held-out trace. Returns decoded paths and accuracy.
fn ve_cross_validate(
    traces: &[LabeledTrace],
    annotations: &[Option<VeSchedule>],
    map: &BuildingMap,
    config: &VeExperimentConfig,
) -> Result<(Accuracy, Vec<Vec<JointState>>)> {
    let init = initialize_params(config.seed, config.init_jitter);
    let paths: Vec<Vec<JointState>> = (0..traces.len())
        .into_par_iter()
        .map(|i| {
            let training: Vec<TrainingTrace> = (0..traces.len())
                .filter(|&j| j != i)
                .map(|j| TrainingTrace {
                    frames: traces[j].frames.clone(),
                    ve: annotations[j].clone(),
                })
                .collect();
            let report = em_train(&training, map, config.factors, &init, &config.em)?;
            let model = Model::new(&report.params, map, config.factors)?;
            Ok(viterbi_decode(&traces[i].frames, &model, &config.em.beam, None)?.path)
        })
        .collect::<Result<_>>()?;
    let truth: Vec<Labels> = traces.iter().map(|t| t.labels()).collect::<Result<_>>()?;
    let decoded: Vec<Labels> = paths.iter().map(|p| path_labels(p)).collect();
    Ok((evaluate_accuracy(&decoded, &truth)?, paths))
}

/// Accuracy against the fraction of labels dropped, per schedule kind.
/// Hard labels only apply at zero percent and are skipped elsewhere.
pub fn run_ve_experiment(
    traces: &[LabeledTrace],
    map: &BuildingMap,
    config: &VeExperimentConfig,
) -> Result<Vec<CurvePoint>> {
    if traces.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two traces"));
    }
    config.em.validate()?;
    config.factors.validate()?;
    let mut points = Vec::new();
    for &kind in &config.kinds {
        for &percent in &config.percents {
            if kind == ScheduleKind::HardLabels && percent > 0 {
                continue;
            }
            let annotations: Vec<Option<VeSchedule>> = traces
                .iter()
                .map(|t| {
                    let kept = drop_labels(&t.spans, percent)?;
                    expand_annotations(&kept, t.frames.len(), kind).map(Some)
                })
                .collect::<Result<_>>()?;
            let (acc, paths) = ve_cross_validate(traces, &annotations, map, config)?;
            points.push(CurvePoint {
                kind: kind.name().to_string(),
                percent,
                state: acc.state,
                env: acc.env,
                paths,
            });
        }
    }
    if config.repeats > 0 {
        let mut state = Vec::new();
        let mut env = Vec::new();
        let mut first_paths = Vec::new();
        for r in 0..config.repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64 + 1);
            let annotations: Vec<Option<VeSchedule>> = traces
                .iter()
                .map(|t| {
                    let kept = drop_labels_random(&t.spans, &mut rng)?;
                    expand_annotations(&kept, t.frames.len(), ScheduleKind::TwoWayUniform).map(Some)
                })
                .collect::<Result<_>>()?;
            let (acc, paths) = ve_cross_validate(traces, &annotations, map, config)?;
            state.push(acc.state.mean);
            env.push(acc.env.mean);
            if r == 0 {
                first_paths = paths;
            }
        }
        points.push(CurvePoint {
            kind: RANDOM_SINGLE_FRAME.to_string(),
            percent: 100,
            state: Summary::of(state),
            env: Summary::of(env),
            paths: first_paths,
        });
    }
    Ok(points)
}

pub const PATH_HEADER: &str = "frame,x,y,speed_bin,heading_bin,state,env";

pub fn path_to_csv(path: &[JointState]) -> String {
    let mut out = String::from(PATH_HEADER);
    out.push('\n');
    for (k, s) in path.iter().enumerate() {
        writeln!(
            out,
            "{k},{},{},{},{},{},{}",
            s.location.x, s.location.y, s.velocity.speed_bin, s.velocity.heading_bin, s.state, s.env
        )
        .expect("string write");
    }
    out
}

pub fn path_from_csv<R: Read>(input: R) -> Result<Vec<JointState>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let mut path = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let at = |e: Error| Error::parse(format!("line {line}"), e.to_string());
        let k: usize = field(&rec, 0, line)?;
        if k != path.len() {
            return Err(Error::parse(format!("line {line}"), format!("expected frame {}", path.len())));
        }
        let state: MotionState = field::<String>(&rec, 5, line)?.parse().map_err(at)?;
        let env: Environment = field::<String>(&rec, 6, line)?.parse().map_err(at)?;
        let velocity = PolarVelocity::new(field(&rec, 3, line)?, field(&rec, 4, line)?).map_err(at)?;
        let location = GridLocation::new(field(&rec, 1, line)?, field(&rec, 2, line)?);
        path.push(JointState::new(location, velocity, state, env).map_err(at)?);
    }
    Ok(path)
}

pub const PLOT_HEADER: &str = "frame,x,y,state,env,gps_x,gps_y";

/// Per-frame plot data: decoded cell center, labels and the raw fix.
pub fn trace_plot_csv(path: &[JointState], frames: &[Frame]) -> Result<String> {
    if path.len() != frames.len() {
        return Err(Error::invalid("path and frames differ in length"));
    }
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for (k, (s, f)) in path.iter().zip(frames).enumerate() {
        let (x, y) = s.location.center();
        let (gx, gy) = f
            .gps
            .map_or((String::new(), String::new()), |g| (format!("{:.3}", g.x_m), format!("{:.3}", g.y_m)));
        writeln!(out, "{k},{x:.1},{y:.1},{},{},{gx},{gy}", s.state, s.env).expect("string write");
    }
    Ok(out)
}

const PX_PER_M: f64 = 4.0;

/// SVG of building boxes, the GPS track and the decoded path. The path is
/// split into runs of constant indoor/outdoor status; indoor runs are drawn
/// thick and marked with stars at every cell.
pub fn trace_plot_svg(path: &[JointState], frames: &[Frame], map: &BuildingMap) -> Result<String> {
    if path.len() != frames.len() {
        return Err(Error::invalid("path and frames differ in length"));
    }
    let w = map.width() as f64 * PX_PER_M;
    let h = map.height() as f64 * PX_PER_M;
    let px = |x: f64, y: f64| (x * PX_PER_M, h - y * PX_PER_M);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("string write");
    writeln!(svg, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##).expect("string write");
    for b in map.buildings() {
        let (x, y) = px(b.min_x_m, b.max_y_m);
        writeln!(
            svg,
            r##"<rect class="building" x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#dddddd" stroke="#444444"/>"##,
            (b.max_x_m - b.min_x_m) * PX_PER_M,
            (b.max_y_m - b.min_y_m) * PX_PER_M
        )
        .expect("string write");
    }
    let fixes: Vec<(f64, f64)> = frames
        .iter()
        .filter_map(|f| f.gps.map(|g| px(g.x_m, g.y_m)))
        .collect();
    if !fixes.is_empty() {
        let pts: Vec<String> = fixes.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        writeln!(
            svg,
            r##"<polyline class="gps" points="{}" fill="none" stroke="#3366cc" stroke-width="1"/>"##,
            pts.join(" ")
        )
        .expect("string write");
        for (x, y) in &fixes {
            writeln!(svg, r##"<circle class="fix" cx="{x:.1}" cy="{y:.1}" r="2" fill="#3366cc"/>"##)
                .expect("string write");
        }
    }
    let mut start = 0;
    while start < path.len() {
        let indoors = path[start].env == Environment::Indoors;
        let mut end = start;
        while end + 1 < path.len() && (path[end + 1].env == Environment::Indoors) == indoors {
            end += 1;
        }
        let cells: Vec<(f64, f64)> = path[start..=end]
            .iter()
            .map(|s| {
                let (x, y) = s.location.center();
                px(x, y)
            })
            .collect();
        let pts: Vec<String> = cells.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let (class, width) = if indoors { ("inside", "4") } else { ("outside", "1.5") };
        writeln!(
            svg,
            r##"<polyline class="path {class}" data-start="{start}" data-end="{end}" points="{}" fill="none" stroke="#cc3333" stroke-width="{width}"/>"##,
            pts.join(" ")
        )
        .expect("string write");
        if indoors {
            for (x, y) in &cells {
                writeln!(
                    svg,
                    r##"<text class="star" x="{x:.1}" y="{y:.1}" font-size="10" text-anchor="middle">*</text>"##
                )
                .expect("string write");
            }
        }
        start = end + 1;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Both plot outputs.
pub fn emit_trace_plot(path: &[JointState], frames: &[Frame], map: &BuildingMap) -> Result<(String, String)> {
    Ok((trace_plot_svg(path, frames, map)?, trace_plot_csv(path, frames)?))
}
