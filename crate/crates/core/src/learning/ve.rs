//! Virtual-evidence schedules built from partial label spans.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    is_admissible, validate_spans, Environment, LabelSpan, MotionState, SePair, NUM_SE,
};

const NS: usize = MotionState::COUNT;
const NE: usize = Environment::COUNT;

pub type VeTable = [[f64; NE]; NS];

/// Per-frame non-negative scores over (state, env). Entries for forbidden
/// pairs are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    tables: Vec<VeTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Every frame labeled; gaps are an error.
    HardLabels,
    /// Weight slides linearly from the previous label to the next one.
    LinearFade,
    /// Equal weight on the labels on either side of a gap.
    TwoWayUniform,
    /// Gaps carry no information.
    AllUniform,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::HardLabels,
        ScheduleKind::LinearFade,
        ScheduleKind::TwoWayUniform,
        ScheduleKind::AllUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::HardLabels => "hard_labels",
            ScheduleKind::LinearFade => "linear_fade",
            ScheduleKind::TwoWayUniform => "two_way_uniform",
            ScheduleKind::AllUniform => "all_uniform",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown schedule kind `{s}`")))
    }
}

fn uniform_table() -> VeTable {
    let mut t = [[0.0; NE]; NS];
    for se in SePair::all() {
        t[se.state().index()][se.env().index()] = 1.0;
    }
    t
}

fn delta(s: MotionState, e: Environment) -> VeTable {
    let mut t = [[0.0; NE]; NS];
    t[s.index()][e.index()] = 1.0;
    t
}

impl VeSchedule {
    pub fn new(tables: Vec<VeTable>) -> Result<Self> {
        for (k, t) in tables.iter().enumerate() {
            let mut any = false;
            for s in MotionState::ALL {
                for e in Environment::ALL {
                    let v = t[s.index()][e.index()];
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::invalid(format!(
                            "frame {k}: score {v} for {s:?}/{e:?} must be finite and >= 0"
                        )));
                    }
                    any |= is_admissible(s, e) && v > 0.0;
                }
            }
            if !any {
                return Err(Error::invalid(format!(
                    "frame {k}: no admissible pair has a positive score"
                )));
            }
        }
        Ok(VeSchedule { tables })
    }

    /// Score 1 on every admissible pair at every frame.
    pub fn uniform(len: usize) -> Self {
        VeSchedule {
            tables: vec![uniform_table(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn table(&self, k: usize) -> &VeTable {
        &self.tables[k]
    }

    pub fn score(&self, k: usize, s: MotionState, e: Environment) -> f64 {
        self.tables[k][s.index()][e.index()]
    }

    /// log f_k per dense pair index; -inf where the score is zero.
    pub(crate) fn log_weights(&self, k: usize) -> [f64; NUM_SE] {
        let t = &self.tables[k];
        let mut out = [0.0; NUM_SE];
        for se in SePair::all() {
            out[se.index()] = t[se.state().index()][se.env().index()].ln();
        }
        out
    }
}

/// Turn label spans into a per-frame schedule. Leading and trailing gaps
/// have only one neighboring label; LinearFade and TwoWayUniform put all
/// weight on it. With no spans at all, every frame is uniform.
pub fn expand_annotations(
    spans: &[LabelSpan],
    trace_len: usize,
    kind: ScheduleKind,
) -> Result<VeSchedule> {
    validate_spans(spans)?;
    if let Some(last) = spans.last() {
        if last.end >= trace_len {
            return Err(Error::invalid(format!(
                "span ends at frame {} but the trace has {trace_len} frames",
                last.end
            )));
        }
    }
    let mut tables = vec![uniform_table(); trace_len];
    let mut covered = 0usize;
    for s in spans {
        for t in &mut tables[s.start..=s.end] {
            *t = delta(s.state, s.env);
        }
        covered += s.len();
    }
    if kind == ScheduleKind::HardLabels {
        if covered != trace_len {
            return Err(Error::invalid(format!(
                "hard labels must cover every frame; {} of {trace_len} are unlabeled",
                trace_len - covered
            )));
        }
        return VeSchedule::new(tables);
    }
    if kind == ScheduleKind::AllUniform || spans.is_empty() {
        return VeSchedule::new(tables);
    }

    let first = spans[0];
    for t in &mut tables[..first.start] {
        *t = delta(first.state, first.env);
    }
    let last = spans[spans.len() - 1];
    for t in &mut tables[last.end + 1..] {
        *t = delta(last.state, last.env);
    }
    for pair in spans.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (k1, k2) = (a.end, b.start);
        for k in k1 + 1..k2 {
            let mut t = [[0.0; NE]; NS];
            let (wa, wb) = match kind {
                ScheduleKind::LinearFade => {
                    let span = (k2 - k1) as f64;
                    ((k2 - k) as f64 / span, (k - k1) as f64 / span)
                }
                _ => (1.0, 1.0),
            };
            t[a.state.index()][a.env.index()] += wa;
            if (b.state, b.env) == (a.state, a.env) && kind == ScheduleKind::TwoWayUniform {
                // same label on both sides: still a single unit of weight
                t[b.state.index()][b.env.index()] = 1.0;
            } else {
                t[b.state.index()][b.env.index()] += wb;
            }
            tables[k] = t;
        }
    }
    VeSchedule::new(tables)
}

/// Keep the central `ceil(L * (100 - percent) / 100)` frames of each span,
/// at least one. When the trimmed count is odd the extra frame comes off
/// the early side.
pub fn drop_labels(spans: &[LabelSpan], percent: u32) -> Result<Vec<LabelSpan>> {
    if percent > 100 {
        return Err(Error::invalid(format!("percent {percent} exceeds 100")));
    }
    validate_spans(spans)?;
    Ok(spans
        .iter()
        .map(|s| {
            let len = s.len();
            let keep = ((len * (100 - percent as usize)).div_ceil(100)).max(1);
            let trim = len - keep;
            let start = s.start + trim.div_ceil(2);
            LabelSpan {
                start,
                end: start + keep - 1,
                ..*s
            }
        })
        .collect())
}

/// Keep one uniformly chosen frame of each span.
pub fn drop_labels_random<R: Rng>(spans: &[LabelSpan], rng: &mut R) -> Result<Vec<LabelSpan>> {
    validate_spans(spans)?;
    Ok(spans
        .iter()
        .map(|s| {
            let k = rng.gen_range(s.start..=s.end);
            LabelSpan {
                start: k,
                end: k,
                ..*s
            }
        })
        .collect())
}

pub fn annotations_to_json(spans: &[LabelSpan]) -> String {
    serde_json::to_string_pretty(spans).expect("spans serialize")
}

pub fn annotations_from_json(s: &str) -> Result<Vec<LabelSpan>> {
    let spans: Vec<LabelSpan> = serde_json::from_str(s)?;
    validate_spans(&spans)?;
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Environment::*;
    use MotionState::*;

    fn span(start: usize, end: usize, state: MotionState, env: Environment) -> LabelSpan {
        LabelSpan {
            start,
            end,
            state,
            env,
        }
    }

    #[test]
    fn linear_fade_midpoint() {
        let spans = [span(0, 4, Walking, Outdoors), span(14, 20, Running, Outdoors)];
        let ve = expand_annotations(&spans, 21, ScheduleKind::LinearFade).unwrap();
        assert_eq!(ve.score(9, Walking, Outdoors), 0.5);
        assert_eq!(ve.score(9, Running, Outdoors), 0.5);
        assert_eq!(ve.score(9, Stationary, Outdoors), 0.0);
        assert!((ve.score(5, Walking, Outdoors) - 0.9).abs() < 1e-12);
        assert_eq!(ve.score(2, Walking, Outdoors), 1.0);
        assert_eq!(ve.score(2, Running, Outdoors), 0.0);
    }

    #[test]
    fn two_way_uniform_in_gap() {
        let spans = [span(0, 4, Walking, Outdoors), span(14, 20, Stationary, Indoors)];
        let ve = expand_annotations(&spans, 21, ScheduleKind::TwoWayUniform).unwrap();
        for k in 5..14 {
            assert_eq!(ve.score(k, Walking, Outdoors), 1.0);
            assert_eq!(ve.score(k, Stationary, Indoors), 1.0);
            let total: f64 = ve.table(k).iter().flatten().sum();
            assert_eq!(total, 2.0);
        }
    }

    #[test]
    fn all_uniform_gaps() {
        let spans = [span(3, 4, Walking, Outdoors)];
        let ve = expand_annotations(&spans, 8, ScheduleKind::AllUniform).unwrap();
        assert_eq!(ve.table(0), &uniform_table());
        assert_eq!(ve.table(7), &uniform_table());
        assert_eq!(ve.table(3), &delta(Walking, Outdoors));
    }

    #[test]
    fn edge_gaps_fall_back_to_the_neighbor() {
        let spans = [span(3, 4, Walking, Outdoors)];
        for kind in [ScheduleKind::LinearFade, ScheduleKind::TwoWayUniform] {
            let ve = expand_annotations(&spans, 8, kind).unwrap();
            assert_eq!(ve.table(0), &delta(Walking, Outdoors));
            assert_eq!(ve.table(7), &delta(Walking, Outdoors));
        }
    }

    #[test]
    fn hard_labels_reject_gaps() {
        let spans = [span(0, 4, Walking, Outdoors), span(6, 9, Running, Outdoors)];
        assert!(expand_annotations(&spans, 10, ScheduleKind::HardLabels).is_err());
        let full = [span(0, 5, Walking, Outdoors), span(6, 9, Running, Outdoors)];
        assert!(expand_annotations(&full, 10, ScheduleKind::HardLabels).is_ok());
        assert!(expand_annotations(&full, 12, ScheduleKind::HardLabels).is_err());
    }

    #[test]
    fn drop_percentages() {
        let s = [span(0, 39, Walking, Outdoors)];
        assert_eq!(drop_labels(&s, 0).unwrap(), s.to_vec());
        assert_eq!(drop_labels(&s, 50).unwrap(), vec![span(10, 29, Walking, Outdoors)]);
        let s41 = [span(0, 40, Walking, Outdoors)];
        assert_eq!(drop_labels(&s41, 100).unwrap(), vec![span(20, 20, Walking, Outdoors)]);
        // odd trim: 10 frames keep 7, trim 3 -> two off the front
        let s10 = [span(0, 9, Walking, Outdoors)];
        assert_eq!(drop_labels(&s10, 30).unwrap(), vec![span(2, 8, Walking, Outdoors)]);
        assert!(drop_labels(&s, 101).is_err());
    }

    #[test]
    fn random_single_frame_stays_inside() {
        use rand::SeedableRng;
        let s = [span(0, 9, Walking, Outdoors), span(10, 30, Running, Outdoors)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let out = drop_labels_random(&s, &mut rng).unwrap();
            for (a, b) in out.iter().zip(&s) {
                assert_eq!(a.len(), 1);
                assert!(a.start >= b.start && a.end <= b.end);
            }
        }
    }

    #[test]
    fn schedule_validation() {
        let mut t = [[0.0; NE]; NS];
        assert!(VeSchedule::new(vec![t]).is_err());
        t[DrivingVehicle.index()][Indoors.index()] = 1.0;
        assert!(VeSchedule::new(vec![t]).is_err());
        t[Walking.index()][Indoors.index()] = -1.0;
        assert!(VeSchedule::new(vec![t]).is_err());
    }

    #[test]
    fn annotations_roundtrip() {
        let s = vec![span(0, 9, Walking, Outdoors), span(10, 30, DrivingVehicle, Vehicle)];
        assert_eq!(annotations_from_json(&annotations_to_json(&s)).unwrap(), s);
    }
}
