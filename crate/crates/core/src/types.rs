//! State spaces, observations and the packed lattice key.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame period of the sensor board stream (4 Hz).
pub const FRAME_DT: f64 = 0.25;

/// Number of quantization bins for classifier probabilities.
pub const NUM_BINS: usize = 10;

/// GPS fixes with hdop above this are treated as outliers.
pub const HDOP_OUTLIER: f64 = 8.0;

/// Discrete translational speeds in m/s. Index 0 must be stationary.
pub const SPEED_BINS: [f64; 9] = [0.0, 0.5, 1.0, 1.5, 2.5, 4.0, 7.0, 12.0, 20.0];
pub const NUM_SPEEDS: usize = SPEED_BINS.len();

/// 45 degree heading sectors, 0 = east, counter-clockwise.
pub const NUM_HEADINGS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MotionState {
    Stationary,
    Walking,
    Running,
    DrivingVehicle,
    UpDownStairs,
}

impl MotionState {
    pub const COUNT: usize = 5;
    pub const ALL: [MotionState; 5] = [
        MotionState::Stationary,
        MotionState::Walking,
        MotionState::Running,
        MotionState::DrivingVehicle,
        MotionState::UpDownStairs,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Speed-sharing group: walking and stairs share motion statistics.
    pub fn speed_group(self) -> usize {
        match self {
            MotionState::Stationary => 0,
            MotionState::Walking | MotionState::UpDownStairs => 1,
            MotionState::Running => 2,
            MotionState::DrivingVehicle => 3,
        }
    }
}

impl std::fmt::Display for MotionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for MotionState {
    type Err = Error;

    /// Variant names, case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        MotionState::ALL
            .into_iter()
            .find(|v| format!("{v:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown motion state `{s}`")))
    }
}

pub const NUM_SPEED_GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Environment {
    Indoors,
    Outdoors,
    Vehicle,
}

impl Environment {
    pub const COUNT: usize = 3;
    pub const ALL: [Environment; 3] = [
        Environment::Indoors,
        Environment::Outdoors,
        Environment::Vehicle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl std::fmt::Display for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Environment::ALL
            .into_iter()
            .find(|v| format!("{v:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown environment `{s}`")))
    }
}

/// Hard constraints between environment and motion state.
pub fn is_admissible(state: MotionState, env: Environment) -> bool {
    !matches!(
        (env, state),
        (Environment::Indoors | Environment::Outdoors, MotionState::DrivingVehicle)
            | (Environment::Vehicle, MotionState::UpDownStairs)
    )
}

/// Dense index over the 12 admissible (state, env) pairs, ordered by
/// (state ordinal, env ordinal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SePair(u8);

pub const NUM_SE: usize = 12;

const SE_TABLE: [(MotionState, Environment); NUM_SE] = {
    use Environment::*;
    use MotionState::*;
    [
        (Stationary, Indoors),
        (Stationary, Outdoors),
        (Stationary, Vehicle),
        (Walking, Indoors),
        (Walking, Outdoors),
        (Walking, Vehicle),
        (Running, Indoors),
        (Running, Outdoors),
        (Running, Vehicle),
        (DrivingVehicle, Vehicle),
        (UpDownStairs, Indoors),
        (UpDownStairs, Outdoors),
    ]
};

impl SePair {
    pub fn new(state: MotionState, env: Environment) -> Option<Self> {
        SE_TABLE
            .iter()
            .position(|&p| p == (state, env))
            .map(|i| SePair(i as u8))
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < NUM_SE);
        SePair(i as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn state(self) -> MotionState {
        SE_TABLE[self.index()].0
    }

    pub fn env(self) -> Environment {
        SE_TABLE[self.index()].1
    }

    pub fn all() -> impl Iterator<Item = SePair> {
        (0..NUM_SE).map(SePair::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridLocation {
    pub x: u32,
    pub y: u32,
}

impl GridLocation {
    pub fn new(x: u32, y: u32) -> Self {
        GridLocation { x, y }
    }

    /// Cell center in meters.
    pub fn center(self) -> (f64, f64) {
        (self.x as f64 + 0.5, self.y as f64 + 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PolarVelocity {
    pub speed_bin: u8,
    pub heading_bin: u8,
}

impl PolarVelocity {
    pub const ZERO: PolarVelocity = PolarVelocity {
        speed_bin: 0,
        heading_bin: 0,
    };

    pub fn new(speed_bin: usize, heading_bin: usize) -> Result<Self> {
        if speed_bin >= NUM_SPEEDS || heading_bin >= NUM_HEADINGS {
            return Err(Error::invalid(format!(
                "velocity ({speed_bin}, {heading_bin}) out of range"
            )));
        }
        Ok(PolarVelocity {
            speed_bin: speed_bin as u8,
            heading_bin: heading_bin as u8,
        })
    }

    pub fn speed(self) -> f64 {
        SPEED_BINS[self.speed_bin as usize]
    }

    /// Unit vector of the heading sector center. Axis-aligned sectors are exact.
    pub fn direction(self) -> (f64, f64) {
        heading_unit(self.heading_bin as usize)
    }
}

pub(crate) fn heading_unit(h: usize) -> (f64, f64) {
    use std::f64::consts::FRAC_1_SQRT_2 as D;
    const UNIT: [(f64, f64); NUM_HEADINGS] = [
        (1.0, 0.0),
        (D, D),
        (0.0, 1.0),
        (-D, D),
        (-1.0, 0.0),
        (-D, -D),
        (0.0, -1.0),
        (D, -D),
    ];
    UNIT[h % NUM_HEADINGS]
}

/// Heading change between two sectors, mapped to -4..=3 and returned as a
/// table index 0..8 (offset + 4).
pub fn heading_offset_index(prev: usize, next: usize) -> usize {
    (next + NUM_HEADINGS - prev + 4) % NUM_HEADINGS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub x_m: f64,
    pub y_m: f64,
    pub hdop: f64,
}

impl GpsFix {
    /// o_k: the fix is trusted only when its hdop is at most the outlier gate.
    pub fn is_inlier(&self) -> bool {
        self.hdop <= HDOP_OUTLIER
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsbObservation {
    pub state_bins: [u8; MotionState::COUNT],
    pub env_bins: [u8; Environment::COUNT],
}

impl MsbObservation {
    pub fn new(state_bins: [u8; 5], env_bins: [u8; 3]) -> Result<Self> {
        let obs = MsbObservation {
            state_bins,
            env_bins,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        for &b in self.state_bins.iter().chain(self.env_bins.iter()) {
            if b == 0 || b as usize > NUM_BINS {
                return Err(Error::invalid(format!(
                    "classifier bin {b} outside 1..={NUM_BINS}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub msb: MsbObservation,
    pub gps: Option<GpsFix>,
}

impl Frame {
    /// I_k
    pub fn has_gps(&self) -> bool {
        self.gps.is_some()
    }

    /// The fix to score against, if any: present and not an hdop outlier.
    pub fn usable_gps(&self) -> Option<&GpsFix> {
        self.gps.as_ref().filter(|g| g.is_inlier())
    }
}

/// Check that frame indices run consecutively from zero.
pub fn validate_frames(frames: &[Frame]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        if f.index != i {
            return Err(Error::invalid(format!(
                "frame {} has index {}; indices must be consecutive from 0",
                i, f.index
            )));
        }
        f.msb.validate()?;
        if let Some(g) = &f.gps {
            if !(g.hdop > 0.0) {
                return Err(Error::invalid(format!("frame {i}: hdop must be positive")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JointState {
    pub location: GridLocation,
    pub velocity: PolarVelocity,
    pub state: MotionState,
    pub env: Environment,
}

impl JointState {
    pub fn new(
        location: GridLocation,
        velocity: PolarVelocity,
        state: MotionState,
        env: Environment,
    ) -> Result<Self> {
        if !is_admissible(state, env) {
            return Err(Error::invalid(format!(
                "{state:?} is not possible in environment {env:?}"
            )));
        }
        Ok(JointState {
            location,
            velocity,
            state,
            env,
        })
    }

    pub fn se(&self) -> SePair {
        SePair::new(self.state, self.env).expect("joint state holds an admissible pair")
    }

    pub fn key(&self) -> StateKey {
        StateKey::pack(self.location, self.velocity, self.se())
    }
}

/// Packed lattice key. Numeric order equals the lexicographic order on
/// (x, y, speed, heading, state, env) used for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey(pub u64);

impl StateKey {
    pub fn pack(l: GridLocation, v: PolarVelocity, se: SePair) -> Self {
        debug_assert!(l.x <= u16::MAX as u32 && l.y <= u16::MAX as u32);
        StateKey(
            (l.x as u64) << 40
                | (l.y as u64) << 24
                | (v.speed_bin as u64) << 16
                | (v.heading_bin as u64) << 8
                | se.0 as u64,
        )
    }

    pub fn location(self) -> GridLocation {
        GridLocation::new(((self.0 >> 40) & 0xFFFF) as u32, ((self.0 >> 24) & 0xFFFF) as u32)
    }

    pub fn speed_bin(self) -> usize {
        ((self.0 >> 16) & 0xFF) as usize
    }

    pub fn heading_bin(self) -> usize {
        ((self.0 >> 8) & 0xFF) as usize
    }

    pub fn se(self) -> SePair {
        SePair((self.0 & 0xFF) as u8)
    }

    pub fn unpack(self) -> JointState {
        let se = self.se();
        JointState {
            location: self.location(),
            velocity: PolarVelocity {
                speed_bin: self.speed_bin() as u8,
                heading_bin: self.heading_bin() as u8,
            },
            state: se.state(),
            env: se.env(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpan {
    pub start: usize,
    pub end: usize,
    pub state: MotionState,
    pub env: Environment,
}

impl LabelSpan {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Spans must be admissible, non-empty, ordered and non-overlapping.
pub fn validate_spans(spans: &[LabelSpan]) -> Result<()> {
    let mut next_free = 0usize;
    for (i, s) in spans.iter().enumerate() {
        if s.end < s.start {
            return Err(Error::invalid(format!("span {i} ends before it starts")));
        }
        if i > 0 && s.start < next_free {
            return Err(Error::invalid(format!(
                "span {i} starts at {} but previous span ends at {}",
                s.start,
                next_free - 1
            )));
        }
        if !is_admissible(s.state, s.env) {
            return Err(Error::invalid(format!(
                "span {i} labels forbidden pair {:?}/{:?}",
                s.state, s.env
            )));
        }
        next_free = s.end + 1;
    }
    Ok(())
}

/// Collapse a per-frame (state, env) sequence into maximal constant spans.
pub fn spans_from_sequence(seq: &[(MotionState, Environment)]) -> Vec<LabelSpan> {
    let mut spans: Vec<LabelSpan> = Vec::new();
    for (k, &(state, env)) in seq.iter().enumerate() {
        match spans.last_mut() {
            Some(last) if last.state == state && last.env == env && last.end + 1 == k => {
                last.end = k
            }
            _ => spans.push(LabelSpan {
                start: k,
                end: k,
                state,
                env,
            }),
        }
    }
    spans
}
