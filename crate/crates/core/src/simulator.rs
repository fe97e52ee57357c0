//! Synthetic worlds, activity scripts and noisy observations.
//!
//! Motion is sampled from the same location kernel the model uses, so every
//! simulated trajectory has non-zero probability under any parameter
//! setting with strictly positive CPTs.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::location_transition_support;
use crate::features::quantize;
use crate::map::{BuildingBox, BuildingMap};
use crate::types::*;

const NS: usize = MotionState::COUNT;
const NE: usize = Environment::COUNT;
const PLACEMENT_ATTEMPTS: usize = 2000;
/// Cells ahead on the planned path used as the steering target.
const LOOKAHEAD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub width_cells: u32,
    pub height_cells: u32,
    pub building_count: usize,
    /// Inclusive range of building edge lengths in meters.
    pub building_size_m: [u32; 2],
    /// Minimum free gap between buildings.
    pub corridor_m: u32,
    /// Minimum distance from buildings to the world edge.
    pub edge_margin_m: u32,
    pub segment_secs: [f64; 2],
    /// Include one driving loop in generated scripts.
    pub drive: bool,
    /// A GPS fix is attempted every this many frames.
    pub gps_every: usize,
    pub hdop_range: [f64; 2],
    /// Multiplier on the sqrt(2 hdop) position noise; 0 gives exact fixes.
    pub gps_noise_scale: f64,
    pub outlier_near_rate: f64,
    pub outlier_near_m: f64,
    pub outlier_base_rate: f64,
    pub outlier_offset_m: [f64; 2],
    pub indoor_dropout: f64,
    /// Row = true class, column = class the classifiers appear to see.
    pub state_confusion: [[f64; NS]; NS],
    pub env_confusion: [[f64; NE]; NE],
    /// Mean time an apparent class persists before being redrawn.
    pub confusion_dwell_s: f64,
    /// Probability targets for the apparent class and for every other class.
    pub classifier_high: f64,
    pub classifier_low: f64,
    /// Beta concentration around those targets.
    pub concentration: f64,
}

fn diagonal<const N: usize>(d: f64) -> [[f64; N]; N] {
    let off = (1.0 - d) / (N - 1) as f64;
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { d } else { off }))
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            width_cells: 100,
            height_cells: 100,
            building_count: 5,
            building_size_m: [10, 22],
            corridor_m: 2,
            edge_margin_m: 8,
            segment_secs: [30.0, 120.0],
            drive: true,
            gps_every: 4,
            hdop_range: [1.0, 3.0],
            gps_noise_scale: 1.0,
            outlier_near_rate: 0.15,
            outlier_near_m: 10.0,
            outlier_base_rate: 0.01,
            outlier_offset_m: [20.0, 50.0],
            indoor_dropout: 1.0,
            state_confusion: diagonal(0.8),
            env_confusion: diagonal(0.8),
            confusion_dwell_s: 2.0,
            classifier_high: 0.75,
            classifier_low: 0.15,
            concentration: 12.0,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0] >= min && r[0] <= r[1] && r[1].is_finite()) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_cells < 2 * self.edge_margin_m + 2 || self.height_cells < 2 * self.edge_margin_m + 2
        {
            return Err(Error::Config("world too small for its edge margin".into()));
        }
        if self.building_size_m[0] == 0 || self.building_size_m[0] > self.building_size_m[1] {
            return Err(Error::Config("building size range is invalid".into()));
        }
        if self.gps_every == 0 {
            return Err(Error::Config("gps_every must be at least 1".into()));
        }
        check_range("segment_secs", self.segment_secs, 0.25)?;
        check_range("hdop", self.hdop_range, f64::MIN_POSITIVE)?;
        check_range("outlier_offset_m", self.outlier_offset_m, 0.0)?;
        for (name, p) in [
            ("outlier_near_rate", self.outlier_near_rate),
            ("outlier_base_rate", self.outlier_base_rate),
            ("indoor_dropout", self.indoor_dropout),
            ("classifier_high", self.classifier_high),
            ("classifier_low", self.classifier_low),
        ] {
            check_prob(name, p)?;
        }
        let rows = self
            .state_confusion
            .iter()
            .map(|r| r.as_slice())
            .chain(self.env_confusion.iter().map(|r| r.as_slice()));
        for (i, row) in rows.enumerate() {
            for &p in row {
                check_prob("confusion entry", p)?;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("confusion row {i} sums to {sum}")));
            }
        }
        if !(self.gps_noise_scale >= 0.0
            && self.outlier_near_m >= 0.0
            && self.concentration > 0.0
            && self.confusion_dwell_s > 0.0)
        {
            return Err(Error::Config("noise, distance and concentration must be positive".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Non-overlapping integer-meter buildings separated by corridors.
pub fn generate_world(config: &SimConfig) -> Result<BuildingMap> {
    config.validate()?;
    let mut rng = config.rng(0);
    let (w, h) = (config.width_cells, config.height_cells);
    let m = config.edge_margin_m;
    let gap = config.corridor_m as f64;
    let mut boxes: Vec<BuildingBox> = Vec::new();
    for index in 0..config.building_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.gen_range(config.building_size_m[0]..=config.building_size_m[1]);
            let bh = rng.gen_range(config.building_size_m[0]..=config.building_size_m[1]);
            if bw + 2 * m > w || bh + 2 * m > h {
                continue;
            }
            let x0 = rng.gen_range(m..=w - m - bw) as f64;
            let y0 = rng.gen_range(m..=h - m - bh) as f64;
            let b = BuildingBox {
                min_x_m: x0,
                min_y_m: y0,
                max_x_m: x0 + bw as f64,
                max_y_m: y0 + bh as f64,
            };
            let padded = BuildingBox {
                min_x_m: b.min_x_m - gap,
                min_y_m: b.min_y_m - gap,
                max_x_m: b.max_x_m + gap,
                max_y_m: b.max_y_m + gap,
            };
            if boxes.iter().all(|o| !padded.intersects(o)) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                index,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    BuildingMap::new(w, h, boxes)
}

/// One step of an activity script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScriptItem {
    /// Move outdoors toward random waypoints, or along a fixed heading.
    Outdoor {
        state: MotionState,
        secs: f64,
        #[serde(default)]
        heading: Option<u8>,
        #[serde(default)]
        speed_bin: Option<u8>,
    },
    /// Walk to a building, enter through its edge, run the indoor segments,
    /// walk back out.
    Visit {
        building: usize,
        indoor: Vec<(MotionState, f64)>,
    },
    /// Walk to the ring road, get in, drive around it, get out.
    Drive { secs: f64 },
}

pub fn validate_script(script: &[ScriptItem], world: &BuildingMap) -> Result<()> {
    for (i, item) in script.iter().enumerate() {
        let bad = |msg: String| Err(Error::InvalidScript(format!("item {i}: {msg}")));
        match item {
            ScriptItem::Outdoor {
                state,
                secs,
                heading,
                speed_bin,
            } => {
                if !is_admissible(*state, Environment::Outdoors) {
                    return bad(format!("{state:?} is not possible outdoors"));
                }
                if heading.is_some_and(|h| h as usize >= NUM_HEADINGS)
                    || speed_bin.is_some_and(|s| s as usize >= NUM_SPEEDS)
                {
                    return bad("heading or speed bin out of range".into());
                }
                if speed_bin.is_some_and(|s| s > 0) && *state == MotionState::Stationary {
                    return bad("stationary with a non-zero speed".into());
                }
                if !(*secs > 0.0) {
                    return bad("duration must be positive".into());
                }
            }
            ScriptItem::Visit { building, indoor } => {
                if *building >= world.buildings().len() {
                    return bad(format!("no building {building}"));
                }
                if indoor.is_empty() {
                    return bad("visit without indoor segments".into());
                }
                for (s, secs) in indoor {
                    if !is_admissible(*s, Environment::Indoors) {
                        return bad(format!("{s:?} is not possible indoors"));
                    }
                    if !(*secs > 0.0) {
                        return bad("duration must be positive".into());
                    }
                }
            }
            ScriptItem::Drive { secs } => {
                if !(*secs > 0.0) {
                    return bad("duration must be positive".into());
                }
            }
        }
    }
    Ok(())
}

/// A flight or two of stairs.
const STAIR_SECS: [f64; 2] = [10.0, 30.0];

/// Alternating outdoor segments and building visits with one drive early on.
pub fn default_script(
    config: &SimConfig,
    world: &BuildingMap,
    rng: &mut impl Rng,
    total_secs: f64,
) -> Vec<ScriptItem> {
    let dur = |rng: &mut dyn rand::RngCore| rng.gen_range(config.segment_secs[0]..=config.segment_secs[1]);
    let mut items = Vec::new();
    let mut planned = 0.0;
    let drive_at = rng.gen_range(0..3usize);
    let nb = world.buildings().len();
    let mut i = 0;
    while planned < total_secs {
        if config.drive && i == drive_at {
            let secs = dur(rng);
            planned += secs;
            items.push(ScriptItem::Drive { secs });
        }
        let state = *[
            MotionState::Walking,
            MotionState::Walking,
            MotionState::Running,
            MotionState::Stationary,
        ]
        .choose(rng)
        .unwrap();
        let secs = dur(rng);
        planned += secs;
        items.push(ScriptItem::Outdoor {
            state,
            secs,
            heading: None,
            speed_bin: None,
        });
        if nb > 0 {
            let mut indoor = Vec::new();
            if rng.gen_bool(0.5) {
                indoor.push((MotionState::UpDownStairs, rng.gen_range(STAIR_SECS[0]..=STAIR_SECS[1])));
            }
            let s = *[MotionState::Stationary, MotionState::Walking].choose(rng).unwrap();
            indoor.push((s, dur(rng)));
            planned += indoor.iter().map(|x| x.1).sum::<f64>();
            items.push(ScriptItem::Visit {
                building: rng.gen_range(0..nb),
                indoor,
            });
        }
        i += 1;
    }
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub truth: Vec<JointState>,
    pub spans: Vec<LabelSpan>,
    pub frames: Vec<Frame>,
    /// Frames whose fix carries an injected outlier offset.
    pub outlier: Vec<bool>,
    /// Frames whose true cell is within the near-building distance.
    pub near_building: Vec<bool>,
}

impl SimTrace {
    pub fn labels(&self) -> Vec<(MotionState, Environment)> {
        self.truth.iter().map(|s| (s.state, s.env)).collect()
    }
}

/// BFS step counts to a goal set over free cells, 8-connected without
/// cutting building corners.
struct DistanceField {
    width: u32,
    dist: Vec<u32>,
}

impl DistanceField {
    fn new(world: &BuildingMap, goals: &[GridLocation]) -> Self {
        let (w, h) = (world.width(), world.height());
        let free = |x: i64, y: i64| world.in_bounds(x, y) && !world.is_inside(GridLocation::new(x as u32, y as u32));
        let mut dist = vec![u32::MAX; (w * h) as usize];
        let mut queue = VecDeque::new();
        for g in goals {
            let i = (g.y * w + g.x) as usize;
            if dist[i] == u32::MAX {
                dist[i] = 0;
                queue.push_back(*g);
            }
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[(c.y * w + c.x) as usize];
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (c.x as i64 + dx, c.y as i64 + dy);
                if !free(nx, ny) || (dx != 0 && dy != 0 && !(free(c.x as i64 + dx, c.y as i64) && free(c.x as i64, c.y as i64 + dy))) {
                    continue;
                }
                let i = (ny as u32 * w + nx as u32) as usize;
                if dist[i] == u32::MAX {
                    dist[i] = d + 1;
                    queue.push_back(GridLocation::new(nx as u32, ny as u32));
                }
            }
        }
        DistanceField { width: w, dist }
    }

    fn get(&self, l: GridLocation) -> u32 {
        self.dist[(l.y * self.width + l.x) as usize]
    }

    /// Follow the field downhill a few cells.
    fn lookahead(&self, mut l: GridLocation, steps: usize) -> GridLocation {
        for _ in 0..steps {
            let mut best = (self.get(l), l);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (l.x as i64 + dx, l.y as i64 + dy);
                if nx < 0 || ny < 0 || (nx as u32) >= self.width || (ny as usize) >= self.dist.len() / self.width as usize {
                    continue;
                }
                let n = GridLocation::new(nx as u32, ny as u32);
                if self.get(n) < best.0 {
                    best = (self.get(n), n);
                }
            }
            if best.1 == l {
                break;
            }
            l = best.1;
        }
        l
    }
}

const NEIGHBORS: [(i64, i64); 8] = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)];

fn heading_toward(from: GridLocation, to: (f64, f64)) -> Option<u8> {
    let (fx, fy) = from.center();
    let (dx, dy) = (to.0 - fx, to.1 - fy);
    if dx == 0.0 && dy == 0.0 {
        return None;
    }
    let sector = (dy.atan2(dx) / std::f64::consts::FRAC_PI_4).round() as i64;
    Some(sector.rem_euclid(NUM_HEADINGS as i64) as u8)
}

/// Agent state while running a script.
struct Agent<'w, R: Rng> {
    world: &'w BuildingMap,
    rng: R,
    loc: GridLocation,
    heading: u8,
    speed_bin: u8,
    out: Vec<JointState>,
    limit: usize,
}

impl<R: Rng> Agent<'_, R> {
    fn done(&self) -> bool {
        self.out.len() >= self.limit
    }

    /// Record one frame with velocity (speed, heading) and move. Cells inside
    /// buildings other than `enter` are avoided by choosing among the
    /// kernel's support; if none is allowed the agent stops for a frame.
    fn emit(&mut self, state: MotionState, env: Environment, speed: u8, heading: u8, enter: Option<usize>) {
        let mut v = PolarVelocity {
            speed_bin: speed,
            heading_bin: heading,
        };
        let allowed = |l: GridLocation| {
            !self.world.is_inside(l)
                || enter.is_some_and(|b| {
                    let (x, y) = l.center();
                    self.world.buildings()[b].contains(x, y)
                })
                || self.world.is_inside(self.loc) && l == self.loc
        };
        let mut next = self.loc;
        if speed > 0 {
            let support = location_transition_support(self.loc, v, self.world);
            let cells: Vec<(GridLocation, f64)> = support
                .as_slice()
                .iter()
                .copied()
                .filter(|&(l, _)| allowed(l))
                .collect();
            let total: f64 = cells.iter().map(|c| c.1).sum();
            if cells.is_empty() || total <= 0.0 {
                v.speed_bin = 0;
            } else {
                let mut u = self.rng.gen::<f64>() * total;
                next = cells.last().unwrap().0;
                for (l, w) in &cells {
                    if u < *w {
                        next = *l;
                        break;
                    }
                    u -= w;
                }
            }
        }
        self.out.push(JointState {
            location: self.loc,
            velocity: v,
            state,
            env,
        });
        self.heading = heading;
        self.loc = next;
    }

    fn pick_speed(&mut self, state: MotionState) -> u8 {
        let choices: &[u8] = match state {
            MotionState::Stationary => &[0],
            MotionState::Walking => &[2, 3, 3, 3, 4],
            MotionState::Running => &[4, 5, 5],
            MotionState::DrivingVehicle => &[6, 6, 7],
            MotionState::UpDownStairs => &[1, 2],
        };
        if !choices.contains(&self.speed_bin) || self.rng.gen::<f64>() < 0.05 {
            self.speed_bin = *choices.choose(&mut self.rng).unwrap();
        }
        self.speed_bin
    }

    fn random_free_cell(&mut self, min_dist: f64) -> GridLocation {
        let (w, h) = (self.world.width(), self.world.height());
        let (cx, cy) = self.loc.center();
        for _ in 0..1000 {
            let l = GridLocation::new(self.rng.gen_range(1..w - 1), self.rng.gen_range(1..h - 1));
            let (x, y) = l.center();
            if !self.world.is_inside(l) && (x - cx).hypot(y - cy) >= min_dist {
                return l;
            }
        }
        GridLocation::new(0, 0)
    }

    /// Walk along a distance field until `arrived` or the frame budget ends.
    fn travel(
        &mut self,
        field: &DistanceField,
        state: MotionState,
        env: Environment,
        enter: Option<usize>,
        max_frames: Option<usize>,
        arrived: impl Fn(&Self) -> bool,
    ) -> bool {
        let start = self.out.len();
        let mut stalled = 0;
        while !self.done() {
            if arrived(self) {
                return true;
            }
            if max_frames.is_some_and(|m| self.out.len() - start >= m) {
                return false;
            }
            let here = self.loc;
            let target = if self.world.is_inside(here) || field.get(here) == u32::MAX {
                None
            } else {
                // a stalled agent steps to the adjacent path cell, which the
                // kernel can always reach
                Some(field.lookahead(here, if stalled >= 8 { 1 } else { LOOKAHEAD }))
            };
            let heading = target
                .and_then(|t| heading_toward(here, t.center()))
                .unwrap_or(self.heading);
            let speed = self.pick_speed(state);
            self.emit(state, env, speed, heading, enter);
            stalled = if self.loc == here { stalled + 1 } else { 0 };
        }
        false
    }

    fn stay(&mut self, state: MotionState, env: Environment, frames: usize) {
        for _ in 0..frames {
            if self.done() {
                return;
            }
            let speed = match (env, state) {
                (Environment::Indoors, _) | (_, MotionState::Stationary) => 0,
                _ => self.pick_speed(state),
            };
            let h = self.heading;
            // indoor positions stay at the entry cell
            if env == Environment::Indoors {
                self.emit(state, env, 0, h, None);
            } else {
                self.emit(state, env, speed, h, None);
            }
        }
    }
}

fn frames_for(secs: f64) -> usize {
    ((secs / FRAME_DT).round() as usize).max(1)
}

fn run_script<R: Rng>(agent: &mut Agent<'_, R>, script: &[ScriptItem]) {
    let world = agent.world;
    let (w, h) = (world.width(), world.height());
    for item in script {
        if agent.done() {
            return;
        }
        match item {
            ScriptItem::Outdoor {
                state,
                secs,
                heading: Some(hd),
                speed_bin,
            } => {
                let n = frames_for(*secs);
                for _ in 0..n {
                    if agent.done() {
                        break;
                    }
                    let sp = speed_bin.unwrap_or_else(|| agent.pick_speed(*state));
                    agent.emit(*state, Environment::Outdoors, sp, *hd, None);
                }
            }
            ScriptItem::Outdoor {
                state, secs, ..
            } => {
                let n = frames_for(*secs);
                if *state == MotionState::Stationary || *state == MotionState::UpDownStairs {
                    agent.stay(*state, Environment::Outdoors, n);
                    continue;
                }
                let end = agent.out.len() + n;
                while !agent.done() && agent.out.len() < end {
                    let goal = agent.random_free_cell(15.0);
                    let field = DistanceField::new(world, &[goal]);
                    let budget = end - agent.out.len();
                    agent.travel(&field, *state, Environment::Outdoors, None, Some(budget), |a| {
                        field.get(a.loc) <= 1
                    });
                }
            }
            ScriptItem::Visit { building, indoor } => {
                let b = world.buildings()[*building];
                // outside cells touching the building are the doors
                let mut doors = Vec::new();
                let inside_b = |l: GridLocation| {
                    let (x, y) = l.center();
                    b.contains(x, y)
                };
                for x in 0..w {
                    for y in 0..h {
                        let l = GridLocation::new(x, y);
                        if world.is_inside(l) {
                            continue;
                        }
                        let touches = NEIGHBORS[..4].iter().any(|(dx, dy)| {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            world.in_bounds(nx, ny) && inside_b(GridLocation::new(nx as u32, ny as u32))
                        });
                        if touches {
                            doors.push(l);
                        }
                    }
                }
                if doors.is_empty() {
                    continue;
                }
                let field = DistanceField::new(world, &doors);
                if !agent.travel(&field, MotionState::Walking, Environment::Outdoors, None, None, |a| {
                    field.get(a.loc) == 0
                }) {
                    return;
                }
                // step in through the nearest edge
                let door = agent.loc;
                let entry_heading = NEIGHBORS[..4]
                    .iter()
                    .find(|(dx, dy)| {
                        let (nx, ny) = (door.x as i64 + dx, door.y as i64 + dy);
                        world.in_bounds(nx, ny) && inside_b(GridLocation::new(nx as u32, ny as u32))
                    })
                    .map(|&(dx, dy)| heading_toward(door, ((door.x as i64 + dx) as f64 + 0.5, (door.y as i64 + dy) as f64 + 0.5)).unwrap())
                    .unwrap();
                while !agent.done() && !inside_b(agent.loc) {
                    agent.emit(MotionState::Walking, Environment::Outdoors, 2, entry_heading, Some(*building));
                }
                for (s, secs) in indoor {
                    agent.stay(*s, Environment::Indoors, frames_for(*secs));
                }
                let exit_heading = (entry_heading + 4) % NUM_HEADINGS as u8;
                while !agent.done() && world.is_inside(agent.loc) {
                    agent.emit(MotionState::Walking, Environment::Outdoors, 2, exit_heading, Some(*building));
                }
            }
            ScriptItem::Drive { secs } => {
                let inset = 3u32.min(w / 2 - 1).min(h / 2 - 1);
                let corners = [
                    GridLocation::new(inset, inset),
                    GridLocation::new(w - 1 - inset, inset),
                    GridLocation::new(w - 1 - inset, h - 1 - inset),
                    GridLocation::new(inset, h - 1 - inset),
                ];
                let road: Vec<GridLocation> = (0..w)
                    .flat_map(|x| (0..h).map(move |y| GridLocation::new(x, y)))
                    .filter(|l| {
                        let on_x = l.x == inset || l.x == w - 1 - inset;
                        let on_y = l.y == inset || l.y == h - 1 - inset;
                        let within = (inset..=w - 1 - inset).contains(&l.x) && (inset..=h - 1 - inset).contains(&l.y);
                        within && (on_x || on_y) && !world.is_inside(*l)
                    })
                    .collect();
                let field = DistanceField::new(world, &road);
                if !agent.travel(&field, MotionState::Walking, Environment::Outdoors, None, None, |a| {
                    field.get(a.loc) == 0
                }) {
                    return;
                }
                agent.stay(MotionState::Stationary, Environment::Vehicle, 20);
                // drive counter-clockwise toward successive corners
                let mut corner = (0..4)
                    .min_by_key(|&i| {
                        let c = corners[i];
                        (c.x as i64 - agent.loc.x as i64).abs() + (c.y as i64 - agent.loc.y as i64).abs()
                    })
                    .unwrap();
                for _ in 0..frames_for(*secs) {
                    if agent.done() {
                        break;
                    }
                    let (cx, cy) = corners[corner].center();
                    let (ax, ay) = agent.loc.center();
                    if (cx - ax).hypot(cy - ay) < 3.0 {
                        corner = (corner + 1) % 4;
                    }
                    let hd = heading_toward(agent.loc, corners[corner].center()).unwrap_or(agent.heading);
                    let sp = agent.pick_speed(MotionState::DrivingVehicle);
                    agent.emit(MotionState::DrivingVehicle, Environment::Vehicle, sp, hd, None);
                }
                agent.stay(MotionState::Stationary, Environment::Vehicle, 20);
            }
        }
    }
}

/// Trace from the default script, seeded by `config.seed` and `stream`.
pub fn generate_trace(world: &BuildingMap, config: &SimConfig, length: usize) -> Result<SimTrace> {
    generate_trace_stream(world, config, length, 1)
}

pub fn generate_trace_stream(
    world: &BuildingMap,
    config: &SimConfig,
    length: usize,
    stream: u64,
) -> Result<SimTrace> {
    config.validate()?;
    let mut rng = config.rng(stream.wrapping_mul(2));
    let script = default_script(config, world, &mut rng, length as f64 * FRAME_DT * 1.5);
    simulate(world, config, &script, length, None, stream)
}

/// Run an explicit script. The script repeats its last activity in place if
/// it ends before `length` frames.
pub fn simulate(
    world: &BuildingMap,
    config: &SimConfig,
    script: &[ScriptItem],
    length: usize,
    start: Option<(GridLocation, u8)>,
    stream: u64,
) -> Result<SimTrace> {
    config.validate()?;
    if length == 0 {
        return Err(Error::invalid("trace length must be at least 1"));
    }
    validate_script(script, world)?;
    let mut rng = config.rng(stream.wrapping_mul(2).wrapping_add(1));
    let (loc, heading) = match start {
        Some(s) => s,
        None => {
            let mut probe = Agent {
                world,
                rng: &mut rng,
                loc: GridLocation::new(0, 0),
                heading: 0,
                speed_bin: 0,
                out: Vec::new(),
                limit: 0,
            };
            let l = probe.random_free_cell(0.0);
            (l, rng.gen_range(0..NUM_HEADINGS as u8))
        }
    };
    if world.is_inside(loc) || loc.x >= world.width() || loc.y >= world.height() {
        return Err(Error::InvalidScript("start cell must be outdoors and in bounds".into()));
    }
    let mut agent = Agent {
        world,
        rng: &mut rng,
        loc,
        heading,
        speed_bin: 0,
        out: Vec::with_capacity(length),
        limit: length,
    };
    run_script(&mut agent, script);
    while !agent.done() {
        let (state, env) = match agent.out.last() {
            Some(l) if l.env == Environment::Indoors => (l.state, l.env),
            Some(l) => (MotionState::Stationary, l.env),
            None => (MotionState::Stationary, Environment::Outdoors),
        };
        agent.stay(state, env, 1);
    }
    let truth = agent.out;
    observe(world, config, truth, &mut rng)
}

fn draw_class<const N: usize>(row: &[f64; N], rng: &mut impl Rng) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, &p) in row.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn observe(
    world: &BuildingMap,
    config: &SimConfig,
    truth: Vec<JointState>,
    rng: &mut impl Rng,
) -> Result<SimTrace> {
    let redraw = FRAME_DT / config.confusion_dwell_s;
    let beta = |t: f64| {
        let t = t.clamp(1e-3, 1.0 - 1e-3);
        Beta::new(config.concentration * t, config.concentration * (1.0 - t))
            .map_err(|e| Error::Config(e.to_string()))
    };
    let high = beta(config.classifier_high)?;
    let low = beta(config.classifier_low)?;
    let mut frames = Vec::with_capacity(truth.len());
    let mut outlier = Vec::with_capacity(truth.len());
    let mut near = Vec::with_capacity(truth.len());
    let mut seen_state = usize::MAX;
    let mut seen_env = usize::MAX;
    for (k, js) in truth.iter().enumerate() {
        let (s, e) = (js.state.index(), js.env.index());
        if k == 0 || truth[k - 1].state != js.state || rng.gen::<f64>() < redraw {
            seen_state = draw_class(&config.state_confusion[s], rng);
        }
        if k == 0 || truth[k - 1].env != js.env || rng.gen::<f64>() < redraw {
            seen_env = draw_class(&config.env_confusion[e], rng);
        }
        let mut bin = |on: bool| -> Result<u8> {
            let p = if on { high.sample(rng) } else { low.sample(rng) };
            quantize(p, NUM_BINS)
        };
        let mut state_bins = [0u8; NS];
        for (i, b) in state_bins.iter_mut().enumerate() {
            *b = bin(i == seen_state)?;
        }
        let mut env_bins = [0u8; NE];
        for (i, b) in env_bins.iter_mut().enumerate() {
            *b = bin(i == seen_env)?;
        }

        let (cx, cy) = js.location.center();
        let is_near = world.distance_to_nearest(cx, cy) <= config.outlier_near_m;
        near.push(is_near);
        let mut gps = None;
        let mut is_outlier = false;
        let dropped = js.env == Environment::Indoors && rng.gen::<f64>() < config.indoor_dropout;
        if k % config.gps_every == 0 && !dropped {
            let hdop = rng.gen_range(config.hdop_range[0]..=config.hdop_range[1]);
            let sd = (2.0 * hdop).sqrt() * config.gps_noise_scale;
            let (mut x, mut y) = (cx, cy);
            if sd > 0.0 {
                let n = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
                x += n.sample(rng);
                y += n.sample(rng);
            }
            let rate = if is_near {
                config.outlier_near_rate
            } else {
                config.outlier_base_rate
            };
            if rng.gen::<f64>() < rate {
                is_outlier = true;
                let r = rng.gen_range(config.outlier_offset_m[0]..=config.outlier_offset_m[1]);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                x += r * a.cos();
                y += r * a.sin();
            }
            gps = Some(GpsFix {
                x_m: x.clamp(0.0, world.width() as f64),
                y_m: y.clamp(0.0, world.height() as f64),
                hdop,
            });
        }
        outlier.push(is_outlier);
        frames.push(Frame {
            index: k,
            msb: MsbObservation::new(state_bins, env_bins)?,
            gps,
        });
    }
    let labels: Vec<(MotionState, Environment)> = truth.iter().map(|s| (s.state, s.env)).collect();
    Ok(SimTrace {
        spans: spans_from_sequence(&labels),
        truth,
        frames,
        outlier,
        near_building: near,
    })
}

/// A world and `count` traces, trace `i` on its own random stream.
pub fn generate_dataset(config: &SimConfig, count: usize, length: usize) -> Result<(BuildingMap, Vec<SimTrace>)> {
    use rayon::prelude::*;
    let world = generate_world(config)?;
    let traces = (0..count)
        .into_par_iter()
        .map(|i| generate_trace_stream(&world, config, length, 1 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok((world, traces))
}

/// Header of the trace CSV.
pub const TRACE_HEADER: [&str; 10] = ["kind", "t", "v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8"];

/// `msb` rows carry the eight bins; `gps` rows carry x, y, hdop.
pub fn write_trace_csv<W: Write>(frames: &[Frame], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for f in frames {
        let t = format!("{:.2}", f.index as f64 * FRAME_DT);
        let mut rec = vec!["msb".to_string(), t.clone()];
        rec.extend(f.msb.state_bins.iter().chain(&f.msb.env_bins).map(|b| b.to_string()));
        w.write_record(&rec)?;
        if let Some(g) = &f.gps {
            w.write_record(["gps".to_string(), t, format!("{:.3}", g.x_m), format!("{:.3}", g.y_m), format!("{:.3}", g.hdop)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn truth_to_json(truth: &[JointState]) -> String {
    serde_json::to_string(truth).expect("states serialize")
}

pub fn truth_from_json(s: &str) -> Result<Vec<JointState>> {
    let v: Vec<JointState> = serde_json::from_str(s)?;
    for (k, js) in v.iter().enumerate() {
        if !is_admissible(js.state, js.env) {
            return Err(Error::Validation {
                table: "truth".into(),
                row: k.to_string(),
                message: format!("forbidden pair {:?}/{:?}", js.state, js.env),
            });
        }
    }
    Ok(v)
}
