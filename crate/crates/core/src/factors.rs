//! Log-domain evaluation of every factor of the network.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::map::{BuildingMap, MapClass};
use crate::params::ModelParams;
use crate::types::*;

/// Which factors take part in scoring. Ablations differ only here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FactorMask {
    pub msb_state: bool,
    pub msb_env: bool,
    pub gps: bool,
    pub map: bool,
    /// Track location and velocity. When false the lattice holds a single
    /// fixed cell and zero velocity and only (state, env) evolves.
    pub motion: bool,
}

impl FactorMask {
    pub const FULL: FactorMask = FactorMask {
        msb_state: true,
        msb_env: true,
        gps: true,
        map: true,
        motion: true,
    };

    pub const NO_MAP: FactorMask = FactorMask {
        map: false,
        ..Self::FULL
    };

    /// Sensor board only. Without GPS or map the motion chain sums out to one,
    /// so collapsing it leaves the (state, env) marginal unchanged.
    pub const MSB_ONLY: FactorMask = FactorMask {
        msb_state: true,
        msb_env: true,
        gps: false,
        map: false,
        motion: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.motion && (self.gps || self.map) {
            return Err(Error::invalid(
                "GPS and map factors need the motion (location) chain",
            ));
        }
        Ok(())
    }

    /// Number of enabled factors, for ablation bookkeeping.
    pub fn count(&self) -> usize {
        [self.msb_state, self.msb_env, self.gps, self.map, self.motion]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

/// Location the collapsed lattice pins every state to.
pub const COLLAPSED_LOCATION: GridLocation = GridLocation { x: 0, y: 0 };

/// Up to four successor cells with bilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    cells: [(GridLocation, f64); 4],
    len: usize,
}

impl Support {
    fn new() -> Self {
        Support {
            cells: [(GridLocation::new(0, 0), 0.0); 4],
            len: 0,
        }
    }

    pub(crate) fn single(l: GridLocation) -> Self {
        let mut s = Support::new();
        s.cells[0] = (l, 1.0);
        s.len = 1;
        s
    }

    pub fn as_slice(&self) -> &[(GridLocation, f64)] {
        &self.cells[..self.len]
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weight_of(&self, l: GridLocation) -> f64 {
        self.as_slice()
            .iter()
            .find(|(c, _)| *c == l)
            .map_or(0.0, |(_, w)| *w)
    }
}

/// Displacement over one frame for a velocity.
pub fn displacement(v: PolarVelocity) -> (f64, f64) {
    let s = v.speed() * FRAME_DT;
    let (cx, cy) = v.direction();
    (s * cx, s * cy)
}

/// Distribution over next cells: the continuous endpoint is spread over the
/// bracketing cell centers by bilinear weights; mass falling outside the
/// world is dropped and the rest renormalized.
pub fn location_transition_support(
    l: GridLocation,
    v: PolarVelocity,
    map: &BuildingMap,
) -> Support {
    let (dx, dy) = displacement(v);
    support_from_displacement(l, dx, dy, map.width(), map.height())
}

pub(crate) fn support_from_displacement(
    l: GridLocation,
    dx: f64,
    dy: f64,
    width: u32,
    height: u32,
) -> Support {
    let mut out = Support::new();
    // offsets relative to the grid of cell centers
    let ux = l.x as f64 + dx;
    let uy = l.y as f64 + dy;
    let ix = ux.floor();
    let iy = uy.floor();
    let tx = ux - ix;
    let ty = uy - iy;
    let ix = ix as i64;
    let iy = iy as i64;
    let mut total = 0.0;
    for (ox, wx) in [(0i64, 1.0 - tx), (1, tx)] {
        for (oy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
            let w = wx * wy;
            let (cx, cy) = (ix + ox, iy + oy);
            if w > 0.0 && cx >= 0 && cy >= 0 && cx < width as i64 && cy < height as i64 {
                out.cells[out.len] = (GridLocation::new(cx as u32, cy as u32), w);
                out.len += 1;
                total += w;
            }
        }
    }
    if total > 0.0 && total != 1.0 {
        for c in &mut out.cells[..out.len] {
            c.1 /= total;
        }
    }
    out
}

/// Unweighted, ungated log N2(fix; center(l), 2*hdop*I) scaled by `exponent`.
pub fn gps_log_score(fix: &GpsFix, location: GridLocation, exponent: f64) -> f64 {
    let var = 2.0 * fix.hdop;
    let (cx, cy) = location.center();
    let d2 = (fix.x_m - cx).powi(2) + (fix.y_m - cy).powi(2);
    exponent * (-(2.0 * PI * var).ln() - d2 / (2.0 * var))
}

/// GPS factor with both switching parents: 0 when there is no fix (I_k = 0)
/// or the fix is an hdop outlier (o_k = 0).
pub fn gps_log_likelihood(frame: &Frame, location: GridLocation, params: &ModelParams) -> Result<f64> {
    let Some(fix) = &frame.gps else {
        return Ok(0.0);
    };
    if !(fix.hdop > 0.0) {
        return Err(Error::invalid(format!("hdop {} must be positive", fix.hdop)));
    }
    if !fix.is_inlier() {
        return Ok(0.0);
    }
    Ok(gps_log_score(fix, location, params.gps_exponent))
}

/// Naive-Bayes sensor board likelihood.
pub fn msb_log_likelihood(
    obs: &MsbObservation,
    s: MotionState,
    e: Environment,
    params: &ModelParams,
) -> f64 {
    let mut total = 0.0;
    for (i, &b) in obs.state_bins.iter().enumerate() {
        total += params.obs_state[i][s.index()][b as usize - 1].ln();
    }
    for (i, &b) in obs.env_bins.iter().enumerate() {
        total += params.obs_env[i][e.index()][b as usize - 1].ln();
    }
    total
}

fn map_cpt_value(params: &ModelParams, e: Environment, class: MapClass) -> f64 {
    let m = &params.map_cpt;
    match (e, class) {
        (Environment::Indoors, MapClass::InsideBuilding) => m.inside_inside,
        (Environment::Indoors, MapClass::OutsideBuilding) => m.inside_outside,
        (_, MapClass::InsideBuilding) => m.outside_inside,
        (_, MapClass::OutsideBuilding) => m.outside_outside,
    }
}

pub fn map_constraint_log(
    e: Environment,
    location: GridLocation,
    map: &BuildingMap,
    params: &ModelParams,
) -> Result<f64> {
    Ok(map_cpt_value(params, e, map.map_class(location)?).ln())
}

/// A parameter set bound to a map and a factor selection.
#[derive(Debug, Clone)]
pub struct Model<'a> {
    pub params: &'a ModelParams,
    pub map: &'a BuildingMap,
    pub factors: FactorMask,
    pub(crate) tables: Tables,
}

/// Linear and log tables derived once from the parameters.
#[derive(Debug, Clone)]
pub(crate) struct Tables {
    /// p(e'|e) p(s'|s,e') indexed [se][se'].
    pub se_trans: [[f64; NUM_SE]; NUM_SE],
    /// p(offset | s') indexed [se'][offset index].
    pub heading: [[f64; NUM_HEADINGS]; NUM_SE],
    /// p(speed' | speed, group(s')) indexed [se'][speed][speed'].
    pub speed: [[[f64; NUM_SPEEDS]; NUM_SPEEDS]; NUM_SE],
    pub init_se: [f64; NUM_SE],
    pub init_speed: [f64; NUM_SPEEDS],
    pub init_heading: [f64; NUM_HEADINGS],
    pub log_obs_state: [[[f64; NUM_BINS]; MotionState::COUNT]; MotionState::COUNT],
    pub log_obs_env: [[[f64; NUM_BINS]; Environment::COUNT]; Environment::COUNT],
    /// log p(c=1 | e, class) indexed [se][inside as usize].
    pub log_map: [[f64; 2]; NUM_SE],
    pub disp: [[(f64, f64); NUM_HEADINGS]; NUM_SPEEDS],
}

impl<'a> Model<'a> {
    pub fn new(params: &'a ModelParams, map: &'a BuildingMap, factors: FactorMask) -> Result<Self> {
        factors.validate()?;
        let mut t = Tables {
            se_trans: [[0.0; NUM_SE]; NUM_SE],
            heading: [[0.0; NUM_HEADINGS]; NUM_SE],
            speed: [[[0.0; NUM_SPEEDS]; NUM_SPEEDS]; NUM_SE],
            init_se: [0.0; NUM_SE],
            init_speed: params.init_speed,
            init_heading: params.init_heading,
            log_obs_state: params.obs_state.map(|a| a.map(|r| r.map(f64::ln))),
            log_obs_env: params.obs_env.map(|a| a.map(|r| r.map(f64::ln))),
            log_map: [[0.0; 2]; NUM_SE],
            disp: [[(0.0, 0.0); NUM_HEADINGS]; NUM_SPEEDS],
        };
        for a in SePair::all() {
            let (s, e) = (a.state(), a.env());
            for b in SePair::all() {
                let (s2, e2) = (b.state(), b.env());
                t.se_trans[a.index()][b.index()] = params.env_trans[e.index()][e2.index()]
                    * params.state_trans[s.index()][e2.index()][s2.index()];
            }
            t.heading[a.index()] = params.heading_trans[s.index()];
            t.speed[a.index()] = params.speed_trans[s.speed_group()];
            t.init_se[a.index()] = params.init_env[e.index()] * params.init_state[e.index()][s.index()];
            t.log_map[a.index()] = [
                map_cpt_value(params, e, MapClass::OutsideBuilding).ln(),
                map_cpt_value(params, e, MapClass::InsideBuilding).ln(),
            ];
        }
        for sp in 0..NUM_SPEEDS {
            for h in 0..NUM_HEADINGS {
                t.disp[sp][h] = displacement(PolarVelocity {
                    speed_bin: sp as u8,
                    heading_bin: h as u8,
                });
            }
        }
        Ok(Model {
            params,
            map,
            factors,
            tables: t,
        })
    }

    pub(crate) fn support(&self, l: GridLocation, sp: usize, h: usize) -> Support {
        let (dx, dy) = self.tables.disp[sp][h];
        support_from_displacement(l, dx, dy, self.map.width(), self.map.height())
    }

    /// Sensor board term for every pair, respecting the mask.
    pub(crate) fn msb_scores(&self, obs: &MsbObservation) -> [f64; NUM_SE] {
        let t = &self.tables;
        let mut state_part = [0.0; MotionState::COUNT];
        if self.factors.msb_state {
            for (s, out) in state_part.iter_mut().enumerate() {
                *out = obs
                    .state_bins
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| t.log_obs_state[i][s][b as usize - 1])
                    .sum();
            }
        }
        let mut env_part = [0.0; Environment::COUNT];
        if self.factors.msb_env {
            for (e, out) in env_part.iter_mut().enumerate() {
                *out = obs
                    .env_bins
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| t.log_obs_env[i][e][b as usize - 1])
                    .sum();
            }
        }
        let mut out = [0.0; NUM_SE];
        for a in SePair::all() {
            out[a.index()] = state_part[a.state().index()] + env_part[a.env().index()];
        }
        out
    }

    pub(crate) fn gps_score(&self, frame: &Frame, l: GridLocation) -> f64 {
        if !self.factors.gps {
            return 0.0;
        }
        match frame.usable_gps() {
            Some(fix) => gps_log_score(fix, l, self.params.gps_exponent),
            None => 0.0,
        }
    }

    pub(crate) fn map_score(&self, se: SePair, l: GridLocation) -> f64 {
        if !self.factors.map {
            return 0.0;
        }
        self.tables.log_map[se.index()][self.map.is_inside(l) as usize]
    }

    /// All observation factors of a frame for one state (no virtual evidence).
    pub fn observation_log(&self, frame: &Frame, state: &JointState) -> f64 {
        let se = state.se();
        self.msb_scores(&frame.msb)[se.index()]
            + self.gps_score(frame, state.location)
            + self.map_score(se, state.location)
    }

    /// Full transition log-score between two joint states.
    pub fn transition_log(&self, prev: &JointState, next: &JointState) -> f64 {
        if !is_admissible(prev.state, prev.env) || !is_admissible(next.state, next.env) {
            return f64::NEG_INFINITY;
        }
        let p = self.params;
        let mut total = p.env_trans[prev.env.index()][next.env.index()].ln()
            + p.state_trans[prev.state.index()][next.env.index()][next.state.index()].ln();
        if !self.factors.motion {
            if [prev.location, next.location] != [COLLAPSED_LOCATION; 2]
                || [prev.velocity, next.velocity] != [PolarVelocity::ZERO; 2]
            {
                return f64::NEG_INFINITY;
            }
            return total;
        }
        let (ph, nh) = (
            prev.velocity.heading_bin as usize,
            next.velocity.heading_bin as usize,
        );
        total += p.heading_trans[next.state.index()][heading_offset_index(ph, nh)].ln();
        total += p.speed_trans[next.state.speed_group()][prev.velocity.speed_bin as usize]
            [next.velocity.speed_bin as usize]
            .ln();
        let support = location_transition_support(prev.location, prev.velocity, self.map);
        total + support.weight_of(next.location).ln()
    }

    /// Prior plus every frame-0 observation factor.
    pub fn initial_log(&self, state: &JointState, first_frame: &Frame) -> f64 {
        if !is_admissible(state.state, state.env) {
            return f64::NEG_INFINITY;
        }
        let p = self.params;
        let mut total = p.init_env[state.env.index()].ln()
            + p.init_state[state.env.index()][state.state.index()].ln();
        if self.factors.motion {
            total += -(self.map.num_cells() as f64).ln()
                + p.init_speed[state.velocity.speed_bin as usize].ln()
                + p.init_heading[state.velocity.heading_bin as usize].ln();
        } else if state.location != COLLAPSED_LOCATION || state.velocity != PolarVelocity::ZERO {
            return f64::NEG_INFINITY;
        }
        total + self.observation_log(first_frame, state)
    }

    /// Every state the lattice can hold, in key order. Only sensible for toy worlds.
    pub fn enumerate_states(&self) -> Vec<JointState> {
        let mut out = Vec::new();
        if !self.factors.motion {
            for se in SePair::all() {
                out.push(StateKey::pack(COLLAPSED_LOCATION, PolarVelocity::ZERO, se).unpack());
            }
            return out;
        }
        for x in 0..self.map.width() {
            for y in 0..self.map.height() {
                for sp in 0..NUM_SPEEDS {
                    for h in 0..NUM_HEADINGS {
                        for se in SePair::all() {
                            let v = PolarVelocity {
                                speed_bin: sp as u8,
                                heading_bin: h as u8,
                            };
                            out.push(StateKey::pack(GridLocation::new(x, y), v, se).unpack());
                        }
                    }
                }
            }
        }
        out
    }
}
