//! Every conditional probability table of the model, plus JSON persistence.
//!
//! Tables are stored row-major with the child variable last. The JSON field
//! names are the Rust field names below:
//!
//! | field           | shape          | meaning                                  |
//! |-----------------|----------------|------------------------------------------|
//! | `env_trans`     | `[3][3]`       | p(e_k \| e_{k-1})                        |
//! | `state_trans`   | `[5][3][5]`    | p(s_k \| s_{k-1}, e_k)                   |
//! | `heading_trans` | `[5][8]`       | p(heading offset \| s_k), offsets -4..=3 |
//! | `speed_trans`   | `[4][9][9]`    | p(speed_k \| speed_{k-1}, group(s_k))    |
//! | `obs_state`     | `[5][5][10]`   | p(bin of state classifier i \| s_k)      |
//! | `obs_env`       | `[3][3][10]`   | p(bin of env classifier i \| e_k)        |
//! | `init_env`      | `[3]`          | p(e_0)                                   |
//! | `init_state`    | `[3][5]`       | p(s_0 \| e_0)                            |
//! | `init_speed`    | `[9]`          | p(speed_0)                               |
//! | `init_heading`  | `[8]`          | p(heading_0)                             |
//! | `init_location` | `"uniform"`    | p(l_0)                                   |
//! | `map_cpt`       | object         | p(c = 1 \| env class, map class)         |
//! | `gps_exponent`  | scalar         | power applied to the GPS likelihood      |
//!
//! Entries of `state_trans` and `init_state` for forbidden (state, env)
//! pairs must be exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    is_admissible, Environment, MotionState, NUM_BINS, NUM_HEADINGS, NUM_SPEEDS, NUM_SPEED_GROUPS,
};

const NS: usize = MotionState::COUNT;
const NE: usize = Environment::COUNT;

/// Row-sum tolerance accepted when reading a params file.
pub const PARSE_ROW_TOLERANCE: f64 = 1e-6;

/// p(c = 1 | environment class, map class). Vehicle uses the outside row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapCpt {
    pub inside_inside: f64,
    pub inside_outside: f64,
    pub outside_inside: f64,
    pub outside_outside: f64,
}

impl Default for MapCpt {
    fn default() -> Self {
        MapCpt {
            inside_inside: 0.6,
            inside_outside: 0.4,
            outside_inside: 0.15,
            outside_outside: 0.85,
        }
    }
}

impl MapCpt {
    /// A hard map: indoors only inside buildings and vice versa.
    pub fn hard() -> Self {
        MapCpt {
            inside_inside: 1.0,
            inside_outside: 0.0,
            outside_inside: 0.0,
            outside_outside: 1.0,
        }
    }

    fn values(&self) -> [(&'static str, f64); 4] {
        [
            ("inside_inside", self.inside_inside),
            ("inside_outside", self.inside_outside),
            ("outside_inside", self.outside_inside),
            ("outside_outside", self.outside_outside),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitLocation {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub env_trans: [[f64; NE]; NE],
    pub state_trans: [[[f64; NS]; NE]; NS],
    pub heading_trans: [[f64; NUM_HEADINGS]; NS],
    pub speed_trans: [[[f64; NUM_SPEEDS]; NUM_SPEEDS]; NUM_SPEED_GROUPS],
    pub obs_state: [[[f64; NUM_BINS]; NS]; NS],
    pub obs_env: [[[f64; NUM_BINS]; NE]; NE],
    pub map_cpt: MapCpt,
    pub gps_exponent: f64,
    pub init_env: [f64; NE],
    pub init_state: [[f64; NS]; NE],
    pub init_speed: [f64; NUM_SPEEDS],
    pub init_heading: [f64; NUM_HEADINGS],
    #[serde(default)]
    pub init_location: InitLocation,
}

/// One normalized row of a CPT, named for error messages.
pub struct CptRow<'a> {
    pub table: &'static str,
    pub row: String,
    pub values: &'a [f64],
    /// Entries that must be exactly zero.
    pub zeros: Vec<usize>,
}

impl ModelParams {
    /// Uniform over every admissible child value.
    pub fn uniform() -> Self {
        fn uni<const N: usize>() -> [f64; N] {
            [1.0 / N as f64; N]
        }
        let mut state_trans = [[[0.0; NS]; NE]; NS];
        let mut init_state = [[0.0; NS]; NE];
        for e in Environment::ALL {
            let allowed: Vec<_> = MotionState::ALL
                .iter()
                .filter(|&&s| is_admissible(s, e))
                .collect();
            let p = 1.0 / allowed.len() as f64;
            for &&s in &allowed {
                init_state[e.index()][s.index()] = p;
                for row in state_trans.iter_mut() {
                    row[e.index()][s.index()] = p;
                }
            }
        }
        ModelParams {
            env_trans: [uni(); NE],
            state_trans,
            heading_trans: [uni(); NS],
            speed_trans: [[uni(); NUM_SPEEDS]; NUM_SPEED_GROUPS],
            obs_state: [[uni(); NS]; NS],
            obs_env: [[uni(); NE]; NE],
            map_cpt: MapCpt::default(),
            gps_exponent: 0.5,
            init_env: uni(),
            init_state,
            init_speed: uni(),
            init_heading: uni(),
            init_location: InitLocation::Uniform,
        }
    }

    /// All CPT rows in a fixed order.
    pub fn rows(&self) -> Vec<CptRow<'_>> {
        let mut rows = Vec::new();
        for (p, r) in self.env_trans.iter().enumerate() {
            rows.push(CptRow {
                table: "env_trans",
                row: format!("[{p}]"),
                values: r,
                zeros: vec![],
            });
        }
        for (p, by_env) in self.state_trans.iter().enumerate() {
            for (e, r) in by_env.iter().enumerate() {
                rows.push(CptRow {
                    table: "state_trans",
                    row: format!("[{p}][{e}]"),
                    values: r,
                    zeros: forbidden_states(e),
                });
            }
        }
        for (s, r) in self.heading_trans.iter().enumerate() {
            rows.push(CptRow {
                table: "heading_trans",
                row: format!("[{s}]"),
                values: r,
                zeros: vec![],
            });
        }
        for (g, by_prev) in self.speed_trans.iter().enumerate() {
            for (p, r) in by_prev.iter().enumerate() {
                rows.push(CptRow {
                    table: "speed_trans",
                    row: format!("[{g}][{p}]"),
                    values: r,
                    zeros: vec![],
                });
            }
        }
        for (i, by_state) in self.obs_state.iter().enumerate() {
            for (s, r) in by_state.iter().enumerate() {
                rows.push(CptRow {
                    table: "obs_state",
                    row: format!("[{i}][{s}]"),
                    values: r,
                    zeros: vec![],
                });
            }
        }
        for (i, by_env) in self.obs_env.iter().enumerate() {
            for (e, r) in by_env.iter().enumerate() {
                rows.push(CptRow {
                    table: "obs_env",
                    row: format!("[{i}][{e}]"),
                    values: r,
                    zeros: vec![],
                });
            }
        }
        rows.push(CptRow {
            table: "init_env",
            row: "[]".into(),
            values: &self.init_env,
            zeros: vec![],
        });
        for (e, r) in self.init_state.iter().enumerate() {
            rows.push(CptRow {
                table: "init_state",
                row: format!("[{e}]"),
                values: r,
                zeros: forbidden_states(e),
            });
        }
        rows.push(CptRow {
            table: "init_speed",
            row: "[]".into(),
            values: &self.init_speed,
            zeros: vec![],
        });
        rows.push(CptRow {
            table: "init_heading",
            row: "[]".into(),
            values: &self.init_heading,
            zeros: vec![],
        });
        rows
    }

    /// Mutable views of the same rows, in the same order as [`rows`](Self::rows).
    pub(crate) fn rows_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.env_trans.iter_mut().map(|r| &mut r[..]));
        out.extend(self.state_trans.iter_mut().flatten().map(|r| &mut r[..]));
        out.extend(self.heading_trans.iter_mut().map(|r| &mut r[..]));
        out.extend(self.speed_trans.iter_mut().flatten().map(|r| &mut r[..]));
        out.extend(self.obs_state.iter_mut().flatten().map(|r| &mut r[..]));
        out.extend(self.obs_env.iter_mut().flatten().map(|r| &mut r[..]));
        out.push(&mut self.init_env[..]);
        out.extend(self.init_state.iter_mut().map(|r| &mut r[..]));
        out.push(&mut self.init_speed[..]);
        out.push(&mut self.init_heading[..]);
        out
    }

    /// Check non-negativity, row normalization within `tol`, structural zeros
    /// and the scalar constants.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for row in self.rows() {
            let fail = |message: String| Error::Validation {
                table: row.table.to_string(),
                row: row.row.clone(),
                message,
            };
            if let Some((j, v)) = row
                .values
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
            {
                return Err(fail(format!("entry {j} is {v}; probabilities must be >= 0")));
            }
            let sum: f64 = row.values.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(fail(format!("row sums to {sum}, expected 1")));
            }
            if let Some(&j) = row.zeros.iter().find(|&&j| row.values[j] != 0.0) {
                return Err(fail(format!(
                    "entry {j} is a forbidden (state, env) pair and must be 0"
                )));
            }
        }
        for (name, v) in self.map_cpt.values() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation {
                    table: "map_cpt".into(),
                    row: name.into(),
                    message: format!("{v} is not a probability"),
                });
            }
        }
        if !(self.gps_exponent.is_finite() && self.gps_exponent >= 0.0) {
            return Err(Error::Validation {
                table: "gps_exponent".into(),
                row: "-".into(),
                message: format!("{} must be finite and >= 0", self.gps_exponent),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(s)?;
        p.validate(PARSE_ROW_TOLERANCE)?;
        Ok(p)
    }
}

/// State indices forbidden in environment `e`.
pub(crate) fn forbidden_states(e: usize) -> Vec<usize> {
    let env = Environment::ALL[e];
    MotionState::ALL
        .iter()
        .filter(|&&s| !is_admissible(s, env))
        .map(|s| s.index())
        .collect()
}
