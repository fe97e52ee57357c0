#![allow(dead_code)]

use ctxdbn_core::learning::{initialize_params, VeSchedule};
use ctxdbn_core::{Frame, GpsFix, JointState, Model, MsbObservation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn logsumexp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Strongly non-uniform parameters with the model's structural zeros.
pub fn random_params(seed: u64) -> ctxdbn_core::ModelParams {
    initialize_params(seed, 4.0)
}

pub fn random_frames(seed: u64, n: usize, gps: Option<(f64, f64)>) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| Frame {
            index: k,
            msb: MsbObservation::new(
                std::array::from_fn(|_| rng.gen_range(1..=10)),
                std::array::from_fn(|_| rng.gen_range(1..=10)),
            )
            .unwrap(),
            gps: gps.and_then(|(w, h)| {
                (k % 2 == 0).then(|| GpsFix {
                    x_m: rng.gen_range(0.0..w),
                    y_m: rng.gen_range(0.0..h),
                    hdop: rng.gen_range(0.3..2.0),
                })
            }),
        })
        .collect()
}

/// Brute-force log-domain HMM over every state the model can represent.
pub struct Dense {
    pub states: Vec<JointState>,
    /// Sparse rows of the transition matrix: (next index, log prob).
    pub trans: Vec<Vec<(usize, f64)>>,
    /// obs[k][i], including virtual evidence; frame 0 includes the prior.
    pub obs: Vec<Vec<f64>>,
}

impl Dense {
    pub fn new(model: &Model<'_>, frames: &[Frame], ve: Option<&VeSchedule>) -> Self {
        let states = model.enumerate_states();
        let trans = states
            .iter()
            .map(|a| {
                states
                    .iter()
                    .enumerate()
                    .map(|(j, b)| (j, model.transition_log(a, b)))
                    .filter(|(_, v)| *v > f64::NEG_INFINITY)
                    .collect()
            })
            .collect();
        let ve_log = |k: usize, s: &JointState| ve.map_or(0.0, |v| v.score(k, s.state, s.env).ln());
        let obs = frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                states
                    .iter()
                    .map(|s| {
                        let base = if k == 0 {
                            model.initial_log(s, f)
                        } else {
                            model.observation_log(f, s)
                        };
                        base + ve_log(k, s)
                    })
                    .collect()
            })
            .collect();
        Dense { states, trans, obs }
    }

    /// Unnormalized log alpha per frame.
    pub fn forward(&self) -> Vec<Vec<f64>> {
        let n = self.states.len();
        let mut out = vec![self.obs[0].clone()];
        for k in 1..self.obs.len() {
            let prev = &out[k - 1];
            let mut acc: Vec<Vec<f64>> = vec![Vec::new(); n];
            for (i, row) in self.trans.iter().enumerate() {
                if prev[i] == f64::NEG_INFINITY {
                    continue;
                }
                for &(j, t) in row {
                    acc[j].push(prev[i] + t);
                }
            }
            out.push(
                acc.into_iter()
                    .zip(&self.obs[k])
                    .map(|(terms, o)| logsumexp(terms) + o)
                    .collect(),
            );
        }
        out
    }

    pub fn backward(&self) -> Vec<Vec<f64>> {
        let n = self.states.len();
        let m = self.obs.len();
        let mut out = vec![vec![0.0; n]; m];
        for k in (0..m - 1).rev() {
            for i in 0..n {
                out[k][i] = logsumexp(
                    self.trans[i]
                        .iter()
                        .map(|&(j, t)| t + self.obs[k + 1][j] + out[k + 1][j]),
                );
            }
        }
        out
    }

    pub fn log_likelihood(&self) -> f64 {
        logsumexp(self.forward().last().unwrap().iter().copied())
    }

    /// Best score and path by max-product.
    pub fn viterbi(&self) -> (f64, Vec<JointState>) {
        let n = self.states.len();
        let mut delta = self.obs[0].clone();
        let mut back: Vec<Vec<usize>> = Vec::new();
        for k in 1..self.obs.len() {
            let mut best = vec![(f64::NEG_INFINITY, usize::MAX); n];
            for (i, row) in self.trans.iter().enumerate() {
                for &(j, t) in row {
                    let v = delta[i] + t;
                    if v > best[j].0 {
                        best[j] = (v, i);
                    }
                }
            }
            delta = best.iter().zip(&self.obs[k]).map(|(b, o)| b.0 + o).collect();
            back.push(best.iter().map(|b| b.1).collect());
        }
        let (mut i, score) = delta
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let mut path = vec![self.states[i]];
        for b in back.iter().rev() {
            i = b[i];
            path.push(self.states[i]);
        }
        path.reverse();
        (score, path)
    }
}
