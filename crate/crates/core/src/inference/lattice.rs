use super::{truncate_best, Decoded, ExpectedCounts, FramePosterior, Smoothed};
use crate::error::{Error, Result};
use crate::factors::{Model, COLLAPSED_LOCATION};
use crate::inference::BeamConfig;
use crate::learning::VeSchedule;
use crate::types::*;

/// Entries per location: speed x heading x (state, env).
const BLOCK: usize = NUM_SPEEDS * NUM_HEADINGS * NUM_SE;
const NO_BLOCK: u32 = u32::MAX;

#[inline(always)]
fn at(sp: usize, h: usize, se: usize) -> usize {
    (sp * NUM_HEADINGS + h) * NUM_SE + se
}

pub(crate) struct LatticeFrame {
    keys: Vec<StateKey>,
    /// Filtered probabilities (sum mode) or best-path scores scaled so the
    /// frame maximum is one (max mode).
    alpha: Vec<f64>,
    /// Every observation term of the state at this frame, including
    /// virtual evidence.
    log_obs: Vec<f64>,
    log_norm: f64,
    /// Index of the best predecessor in the previous frame (max mode).
    back: Vec<u32>,
}

impl LatticeFrame {
    pub(crate) fn posterior(&self) -> FramePosterior {
        FramePosterior {
            states: self
                .keys
                .iter()
                .zip(&self.alpha)
                .map(|(k, a)| (k.unpack(), *a))
                .collect(),
            log_normalizer: self.log_norm,
        }
    }
}

pub(crate) struct Lattice {
    pub(crate) frames: Vec<LatticeFrame>,
}

impl Lattice {
    pub(crate) fn log_likelihood(&self) -> f64 {
        self.frames.iter().map(|f| f.log_norm).sum()
    }

    pub(crate) fn backtrack(&self) -> Decoded {
        let last = self.frames.last().expect("non-empty lattice");
        // alpha is exactly 1 at every maximizer; take the smallest key
        let mut i = last
            .alpha
            .iter()
            .position(|&a| a == 1.0)
            .expect("frame maximum is normalized to one");
        let mut path = Vec::with_capacity(self.frames.len());
        for f in self.frames.iter().rev() {
            path.push(f.keys[i].unpack());
            if !f.back.is_empty() {
                i = f.back[i] as usize;
            }
        }
        path.reverse();
        Decoded {
            path,
            log_score: self.log_likelihood(),
        }
    }
}

/// Per-frame observation terms that do not depend on location.
struct FrameObs<'f> {
    se_log: [f64; NUM_SE],
    allowed: Vec<usize>,
    frame: &'f Frame,
}

impl<'f> FrameObs<'f> {
    fn new(model: &Model<'_>, frame: &'f Frame, ve: Option<&VeSchedule>) -> Self {
        let mut se_log = model.msb_scores(&frame.msb);
        if let Some(ve) = ve {
            let w = ve.log_weights(frame.index);
            for (s, v) in se_log.iter_mut().zip(w) {
                *s += v;
            }
        }
        let allowed = (0..NUM_SE).filter(|&i| se_log[i] > f64::NEG_INFINITY).collect();
        FrameObs {
            se_log,
            allowed,
            frame,
        }
    }

    fn at_location(&self, model: &Model<'_>, l: GridLocation) -> [f64; NUM_SE] {
        let g = model.gps_score(self.frame, l);
        let mut out = [f64::NEG_INFINITY; NUM_SE];
        for &se in &self.allowed {
            out[se] = self.se_log[se] + g + model.map_score(SePair::from_index(se), l);
        }
        out
    }
}

/// Dense per-location buffers for one frame step.
struct Workspace {
    width: u32,
    lookup: Vec<u32>,
    locs: Vec<GridLocation>,
    /// Stage outputs: after move, after (state, env), after heading, after speed.
    a: [Vec<f64>; 4],
    bp_move: Vec<u32>,
    bp_small: [Vec<u8>; 3],
    max_mode: bool,
}

impl Workspace {
    fn new(model: &Model<'_>, max_mode: bool) -> Self {
        Workspace {
            width: model.map.width(),
            lookup: vec![NO_BLOCK; model.map.num_cells()],
            locs: Vec::new(),
            a: Default::default(),
            bp_move: Vec::new(),
            bp_small: Default::default(),
            max_mode,
        }
    }

    fn reset(&mut self) {
        for l in self.locs.drain(..) {
            self.lookup[(l.y * self.width + l.x) as usize] = NO_BLOCK;
        }
        for v in &mut self.a {
            v.clear();
        }
        self.bp_move.clear();
        for v in &mut self.bp_small {
            v.clear();
        }
    }

    fn block_of(&self, l: GridLocation) -> Option<usize> {
        let b = self.lookup[(l.y * self.width + l.x) as usize];
        (b != NO_BLOCK).then_some(b as usize)
    }

    fn block(&mut self, l: GridLocation) -> usize {
        let cell = (l.y * self.width + l.x) as usize;
        let b = self.lookup[cell];
        if b != NO_BLOCK {
            return b as usize;
        }
        let b = self.locs.len();
        self.lookup[cell] = b as u32;
        self.locs.push(l);
        let n = (b + 1) * BLOCK;
        for v in &mut self.a {
            v.resize(n, 0.0);
        }
        if self.max_mode {
            self.bp_move.resize(n, 0);
            for v in &mut self.bp_small {
                v.resize(n, 0);
            }
        }
        b
    }
}

/// Propagate a retained frame through the four transition stages. In max
/// mode every stage keeps the argmax; ties go to the first candidate seen,
/// which is the smallest index.
fn propagate<const MAX: bool>(
    prev: &LatticeFrame,
    model: &Model<'_>,
    allowed: &[usize],
    ws: &mut Workspace,
) {
    scatter::<MAX>(prev, model, ws);
    mix::<MAX>(model, allowed, ws, None);
}

/// Stage 1: move every retained state to its successor cells.
fn scatter<const MAX: bool>(prev: &LatticeFrame, model: &Model<'_>, ws: &mut Workspace) {
    let motion = model.factors.motion;
    for (i, (&key, &a)) in prev.keys.iter().zip(&prev.alpha).enumerate() {
        if a == 0.0 {
            continue;
        }
        let (sp, h, se) = (key.speed_bin(), key.heading_bin(), key.se().index());
        let idx = at(sp, h, se);
        let support = if motion {
            model.support(key.location(), sp, h)
        } else {
            crate::factors::Support::single(COLLAPSED_LOCATION)
        };
        for &(l, w) in support.as_slice() {
            let j = ws.block(l) * BLOCK + idx;
            let v = a * w;
            if MAX {
                if v > ws.a[0][j] {
                    ws.a[0][j] = v;
                    ws.bp_move[j] = i as u32;
                }
            } else {
                ws.a[0][j] += v;
            }
        }
    }

}

/// Per-block input thresholds for stages 2 to 4. An entry below its
/// threshold cannot reach the pruning floor, so skipping it leaves every
/// surviving max-product score and back-pointer unchanged.
struct StageCuts {
    se: Vec<[f64; NUM_SE]>,
    heading: Vec<[f64; NUM_SE]>,
    speed: Vec<[f64; NUM_SE]>,
}

/// Stages 2 to 4: (state, env), heading, speed.
fn mix<const MAX: bool>(
    model: &Model<'_>,
    allowed: &[usize],
    ws: &mut Workspace,
    cuts: Option<&StageCuts>,
) {
    let t = &model.tables;
    let motion = model.factors.motion;
    let nblocks = ws.locs.len();
    let [a1, a2, a3, a4] = &mut ws.a;
    let [bp2, bp3, bp4] = &mut ws.bp_small;
    let rows_per_block = NUM_SPEEDS * NUM_HEADINGS;

    for row in 0..nblocks * rows_per_block {
        let base = row * NUM_SE;
        let cut = cuts.map(|c| &c.se[row / rows_per_block]);
        for se in 0..NUM_SE {
            let v = a1[base + se];
            if v == 0.0 || cut.is_some_and(|c| v < c[se]) {
                continue;
            }
            for &se2 in allowed {
                let x = v * t.se_trans[se][se2];
                let j = base + se2;
                if MAX {
                    if x > a2[j] {
                        a2[j] = x;
                        bp2[j] = se as u8;
                    }
                } else {
                    a2[j] += x;
                }
            }
        }
    }
    if !motion {
        return;
    }

    for b in 0..nblocks {
        let off = b * BLOCK;
        let cut = cuts.map(|c| &c.heading[b]);
        for sp in 0..NUM_SPEEDS {
            for &se2 in allowed {
                let hrow = &t.heading[se2];
                let lim = cut.map_or(0.0, |c| c[se2]);
                for h in 0..NUM_HEADINGS {
                    let v = a2[off + at(sp, h, se2)];
                    if v == 0.0 || v < lim {
                        continue;
                    }
                    for h2 in 0..NUM_HEADINGS {
                        let x = v * hrow[heading_offset_index(h, h2)];
                        let j = off + at(sp, h2, se2);
                        if MAX {
                            if x > a3[j] {
                                a3[j] = x;
                                bp3[j] = h as u8;
                            }
                        } else {
                            a3[j] += x;
                        }
                    }
                }
            }
        }
    }

    for b in 0..nblocks {
        let off = b * BLOCK;
        let cut = cuts.map(|c| &c.speed[b]);
        for h2 in 0..NUM_HEADINGS {
            for &se2 in allowed {
                let table = &t.speed[se2];
                let lim = cut.map_or(0.0, |c| c[se2]);
                for sp in 0..NUM_SPEEDS {
                    let v = a3[off + at(sp, h2, se2)];
                    if v == 0.0 || v < lim {
                        continue;
                    }
                    for sp2 in 0..NUM_SPEEDS {
                        let x = v * table[sp][sp2];
                        let j = off + at(sp2, h2, se2);
                        if MAX {
                            if x > a4[j] {
                                a4[j] = x;
                                bp4[j] = sp as u8;
                            }
                        } else {
                            a4[j] += x;
                        }
                    }
                }
            }
        }
    }
}

/// Collects candidate states, trimming to the beam cap as it goes so
/// memory stays bounded. Trimming early never changes the final top-k.
struct Candidates {
    items: Vec<(f64, StateKey)>,
    cap: Option<usize>,
}

impl Candidates {
    fn new(beam: &BeamConfig) -> Self {
        Candidates {
            items: Vec::new(),
            cap: (!beam.exact_mode).then_some(beam.max_states),
        }
    }

    #[inline]
    fn push(&mut self, score: f64, key: StateKey) {
        self.items.push((score, key));
        if let Some(cap) = self.cap {
            if self.items.len() >= 2 * cap + 4096 {
                truncate_best(&mut self.items, cap);
            }
        }
    }

    /// Final selection in key order.
    fn finish(mut self) -> Vec<(f64, StateKey)> {
        if let Some(cap) = self.cap {
            truncate_best(&mut self.items, cap);
        }
        self.items.sort_unstable_by_key(|c| c.1);
        self.items
    }
}

fn pruning_floor(best: f64, beam: &BeamConfig) -> f64 {
    if beam.exact_mode {
        f64::NEG_INFINITY
    } else {
        best - beam.log_threshold
    }
}

fn build_frame<const MAX: bool>(
    selected: Vec<(f64, StateKey)>,
    obs: &FrameObs<'_>,
    model: &Model<'_>,
) -> LatticeFrame {
    let best = selected.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let mut alpha: Vec<f64> = selected.iter().map(|c| (c.0 - best).exp()).collect();
    let log_norm = if MAX {
        best
    } else {
        let z: f64 = alpha.iter().sum();
        for a in &mut alpha {
            *a /= z;
        }
        best + z.ln()
    };
    let mut log_obs = Vec::with_capacity(selected.len());
    let mut cache: Option<(GridLocation, [f64; NUM_SE])> = None;
    for &(_, key) in &selected {
        let l = key.location();
        let o = match cache {
            Some((cl, o)) if cl == l => o,
            _ => {
                let o = obs.at_location(model, l);
                cache = Some((l, o));
                o
            }
        };
        log_obs.push(o[key.se().index()]);
    }
    LatticeFrame {
        keys: selected.into_iter().map(|c| c.1).collect(),
        alpha,
        log_obs,
        log_norm,
        back: Vec::new(),
    }
}

fn initial_frame<const MAX: bool>(
    obs: &FrameObs<'_>,
    model: &Model<'_>,
    beam: &BeamConfig,
) -> Result<LatticeFrame> {
    let t = &model.tables;
    let ln_se: [f64; NUM_SE] = t.init_se.map(f64::ln);
    let mut cands = Candidates::new(beam);
    if !model.factors.motion {
        let o = obs.at_location(model, COLLAPSED_LOCATION);
        let scores: Vec<(f64, StateKey)> = obs
            .allowed
            .iter()
            .map(|&se| {
                let key = StateKey::pack(COLLAPSED_LOCATION, PolarVelocity::ZERO, SePair::from_index(se));
                (ln_se[se] + o[se], key)
            })
            .filter(|c| c.0 > f64::NEG_INFINITY)
            .collect();
        let best = scores.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let floor = pruning_floor(best, beam);
        for (s, k) in scores {
            if s >= floor {
                cands.push(s, k);
            }
        }
    } else {
        let ln_sp: [f64; NUM_SPEEDS] = t.init_speed.map(f64::ln);
        let ln_h: [f64; NUM_HEADINGS] = t.init_heading.map(f64::ln);
        let best_sp = ln_sp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best_h = ln_h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let uniform = -(model.map.num_cells() as f64).ln();
        let (w, h) = (model.map.width(), model.map.height());
        // the prior factorizes, so the per-cell maximum is exact
        let mut cells = Vec::with_capacity(model.map.num_cells());
        let mut best = f64::NEG_INFINITY;
        for x in 0..w {
            for y in 0..h {
                let l = GridLocation::new(x, y);
                let o = obs.at_location(model, l);
                let top = obs
                    .allowed
                    .iter()
                    .map(|&se| ln_se[se] + o[se])
                    .fold(f64::NEG_INFINITY, f64::max);
                let ub = top + best_sp + best_h + uniform;
                best = best.max(ub);
                cells.push((l, ub, o));
            }
        }
        let floor = pruning_floor(best, beam);
        for (l, ub, o) in cells {
            if !(ub >= floor) || ub == f64::NEG_INFINITY {
                continue;
            }
            for sp in 0..NUM_SPEEDS {
                for hd in 0..NUM_HEADINGS {
                    let base = uniform + ln_sp[sp] + ln_h[hd];
                    for &se in &obs.allowed {
                        let s = base + ln_se[se] + o[se];
                        if s >= floor && s > f64::NEG_INFINITY {
                            let v = PolarVelocity {
                                speed_bin: sp as u8,
                                heading_bin: hd as u8,
                            };
                            cands.push(s, StateKey::pack(l, v, SePair::from_index(se)));
                        }
                    }
                }
            }
        }
    }
    let selected = cands.finish();
    if selected.is_empty() {
        return Err(Error::InferenceCollapse { frame: 0 });
    }
    Ok(build_frame::<MAX>(selected, obs, model))
}

#[cfg(not(test))]
fn cuts_enabled() -> bool {
    true
}

#[cfg(test)]
thread_local! {
    static CUTS: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

#[cfg(test)]
fn cuts_enabled() -> bool {
    CUTS.with(|c| c.get())
}

/// Successors examined per retained state when bounding the frame maximum.
const PROBE_STATES: usize = 8;

/// Input thresholds for the max-product stages. The frame maximum is
/// bounded below by exact successor scores of a few top states; anything
/// whose best completion falls below that bound minus the threshold is
/// pruned regardless.
fn stage_cuts(
    prev: &LatticeFrame,
    obs: &FrameObs<'_>,
    model: &Model<'_>,
    beam: &BeamConfig,
    block_obs: &[[f64; NUM_SE]],
) -> StageCuts {
    let t = &model.tables;
    let mut order: Vec<usize> = (0..prev.alpha.len()).collect();
    let probe = PROBE_STATES.min(order.len());
    if probe > 0 && probe < order.len() {
        order.select_nth_unstable_by(probe - 1, |&a, &b| prev.alpha[b].total_cmp(&prev.alpha[a]));
    }
    let mut lower = f64::NEG_INFINITY;
    for &i in &order[..probe] {
        let key = prev.keys[i];
        let a = prev.alpha[i];
        let (sp, h, se) = (key.speed_bin(), key.heading_bin(), key.se().index());
        for &(l, w) in model.support(key.location(), sp, h).as_slice() {
            let o = obs.at_location(model, l);
            for &se2 in &obs.allowed {
                let base = a * w * t.se_trans[se][se2];
                let hmax = (0..NUM_HEADINGS)
                    .map(|h2| t.heading[se2][heading_offset_index(h, h2)])
                    .fold(0.0, f64::max);
                let smax = t.speed[se2][sp].iter().copied().fold(0.0, f64::max);
                let v = base * hmax * smax;
                if v > 0.0 {
                    lower = lower.max(v.ln() + o[se2]);
                }
            }
        }
    }
    let floor = lower - beam.log_threshold;
    let mut hmax = [0.0f64; NUM_SE];
    let mut smax = [0.0f64; NUM_SE];
    for se2 in 0..NUM_SE {
        hmax[se2] = t.heading[se2].iter().copied().fold(0.0, f64::max);
        smax[se2] = t.speed[se2].iter().flatten().copied().fold(0.0, f64::max);
    }
    const SLACK: f64 = 1.0 - 1e-9;
    let mut cuts = StageCuts {
        se: Vec::with_capacity(block_obs.len()),
        heading: Vec::with_capacity(block_obs.len()),
        speed: Vec::with_capacity(block_obs.len()),
    };
    for o in block_obs {
        let mut c2 = [f64::INFINITY; NUM_SE];
        let mut c3 = [f64::INFINITY; NUM_SE];
        for se2 in 0..NUM_SE {
            if o[se2] > f64::NEG_INFINITY && hmax[se2] > 0.0 && smax[se2] > 0.0 {
                let room = (floor - o[se2]).exp();
                c2[se2] = room / (hmax[se2] * smax[se2]) * SLACK;
                c3[se2] = room / smax[se2] * SLACK;
            }
        }
        let mut c1 = [f64::INFINITY; NUM_SE];
        for (se, c) in c1.iter_mut().enumerate() {
            for se2 in 0..NUM_SE {
                let tr = t.se_trans[se][se2];
                if tr > 0.0 {
                    *c = c.min(c2[se2] / tr * SLACK);
                }
            }
        }
        cuts.se.push(c1);
        cuts.heading.push(c2);
        cuts.speed.push(c3);
    }
    cuts
}

fn step<const MAX: bool>(
    prev: &LatticeFrame,
    obs: &FrameObs<'_>,
    model: &Model<'_>,
    beam: &BeamConfig,
    ws: &mut Workspace,
) -> Result<LatticeFrame> {
    ws.reset();
    scatter::<MAX>(prev, model, ws);
    let block_obs: Vec<[f64; NUM_SE]> = ws.locs.iter().map(|&l| obs.at_location(model, l)).collect();
    let cuts = (MAX && model.factors.motion && !beam.exact_mode && cuts_enabled())
        .then(|| stage_cuts(prev, obs, model, beam, &block_obs));
    mix::<MAX>(model, &obs.allowed, ws, cuts.as_ref());
    let pred = if model.factors.motion { &ws.a[3] } else { &ws.a[1] };

    // best score per block and pair, from the largest predicted mass
    let mut best = f64::NEG_INFINITY;
    for (b, o) in block_obs.iter().enumerate() {
        let block = &pred[b * BLOCK..(b + 1) * BLOCK];
        for &se in &obs.allowed {
            let mut m = 0.0f64;
            for row in 0..NUM_SPEEDS * NUM_HEADINGS {
                m = m.max(block[row * NUM_SE + se]);
            }
            if m > 0.0 {
                best = best.max(m.ln() + o[se]);
            }
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::InferenceCollapse { frame: obs.frame.index });
    }
    let floor = pruning_floor(best, beam);

    let mut cands = Candidates::new(beam);
    for (b, o) in block_obs.iter().enumerate() {
        let l = ws.locs[b];
        let block = &pred[b * BLOCK..(b + 1) * BLOCK];
        for &se in &obs.allowed {
            // cheap linear-domain prefilter; the exact test is on the log score
            let cutoff = if beam.exact_mode {
                0.0
            } else {
                (floor - o[se]).exp() * (1.0 - 1e-9)
            };
            let pair = SePair::from_index(se);
            for sp in 0..NUM_SPEEDS {
                for h in 0..NUM_HEADINGS {
                    let v = block[at(sp, h, se)];
                    if v == 0.0 || v < cutoff {
                        continue;
                    }
                    let s = v.ln() + o[se];
                    if s >= floor && s > f64::NEG_INFINITY {
                        let vel = PolarVelocity {
                            speed_bin: sp as u8,
                            heading_bin: h as u8,
                        };
                        cands.push(s, StateKey::pack(l, vel, pair));
                    }
                }
            }
        }
    }
    let selected = cands.finish();
    if selected.is_empty() {
        return Err(Error::InferenceCollapse { frame: obs.frame.index });
    }
    let mut frame = build_frame::<MAX>(selected, obs, model);
    if MAX {
        let motion = model.factors.motion;
        frame.back = frame
            .keys
            .iter()
            .map(|key| {
                let b = ws.block_of(key.location()).expect("candidate block exists") * BLOCK;
                let (mut sp, mut h, se2) = (key.speed_bin(), key.heading_bin(), key.se().index());
                if motion {
                    sp = ws.bp_small[2][b + at(sp, h, se2)] as usize;
                    h = ws.bp_small[1][b + at(sp, h, se2)] as usize;
                }
                let se = ws.bp_small[0][b + at(sp, h, se2)] as usize;
                ws.bp_move[b + at(sp, h, se)]
            })
            .collect();
    }
    Ok(frame)
}

pub(crate) fn forward<const MAX: bool>(
    frames: &[Frame],
    model: &Model<'_>,
    beam: &BeamConfig,
    ve: Option<&VeSchedule>,
) -> Result<Lattice> {
    let mut ws = Workspace::new(model, MAX);
    let mut out = Vec::with_capacity(frames.len());
    out.push(initial_frame::<MAX>(&FrameObs::new(model, &frames[0], ve), model, beam)?);
    for frame in &frames[1..] {
        let obs = FrameObs::new(model, frame, ve);
        let next = step::<MAX>(out.last().expect("non-empty"), &obs, model, beam, &mut ws)?;
        out.push(next);
    }
    Ok(Lattice { frames: out })
}

/// Backward pass over a sum-mode lattice. Returns expected counts and, if
/// asked, the smoothed posteriors.
pub(crate) fn backward(
    lattice: &Lattice,
    frames: &[Frame],
    model: &Model<'_>,
    ve: Option<&VeSchedule>,
    want_posteriors: bool,
) -> (ExpectedCounts, Option<Vec<FramePosterior>>) {
    let t = &model.tables;
    let motion = model.factors.motion;
    let n = lattice.frames.len();
    let mut counts = ExpectedCounts::default();
    let mut gammas: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut beta: Vec<f64> = vec![1.0; lattice.frames[n - 1].keys.len()];
    let mut ws = Workspace::new(model, false);
    let (mut q1, mut q2, mut q3, mut p) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    gammas[n - 1] = normalized_product(&lattice.frames[n - 1].alpha, &beta);
    for k in (0..n - 1).rev() {
        let cur = &lattice.frames[k];
        let next = &lattice.frames[k + 1];
        let allowed = FrameObs::new(model, &frames[k + 1], ve).allowed;
        ws.reset();
        propagate::<false>(cur, model, &allowed, &mut ws);
        let len = ws.a[0].len();
        for v in [&mut q1, &mut q2, &mut q3, &mut p] {
            v.clear();
            v.resize(len, 0.0);
        }
        for ((key, b), o) in next.keys.iter().zip(&beta).zip(&next.log_obs) {
            let blk = ws.block_of(key.location()).expect("successor block exists");
            p[blk * BLOCK + at(key.speed_bin(), key.heading_bin(), key.se().index())] =
                b * (o - next.log_norm).exp();
        }
        let nblocks = ws.locs.len();
        let [a1, a2, a3, _] = &ws.a;
        // pair counts for this step, renormalized below so that rounding in
        // the scaled messages does not leak into the totals
        let mut pair = PairCounts::default();

        let q2_src: &Vec<f64> = if motion {
            for b in 0..nblocks {
                let off = b * BLOCK;
                for h2 in 0..NUM_HEADINGS {
                    for &se2 in &allowed {
                        let table = &t.speed[se2];
                        let g = SePair::from_index(se2).state().speed_group();
                        let col: [f64; NUM_SPEEDS] =
                            std::array::from_fn(|sp2| p[off + at(sp2, h2, se2)]);
                        if col.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        for sp in 0..NUM_SPEEDS {
                            let mut q = 0.0;
                            let a = a3[off + at(sp, h2, se2)];
                            for sp2 in 0..NUM_SPEEDS {
                                let x = table[sp][sp2] * col[sp2];
                                q += x;
                                if a > 0.0 {
                                    pair.speed[g][sp][sp2] += a * x;
                                }
                            }
                            q3[off + at(sp, h2, se2)] = q;
                        }
                    }
                }
            }
            for b in 0..nblocks {
                let off = b * BLOCK;
                for sp in 0..NUM_SPEEDS {
                    for &se2 in &allowed {
                        let hrow = &t.heading[se2];
                        let s2 = SePair::from_index(se2).state().index();
                        let col: [f64; NUM_HEADINGS] =
                            std::array::from_fn(|h2| q3[off + at(sp, h2, se2)]);
                        if col.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        for h in 0..NUM_HEADINGS {
                            let mut q = 0.0;
                            let a = a2[off + at(sp, h, se2)];
                            for h2 in 0..NUM_HEADINGS {
                                let d = heading_offset_index(h, h2);
                                let x = hrow[d] * col[h2];
                                q += x;
                                if a > 0.0 {
                                    pair.heading[s2][d] += a * x;
                                }
                            }
                            q2[off + at(sp, h, se2)] = q;
                        }
                    }
                }
            }
            &q2
        } else {
            &p
        };

        for row in 0..nblocks * NUM_SPEEDS * NUM_HEADINGS {
            let base = row * NUM_SE;
            for se in 0..NUM_SE {
                let a = a1[base + se];
                if a == 0.0 {
                    continue;
                }
                let mut q = 0.0;
                for &se2 in &allowed {
                    let x = t.se_trans[se][se2] * q2_src[base + se2];
                    q += x;
                    pair.se_trans[se][se2] += a * x;
                }
                q1[base + se] = q;
            }
        }

        beta = cur
            .keys
            .iter()
            .map(|key| {
                let (sp, h) = (key.speed_bin(), key.heading_bin());
                let idx = at(sp, h, key.se().index());
                let support = if motion {
                    model.support(key.location(), sp, h)
                } else {
                    crate::factors::Support::single(COLLAPSED_LOCATION)
                };
                support
                    .as_slice()
                    .iter()
                    .map(|&(l, w)| w * q1[ws.block_of(l).expect("target block exists") * BLOCK + idx])
                    .sum()
            })
            .collect();
        gammas[k] = normalized_product(&cur.alpha, &beta);
        pair.add_to(&mut counts, motion);
        counts.transitions += 1;
    }

    for (k, (f, g)) in lattice.frames.iter().zip(&gammas).enumerate() {
        let msb = &frames[k].msb;
        for (key, &p) in f.keys.iter().zip(g) {
            if p == 0.0 {
                continue;
            }
            let se = key.se();
            let (s, e) = (se.state().index(), se.env().index());
            for (i, &b) in msb.state_bins.iter().enumerate() {
                counts.obs_state[i][s][b as usize - 1] += p;
            }
            for (i, &b) in msb.env_bins.iter().enumerate() {
                counts.obs_env[i][e][b as usize - 1] += p;
            }
            if k == 0 {
                counts.init_se[se.index()] += p;
                if motion {
                    counts.init_speed[key.speed_bin()] += p;
                    counts.init_heading[key.heading_bin()] += p;
                }
            }
        }
    }

    let posteriors = want_posteriors.then(|| {
        lattice
            .frames
            .iter()
            .zip(gammas)
            .map(|(f, g)| FramePosterior {
                states: f.keys.iter().map(|k| k.unpack()).zip(g).collect(),
                log_normalizer: f.log_norm,
            })
            .collect()
    });
    (counts, posteriors)
}

#[derive(Default)]
struct PairCounts {
    se_trans: [[f64; NUM_SE]; NUM_SE],
    heading: [[f64; NUM_HEADINGS]; MotionState::COUNT],
    speed: [[[f64; NUM_SPEEDS]; NUM_SPEEDS]; NUM_SPEED_GROUPS],
}

impl PairCounts {
    fn add_to(&self, counts: &mut ExpectedCounts, motion: bool) {
        fn add<'a>(dst: impl Iterator<Item = &'a mut f64>, src: impl Iterator<Item = &'a f64> + Clone) {
            let z: f64 = src.clone().sum();
            if z > 0.0 {
                for (d, s) in dst.zip(src) {
                    *d += s / z;
                }
            }
        }
        add(counts.se_trans.iter_mut().flatten(), self.se_trans.iter().flatten());
        if motion {
            add(counts.heading.iter_mut().flatten(), self.heading.iter().flatten());
            add(counts.speed.iter_mut().flatten().flatten(), self.speed.iter().flatten().flatten());
        }
    }
}

fn normalized_product(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let z: f64 = g.iter().sum();
    if z > 0.0 {
        for v in &mut g {
            *v /= z;
        }
    }
    g
}

/// Materialize p(x_k, x_{k+1} | all observations) from a smoothing result,
/// by direct evaluation of the transition. Cost is quadratic in the
/// retained sets, so this is for small lattices and checks.
pub fn pairwise_posterior(
    model: &Model<'_>,
    frames: &[Frame],
    smoothed: &Smoothed,
    ve: Option<&VeSchedule>,
    k: usize,
) -> Result<Vec<(JointState, JointState, f64)>> {
    if k + 1 >= frames.len() || k + 1 >= smoothed.posteriors.len() {
        return Err(Error::invalid(format!("no frame pair starting at {k}")));
    }
    let filt = &smoothed.filtered[k];
    let filt_next = &smoothed.filtered[k + 1];
    let post_next = &smoothed.posteriors[k + 1];
    let obs = FrameObs::new(model, &frames[k + 1], ve);
    let mut out = Vec::new();
    for (x, a) in &filt.states {
        if *a == 0.0 {
            continue;
        }
        for ((x2, a2), (_, g2)) in filt_next.states.iter().zip(&post_next.states) {
            if *a2 == 0.0 {
                continue;
            }
            let beta = g2 / a2;
            let o = obs.at_location(model, x2.location)[x2.se().index()];
            let lt = model.transition_log(x, x2);
            let v = a * (lt + o - filt_next.log_normalizer).exp() * beta;
            if v > 0.0 {
                out.push((*x, *x2, v));
            }
        }
    }
    Ok(out)
}
