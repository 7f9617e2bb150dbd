//! Planar navigation and nonholonomic car tasks with blob renderers,
//! ground-truth costs, a sparse success oracle and trajectory files.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};

pub const ARENA: f64 = 3.0;
pub const SPAWN: f64 = 2.8;
pub const DT: f64 = 0.1;
pub const BLOB_SIGMA: f64 = 0.3;
pub const SUCCESS_RADIUS: f64 = 0.25;
pub const ACTION_WEIGHT: f64 = 0.001;
pub const LABELED_STEPS: usize = 5;
const CAR_MAX_SPEED: f64 = 2.0;
const CAR_NOSE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    NavRandomGoal,
    NavFixedGoal,
    Car,
}

impl EnvKind {
    fn code(self) -> u32 {
        match self {
            Self::NavRandomGoal => 0,
            Self::NavFixedGoal => 1,
            Self::Car => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Self::NavRandomGoal),
            1 => Ok(Self::NavFixedGoal),
            2 => Ok(Self::Car),
            _ => Err(SolarError::Parse(format!("unknown environment code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Image,
    State,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub horizon: usize,
    pub obs_mode: ObsMode,
    pub image_size: usize,
    pub action_bounds: Vec<(f64, f64)>,
    pub seed: u64,
    /// Goal for the fixed-goal and car tasks.
    #[serde(default)]
    pub goal: Option<[f64; 2]>,
    /// Overrides the sampled start position.
    #[serde(default)]
    pub start: Option<[f64; 2]>,
}

impl EnvConfig {
    pub fn nav_random_goal() -> Self {
        Self {
            kind: EnvKind::NavRandomGoal,
            horizon: 50,
            obs_mode: ObsMode::Image,
            image_size: 32,
            action_bounds: vec![(-2.0, 2.0); 2],
            seed: 0,
            goal: None,
            start: None,
        }
    }

    pub fn nav_fixed_goal() -> Self {
        Self { kind: EnvKind::NavFixedGoal, goal: Some([2.0, -2.0]), ..Self::nav_random_goal() }
    }

    pub fn car() -> Self {
        Self {
            kind: EnvKind::Car,
            horizon: 100,
            obs_mode: ObsMode::Image,
            image_size: 32,
            action_bounds: vec![(-2.0, 2.0), (-2.0, 2.0)],
            seed: 0,
            goal: Some([-2.0, 2.0]),
            start: Some([2.0, -2.0]),
        }
    }

    pub fn with_mode(mut self, mode: ObsMode) -> Self {
        self.obs_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(SolarError::Config(format!("horizon must be at least 2, got {}", self.horizon)));
        }
        if ![16, 32, 64].contains(&self.image_size) {
            return Err(SolarError::Config(format!("image size {} not in {{16, 32, 64}}", self.image_size)));
        }
        if self.action_bounds.len() != 2 {
            return Err(SolarError::Config("both tasks have two action dimensions".into()));
        }
        if self.action_bounds.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi) {
            return Err(SolarError::Config("action bounds must be finite intervals".into()));
        }
        for p in self.goal.iter().chain(self.start.iter()) {
            if p.iter().any(|v| !v.is_finite() || v.abs() > ARENA) {
                return Err(SolarError::Config("goal and start must lie inside the arena".into()));
            }
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    /// Dimension of the hidden simulator state.
    pub fn true_state_dim(&self) -> usize {
        match self.kind {
            EnvKind::Car => 4,
            _ => 2,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            EnvKind::NavRandomGoal => 2,
            _ => 1,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match (self.obs_mode, self.kind) {
            (ObsMode::Image, _) => self.channels() * self.image_size * self.image_size,
            (ObsMode::State, EnvKind::NavRandomGoal) => 4,
            (ObsMode::State, EnvKind::NavFixedGoal) => 2,
            (ObsMode::State, EnvKind::Car) => 4,
        }
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect()
    }
}

/// Hidden simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Nav: `(x, y)`. Car: `(x, y, θ, v)`.
    pub s: Vec<f64>,
    pub goal: [f64; 2],
    pub t: usize,
}

impl EnvState {
    pub fn position(&self) -> [f64; 2] {
        [self.s[0], self.s[1]]
    }

    pub fn distance_to_goal(&self) -> f64 {
        ((self.s[0] - self.goal[0]).powi(2) + (self.s[1] - self.goal[1]).powi(2)).sqrt()
    }
}

pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<(EnvState, Vec<f64>)> {
    cfg.validate()?;
    let uniform = |r: &mut R| [r.random_range(-SPAWN..=SPAWN), r.random_range(-SPAWN..=SPAWN)];
    let state = match cfg.kind {
        EnvKind::NavRandomGoal => {
            let start = uniform(rng);
            let goal = uniform(rng);
            EnvState { s: cfg.start.unwrap_or(start).to_vec(), goal: cfg.goal.unwrap_or(goal), t: 0 }
        }
        EnvKind::NavFixedGoal => {
            let start = uniform(rng);
            EnvState { s: cfg.start.unwrap_or(start).to_vec(), goal: cfg.goal.unwrap_or([2.0, -2.0]), t: 0 }
        }
        EnvKind::Car => {
            let [x, y] = cfg.start.unwrap_or([2.0, -2.0]);
            EnvState {
                s: vec![x, y, std::f64::consts::FRAC_PI_2, 0.0],
                goal: cfg.goal.unwrap_or([-2.0, 2.0]),
                t: 0,
            }
        }
    };
    let obs = observe(&state, cfg);
    Ok((state, obs))
}

/// `‖p − g‖² + 0.001 ‖a‖²` at the current state.
pub fn cost(state: &EnvState, action: &[f64]) -> f64 {
    let [x, y] = state.position();
    (x - state.goal[0]).powi(2) + (y - state.goal[1]).powi(2) + ACTION_WEIGHT * action.iter().map(|a| a * a).sum::<f64>()
}

/// Advances one step; the cost is charged at the pre-step state for the clipped action.
pub fn step(state: &EnvState, action: &[f64], cfg: &EnvConfig) -> Result<(EnvState, Vec<f64>, f64)> {
    if action.len() != cfg.action_dim() {
        return Err(SolarError::Dimension(format!("action has {} entries, expected {}", action.len(), cfg.action_dim())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(SolarError::NonFinite("action".into()));
    }
    let a = cfg.clip_action(action);
    let c = cost(state, &a);
    let mut next = state.clone();
    match cfg.kind {
        EnvKind::NavRandomGoal | EnvKind::NavFixedGoal => {
            for i in 0..2 {
                next.s[i] = (state.s[i] + DT * a[i]).clamp(-ARENA, ARENA);
            }
        }
        EnvKind::Car => {
            let (x, y, th, v) = (state.s[0], state.s[1], state.s[2], state.s[3]);
            next.s[0] = (x + DT * v * th.cos()).clamp(-ARENA, ARENA);
            next.s[1] = (y + DT * v * th.sin()).clamp(-ARENA, ARENA);
            next.s[2] = th + DT * a[1];
            next.s[3] = (v + DT * a[0]).clamp(-CAR_MAX_SPEED, CAR_MAX_SPEED);
        }
    }
    next.t += 1;
    let obs = observe(&next, cfg);
    Ok((next, obs, c))
}

fn observe(state: &EnvState, cfg: &EnvConfig) -> Vec<f64> {
    match cfg.obs_mode {
        ObsMode::Image => render(state, cfg),
        ObsMode::State => match cfg.kind {
            EnvKind::NavRandomGoal => vec![state.s[0], state.s[1], state.goal[0], state.goal[1]],
            EnvKind::NavFixedGoal => state.s.clone(),
            EnvKind::Car => state.s.clone(),
        },
    }
}

fn to_pixel(v: f64, size: usize) -> f64 {
    (v + ARENA) / (2.0 * ARENA) * size as f64
}

/// Gaussian blob normalised so its largest pixel equals `peak`.
fn blob(size: usize, x: f64, y: f64, peak: f64, out: &mut [f64]) {
    let px = to_pixel(x, size);
    // Rows run top to bottom, so larger y maps to a smaller row index.
    let py = to_pixel(-y, size);
    let sigma_px = BLOB_SIGMA / (2.0 * ARENA) * size as f64;
    let mut vals = vec![0.0; size * size];
    let mut max = 0.0f64;
    for row in 0..size {
        for col in 0..size {
            let d2 = (col as f64 - px).powi(2) + (row as f64 - py).powi(2);
            let v = (-0.5 * d2 / (sigma_px * sigma_px)).exp();
            vals[row * size + col] = v;
            max = max.max(v);
        }
    }
    for (o, v) in out.iter_mut().zip(vals) {
        let scaled = if max > 0.0 { peak * v / max } else { 0.0 };
        *o = o.max(scaled);
    }
}

/// Channel-major image with pixel values in `[0, 1]`.
pub fn render(state: &EnvState, cfg: &EnvConfig) -> Vec<f64> {
    let n = cfg.image_size;
    let mut img = vec![0.0; cfg.channels() * n * n];
    match cfg.kind {
        EnvKind::NavRandomGoal => {
            let (agent, goal) = img.split_at_mut(n * n);
            blob(n, state.s[0], state.s[1], 1.0, agent);
            blob(n, state.goal[0], state.goal[1], 1.0, goal);
        }
        EnvKind::NavFixedGoal => blob(n, state.s[0], state.s[1], 1.0, &mut img),
        EnvKind::Car => {
            let (x, y, th) = (state.s[0], state.s[1], state.s[2]);
            blob(n, state.goal[0], state.goal[1], 0.5, &mut img);
            blob(n, x, y, 1.0, &mut img);
            blob(n, x + CAR_NOSE * th.cos(), y + CAR_NOSE * th.sin(), 0.7, &mut img);
        }
    }
    img
}

/// One episode.  `true_states` has `T + 1` entries and is never given to the learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: EnvKind,
    pub seed: u64,
    pub goal: [f64; 2],
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub sparse_labels: Option<Vec<bool>>,
    pub true_states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn final_distance(&self) -> f64 {
        let s = self.true_states.last().expect("trajectory has a terminal state");
        ((s[0] - self.goal[0]).powi(2) + (s[1] - self.goal[1]).powi(2)).sqrt()
    }

    pub fn succeeded(&self) -> bool {
        self.final_distance() < SUCCESS_RADIUS
    }

    fn check(&self) -> Result<()> {
        let t = self.horizon();
        if self.actions.len() != t || self.costs.len() != t || self.true_states.len() != t + 1 {
            return Err(SolarError::Dimension("trajectory arrays are not aligned".into()));
        }
        if self.sparse_labels.as_ref().is_some_and(|l| l.len() != t) {
            return Err(SolarError::Dimension("label count differs from horizon".into()));
        }
        Ok(())
    }
}

/// Oracle labels: the last five steps are 1 iff the episode ends within the success radius.
pub fn sparse_label(traj: &Trajectory) -> Vec<bool> {
    let t = traj.horizon();
    let success = traj.succeeded();
    (0..t).map(|i| success && i + LABELED_STEPS >= t).collect()
}

const TRAJ_MAGIC: &[u8; 8] = b"SOLARTRJ";
pub const TRAJ_VERSION: u32 = 1;

impl Trajectory {
    /// Binary layout (little endian): magic `SOLARTRJ`, `u32` version, `u32` env kind,
    /// `u32` T, `u32` observation dim, `u32` action dim, `u32` state dim, `u64` seed,
    /// `u8` label flag, `2 × f32` goal, then `f32` arrays of observations (T × obs),
    /// actions (T × act), costs (T), labels (T, only when flagged) and true states
    /// ((T + 1) × state).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        self.check()?;
        let t = self.horizon();
        let obs_dim = self.observations.first().map_or(0, Vec::len);
        let act_dim = self.actions.first().map_or(0, Vec::len);
        let state_dim = self.true_states[0].len();
        w.write_all(TRAJ_MAGIC)?;
        for v in [TRAJ_VERSION, self.kind.code(), t as u32, obs_dim as u32, act_dim as u32, state_dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&[self.sparse_labels.is_some() as u8])?;
        let mut floats: Vec<f32> = self.goal.iter().map(|&g| g as f32).collect();
        floats.extend(self.observations.iter().flatten().map(|&v| v as f32));
        floats.extend(self.actions.iter().flatten().map(|&v| v as f32));
        floats.extend(self.costs.iter().map(|&v| v as f32));
        if let Some(l) = &self.sparse_labels {
            floats.extend(l.iter().map(|&b| b as u8 as f32));
        }
        floats.extend(self.true_states.iter().flatten().map(|&v| v as f32));
        let bytes: Vec<u8> = floats.iter().flat_map(|f| f.to_le_bytes()).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = crate::persist::ByteCursor::new(&buf);
        if cur.take(8)? != TRAJ_MAGIC {
            return Err(SolarError::Parse("not a trajectory file".into()));
        }
        let version = cur.u32()?;
        if version != TRAJ_VERSION {
            return Err(SolarError::VersionMismatch { found: version, expected: TRAJ_VERSION });
        }
        let kind = EnvKind::from_code(cur.u32()?)?;
        let t = cur.u32()? as usize;
        let obs_dim = cur.u32()? as usize;
        let act_dim = cur.u32()? as usize;
        let state_dim = cur.u32()? as usize;
        let seed = cur.u64()?;
        let labeled = cur.take(1)?[0] != 0;
        let mut floats = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| cur.f32().map(f64::from)).collect() };
        let goal = floats(2)?;
        let obs = floats(t * obs_dim)?;
        let act = floats(t * act_dim)?;
        let costs = floats(t)?;
        let labels = if labeled { Some(floats(t)?.into_iter().map(|v| v != 0.0).collect()) } else { None };
        let states = floats((t + 1) * state_dim)?;
        let chunk = |v: Vec<f64>, k: usize, rows: usize| -> Vec<Vec<f64>> {
            if k == 0 {
                vec![Vec::new(); rows]
            } else {
                v.chunks(k).map(<[f64]>::to_vec).collect()
            }
        };
        let traj = Self {
            kind,
            seed,
            goal: [goal[0], goal[1]],
            observations: chunk(obs, obs_dim, t),
            actions: chunk(act, act_dim, t),
            costs,
            sparse_labels: labels,
            true_states: chunk(states, state_dim, t + 1),
        };
        traj.check()?;
        Ok(traj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SolarError::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text).map_err(|e| SolarError::Parse(e.to_string()))?;
        t.check()?;
        Ok(t)
    }
}

/// Runs a full episode with an action callback that sees the step index and observation.
pub fn run_episode<R, F>(cfg: &EnvConfig, rng: &mut R, mut act: F) -> Result<Trajectory>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64], &mut R) -> Result<Vec<f64>>,
{
    let (mut state, mut obs) = reset(cfg, rng)?;
    let mut traj = Trajectory {
        kind: cfg.kind,
        seed: cfg.seed,
        goal: state.goal,
        observations: Vec::with_capacity(cfg.horizon),
        actions: Vec::with_capacity(cfg.horizon),
        costs: Vec::with_capacity(cfg.horizon),
        sparse_labels: None,
        true_states: vec![state.s.clone()],
    };
    for t in 0..cfg.horizon {
        let a = cfg.clip_action(&act(t, &obs, rng)?);
        let (next, next_obs, c) = step(&state, &a, cfg)?;
        traj.observations.push(std::mem::replace(&mut obs, next_obs));
        traj.actions.push(a);
        traj.costs.push(c);
        traj.true_states.push(next.s.clone());
        state = next;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at(x: f64, y: f64, goal: [f64; 2]) -> EnvState {
        EnvState { s: vec![x, y], goal, t: 0 }
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::nav_random_goal();
        let a = reset(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = reset(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_goals_are_uniform() {
        let cfg = EnvConfig::nav_random_goal().with_mode(ObsMode::State);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for _ in 0..10_000 {
            let (s, _) = reset(&cfg, &mut rng).unwrap();
            xs.push(s.goal[0]);
            ys.push(s.goal[1]);
        }
        for v in [&mut xs, &mut ys] {
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let ks = v
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let cdf = (x + SPAWN) / (2.0 * SPAWN);
                    (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.02, "KS {ks}");
        }
    }

    #[test]
    fn fixed_goal_never_moves() {
        let cfg = EnvConfig::nav_fixed_goal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let goals: Vec<_> = (0..100).map(|_| reset(&cfg, &mut rng).unwrap().0.goal).collect();
        assert!(goals.iter().all(|g| *g == [2.0, -2.0]));
    }

    #[test]
    fn cost_examples() {
        let cfg = EnvConfig::nav_fixed_goal().with_mode(ObsMode::State);
        let g = [1.0, 1.0];
        assert_eq!(step(&at(1.0, 1.0, g), &[0.0, 0.0], &cfg).unwrap().2, 0.0);
        assert_eq!(step(&at(1.0, 0.0, g), &[0.0, 0.0], &cfg).unwrap().2, 1.0);
        assert!((step(&at(1.0, 1.0, g), &[0.6, 0.8], &cfg).unwrap().2 - 0.001).abs() < 1e-15);
    }

    #[test]
    fn nan_action_is_rejected() {
        let cfg = EnvConfig::nav_fixed_goal();
        assert!(matches!(step(&at(0.0, 0.0, [0.0, 0.0]), &[f64::NAN, 0.0], &cfg), Err(SolarError::NonFinite(_))));
    }

    #[test]
    fn walls_clip_position() {
        let cfg = EnvConfig::nav_fixed_goal().with_mode(ObsMode::State);
        let (s, _, _) = step(&at(2.95, -2.95, [0.0, 0.0]), &[2.0, -2.0], &cfg).unwrap();
        assert_eq!(s.s, vec![3.0, -3.0]);
    }

    #[test]
    fn blob_is_centred_and_clipped() {
        let cfg = EnvConfig::nav_random_goal();
        let img = render(&at(0.0, 0.0, [2.0, 2.0]), &cfg);
        let n = 32;
        let (idx, max) = img[..n * n].iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert_eq!(max, 1.0);
        assert_eq!((idx / n, idx % n), (16, 16));
        let corner = render(&at(3.0, 3.0, [0.0, 0.0]), &cfg);
        assert_eq!(corner[..n * n].iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(corner.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn goal_only_changes_the_goal_channel() {
        let cfg = EnvConfig::nav_random_goal();
        let a = render(&at(0.5, -1.0, [1.0, 1.0]), &cfg);
        let b = render(&at(0.5, -1.0, [-2.0, 0.0]), &cfg);
        let n = 32 * 32;
        assert_eq!(a[..n], b[..n]);
        assert_ne!(a[n..], b[n..]);
    }

    fn straight_episode(cfg: &EnvConfig, toward_goal: bool) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let goal = cfg.goal.unwrap();
        let mut pos = cfg.start.unwrap();
        run_episode(cfg, &mut rng, |_, _, _| {
            let a = if toward_goal {
                vec![((goal[0] - pos[0]) / DT).clamp(-2.0, 2.0), ((goal[1] - pos[1]) / DT).clamp(-2.0, 2.0)]
            } else {
                vec![-2.0, 2.0]
            };
            pos = [pos[0] + DT * a[0], pos[1] + DT * a[1]];
            Ok(a)
        })
        .unwrap()
    }

    #[test]
    fn oracle_labels() {
        let mut cfg = EnvConfig::nav_fixed_goal().with_mode(ObsMode::State);
        cfg.start = Some([0.0, 0.0]);
        let good = straight_episode(&cfg, true);
        let labels = sparse_label(&good);
        assert!(labels[..45].iter().all(|l| !l) && labels[45..].iter().all(|&l| l));
        let bad = straight_episode(&cfg, false);
        assert!(sparse_label(&bad).iter().all(|l| !l));
        cfg.horizon = 5;
        cfg.start = Some([1.9, -1.9]);
        assert!(sparse_label(&straight_episode(&cfg, true)).iter().all(|&l| l));
    }

    #[test]
    fn binary_and_json_round_trip() {
        let mut cfg = EnvConfig::nav_random_goal();
        cfg.image_size = 16;
        cfg.horizon = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut traj = run_episode(&cfg, &mut rng, |_, _, r| Ok(vec![r.random_range(-1.0..1.0), 0.5])).unwrap();
        traj.sparse_labels = Some(sparse_label(&traj));
        let mut bytes = Vec::new();
        traj.write_binary(&mut bytes).unwrap();
        let back = Trajectory::read_binary(&bytes[..]).unwrap();
        assert_eq!(back.horizon(), 4);
        for (a, b) in traj.observations.iter().flatten().zip(back.observations.iter().flatten()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(back.sparse_labels, traj.sparse_labels);
        assert!(Trajectory::read_binary(&bytes[..bytes.len() - 3]).is_err());
        let json = traj.to_json().unwrap();
        assert_eq!(Trajectory::from_json(&json).unwrap(), traj);
    }

    #[test]
    fn same_seed_same_episode() {
        let cfg = EnvConfig::car();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            run_episode(&cfg, &mut rng, |_, _, r| Ok(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])).unwrap()
        };
        assert_eq!(run(), run());
    }
}
