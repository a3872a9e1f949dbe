//! MicroFlow dynamics.
//!
//! Road capacity oscillates with a 250-step period:
//! `c(t) = 0.55 + 0.35 sin(2π (t + offset) / 250)`. Each step the agent
//! slows down, holds, or speeds up (±0.08 plus uniform noise in ±0.01).
//! If the new speed exceeds capacity the road jams: speed drops to
//! `0.3 c` and stays frozen for 10 steps, ignoring actions. The reward is
//! the new speed minus 0.1 whenever the last four actions are identical.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PERIOD: f64 = 250.0;
pub const WINDOW: usize = 8;
pub const TRAFFIC_FEATURES: usize = 6;
pub const SPEED_STEP: f64 = 0.08;
pub const SPEED_NOISE: f64 = 0.01;
pub const JAM_FACTOR: f64 = 0.3;
pub const JAM_STEPS: u32 = 10;
pub const REPEAT_RUN: usize = 4;
pub const REPEAT_PENALTY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Slow,
    Hold,
    Fast,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Slow, Action::Hold, Action::Fast];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    fn delta(self) -> f64 {
        match self {
            Action::Slow => -SPEED_STEP,
            Action::Hold => 0.0,
            Action::Fast => SPEED_STEP,
        }
    }
}

/// Latent state exposed for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub speed: f64,
    /// Congestion phase in radians, in `[0, 2π)`.
    pub phase: f64,
    pub step: u64,
    pub jam: u32,
}

/// The three observation sources, each flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `WINDOW x 3`: speed, density, flow; oldest row first.
    pub time_series: Vec<f64>,
    /// speed, density, headroom, jam fraction, sin phase, cos phase.
    pub traffic_vector: Vec<f64>,
    /// `WINDOW x 3` one-hot actions, oldest first; zero rows before the
    /// first action.
    pub action_sequence: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MicroFlow {
    rng: ChaCha8Rng,
    offset: f64,
    step: u64,
    speed: f64,
    jam: u32,
    readings: VecDeque<[f64; 3]>,
    actions: VecDeque<Action>,
}

impl MicroFlow {
    pub fn reset(seed: u64) -> (MicroFlow, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset = rng.random_range(0.0..PERIOD);
        let mut env = MicroFlow {
            rng,
            offset,
            step: 0,
            speed: 0.0,
            jam: 0,
            readings: VecDeque::with_capacity(WINDOW),
            actions: VecDeque::with_capacity(WINDOW),
        };
        env.speed = 0.5 * env.capacity();
        let row = env.reading();
        env.readings.extend(std::iter::repeat_n(row, WINDOW));
        let obs = env.observe();
        (env, obs)
    }

    pub fn phase(&self) -> f64 {
        (TAU * (self.step as f64 + self.offset) / PERIOD).rem_euclid(TAU)
    }

    pub fn capacity(&self) -> f64 {
        0.55 + 0.35 * self.phase().sin()
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn state(&self) -> EnvState {
        EnvState {
            speed: self.speed,
            phase: self.phase(),
            step: self.step,
            jam: self.jam,
        }
    }

    pub fn recent_actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.actions.iter().copied()
    }

    /// True when the last `REPEAT_RUN` actions are identical.
    pub fn repeat_penalty_active(&self) -> bool {
        self.actions.len() >= REPEAT_RUN && {
            let last = self.actions[self.actions.len() - 1];
            self.actions
                .iter()
                .rev()
                .take(REPEAT_RUN)
                .all(|&a| a == last)
        }
    }

    pub fn step(&mut self, action: Action) -> (Observation, f64) {
        let noise = self.rng.random_range(-SPEED_NOISE..SPEED_NOISE);
        self.step += 1;
        let c = self.capacity();
        if self.jam > 0 {
            self.jam -= 1;
        } else {
            self.speed = (self.speed + action.delta() + noise).clamp(0.0, 1.0);
        }
        if self.speed > c {
            self.speed = JAM_FACTOR * c;
            self.jam = JAM_STEPS;
        }
        if self.actions.len() == WINDOW {
            self.actions.pop_front();
        }
        self.actions.push_back(action);
        if self.readings.len() == WINDOW {
            self.readings.pop_front();
        }
        self.readings.push_back(self.reading());
        let penalty = if self.repeat_penalty_active() {
            REPEAT_PENALTY
        } else {
            0.0
        };
        (self.observe(), self.speed - penalty)
    }

    fn reading(&self) -> [f64; 3] {
        let c = self.capacity();
        [self.speed, 1.0 - c, self.speed * c]
    }

    fn observe(&self) -> Observation {
        let c = self.capacity();
        let phase = self.phase();
        let time_series = self.readings.iter().flatten().copied().collect();
        let traffic_vector = vec![
            self.speed,
            1.0 - c,
            c - self.speed,
            self.jam as f64 / JAM_STEPS as f64,
            phase.sin(),
            phase.cos(),
        ];
        let mut action_sequence = vec![0.0; WINDOW * 3];
        let pad = WINDOW - self.actions.len();
        for (i, a) in self.actions.iter().enumerate() {
            action_sequence[(pad + i) * 3 + a.index()] = 1.0;
        }
        Observation {
            time_series,
            traffic_vector,
            action_sequence,
        }
    }
}

/// Hand-coded reference: accelerate with headroom, brake close to capacity,
/// otherwise hold, and never extend a run that would trigger the penalty.
pub fn oracle_action(env: &MicroFlow) -> Action {
    let headroom = env.capacity() - env.speed();
    let preferred = if headroom > 0.1 {
        Action::Fast
    } else if headroom < 0.03 {
        Action::Slow
    } else {
        Action::Hold
    };
    let recent: Vec<Action> = env.recent_actions().collect();
    let n = recent.len();
    let would_repeat = n >= REPEAT_RUN - 1
        && recent[n - (REPEAT_RUN - 1)..]
            .iter()
            .all(|&a| a == preferred);
    if !would_repeat {
        return preferred;
    }
    match preferred {
        Action::Fast | Action::Slow => Action::Hold,
        Action::Hold if headroom > 0.065 => Action::Fast,
        Action::Hold => Action::Slow,
    }
}
