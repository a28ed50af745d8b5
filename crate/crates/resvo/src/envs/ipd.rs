//! Iterated prisoner's dilemma: two agents, cooperate/defect, observations
//! are the previous round's joint action.

use super::{validate_joint_action, EnvCounters, EnvError, Environment, Frame, StepOutcome};
use crate::core::{Observation, RngStream};

pub const COOPERATE: usize = 0;
pub const DEFECT: usize = 1;

/// Payoff table indexed by `[a1][a2]`, giving `(r1, r2)`.
pub const IPD_PAYOFFS: [[(f64, f64); 2]; 2] = [
    [(-1.0, -1.0), (-3.0, 0.0)],
    [(0.0, -3.0), (-2.0, -2.0)],
];

/// Observation index 0 is the round-0 start marker; index `1 + 2*a1 + a2`
/// encodes the previous joint action.
const NUM_OBS_STATES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IpdState {
    Start,
    AfterJoint(usize, usize),
}

#[derive(Debug)]
pub struct IpdEnv {
    horizon: usize,
    state: IpdState,
    t: usize,
    done: bool,
}

impl IpdEnv {
    pub fn new(horizon: usize) -> Self {
        IpdEnv { horizon, state: IpdState::Start, t: 0, done: false }
    }

    pub fn state(&self) -> &IpdState {
        &self.state
    }

    fn obs_index(&self) -> usize {
        match self.state {
            IpdState::Start => 0,
            IpdState::AfterJoint(a1, a2) => 1 + 2 * a1 + a2,
        }
    }

    fn observations(&self) -> Vec<Observation> {
        let idx = self.obs_index();
        let mut features = vec![0.0; NUM_OBS_STATES];
        features[idx] = 1.0;
        // Both agents observe the same joint action.
        vec![Observation::indexed(features.clone(), idx), Observation::indexed(features, idx)]
    }
}

impl Environment for IpdEnv {
    fn num_agents(&self) -> usize {
        2
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        NUM_OBS_STATES
    }

    fn num_obs_states(&self) -> Option<usize> {
        Some(NUM_OBS_STATES)
    }

    fn reset(&mut self, _rng: &mut RngStream) -> Vec<Observation> {
        self.state = IpdState::Start;
        self.t = 0;
        self.done = false;
        self.observations()
    }

    fn step(
        &mut self,
        joint_action: &[usize],
        _rng: &mut RngStream,
    ) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        validate_joint_action(joint_action, 2, 2)?;
        let (a1, a2) = (joint_action[0], joint_action[1]);
        let (r1, r2) = IPD_PAYOFFS[a1][a2];
        self.state = IpdState::AfterJoint(a1, a2);
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepOutcome {
            observations: self.observations(),
            rewards: vec![r1, r2],
            done: self.done,
        })
    }

    fn render(&self) -> Frame {
        let mut frame = Frame::new(2, 1);
        let colors = match self.state {
            IpdState::Start => [[128, 128, 128]; 2],
            IpdState::AfterJoint(a1, a2) => {
                let paint = |a: usize| if a == COOPERATE { [0, 200, 0] } else { [200, 0, 0] };
                [paint(a1), paint(a2)]
            }
        };
        frame.set(0, 0, colors[0]);
        frame.set(1, 0, colors[1]);
        frame
    }

    fn counters(&self) -> EnvCounters {
        EnvCounters::zeros(2)
    }

    fn is_done(&self) -> bool {
        self.done
    }
}
