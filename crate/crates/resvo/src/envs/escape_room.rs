//! N-player escape room: positions {start, lever, door}, a door exit pays
//! +10 but only when enough *other* agents hold the lever, and every position
//! change costs 1.

use super::{validate_joint_action, EnvCounters, EnvError, Environment, Frame, StepOutcome};
use crate::core::{Observation, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Start = 0,
    Lever = 1,
    Door = 2,
}

impl Position {
    fn from_action(a: usize) -> Position {
        match a {
            0 => Position::Start,
            1 => Position::Lever,
            _ => Position::Door,
        }
    }
}

pub const EXIT_REWARD: f64 = 10.0;
pub const MOVE_COST: f64 = -1.0;

#[derive(Debug)]
pub struct EscapeRoomEnv {
    num_agents: usize,
    required_pullers: usize,
    horizon: usize,
    positions: Vec<Position>,
    t: usize,
    done: bool,
    counters: EnvCounters,
}

impl EscapeRoomEnv {
    pub fn new(num_agents: usize, required_pullers: usize, horizon: usize) -> Self {
        EscapeRoomEnv {
            num_agents,
            required_pullers,
            horizon,
            positions: vec![Position::Start; num_agents],
            t: 0,
            done: false,
            counters: EnvCounters::zeros(num_agents),
        }
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    fn observations(&self) -> Vec<Observation> {
        (0..self.num_agents)
            .map(|agent| {
                // Own position first, then the others in id order.
                let mut features = vec![0.0; 3 * self.num_agents];
                features[self.positions[agent] as usize] = 1.0;
                let mut slot = 1;
                let mut index = self.positions[agent] as usize;
                for other in (0..self.num_agents).filter(|&o| o != agent) {
                    features[3 * slot + self.positions[other] as usize] = 1.0;
                    index = index * 3 + self.positions[other] as usize;
                    slot += 1;
                }
                Observation::indexed(features, index)
            })
            .collect()
    }
}

impl Environment for EscapeRoomEnv {
    fn num_agents(&self) -> usize {
        self.num_agents
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        3 * self.num_agents
    }

    fn num_obs_states(&self) -> Option<usize> {
        Some(3usize.pow(self.num_agents as u32))
    }

    fn reset(&mut self, _rng: &mut RngStream) -> Vec<Observation> {
        self.positions = vec![Position::Start; self.num_agents];
        self.t = 0;
        self.done = false;
        self.counters = EnvCounters::zeros(self.num_agents);
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
        validate_joint_action(joint_action, self.num_agents, 3)?;

        let targets: Vec<Position> =
            joint_action.iter().map(|&a| Position::from_action(a)).collect();
        let mut rewards = vec![0.0; self.num_agents];
        for (i, (&old, &new)) in self.positions.iter().zip(&targets).enumerate() {
            if old != new {
                rewards[i] += MOVE_COST;
            }
        }
        self.positions = targets;

        let pullers: Vec<usize> = (0..self.num_agents)
            .filter(|&i| self.positions[i] == Position::Lever)
            .collect();
        for &i in &pullers {
            self.counters.levers_pulled[i] += 1.0;
        }

        let mut exited = false;
        for i in 0..self.num_agents {
            if self.positions[i] != Position::Door {
                continue;
            }
            let others_on_lever = pullers.iter().filter(|&&p| p != i).count();
            if others_on_lever >= self.required_pullers {
                rewards[i] += EXIT_REWARD;
                self.counters.door_exits[i] += 1.0;
                exited = true;
            }
        }

        self.t += 1;
        self.done = exited || self.t >= self.horizon;
        Ok(StepOutcome { observations: self.observations(), rewards, done: self.done })
    }

    fn render(&self) -> Frame {
        let mut frame = Frame::new(self.num_agents, 1);
        for (i, p) in self.positions.iter().enumerate() {
            let color = match p {
                Position::Start => [128, 128, 128],
                Position::Lever => [230, 200, 0],
                Position::Door => [0, 200, 0],
            };
            frame.set(i, 0, color);
        }
        frame
    }

    fn counters(&self) -> EnvCounters {
        self.counters.clone()
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> RngStream {
        RngStream::new(0, "er-test")
    }

    #[test]
    fn reset_puts_everyone_at_start() {
        let mut env = EscapeRoomEnv::new(3, 2, 5);
        env.reset(&mut rng());
        assert_eq!(env.positions(), &[Position::Start; 3]);
    }

    #[test]
    fn coordinated_exit_pays_and_ends() {
        let mut env = EscapeRoomEnv::new(3, 2, 5);
        env.reset(&mut rng());
        // Agent 0 to the door, agents 1 and 2 to the lever: each move costs 1,
        // the exit pays 10.
        let out = env.step(&[2, 1, 1], &mut rng()).unwrap();
        assert_eq!(out.rewards, vec![9.0, -1.0, -1.0]);
        assert!(out.done);
        assert_eq!(env.counters().door_exits, vec![1.0, 0.0, 0.0]);
        assert_eq!(env.counters().levers_pulled, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn door_without_enough_pullers_gets_no_bonus() {
        let mut env = EscapeRoomEnv::new(3, 2, 5);
        env.reset(&mut rng());
        let out = env.step(&[2, 1, 0], &mut rng()).unwrap();
        assert_eq!(out.rewards, vec![-1.0, -1.0, 0.0]);
        assert!(!out.done);
    }

    #[test]
    fn a_puller_does_not_count_for_its_own_door() {
        // The agent standing on the door is not among the "other" pullers.
        let mut env = EscapeRoomEnv::new(3, 2, 5);
        env.reset(&mut rng());
        let out = env.step(&[2, 2, 1], &mut rng()).unwrap();
        // Each door agent sees only one other on the lever.
        assert_eq!(out.rewards, vec![-1.0, -1.0, -1.0]);
        assert!(!out.done);
    }

    #[test]
    fn staying_in_place_is_free() {
        let mut env = EscapeRoomEnv::new(3, 2, 4);
        env.reset(&mut rng());
        let out = env.step(&[0, 0, 0], &mut rng()).unwrap();
        assert_eq!(out.rewards, vec![0.0, 0.0, 0.0]);
        // Moving back to lever then staying on it: second step costs nothing.
        env.step(&[1, 0, 0], &mut rng()).unwrap();
        let out = env.step(&[1, 0, 0], &mut rng()).unwrap();
        assert_eq!(out.rewards[0], 0.0);
    }

    #[test]
    fn observations_order_self_first() {
        let mut env = EscapeRoomEnv::new(3, 2, 5);
        env.reset(&mut rng());
        let out = env.step(&[2, 1, 0], &mut rng()).unwrap();
        let obs1 = &out.observations[1];
        // Agent 1 is on the lever.
        assert_eq!(obs1.features[..3], [0.0, 1.0, 0.0]);
        // Then agent 0 (door), then agent 2 (start).
        assert_eq!(obs1.features[3..6], [0.0, 0.0, 1.0]);
        assert_eq!(obs1.features[6..9], [1.0, 0.0, 0.0]);
        assert_eq!(obs1.index, Some((1 * 3 + 2) * 3 + 0));
    }

    #[test]
    fn horizon_ends_episode() {
        let mut env = EscapeRoomEnv::new(3, 2, 2);
        env.reset(&mut rng());
        assert!(!env.step(&[0, 0, 0], &mut rng()).unwrap().done);
        assert!(env.step(&[0, 0, 0], &mut rng()).unwrap().done);
        assert!(env.step(&[0, 0, 0], &mut rng()).is_err());
    }
}
