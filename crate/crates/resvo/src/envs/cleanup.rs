//! Cleanup gridworld: apples spawn in an orchard while the river is clean
//! enough; cleaning the river is unpaid work, so picking apples free-rides on
//! whoever cleans.

use super::{validate_joint_action, EnvCounters, EnvError, Environment, Frame, StepOutcome};
use crate::core::{GridShape, Observation, RngStream};
use crate::envs::EnvConfig;

/// Static role of a map cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Plain,
    River,
    AppleField,
}

/// Parsed map: `.` plain, `R` river, `A` apple field, `S` agent spawn.
#[derive(Debug, Clone)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub regions: Vec<Region>,
    pub spawns: Vec<(usize, usize)>,
}

pub fn parse_layout(text: &str) -> Result<Layout, EnvError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(EnvError::BadLayout("empty layout".into()));
    }
    let cols = lines[0].chars().count();
    let rows = lines.len();
    let mut regions = Vec::with_capacity(rows * cols);
    let mut spawns = Vec::new();
    for (r, line) in lines.iter().enumerate() {
        if line.chars().count() != cols {
            return Err(EnvError::BadLayout(format!("row {r} has ragged width")));
        }
        for (c, ch) in line.chars().enumerate() {
            regions.push(match ch {
                '.' => Region::Plain,
                'R' => Region::River,
                'A' => Region::AppleField,
                'S' => {
                    spawns.push((r, c));
                    Region::Plain
                }
                other => {
                    return Err(EnvError::BadLayout(format!(
                        "unknown cell '{other}' at row {r} col {c}"
                    )))
                }
            });
        }
    }
    if !regions.contains(&Region::River) {
        return Err(EnvError::BadLayout("layout has no river cells".into()));
    }
    Ok(Layout { rows, cols, regions, spawns })
}

pub const SMALL_LAYOUT: &str = "\
RRRRRRRRRR
..........
.S......S.
..........
AAAAAAAAAA
AAAAAAAAAA
AAAAAAAAAA
AAAAAAAAAA
AAAAAAAAAA
AAAAAAAAAA
";

pub const BIG_LAYOUT: &str = "\
RRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRR
RRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRRR
................................................
..S...S...S...S...S....S...S...S...S...S........
................................................
................................................
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA
";

/// Probability per vacant orchard cell per step that an apple appears:
/// a linear ramp from the full respawn probability at the restoration
/// threshold down to zero at the depletion threshold.
pub fn apple_spawn_rate(waste_fraction: f64, config: &EnvConfig) -> f64 {
    let span = config.depletion_threshold - config.restoration_threshold;
    let ramp = (config.depletion_threshold - waste_fraction) / span;
    config.apple_respawn_prob * ramp.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facing {
    Up,
    Down,
    Left,
    Right,
}

impl Facing {
    fn delta(self) -> (isize, isize) {
        match self {
            Facing::Up => (-1, 0),
            Facing::Down => (1, 0),
            Facing::Left => (0, -1),
            Facing::Right => (0, 1),
        }
    }

    fn index(self) -> usize {
        match self {
            Facing::Up => 0,
            Facing::Down => 1,
            Facing::Left => 2,
            Facing::Right => 3,
        }
    }
}

pub const ACT_UP: usize = 0;
pub const ACT_DOWN: usize = 1;
pub const ACT_LEFT: usize = 2;
pub const ACT_RIGHT: usize = 3;
pub const ACT_STAY: usize = 4;
pub const ACT_FIRE_CLEAN: usize = 5;
const NUM_ACTIONS: usize = 6;

/// Observation planes, channel-major in the feature vector.
const PLANE_APPLE: usize = 0;
const PLANE_WASTE: usize = 1;
const PLANE_RIVER: usize = 2;
const PLANE_AGENT: usize = 3;
const PLANE_OOB: usize = 4;
const NUM_PLANES: usize = 5;

#[derive(Debug, Clone)]
pub struct CleanupState {
    pub waste: Vec<bool>,
    pub apples: Vec<bool>,
    pub agent_positions: Vec<(usize, usize)>,
    pub facings: Vec<Facing>,
    pub t: usize,
}

#[derive(Debug)]
pub struct CleanupEnv {
    config: EnvConfig,
    layout: Layout,
    state: CleanupState,
    river_cells: Vec<usize>,
    apple_cells: Vec<usize>,
    done: bool,
    counters: EnvCounters,
}

impl CleanupEnv {
    pub fn new(config: &EnvConfig) -> Result<Self, EnvError> {
        let text = match &config.cleanup_layout {
            Some(custom) => custom.clone(),
            None => match config.cleanup_map {
                super::CleanupMap::Small => SMALL_LAYOUT.to_string(),
                super::CleanupMap::Big => BIG_LAYOUT.to_string(),
            },
        };
        let layout = parse_layout(&text)?;
        if layout.spawns.len() < config.num_agents {
            return Err(EnvError::BadConfig(format!(
                "layout has {} spawn cells for {} agents",
                layout.spawns.len(),
                config.num_agents
            )));
        }
        let river_cells: Vec<usize> = (0..layout.regions.len())
            .filter(|&i| layout.regions[i] == Region::River)
            .collect();
        let apple_cells: Vec<usize> = (0..layout.regions.len())
            .filter(|&i| layout.regions[i] == Region::AppleField)
            .collect();
        let cells = layout.regions.len();
        let n = config.num_agents;
        Ok(CleanupEnv {
            config: config.clone(),
            layout,
            state: CleanupState {
                waste: vec![false; cells],
                apples: vec![false; cells],
                agent_positions: Vec::new(),
                facings: vec![Facing::Up; n],
                t: 0,
            },
            river_cells,
            apple_cells,
            done: true,
            counters: EnvCounters::zeros(n),
        })
    }

    pub fn state(&self) -> &CleanupState {
        &self.state
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn cell(&self, r: usize, c: usize) -> usize {
        r * self.layout.cols + c
    }

    pub fn waste_fraction(&self) -> f64 {
        let count = self.river_cells.iter().filter(|&&i| self.state.waste[i]).count();
        count as f64 / self.river_cells.len() as f64
    }

    fn walkable(&self, r: isize, c: isize) -> bool {
        if r < 0 || c < 0 || r as usize >= self.layout.rows || c as usize >= self.layout.cols {
            return false;
        }
        self.layout.regions[self.cell(r as usize, c as usize)] != Region::River
    }

    fn occupied(&self, pos: (usize, usize)) -> bool {
        self.state.agent_positions.contains(&pos)
    }

    fn observations(&self) -> Vec<Observation> {
        let view = self.config.view_size;
        let half = (view / 2) as isize;
        (0..self.config.num_agents)
            .map(|agent| {
                let (ar, ac) = self.state.agent_positions[agent];
                let mut features = vec![0.0; NUM_PLANES * view * view + 4];
                for dr in -half..=half {
                    for dc in -half..=half {
                        let vr = (dr + half) as usize;
                        let vc = (dc + half) as usize;
                        let within = vr * view + vc;
                        let r = ar as isize + dr;
                        let c = ac as isize + dc;
                        let out_of_bounds = r < 0
                            || c < 0
                            || r as usize >= self.layout.rows
                            || c as usize >= self.layout.cols;
                        if out_of_bounds {
                            features[PLANE_OOB * view * view + within] = 1.0;
                            continue;
                        }
                        let idx = self.cell(r as usize, c as usize);
                        if self.state.apples[idx] {
                            features[PLANE_APPLE * view * view + within] = 1.0;
                        }
                        if self.state.waste[idx] {
                            features[PLANE_WASTE * view * view + within] = 1.0;
                        }
                        if self.layout.regions[idx] == Region::River {
                            features[PLANE_RIVER * view * view + within] = 1.0;
                        }
                        let pos = (r as usize, c as usize);
                        if pos != (ar, ac) && self.occupied(pos) {
                            features[PLANE_AGENT * view * view + within] = 1.0;
                        }
                    }
                }
                features[NUM_PLANES * view * view + self.state.facings[agent].index()] = 1.0;
                Observation::grid(
                    features,
                    GridShape { channels: NUM_PLANES, height: view, width: view },
                )
            })
            .collect()
    }
}

impl Environment for CleanupEnv {
    fn num_agents(&self) -> usize {
        self.config.num_agents
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn obs_dim(&self) -> usize {
        NUM_PLANES * self.config.view_size * self.config.view_size + 4
    }

    fn grid_shape(&self) -> Option<GridShape> {
        Some(GridShape {
            channels: NUM_PLANES,
            height: self.config.view_size,
            width: self.config.view_size,
        })
    }

    fn reset(&mut self, _rng: &mut RngStream) -> Vec<Observation> {
        // Waste fills the whole river so every episode starts above the
        // depletion threshold with no apple anywhere.
        for w in self.state.waste.iter_mut() {
            *w = false;
        }
        for &i in &self.river_cells {
            self.state.waste[i] = true;
        }
        for a in self.state.apples.iter_mut() {
            *a = false;
        }
        self.state.agent_positions =
            self.layout.spawns[..self.config.num_agents].to_vec();
        self.state.facings = vec![Facing::Up; self.config.num_agents];
        self.state.t = 0;
        self.done = false;
        self.counters = EnvCounters::zeros(self.config.num_agents);
        self.observations()
    }

    fn step(
        &mut self,
        joint_action: &[usize],
        rng: &mut RngStream,
    ) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        validate_joint_action(joint_action, self.config.num_agents, NUM_ACTIONS)?;

        let n = self.config.num_agents;
        let mut rewards = vec![0.0; n];

        // Movement in agent-id order; stepping into an occupied cell is a no-op.
        for agent in 0..n {
            let facing = match joint_action[agent] {
                ACT_UP => Some(Facing::Up),
                ACT_DOWN => Some(Facing::Down),
                ACT_LEFT => Some(Facing::Left),
                ACT_RIGHT => Some(Facing::Right),
                _ => None,
            };
            let Some(facing) = facing else { continue };
            self.state.facings[agent] = facing;
            let (dr, dc) = facing.delta();
            let (r, c) = self.state.agent_positions[agent];
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if self.walkable(nr, nc) && !self.occupied((nr as usize, nc as usize)) {
                self.state.agent_positions[agent] = (nr as usize, nc as usize);
            }
        }

        // Cleaning beams hit the cell directly ahead.
        for agent in 0..n {
            if joint_action[agent] != ACT_FIRE_CLEAN {
                continue;
            }
            let (dr, dc) = self.state.facings[agent].delta();
            let (r, c) = self.state.agent_positions[agent];
            let (tr, tc) = (r as isize + dr, c as isize + dc);
            if tr < 0 || tc < 0 || tr as usize >= self.layout.rows || tc as usize >= self.layout.cols
            {
                continue;
            }
            let idx = self.cell(tr as usize, tc as usize);
            if self.state.waste[idx] {
                self.state.waste[idx] = false;
                self.counters.waste_cleaned[agent] += 1.0;
            }
        }

        // Apple pickup on the cell an agent stands on.
        for agent in 0..n {
            let (r, c) = self.state.agent_positions[agent];
            let idx = self.cell(r, c);
            if self.state.apples[idx] {
                self.state.apples[idx] = false;
                rewards[agent] += self.config.apple_reward;
                self.counters.apples_collected[agent] += 1.0;
            }
        }

        // Regrowth. At most one waste cell returns per step, and only while
        // the river is below the depletion threshold; apples spawn per vacant
        // orchard cell at the linearly decaying rate.
        let fraction = self.waste_fraction();
        if fraction < self.config.depletion_threshold
            && rng.gen_f64() < self.config.waste_spawn_prob
        {
            let vacant: Vec<usize> = self
                .river_cells
                .iter()
                .copied()
                .filter(|&i| !self.state.waste[i])
                .collect();
            if !vacant.is_empty() {
                let pick = vacant[rng.gen_index(vacant.len())];
                self.state.waste[pick] = true;
            }
        }
        let rate = apple_spawn_rate(self.waste_fraction(), &self.config);
        if rate > 0.0 {
            for &idx in &self.apple_cells {
                let pos = (idx / self.layout.cols, idx % self.layout.cols);
                if !self.state.apples[idx] && !self.occupied(pos) && rng.gen_f64() < rate {
                    self.state.apples[idx] = true;
                }
            }
        }

        self.state.t += 1;
        self.done = self.state.t >= self.config.horizon;
        Ok(StepOutcome { observations: self.observations(), rewards, done: self.done })
    }

    fn render(&self) -> Frame {
        let mut frame = Frame::new(self.layout.cols, self.layout.rows);
        for r in 0..self.layout.rows {
            for c in 0..self.layout.cols {
                let idx = self.cell(r, c);
                let color = if self.state.waste[idx] {
                    [139, 69, 19]
                } else if self.state.apples[idx] {
                    [0, 255, 0]
                } else {
                    match self.layout.regions[idx] {
                        Region::River => [0, 90, 255],
                        Region::AppleField => [210, 230, 200],
                        Region::Plain => [230, 230, 230],
                    }
                };
                frame.set(c, r, color);
            }
        }
        const AGENT_HUES: [[u8; 3]; 10] = [
            [255, 0, 0],
            [255, 0, 255],
            [0, 200, 200],
            [255, 128, 0],
            [128, 0, 255],
            [255, 255, 0],
            [0, 0, 0],
            [0, 128, 0],
            [128, 64, 0],
            [255, 128, 128],
        ];
        for (i, &(r, c)) in self.state.agent_positions.iter().enumerate() {
            frame.set(c, r, AGENT_HUES[i % AGENT_HUES.len()]);
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
