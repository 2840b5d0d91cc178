//! Desk-scale environments: a gridworld maze with dense or sparse rewards and
//! a deterministic chain MDP, behind one environment interface, plus a value
//! iteration routine used as ground truth by agent tests.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished; call reset")]
    EpisodeFinished,
    #[error("invalid action {0}")]
    InvalidAction(usize),
    #[error("invalid maze layout: {0}")]
    Layout(String),
}

/// Result of one environment step. `cell` carries grid coordinates for
/// visitation heatmaps (chains report `(state, 0)`).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub cell: (usize, usize),
}

/// Deterministic transition model: `transitions[s][a] = (next, reward,
/// terminal)`. Step budgets are not part of the model.
#[derive(Debug, Clone)]
pub struct MdpModel {
    pub transitions: Vec<Vec<(usize, f64, bool)>>,
}

pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn state_count(&self) -> usize;
    fn grid_size(&self) -> (usize, usize);
    fn max_episode_steps(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<EnvStep, EnvError>;
    /// Whether the current cell is the goal (always false for goalless MDPs).
    fn at_goal(&self) -> bool;
    fn model(&self) -> MdpModel;
    fn clone_env(&self) -> Box<dyn Environment>;

    /// Q* via value iteration to a 1e-12 sup-norm residual.
    fn optimal_values(&self, gamma: f64) -> Vec<Vec<f64>> {
        value_iteration(&self.model(), gamma)
    }
}

/// Fixed-point iteration on the Bellman optimality operator.
pub fn value_iteration(model: &MdpModel, gamma: f64) -> Vec<Vec<f64>> {
    let states = model.transitions.len();
    let actions = model.transitions.first().map(|a| a.len()).unwrap_or(0);
    let mut q = vec![vec![0.0; actions]; states];
    for _ in 0..1_000_000 {
        let mut residual: f64 = 0.0;
        for s in 0..states {
            for a in 0..actions {
                let (next, reward, terminal) = model.transitions[s][a];
                let cont = if terminal {
                    0.0
                } else {
                    q[next].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                };
                let updated = reward + gamma * cont;
                residual = residual.max((updated - q[s][a]).abs());
                q[s][a] = updated;
            }
        }
        if residual < 1e-12 {
            break;
        }
    }
    q
}

/// Greedy action under a Q-row, ties broken by lowest index.
pub fn greedy_action(values: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = a;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationMode {
    OneHot,
    Coords,
}

/// Gridworld maze. Four actions (up, down, left, right); moving into a wall
/// or off the board leaves the agent in place. Dense rewards decay linearly
/// with the wall-aware shortest-path distance to the goal.
#[derive(Debug, Clone)]
pub struct GridMaze {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    start_cell: usize,
    goal_cell: usize,
    reward_mode: RewardMode,
    observation_mode: ObservationMode,
    max_episode_steps: usize,
    step_penalty: f64,
    reward_max: f64,
    dist_to_goal: Vec<Option<usize>>,
    max_dist: usize,
    agent: usize,
    steps_taken: usize,
    finished: bool,
}

pub const MAZE_ACTIONS: usize = 4; // up, down, left, right

impl GridMaze {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        walls: Vec<(usize, usize)>,
        start: (usize, usize),
        goal: (usize, usize),
        reward_mode: RewardMode,
        observation_mode: ObservationMode,
        max_episode_steps: usize,
        step_penalty: f64,
        reward_max: f64,
    ) -> Result<Self, EnvError> {
        if width == 0 || height == 0 {
            return Err(EnvError::Layout("zero-sized maze".into()));
        }
        let mut wall_mask = vec![false; width * height];
        for (x, y) in walls {
            if x >= width || y >= height {
                return Err(EnvError::Layout(format!("wall ({x}, {y}) out of bounds")));
            }
            wall_mask[y * width + x] = true;
        }
        let start_cell = start.1 * width + start.0;
        let goal_cell = goal.1 * width + goal.0;
        if start == goal {
            return Err(EnvError::Layout("start equals goal".into()));
        }
        if start.0 >= width || start.1 >= height || goal.0 >= width || goal.1 >= height {
            return Err(EnvError::Layout("start or goal out of bounds".into()));
        }
        if wall_mask[start_cell] || wall_mask[goal_cell] {
            return Err(EnvError::Layout("start or goal is a wall".into()));
        }
        let dist_to_goal = bfs_distances(width, height, &wall_mask, goal_cell);
        if dist_to_goal[start_cell].is_none() {
            return Err(EnvError::Layout("goal unreachable from start".into()));
        }
        let max_dist = dist_to_goal.iter().flatten().copied().max().unwrap_or(0);
        let mut env = Self {
            width,
            height,
            walls: wall_mask,
            start_cell,
            goal_cell,
            reward_mode,
            observation_mode,
            max_episode_steps,
            step_penalty,
            reward_max,
            dist_to_goal,
            max_dist,
            agent: start_cell,
            steps_taken: 0,
            finished: false,
        };
        env.reset();
        Ok(env)
    }

    /// Open maze: no interior walls, start at the top-left corner, goal at
    /// the bottom-right.
    pub fn open(
        width: usize,
        height: usize,
        reward_mode: RewardMode,
        observation_mode: ObservationMode,
        max_episode_steps: usize,
        step_penalty: f64,
        reward_max: f64,
    ) -> Result<Self, EnvError> {
        Self::new(
            width,
            height,
            vec![],
            (0, 0),
            (width - 1, height - 1),
            reward_mode,
            observation_mode,
            max_episode_steps,
            step_penalty,
            reward_max,
        )
    }

    /// Parses the plain-text grid format: `#` wall, `.` free, `S` start,
    /// `G` goal, one row per line.
    pub fn from_text(
        text: &str,
        reward_mode: RewardMode,
        observation_mode: ObservationMode,
        max_episode_steps: usize,
        step_penalty: f64,
        reward_max: f64,
    ) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.is_empty() {
            return Err(EnvError::Layout("empty layout".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut walls = Vec::new();
        let mut start = None;
        let mut goal = None;
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(EnvError::Layout(format!("ragged row {y}")));
            }
            for (x, c) in row.chars().enumerate() {
                match c {
                    '#' => walls.push((x, y)),
                    '.' => {}
                    'S' => {
                        if start.replace((x, y)).is_some() {
                            return Err(EnvError::Layout("multiple start cells".into()));
                        }
                    }
                    'G' => {
                        if goal.replace((x, y)).is_some() {
                            return Err(EnvError::Layout("multiple goal cells".into()));
                        }
                    }
                    other => {
                        return Err(EnvError::Layout(format!("unexpected character {other:?}")));
                    }
                }
            }
        }
        let start = start.ok_or_else(|| EnvError::Layout("missing start cell".into()))?;
        let goal = goal.ok_or_else(|| EnvError::Layout("missing goal cell".into()))?;
        Self::new(
            width,
            height,
            walls,
            start,
            goal,
            reward_mode,
            observation_mode,
            max_episode_steps,
            step_penalty,
            reward_max,
        )
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        (self.goal_cell % self.width, self.goal_cell / self.width)
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls[y * self.width + x]
    }

    pub fn distance_to_goal(&self, x: usize, y: usize) -> Option<usize> {
        self.dist_to_goal[y * self.width + x]
    }

    fn observe(&self, cell: usize) -> Vec<f64> {
        match self.observation_mode {
            ObservationMode::OneHot => {
                let mut v = vec![0.0; self.width * self.height];
                v[cell] = 1.0;
                v
            }
            ObservationMode::Coords => {
                let x = (cell % self.width) as f64;
                let y = (cell / self.width) as f64;
                let nx = if self.width > 1 {
                    x / (self.width - 1) as f64
                } else {
                    0.0
                };
                let ny = if self.height > 1 {
                    y / (self.height - 1) as f64
                } else {
                    0.0
                };
                vec![nx, ny]
            }
        }
    }

    fn next_cell(&self, from: usize, action: usize) -> Result<usize, EnvError> {
        let (x, y) = (from % self.width, from / self.width);
        let target = match action {
            0 => (y > 0).then(|| from - self.width),          // up
            1 => (y + 1 < self.height).then(|| from + self.width), // down
            2 => (x > 0).then(|| from - 1),                   // left
            3 => (x + 1 < self.width).then(|| from + 1),      // right
            other => return Err(EnvError::InvalidAction(other)),
        };
        Ok(match target {
            Some(c) if !self.walls[c] => c,
            _ => from,
        })
    }

    fn cell_reward(&self, cell: usize) -> f64 {
        match self.reward_mode {
            RewardMode::Dense => {
                let shaped = match self.dist_to_goal[cell] {
                    Some(d) if self.max_dist > 0 => {
                        self.reward_max * (1.0 - d as f64 / self.max_dist as f64)
                    }
                    Some(_) => self.reward_max,
                    None => 0.0,
                };
                shaped - self.step_penalty
            }
            RewardMode::Sparse => {
                if cell == self.goal_cell {
                    self.reward_max
                } else {
                    -self.step_penalty
                }
            }
        }
    }
}

impl Environment for GridMaze {
    fn obs_dim(&self) -> usize {
        match self.observation_mode {
            ObservationMode::OneHot => self.width * self.height,
            ObservationMode::Coords => 2,
        }
    }

    fn action_count(&self) -> usize {
        MAZE_ACTIONS
    }

    fn state_count(&self) -> usize {
        self.width * self.height
    }

    fn grid_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    fn reset(&mut self) -> Vec<f64> {
        self.agent = self.start_cell;
        self.steps_taken = 0;
        self.finished = false;
        self.observe(self.agent)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        let next = self.next_cell(self.agent, action)?;
        self.agent = next;
        self.steps_taken += 1;
        let reward = self.cell_reward(next);
        let terminal = next == self.goal_cell || self.steps_taken >= self.max_episode_steps;
        self.finished = terminal;
        Ok(EnvStep {
            obs: self.observe(next),
            reward,
            terminal,
            cell: (next % self.width, next / self.width),
        })
    }

    fn at_goal(&self) -> bool {
        self.agent == self.goal_cell
    }

    fn model(&self) -> MdpModel {
        let states = self.width * self.height;
        let mut transitions = vec![Vec::with_capacity(MAZE_ACTIONS); states];
        for s in 0..states {
            for a in 0..MAZE_ACTIONS {
                let next = self.next_cell(s, a).expect("action in range");
                let reward = self.cell_reward(next);
                transitions[s].push((next, reward, next == self.goal_cell));
            }
        }
        MdpModel { transitions }
    }

    fn clone_env(&self) -> Box<dyn Environment> {
        let mut c = self.clone();
        c.reset();
        Box::new(c)
    }
}

fn bfs_distances(
    width: usize,
    height: usize,
    walls: &[bool],
    from: usize,
) -> Vec<Option<usize>> {
    let mut dist = vec![None; width * height];
    let mut queue = std::collections::VecDeque::new();
    dist[from] = Some(0);
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell].unwrap();
        let (x, y) = (cell % width, cell / width);
        let mut push = |c: usize| {
            if !walls[c] && dist[c].is_none() {
                dist[c] = Some(d + 1);
                queue.push_back(c);
            }
        };
        if y > 0 {
            push(cell - width);
        }
        if y + 1 < height {
            push(cell + width);
        }
        if x > 0 {
            push(cell - 1);
        }
        if x + 1 < width {
            push(cell + 1);
        }
    }
    dist
}

/// Deterministic chain: states 0..n−1, start at 0, `right` advances toward
/// the last state, `left` retreats (state 0 absorbs it). Entering the last
/// state pays the terminal reward; every other step pays the step reward.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    n_states: usize,
    terminal_reward: f64,
    step_reward: f64,
    max_episode_steps: usize,
    state: usize,
    steps_taken: usize,
    finished: bool,
}

pub const CHAIN_ACTIONS: usize = 2; // left, right

impl ChainEnv {
    pub fn new(
        n_states: usize,
        terminal_reward: f64,
        step_reward: f64,
        max_episode_steps: usize,
    ) -> Self {
        assert!(n_states >= 2, "chain needs at least two states");
        Self {
            n_states,
            terminal_reward,
            step_reward,
            max_episode_steps,
            state: 0,
            steps_taken: 0,
            finished: false,
        }
    }

    fn observe(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[self.state] = 1.0;
        v
    }
}

impl Environment for ChainEnv {
    fn obs_dim(&self) -> usize {
        self.n_states
    }

    fn action_count(&self) -> usize {
        CHAIN_ACTIONS
    }

    fn state_count(&self) -> usize {
        self.n_states
    }

    fn grid_size(&self) -> (usize, usize) {
        (self.n_states, 1)
    }

    fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = 0;
        self.steps_taken = 0;
        self.finished = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        let next = match action {
            0 => self.state.saturating_sub(1),
            1 => (self.state + 1).min(self.n_states - 1),
            other => return Err(EnvError::InvalidAction(other)),
        };
        self.state = next;
        self.steps_taken += 1;
        let reached_end = next == self.n_states - 1;
        let reward = if reached_end {
            self.terminal_reward
        } else {
            self.step_reward
        };
        let terminal = reached_end || self.steps_taken >= self.max_episode_steps;
        self.finished = terminal;
        Ok(EnvStep {
            obs: self.observe(),
            reward,
            terminal,
            cell: (next, 0),
        })
    }

    fn at_goal(&self) -> bool {
        self.state == self.n_states - 1
    }

    fn model(&self) -> MdpModel {
        let mut transitions = vec![Vec::with_capacity(CHAIN_ACTIONS); self.n_states];
        for s in 0..self.n_states {
            for a in 0..CHAIN_ACTIONS {
                let next = match a {
                    0 => s.saturating_sub(1),
                    _ => (s + 1).min(self.n_states - 1),
                };
                let reached_end = next == self.n_states - 1;
                let reward = if reached_end {
                    self.terminal_reward
                } else {
                    self.step_reward
                };
                transitions[s].push((next, reward, reached_end));
            }
        }
        MdpModel { transitions }
    }

    fn clone_env(&self) -> Box<dyn Environment> {
        let mut c = self.clone();
        c.reset();
        Box::new(c)
    }
}
