//! Deterministic grid environments: the open labyrinth, the four-room
//! labyrinth and the key/door maze.
//!
//! Layouts are data (see `layouts/*.txt`); the bundled key maze is a
//! hand-drawn reconstruction, not a published map.

mod layout;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layout::{Cell, Layout, LayoutError, Pos};

pub const N_ACTIONS: usize = 4;

/// Per-step discount for non-terminal transitions.
pub const DEFAULT_DISCOUNT: f64 = 0.8;

/// Episode cap for the key maze.
pub const KEY_MAZE_MAX_STEPS: u64 = 4000;

pub const KEY_REWARD: f64 = 1.0;
pub const GOAL_REWARD: f64 = 10.0;

const OPEN_LABYRINTH: &str = include_str!("../../layouts/open_labyrinth.txt");
const FOUR_ROOM: &str = include_str!("../../layouts/four_room.txt");
const KEY_MAZE: &str = include_str!("../../layouts/key_maze.txt");

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid layout for {kind}: {message}")]
    InvalidLayout { kind: EnvKind, message: String },
    #[error("unknown action id {0}")]
    UnknownAction(usize),
    #[error("episode already terminated")]
    Terminated,
    #[error("unknown environment {0:?}")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    OpenLabyrinth,
    FourRoom,
    KeyMaze,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::OpenLabyrinth, EnvKind::FourRoom, EnvKind::KeyMaze];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::OpenLabyrinth => "open_labyrinth",
            EnvKind::FourRoom => "four_room",
            EnvKind::KeyMaze => "key_maze",
        }
    }

    pub fn bundled_layout(self) -> &'static str {
        match self {
            EnvKind::OpenLabyrinth => OPEN_LABYRINTH,
            EnvKind::FourRoom => FOUR_ROOM,
            EnvKind::KeyMaze => KEY_MAZE,
        }
    }

    pub fn has_key_mechanics(self) -> bool {
        self == EnvKind::KeyMaze
    }

    /// Number of stacked binary planes in an observation.
    pub fn planes(self) -> usize {
        if self.has_key_mechanics() {
            5
        } else {
            2
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| EnvError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        Self::ALL.get(i).copied().ok_or(EnvError::UnknownAction(i))
    }

    fn apply(self, (r, c): Pos) -> Pos {
        match self {
            Action::Up => (r - 1, c),
            Action::Down => (r + 1, c),
            Action::Left => (r, c - 1),
            Action::Right => (r, c + 1),
        }
    }
}

/// Flattened stacked binary planes. Cheap to clone.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(Arc<[f64]>);

impl Deref for Observation {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Observation {
    fn from(v: Vec<f64>) -> Self {
        Self(v.into())
    }
}

/// Environment state index: `row * width + col` for labyrinths and
/// `2 * (row * width + col) + has_key` for the key maze.
pub type StateId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateInfo {
    pub row: usize,
    pub col: usize,
    pub has_key: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub discount: f64,
    pub terminal: bool,
    pub reached_goal: bool,
}

/// Result of applying an action to a state, independent of any episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Successor {
    pub state: StateId,
    pub reward: f64,
    pub reached_goal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct KeyCells {
    key: Pos,
    door: Pos,
    reward: Pos,
}

/// A deterministic grid environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    kind: EnvKind,
    layout: Arc<Layout>,
    keys: Option<KeyCells>,
    discount: f64,
    max_steps: Option<u64>,
    agent: Pos,
    has_key: bool,
    terminated: bool,
    steps: u64,
}

impl Env {
    /// Bundled layout for `kind` with default discount and episode cap.
    pub fn new(kind: EnvKind) -> Self {
        let layout = Layout::parse(kind.bundled_layout()).expect("bundled layout parses");
        Self::from_layout(kind, layout).expect("bundled layout is valid")
    }

    pub fn from_layout(kind: EnvKind, layout: Layout) -> Result<Self, EnvError> {
        let invalid = |message: String| EnvError::InvalidLayout { kind, message };
        let keys = if kind.has_key_mechanics() {
            let one = |cell: Cell, name: &str| -> Result<Pos, EnvError> {
                match layout.find(cell).as_slice() {
                    [p] => Ok(*p),
                    found => Err(invalid(format!("expected one {name}, found {}", found.len()))),
                }
            };
            Some(KeyCells {
                key: one(Cell::Key, "key")?,
                door: one(Cell::Door, "door")?,
                reward: one(Cell::Reward, "reward")?,
            })
        } else {
            for cell in [Cell::Key, Cell::Door, Cell::Reward] {
                if let Some(p) = layout.find(cell).first() {
                    return Err(invalid(format!("unexpected {cell:?} at {p:?}")));
                }
            }
            None
        };
        let max_steps = kind.has_key_mechanics().then_some(KEY_MAZE_MAX_STEPS);
        Ok(Self {
            kind,
            agent: layout.start,
            layout: Arc::new(layout),
            keys,
            discount: DEFAULT_DISCOUNT,
            max_steps,
            has_key: false,
            terminated: false,
            steps: 0,
        })
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn with_max_steps(mut self, max_steps: Option<u64>) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn width(&self) -> usize {
        self.layout.width
    }

    pub fn height(&self) -> usize {
        self.layout.height
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    pub fn obs_dim(&self) -> usize {
        self.kind.planes() * self.layout.cells()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn reset(&mut self) -> Observation {
        self.agent = self.layout.start;
        self.has_key = false;
        self.terminated = false;
        self.steps = 0;
        self.observation()
    }

    pub fn state(&self) -> StateId {
        self.encode_state(self.agent, self.has_key)
    }

    fn encode_state(&self, (r, c): Pos, has_key: bool) -> StateId {
        let cell = r * self.layout.width + c;
        if self.keys.is_some() {
            2 * cell + has_key as usize
        } else {
            cell
        }
    }

    pub fn state_info(&self, id: StateId) -> StateInfo {
        let (cell, has_key) = if self.keys.is_some() {
            (id / 2, id % 2 == 1)
        } else {
            (id, false)
        };
        StateInfo {
            row: cell / self.layout.width,
            col: cell % self.layout.width,
            has_key,
        }
    }

    fn passable(&self, pos: Pos, has_key: bool) -> bool {
        if self.layout.is_wall(pos) {
            return false;
        }
        match self.keys {
            Some(k) if pos == k.door => has_key,
            _ => true,
        }
    }

    /// Pure transition function on state ids.
    pub fn successor(&self, state: StateId, action: usize) -> Result<Successor, EnvError> {
        let action = Action::from_index(action)?;
        let info = self.state_info(state);
        let pos = (info.row, info.col);
        let mut has_key = info.has_key;
        let target = action.apply(pos);
        let next = if self.passable(target, has_key) { target } else { pos };
        let mut reward = 0.0;
        let mut reached_goal = false;
        if let Some(k) = self.keys {
            if next != pos && next == k.key && !has_key {
                has_key = true;
                reward = KEY_REWARD;
            } else if next != pos && next == k.reward {
                reward = GOAL_REWARD;
                reached_goal = true;
            }
        }
        Ok(Successor {
            state: self.encode_state(next, has_key),
            reward,
            reached_goal,
        })
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.terminated {
            return Err(EnvError::Terminated);
        }
        let succ = self.successor(self.state(), action)?;
        let info = self.state_info(succ.state);
        self.agent = (info.row, info.col);
        self.has_key = info.has_key;
        self.steps += 1;
        debug_assert!(!self.layout.is_wall(self.agent));
        let timed_out = self.max_steps.is_some_and(|m| self.steps >= m);
        self.terminated = succ.reached_goal || timed_out;
        Ok(StepOutcome {
            observation: self.observation(),
            reward: succ.reward,
            discount: if self.terminated { 0.0 } else { self.discount },
            terminal: self.terminated,
            reached_goal: succ.reached_goal,
        })
    }

    pub fn observation(&self) -> Observation {
        self.observation_for(self.state())
    }

    /// Observation of an arbitrary state id: planes `[walls, agent]`, plus
    /// `[key present, door closed, reward]` for the key maze.
    pub fn observation_for(&self, state: StateId) -> Observation {
        let n = self.layout.cells();
        let w = self.layout.width;
        let info = self.state_info(state);
        let mut obs = vec![0.0; self.obs_dim()];
        for (i, v) in obs[..n].iter_mut().enumerate() {
            if self.layout.is_wall((i / w, i % w)) {
                *v = 1.0;
            }
        }
        obs[n + info.row * w + info.col] = 1.0;
        if let Some(k) = self.keys {
            let idx = |(r, c): Pos| r * w + c;
            if !info.has_key {
                obs[2 * n + idx(k.key)] = 1.0;
                obs[3 * n + idx(k.door)] = 1.0;
            }
            obs[4 * n + idx(k.reward)] = 1.0;
        }
        Observation(obs.into())
    }

    pub fn start_state(&self) -> StateId {
        self.encode_state(self.layout.start, false)
    }

    /// Flood fill over legal moves from the start state. Goal states are
    /// included but not expanded.
    pub fn reachable_states(&self) -> BTreeSet<StateId> {
        let start = self.start_state();
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for a in 0..N_ACTIONS {
                let succ = self.successor(s, a).expect("valid action");
                if seen.insert(succ.state) && !succ.reached_goal {
                    queue.push_back(succ.state);
                }
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk(env: &mut Env, actions: &[Action]) -> Vec<StepOutcome> {
        actions.iter().map(|&a| env.step(a as usize).unwrap()).collect()
    }

    #[test]
    fn open_labyrinth_resets_to_center() {
        let mut env = Env::new(EnvKind::OpenLabyrinth);
        let obs = env.reset();
        assert_eq!(env.agent(), (10, 10));
        let n = 21 * 21;
        assert_eq!(obs.len(), 2 * n);
        assert_eq!(obs[n + 10 * 21 + 10], 1.0);
        assert_eq!(obs[n..].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn key_maze_reset_state() {
        let mut env = Env::new(EnvKind::KeyMaze);
        let obs = env.reset();
        assert!(!env.has_key());
        let n = 15 * 15;
        let door = env.layout().find(Cell::Door)[0];
        assert_eq!(obs[3 * n + door.0 * 15 + door.1], 1.0);
        assert_eq!(obs[3 * n..4 * n].iter().sum::<f64>(), 1.0);
        assert!(obs.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn resets_are_identical() {
        let mut a = Env::new(EnvKind::FourRoom);
        let mut b = Env::new(EnvKind::FourRoom);
        a.step(1).unwrap();
        assert_eq!(a.reset(), b.reset());
    }

    #[test]
    fn blocked_move_is_a_noop() {
        let mut env = Env::new(EnvKind::OpenLabyrinth);
        env.reset();
        for _ in 0..9 {
            env.step(Action::Up as usize).unwrap();
        }
        assert_eq!(env.agent(), (1, 10));
        let out = env.step(Action::Up as usize).unwrap();
        assert_eq!(env.agent(), (1, 10));
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.discount, DEFAULT_DISCOUNT);
        assert!(!out.terminal);
    }

    #[test]
    fn unknown_action_is_an_error() {
        let mut env = Env::new(EnvKind::OpenLabyrinth);
        assert!(matches!(env.step(4), Err(EnvError::UnknownAction(4))));
    }

    #[test]
    fn key_then_door_then_goal() {
        use Action::*;
        let mut env = Env::new(EnvKind::KeyMaze);
        env.reset();
        // start (12,10) -> key (3,11)
        let mut path = vec![Right];
        path.extend(std::iter::repeat_n(Up, 9));
        let outs = walk(&mut env, &path);
        assert_eq!(outs.last().unwrap().reward, KEY_REWARD);
        assert!(env.has_key());
        assert_eq!(outs.iter().filter(|o| o.reward > 0.0).count(), 1);
        // key (3,11) -> door (7,6) -> goal (2,2)
        let mut path = vec![Down; 4];
        path.extend(std::iter::repeat_n(Left, 9));
        path.extend(std::iter::repeat_n(Up, 5));
        let outs = walk(&mut env, &path);
        let last = outs.last().unwrap();
        assert_eq!(env.agent(), (2, 2));
        assert_eq!(last.reward, GOAL_REWARD);
        assert!(last.terminal);
        assert_eq!(last.discount, 0.0);
        assert!(matches!(env.step(0), Err(EnvError::Terminated)));
    }

    #[test]
    fn door_blocks_without_key() {
        let mut env = Env::new(EnvKind::KeyMaze);
        env.reset();
        let start = env.state();
        let door = env.layout().find(Cell::Door)[0];
        let beside = env.encode_state((door.0, door.1 + 1), false);
        let succ = env.successor(beside, Action::Left as usize).unwrap();
        assert_eq!(succ.state, beside);
        let with_key = env.encode_state((door.0, door.1 + 1), true);
        let succ = env.successor(with_key, Action::Left as usize).unwrap();
        assert_eq!(env.state_info(succ.state), StateInfo { row: door.0, col: door.1, has_key: true });
        assert_eq!(env.state(), start);
    }

    #[test]
    fn key_maze_times_out() {
        let mut env = Env::new(EnvKind::KeyMaze).with_max_steps(Some(3));
        env.reset();
        let outs = walk(&mut env, &[Action::Down, Action::Down, Action::Down]);
        assert!(!outs[1].terminal);
        assert!(outs[2].terminal && outs[2].discount == 0.0);
    }

    #[test]
    fn reachable_counts() {
        assert_eq!(Env::new(EnvKind::OpenLabyrinth).reachable_states().len(), 361);
        let tiny = Layout::parse("###\n#S#\n###").unwrap();
        let env = Env::from_layout(EnvKind::OpenLabyrinth, tiny).unwrap();
        assert_eq!(env.reachable_states().len(), 1);
    }

    /// Independent flood fill straight over the layout text.
    fn text_flood_fill(text: &str) -> usize {
        let grid: Vec<Vec<char>> = text.lines().map(|l| l.chars().collect()).collect();
        let mut start = (0, 0);
        for (r, row) in grid.iter().enumerate() {
            for (c, &ch) in row.iter().enumerate() {
                if ch == 'S' {
                    start = (r, c);
                }
            }
        }
        let mut seen = vec![vec![false; grid[0].len()]; grid.len()];
        let mut stack = vec![start];
        seen[start.0][start.1] = true;
        let mut count = 0;
        while let Some((r, c)) = stack.pop() {
            count += 1;
            for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
                if grid[nr][nc] != '#' && !seen[nr][nc] {
                    seen[nr][nc] = true;
                    stack.push((nr, nc));
                }
            }
        }
        count
    }

    #[test]
    fn four_room_reachable_matches_text_flood_fill() {
        let expected = text_flood_fill(FOUR_ROOM);
        assert_eq!(expected, 328);
        assert_eq!(Env::new(EnvKind::FourRoom).reachable_states().len(), expected);
    }

    #[test]
    fn key_maze_reachable_states() {
        let env = Env::new(EnvKind::KeyMaze);
        let states = env.reachable_states();
        // no key: east region only; with key: east + door + west (incl. goal)
        let east = 13 * 7;
        let west = 13 * 5;
        assert_eq!(states.len(), (east - 1) + east + 1 + west);
        assert!(states.iter().all(|&s| {
            let i = env.state_info(s);
            i.has_key || i.col > 6
        }));
    }

    #[test]
    fn observations_are_injective_over_reachable_states() {
        for kind in EnvKind::ALL {
            let env = Env::new(kind);
            let states = env.reachable_states();
            let mut seen = std::collections::HashSet::new();
            for s in &states {
                let obs = env.observation_for(*s);
                let bits: Vec<u8> = obs.iter().map(|&v| v as u8).collect();
                assert!(seen.insert(bits), "{kind}: duplicate observation");
            }
        }
    }

    #[test]
    fn labyrinth_rejects_key_cells() {
        let l = Layout::parse("#####\n#SK.#\n#####").unwrap();
        assert!(Env::from_layout(EnvKind::OpenLabyrinth, l.clone()).is_err());
        assert!(Env::from_layout(EnvKind::KeyMaze, l).is_err());
    }
}
