//! Terrain gridworlds with slippery four-way movement.
//!
//! Grid text format, one row per line:
//!
//! | char | terrain                 |
//! |------|-------------------------|
//! | `#`  | wall (not a state)      |
//! | `d`  | dirt                    |
//! | `g`  | grass                   |
//! | `l`  | lava                    |
//! | `G`  | gold                    |
//! | `S`  | silver                  |
//! | `@`  | dirt, also a start cell |
//!
//! With no `@` cell the initial distribution is uniform over passable cells.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, TabularMdp};

/// The 9x9 grid shipped with the crate.
pub const FIXTURE_9X9: &str = include_str!("../fixtures/grid9.txt");

pub const DEFAULT_P_INTENDED: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terrain {
    Wall,
    Dirt,
    Grass,
    Lava,
    Gold,
    Silver,
}

impl Terrain {
    /// Position in the terrain feature vector, `None` for walls.
    pub fn feature_index(self) -> Option<usize> {
        match self {
            Terrain::Wall => None,
            Terrain::Dirt => Some(0),
            Terrain::Grass => Some(1),
            Terrain::Lava => Some(2),
            Terrain::Gold => Some(3),
            Terrain::Silver => Some(4),
        }
    }

    fn symbol(self) -> char {
        match self {
            Terrain::Wall => '#',
            Terrain::Dirt => 'd',
            Terrain::Grass => 'g',
            Terrain::Lava => 'l',
            Terrain::Gold => 'G',
            Terrain::Silver => 'S',
        }
    }
}

pub const N_TERRAIN_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    fn orthogonal(self) -> [Action; 2] {
        match self {
            Action::Up | Action::Down => [Action::Left, Action::Right],
            Action::Left | Action::Right => [Action::Up, Action::Down],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Row-major terrain codes.
    pub cells: Vec<Terrain>,
    /// `(row, col)` of start cells; empty means uniform over passable cells.
    pub start_cells: Vec<(usize, usize)>,
    pub p_intended: f64,
}

/// Parses the grid text format described in the module docs.
pub fn parse_grid(text: &str) -> Result<GridSpec> {
    let body = text.trim_end_matches(['\n', '\r']);
    if body.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut cells = Vec::new();
    let mut start_cells = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (row, line) in body.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let n = line.chars().count();
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::RaggedGrid {
                    row,
                    expected: w,
                    found: n,
                })
            }
            _ => {}
        }
        for (col, ch) in line.chars().enumerate() {
            let terrain = match ch {
                '#' => Terrain::Wall,
                'd' => Terrain::Dirt,
                'g' => Terrain::Grass,
                'l' => Terrain::Lava,
                'G' => Terrain::Gold,
                'S' => Terrain::Silver,
                '@' => {
                    start_cells.push((row, col));
                    Terrain::Dirt
                }
                _ => return Err(Error::UnknownCell { ch, row, col }),
            };
            cells.push(terrain);
        }
        height += 1;
    }
    let width = width.unwrap_or(0);
    if width == 0 {
        return Err(Error::EmptyGrid);
    }
    let grid = GridSpec {
        width,
        height,
        cells,
        start_cells,
        p_intended: DEFAULT_P_INTENDED,
    };
    grid.validate()?;
    Ok(grid)
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_grid(s)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            for c in 0..self.width {
                let t = self.terrain(r, c);
                let ch = if self.start_cells.contains(&(r, c)) {
                    '@'
                } else {
                    t.symbol()
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::EmptyGrid);
        }
        if self.cells.len() != self.width * self.height {
            return Err(Error::Shape(format!(
                "{} cells for a {}x{} grid",
                self.cells.len(),
                self.height,
                self.width
            )));
        }
        if self.cells.iter().all(|&t| t == Terrain::Wall) {
            return Err(Error::AllWalls);
        }
        if !(0.0..=1.0).contains(&self.p_intended) {
            return Err(Error::InvalidArgument(format!(
                "p_intended {} outside [0, 1]",
                self.p_intended
            )));
        }
        for &(r, c) in &self.start_cells {
            if r >= self.height || c >= self.width || self.terrain(r, c) == Terrain::Wall {
                return Err(Error::InvalidArgument(format!("start cell ({r}, {c}) is not passable")));
            }
        }
        Ok(())
    }

    pub fn with_p_intended(mut self, p: f64) -> Self {
        self.p_intended = p;
        self
    }

    pub fn terrain(&self, row: usize, col: usize) -> Terrain {
        self.cells[row * self.width + col]
    }

    /// `(row, col)` of every passable cell, in state-index order.
    pub fn state_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.terrain(r, c) != Terrain::Wall)
            .collect()
    }

    /// Cell index → state index, `None` for walls.
    fn state_lookup(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.cells
            .iter()
            .map(|&t| {
                (t != Terrain::Wall).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    pub fn state_index(&self, row: usize, col: usize) -> Option<usize> {
        self.state_lookup()[row * self.width + col]
    }

    pub fn n_states(&self) -> usize {
        self.cells.iter().filter(|&&t| t != Terrain::Wall).count()
    }

    /// Terrain of each state.
    pub fn state_terrain(&self) -> Vec<Terrain> {
        self.state_cells()
            .into_iter()
            .map(|(r, c)| self.terrain(r, c))
            .collect()
    }

    /// Destination of a single deterministic move; blocked moves stay put.
    fn step(&self, row: usize, col: usize, action: Action) -> (usize, usize) {
        let (dr, dc) = action.delta();
        let (r, c) = (row as isize + dr, col as isize + dc);
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            return (row, col);
        }
        let (r, c) = (r as usize, c as usize);
        if self.terrain(r, c) == Terrain::Wall {
            (row, col)
        } else {
            (r, c)
        }
    }

    /// Transition tensor `[s][a][s']` under the slip model.
    pub fn transitions(&self) -> Array3<f64> {
        let cells = self.state_cells();
        let lookup = self.state_lookup();
        let n = cells.len();
        let slip = (1.0 - self.p_intended) / 2.0;
        let mut t = Array3::zeros((n, Action::ALL.len(), n));
        for (s, &(r, c)) in cells.iter().enumerate() {
            for action in Action::ALL {
                let [o1, o2] = action.orthogonal();
                for (dir, p) in [(action, self.p_intended), (o1, slip), (o2, slip)] {
                    let (nr, nc) = self.step(r, c, dir);
                    let next = lookup[nr * self.width + nc].expect("step lands on a passable cell");
                    t[[s, action as usize, next]] += p;
                }
            }
        }
        t
    }

    pub fn initial_dist(&self) -> Array1<f64> {
        let n = self.n_states();
        if self.start_cells.is_empty() {
            return Array1::from_elem(n, 1.0 / n as f64);
        }
        let lookup = self.state_lookup();
        let mut mu = Array1::zeros(n);
        let w = 1.0 / self.start_cells.len() as f64;
        for &(r, c) in &self.start_cells {
            mu[lookup[r * self.width + c].expect("start cells are passable")] += w;
        }
        mu
    }
}

/// Per-terrain reward weights of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRewardSpec {
    pub dirt: f64,
    pub grass: f64,
    pub lava: f64,
    pub gold: f64,
    pub silver: f64,
}

impl TaskRewardSpec {
    pub const fn new(dirt: f64, grass: f64, lava: f64, gold: f64, silver: f64) -> Self {
        TaskRewardSpec {
            dirt,
            grass,
            lava,
            gold,
            silver,
        }
    }

    /// Likes silver, neutral about gold.
    pub const fn task_a() -> Self {
        Self::new(0.0, -1.0, -10.0, 0.0, 5.0)
    }

    /// Likes gold, neutral about silver.
    pub const fn task_b() -> Self {
        Self::new(0.0, -1.0, -10.0, 5.0, 0.0)
    }

    /// Likes both.
    pub const fn task_a_plus_b() -> Self {
        Self::new(0.0, -1.0, -10.0, 5.0, 5.0)
    }

    /// Weight vector in terrain-feature order.
    pub fn weights(&self) -> Array1<f64> {
        Array1::from(vec![self.dirt, self.grass, self.lava, self.gold, self.silver])
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights().iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("task reward weights must be finite".into()))
        }
    }

    pub fn weight(&self, terrain: Terrain) -> f64 {
        match terrain {
            Terrain::Wall => 0.0,
            Terrain::Dirt => self.dirt,
            Terrain::Grass => self.grass,
            Terrain::Lava => self.lava,
            Terrain::Gold => self.gold,
            Terrain::Silver => self.silver,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Indicator of the terrain type, `K = 5`.
    Terrain,
    /// Indicator of the state, `K = n_states`.
    OneHotState,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Terrain => "terrain",
            FeatureKind::OneHotState => "one_hot_state",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "terrain" => Ok(FeatureKind::Terrain),
            "one_hot_state" => Ok(FeatureKind::OneHotState),
            _ => Err(Error::InvalidArgument(format!("unknown feature kind {s:?}"))),
        }
    }
}

/// Action-independent state features.
pub fn feature_map(grid: &GridSpec, kind: FeatureKind) -> FeatureMap {
    let terrain = grid.state_terrain();
    let n = terrain.len();
    let n_actions = Action::ALL.len();
    let table = match kind {
        FeatureKind::Terrain => Array3::from_shape_fn((n, n_actions, N_TERRAIN_FEATURES), |(s, _, k)| {
            f64::from(terrain[s].feature_index() == Some(k))
        }),
        FeatureKind::OneHotState => Array3::from_shape_fn((n, n_actions, n), |(s, _, k)| f64::from(s == k)),
    };
    FeatureMap::new(table).expect("indicator features are finite")
}

/// Ground-truth reward table `R(s, ·)` = task weight of the terrain at `s`.
pub fn task_reward(grid: &GridSpec, task: &TaskRewardSpec) -> Array2<f64> {
    let terrain = grid.state_terrain();
    Array2::from_shape_fn((terrain.len(), Action::ALL.len()), |(s, _)| task.weight(terrain[s]))
}

/// MDP carrying the task's ground-truth reward, plus the terrain features
/// that generate it.
pub fn build_mdp(grid: &GridSpec, task: &TaskRewardSpec, discount: f64) -> Result<(TabularMdp, FeatureMap)> {
    grid.validate()?;
    task.validate()?;
    let mdp = TabularMdp::new(
        grid.transitions(),
        discount,
        grid.initial_dist(),
        Some(task_reward(grid, task)),
    )?;
    Ok((mdp, feature_map(grid, FeatureKind::Terrain)))
}
