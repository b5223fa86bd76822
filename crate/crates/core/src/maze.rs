//! Grid mazes with several candidate goals, one of which is live per episode.
//!
//! Text format: a rectangle of characters surrounded by a border of `#`.
//! Inside the border, `#` is a wall, `.` is floor, `P` is the start cell and
//! `G` a candidate goal (also floor). Cells are addressed by interior
//! coordinates, so a 5×5 maze is written as 7 lines of 7 characters.
//!
//! Rewards: every step costs −1. Reaching the goal after `steps_used` steps
//! additionally pays `budget − steps_used`. Running out of budget ends the
//! episode without a bonus.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const DEFAULT_BUDGET: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    /// Fixed order, also the tie-break order.
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn offset(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MazeError {
    #[error("maze text is empty")]
    Empty,
    #[error("line {line}: expected {expected} columns, found {got}")]
    Ragged { line: usize, expected: usize, got: usize },
    #[error("line {line}, column {col}: unexpected character {ch:?}")]
    BadChar { line: usize, col: usize, ch: char },
    #[error("line {line}, column {col}: border must be wall, found {ch:?}")]
    Border { line: usize, col: usize, ch: char },
    #[error("maze needs at least one interior row and column")]
    TooSmall,
    #[error("no start cell 'P'")]
    MissingStart,
    #[error("line {line}, column {col}: second start cell")]
    DuplicateStart { line: usize, col: usize },
    #[error("no candidate goal 'G'")]
    NoGoals,
    #[error("{0} is not a candidate goal")]
    NotAGoal(Cell),
    #[error("goal {0} is unreachable from the start")]
    Unreachable(Cell),
    #[error("episode already finished")]
    Finished,
}

/// Immutable layout; shared across episodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Maze {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    candidate_goals: Vec<Cell>,
    start: Cell,
}

impl Maze {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    /// Candidate goals in reading order.
    pub fn candidate_goals(&self) -> &[Cell] {
        &self.candidate_goals
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| Cell::new(r, c)))
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[self.index(cell)]
    }

    /// Row-major index of an interior cell.
    pub fn index(&self, cell: Cell) -> usize {
        debug_assert!(cell.row < self.height && cell.col < self.width);
        cell.row * self.width + cell.col
    }

    /// Where `action` leads from `cell`; walls and the border block the move.
    pub fn neighbour(&self, cell: Cell, action: Action) -> Cell {
        let (dr, dc) = action.offset();
        let r = cell.row as isize + dr;
        let c = cell.col as isize + dc;
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            return cell;
        }
        let next = Cell::new(r as usize, c as usize);
        if self.is_wall(next) {
            cell
        } else {
            next
        }
    }

    /// Fresh episode state for one of the candidate goals.
    pub fn initial_state(&self, goal: Cell, budget: u32) -> Result<MazeState, MazeError> {
        if !self.candidate_goals.contains(&goal) {
            return Err(MazeError::NotAGoal(goal));
        }
        Ok(MazeState {
            position: self.start,
            goal,
            steps_used: 0,
            budget,
        })
    }

    /// Shortest-path step counts from `from` to every cell (`None` when
    /// unreachable or a wall).
    pub fn distances_from(&self, from: Cell) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.walls.len()];
        dist[self.index(from)] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[self.index(cell)].expect("queued cells have a distance");
            for a in Action::ALL {
                let next = self.neighbour(cell, a);
                let slot = &mut dist[self.index(next)];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    pub fn shortest_path_len(&self, from: Cell, to: Cell) -> Option<u32> {
        self.distances_from(from)[self.index(to)]
    }
}

/// Per-episode state. The goal is part of the state so that the perfect
/// model can pay the terminal bonus, but it is never exposed to the
/// tabular controller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MazeState {
    pub position: Cell,
    pub goal: Cell,
    pub steps_used: u32,
    pub budget: u32,
}

impl MazeState {
    pub fn at_goal(&self) -> bool {
        self.position == self.goal
    }

    pub fn is_done(&self) -> bool {
        self.at_goal() || self.steps_used >= self.budget
    }

    pub fn steps_left(&self) -> u32 {
        self.budget.saturating_sub(self.steps_used)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: MazeState,
    pub reward: f64,
    pub done: bool,
}

/// Advance the real episode by one move.
pub fn step(maze: &Maze, state: &MazeState, action: Action) -> Result<StepOutcome, MazeError> {
    if state.is_done() {
        return Err(MazeError::Finished);
    }
    let next = MazeState {
        position: maze.neighbour(state.position, action),
        steps_used: state.steps_used + 1,
        ..*state
    };
    let mut reward = -1.0;
    if next.at_goal() {
        reward += f64::from(next.steps_left());
    }
    Ok(StepOutcome {
        state: next,
        reward,
        done: next.is_done(),
    })
}

/// The imagination's model of the maze. Exact, and free of side effects:
/// `state` is taken by reference and never modified.
pub fn perfect_model(maze: &Maze, state: &MazeState, action: Action) -> Result<StepOutcome, MazeError> {
    step(maze, state, action)
}

/// Undiscounted return of an episode that reaches the goal after exactly
/// `path_len` steps.
pub fn return_for_path(path_len: u32, budget: u32) -> f64 {
    if path_len > budget {
        -f64::from(budget)
    } else {
        -f64::from(path_len) + f64::from(budget - path_len)
    }
}

/// Best achievable return divided by the budget.
pub fn optimal_return(maze: &Maze, goal: Cell, budget: u32) -> Result<f64, MazeError> {
    if !maze.candidate_goals.contains(&goal) {
        return Err(MazeError::NotAGoal(goal));
    }
    let len = maze
        .shortest_path_len(maze.start, goal)
        .ok_or(MazeError::Unreachable(goal))?;
    Ok(return_for_path(len, budget) / f64::from(budget))
}

pub fn parse_maze(text: &str) -> Result<Maze, MazeError> {
    let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
    let first = lines.first().ok_or(MazeError::Empty)?;
    let full_w = first.chars().count();
    let full_h = lines.len();
    for (i, l) in lines.iter().enumerate() {
        let got = l.chars().count();
        if got != full_w {
            return Err(MazeError::Ragged {
                line: i + 1,
                expected: full_w,
                got,
            });
        }
    }
    if full_w < 3 || full_h < 3 {
        return Err(MazeError::TooSmall);
    }
    let (width, height) = (full_w - 2, full_h - 2);
    let mut walls = vec![false; width * height];
    let mut goals = Vec::new();
    let mut start = None;
    for (r, l) in lines.iter().enumerate() {
        for (c, ch) in l.chars().enumerate() {
            let (line, col) = (r + 1, c + 1);
            if !matches!(ch, '#' | '.' | 'P' | 'G') {
                return Err(MazeError::BadChar { line, col, ch });
            }
            let border = r == 0 || c == 0 || r == full_h - 1 || c == full_w - 1;
            if border {
                if ch != '#' {
                    return Err(MazeError::Border { line, col, ch });
                }
                continue;
            }
            let cell = Cell::new(r - 1, c - 1);
            match ch {
                '#' => walls[cell.row * width + cell.col] = true,
                'P' if start.is_some() => return Err(MazeError::DuplicateStart { line, col }),
                'P' => start = Some(cell),
                'G' => goals.push(cell),
                _ => {}
            }
        }
    }
    let start = start.ok_or(MazeError::MissingStart)?;
    if goals.is_empty() {
        return Err(MazeError::NoGoals);
    }
    Ok(Maze {
        width,
        height,
        walls,
        candidate_goals: goals,
        start,
    })
}

/// Parse several mazes separated by blank lines. Lines starting with `;`
/// are comments.
pub fn parse_maze_set(text: &str) -> Result<Vec<Maze>, MazeError> {
    let mut mazes = Vec::new();
    let mut block = String::new();
    for line in text.lines().chain(std::iter::once("")) {
        let line = line.trim_end();
        if line.starts_with(';') {
            continue;
        }
        if line.is_empty() {
            if !block.is_empty() {
                mazes.push(parse_maze(&block)?);
                block.clear();
            }
        } else {
            block.push_str(line);
            block.push('\n');
        }
    }
    Ok(mazes)
}

impl FromStr for Maze {
    type Err = MazeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_maze(s)
    }
}

impl fmt::Display for Maze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let border = "#".repeat(self.width + 2);
        writeln!(f, "{border}")?;
        for r in 0..self.height {
            f.write_str("#")?;
            for c in 0..self.width {
                let cell = Cell::new(r, c);
                let ch = if cell == self.start {
                    'P'
                } else if self.candidate_goals.contains(&cell) {
                    'G'
                } else if self.is_wall(cell) {
                    '#'
                } else {
                    '.'
                };
                write!(f, "{ch}")?;
            }
            writeln!(f, "#")?;
        }
        writeln!(f, "{border}")
    }
}

/// Maze layouts shipped with the crate.
pub mod fixtures {
    use super::{parse_maze, parse_maze_set, Maze};

    pub const SINGLE_TEXT: &str = include_str!("../fixtures/mazes/single.txt");
    pub const MULTI_5X5_TEXT: &str = include_str!("../fixtures/mazes/multi_5x5.txt");
    pub const MULTI_7X7_TEXT: &str = include_str!("../fixtures/mazes/multi_7x7.txt");

    /// Index into [`single`]'s candidate goals of the goal never used for
    /// training.
    pub const SINGLE_HELD_OUT: usize = 3;

    /// One maze with four candidate goals.
    pub fn single() -> Maze {
        parse_maze(SINGLE_TEXT).expect("bundled maze parses")
    }

    pub fn multi_5x5() -> Vec<Maze> {
        parse_maze_set(MULTI_5X5_TEXT).expect("bundled mazes parse")
    }

    pub fn multi_7x7() -> Vec<Maze> {
        parse_maze_set(MULTI_7X7_TEXT).expect("bundled mazes parse")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPEN: &str = "#####\n#...#\n#.P.#\n#..G#\n#####\n";

    #[test]
    fn open_grid_has_one_candidate() {
        let m = parse_maze(OPEN).unwrap();
        assert_eq!((m.width(), m.height()), (3, 3));
        assert_eq!(m.start(), Cell::new(1, 1));
        assert_eq!(m.candidate_goals(), &[Cell::new(2, 2)]);
    }

    #[test]
    fn goal_in_border_row_rejected() {
        let err = parse_maze("##G##\n#...#\n#.P.#\n#...#\n#####\n").unwrap_err();
        assert_eq!(
            err,
            MazeError::Border {
                line: 1,
                col: 3,
                ch: 'G'
            }
        );
    }

    #[test]
    fn parse_errors_carry_positions() {
        assert_eq!(
            parse_maze("#####\n#..#\n").unwrap_err(),
            MazeError::Ragged {
                line: 2,
                expected: 5,
                got: 4
            }
        );
        assert_eq!(
            parse_maze("#####\n#..G#\n#####\n").unwrap_err(),
            MazeError::MissingStart
        );
        assert_eq!(parse_maze("#####\n#.P.#\n#####\n").unwrap_err(), MazeError::NoGoals);
        assert!(matches!(
            parse_maze("#####\n#.Px#\n#####\n").unwrap_err(),
            MazeError::BadChar { line: 2, col: 4, .. }
        ));
        assert_eq!(parse_maze("").unwrap_err(), MazeError::Empty);
    }

    #[test]
    fn round_trip() {
        let m = parse_maze(OPEN).unwrap();
        assert_eq!(m.to_string(), OPEN);
        assert_eq!(m.to_string().parse::<Maze>().unwrap(), m);
    }

    #[test]
    fn wall_bump_costs_a_step() {
        let m = parse_maze("#####\n#P#G#\n#...#\n#####\n").unwrap();
        let s = m.initial_state(Cell::new(0, 2), 20).unwrap();
        let out = step(&m, &s, Action::Right).unwrap();
        assert_eq!(out.state.position, s.position);
        assert_eq!(out.reward, -1.0);
        assert_eq!(out.state.steps_used, 1);
        assert!(!out.done);
        let out = step(&m, &s, Action::Up).unwrap();
        assert_eq!(out.state.position, s.position);
    }

    #[test]
    fn third_step_onto_goal_pays_seventeen() {
        let m = parse_maze("######\n#P..G#\n######\n").unwrap();
        let mut s = m.initial_state(Cell::new(0, 3), 20).unwrap();
        let mut total = 0.0;
        let mut last = None;
        for _ in 0..3 {
            let out = step(&m, &s, Action::Right).unwrap();
            total += out.reward;
            s = out.state;
            last = Some(out);
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, -1.0 + 17.0);
        assert_eq!(total, -3.0 + 17.0);
        assert_eq!(step(&m, &s, Action::Left).unwrap_err(), MazeError::Finished);
    }

    #[test]
    fn budget_exhaustion_ends_without_bonus() {
        let m = parse_maze("######\n#P#.G#\n######\n").unwrap();
        let mut s = m.initial_state(Cell::new(0, 3), 3).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            let out = step(&m, &s, Action::Right).unwrap();
            total += out.reward;
            s = out.state;
            assert_eq!(out.done, i == 2);
        }
        assert_eq!(total, -3.0);
    }

    #[test]
    fn adjacent_goal_is_the_best_case() {
        let m = parse_maze("#####\n#PG.#\n#####\n").unwrap();
        let v = optimal_return(&m, Cell::new(0, 1), 20).unwrap();
        assert_eq!(v, (-1.0 + 19.0) / 20.0);
    }

    #[test]
    fn unreachable_goal_signalled() {
        let m = parse_maze("#####\n#P#G#\n#####\n").unwrap();
        assert_eq!(
            optimal_return(&m, Cell::new(0, 2), 20).unwrap_err(),
            MazeError::Unreachable(Cell::new(0, 2))
        );
    }

    #[test]
    fn maze_set_splits_on_blank_lines() {
        let text = format!("; two copies\n{OPEN}\n\n{OPEN}");
        assert_eq!(parse_maze_set(&text).unwrap().len(), 2);
    }
}
