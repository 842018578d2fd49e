//! Gridworld generators: multi-room layouts joined by single-cell doors, the
//! four-room layout, a room with one exit, and random dense MDPs for testing.
//!
//! Actions are `0 = right, 1 = left, 2 = up, 3 = down`. The intended move
//! happens with probability `1 - noise`; the remaining mass is split equally
//! among the other three directions. Moves into walls leave the agent in
//! place.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::region::{compute_boundaries, Region, RegionPartition, ValueBounds};

pub const N_MOVES: usize = 4;
/// Row/column displacement per action.
pub const MOVES: [(i64, i64); N_MOVES] = [(0, 1), (0, -1), (-1, 0), (1, 0)];
pub const ACTION_NAMES: [&str; N_MOVES] = ["right", "left", "up", "down"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCell {
    pub row: usize,
    pub col: usize,
    pub magnitude: f64,
    /// Absorbing cells loop on themselves and pay `magnitude` every step.
    #[serde(default = "default_true")]
    pub absorbing: bool,
}

fn default_true() -> bool {
    true
}

/// A door between two side-by-side rooms (given as `[room_row, room_col]`).
/// `offset` is the row (horizontal neighbours) or column (vertical
/// neighbours) within the rooms where the wall is open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Door {
    pub a: [usize; 2],
    pub b: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub room_rows: usize,
    pub room_cols: usize,
    pub room_height: usize,
    pub room_width: usize,
    /// `None` opens a door in the middle of every shared wall.
    #[serde(default)]
    pub doors: Option<Vec<Door>>,
    #[serde(default)]
    pub rewards: Vec<RewardCell>,
    pub noise: f64,
    pub discount: f64,
}

impl Default for GridworldSpec {
    /// Two-by-two 5x5 rooms with an absorbing +1 in the centre of the
    /// top-right room.
    fn default() -> Self {
        Self::four_rooms_reward_in(1)
    }
}

impl GridworldSpec {
    /// The default four-room layout with the absorbing +1 at the centre of
    /// room `room` (row-major: 0 top-left, 1 top-right, 2 bottom-left,
    /// 3 bottom-right).
    pub fn four_rooms_reward_in(room: usize) -> Self {
        let (h, w) = (5, 5);
        Self {
            room_rows: 2,
            room_cols: 2,
            room_height: h,
            room_width: w,
            doors: None,
            rewards: vec![RewardCell {
                row: (room / 2) * h + h / 2,
                col: (room % 2) * w + w / 2,
                magnitude: 1.0,
                absorbing: true,
            }],
            noise: 0.2,
            discount: 0.95,
        }
    }

    pub fn rows(&self) -> usize {
        self.room_rows * self.room_height
    }

    pub fn cols(&self) -> usize {
        self.room_cols * self.room_width
    }

    pub fn n_states(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn room_of(&self, row: usize, col: usize) -> usize {
        (row / self.room_height) * self.room_cols + col / self.room_width
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGridworld(m));
        if self.room_rows == 0 || self.room_cols == 0 || self.room_height == 0 || self.room_width == 0 {
            return bad("room counts and sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise {} is outside [0, 1)", self.noise));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} is outside [0, 1)", self.discount));
        }
        for r in &self.rewards {
            if r.row >= self.rows() || r.col >= self.cols() {
                return bad(format!("reward cell ({}, {}) is off the grid", r.row, r.col));
            }
            if !r.magnitude.is_finite() {
                return bad("reward magnitudes must be finite".into());
            }
        }
        for d in self.door_list() {
            let [ar, ac] = d.a;
            let [br, bc] = d.b;
            if ar >= self.room_rows || ac >= self.room_cols || br >= self.room_rows || bc >= self.room_cols {
                return bad(format!("door {d:?} names a room that does not exist"));
            }
            let horizontal = ar == br && ac.abs_diff(bc) == 1;
            let vertical = ac == bc && ar.abs_diff(br) == 1;
            if !(horizontal || vertical) {
                return bad(format!("door {d:?} does not join adjacent rooms"));
            }
            let limit = if horizontal { self.room_height } else { self.room_width };
            if d.offset >= limit {
                return bad(format!("door {d:?} offset is outside the wall"));
            }
        }
        Ok(())
    }

    /// Doors in effect: the explicit list, or one mid-wall door per shared
    /// wall.
    pub fn door_list(&self) -> Vec<Door> {
        if let Some(doors) = &self.doors {
            return doors.clone();
        }
        let mut doors = Vec::new();
        for r in 0..self.room_rows {
            for c in 0..self.room_cols {
                if c + 1 < self.room_cols {
                    doors.push(Door { a: [r, c], b: [r, c + 1], offset: self.room_height / 2 });
                }
                if r + 1 < self.room_rows {
                    doors.push(Door { a: [r, c], b: [r + 1, c], offset: self.room_width / 2 });
                }
            }
        }
        doors
    }

    /// Pairs of cells `(from, to)` on either side of an open door, both ways.
    fn door_crossings(&self) -> HashSet<(usize, usize)> {
        let mut set = HashSet::new();
        for d in self.door_list() {
            let ([ar, ac], [br, bc]) = if d.a <= d.b { (d.a, d.b) } else { (d.b, d.a) };
            let (x, y) = if ar == br {
                let row = ar * self.room_height + d.offset;
                (self.state(row, bc * self.room_width - 1), self.state(row, bc * self.room_width))
            } else {
                let col = ac * self.room_width + d.offset;
                (self.state(br * self.room_height - 1, col), self.state(br * self.room_height, col))
            };
            set.insert((x, y));
            set.insert((y, x));
        }
        set
    }

    /// Cells that sit directly beside an open door.
    pub fn door_cells(&self) -> Vec<usize> {
        let mut cells: Vec<usize> = self.door_crossings().into_iter().map(|(x, _)| x).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }
}

/// Builds a noisy-move MDP from a neighbour function (`None` = blocked).
fn grid_mdp(
    n_states: usize,
    neighbour: impl Fn(usize, usize) -> Option<usize>,
    rewards: &[RewardCell],
    cell_of: impl Fn(&RewardCell) -> usize,
    noise: f64,
    discount: f64,
) -> Result<Mdp> {
    let mut transition = vec![0.0; n_states * N_MOVES * n_states];
    let mut reward = vec![0.0; n_states * N_MOVES];
    let mut absorbing = vec![false; n_states];
    for r in rewards {
        let s = cell_of(r);
        absorbing[s] |= r.absorbing;
        for a in 0..N_MOVES {
            reward[s * N_MOVES + a] += r.magnitude;
        }
    }
    for s in 0..n_states {
        for a in 0..N_MOVES {
            let row = &mut transition[(s * N_MOVES + a) * n_states..(s * N_MOVES + a + 1) * n_states];
            if absorbing[s] {
                row[s] = 1.0;
                continue;
            }
            for k in 0..N_MOVES {
                let p = if k == a { 1.0 - noise } else { noise / 3.0 };
                if p > 0.0 {
                    row[neighbour(s, k).unwrap_or(s)] += p;
                }
            }
        }
    }
    Mdp::new(n_states, N_MOVES, transition, reward, discount)
}

/// Any multi-room gridworld, partitioned by room.
pub fn gridworld(spec: &GridworldSpec) -> Result<(Mdp, RegionPartition)> {
    spec.validate()?;
    let (rows, cols) = (spec.rows() as i64, spec.cols() as i64);
    let crossings = spec.door_crossings();
    let neighbour = |s: usize, k: usize| {
        let (r, c) = ((s / spec.cols()) as i64, (s % spec.cols()) as i64);
        let (nr, nc) = (r + MOVES[k].0, c + MOVES[k].1);
        if nr < 0 || nc < 0 || nr >= rows || nc >= cols {
            return None;
        }
        let next = spec.state(nr as usize, nc as usize);
        let same_room = spec.room_of(r as usize, c as usize) == spec.room_of(nr as usize, nc as usize);
        (same_room || crossings.contains(&(s, next))).then_some(next)
    };
    let mdp = grid_mdp(spec.n_states(), neighbour, &spec.rewards, |r| spec.state(r.row, r.col), spec.noise, spec.discount)?;
    let assignment: Vec<usize> = (0..spec.n_states()).map(|s| spec.room_of(s / spec.cols(), s % spec.cols())).collect();
    let partition = compute_boundaries(&mdp, &assignment)?;
    Ok((mdp, partition))
}

/// A two-by-two room gridworld.
pub fn four_rooms(spec: &GridworldSpec) -> Result<(Mdp, RegionPartition)> {
    if spec.room_rows != 2 || spec.room_cols != 2 {
        return Err(Error::InvalidGridworld(format!(
            "four rooms needs a 2x2 room grid, got {}x{}",
            spec.room_rows, spec.room_cols
        )));
    }
    gridworld(spec)
}

/// A `size x size` room with an absorbing reward at its centre and a single
/// exit cell to the left of the top-left corner. The exit cell leads back
/// into the corner when moving right and is otherwise a dead end. Region 0
/// is the room; region 1 is the exit cell.
pub fn single_exit_room(size: usize, center_reward: f64, noise: f64, discount: f64) -> Result<(Mdp, RegionPartition)> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidGridworld(format!("room size {size} has no centre cell")));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::InvalidGridworld(format!("noise {noise} is outside [0, 1)")));
    }
    let n = size * size;
    let exit = n;
    let neighbour = |s: usize, k: usize| {
        if s == exit {
            return (k == 0).then_some(0);
        }
        let (r, c) = ((s / size) as i64, (s % size) as i64);
        let (nr, nc) = (r + MOVES[k].0, c + MOVES[k].1);
        if nr == 0 && nc == -1 {
            return Some(exit);
        }
        (nr >= 0 && nc >= 0 && nr < size as i64 && nc < size as i64).then(|| nr as usize * size + nc as usize)
    };
    let center = RewardCell { row: size / 2, col: size / 2, magnitude: center_reward, absorbing: true };
    let mdp = grid_mdp(n + 1, neighbour, &[center], |r| r.row * size + r.col, noise, discount)?;
    let mut assignment = vec![0; n + 1];
    assignment[exit] = 1;
    let partition = compute_boundaries(&mdp, &assignment)?;
    Ok((mdp, partition))
}

/// The 5x5 single-exit room with a 0.1 absorbing centre (value 2),
/// noise 0.2 and discount 0.95, with out-space values on `[0, 2]`.
pub fn exit_room_fixture() -> (Mdp, Region, ValueBounds) {
    let (mdp, partition) = single_exit_room(5, 0.1, 0.2, 0.95).expect("fixture parameters are valid");
    let bounds = ValueBounds { v_min: 0.0, v_max: 2.0 };
    (mdp, partition.regions[0].clone(), bounds)
}

/// The top-left room of the default four-room layout: 25 states, two
/// out-space states, noise 0.2, discount 0.95, values on `[0, 20]`.
pub fn room1_benchmark() -> (Mdp, Region, ValueBounds) {
    let (mdp, partition) = four_rooms(&GridworldSpec::default()).expect("default spec is valid");
    let bounds = ValueBounds { v_min: 0.0, v_max: 20.0 };
    (mdp, partition.regions[0].clone(), bounds)
}

/// A dense random MDP with rewards in `[-1, 1]`. Each row is supported on a
/// random nonempty subset of states.
pub fn random_mdp(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Result<Mdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states.max(1)) {
        let forced = rng.gen_range(0..n_states);
        for (j, p) in row.iter_mut().enumerate() {
            if j == forced || rng.gen_bool(0.5) {
                *p = rng.gen_range(0.05..1.0);
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    let reward = (0..n_states * n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Mdp::new(n_states, n_actions, transition, reward, discount)
}

/// ASCII map: `#` walls, `D` open doors, `.` cells, `+`/`-` reward cells
/// (absorbing ones as `*`/`_`).
pub fn render(spec: &GridworldSpec) -> Result<String> {
    spec.validate()?;
    let (h, w) = (spec.room_height, spec.room_width);
    let out_rows = spec.room_rows * (h + 1) + 1;
    let out_cols = spec.room_cols * (w + 1) + 1;
    let mut canvas = vec![vec!['#'; out_cols]; out_rows];
    let at = |row: usize, col: usize| (row + row / h + 1, col + col / w + 1);
    for row in 0..spec.rows() {
        for col in 0..spec.cols() {
            let (y, x) = at(row, col);
            canvas[y][x] = '.';
        }
    }
    for r in &spec.rewards {
        let (y, x) = at(r.row, r.col);
        canvas[y][x] = match (r.magnitude >= 0.0, r.absorbing) {
            (true, true) => '*',
            (true, false) => '+',
            (false, true) => '_',
            (false, false) => '-',
        };
    }
    for d in spec.door_list() {
        let ([ar, ac], [br, bc]) = if d.a <= d.b { (d.a, d.b) } else { (d.b, d.a) };
        let (y, x) = if ar == br {
            let (y, x) = at(ar * h + d.offset, bc * w);
            (y, x - 1)
        } else {
            let (y, x) = at(br * h, ac * w + d.offset);
            (y - 1, x)
        };
        canvas[y][x] = 'D';
    }
    let mut text = String::new();
    for line in canvas {
        text.extend(line);
        text.push('\n');
    }
    Ok(text)
}
