//! Swarm guidance on a grid: cells are states, agents move between
//! 4-neighbors (or stay put), and no cell may hold more than a fixed share
//! of the swarm.
//!
//! States are the free cells in row-major order.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::invariant::{InvariantError, InvariantSetResult};
use crate::markov::{check_distribution, Graph, MarkovChain, MarkovError, DISTRIBUTION_TOL};
use crate::polytope::Polyhedron;
use crate::synthesis::EntryBound;

/// Agents per simulation shard. Fixed so that results do not depend on
/// the number of worker threads.
pub const SHARD_SIZE: usize = 4096;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("free cells are not connected: ({0}, {1}) is unreachable from the first free cell")]
    Disconnected(usize, usize),
    #[error("stationary mass {mass} at cell ({row}, {col}) is not below the density cap {cap}")]
    CapViolated { row: usize, col: usize, mass: f64, cap: f64 },
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

/// Wire form and builder input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub obstacles: Vec<[usize; 2]>,
    pub terminals: Vec<[usize; 2]>,
    pub density_cap: f64,
    pub terminal_mass: f64,
    /// Optional bounds on transition probabilities, by state index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entry_bounds: Vec<EntryBound>,
}

impl GridConfig {
    /// 7×7 grid, obstacles on the inner cross, terminals in the corners.
    pub fn canonical() -> Self {
        Self {
            width: 7,
            height: 7,
            obstacles: vec![[1, 3], [3, 1], [3, 3], [3, 5], [5, 3]],
            terminals: vec![[0, 0], [0, 6], [6, 0], [6, 6]],
            density_cap: 0.3,
            terminal_mass: 0.225,
            entry_bounds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    config: GridConfig,
    free_cells: Vec<(usize, usize)>,
    /// `index[r][c]` is the state of a free cell.
    index: Vec<Vec<Option<usize>>>,
    terminals: BTreeSet<usize>,
}

/// Graph, safe set and target distribution of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub graph: Graph,
    pub safe: Polyhedron,
    pub v: DVector<f64>,
}

impl GridWorld {
    pub fn new(config: GridConfig) -> Result<Self, GridError> {
        let (w, h) = (config.width, config.height);
        if w == 0 || h == 0 {
            return Err(GridError::Invalid("width and height must be positive".into()));
        }
        if !(config.density_cap > 0.0 && config.density_cap <= 1.0) {
            return Err(GridError::Invalid(format!("density_cap {} outside (0, 1]", config.density_cap)));
        }
        if !(config.terminal_mass > 0.0 && config.terminal_mass.is_finite()) {
            return Err(GridError::Invalid(format!("terminal_mass {} must be positive", config.terminal_mass)));
        }
        let mut blocked = vec![vec![false; w]; h];
        for &[r, c] in &config.obstacles {
            if r >= h || c >= w {
                return Err(GridError::Invalid(format!("obstacle ({r}, {c}) outside the grid")));
            }
            blocked[r][c] = true;
        }
        let mut index = vec![vec![None; w]; h];
        let mut free_cells = Vec::new();
        for (r, row) in blocked.iter().enumerate() {
            for (c, &b) in row.iter().enumerate() {
                if !b {
                    index[r][c] = Some(free_cells.len());
                    free_cells.push((r, c));
                }
            }
        }
        if free_cells.is_empty() {
            return Err(GridError::Invalid("no free cells".into()));
        }
        let mut terminals = BTreeSet::new();
        for &[r, c] in &config.terminals {
            if r >= h || c >= w {
                return Err(GridError::Invalid(format!("terminal ({r}, {c}) outside the grid")));
            }
            let Some(s) = index[r][c] else {
                return Err(GridError::Invalid(format!("terminal ({r}, {c}) is an obstacle")));
            };
            if !terminals.insert(s) {
                return Err(GridError::Invalid(format!("terminal ({r}, {c}) listed twice")));
            }
        }
        let grid = Self { config, free_cells, index, terminals };
        grid.check_connected()?;
        Ok(grid)
    }

    pub fn canonical() -> Self {
        Self::new(GridConfig::canonical()).expect("canonical grid is valid")
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn num_states(&self) -> usize {
        self.free_cells.len()
    }

    pub fn free_cells(&self) -> &[(usize, usize)] {
        &self.free_cells
    }

    pub fn state_of(&self, row: usize, col: usize) -> Option<usize> {
        self.index.get(row)?.get(col).copied().flatten()
    }

    pub fn terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        self.terminals.iter().copied()
    }

    fn neighbors(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = self.free_cells[s];
        let cand = [
            r.checked_sub(1).map(|r| (r, c)),
            Some((r + 1, c)),
            c.checked_sub(1).map(|c| (r, c)),
            Some((r, c + 1)),
        ];
        cand.into_iter().flatten().filter_map(|(r, c)| self.state_of(r, c))
    }

    fn check_connected(&self) -> Result<(), GridError> {
        let n = self.num_states();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(s) = queue.pop_front() {
            for t in self.neighbors(s) {
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
        if let Some(s) = seen.iter().position(|x| !x) {
            let (r, c) = self.free_cells[s];
            return Err(GridError::Disconnected(r, c));
        }
        Ok(())
    }

    /// Mass on each non-terminal cell.
    pub fn floor_mass(&self) -> f64 {
        let t = self.terminals.len() as f64;
        let rest = (self.num_states() - self.terminals.len()) as f64;
        if rest == 0.0 {
            0.0
        } else {
            (1.0 - t * self.config.terminal_mass) / rest
        }
    }

    pub fn graph(&self) -> Graph {
        let n = self.num_states();
        let mut adj = vec![vec![false; n]; n];
        for (s, row) in adj.iter_mut().enumerate() {
            row[s] = true;
            for t in self.neighbors(s) {
                row[t] = true;
            }
        }
        Graph::from_bool(adj).expect("square by construction")
    }

    /// Terminal mass on terminals, the remainder spread evenly elsewhere.
    pub fn stationary_target(&self) -> Result<DVector<f64>, GridError> {
        let n = self.num_states();
        let t = self.terminals.len();
        let total = t as f64 * self.config.terminal_mass;
        if t == n {
            if (total - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(GridError::Invalid(format!("terminal masses sum to {total}, expected 1")));
            }
        } else if total >= 1.0 {
            return Err(GridError::Invalid(format!(
                "terminal masses sum to {total}; nothing left for the other cells"
            )));
        }
        let floor = self.floor_mass();
        Ok(DVector::from_fn(n, |s, _| {
            if self.terminals.contains(&s) {
                self.config.terminal_mass
            } else {
                floor
            }
        }))
    }

    /// `x ≤ cap` on Δ.
    pub fn safe_set(&self) -> Polyhedron {
        Polyhedron::upper_bounds(DVector::from_element(self.num_states(), self.config.density_cap))
            .expect("finite caps")
    }

    /// Graph, density-cap polyhedron and target `v`, after checking that
    /// the graph is primitive and `v` is strictly below the cap.
    pub fn build(&self) -> Result<Scenario, GridError> {
        let graph = self.graph();
        if !graph.is_primitive() {
            return Err(MarkovError::GraphNotPrimitive.into());
        }
        let v = self.stationary_target()?;
        check_distribution(&v, self.num_states(), DISTRIBUTION_TOL)?;
        let cap = self.config.density_cap;
        for (s, &mass) in v.iter().enumerate() {
            if mass >= cap {
                let (row, col) = self.free_cells[s];
                return Err(GridError::CapViolated { row, col, mass, cap });
            }
        }
        Ok(Scenario { graph, safe: self.safe_set(), v })
    }

    /// One CSV row per grid row; obstacles are left empty.
    pub fn grid_csv(&self, x: &DVector<f64>) -> String {
        let mut out = String::new();
        for r in 0..self.config.height {
            let cells: Vec<String> = (0..self.config.width)
                .map(|c| self.state_of(r, c).map_or(String::new(), |s| format!("{:.16e}", x[s])))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Uniform over free cells.
    pub fn uniform(&self) -> DVector<f64> {
        let n = self.num_states();
        DVector::from_element(n, 1.0 / n as f64)
    }

    /// All mass on one state.
    pub fn point_mass(&self, s: usize) -> DVector<f64> {
        let mut x = DVector::zeros(self.num_states());
        x[s] = 1.0;
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub agent_count: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `counts[k][s]`: agents in state `s` after `k` steps.
    pub counts: Vec<Vec<u64>>,
}

impl EnsembleRun {
    pub fn frequencies(&self, k: usize) -> DVector<f64> {
        let n = self.counts[k].len();
        DVector::from_fn(n, |s, _| self.counts[k][s] as f64 / self.agent_count as f64)
    }

    /// `step,cell_row,cell_col,count`.
    pub fn histogram_csv(&self, grid: &GridWorld) -> String {
        let mut out = String::from("step,cell_row,cell_col,count\n");
        for (k, row) in self.counts.iter().enumerate() {
            for (s, &c) in row.iter().enumerate() {
                let (r, col) = grid.free_cells()[s];
                let _ = writeln!(out, "{k},{r},{col},{c}");
            }
        }
        out
    }

    /// Share of `(step, state)` pairs whose frequency lies within
    /// `3·√(p(1−p)/agents) + 1e-3` of the propagated probability `p`.
    pub fn agreement(&self, chain: &MarkovChain, x0: &DVector<f64>) -> Result<f64, MarkovError> {
        let mut ok = 0usize;
        let mut total = 0usize;
        let a = self.agent_count as f64;
        for (k, x) in chain.trajectory(x0)?.take(self.horizon + 1).enumerate() {
            let f = self.frequencies(k);
            for s in 0..x.len() {
                let p = x[s].clamp(0.0, 1.0);
                let band = 3.0 * (p * (1.0 - p) / a).sqrt() + 1e-3;
                total += 1;
                if (f[s] - p).abs() <= band {
                    ok += 1;
                }
            }
        }
        Ok(ok as f64 / total.max(1) as f64)
    }
}

/// Inverse-CDF sampler over a probability vector.
struct Sampler {
    cdf: Vec<f64>,
    last: usize,
}

impl Sampler {
    fn new(p: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let mut cdf = Vec::new();
        let mut last = 0;
        for (i, x) in p.enumerate() {
            if x > 0.0 {
                last = i;
            }
            acc += x.max(0.0);
            cdf.push(acc);
        }
        Self { cdf, last }
    }

    fn sample(&self, u: f64) -> usize {
        let u = u * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= u).min(self.last)
    }
}

/// Simulate `agents` independent walkers for `horizon` steps.
///
/// Agents are split into shards of [`SHARD_SIZE`]; shard `i` draws from a
/// ChaCha8 generator seeded with `seed` on stream `i`, so the histograms
/// are identical for any thread count and platform.
pub fn simulate_ensemble(
    chain: &MarkovChain,
    x0: &DVector<f64>,
    agents: usize,
    horizon: usize,
    seed: u64,
) -> Result<EnsembleRun, MarkovError> {
    let n = chain.n();
    check_distribution(x0, n, DISTRIBUTION_TOL)?;
    let m: &DMatrix<f64> = chain.matrix();
    let start = Sampler::new(x0.iter().copied());
    let columns: Vec<Sampler> = (0..n).map(|j| Sampler::new(m.column(j).iter().copied())).collect();
    let shards = agents.div_ceil(SHARD_SIZE);
    let per_shard: Vec<Vec<Vec<u64>>> = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let size = SHARD_SIZE.min(agents - shard * SHARD_SIZE);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard as u64);
            let mut pos: Vec<usize> = (0..size).map(|_| start.sample(rng.random::<f64>())).collect();
            let mut counts = vec![vec![0u64; n]; horizon + 1];
            for (k, row) in counts.iter_mut().enumerate() {
                if k > 0 {
                    for p in pos.iter_mut() {
                        *p = columns[*p].sample(rng.random::<f64>());
                    }
                }
                for &p in &pos {
                    row[p] += 1;
                }
            }
            counts
        })
        .collect();
    let mut counts = vec![vec![0u64; n]; horizon + 1];
    for shard in per_shard {
        for (acc, row) in counts.iter_mut().zip(shard) {
            for (a, c) in acc.iter_mut().zip(row) {
                *a += c;
            }
        }
    }
    Ok(EnsembleRun { agent_count: agents, horizon, seed, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonCheck {
    pub k: usize,
    pub max_density: f64,
    pub within_cap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub member: bool,
    pub t_star: usize,
    /// Largest cell density at `k = 0..=t*`.
    pub max_density: Vec<f64>,
    /// `max_k (Gx[k] − g)` over `k = 0..=t*`.
    pub worst_slack: f64,
    pub horizon_checks: Vec<HorizonCheck>,
    /// Densities at `k = 0..=t*`, one entry per state.
    pub densities: Vec<Vec<f64>>,
}

/// Membership of `x0` and its constraint values at `k = 0..=t*`, plus
/// propagation checks at `k = 100` and `k = 1000`.
pub fn scenario_report(
    grid: &GridWorld,
    chain: &MarkovChain,
    result: &InvariantSetResult,
    x0: &DVector<f64>,
) -> Result<ScenarioReport, GridError> {
    let t_star = result.t_star().ok_or(InvariantError::NotConverged)?;
    let member = result.membership(x0)?;
    let cap = grid.config().density_cap;
    let mut densities = Vec::new();
    let mut max_density = Vec::new();
    let mut worst_slack = f64::NEG_INFINITY;
    let mut checks = Vec::new();
    for (k, x) in chain.trajectory(x0)?.take(1001).enumerate() {
        let peak = x.max();
        if k <= t_star {
            densities.push(x.iter().copied().collect());
            max_density.push(peak);
            worst_slack = worst_slack.max(peak - cap);
        }
        if k == 100 || k == 1000 {
            checks.push(HorizonCheck { k, max_density: peak, within_cap: peak <= cap + 1e-8 });
        }
    }
    Ok(ScenarioReport { member, t_star, max_density, worst_slack, horizon_checks: checks, densities })
}

impl ScenarioReport {
    /// `step,cell_row,cell_col,probability` for `k = 0..=t*`.
    pub fn densities_csv(&self, grid: &GridWorld) -> String {
        let mut out = String::from("step,cell_row,cell_col,probability\n");
        for (k, row) in self.densities.iter().enumerate() {
            for (s, p) in row.iter().enumerate() {
                let (r, c) = grid.free_cells()[s];
                let _ = writeln!(out, "{k},{r},{c},{p:.16e}");
            }
        }
        out
    }
}
