//! Flow utilities on complete directed graphs: shortest paths, min-cost
//! rebalancing, cycle decomposition and maximum ratio cycles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("flow is unbalanced at location {location} by {imbalance:e}")]
    UnbalancedFlow { location: usize, imbalance: f64 },
    #[error("negative flow {value} on edge ({i},{j})")]
    NegativeFlow { i: usize, j: usize, value: f64 },
    #[error("no path from {from} to {to}")]
    Unreachable { from: usize, to: usize },
}

/// All-pairs shortest paths over the edges where `weight` is `Some`.
#[derive(Clone, Debug)]
pub struct ShortestPaths {
    pub dist: Grid<f64>,
    next: Grid<Option<usize>>,
}

impl ShortestPaths {
    pub fn floyd_warshall(weight: &Grid<Option<f64>>) -> Self {
        let n = weight.n();
        let mut dist = Grid::from_fn(n, |i, j| if i == j { 0.0 } else { weight[(i, j)].unwrap_or(f64::INFINITY) });
        let mut next = Grid::from_fn(n, |i, j| weight[(i, j)].map(|_| j));
        for k in 0..n {
            for i in 0..n {
                let dik = dist[(i, k)];
                if !dik.is_finite() {
                    continue;
                }
                for j in 0..n {
                    let through = dik + dist[(k, j)];
                    if through < dist[(i, j)] {
                        dist[(i, j)] = through;
                        next[(i, j)] = next[(i, k)];
                    }
                }
            }
        }
        Self { dist, next }
    }

    /// Node sequence from `from` to `to`, inclusive. A single node when equal.
    pub fn path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        if from == to {
            return Some(vec![from]);
        }
        let mut path = vec![from];
        let mut at = from;
        while at != to {
            at = self.next[(at, to)]?;
            path.push(at);
            if path.len() > self.dist.n() + 1 {
                return None;
            }
        }
        Some(path)
    }
}

/// Uncapacitated min-cost transport of node excesses over a complete graph
/// with nonnegative edge costs.
///
/// `excess[i] > 0` must leave node `i`, `excess[i] < 0` must arrive. Returns
/// the edge flows and their total cost.
pub fn min_cost_rebalance(excess: &[f64], cost: &Grid<f64>) -> Result<(Grid<f64>, f64), NetworkError> {
    let n = cost.n();
    let sp = ShortestPaths::floyd_warshall(&cost.map(|_, _, &c| Some(c)));
    let sources: Vec<usize> = (0..n).filter(|&i| excess[i] > 0.0).collect();
    let sinks: Vec<usize> = (0..n).filter(|&i| excess[i] < 0.0).collect();
    let mut flow = Grid::zeros(n);
    if sources.is_empty() || sinks.is_empty() {
        return Ok((flow, 0.0));
    }
    let (ns, nt) = (sources.len(), sinks.len());
    let mut g = FlowGraph::new(ns + nt + 2);
    let (s, t) = (ns + nt, ns + nt + 1);
    let total_out: f64 = sources.iter().map(|&i| excess[i]).sum();
    let total_in: f64 = sinks.iter().map(|&j| -excess[j]).sum();
    let big = total_out.max(total_in) * 2.0 + 1.0;
    for (a, &i) in sources.iter().enumerate() {
        g.add_edge(s, a, excess[i], 0.0);
    }
    for (b, &j) in sinks.iter().enumerate() {
        g.add_edge(ns + b, t, -excess[j], 0.0);
    }
    let mut pair_edges = Vec::with_capacity(ns * nt);
    for (a, &i) in sources.iter().enumerate() {
        for (b, &j) in sinks.iter().enumerate() {
            let d = sp.dist[(i, j)];
            if !d.is_finite() {
                continue;
            }
            pair_edges.push((g.add_edge(a, ns + b, big, d), i, j));
        }
    }
    g.run(s, t, total_out.min(total_in));
    let mut total = 0.0;
    for (e, i, j) in pair_edges {
        let amount = g.flow(e);
        if amount <= 0.0 {
            continue;
        }
        let path = sp.path(i, j).ok_or(NetworkError::Unreachable { from: i, to: j })?;
        for w in path.windows(2) {
            flow[(w[0], w[1])] += amount;
            total += amount * cost[(w[0], w[1])];
        }
    }
    Ok((flow, total))
}

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

/// Residual graph for successive shortest paths with Dijkstra potentials.
struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
    original_cap: Vec<f64>,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        Self { edges: Vec::new(), adj: vec![Vec::new(); nodes], original_cap: Vec::new() }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { to, cap, cost });
        self.edges.push(Edge { to: from, cap: 0.0, cost: -cost });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        self.original_cap.push(cap);
        self.original_cap.push(0.0);
        id
    }

    fn flow(&self, edge: usize) -> f64 {
        self.original_cap[edge] - self.edges[edge].cap
    }

    fn run(&mut self, s: usize, t: usize, demand: f64) {
        let nodes = self.adj.len();
        let eps = 1e-13 * (1.0 + demand);
        let mut potential = vec![0.0; nodes];
        let mut sent = 0.0;
        while demand - sent > eps {
            let mut dist = vec![f64::INFINITY; nodes];
            let mut prev: Vec<Option<usize>> = vec![None; nodes];
            let mut done = vec![false; nodes];
            dist[s] = 0.0;
            loop {
                let u = (0..nodes).filter(|&v| !done[v] && dist[v].is_finite()).min_by(|&a, &b| dist[a].total_cmp(&dist[b]));
                let Some(u) = u else { break };
                done[u] = true;
                for &e in &self.adj[u] {
                    let edge = &self.edges[e];
                    if edge.cap <= eps {
                        continue;
                    }
                    let reduced = (edge.cost + potential[u] - potential[edge.to]).max(0.0);
                    let nd = dist[u] + reduced;
                    if nd < dist[edge.to] {
                        dist[edge.to] = nd;
                        prev[edge.to] = Some(e);
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            for v in 0..nodes {
                if dist[v].is_finite() {
                    potential[v] += dist[v];
                }
            }
            let mut push = demand - sent;
            let mut v = t;
            while let Some(e) = prev[v] {
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while let Some(e) = prev[v] {
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                v = self.edges[e ^ 1].to;
            }
            sent += push;
        }
    }
}

/// A simple directed cycle `nodes[0] -> nodes[1] -> ... -> nodes[0]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cycle(pub Vec<usize>);

impl Cycle {
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.0.len();
        (0..k).map(move |a| (self.0[a], self.0[(a + 1) % k]))
    }

    /// Rotated to start at its smallest location.
    pub fn canonical(mut self) -> Self {
        if let Some(pos) = self.0.iter().enumerate().min_by_key(|(_, v)| **v).map(|(k, _)| k) {
            self.0.rotate_left(pos);
        }
        self
    }

    /// Driver surplus rate `sum (p - c) / sum d` along the cycle.
    pub fn surplus_rate(&self, p: &Grid<f64>, c: &Grid<f64>, d: &Grid<f64>) -> f64 {
        let (num, den) = self.edges().fold((0.0, 0.0), |(a, b), (i, j)| (a + p[(i, j)] - c[(i, j)], b + d[(i, j)]));
        num / den
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleDecomposition {
    pub cycles: Vec<(Cycle, f64)>,
}

impl CycleDecomposition {
    pub fn reconstruct(&self, n: usize) -> Grid<f64> {
        let mut y = Grid::zeros(n);
        for (cycle, w) in &self.cycles {
            for (i, j) in cycle.edges() {
                y[(i, j)] += w;
            }
        }
        y
    }
}

/// Greedy decomposition of a balanced nonnegative flow into simple cycles.
pub fn cycle_decompose(y: &Grid<f64>) -> Result<CycleDecomposition, NetworkError> {
    let n = y.n();
    let scale = y.as_slice().iter().cloned().fold(0.0, f64::max);
    for (i, j, &v) in y.iter_indexed() {
        if v < 0.0 {
            return Err(NetworkError::NegativeFlow { i, j, value: v });
        }
    }
    let tol = 1e-9 * (1.0 + scale);
    for k in 0..n {
        let imbalance = y.row_sum(k) - y.col_sum(k);
        if imbalance.abs() > tol {
            return Err(NetworkError::UnbalancedFlow { location: k, imbalance });
        }
    }
    let eps = 1e-13 * scale;
    let mut rest = y.clone();
    let mut cycles = Vec::new();
    for start in 0..n {
        loop {
            if rest.row(start).iter().all(|&v| v <= eps) {
                break;
            }
            let mut pos = vec![usize::MAX; n];
            let mut walk = vec![start];
            pos[start] = 0;
            let cycle = loop {
                let u = *walk.last().unwrap();
                let row = rest.row(u);
                let next = (0..n).filter(|&j| row[j] > eps).max_by(|&a, &b| row[a].total_cmp(&row[b]));
                let Some(v) = next else {
                    return Err(NetworkError::UnbalancedFlow { location: u, imbalance: rest.row_sum(u) - rest.col_sum(u) });
                };
                if pos[v] != usize::MAX {
                    break walk[pos[v]..].to_vec();
                }
                pos[v] = walk.len();
                walk.push(v);
            };
            let cycle = Cycle(cycle);
            let w = cycle.edges().map(|(i, j)| rest[(i, j)]).fold(f64::INFINITY, f64::min);
            for (i, j) in cycle.edges() {
                rest[(i, j)] -= w;
                if rest[(i, j)] <= eps {
                    rest[(i, j)] = 0.0;
                }
            }
            cycles.push((cycle.canonical(), w));
        }
    }
    Ok(CycleDecomposition { cycles })
}

/// Finds a cycle with `sum (w - lambda d) > 0` by Bellman-Ford on the
/// negated weights, if one exists.
fn positive_cycle(w: &Grid<f64>, d: &Grid<f64>, lambda: f64) -> Option<Cycle> {
    let n = w.n();
    for i in 0..n {
        if w[(i, i)] - lambda * d[(i, i)] > 0.0 {
            return Some(Cycle(vec![i]));
        }
    }
    let cost = |i: usize, j: usize| lambda * d[(i, j)] - w[(i, j)];
    let mut dist = vec![0.0; n];
    let mut pred = vec![usize::MAX; n];
    let mut last = None;
    for _ in 0..n {
        last = None;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nd = dist[i] + cost(i, j);
                if nd < dist[j] - 1e-14 * (1.0 + dist[j].abs()) {
                    dist[j] = nd;
                    pred[j] = i;
                    last = Some(j);
                }
            }
        }
        last?;
    }
    let mut v = last?;
    for _ in 0..n {
        v = pred[v];
    }
    let mut cycle = vec![v];
    let mut u = pred[v];
    while u != v {
        cycle.push(u);
        u = pred[u];
    }
    cycle.reverse();
    Some(Cycle(cycle))
}

/// The cycle maximizing `sum w / sum d` (with `d > 0`) and its ratio.
pub fn max_ratio_cycle(w: &Grid<f64>, d: &Grid<f64>) -> (Cycle, f64) {
    let n = w.n();
    let ratio = |c: &Cycle| {
        let (a, b) = c.edges().fold((0.0, 0.0), |(a, b), (i, j)| (a + w[(i, j)], b + d[(i, j)]));
        a / b
    };
    let mut best = (0..n).map(|i| Cycle(vec![i])).max_by(|a, b| ratio(a).total_cmp(&ratio(b))).unwrap();
    let mut lo = ratio(&best);
    let mut hi = w.iter_indexed().map(|(i, j, &v)| v / d[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
    while hi - lo > 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
        let mid = 0.5 * (lo + hi);
        match positive_cycle(w, d, mid) {
            Some(c) => {
                let r = ratio(&c);
                if r > lo {
                    lo = r;
                    best = c;
                }
                lo = lo.max(mid);
            }
            None => hi = mid,
        }
    }
    let r = ratio(&best);
    (best.canonical(), r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposes_naive_example_flow() {
        let y = Grid::from_row_major(vec![0.0, 1.0, 1.0, 20.0]).unwrap();
        let dec = cycle_decompose(&y).unwrap();
        let mut weights: Vec<f64> = dec.cycles.iter().map(|(_, w)| *w).collect();
        weights.sort_by(f64::total_cmp);
        assert_eq!(weights, vec![1.0, 20.0]);
        assert_eq!(dec.reconstruct(2), y);
    }

    #[test]
    fn zero_flow_is_empty() {
        assert!(cycle_decompose(&Grid::zeros(3)).unwrap().cycles.is_empty());
    }

    #[test]
    fn unbalanced_flow_rejected() {
        let y = Grid::from_row_major(vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(matches!(cycle_decompose(&y), Err(NetworkError::UnbalancedFlow { .. })));
    }

    #[test]
    fn rebalance_uses_shortest_route() {
        // moving one unit 0 -> 2 is cheaper via 1
        let cost = Grid::from_row_major(vec![0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0]).unwrap();
        let (flow, total) = min_cost_rebalance(&[1.0, 0.0, -1.0], &cost).unwrap();
        assert_eq!(total, 2.0);
        assert_eq!(flow[(0, 1)], 1.0);
        assert_eq!(flow[(1, 2)], 1.0);
    }

    #[test]
    fn max_ratio_on_two_cycle() {
        let w = Grid::from_row_major(vec![0.0, 3.0, 1.0, 0.0]).unwrap();
        let d = Grid::from_row_major(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (c, r) = max_ratio_cycle(&w, &d);
        assert_eq!(c, Cycle(vec![0, 1]));
        assert!((r - 2.0).abs() < 1e-10);
    }
}
