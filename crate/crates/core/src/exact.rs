//! Exact solver for the discrete transportation LP.
//!
//! The LP is the min-cost flow of value `mass(p)` on the bipartite network
//! `source -> supply i -> demand j -> sink`. Source and sink arcs are
//! saturated by any flow of that value, so the solver works on the
//! transport arcs alone with node balances `p_i` and `-q_j`.
//!
//! The solver is a primal network simplex with an artificial root. The
//! spanning tree is kept strongly feasible (zero-flow tree arcs point toward
//! the root), and the leaving arc is the last blocking arc on the pivot
//! cycle. That rule prevents cycling under degenerate pivots whatever arc
//! enters, so the entering arc is chosen by plain most-negative pricing.

use std::time::Instant;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ot::{balance, transport_cost, CostMatrix, Marginal, TransportPlan};
use crate::report::SolveReport;

pub const DEFAULT_MAX_VARIABLES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Source,
    Supply(usize),
    Demand(usize),
    Sink,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowArc {
    pub tail: Node,
    pub head: Node,
    pub cost: f64,
    /// `f64::INFINITY` for transport arcs.
    pub capacity: f64,
}

/// The s-t network whose min-cost flow of value `mass(p)` is the OT plan.
///
/// Arc order: `m` source arcs, `m * n` transport arcs row-major, `n` sink
/// arcs.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    m: usize,
    n: usize,
    arcs: Vec<FlowArc>,
    flow_value: f64,
}

impl FlowNetwork {
    pub fn supply_nodes(&self) -> usize {
        self.m
    }

    pub fn demand_nodes(&self) -> usize {
        self.n
    }

    /// Supply and demand nodes plus the virtual source and sink.
    pub fn node_count(&self) -> usize {
        self.m + self.n + 2
    }

    pub fn arcs(&self) -> &[FlowArc] {
        &self.arcs
    }

    pub fn flow_value(&self) -> f64 {
        self.flow_value
    }

    pub fn source_arc(&self, i: usize) -> usize {
        i
    }

    pub fn transport_arc(&self, i: usize, j: usize) -> usize {
        self.m + i * self.n + j
    }

    pub fn sink_arc(&self, j: usize) -> usize {
        self.m + self.m * self.n + j
    }

    /// Arc flows carrying `plan` from the source to the sink.
    pub fn flow_of(&self, plan: &TransportPlan) -> Result<Vec<f64>> {
        if (plan.nrows(), plan.ncols()) != (self.m, self.n) {
            return Err(crate::error::dims(
                format!("{}x{}", self.m, self.n),
                format!("{}x{}", plan.nrows(), plan.ncols()),
            ));
        }
        let mut flow = vec![0.0; self.arcs.len()];
        for (i, r) in plan.row_sums().iter().enumerate() {
            flow[self.source_arc(i)] = *r;
        }
        for ((i, j), x) in plan.entries().indexed_iter() {
            flow[self.transport_arc(i, j)] = *x;
        }
        for (j, c) in plan.col_sums().iter().enumerate() {
            flow[self.sink_arc(j)] = *c;
        }
        Ok(flow)
    }

    /// Reads the transport arcs of an arc-flow vector back into a plan.
    pub fn plan_of(&self, flow: &[f64]) -> Result<TransportPlan> {
        if flow.len() != self.arcs.len() {
            return Err(crate::error::dims(self.arcs.len(), flow.len()));
        }
        let entries =
            Array2::from_shape_fn((self.m, self.n), |(i, j)| flow[self.transport_arc(i, j)]);
        TransportPlan::new(entries)
    }

    /// Net outflow at each node, indexed source, supplies, demands, sink.
    pub fn excess(&self, flow: &[f64]) -> Vec<f64> {
        let mut excess = vec![0.0; self.node_count()];
        for (arc, f) in self.arcs.iter().zip(flow) {
            excess[self.node_index(arc.tail)] += f;
            excess[self.node_index(arc.head)] -= f;
        }
        excess
    }

    pub fn node_index(&self, node: Node) -> usize {
        match node {
            Node::Source => 0,
            Node::Supply(i) => 1 + i,
            Node::Demand(j) => 1 + self.m + j,
            Node::Sink => 1 + self.m + self.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactConfig {
    /// Largest `m * n` accepted.
    pub max_variables: usize,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self {
            max_variables: DEFAULT_MAX_VARIABLES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub plan: TransportPlan,
    pub optimal_cost: f64,
    /// Number of strictly positive plan entries.
    pub basis_size: usize,
    /// Dual potentials with `u_i + v_j <= C_ij`, tight on positive flow.
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
    pub report: SolveReport,
}

fn check_instance(cost: &CostMatrix, p: &Marginal, q: &Marginal, cfg: &ExactConfig) -> Result<Marginal> {
    if cost.nrows() != p.len() || cost.ncols() != q.len() {
        return Err(crate::error::dims(
            format!("{}x{}", p.len(), q.len()),
            format!("{}x{}", cost.nrows(), cost.ncols()),
        ));
    }
    let variables = p.len() * q.len();
    if variables > cfg.max_variables {
        return Err(Error::Capacity {
            variables,
            cap: cfg.max_variables,
        });
    }
    balance(p, q)
}

pub fn build_flow_network(cost: &CostMatrix, p: &Marginal, q: &Marginal) -> Result<FlowNetwork> {
    build_flow_network_with(cost, p, q, &ExactConfig::default())
}

pub fn build_flow_network_with(
    cost: &CostMatrix,
    p: &Marginal,
    q: &Marginal,
    cfg: &ExactConfig,
) -> Result<FlowNetwork> {
    let q = check_instance(cost, p, q, cfg)?;
    let (m, n) = (p.len(), q.len());
    let mut arcs = Vec::with_capacity(m * n + m + n);
    for (i, w) in p.weights().iter().enumerate() {
        arcs.push(FlowArc {
            tail: Node::Source,
            head: Node::Supply(i),
            cost: 0.0,
            capacity: *w,
        });
    }
    for ((i, j), c) in cost.entries().indexed_iter() {
        arcs.push(FlowArc {
            tail: Node::Supply(i),
            head: Node::Demand(j),
            cost: *c,
            capacity: f64::INFINITY,
        });
    }
    for (j, w) in q.weights().iter().enumerate() {
        arcs.push(FlowArc {
            tail: Node::Demand(j),
            head: Node::Sink,
            cost: 0.0,
            capacity: *w,
        });
    }
    Ok(FlowNetwork {
        m,
        n,
        arcs,
        flow_value: p.mass(),
    })
}

pub fn exact_ot(cost: &CostMatrix, p: &Marginal, q: &Marginal) -> Result<ExactSolution> {
    exact_ot_with(cost, p, q, &ExactConfig::default())
}

pub fn exact_ot_with(
    cost: &CostMatrix,
    p: &Marginal,
    q: &Marginal,
    cfg: &ExactConfig,
) -> Result<ExactSolution> {
    let q = check_instance(cost, p, q, cfg)?;
    let start = Instant::now();
    let mut simplex = NetworkSimplex::new(cost, p.weights().as_slice().unwrap(), q.weights().as_slice().unwrap());
    let pivots = simplex.solve()?;
    let (m, n) = (p.len(), q.len());
    let entries = Array2::from_shape_fn((m, n), |(i, j)| simplex.flow[i * n + j]);
    let plan = TransportPlan::new(entries)?;
    let optimal_cost = transport_cost(&plan, cost)?;
    let row_potentials = (0..m).map(|i| -simplex.pi[i]).collect();
    let col_potentials = (0..n).map(|j| simplex.pi[m + j]).collect();
    let basis_size = plan.positive_entries();
    let final_residual = crate::ot::marginal_residual(&plan, p, &q)?;
    Ok(ExactSolution {
        report: SolveReport {
            method: "exact".into(),
            iterations: pivots,
            final_residual,
            cost: optimal_cost,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            converged: true,
            log_domain: false,
        },
        plan,
        optimal_cost,
        basis_size,
        row_potentials,
        col_potentials,
    })
}

/// Largest complementary-slackness violation of a primal/dual pair:
/// `max(u_i + v_j - C_ij)` over all arcs and `|u_i + v_j - C_ij|` over arcs
/// with positive flow.
pub fn certificate_gap(cost: &CostMatrix, sol: &ExactSolution) -> f64 {
    let mut gap: f64 = 0.0;
    for ((i, j), c) in cost.entries().indexed_iter() {
        let slack = sol.row_potentials[i] + sol.col_potentials[j] - c;
        gap = gap.max(slack);
        if sol.plan.entries()[[i, j]] > 0.0 {
            gap = gap.max(slack.abs());
        }
    }
    gap
}

/// Tree-based primal network simplex on the transport arcs.
///
/// Nodes `0..m` are supplies, `m..m+n` demands, `m+n` the artificial root.
/// Arcs `0..m*n` are transport arcs; arc `m*n + v` joins node `v` and the
/// root.
struct NetworkSimplex {
    m: usize,
    n: usize,
    tail: Vec<usize>,
    head: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    balance: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// `pred[v]` is oriented `v -> parent[v]`.
    up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    children: Vec<Vec<usize>>,
    order: Vec<usize>,
    cost_tol: f64,
    flow_tol: f64,
}

impl NetworkSimplex {
    fn new(cost: &CostMatrix, p: &[f64], q: &[f64]) -> Self {
        let (m, n) = (p.len(), q.len());
        let nodes = m + n + 1;
        let root = m + n;
        let real = m * n;
        let arcs = real + m + n;
        let cmax = cost.max();
        let artificial = (cmax + 1.0) * nodes as f64;

        let mut tail = Vec::with_capacity(arcs);
        let mut head = Vec::with_capacity(arcs);
        let mut arc_cost = Vec::with_capacity(arcs);
        for ((i, j), c) in cost.entries().indexed_iter() {
            tail.push(i);
            head.push(m + j);
            arc_cost.push(*c);
        }
        let mut balance: Vec<f64> = p.to_vec();
        balance.extend(q.iter().map(|x| -x));
        balance.push(0.0);

        let mut flow = vec![0.0; arcs];
        let mut parent = vec![root; nodes];
        let mut pred = vec![usize::MAX; nodes];
        let mut up = vec![false; nodes];
        let mut pi = vec![0.0; nodes];
        for v in 0..m + n {
            let e = real + v;
            pred[v] = e;
            if balance[v] >= 0.0 {
                // supplies (and empty demands) drain into the root for free
                tail.push(v);
                head.push(root);
                arc_cost.push(0.0);
                flow[e] = balance[v];
                up[v] = true;
                pi[v] = 0.0;
            } else {
                tail.push(root);
                head.push(v);
                arc_cost.push(artificial);
                flow[e] = -balance[v];
                up[v] = false;
                pi[v] = artificial;
            }
        }
        parent[root] = usize::MAX;
        let mut in_tree = vec![false; arcs];
        for e in real..arcs {
            in_tree[e] = true;
        }
        let mass: f64 = p.iter().sum();
        let mut depth = vec![1; nodes];
        depth[root] = 0;
        Self {
            m,
            n,
            tail,
            head,
            cost: arc_cost,
            flow,
            in_tree,
            balance,
            parent,
            pred,
            up,
            depth,
            pi,
            children: vec![Vec::new(); nodes],
            order: Vec::with_capacity(nodes),
            cost_tol: 1e-12 * (cmax + 1.0),
            flow_tol: 1e-14 * mass.max(1.0),
        }
    }

    fn root(&self) -> usize {
        self.m + self.n
    }

    fn reduced_cost(&self, e: usize) -> f64 {
        self.cost[e] + self.pi[self.tail[e]] - self.pi[self.head[e]]
    }

    fn entering_arc(&self) -> Option<usize> {
        let mut best = None;
        let mut best_rc = -self.cost_tol;
        for e in 0..self.cost.len() {
            if self.in_tree[e] {
                continue;
            }
            let rc = self.reduced_cost(e);
            if rc < best_rc {
                best_rc = rc;
                best = Some(e);
            }
        }
        best
    }

    fn solve(&mut self) -> Result<usize> {
        let arcs = self.cost.len();
        // generous bound; a strongly feasible pivot sequence cannot cycle
        let pivot_cap = 1000 + 50 * arcs.max(self.m + self.n);
        let mut pivots = 0;
        while let Some(entering) = self.entering_arc() {
            self.pivot(entering)?;
            pivots += 1;
            if pivots > pivot_cap {
                return Err(Error::Solver(format!("no optimum after {pivots} pivots")));
            }
        }
        self.recompute_flows();
        let real = self.m * self.n;
        if let Some(e) = (real..arcs).find(|&e| self.flow[e] > self.flow_tol) {
            return Err(Error::Solver(format!(
                "artificial arc {} still carries flow {}",
                e - real,
                self.flow[e]
            )));
        }
        Ok(pivots)
    }

    /// Apex of the cycle closed by `(a, b)`.
    fn join(&self, mut a: usize, mut b: usize) -> usize {
        while a != b {
            if self.depth[a] > self.depth[b] {
                a = self.parent[a];
            } else if self.depth[b] > self.depth[a] {
                b = self.parent[b];
            } else {
                a = self.parent[a];
                b = self.parent[b];
            }
        }
        a
    }

    fn pivot(&mut self, entering: usize) -> Result<()> {
        let first = self.tail[entering];
        let second = self.head[entering];
        let join = self.join(first, second);

        // Flow travels first -> second over the entering arc, up from
        // second to the join, and down from the join to first. Ties keep
        // the last blocking arc in that orientation.
        let mut delta = f64::INFINITY;
        let mut leaving_node = usize::MAX;
        let mut on_first_side = false;
        let mut u = first;
        while u != join {
            // traversed parent -> u: an up arc loses flow
            let d = if self.up[u] { self.flow[self.pred[u]] } else { f64::INFINITY };
            if d < delta - self.flow_tol {
                delta = d;
                leaving_node = u;
                on_first_side = true;
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            // traversed u -> parent: a down arc loses flow
            let d = if self.up[u] { f64::INFINITY } else { self.flow[self.pred[u]] };
            if d <= delta + self.flow_tol {
                delta = d.min(delta);
                leaving_node = u;
                on_first_side = false;
            }
            u = self.parent[u];
        }
        if leaving_node == usize::MAX || !delta.is_finite() {
            return Err(Error::Solver("unbounded pivot cycle".into()));
        }
        let delta = delta.max(0.0);

        if delta > 0.0 {
            self.flow[entering] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                self.flow[e] += if self.up[u] { -delta } else { delta };
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                self.flow[e] += if self.up[u] { delta } else { -delta };
                u = self.parent[u];
            }
        }
        let leaving = self.pred[leaving_node];
        if self.flow[leaving].abs() <= self.flow_tol {
            self.flow[leaving] = 0.0;
        }

        // Re-hang the subtree cut off by the leaving arc under the entering
        // arc, reversing the path between them.
        let (mut node, mut new_parent) = if on_first_side { (first, second) } else { (second, first) };
        let mut new_arc = entering;
        loop {
            let old_parent = self.parent[node];
            let old_arc = self.pred[node];
            self.parent[node] = new_parent;
            self.pred[node] = new_arc;
            self.up[node] = self.tail[new_arc] == node;
            if node == leaving_node {
                break;
            }
            new_parent = node;
            new_arc = old_arc;
            node = old_parent;
        }
        self.in_tree[leaving] = false;
        self.in_tree[entering] = true;
        self.refresh_tree();
        Ok(())
    }

    /// Recomputes depth, potentials and the root-first node order.
    fn refresh_tree(&mut self) {
        let root = self.root();
        for c in &mut self.children {
            c.clear();
        }
        for v in 0..self.parent.len() {
            if v != root {
                self.children[self.parent[v]].push(v);
            }
        }
        self.order.clear();
        self.order.push(root);
        self.depth[root] = 0;
        self.pi[root] = 0.0;
        let mut k = 0;
        while k < self.order.len() {
            let u = self.order[k];
            k += 1;
            for idx in 0..self.children[u].len() {
                let v = self.children[u][idx];
                let e = self.pred[v];
                self.depth[v] = self.depth[u] + 1;
                // tree arcs have zero reduced cost
                self.pi[v] = if self.up[v] { self.pi[u] - self.cost[e] } else { self.pi[u] + self.cost[e] };
                self.order.push(v);
            }
        }
    }

    /// Tree flows are determined by the balances; recompute them leaf-first
    /// so float drift from pivoting does not reach the returned plan.
    fn recompute_flows(&mut self) {
        self.refresh_tree();
        let mut excess = self.balance.clone();
        for e in 0..self.flow.len() {
            if !self.in_tree[e] {
                self.flow[e] = 0.0;
            }
        }
        for k in (1..self.order.len()).rev() {
            let v = self.order[k];
            let e = self.pred[v];
            let f = if self.up[v] { excess[v] } else { -excess[v] };
            self.flow[e] = if f > 0.0 { f } else { 0.0 };
            let parent = self.parent[v];
            excess[parent] += excess[v];
        }
    }
}
