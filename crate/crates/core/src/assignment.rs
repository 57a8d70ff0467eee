//! Ranked k-best 2D assignments: a shortest-augmenting-path solver for the
//! optimal assignment plus Murty's partitioning scheme on top of it.
//!
//! Cost matrices are rectangular with rows <= columns; every row must be
//! assigned to a distinct column. Forbidden pairs carry `f64::INFINITY`.
//!
//! Subproblems spawned by Murty's scheme enter the queue with an admissible
//! lower bound (parent cost plus the cheapest reduced-cost alternative on the
//! branch row) and are solved exactly only when they reach the front, which
//! keeps the number of full solves close to the number of emitted solutions.
//! Re-solving from the parent matching with a single augmenting path is not
//! sound: the parent matching minus one edge need not be optimal for its row
//! set, so each surfaced subproblem is solved from scratch on its free rows.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

const NONE: usize = usize::MAX;

/// One ranked assignment: `row_to_col[i]` is the column of row `i`.
pub type RankedAssignment = (Vec<usize>, f64);

#[derive(Debug, Clone)]
struct Matching {
    u: Vec<f64>,
    v: Vec<f64>,
    row_to_col: Vec<usize>,
    col_to_row: Vec<usize>,
}

impl Matching {
    fn new(n_rows: usize, n_cols: usize) -> Self {
        Self {
            u: vec![0.0; n_rows],
            v: vec![0.0; n_cols],
            row_to_col: vec![NONE; n_rows],
            col_to_row: vec![NONE; n_cols],
        }
    }
}

/// Reusable buffers for the augmenting-path search and subproblem solves.
#[derive(Default)]
struct Scratch {
    shortest: Vec<f64>,
    pred_row: Vec<usize>,
    done_col: Vec<bool>,
    visited_rows: Vec<usize>,
    banned_flags: Vec<bool>,
    blocked: Vec<bool>,
    row_fixed: Vec<bool>,
}

impl Scratch {
    fn reset(&mut self, n_cols: usize) {
        self.shortest.clear();
        self.shortest.resize(n_cols, f64::INFINITY);
        self.pred_row.clear();
        self.pred_row.resize(n_cols, NONE);
        self.done_col.clear();
        self.done_col.resize(n_cols, false);
        self.visited_rows.clear();
    }
}

/// Finds a shortest augmenting path for `start_row` and applies it, updating
/// duals and matching in place. Columns with `col_blocked` set are outside
/// the subproblem; `banned` lists columns forbidden for `banned_row` on top
/// of the infinite matrix entries. Returns false if no finite path exists.
fn augment_row(
    costs: &DMatrix<f64>,
    m: &mut Matching,
    start_row: usize,
    col_blocked: &[bool],
    banned_row: usize,
    banned: &[usize],
    scratch: &mut Scratch,
) -> bool {
    let n_cols = costs.ncols();
    scratch.reset(n_cols);
    scratch.banned_flags.clear();
    scratch.banned_flags.resize(n_cols, false);
    for &j in banned {
        scratch.banned_flags[j] = true;
    }
    let Scratch {
        shortest,
        pred_row,
        done_col,
        visited_rows,
        banned_flags,
        ..
    } = scratch;

    let entry = |i: usize, j: usize| -> f64 {
        if i == banned_row && banned_flags[j] {
            f64::INFINITY
        } else {
            costs[(i, j)]
        }
    };

    let mut i = start_row;
    let mut min_val = 0.0;
    let sink;
    loop {
        visited_rows.push(i);
        let mut lowest = f64::INFINITY;
        let mut j_min = NONE;
        for j in 0..n_cols {
            if done_col[j] || col_blocked[j] {
                continue;
            }
            let c = entry(i, j);
            if c.is_finite() {
                let r = min_val + c - m.u[i] - m.v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    pred_row[j] = i;
                }
            }
            if shortest[j] < lowest
                || (shortest[j] == lowest && j_min != NONE && m.col_to_row[j] == NONE)
            {
                lowest = shortest[j];
                j_min = j;
            }
        }
        if !lowest.is_finite() {
            return false;
        }
        min_val = lowest;
        if m.col_to_row[j_min] == NONE {
            sink = j_min;
            break;
        }
        done_col[j_min] = true;
        i = m.col_to_row[j_min];
    }

    // Dual update keeps reduced costs nonnegative and the tree edges tight.
    m.u[start_row] += min_val;
    for &r in visited_rows.iter() {
        if r != start_row {
            m.u[r] += min_val - shortest[m.row_to_col[r]];
        }
    }
    for j in 0..n_cols {
        if done_col[j] {
            m.v[j] -= min_val - shortest[j];
        }
    }

    // Flip the path edges.
    let mut j = sink;
    loop {
        let r = pred_row[j];
        m.col_to_row[j] = r;
        let next = m.row_to_col[r];
        m.row_to_col[r] = j;
        if r == start_row {
            break;
        }
        j = next;
    }
    true
}

/// Solves the optimal assignment of all rows. Returns `(row_to_col, cost)`,
/// or `None` when no feasible assignment exists.
pub fn solve_assignment(costs: &DMatrix<f64>) -> Option<RankedAssignment> {
    let (n_rows, n_cols) = costs.shape();
    if n_rows > n_cols {
        return None;
    }
    let mut m = Matching::new(n_rows, n_cols);
    let mut scratch = Scratch::default();
    let blocked = vec![false; n_cols];
    for row in 0..n_rows {
        if !augment_row(costs, &mut m, row, &blocked, NONE, &[], &mut scratch) {
            return None;
        }
    }
    let cost = (0..n_rows).map(|i| costs[(i, m.row_to_col[i])]).sum();
    Some((m.row_to_col, cost))
}

/// One Murty subproblem: assignments extending the fixed pairs, avoiding the
/// banned columns on the branch row (the smallest free row).
#[derive(Debug, Clone)]
struct SubProblem {
    fixed: Vec<(usize, usize)>,
    branch_row: usize,
    banned: Vec<usize>,
}

impl SubProblem {
    /// Exact solve over the free rows. Fixed pairs block their columns and
    /// contribute their costs directly.
    fn solve(&self, costs: &DMatrix<f64>, scratch: &mut Scratch) -> Option<(Matching, f64)> {
        let (n_rows, n_cols) = costs.shape();
        let mut m = Matching::new(n_rows, n_cols);
        let mut blocked = std::mem::take(&mut scratch.blocked);
        let mut row_fixed = std::mem::take(&mut scratch.row_fixed);
        blocked.clear();
        blocked.resize(n_cols, false);
        row_fixed.clear();
        row_fixed.resize(n_rows, false);
        for &(r, c) in &self.fixed {
            blocked[c] = true;
            row_fixed[r] = true;
        }
        let mut ok = true;
        for (row, &fixed) in row_fixed.iter().enumerate() {
            if fixed {
                continue;
            }
            if !augment_row(costs, &mut m, row, &blocked, self.branch_row, &self.banned, scratch) {
                ok = false;
                break;
            }
        }
        scratch.blocked = blocked;
        scratch.row_fixed = row_fixed;
        if !ok {
            return None;
        }
        for &(r, c) in &self.fixed {
            m.row_to_col[r] = c;
            m.col_to_row[c] = r;
        }
        let cost = (0..n_rows).map(|i| costs[(i, m.row_to_col[i])]).sum();
        Some((m, cost))
    }
}

#[derive(Debug)]
enum Payload {
    /// Exact solution together with the dual prices of its solve.
    Solved(Matching),
    /// Lower-bounded subproblem, solved when it surfaces.
    Pending,
}

#[derive(Debug)]
struct Node {
    /// Exact cost for solved nodes, an admissible lower bound otherwise.
    cost: f64,
    tick: u64,
    sub: SubProblem,
    payload: Payload,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.tick == other.tick
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Reverse ordering: BinaryHeap is a max-heap, we want cheapest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.tick.cmp(&self.tick))
    }
}

/// Returns the `k` lowest-cost assignments in ascending cost order, exactly
/// as exhaustive enumeration would produce them. Fewer than `k` are returned
/// when fewer feasible assignments exist; an infeasible matrix yields an
/// empty list. A matrix with zero rows has the single empty assignment.
pub fn murty_kbest(costs: &DMatrix<f64>, k: usize) -> Vec<RankedAssignment> {
    let (n_rows, n_cols) = costs.shape();
    if k == 0 {
        return vec![];
    }
    if n_rows == 0 {
        return vec![(vec![], 0.0)];
    }
    if n_rows > n_cols {
        return vec![];
    }

    let mut out: Vec<RankedAssignment> = Vec::with_capacity(k.min(64));
    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    let mut tick = 0u64;
    let mut scratch = Scratch::default();

    let root_sub = SubProblem {
        fixed: vec![],
        branch_row: 0,
        banned: vec![],
    };
    let Some((matching, cost)) = root_sub.solve(costs, &mut scratch) else {
        return vec![];
    };
    heap.push(Node {
        cost,
        tick,
        sub: root_sub,
        payload: Payload::Solved(matching),
    });

    while let Some(node) = heap.pop() {
        let (matching, cost) = match node.payload {
            Payload::Solved(m) => (m, node.cost),
            Payload::Pending => {
                let Some((m, exact)) = node.sub.solve(costs, &mut scratch) else {
                    continue;
                };
                // Defer when something cheaper is waiting.
                if heap.peek().is_some_and(|top| top.cost < exact) {
                    tick += 1;
                    heap.push(Node {
                        cost: exact,
                        tick,
                        sub: node.sub,
                        payload: Payload::Solved(m),
                    });
                    continue;
                }
                (m, exact)
            }
        };

        out.push((matching.row_to_col.clone(), cost));
        if out.len() == k {
            break;
        }

        // Partition the remaining solution space over the free rows: child i
        // fixes the first i free rows as assigned here and bans the branch
        // column of free row i.
        let mut row_fixed = vec![false; n_rows];
        let mut col_fixed = vec![false; n_cols];
        for &(r, c) in &node.sub.fixed {
            row_fixed[r] = true;
            col_fixed[c] = true;
        }
        let free_rows: Vec<usize> = (0..n_rows).filter(|&r| !row_fixed[r]).collect();

        let mut fixed = node.sub.fixed.clone();
        for (idx, &row) in free_rows.iter().enumerate() {
            let banned_col = matching.row_to_col[row];
            let mut banned = if idx == 0 {
                node.sub.banned.clone()
            } else {
                Vec::new()
            };
            banned.push(banned_col);

            // Admissible bound: any solution of this child must swap the
            // branch edge for one of nonnegative reduced cost.
            let mut delta = f64::INFINITY;
            for j in 0..n_cols {
                if col_fixed[j] || banned.contains(&j) {
                    continue;
                }
                let c = costs[(row, j)];
                if c.is_finite() {
                    delta = delta.min(c - matching.u[row] - matching.v[j]);
                }
            }
            if delta.is_finite() {
                tick += 1;
                heap.push(Node {
                    cost: cost + delta.max(0.0),
                    tick,
                    sub: SubProblem {
                        fixed: fixed.clone(),
                        branch_row: row,
                        banned,
                    },
                    payload: Payload::Pending,
                });
            }

            fixed.push((row, banned_col));
            col_fixed[banned_col] = true;
        }

    }
    out
}
