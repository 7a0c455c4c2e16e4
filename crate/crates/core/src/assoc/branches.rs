//! Ranked alternative assignments for hypothesis branching.
//!
//! After the optimal assignment is found, the problem is re-solved with that full
//! assignment excluded (Murty's partitioning: each subproblem forbids one cell of a
//! previous solution and fixes the cells before it). This visits assignments in
//! order of non-decreasing cost and never repeats one.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::hungarian::{is_forbidden, solve_assignment, CostMatrix, LinearAssignment};

struct Node {
    cost: f64,
    seq: u64,
    solution: LinearAssignment,
    forced: Vec<(usize, usize)>,
    forbidden: Vec<(usize, usize)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Min-heap on (cost, insertion order).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn constrained(
    base: &CostMatrix,
    forced: &[(usize, usize)],
    forbidden: &[(usize, usize)],
) -> CostMatrix {
    let mut m = base.clone();
    for &(r, c) in forced {
        let keep = base.get(r, c);
        for j in 0..m.cols() {
            m.set(r, j, f64::INFINITY);
        }
        for i in 0..m.rows() {
            m.set(i, c, f64::INFINITY);
        }
        m.set(r, c, keep);
    }
    for &(r, c) in forbidden {
        m.set(r, c, f64::INFINITY);
    }
    m
}

/// Returns up to `max_branches` assignments sorted by ascending cost, best first.
/// Enumeration stops once the next candidate costs more than `best.cost + plausibility_gap`.
/// `best` must be optimal for `c`; it is always the first element.
pub fn generate_branches(
    c: &CostMatrix,
    best: &LinearAssignment,
    max_branches: usize,
    plausibility_gap: f64,
) -> Vec<LinearAssignment> {
    let mut out = vec![best.clone()];
    if max_branches <= 1 || c.rows() == 0 {
        return out;
    }
    let limit = best.cost + plausibility_gap;
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;

    let mut partition = |node_forced: &[(usize, usize)],
                         node_forbidden: &[(usize, usize)],
                         sol: &LinearAssignment,
                         heap: &mut BinaryHeap<Node>| {
        // Rows already fixed by the parent constraints stay fixed in every child.
        let free_pairs: Vec<(usize, usize)> = sol
            .pairs()
            .filter(|&(r, col)| col != usize::MAX && !node_forced.iter().any(|&(fr, _)| fr == r))
            .collect();
        let mut forced = node_forced.to_vec();
        for &(r, col) in &free_pairs {
            let mut forbidden = node_forbidden.to_vec();
            forbidden.push((r, col));
            let m = constrained(c, &forced, &forbidden);
            if let Ok(s) = solve_assignment(&m) {
                let valid = s
                    .pairs()
                    .all(|(rr, cc)| cc != usize::MAX && !is_forbidden(m.get(rr, cc)));
                if valid {
                    heap.push(Node {
                        cost: s.cost,
                        seq,
                        solution: s,
                        forced: forced.clone(),
                        forbidden,
                    });
                    seq += 1;
                }
            }
            forced.push((r, col));
        }
    };

    partition(&[], &[], best, &mut heap);
    while out.len() < max_branches {
        let Some(node) = heap.pop() else { break };
        if node.cost > limit {
            break;
        }
        partition(&node.forced, &node.forbidden, &node.solution, &mut heap);
        out.push(node.solution);
    }
    out
}
