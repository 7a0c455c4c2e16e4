//! Incremental kd-tree with exact Euclidean range queries.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct KdNode {
    point: Vec<f64>,
    payload: u64,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdIndex {
    dim: usize,
    nodes: Vec<KdNode>,
}

impl KdIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, nodes: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn insert(&mut self, point: Vec<f64>, payload: u64) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::LengthMismatch(point.len(), self.dim));
        }
        let idx = self.nodes.len();
        if idx == 0 {
            self.nodes.push(KdNode { point, payload, axis: 0, left: None, right: None });
            return Ok(());
        }
        let mut cur = 0;
        loop {
            let node = &self.nodes[cur];
            let go_left = point[node.axis] < node.point[node.axis];
            let next = if go_left { node.left } else { node.right };
            match next {
                Some(n) => cur = n,
                None => {
                    let axis = (node.axis + 1) % self.dim;
                    if go_left {
                        self.nodes[cur].left = Some(idx);
                    } else {
                        self.nodes[cur].right = Some(idx);
                    }
                    self.nodes.push(KdNode { point, payload, axis, left: None, right: None });
                    return Ok(());
                }
            }
        }
    }

    /// Payloads of every point with `‖p − query‖₂ ≤ radius`, in insertion order.
    pub fn range(&self, query: &[f64], radius: f64) -> Result<Vec<u64>> {
        if query.len() != self.dim {
            return Err(Error::LengthMismatch(query.len(), self.dim));
        }
        if self.nodes.is_empty() {
            return Ok(vec![]);
        }
        let mut hits: Vec<usize> = vec![];
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            let d2: f64 = n.point.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r2 {
                hits.push(i);
            }
            let diff = query[n.axis] - n.point[n.axis];
            // Points equal on the axis go right, so the left side needs a strict bound.
            if let Some(l) = n.left {
                if diff < 0.0 || diff * diff <= r2 {
                    stack.push(l);
                }
            }
            if let Some(r) = n.right {
                if diff >= 0.0 || diff * diff <= r2 {
                    stack.push(r);
                }
            }
        }
        hits.sort_unstable();
        Ok(hits.into_iter().map(|i| self.nodes[i].payload).collect())
    }
}
