//! Independent reference computations used only by tests.
//!
//! Everything here works on a dense weight matrix and never calls into the
//! library's modularity or Louvain code paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::TimeDelta;
use ringwatch_core::corpus::UserId;
use ringwatch_core::graph::{EdgeAttributes, GraphEdge, InteractionGraph};

/// Symmetric pair-weight matrix over nodes `0..n`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub n: usize,
    pub w: Vec<Vec<u64>>,
}

impl Dense {
    pub fn new(n: usize) -> Self {
        Dense { n, w: vec![vec![0; n]; n] }
    }

    pub fn add(&mut self, i: usize, j: usize, k: u64) {
        assert_ne!(i, j);
        self.w[i][j] += k;
        self.w[j][i] += k;
    }

    pub fn edge_total(&self) -> u64 {
        let mut t = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                t += self.w[i][j];
            }
        }
        t
    }

    /// Multigraph with `W(i,j)` parallel edges between users `i+1` and `j+1`,
    /// alternating direction. Every node is present even without edges.
    pub fn to_graph(&self) -> InteractionGraph {
        let mut edges = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                for k in 0..self.w[i][j] {
                    let (a, b) = if k % 2 == 0 { (i, j) } else { (j, i) };
                    edges.push(GraphEdge {
                        asker: a as UserId + 1,
                        answerer: b as UserId + 1,
                        attrs: EdgeAttributes {
                            e_key: format!("{i}-{j}/{k}"),
                            e_accepted: false,
                            e_time: TimeDelta::zero(),
                        },
                    });
                }
            }
        }
        InteractionGraph::from_edges((1..=self.n as UserId).collect::<Vec<_>>(), edges).unwrap()
    }

    pub fn is_connected(&self) -> bool {
        self.components() <= 1
    }

    pub fn components(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut count = 0;
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                for (j, &w) in self.w[i].iter().enumerate() {
                    if w > 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    /// Q = 1/2m Σ_ij [A_ij − k_i k_j / 2m] δ(c_i, c_j), evaluated term by term.
    pub fn modularity(&self, labels: &[usize]) -> f64 {
        let m = self.edge_total() as f64;
        if m == 0.0 {
            return 0.0;
        }
        let k: Vec<f64> = (0..self.n).map(|i| self.w[i].iter().sum::<u64>() as f64).collect();
        let mut q = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if labels[i] == labels[j] {
                    q += self.w[i][j] as f64 - k[i] * k[j] / (2.0 * m);
                }
            }
        }
        q / (2.0 * m)
    }

    /// Best modularity over every set partition of the nodes.
    pub fn optimum(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for_each_partition(self.n, |labels| {
            let q = self.modularity(labels);
            if q > best {
                best = q;
            }
        });
        best
    }
}

/// Calls `f` with every restricted-growth labelling of `n` items.
pub fn for_each_partition(n: usize, mut f: impl FnMut(&[usize])) {
    if n == 0 {
        f(&[]);
        return;
    }
    let mut labels = vec![0usize; n];
    fn rec(pos: usize, max: usize, labels: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if pos == labels.len() {
            f(labels);
            return;
        }
        for c in 0..=max + 1 {
            labels[pos] = c;
            rec(pos + 1, max.max(c), labels, f);
        }
    }
    rec(1, 0, &mut labels, &mut f);
}

/// Dense labels for users `1..=n` from an assignment map.
pub fn labels_of(n: usize, assignment: &BTreeMap<UserId, u32>) -> Vec<usize> {
    (1..=n as UserId).map(|u| assignment[&u] as usize).collect()
}
