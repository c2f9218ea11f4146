//! Fill-reducing symmetric orderings.
//!
//! Saddle-point matrices with a zero (2,2) block cannot be factorized
//! without pivoting under an arbitrary ordering: eliminating a constraint
//! node before any of its primal neighbours meets a zero pivot. The
//! minimum-degree variant here therefore holds each constraint node back
//! until all of its primal neighbours are gone. Under that rule, when the
//! primal block is positive definite, a vanishing pivot can only come from
//! linearly dependent constraint rows.

use std::collections::BTreeSet;

use crate::sparse::CscMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Primal,
    Constraint,
}

/// Patterns denser than this fraction of `N²` are ordered naturally.
const DENSE_FRACTION: f64 = 0.3;

/// Returns `perm` with `perm[k]` the original index eliminated at step `k`.
///
/// `pattern` is any symmetric matrix (one or both triangles may be stored).
/// With `kinds = None` every node is free to go at any time. Natural order
/// is returned for dense patterns, so callers must list primal nodes before
/// constraint nodes.
pub fn minimum_degree(pattern: &CscMatrix, kinds: Option<&[NodeKind]>) -> Vec<usize> {
    let n = pattern.nrows();
    assert_eq!(n, pattern.ncols(), "ordering needs a square matrix");
    if let Some(k) = kinds {
        assert_eq!(k.len(), n);
    }

    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j, _) in pattern.iter() {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let edges: usize = adj.iter().map(BTreeSet::len).sum();
    if n < 3 || (edges as f64) > DENSE_FRACTION * (n as f64) * (n as f64) {
        return (0..n).collect();
    }

    let is_constraint = |v: usize| kinds.is_some_and(|k| k[v] == NodeKind::Constraint);
    // Constraint nodes wait for this many primal neighbours to be eliminated.
    let mut waiting: Vec<usize> = (0..n)
        .map(|v| {
            if is_constraint(v) {
                adj[v].iter().filter(|&&u| !is_constraint(u)).count()
            } else {
                0
            }
        })
        .collect();
    let constraint_neighbours: Vec<Vec<usize>> = (0..n)
        .map(|v| {
            if is_constraint(v) {
                Vec::new()
            } else {
                adj[v].iter().copied().filter(|&u| is_constraint(u)).collect()
            }
        })
        .collect();

    let mut queue: BTreeSet<(usize, usize)> = (0..n)
        .filter(|&v| waiting[v] == 0)
        .map(|v| (adj[v].len(), v))
        .collect();
    let mut eliminated = vec![false; n];
    let mut perm = Vec::with_capacity(n);

    while let Some((_, v)) = queue.pop_first() {
        eliminated[v] = true;
        perm.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            let ready = waiting[u] == 0;
            if ready {
                queue.remove(&(adj[u].len(), u));
            }
            adj[u].remove(&v);
        }
        for (a, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[a + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &constraint_neighbours[v] {
            if !eliminated[u] {
                waiting[u] -= 1;
            }
        }
        for &u in &nbrs {
            if waiting[u] == 0 {
                queue.insert((adj[u].len(), u));
            }
        }
    }

    // Constraint nodes with no primal neighbour at all were eligible from
    // the start, so every node has been placed.
    debug_assert_eq!(perm.len(), n);
    perm
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrow(n: usize) -> CscMatrix {
        // Node 0 couples to everything: a good ordering eliminates it last.
        let mut trip = vec![];
        for i in 0..n {
            trip.push((i, i, 4.0));
            if i > 0 {
                trip.push((0, i, 1.0));
                trip.push((i, 0, 1.0));
            }
        }
        CscMatrix::from_triplets(n, n, &trip).unwrap()
    }

    #[test]
    fn hub_goes_last() {
        let perm = minimum_degree(&arrow(8), None);
        // Once the other leaves are gone the hub ties with the last leaf.
        assert!(invert(&perm)[0] >= 6, "{perm:?}");
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn constraint_waits_for_primal_neighbours() {
        // z0, z1 primal; c2 couples only to z0; c3 couples to z0 and z1.
        let m = CscMatrix::from_triplets(
            4,
            4,
            &[
                (0, 0, 1.0),
                (1, 1, 1.0),
                (0, 2, 1.0),
                (2, 0, 1.0),
                (0, 3, 1.0),
                (3, 0, 1.0),
                (1, 3, 1.0),
                (3, 1, 1.0),
            ],
        )
        .unwrap();
        let kinds = [
            NodeKind::Primal,
            NodeKind::Primal,
            NodeKind::Constraint,
            NodeKind::Constraint,
        ];
        let perm = minimum_degree(&m, Some(&kinds));
        let pos = invert(&perm);
        assert!(pos[2] > pos[0]);
        assert!(pos[3] > pos[0] && pos[3] > pos[1]);
    }
}
