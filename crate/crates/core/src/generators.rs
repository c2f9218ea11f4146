//! Seeded problem families.
//!
//! Every generator is a pure function of its sizes and seed. Randomness
//! comes from `ChaCha8Rng::seed_from_u64(seed)` with one stream per
//! component, so adding a component never shifts the draws of another.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::problem::QpProblem;
use crate::sparse::CscMatrix;

/// Diagonal shift making the random families strictly convex.
pub const CONVEXITY_SHIFT: f64 = 1e-4;
/// Nonzero density of the constraint matrices in the sparse family.
pub const SPARSE_DENSITY: f64 = 5e-4;
/// Neighbours per point in the sparse Laplacian graph.
pub const KNN: usize = 3;

const STREAM_TARGET: u64 = 0;
const STREAM_POINTS: u64 = 1;
const STREAM_EQ: u64 = 2;
const STREAM_INEQ: u64 = 3;
const STREAM_COST: u64 = 4;
const STREAM_P: u64 = 5;
const STREAM_DIRECTION: u64 = 6;
const STREAM_THETA: u64 = 7;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normals(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            std * v
        })
        .collect()
}

fn ones(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

/// Euclidean projection of `x ~ N(0, I)` onto the probability simplex.
/// Returns the problem and `x`.
pub fn gen_simplex(n: usize, seed: u64) -> (QpProblem, Vec<f64>) {
    assert!(n >= 1, "simplex needs n >= 1");
    let x = normals(&mut rng(seed, STREAM_TARGET), n, 1.0);
    (simplex_problem(&x), x)
}

/// `min ‖z − x‖²` over `1ᵀz = 1, 0 ≤ z ≤ 1`.
pub fn simplex_problem(x: &[f64]) -> QpProblem {
    let n = x.len();
    let mut c = Vec::with_capacity(2 * n);
    for i in 0..n {
        c.push((i, i, -1.0));
        c.push((n + i, i, 1.0));
    }
    let mut d = vec![0.0; n];
    d.extend(ones(n));
    QpProblem::new(
        CscMatrix::diagonal(&vec![2.0; n]),
        x.iter().map(|v| -2.0 * v).collect(),
        CscMatrix::from_triplets(1, n, &(0..n).map(|j| (0, j, 1.0)).collect::<Vec<_>>()).expect("valid row"),
        vec![1.0],
        CscMatrix::from_triplets(2 * n, n, &c).expect("valid rows"),
        d,
    )
    .expect("simplex problem is well formed")
}

/// Projection of `m_points` points `x_j ~ N(0, 100 I)` in `dim` dimensions
/// onto chains with links bounded by 1 in the max norm. Variable
/// `(j, k)` sits at index `j·dim + k`.
pub fn gen_chain(m_points: usize, dim: usize, seed: u64) -> (QpProblem, Vec<f64>) {
    assert!(m_points >= 2 && dim >= 1, "chain needs at least two points");
    let x = normals(&mut rng(seed, STREAM_TARGET), m_points * dim, 10.0);
    (chain_problem(&x, m_points, dim), x)
}

/// `min Σ‖z_j − x_j‖²` s.t. `±(z_j − z_{j+1}) ≤ 1` per coordinate.
pub fn chain_problem(x: &[f64], m_points: usize, dim: usize) -> QpProblem {
    let n = m_points * dim;
    assert_eq!(x.len(), n, "chain target has the wrong length");
    let rows = 2 * dim * (m_points - 1);
    let mut c = Vec::with_capacity(2 * rows);
    for j in 0..m_points - 1 {
        for k in 0..dim {
            let row = 2 * (j * dim + k);
            let (a, b) = (j * dim + k, (j + 1) * dim + k);
            c.extend([(row, a, 1.0), (row, b, -1.0), (row + 1, a, -1.0), (row + 1, b, 1.0)]);
        }
    }
    QpProblem::new(
        CscMatrix::diagonal(&vec![2.0; n]),
        x.iter().map(|v| -2.0 * v).collect(),
        CscMatrix::zeros(0, n),
        vec![],
        CscMatrix::from_triplets(rows, n, &c).expect("valid rows"),
        ones(rows),
    )
    .expect("chain problem is well formed")
}

/// Random sparse `rows × cols` matrix with standard normal entries at the
/// given density; empty rows get one entry in a random column.
fn sparse_normal(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> CscMatrix {
    let target = ((rows * cols) as f64 * density).round() as usize;
    let mut positions = BTreeSet::new();
    while positions.len() < target {
        positions.insert((rng.random_range(0..cols), rng.random_range(0..rows)));
    }
    let mut filled = vec![false; rows];
    let mut used = vec![false; cols];
    for &(j, i) in &positions {
        filled[i] = true;
        used[j] = true;
    }
    // Repairs draw from still-empty columns first so that repaired rows
    // stay linearly independent while such columns last.
    let mut spare: Vec<usize> = (0..cols).filter(|&j| !used[j]).collect();
    spare.shuffle(rng);
    for (i, f) in filled.iter().enumerate() {
        if !f {
            let j = spare.pop().unwrap_or_else(|| rng.random_range(0..cols));
            positions.insert((j, i));
        }
    }
    let trip: Vec<_> = positions
        .into_iter()
        .map(|(j, i)| (i, j, StandardNormal.sample(rng)))
        .collect();
    CscMatrix::from_triplets(rows, cols, &trip).expect("positions are distinct")
}

/// Graph Laplacian of the symmetrized `k`-nearest-neighbour graph on
/// seeded uniform points in the unit square.
pub fn knn_laplacian(n: usize, k: usize, seed: u64) -> CscMatrix {
    let mut r = rng(seed, STREAM_POINTS);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                (dx * dx + dy * dy, j)
            })
            .collect();
        let kk = k.min(dist.len());
        if kk == 0 {
            continue;
        }
        dist.select_nth_unstable_by(kk - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &dist[..kk] {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let mut degree = vec![0.0; n];
    let mut trip = Vec::with_capacity(2 * edges.len() + n);
    for &(i, j) in &edges {
        degree[i] += 1.0;
        degree[j] += 1.0;
        trip.push((i, j, -1.0));
        trip.push((j, i, -1.0));
    }
    for (i, d) in degree.into_iter().enumerate() {
        trip.push((i, i, d));
    }
    CscMatrix::from_triplets(n, n, &trip).expect("edges are distinct")
}

/// Sparse family: `P = LᵀL + 1e-4 I` for a k-NN Laplacian `L`, `m = n`,
/// `p = n/2`, and `z = 1` strictly feasible for the inequalities.
pub fn gen_random_sparse(n: usize, seed: u64) -> QpProblem {
    assert!(n >= 10, "sparse family needs n >= 10");
    let (m, p) = (n, n / 2);
    let lap = knn_laplacian(n, KNN, seed);
    let p_mat = lap.transpose().matmul(&lap).add(&CscMatrix::diagonal(&vec![CONVEXITY_SHIFT; n]));
    let a = sparse_normal(p, n, SPARSE_DENSITY, &mut rng(seed, STREAM_EQ));
    let c = sparse_normal(m, n, SPARSE_DENSITY, &mut rng(seed, STREAM_INEQ));
    finish_random(p_mat, a, c, seed)
}

fn finish_random(p_mat: CscMatrix, a: CscMatrix, c: CscMatrix, seed: u64) -> QpProblem {
    let n = p_mat.nrows();
    let b = a.mul_vec(&ones(n));
    let d: Vec<f64> = c.mul_vec(&ones(n)).into_iter().map(|v| v + 1.0).collect();
    let q = normals(&mut rng(seed, STREAM_COST), n, 1.0);
    QpProblem::new(p_mat, q, a, b, c, d).expect("random problem is well formed")
}

/// Dense family with `m = n`, `p = n/2`.
pub fn gen_random_dense(n: usize, seed: u64) -> QpProblem {
    gen_random_dense_with(n, n, n / 2, seed)
}

/// Dense family: `P = QᵀQ + 1e-4 I` with `Q_ij ~ U(0, 1)`, standard normal
/// `A` and `C`, `b = A1`, `d = C1 + 1`.
pub fn gen_random_dense_with(n: usize, m: usize, p: usize, seed: u64) -> QpProblem {
    assert!(n >= 1, "dense family needs n >= 1");
    let mut r = rng(seed, STREAM_P);
    let qm = DMatrix::from_fn(n, n, |_, _| r.random::<f64>());
    let p_mat = qm.transpose() * &qm + DMatrix::identity(n, n) * CONVEXITY_SHIFT;
    let p_mat = (&p_mat + p_mat.transpose()) * 0.5;
    let mut ra = rng(seed, STREAM_EQ);
    let a = DMatrix::from_fn(p, n, |_, _| StandardNormal.sample(&mut ra));
    let mut rc = rng(seed, STREAM_INEQ);
    let c = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rc));
    finish_random(
        CscMatrix::from_dense(&p_mat),
        CscMatrix::from_dense(&a),
        CscMatrix::from_dense(&c),
        seed,
    )
}

/// Standard normal vector scaled to unit Euclidean length.
pub fn unit_direction(n: usize, seed: u64) -> Vec<f64> {
    let v = normals(&mut rng(seed, STREAM_DIRECTION), n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// Uniform sample of the two-parameter box.
pub fn two_param_sample(seed: u64) -> (f64, f64) {
    let mut r = rng(seed, STREAM_THETA);
    let [(a0, a1), (b0, b1)] = TWO_PARAM_BOX;
    (r.random_range(a0..a1), r.random_range(b0..b1))
}

/// Parameter box of the two-parameter family.
pub const TWO_PARAM_BOX: [(f64, f64); 2] = [(0.0, 2.0), (0.0, 2.0)];

/// `min ½‖z‖² − z₁ − z₂` s.t. `z₁ ≤ θ₁`, `z₂ ≤ θ₂`, `z₁ + z₂ ≤ 1.5`,
/// `−z₁ ≤ 2`.
///
/// Over the box the active set takes the values `{2}`, `{0}`, `{1}`,
/// `{0,1}`, `{0,2}` and `{1,2}`; the last row is never active.
pub fn gen_two_param_family(theta1: f64, theta2: f64) -> QpProblem {
    QpProblem::new(
        CscMatrix::identity(2),
        vec![-1.0, -1.0],
        CscMatrix::zeros(0, 2),
        vec![],
        CscMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.0]]),
        vec![theta1, theta2, 1.5, 2.0],
    )
    .expect("two-parameter problem is well formed")
}
