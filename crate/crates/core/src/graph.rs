//! Directed graphs, weight matrices, and the local weight-scheme view.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Tolerance for row/column stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance for mean/mass conservation assertions (accumulated rounding).
pub const CONSERVATION_TOL: f64 = 1e-10;

/// Stochasticity class of a square weight matrix.
///
/// `Pull`: every row sums to 1 (scaling applied at the receiver).
/// `Push`: every column sums to 1 (scaling applied at the sender).
/// `Doubly`: both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixClass {
    Pull,
    Push,
    Doubly,
    None,
}

/// A directed communication graph of `size` nodes together with its
/// weight matrix `W` (row-major, `size * size`).
///
/// Convention: `W[i][j]` is the weight node `i` applies to the copy of
/// `x_j` sent from node `j`; it may be nonzero only when edge `(j, i)`
/// exists or `i == j`. Edges never contain self-loops; self-influence is
/// always the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    size: usize,
    edges: BTreeSet<(usize, usize)>,
    weights: Vec<f64>,
}

impl Topology {
    pub fn new(size: usize, edges: BTreeSet<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::Topology("size must be positive".into()));
        }
        if weights.len() != size * size {
            return Err(Error::Dimension(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                size * size
            )));
        }
        for &(s, d) in &edges {
            if s == d {
                return Err(Error::Topology(format!("self-loop on node {s}")));
            }
            if s >= size || d >= size {
                return Err(Error::Topology(format!(
                    "edge ({s},{d}) outside size {size}"
                )));
            }
        }
        for i in 0..size {
            for j in 0..size {
                if i != j && weights[i * size + j] != 0.0 && !edges.contains(&(j, i)) {
                    return Err(Error::Topology(format!(
                        "W[{i}][{j}] nonzero but edge ({j},{i}) missing"
                    )));
                }
            }
        }
        Ok(Topology {
            size,
            edges,
            weights,
        })
    }

    /// Builds the graph implied by a weight matrix: edge (j,i) exists iff
    /// `W[i][j] != 0` for `i != j`.
    pub fn from_weights(size: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != size * size {
            return Err(Error::Dimension(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                size * size
            )));
        }
        let mut edges = BTreeSet::new();
        for i in 0..size {
            for j in 0..size {
                if i != j && weights[i * size + j] != 0.0 {
                    edges.insert((j, i));
                }
            }
        }
        Topology::new(size, edges, weights)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.size..(i + 1) * self.size]
    }

    pub fn classify(&self) -> MatrixClass {
        classify_weight_matrix(&self.weights, self.size).expect("square by construction")
    }

    /// In-neighbors `N(i)` (senders to `i`) and out-neighbors `M(i)`
    /// (receivers from `i`), sorted ascending.
    pub fn neighbor_sets(&self, rank: usize) -> Result<NeighborSets> {
        if rank >= self.size {
            return Err(Error::RankOutOfRange {
                rank,
                size: self.size,
            });
        }
        let mut in_neighbors = Vec::new();
        let mut out_neighbors = Vec::new();
        for &(s, d) in &self.edges {
            if d == rank {
                in_neighbors.push(s);
            }
            if s == rank {
                out_neighbors.push(d);
            }
        }
        in_neighbors.sort_unstable();
        out_neighbors.sort_unstable();
        Ok(NeighborSets {
            in_neighbors,
            out_neighbors,
        })
    }

    pub fn in_neighbors(&self, rank: usize) -> Result<Vec<usize>> {
        Ok(self.neighbor_sets(rank)?.in_neighbors)
    }

    pub fn out_neighbors(&self, rank: usize) -> Result<Vec<usize>> {
        Ok(self.neighbor_sets(rank)?.out_neighbors)
    }

    /// Graph with every edge reversed and `W` transposed.
    pub fn reversed(&self) -> Topology {
        let n = self.size;
        let edges = self.edges.iter().map(|&(s, d)| (d, s)).collect();
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                weights[j * n + i] = self.weights[i * n + j];
            }
        }
        Topology::new(n, edges, weights).expect("reversal preserves validity")
    }
}

/// A node's neighbor sets under a directed topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub in_neighbors: Vec<usize>,
    pub out_neighbors: Vec<usize>,
}

/// Returns the strongest satisfied stochasticity class of a square matrix
/// given row-major. Row and column sums are compared to 1 within
/// [`STOCHASTIC_TOL`].
pub fn classify_weight_matrix(weights: &[f64], n: usize) -> Result<MatrixClass> {
    if weights.len() != n * n {
        return Err(Error::Dimension(format!(
            "matrix has {} entries, not square of order {}",
            weights.len(),
            n
        )));
    }
    let mut rows_ok = true;
    let mut cols_ok = true;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| weights[i * n + j]).sum();
        if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
            rows_ok = false;
        }
        let col_sum: f64 = (0..n).map(|j| weights[j * n + i]).sum();
        if (col_sum - 1.0).abs() > STOCHASTIC_TOL {
            cols_ok = false;
        }
    }
    Ok(match (rows_ok, cols_ok) {
        (true, true) => MatrixClass::Doubly,
        (true, false) => MatrixClass::Pull,
        (false, true) => MatrixClass::Push,
        (false, false) => MatrixClass::None,
    })
}

/// Reference partial averaging: `W · X` by straightforward dense
/// multiplication, where `X` stacks per-node iterates as rows. Used as
/// ground truth in tests, never on the runtime path.
pub fn dense_partial_average_oracle(
    weights: &[f64],
    n: usize,
    x: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if weights.len() != n * n {
        return Err(Error::Dimension("oracle: W must be n x n".into()));
    }
    if x.len() != n {
        return Err(Error::Dimension(format!(
            "oracle: X has {} rows, expected {}",
            x.len(),
            n
        )));
    }
    let d = x.first().map(|r| r.len()).unwrap_or(0);
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("oracle: ragged X".into()));
    }
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let w = weights[i * n + j];
            if w != 0.0 {
                for k in 0..d {
                    out[i][k] += w * x[j][k];
                }
            }
        }
    }
    Ok(out)
}

/// A node's local, per-round view of partial-averaging weights.
///
/// Exactly four configurations are meaningful:
/// static (no arguments, weights read from the global topology),
/// push (self + dst), pull (self + src), and push-pull (all three).
/// `src_weights[j]` is the receiver-side scale applied to the tensor
/// coming from `j`; `dst_weights[j]` the sender-side scale applied to the
/// copy sent to `j`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    Static,
    Push {
        self_weight: f64,
        dst_weights: BTreeMap<usize, f64>,
    },
    Pull {
        self_weight: f64,
        src_weights: BTreeMap<usize, f64>,
    },
    PushPull {
        self_weight: f64,
        src_weights: BTreeMap<usize, f64>,
        dst_weights: BTreeMap<usize, f64>,
    },
}

impl WeightScheme {
    pub fn push(self_weight: f64, dst_weights: BTreeMap<usize, f64>) -> Self {
        WeightScheme::Push {
            self_weight,
            dst_weights,
        }
    }

    pub fn pull(self_weight: f64, src_weights: BTreeMap<usize, f64>) -> Self {
        WeightScheme::Pull {
            self_weight,
            src_weights,
        }
    }

    pub fn push_pull(
        self_weight: f64,
        src_weights: BTreeMap<usize, f64>,
        dst_weights: BTreeMap<usize, f64>,
    ) -> Self {
        WeightScheme::PushPull {
            self_weight,
            src_weights,
            dst_weights,
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, WeightScheme::Static)
    }

    pub fn self_weight(&self) -> f64 {
        match self {
            WeightScheme::Static => 0.0,
            WeightScheme::Push { self_weight, .. }
            | WeightScheme::Pull { self_weight, .. }
            | WeightScheme::PushPull { self_weight, .. } => *self_weight,
        }
    }

    /// Receiver-side scales; for push-only schemes the implied scale is 1.
    pub fn src_weights(&self) -> Option<&BTreeMap<usize, f64>> {
        match self {
            WeightScheme::Pull { src_weights, .. }
            | WeightScheme::PushPull { src_weights, .. } => Some(src_weights),
            _ => None,
        }
    }

    /// Sender-side scales; for pull-only schemes the implied scale is 1.
    pub fn dst_weights(&self) -> Option<&BTreeMap<usize, f64>> {
        match self {
            WeightScheme::Push { dst_weights, .. }
            | WeightScheme::PushPull { dst_weights, .. } => Some(dst_weights),
            _ => None,
        }
    }

    /// Validates rank bounds, rejects the caller's own rank in either map
    /// (self influence is always the self weight), and — when
    /// `require_stochastic` — restricts weights to [0, 1].
    pub fn validate(&self, rank: usize, size: usize, require_stochastic: bool) -> Result<()> {
        let check_map = |map: &BTreeMap<usize, f64>, which: &str| -> Result<()> {
            for (&r, &w) in map {
                if r >= size {
                    return Err(Error::WeightScheme(format!(
                        "{which} rank {r} out of range for size {size}"
                    )));
                }
                if r == rank {
                    return Err(Error::WeightScheme(format!(
                        "own rank {r} appears in {which}; use self_weight"
                    )));
                }
                if !w.is_finite() {
                    return Err(Error::WeightScheme(format!(
                        "{which} weight for rank {r} not finite"
                    )));
                }
                if require_stochastic && !(0.0..=1.0).contains(&w) {
                    return Err(Error::WeightScheme(format!(
                        "{which} weight {w} for rank {r} outside [0,1]"
                    )));
                }
            }
            Ok(())
        };
        let sw = self.self_weight();
        if !self.is_static() {
            if !sw.is_finite() {
                return Err(Error::WeightScheme("self_weight not finite".into()));
            }
            if require_stochastic && !(0.0..=1.0).contains(&sw) {
                return Err(Error::WeightScheme(format!(
                    "self_weight {sw} outside [0,1]"
                )));
            }
        }
        if let Some(src) = self.src_weights() {
            check_map(src, "src")?;
        }
        if let Some(dst) = self.dst_weights() {
            check_map(dst, "dst")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n * n]
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        w
    }

    #[test]
    fn classify_identity_is_doubly() {
        assert_eq!(
            classify_weight_matrix(&identity(3), 3).unwrap(),
            MatrixClass::Doubly
        );
    }

    #[test]
    fn classify_uniform_is_doubly() {
        assert_eq!(
            classify_weight_matrix(&uniform(4), 4).unwrap(),
            MatrixClass::Doubly
        );
    }

    #[test]
    fn classify_row_stochastic_only_is_pull() {
        // Rows sum to 1 by construction; column 0 sums to 1.4.
        let n = 5;
        let mut w = uniform(n);
        for i in 0..n {
            w[i * n] += 0.08;
            w[i * n + 4] -= 0.08;
        }
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w[i * n + j]).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
        let col0: f64 = (0..n).map(|i| w[i * n]).sum();
        assert!((col0 - 1.4).abs() < 1e-12);
        assert_eq!(classify_weight_matrix(&w, n).unwrap(), MatrixClass::Pull);
    }

    #[test]
    fn classify_rejects_non_square() {
        assert!(classify_weight_matrix(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn transpose_swaps_pull_and_push() {
        let n = 5;
        let mut w = uniform(n);
        for i in 0..n {
            w[i * n] += 0.08;
            w[i * n + 4] -= 0.08;
        }
        let topo = Topology::from_weights(n, w).unwrap();
        assert_eq!(topo.classify(), MatrixClass::Pull);
        assert_eq!(topo.reversed().classify(), MatrixClass::Push);
    }

    #[test]
    fn neighbor_sets_match_paper_example() {
        // Five nodes; edges into the last node from everyone else, and
        // from it to nodes 0 and 2 (the paper's node-5 example, 0-based).
        let n = 5;
        let mut edges = BTreeSet::new();
        for j in 0..4 {
            edges.insert((j, 4));
        }
        edges.insert((4, 0));
        edges.insert((4, 2));
        let topo = Topology::new(n, edges, identity(n)).unwrap();
        let ns = topo.neighbor_sets(4).unwrap();
        assert_eq!(ns.in_neighbors, vec![0, 1, 2, 3]);
        assert_eq!(ns.out_neighbors, vec![0, 2]);
    }

    #[test]
    fn neighbor_sets_empty_graph() {
        let topo = Topology::new(3, BTreeSet::new(), identity(3)).unwrap();
        for r in 0..3 {
            let ns = topo.neighbor_sets(r).unwrap();
            assert!(ns.in_neighbors.is_empty());
            assert!(ns.out_neighbors.is_empty());
        }
        assert!(topo.neighbor_sets(3).is_err());
    }

    #[test]
    fn neighbor_sets_directed_ring() {
        // i -> i+1 mod 4
        let n = 4;
        let edges: BTreeSet<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let topo = Topology::new(n, edges, identity(n)).unwrap();
        let ns = topo.neighbor_sets(2).unwrap();
        assert_eq!(ns.in_neighbors, vec![1]);
        assert_eq!(ns.out_neighbors, vec![3]);
    }

    #[test]
    fn reversal_swaps_neighbor_sets() {
        let n = 4;
        let edges: BTreeSet<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let topo = Topology::new(n, edges, identity(n)).unwrap();
        let rev = topo.reversed();
        for r in 0..n {
            let a = topo.neighbor_sets(r).unwrap();
            let b = rev.neighbor_sets(r).unwrap();
            assert_eq!(a.in_neighbors, b.out_neighbors);
            assert_eq!(a.out_neighbors, b.in_neighbors);
        }
    }

    #[test]
    fn oracle_identity_and_mean() {
        let x = vec![vec![0.0], vec![3.0], vec![6.0]];
        let out = dense_partial_average_oracle(&identity(3), 3, &x).unwrap();
        assert_eq!(out, x);
        let out = dense_partial_average_oracle(&uniform(3), 3, &x).unwrap();
        for row in out {
            assert!((row[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_rejects_mismatch() {
        let x = vec![vec![0.0], vec![3.0]];
        assert!(dense_partial_average_oracle(&uniform(3), 3, &x).is_err());
    }

    #[test]
    fn scheme_rejects_own_rank_and_out_of_range() {
        let mut dst = BTreeMap::new();
        dst.insert(1usize, 0.5);
        let s = WeightScheme::push(0.5, dst.clone());
        assert!(s.validate(0, 4, true).is_ok());
        assert!(s.validate(1, 4, true).is_err()); // own rank in dst
        assert!(s.validate(0, 1, true).is_err()); // out of range
        dst.insert(2, 1.5);
        let s = WeightScheme::push(0.5, dst);
        assert!(s.validate(0, 4, true).is_err()); // not in [0,1]
        assert!(s.validate(0, 4, false).is_ok()); // arbitrary reals allowed
    }
}
