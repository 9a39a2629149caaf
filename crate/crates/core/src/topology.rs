//! Built-in static topologies and dynamic (per-round) weight-scheme
//! generators.
//!
//! Static constructors return doubly-stochastic weight matrices. Dynamic
//! generators are pure functions of `(n, rank, round)`, so every rank
//! derives the same global schedule with no coordination.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{Topology, WeightScheme};

fn require_size(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Topology(format!("need at least 2 nodes, got {n}")));
    }
    Ok(())
}

/// Metropolis-Hastings weight matrix for an undirected adjacency list:
/// `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges, diagonal fills the row
/// to 1. Symmetric and doubly stochastic.
fn mh_matrix(n: usize, adjacency: &[BTreeSet<usize>]) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let mut row_sum = 0.0;
        for &j in &adjacency[i] {
            let v = 1.0 / (1.0 + adjacency[i].len().max(adjacency[j].len()) as f64);
            w[i * n + j] = v;
            row_sum += v;
        }
        w[i * n + i] = 1.0 - row_sum;
    }
    w
}

fn topology_from_adjacency(n: usize, adjacency: Vec<BTreeSet<usize>>) -> Topology {
    let mut edges = BTreeSet::new();
    for (i, nbrs) in adjacency.iter().enumerate() {
        for &j in nbrs {
            edges.insert((i, j));
            edges.insert((j, i));
        }
    }
    let w = mh_matrix(n, &adjacency);
    Topology::new(n, edges, w).expect("construction is valid")
}

/// Undirected ring: node `i` connects to `i ± 1 (mod n)`.
pub fn ring_graph(n: usize) -> Result<Topology> {
    require_size(n)?;
    let mut adjacency = vec![BTreeSet::new(); n];
    for i in 0..n {
        adjacency[i].insert((i + 1) % n);
        adjacency[i].insert((i + n - 1) % n);
    }
    Ok(topology_from_adjacency(n, adjacency))
}

/// Offsets `2^j mod n` for `j = 0..=floor(log2(n-1))`, deduplicated.
fn exponential_offsets(n: usize) -> Vec<usize> {
    let mut offsets = BTreeSet::new();
    let mut step = 1usize;
    while step <= n - 1 {
        offsets.insert(step % n);
        step *= 2;
    }
    offsets.remove(&0);
    offsets.into_iter().collect()
}

/// Static exponential-2 graph: directed edges `i -> (i + 2^j) mod n`.
/// Every node has identical in/out degree `deg`, and uniform weights
/// `1/(deg+1)` on in-edges and the diagonal make `W` doubly stochastic
/// for every `n`.
pub fn exponential_two_graph(n: usize) -> Result<Topology> {
    require_size(n)?;
    let offsets = exponential_offsets(n);
    let deg = offsets.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for &o in &offsets {
            edges.insert((i, (i + o) % n));
        }
    }
    let v = 1.0 / (deg as f64 + 1.0);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = v;
        for &o in &offsets {
            let j = (i + n - o % n) % n; // in-neighbor sending to i
            w[i * n + j] = v;
        }
    }
    Topology::new(n, edges, w)
}

/// Picks the mesh factorization `r x c` with `r` the largest divisor of
/// `n` not exceeding `sqrt(n)`.
pub fn mesh_factors(n: usize) -> (usize, usize) {
    let mut r = 1;
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            r = d;
        }
        d += 1;
    }
    (r, n / r)
}

/// 2-d mesh grid with 4-neighborhoods and Metropolis-Hastings weights.
pub fn mesh_grid_2d(n: usize) -> Result<Topology> {
    require_size(n)?;
    let (rows, cols) = mesh_factors(n);
    let mut adjacency = vec![BTreeSet::new(); n];
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if c + 1 < cols {
                adjacency[id].insert(id + 1);
                adjacency[id + 1].insert(id);
            }
            if r + 1 < rows {
                adjacency[id].insert(id + cols);
                adjacency[id + cols].insert(id);
            }
        }
    }
    Ok(topology_from_adjacency(n, adjacency))
}

/// Star with node 0 at the center, Metropolis-Hastings weights.
pub fn star_graph(n: usize) -> Result<Topology> {
    require_size(n)?;
    let mut adjacency = vec![BTreeSet::new(); n];
    for leaf in 1..n {
        adjacency[0].insert(leaf);
        adjacency[leaf].insert(0);
    }
    Ok(topology_from_adjacency(n, adjacency))
}

/// Fully connected graph with uniform `1/n` weights everywhere, so a
/// neighbor allreduce equals the global average.
pub fn full_graph(n: usize) -> Result<Topology> {
    require_size(n)?;
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.insert((i, j));
            }
        }
    }
    let w = vec![1.0 / n as f64; n * n];
    Topology::new(n, edges, w)
}

/// Builds a built-in topology by its CLI name.
pub fn by_name(name: &str, n: usize) -> Result<Topology> {
    match name {
        "ring" => ring_graph(n),
        "star" => star_graph(n),
        "mesh2d" => mesh_grid_2d(n),
        "full" => full_graph(n),
        "exp2" => exponential_two_graph(n),
        other => Err(Error::Config(format!(
            "unknown topology `{other}` (expected ring|star|mesh2d|full|exp2)"
        ))),
    }
}

/// Names accepted by [`by_name`] plus the dynamic schedule names the CLI
/// understands.
pub const STATIC_TOPOLOGY_NAMES: &[&str] = &["ring", "star", "mesh2d", "full", "exp2"];
pub const DYNAMIC_SCHEDULE_NAMES: &[&str] = &["one-peer-exp2", "one-peer-graph", "inner-outer-exp2"];

fn ceil_log2(n: usize) -> u32 {
    debug_assert!(n >= 2);
    usize::BITS - (n - 1).leading_zeros()
}

/// One-peer exponential schedule: in round `k`, each node sends to
/// `(rank + 2^(k mod ceil(log2 n))) mod n` and receives from the
/// symmetric sender. The sender halves (`self 1/2`, `dst 1/2`); the
/// receiver applies unit source weights, so the round's assembled
/// effective matrix is doubly stochastic.
pub fn one_peer_exponential_scheme(n: usize, rank: usize, round: u64) -> Result<WeightScheme> {
    require_size(n)?;
    if rank >= n {
        return Err(Error::RankOutOfRange { rank, size: n });
    }
    let offset = 1usize << (round % ceil_log2(n) as u64);
    let dst = (rank + offset) % n;
    let src = (rank + n - offset % n) % n;
    let mut dst_weights = BTreeMap::new();
    dst_weights.insert(dst, 0.5);
    let mut src_weights = BTreeMap::new();
    src_weights.insert(src, 1.0);
    Ok(WeightScheme::push_pull(0.5, src_weights, dst_weights))
}

/// One-peer schedule over an arbitrary base graph: cycles through the
/// node's sorted out-neighbors (`round mod out-degree`) and derives the
/// incoming set from every other node's identical rule, so the global
/// send and receive multisets always match. Weights follow the push-sum
/// convention: the sender splits mass evenly between itself and its one
/// destination, receivers apply unit weights (column-stochastic rounds).
pub fn one_peer_scheme_of_graph(
    topology: &Topology,
    rank: usize,
    round: u64,
) -> Result<WeightScheme> {
    let n = topology.size();
    if rank >= n {
        return Err(Error::RankOutOfRange { rank, size: n });
    }
    let my_out = topology.out_neighbors(rank)?;
    if my_out.is_empty() {
        return Err(Error::Topology(format!(
            "node {rank} is isolated (no out-neighbors)"
        )));
    }
    let dst = my_out[(round % my_out.len() as u64) as usize];
    let mut src_weights = BTreeMap::new();
    for other in 0..n {
        if other == rank {
            continue;
        }
        let out = topology.out_neighbors(other)?;
        if out.is_empty() {
            return Err(Error::Topology(format!(
                "node {other} is isolated (no out-neighbors)"
            )));
        }
        if out[(round % out.len() as u64) as usize] == rank {
            src_weights.insert(other, 1.0);
        }
    }
    let self_weight = 0.5;
    let mut dst_weights = BTreeMap::new();
    dst_weights.insert(dst, self_weight);
    Ok(WeightScheme::push_pull(self_weight, src_weights, dst_weights))
}

/// Inner-outer exponential-2 schedule over an even number of nodes.
/// Even rounds run a one-peer exponential exchange inside each half;
/// odd rounds pair node `i` with `i +- n/2` across halves. Experimental:
/// the construction is a documented guess at the named schedule and is
/// excluded from acceptance checks.
pub fn inner_outer_exponential_scheme(
    n: usize,
    rank: usize,
    round: u64,
) -> Result<WeightScheme> {
    require_size(n)?;
    if n % 2 != 0 {
        return Err(Error::Topology(format!(
            "inner-outer schedule needs an even node count, got {n}"
        )));
    }
    if rank >= n {
        return Err(Error::RankOutOfRange { rank, size: n });
    }
    let half = n / 2;
    if round % 2 == 1 {
        // Outer phase: pair across halves.
        let partner = (rank + half) % n;
        let mut dst_weights = BTreeMap::new();
        dst_weights.insert(partner, 0.5);
        let mut src_weights = BTreeMap::new();
        src_weights.insert(partner, 1.0);
        return Ok(WeightScheme::push_pull(0.5, src_weights, dst_weights));
    }
    // Inner phase: one-peer exponential inside this node's half.
    if half < 2 {
        return Ok(WeightScheme::push_pull(1.0, BTreeMap::new(), BTreeMap::new()));
    }
    let base = if rank < half { 0 } else { half };
    let local = rank - base;
    let offset = 1usize << ((round / 2) % ceil_log2(half) as u64);
    let dst = base + (local + offset) % half;
    let src = base + (local + half - offset % half) % half;
    let mut dst_weights = BTreeMap::new();
    dst_weights.insert(dst, 0.5);
    let mut src_weights = BTreeMap::new();
    src_weights.insert(src, 1.0);
    Ok(WeightScheme::push_pull(0.5, src_weights, dst_weights))
}

/// Metropolis-Hastings pull weights for a discovered neighborhood:
/// `src[j] = 1/(1 + max(self_degree, degree_j))`, self weight fills to 1.
pub fn metropolis_hastings_weights(
    nb_ranks: &[usize],
    nb_degrees: &BTreeMap<usize, usize>,
    self_degree: usize,
) -> Result<WeightScheme> {
    if self_degree < nb_ranks.len() {
        return Err(Error::WeightScheme(format!(
            "self degree {} smaller than neighbor count {}",
            self_degree,
            nb_ranks.len()
        )));
    }
    let mut src_weights = BTreeMap::new();
    let mut total = 0.0;
    for &j in nb_ranks {
        let deg_j = *nb_degrees.get(&j).ok_or_else(|| {
            Error::WeightScheme(format!("missing degree for neighbor {j}"))
        })?;
        let w = 1.0 / (1.0 + self_degree.max(deg_j) as f64);
        src_weights.insert(j, w);
        total += w;
    }
    let self_weight = 1.0 - total;
    if self_weight < -1e-12 {
        return Err(Error::WeightScheme(format!(
            "inconsistent degrees: self weight {self_weight} negative"
        )));
    }
    Ok(WeightScheme::pull(self_weight.max(0.0), src_weights))
}

/// Dynamic schedule families available to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicScheduleKind {
    OnePeerExponential,
    OnePeerOfGraph,
    InnerOuterExponential,
}

/// Stateful per-rank view of a deterministic dynamic schedule. Holds only
/// a round counter; the schedule itself is a pure function of
/// `(base, rank, round)`.
#[derive(Debug, Clone)]
pub struct DynamicTopologyGenerator {
    base: Topology,
    rank: usize,
    round: u64,
    kind: DynamicScheduleKind,
}

impl DynamicTopologyGenerator {
    pub fn new(base: Topology, rank: usize, kind: DynamicScheduleKind) -> Result<Self> {
        if rank >= base.size() {
            return Err(Error::RankOutOfRange {
                rank,
                size: base.size(),
            });
        }
        Ok(DynamicTopologyGenerator {
            base,
            rank,
            round: 0,
            kind,
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn scheme_at(&self, round: u64) -> Result<WeightScheme> {
        let n = self.base.size();
        match self.kind {
            DynamicScheduleKind::OnePeerExponential => {
                one_peer_exponential_scheme(n, self.rank, round)
            }
            DynamicScheduleKind::OnePeerOfGraph => {
                one_peer_scheme_of_graph(&self.base, self.rank, round)
            }
            DynamicScheduleKind::InnerOuterExponential => {
                inner_outer_exponential_scheme(n, self.rank, round)
            }
        }
    }

    /// Emits the scheme for the current round and advances the counter.
    pub fn next_scheme(&mut self) -> Result<WeightScheme> {
        let scheme = self.scheme_at(self.round)?;
        self.round += 1;
        Ok(scheme)
    }
}

/// Assembles per-rank schemes into the effective global matrix of Eq.-9
/// semantics: `W[i][j] = r_ij * s_ij` where a missing side contributes 1,
/// plus the self weights on the diagonal. Test and verification helper.
pub fn assemble_global_matrix(schemes: &[WeightScheme], n: usize) -> Result<Vec<f64>> {
    if schemes.len() != n {
        return Err(Error::Dimension(format!(
            "expected {n} schemes, got {}",
            schemes.len()
        )));
    }
    let mut w = vec![0.0; n * n];
    for (i, scheme) in schemes.iter().enumerate() {
        if scheme.is_static() {
            return Err(Error::WeightScheme(
                "cannot assemble a static scheme without the global topology".into(),
            ));
        }
        w[i * n + i] = scheme.self_weight();
    }
    // Sender-declared transfers.
    for (j, scheme) in schemes.iter().enumerate() {
        if let Some(dst) = scheme.dst_weights() {
            for (&i, &s) in dst {
                let r = schemes[i]
                    .src_weights()
                    .and_then(|m| m.get(&j).copied())
                    .unwrap_or(1.0);
                w[i * n + j] = r * s;
            }
        }
    }
    // Receiver-declared transfers with no sender-side entry (pull-only).
    for (i, scheme) in schemes.iter().enumerate() {
        if let Some(src) = scheme.src_weights() {
            for (&j, &r) in src {
                if schemes[j]
                    .dst_weights()
                    .map(|m| m.contains_key(&i))
                    .unwrap_or(false)
                {
                    continue; // already counted above
                }
                w[i * n + j] = r;
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{classify_weight_matrix, MatrixClass};

    #[test]
    fn ring_neighbors() {
        let t2 = ring_graph(2).unwrap();
        for r in 0..2 {
            let ns = t2.neighbor_sets(r).unwrap();
            assert_eq!(ns.in_neighbors, vec![1 - r]);
            assert_eq!(ns.out_neighbors, vec![1 - r]);
        }
        let t5 = ring_graph(5).unwrap();
        assert_eq!(t5.neighbor_sets(0).unwrap().in_neighbors, vec![1, 4]);
        assert!((t5.weight(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((t5.weight(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t5.classify(), MatrixClass::Doubly);
        assert!(ring_graph(1).is_err());
    }

    #[test]
    fn exponential_two_examples() {
        let t8 = exponential_two_graph(8).unwrap();
        assert_eq!(t8.neighbor_sets(0).unwrap().out_neighbors, vec![1, 2, 4]);
        assert!((t8.weight(0, 0) - 0.25).abs() < 1e-15);
        assert!((t8.weight(0, 7) - 0.25).abs() < 1e-15);
        assert_eq!(t8.classify(), MatrixClass::Doubly);

        let t2 = exponential_two_graph(2).unwrap();
        assert_eq!(t2.neighbor_sets(0).unwrap().out_neighbors, vec![1]);
        assert_eq!(t2.neighbor_sets(1).unwrap().out_neighbors, vec![0]);
    }

    #[test]
    fn mesh_star_full_examples() {
        let mesh = mesh_grid_2d(6).unwrap();
        assert_eq!(mesh_factors(6), (2, 3));
        assert_eq!(mesh.neighbor_sets(0).unwrap().in_neighbors, vec![1, 3]);

        let star = star_graph(5).unwrap();
        assert_eq!(star.neighbor_sets(0).unwrap().in_neighbors, vec![1, 2, 3, 4]);

        let full = full_graph(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((full.weight(i, j) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn all_builtin_topologies_doubly_stochastic() {
        for n in [2usize, 4, 5, 8, 16] {
            for name in STATIC_TOPOLOGY_NAMES {
                let t = by_name(name, n).unwrap();
                assert_eq!(
                    t.classify(),
                    MatrixClass::Doubly,
                    "{name}({n}) not doubly stochastic"
                );
            }
        }
    }

    #[test]
    fn one_peer_exponential_examples() {
        let s = one_peer_exponential_scheme(8, 0, 0).unwrap();
        assert_eq!(s.dst_weights().unwrap().keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(s.src_weights().unwrap().keys().copied().collect::<Vec<_>>(), vec![7]);
        assert!((s.self_weight() - 0.5).abs() < 1e-15);
        // Effective received weight r*s = 1 * 0.5.
        let s_sender = one_peer_exponential_scheme(8, 7, 0).unwrap();
        let send_scale = s_sender.dst_weights().unwrap()[&0];
        let recv_scale = s.src_weights().unwrap()[&7];
        assert!((send_scale * recv_scale - 0.5).abs() < 1e-15);

        let s1 = one_peer_exponential_scheme(8, 0, 1).unwrap();
        assert_eq!(
            s1.dst_weights().unwrap().keys().copied().collect::<Vec<_>>(),
            vec![2]
        );

        for k in 0..5 {
            let s = one_peer_exponential_scheme(2, 0, k).unwrap();
            assert_eq!(
                s.dst_weights().unwrap().keys().copied().collect::<Vec<_>>(),
                vec![1]
            );
        }
    }

    #[test]
    fn one_peer_exponential_assembles_doubly() {
        for n in [2usize, 4, 5, 8, 12] {
            for k in 0..6 {
                let schemes: Vec<_> = (0..n)
                    .map(|r| one_peer_exponential_scheme(n, r, k).unwrap())
                    .collect();
                let w = assemble_global_matrix(&schemes, n).unwrap();
                assert_eq!(
                    classify_weight_matrix(&w, n).unwrap(),
                    MatrixClass::Doubly,
                    "n={n} k={k}"
                );
            }
        }
    }

    #[test]
    fn one_peer_of_graph_round_robin() {
        let mesh = mesh_grid_2d(6).unwrap();
        let dsts: Vec<usize> = (0..3)
            .map(|k| {
                *one_peer_scheme_of_graph(&mesh, 0, k)
                    .unwrap()
                    .dst_weights()
                    .unwrap()
                    .keys()
                    .next()
                    .unwrap()
            })
            .collect();
        assert_eq!(dsts, vec![1, 3, 1]);

        let full3 = full_graph(3).unwrap();
        let dsts: Vec<usize> = (0..4)
            .map(|k| {
                *one_peer_scheme_of_graph(&full3, 0, k)
                    .unwrap()
                    .dst_weights()
                    .unwrap()
                    .keys()
                    .next()
                    .unwrap()
            })
            .collect();
        assert_eq!(dsts, vec![1, 2, 1, 2]);

        let ring2 = ring_graph(2).unwrap();
        for k in 0..3 {
            let s = one_peer_scheme_of_graph(&ring2, 0, k).unwrap();
            assert_eq!(
                s.dst_weights().unwrap().keys().copied().collect::<Vec<_>>(),
                vec![1]
            );
        }
    }

    #[test]
    fn one_peer_of_graph_sends_match_receives() {
        for name in ["ring", "mesh2d", "full", "exp2", "star"] {
            for n in [4usize, 6, 8] {
                let topo = by_name(name, n).unwrap();
                for k in 0..7u64 {
                    let schemes: Vec<_> = (0..n)
                        .map(|r| one_peer_scheme_of_graph(&topo, r, k).unwrap())
                        .collect();
                    let mut sends = Vec::new();
                    let mut recvs = Vec::new();
                    for (j, s) in schemes.iter().enumerate() {
                        for &i in s.dst_weights().unwrap().keys() {
                            sends.push((j, i));
                        }
                        for &src in s.src_weights().unwrap().keys() {
                            recvs.push((src, j));
                        }
                    }
                    sends.sort_unstable();
                    recvs.sort_unstable();
                    assert_eq!(sends, recvs, "{name}({n}) round {k}");
                }
            }
        }
    }

    #[test]
    fn one_peer_of_graph_isolated_node_errors() {
        let mut edges = BTreeSet::new();
        edges.insert((0usize, 1usize));
        edges.insert((1usize, 0usize));
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let topo = Topology::new(3, edges, w).unwrap();
        assert!(one_peer_scheme_of_graph(&topo, 2, 0).is_err());
    }

    #[test]
    fn metropolis_hastings_examples() {
        let s = metropolis_hastings_weights(&[], &BTreeMap::new(), 0).unwrap();
        assert!((s.self_weight() - 1.0).abs() < 1e-15);
        assert!(s.src_weights().unwrap().is_empty());

        let mut degrees = BTreeMap::new();
        degrees.insert(1usize, 1usize);
        let s = metropolis_hastings_weights(&[1], &degrees, 1).unwrap();
        assert!((s.src_weights().unwrap()[&1] - 0.5).abs() < 1e-15);
        assert!((s.self_weight() - 0.5).abs() < 1e-15);

        let mut degrees = BTreeMap::new();
        degrees.insert(7usize, 3usize);
        let s = metropolis_hastings_weights(&[7], &degrees, 1).unwrap();
        assert!((s.src_weights().unwrap()[&7] - 0.25).abs() < 1e-15);
        assert!((s.self_weight() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn metropolis_hastings_symmetric_assembly() {
        // Symmetric neighborhoods on a ring of 5: assembled matrix must be
        // symmetric with unit row sums.
        let n = 5usize;
        let mut schemes = Vec::new();
        for i in 0..n {
            let nbrs = [(i + 1) % n, (i + n - 1) % n];
            let mut degrees = BTreeMap::new();
            for &j in &nbrs {
                degrees.insert(j, 2usize);
            }
            schemes.push(metropolis_hastings_weights(&nbrs, &degrees, 2).unwrap());
        }
        let w = assemble_global_matrix(&schemes, n).unwrap();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w[i * n + j]).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in 0..n {
                assert!((w[i * n + j] - w[j * n + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn inner_outer_assembles_doubly() {
        for n in [4usize, 8, 16] {
            for k in 0..6 {
                let schemes: Vec<_> = (0..n)
                    .map(|r| inner_outer_exponential_scheme(n, r, k).unwrap())
                    .collect();
                let w = assemble_global_matrix(&schemes, n).unwrap();
                assert_eq!(
                    classify_weight_matrix(&w, n).unwrap(),
                    MatrixClass::Doubly,
                    "n={n} k={k}"
                );
            }
        }
        assert!(inner_outer_exponential_scheme(5, 0, 0).is_err());
    }

    #[test]
    fn generator_advances_rounds() {
        let base = mesh_grid_2d(6).unwrap();
        let mut gen =
            DynamicTopologyGenerator::new(base, 0, DynamicScheduleKind::OnePeerOfGraph).unwrap();
        let s0 = gen.next_scheme().unwrap();
        let s1 = gen.next_scheme().unwrap();
        assert_eq!(gen.round(), 2);
        assert_eq!(
            s0.dst_weights().unwrap().keys().copied().collect::<Vec<_>>(),
            vec![1]
        );
        assert_eq!(
            s1.dst_weights().unwrap().keys().copied().collect::<Vec<_>>(),
            vec![3]
        );
    }
}
