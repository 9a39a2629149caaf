//! Integration tests for the collective runtime on the sim fabric.

use std::collections::BTreeMap;
use std::sync::Arc;

use defog_core::collective::{CommConfig, Communicator};
use defog_core::error::Error;
use defog_core::graph::{dense_partial_average_oracle, WeightScheme};
use defog_core::tensor::Tensor;
use defog_core::topology::{by_name, full_graph, one_peer_exponential_scheme, ring_graph};
use defog_core::transport::sim::{run_ranks, LinkModel, SimConfig, SimFabric};
use defog_core::transport::Fabric;
use defog_core::Result;

fn with_comm<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send + 'static,
    F: Fn(&Communicator) -> Result<T> + Send + Sync + 'static,
{
    run_ranks(SimConfig::new(n), move |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, CommConfig::default())?;
        f(&comm)
    })
    .unwrap()
}

fn seeded_vec(seed: u64, len: usize) -> Vec<f64> {
    // Small deterministic pseudo-random values, no RNG dependency here.
    (0..len)
        .map(|i| {
            let x = seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64 * 1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn default_topology_is_fully_connected_uniform() {
    let out = with_comm(4, |comm| {
        let (self_w, src) = comm.self_weights();
        Ok((self_w, src.len()))
    });
    for (w, deg) in out {
        assert!((w - 0.25).abs() < 1e-15);
        assert_eq!(deg, 3);
    }
}

#[test]
fn set_topology_ring_exposes_row_weights() {
    let out = with_comm(4, |comm| {
        assert!(comm.set_topology(ring_graph(4)?));
        // Wrong size is rejected.
        assert!(!comm.set_topology(ring_graph(3)?));
        Ok(comm.self_weights())
    });
    let (self_w, src) = &out[0];
    assert!((self_w - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(src.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
    assert!((src[&1] - 1.0 / 3.0).abs() < 1e-15);
    assert!((src[&3] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn allreduce_size_one_is_identity() {
    let out = with_comm(1, |comm| {
        let x = Tensor::vector(vec![1.25, -7.5]);
        comm.allreduce(&x, "x")
    });
    assert_eq!(out[0].data(), &[1.25, -7.5]);
}

#[test]
fn allreduce_averages_scalars() {
    let out = with_comm(4, |comm| {
        let x = Tensor::scalar(comm.rank() as f64 + 1.0);
        comm.allreduce(&x, "mean")
    });
    for t in out {
        assert!((t.data()[0] - 2.5).abs() < 1e-15);
    }
}

#[test]
fn allreduce_matches_uniform_oracle() {
    let n = 5;
    let d = 7;
    let out = with_comm(n, move |comm| {
        let x = Tensor::new(seeded_vec(comm.rank() as u64 + 1, d), vec![d])?;
        comm.allreduce(&x, "x")
    });
    let rows: Vec<Vec<f64>> = (0..n).map(|r| seeded_vec(r as u64 + 1, d)).collect();
    let w = vec![1.0 / n as f64; n * n];
    let expected = dense_partial_average_oracle(&w, n, &rows).unwrap();
    for (r, t) in out.iter().enumerate() {
        for k in 0..d {
            assert!((t.data()[k] - expected[r][k]).abs() < 1e-10);
        }
    }
}

#[test]
fn neighbor_allreduce_matches_oracle_on_builtins() {
    for name in ["ring", "star", "mesh2d", "full", "exp2"] {
        for n in [2usize, 5, 8] {
            let d = 4;
            let topo = by_name(name, n).unwrap();
            let weights = topo.weights().to_vec();
            let out = with_comm(n, move |comm| {
                assert!(comm.set_topology(by_name(name, comm.size())?));
                let x = Tensor::new(seeded_vec(100 + comm.rank() as u64, d), vec![d])?;
                comm.neighbor_allreduce(&x, "partial")
            });
            let rows: Vec<Vec<f64>> = (0..n).map(|r| seeded_vec(100 + r as u64, d)).collect();
            let expected = dense_partial_average_oracle(&weights, n, &rows).unwrap();
            for (r, t) in out.iter().enumerate() {
                for k in 0..d {
                    assert!(
                        (t.data()[k] - expected[r][k]).abs() < 1e-10,
                        "{name}({n}) rank {r} element {k}"
                    );
                }
            }
        }
    }
}

#[test]
fn full_graph_neighbor_allreduce_equals_global_mean() {
    let out = with_comm(4, |comm| {
        assert!(comm.set_topology(full_graph(4)?));
        let x = Tensor::scalar(comm.rank() as f64 + 1.0);
        comm.neighbor_allreduce(&x, "x")
    });
    for t in out {
        assert!((t.data()[0] - 2.5).abs() < 1e-12);
    }
}

#[test]
fn isolated_scheme_returns_input_bitwise() {
    let out = with_comm(3, |comm| {
        let x = Tensor::vector(vec![0.1 + comm.rank() as f64, -3.75]);
        let scheme = WeightScheme::pull(1.0, BTreeMap::new());
        let y = comm.neighbor_allreduce_with_scheme(&x, "iso", &scheme)?;
        Ok((x, y))
    });
    for (x, y) in out {
        assert_eq!(x, y);
    }
}

#[test]
fn dynamic_one_peer_matches_eq9_oracle() {
    let n = 8;
    let d = 3;
    for round in 0..4u64 {
        let out = with_comm(n, move |comm| {
            let scheme = one_peer_exponential_scheme(comm.size(), comm.rank(), round)?;
            let x = Tensor::new(seeded_vec(7 + comm.rank() as u64, d), vec![d])?;
            comm.neighbor_allreduce_with_scheme(&x, "dyn", &scheme)
        });
        let schemes: Vec<WeightScheme> = (0..n)
            .map(|r| one_peer_exponential_scheme(n, r, round).unwrap())
            .collect();
        let w = defog_core::topology::assemble_global_matrix(&schemes, n).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|r| seeded_vec(7 + r as u64, d)).collect();
        let expected = dense_partial_average_oracle(&w, n, &rows).unwrap();
        for (r, t) in out.iter().enumerate() {
            for k in 0..d {
                assert!((t.data()[k] - expected[r][k]).abs() < 1e-10, "round {round} rank {r}");
            }
        }
    }
}

#[test]
fn pure_push_scheme_assembles_column_stochastic_result() {
    // Each rank pushes half its mass to its ring successor.
    let n = 4;
    let out = with_comm(n, |comm| {
        let me = comm.rank();
        let dst = (me + 1) % comm.size();
        let mut dst_weights = BTreeMap::new();
        dst_weights.insert(dst, 0.5);
        let scheme = WeightScheme::push(0.5, dst_weights);
        let x = Tensor::scalar((me + 1) as f64);
        comm.neighbor_allreduce_with_scheme(&x, "push", &scheme)
    });
    // Eq. 9 with r = 1: x_i' = 0.5 x_i + 0.5 x_{i-1}.
    let xs = [1.0, 2.0, 3.0, 4.0];
    for (i, t) in out.iter().enumerate() {
        let expected = 0.5 * xs[i] + 0.5 * xs[(i + n - 1) % n];
        assert!((t.data()[0] - expected).abs() < 1e-12);
    }
    // Total mass is conserved (column-stochastic push weights).
    let total: f64 = out.iter().map(|t| t.data()[0]).sum();
    assert!((total - 10.0).abs() < 1e-10);
}

#[test]
fn nonblocking_equals_blocking_bitwise_and_snapshots_input() {
    let out = with_comm(4, |comm| {
        comm.set_topology(ring_graph(comm.size())?);
        let x = Tensor::new(seeded_vec(comm.rank() as u64, 6), vec![6])?;
        let blocking = comm.neighbor_allreduce(&x, "blk")?;

        let mut owned = x.clone();
        let h = comm.neighbor_allreduce_nonblocking(&owned, "nb")?;
        // Mutating the caller's tensor after issue must not affect the
        // in-flight collective (input snapshotted at call time).
        owned.fill(1e9);
        let nonblocking = comm.wait(h)?;
        Ok((blocking, nonblocking))
    });
    for (b, nb) in out {
        assert_eq!(b.data(), nb.data(), "bitwise equality required");
    }
}

#[test]
fn concurrent_handles_resolve_independently() {
    let out = with_comm(3, |comm| {
        let a = Tensor::scalar(comm.rank() as f64);
        let b = Tensor::scalar(10.0 * comm.rank() as f64);
        let ha = comm.allreduce_nonblocking(&a, "a")?;
        let hb = comm.allreduce_nonblocking(&b, "b")?;
        let rb = comm.wait(hb)?;
        let ra = comm.wait(ha)?;
        Ok((ra.data()[0], rb.data()[0]))
    });
    for (ra, rb) in out {
        assert!((ra - 1.0).abs() < 1e-12);
        assert!((rb - 10.0).abs() < 1e-12);
    }
}

#[test]
fn handles_are_consumed_by_wait() {
    // `wait` takes the handle by value, so waiting twice is unrepresentable
    // in safe code; the runtime guard backs the same contract for stale ids.
    let out = with_comm(2, |comm| {
        let h = comm.allreduce_nonblocking(&Tensor::scalar(1.0), "x")?;
        let first = comm.wait(h)?;
        Ok(first.data()[0])
    });
    for v in out {
        assert!((v - 1.0).abs() < 1e-15);
    }
}

#[test]
fn submission_order_may_differ_across_ranks() {
    let out = with_comm(2, |comm| {
        let x = Tensor::scalar(comm.rank() as f64);
        let (first, second) = if comm.rank() == 0 { ("a", "b") } else { ("b", "a") };
        let h1 = comm.allreduce_nonblocking(&x, first)?;
        let h2 = comm.allreduce_nonblocking(&x, second)?;
        let r1 = comm.wait(h1)?;
        let r2 = comm.wait(h2)?;
        Ok((r1.data()[0], r2.data()[0]))
    });
    for (a, b) in out {
        assert!((a - 0.5).abs() < 1e-12);
        assert!((b - 0.5).abs() < 1e-12);
    }
}

#[test]
fn mismatched_dynamic_scheme_errors_instead_of_hanging() {
    let results = run_ranks(SimConfig::new(2), |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, CommConfig::default())?;
        // Rank 0 declares a push to rank 1; rank 1 declares nothing and
        // also expects nothing (push-pull config with empty maps).
        let scheme = if comm.rank() == 0 {
            let mut dst = BTreeMap::new();
            dst.insert(1, 0.5);
            WeightScheme::push_pull(0.5, BTreeMap::new(), dst)
        } else {
            WeightScheme::push_pull(1.0, BTreeMap::new(), BTreeMap::new())
        };
        let x = Tensor::scalar(1.0);
        match comm.neighbor_allreduce_with_scheme(&x, "bad", &scheme) {
            Err(Error::Negotiation { detail, .. }) => Ok(detail),
            other => panic!("expected negotiation error, got {other:?}"),
        }
    })
    .unwrap();
    for detail in results {
        assert!(detail.contains("rank 0"), "diagnostic names ranks: {detail}");
    }
}

#[test]
fn topology_check_off_matches_check_on_for_valid_schedules() {
    let run = |check: bool| {
        let cfg = CommConfig {
            topo_check: check,
            ..CommConfig::default()
        };
        run_ranks(SimConfig::new(4), move |fab: Arc<SimFabric>| {
            let comm = Communicator::init_with_config(fab, cfg.clone())?;
            let scheme = one_peer_exponential_scheme(comm.size(), comm.rank(), 1)?;
            let x = Tensor::new(seeded_vec(comm.rank() as u64, 5), vec![5])?;
            comm.neighbor_allreduce_with_scheme(&x, "chk", &scheme)
        })
        .unwrap()
    };
    let with_check = run(true);
    let without = run(false);
    for (a, b) in with_check.iter().zip(without.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn fused_equals_unfused_and_respects_buffer_budget() {
    // Three 32-byte tensors under a 64-byte budget must split into two
    // batches and still produce identical results.
    let cfg = CommConfig {
        fusion_bytes: 64,
        ..CommConfig::default()
    };
    let fused = run_ranks(SimConfig::new(2), move |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(Arc::clone(&fab) as Arc<dyn Fabric>, cfg.clone())?;
        let before = fab.counters();
        let xs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::new(seeded_vec(comm.rank() as u64 * 10 + i, 4), vec![4]).unwrap())
            .collect();
        let handles: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| comm.allreduce_nonblocking(x, &format!("t{i}")).unwrap())
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.push(comm.wait(h)?);
        }
        let delta = fab.counters().delta(&before);
        Ok((out, delta.data_msgs))
    })
    .unwrap();
    let separate = run_ranks(SimConfig::new(2), |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, CommConfig::default())?;
        let xs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::new(seeded_vec(comm.rank() as u64 * 10 + i, 4), vec![4]).unwrap())
            .collect();
        let mut out = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            out.push(comm.allreduce(x, &format!("t{i}"))?);
        }
        Ok(out)
    })
    .unwrap();
    for ((f, msgs), s) in fused.iter().zip(separate.iter()) {
        for (a, b) in f.iter().zip(s.iter()) {
            assert_eq!(a.data(), b.data(), "fusion must be bitwise-neutral");
        }
        // 3 ops, budget forces 2 batches -> 2 data messages to the peer.
        assert_eq!(*msgs, 2, "expected exactly two fused batches");
    }
}

#[test]
fn single_request_passes_through_fusion() {
    let out = with_comm(2, |comm| {
        let x = Tensor::scalar(comm.rank() as f64);
        comm.allreduce(&x, "solo")
    });
    for t in out {
        assert!((t.data()[0] - 0.5).abs() < 1e-15);
    }
}

#[test]
fn hierarchical_single_machine_is_intra_average() {
    let out = run_ranks(SimConfig::new(4), |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, CommConfig::default())?;
        let x = Tensor::scalar(comm.rank() as f64 + 1.0);
        comm.hierarchical_neighbor_allreduce(&x, "h", None)
    })
    .unwrap();
    for t in out {
        assert!((t.data()[0] - 2.5).abs() < 1e-12);
    }
}

#[test]
fn hierarchical_two_by_two_matches_worked_example() {
    let cfg = CommConfig {
        local_size: Some(2),
        ..CommConfig::default()
    };
    let out = run_ranks(SimConfig::new(4), move |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, cfg.clone())?;
        assert!(comm.set_machine_topology(full_graph(2)?));
        let vals = [1.0, 3.0, 5.0, 7.0];
        let x = Tensor::scalar(vals[comm.rank()]);
        comm.hierarchical_neighbor_allreduce(&x, "h", None)
    })
    .unwrap();
    // Machine averages {2, 6}; machine-level uniform 1/2 average -> 4.
    for t in out {
        assert!((t.data()[0] - 4.0).abs() < 1e-12);
    }
}

#[test]
fn hierarchical_matches_kronecker_oracle() {
    let machines = 3;
    let local = 2;
    let n = machines * local;
    let d = 4;
    let machine_topo = ring_graph(machines).unwrap();
    let mw = machine_topo.weights().to_vec();
    let cfg = CommConfig {
        local_size: Some(local),
        ..CommConfig::default()
    };
    let out = run_ranks(SimConfig::new(n), move |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, cfg.clone())?;
        assert!(comm.set_machine_topology(ring_graph(3)?));
        let x = Tensor::new(seeded_vec(40 + comm.rank() as u64, d), vec![d])?;
        comm.hierarchical_neighbor_allreduce(&x, "h", None)
    })
    .unwrap();
    // Oracle: (machine_W ⊗ uniform_local) X.
    let mut big_w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            big_w[i * n + j] = mw[(i / local) * machines + (j / local)] / local as f64;
        }
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|r| seeded_vec(40 + r as u64, d)).collect();
    let expected = dense_partial_average_oracle(&big_w, n, &rows).unwrap();
    for (r, t) in out.iter().enumerate() {
        for k in 0..d {
            assert!(
                (t.data()[k] - expected[r][k]).abs() < 1e-10,
                "rank {r} element {k}: {} vs {}",
                t.data()[k],
                expected[r][k]
            );
        }
    }
}

#[test]
fn hierarchical_rejects_indivisible_local_size() {
    let cfg = CommConfig {
        local_size: Some(3),
        ..CommConfig::default()
    };
    let out = run_ranks(SimConfig::new(4), move |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, cfg.clone())?;
        let x = Tensor::scalar(1.0);
        match comm.hierarchical_neighbor_allreduce(&x, "h", None) {
            Err(Error::Config(msg)) => Ok(msg),
            other => panic!("expected config error, got {other:?}"),
        }
    })
    .unwrap();
    assert!(out[0].contains("machines"));
}

#[test]
fn barrier_rounds_do_not_interleave() {
    let out = run_ranks(
        SimConfig::with_link(3, LinkModel::with_latency(0.001)),
        |fab: Arc<SimFabric>| {
            let comm = Communicator::init_with_config(fab.clone(), CommConfig::default())?;
            let mut stamps = Vec::new();
            for _ in 0..3 {
                comm.barrier()?;
                stamps.push(fab.now());
            }
            Ok(stamps)
        },
    )
    .unwrap();
    // All ranks observe barrier k before any rank observes barrier k+1.
    for k in 0..2 {
        let max_k = out.iter().map(|s| s[k]).fold(0.0, f64::max);
        let min_next = out.iter().map(|s| s[k + 1]).fold(f64::INFINITY, f64::min);
        assert!(max_k <= min_next + 1e-12);
    }
}

#[test]
fn shape_mismatch_is_reported_with_ranks() {
    let out = run_ranks(SimConfig::new(2), |fab: Arc<SimFabric>| {
        let comm = Communicator::init_with_config(fab, CommConfig::default())?;
        let x = if comm.rank() == 0 {
            Tensor::vector(vec![1.0, 2.0])
        } else {
            Tensor::vector(vec![1.0, 2.0, 3.0])
        };
        match comm.allreduce(&x, "shapes") {
            Err(Error::Negotiation { detail, .. }) => Ok(detail),
            other => panic!("expected negotiation error, got {other:?}"),
        }
    })
    .unwrap();
    assert!(out[0].contains("shape mismatch"));
    assert!(out[0].contains("rank 1"));
}
