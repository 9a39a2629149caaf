//! Window primitives across ranks on the sim fabric.

use std::collections::BTreeMap;
use std::sync::Arc;

use defog_core::collective::{CommConfig, Communicator};
use defog_core::tensor::Tensor;
use defog_core::topology::ring_graph;
use defog_core::transport::sim::{run_ranks, LinkModel, SimConfig, SimFabric};
use defog_core::transport::Fabric;
use defog_core::Result;

fn with_comm<T, F>(n: usize, link: LinkModel, f: F) -> Vec<T>
where
    T: Send + 'static,
    F: Fn(&Communicator) -> Result<T> + Send + Sync + 'static,
{
    run_ranks(
        SimConfig::with_link(n, link),
        move |fab: Arc<SimFabric>| {
            let comm = Communicator::init_with_config(fab, CommConfig::default())?;
            f(&comm)
        },
    )
    .unwrap()
}

fn weights(pairs: &[(usize, f64)]) -> BTreeMap<usize, f64> {
    pairs.iter().copied().collect()
}

#[test]
fn create_buffers_match_ring_in_neighbors() {
    let out = with_comm(3, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(3)?);
        comm.win_create(&Tensor::scalar(0.0), "w", false)?;
        let (_, buffers) = comm.window_snapshot("w")?;
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(buffers.keys().copied().collect::<Vec<_>>())
    });
    assert_eq!(out[0], vec![1, 2]);
    assert_eq!(out[1], vec![0, 2]);
    assert_eq!(out[2], vec![0, 1]);
}

#[test]
fn free_then_recreate_same_name() {
    with_comm(2, LinkModel::default(), |comm| {
        comm.win_create(&Tensor::scalar(1.0), "w", false)?;
        comm.win_free("w")?;
        comm.win_create(&Tensor::scalar(2.0), "w", true)?;
        comm.win_free("w")?;
        Ok(())
    });
}

#[test]
fn put_then_remote_update_sees_exact_value() {
    let out = with_comm(2, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(2)?);
        comm.win_create(&Tensor::scalar(0.0), "w", true)?;
        if comm.rank() == 0 {
            comm.neighbor_win_put(
                &Tensor::scalar(42.0),
                "w",
                None,
                Some(&weights(&[(1, 1.0)])),
                false,
            )?;
        }
        comm.barrier()?;
        comm.fabric().await_quiescence()?;
        let v = comm.win_update("w", Some(0.0), Some(&weights(&[(if comm.rank() == 0 { 1 } else { 0 }, 1.0)])))?;
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(v.data()[0])
    });
    assert_eq!(out[1], 42.0);
    assert_eq!(out[0], 0.0); // rank 1 never wrote
}

#[test]
fn accumulates_add_before_update() {
    let out = with_comm(2, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(2)?);
        comm.win_create(&Tensor::scalar(0.0), "w", true)?;
        if comm.rank() == 0 {
            let dst = weights(&[(1, 1.0)]);
            comm.neighbor_win_accumulate(&Tensor::scalar(1.0), "w", None, Some(&dst), false)?;
            comm.neighbor_win_accumulate(&Tensor::scalar(2.0), "w", None, Some(&dst), false)?;
        }
        comm.barrier()?;
        comm.fabric().await_quiescence()?;
        let v = comm.win_update("w", Some(0.0), Some(&weights(&[(if comm.rank() == 0 { 1 } else { 0 }, 1.0)])))?;
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(v.data()[0])
    });
    assert_eq!(out[1], 3.0);
}

#[test]
fn empty_dst_weights_is_noop() {
    let out = with_comm(2, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(2)?);
        comm.win_create(&Tensor::scalar(5.0), "w", false)?;
        let ok = comm.neighbor_win_put(
            &Tensor::scalar(9.0),
            "w",
            None,
            Some(&BTreeMap::new()),
            false,
        )?;
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(ok)
    });
    assert!(out.iter().all(|&b| b));
}

#[test]
fn put_to_non_neighbor_errors() {
    let out = with_comm(3, LinkModel::default(), |comm| {
        // Ring(3): every pair is adjacent, so use a directed line instead:
        // 0 -> 1 -> 2; rank 0 cannot put to 2.
        let mut edges = std::collections::BTreeSet::new();
        edges.insert((0usize, 1usize));
        edges.insert((1usize, 2usize));
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        w[1 * 3 + 0] = 0.5;
        w[1 * 3 + 1] = 0.5;
        w[2 * 3 + 1] = 0.5;
        w[2 * 3 + 2] = 0.5;
        let topo = defog_core::Topology::new(3, edges, w)?;
        comm.set_topology(topo);
        comm.win_create(&Tensor::scalar(0.0), "w", true)?;
        let res = if comm.rank() == 0 {
            comm.neighbor_win_put(
                &Tensor::scalar(1.0),
                "w",
                None,
                Some(&weights(&[(2, 1.0)])),
                false,
            )
            .is_err()
        } else {
            true
        };
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(res)
    });
    assert!(out.iter().all(|&b| b));
}

#[test]
fn get_pulls_scaled_remote_local() {
    let out = with_comm(2, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(2)?);
        let init = Tensor::scalar(7.0 * (comm.rank() as f64 + 1.0));
        comm.win_create(&init, "w", true)?;
        comm.barrier()?;
        let peer = 1 - comm.rank();
        // Pull the peer's local tensor with scale 0.5.
        comm.neighbor_win_get("w", Some(&weights(&[(peer, 0.5)])))?;
        let (_, buffers) = comm.window_snapshot("w")?;
        let got = buffers[&peer].data()[0];
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(got)
    });
    assert_eq!(out[0], 7.0); // 14 * 0.5
    assert_eq!(out[1], 3.5); // 7 * 0.5
}

#[test]
fn get_with_zero_weight_zeroes_buffer() {
    let out = with_comm(2, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(2)?);
        comm.win_create(&Tensor::scalar(3.0), "w", false)?;
        comm.barrier()?;
        let peer = 1 - comm.rank();
        comm.neighbor_win_get("w", Some(&weights(&[(peer, 0.0)])))?;
        let (_, buffers) = comm.window_snapshot("w")?;
        let got = buffers[&peer].data()[0];
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(got)
    });
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn get_from_non_in_neighbor_errors() {
    let out = with_comm(3, LinkModel::default(), |comm| {
        let mut edges = std::collections::BTreeSet::new();
        edges.insert((0usize, 1usize));
        edges.insert((1usize, 2usize));
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        w[3] = 0.5;
        w[4] = 0.5;
        w[7] = 0.5;
        w[8] = 0.5;
        comm.set_topology(defog_core::Topology::new(3, edges, w)?);
        comm.win_create(&Tensor::scalar(0.0), "w", true)?;
        // Rank 2's in-neighbors are {1}; pulling from 0 must fail.
        let res = if comm.rank() == 2 {
            comm.neighbor_win_get("w", Some(&weights(&[(0, 1.0)]))).is_err()
        } else {
            true
        };
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(res)
    });
    assert!(out.iter().all(|&b| b));
}

#[test]
fn collect_sums_and_resets() {
    let out = with_comm(3, LinkModel::default(), |comm| {
        comm.set_topology(ring_graph(3)?);
        comm.win_create(&Tensor::scalar(1.0), "w", true)?;
        comm.barrier()?;
        if comm.rank() != 0 {
            // Both neighbors of rank 0 push mass into its window.
            let v = if comm.rank() == 1 { 0.5 } else { 0.25 };
            comm.neighbor_win_accumulate(
                &Tensor::scalar(v),
                "w",
                None,
                Some(&weights(&[(0, 1.0)])),
                true,
            )?;
        }
        comm.barrier()?;
        comm.fabric().await_quiescence()?;
        let collected = comm.win_update_then_collect("w")?;
        let (local, buffers) = comm.window_snapshot("w")?;
        comm.barrier()?;
        comm.win_free("w")?;
        Ok((
            collected.data()[0],
            local.data()[0],
            buffers.values().map(|b| b.data()[0]).sum::<f64>(),
        ))
    });
    // Rank 0: local 1.0 + 0.5 + 0.25 = 1.75, buffers reset to zero.
    assert_eq!(out[0].0, 1.75);
    assert_eq!(out[0].1, 1.75);
    assert_eq!(out[0].2, 0.0);
    // Ranks 1 and 2 collected only their local value.
    assert_eq!(out[1].0, 1.0);
    assert_eq!(out[2].0, 1.0);
}

#[test]
fn mutex_roundtrip_and_contention() {
    let out = with_comm(3, LinkModel::with_jitter(0.001, 0.002), |comm| {
        comm.set_topology(ring_graph(3)?);
        comm.win_create(&Tensor::scalar(0.0), "w", true)?;
        comm.barrier()?;
        // Everyone contends for rank 0's window mutex repeatedly.
        for _ in 0..5 {
            assert!(comm.mutex_acquire("w", 0)?);
            assert!(comm.mutex_release("w", 0)?);
        }
        comm.barrier()?;
        // Release without holding is an error.
        let bad = comm.mutex_release("w", 0).is_err();
        comm.barrier()?;
        comm.win_free("w")?;
        Ok(bad)
    });
    assert!(out.iter().all(|&b| b));
}

#[test]
fn accumulate_with_mutex_conserves_mass_under_jitter() {
    for seed in 0..5u64 {
        let link = LinkModel::with_jitter(0.0005, 0.01);
        let results = run_ranks(
            SimConfig {
                size: 4,
                seed,
                link,
            },
            |fab: Arc<SimFabric>| {
                let comm = Communicator::init_with_config(fab.clone(), CommConfig::default())?;
                comm.set_topology(ring_graph(4)?);
                let x0 = Tensor::scalar(comm.rank() as f64 + 1.0);
                comm.win_create(&x0, "mass", true)?;
                comm.barrier()?;
                let out = comm.out_neighbor_ranks();
                let dst: BTreeMap<usize, f64> =
                    out.iter().map(|&r| (r, 1.0 / (out.len() as f64 + 1.0))).collect();
                let self_weight = 1.0 / (out.len() as f64 + 1.0);
                let mut latest = x0;
                for _ in 0..10 {
                    comm.neighbor_win_accumulate(
                        &latest,
                        "mass",
                        Some(self_weight),
                        Some(&dst),
                        true,
                    )?;
                    latest = comm.win_update_then_collect("mass")?;
                }
                comm.barrier()?;
                fab.await_quiescence()?;
                let final_v = comm.win_update_then_collect("mass")?;
                comm.barrier()?;
                comm.win_free("mass")?;
                Ok(final_v.data()[0])
            },
        )
        .unwrap();
        let total: f64 = results.iter().sum();
        assert!(
            (total - 10.0).abs() < 1e-9,
            "seed {seed}: mass drifted to {total}"
        );
    }
}
