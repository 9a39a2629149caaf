//! Asynchronous push-sum average consensus over window primitives.
//!
//! Each rank keeps the extended tensor `[x; p]` in a zero-initialized
//! window and loops accumulate / update-then-collect with no inter-rank
//! synchronization. With the push weights `1/(outdegree+1)` the global
//! sums of `x` and `p` are conserved, so the ratio `y = x / p` converges
//! to the unbiased mean under arbitrary delivery delays.

use std::collections::BTreeMap;

use crate::collective::Communicator;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PushSumOutcome {
    /// Unbiased consensus estimate `x / p`.
    pub estimate: Tensor,
    /// Final extended state (x part).
    pub x_part: Tensor,
    /// Final mass scalar `p`.
    pub mass: f64,
    /// `y = x/p` after each local iteration (for convergence plots).
    pub history: Vec<Tensor>,
}

fn split_ext(ext: &Tensor) -> (Tensor, f64) {
    let d = ext.len() - 1;
    let x = Tensor::vector(ext.data()[..d].to_vec());
    (x, ext.data()[d])
}

/// Runs `iters` asynchronous push-sum rounds on this rank. The caller
/// sets the (static) topology first; window name must be unused.
pub fn async_push_sum_consensus(
    comm: &Communicator,
    x0: &Tensor,
    window_name: &str,
    iters: usize,
) -> Result<PushSumOutcome> {
    // Extended tensor [x; p], p0 = 1.
    let mut ext_data = x0.data().to_vec();
    ext_data.push(1.0);
    let mut x_ext = Tensor::vector(ext_data);
    comm.win_create(&x_ext, window_name, true)?;

    let out_neighbors = comm.out_neighbor_ranks();
    let outdegree = out_neighbors.len();
    let self_weight = 1.0 / (outdegree as f64 + 1.0);
    let dst_weights: BTreeMap<usize, f64> = out_neighbors
        .iter()
        .map(|&r| (r, self_weight))
        .collect();

    let mut history = Vec::with_capacity(iters);
    for iter in 0..iters {
        comm.neighbor_win_accumulate(
            &x_ext,
            window_name,
            Some(self_weight),
            Some(&dst_weights),
            true,
        )?;
        x_ext = comm.win_update_then_collect(window_name)?;
        let (x, p) = split_ext(&x_ext);
        if p.abs() <= P_FLOOR {
            return Err(Error::Degeneracy(format!(
                "push-sum mass p collapsed to {p:.3e} at iteration {iter}"
            )));
        }
        history.push(x.scaled(1.0 / p));
    }

    // Different processes end at different times; settle before the
    // final read.
    comm.barrier()?;
    comm.fabric().await_quiescence()?;
    x_ext = comm.win_update_then_collect(window_name)?;
    let (x, p) = split_ext(&x_ext);
    if p.abs() <= P_FLOOR {
        return Err(Error::Degeneracy(format!(
            "push-sum mass p collapsed to {p:.3e} at the epilogue"
        )));
    }
    let estimate = x.scaled(1.0 / p);
    comm.barrier()?;
    comm.win_free(window_name)?;
    Ok(PushSumOutcome {
        estimate,
        x_part: x,
        mass: p,
        history,
    })
}
