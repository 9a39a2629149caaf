//! Push-sum gradient tracking over time-varying one-peer topologies.
//!
//! Per round, with the round's column-stochastic weights `W^k`:
//! `u <- W^k (u - gamma * y)`, `v <- W^k v`, `x = u / v` element-wise,
//! then `y <- W^k (y + g(x_new) - g(x_old))`, with `v0 = 1` and
//! `y0 = g(x0)`. The scalar mass `v` corrects the push-style bias; its
//! global sum stays equal to the node count every round.

use crate::algorithms::problem::LeastSquaresProblem;
use crate::algorithms::{check_divergence, probe, should_record, AlgoOptions, Trajectory};
use crate::collective::Communicator;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::tensor::Tensor;
use crate::topology::{DynamicScheduleKind, DynamicTopologyGenerator};

const V_FLOOR: f64 = 1e-12;

pub fn push_sum_gradient_tracking(
    comm: &Communicator,
    problem: &LeastSquaresProblem,
    base_topology: &Topology,
    opts: &AlgoOptions,
) -> Result<Trajectory> {
    let rank = comm.rank();
    let gamma = opts.step_size;
    let mut generator = DynamicTopologyGenerator::new(
        base_topology.clone(),
        rank,
        DynamicScheduleKind::OnePeerOfGraph,
    )?;

    let mut x = problem.initial_iterate();
    let mut u = x.clone();
    let mut v = Tensor::scalar(1.0);
    let mut grad_prev = problem.local_gradient(rank, &x);
    let mut y = grad_prev.clone();
    let mut records = Vec::new();

    for iter in 0..opts.iters {
        let scheme = generator.next_scheme()?;

        let mut w = u.clone();
        w.add_scaled(-gamma, &y);
        let u_new = comm.neighbor_allreduce_with_scheme(&w, "gt.u", &scheme)?;
        let v_new = comm.neighbor_allreduce_with_scheme(&v, "gt.v", &scheme)?;
        if v_new.data()[0].abs() <= V_FLOOR {
            return Err(Error::Degeneracy(format!(
                "push-sum mass collapsed to {:.3e} at iteration {iter}",
                v_new.data()[0]
            )));
        }
        let x_new = u_new.scaled(1.0 / v_new.data()[0]);

        let grad_new = problem.local_gradient(rank, &x_new);
        let mut q = y.clone();
        q.add(&grad_new);
        q.sub(&grad_prev);
        y = comm.neighbor_allreduce_with_scheme(&q, "gt.y", &scheme)?;

        u = u_new;
        v = v_new;
        x = x_new;
        grad_prev = grad_new;
        check_divergence(&x, iter)?;

        if should_record(opts, iter) {
            let v_sum = comm.allreduce(&v, "gt.vsum")?.data()[0] * comm.size() as f64;
            records.push(probe(comm, &x, &problem.x_star, iter, v_sum)?);
        }
    }
    let v_sum = comm.allreduce(&v, "gt.vsum")?.data()[0] * comm.size() as f64;
    records.push(probe(comm, &x, &problem.x_star, opts.iters, v_sum)?);
    Ok(Trajectory { final_x: x, records })
}
