//! Exact-Diffusion over a static symmetric topology: gradient step,
//! bias correction against the previous half-iterate, partial averaging.
//! Unlike plain decentralized gradient descent, the correction removes
//! the step-size-proportional fixed-point bias.

use crate::algorithms::problem::LeastSquaresProblem;
use crate::algorithms::{check_divergence, probe, should_record, AlgoOptions, Trajectory};
use crate::collective::Communicator;
use crate::error::Result;

pub fn exact_diffusion(
    comm: &Communicator,
    problem: &LeastSquaresProblem,
    opts: &AlgoOptions,
) -> Result<Trajectory> {
    let rank = comm.rank();
    let gamma = opts.step_size;
    let mut x = problem.initial_iterate();
    // First iteration uses psi_prev = x0, making the first correction a
    // plain diffusion step.
    let mut psi_prev = x.clone();
    let mut records = Vec::new();
    for iter in 0..opts.iters {
        let grad = problem.local_gradient(rank, &x);
        let mut psi = x.clone();
        psi.add_scaled(-gamma, &grad);
        let mut phi = psi.clone();
        phi.add(&x);
        phi.sub(&psi_prev);
        x = comm.neighbor_allreduce(&phi, "ed.x")?;
        psi_prev = psi;
        check_divergence(&x, iter)?;
        if should_record(opts, iter) {
            records.push(probe(comm, &x, &problem.x_star, iter, 0.0)?);
        }
    }
    records.push(probe(comm, &x, &problem.x_star, opts.iters, 0.0)?);
    Ok(Trajectory { final_x: x, records })
}
