//! Decentralized gradient descent over the communicator's static
//! topology: a local gradient step followed by partial averaging.

use crate::algorithms::problem::LeastSquaresProblem;
use crate::algorithms::{check_divergence, probe, should_record, AlgoOptions, Trajectory};
use crate::collective::Communicator;
use crate::error::Result;

pub fn dgd(
    comm: &Communicator,
    problem: &LeastSquaresProblem,
    opts: &AlgoOptions,
) -> Result<Trajectory> {
    let rank = comm.rank();
    let gamma = opts.step_size;
    let mut x = problem.initial_iterate();
    let mut records = Vec::new();
    for iter in 0..opts.iters {
        let grad = problem.local_gradient(rank, &x);
        let mut half_step = x.clone();
        half_step.add_scaled(-gamma, &grad);
        x = comm.neighbor_allreduce(&half_step, "dgd.x")?;
        check_divergence(&x, iter)?;
        if should_record(opts, iter) {
            records.push(probe(comm, &x, &problem.x_star, iter, 0.0)?);
        }
    }
    records.push(probe(comm, &x, &problem.x_star, opts.iters, 0.0)?);
    Ok(Trajectory { final_x: x, records })
}
