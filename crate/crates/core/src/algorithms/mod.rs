//! Reference decentralized algorithms built on the collective and window
//! primitives, plus generic adapt-then/while-combine optimizer steps.

pub mod consensus;
pub mod fish;
pub mod optimizer;
pub mod problem;

mod dgd;
mod exact_diffusion;
mod gradient_tracking;

pub use consensus::{async_push_sum_consensus, PushSumOutcome};
pub use dgd::dgd;
pub use exact_diffusion::exact_diffusion;
pub use fish::{fish_school, FishConfig, FishRecord, MotionMode};
pub use gradient_tracking::push_sum_gradient_tracking;
pub use optimizer::{atc_step, awc_step, CommunicationType};
pub use problem::{
    LayeredGradientOracle, LeastSquaresOracle, LeastSquaresProblem, QuadraticLayeredOracle,
};

use crate::collective::Communicator;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Iterate diverged past any plausible trajectory.
const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct AlgoOptions {
    pub step_size: f64,
    pub iters: usize,
    /// Record statistics every this many iterations (0: final only).
    pub record_every: usize,
}

impl AlgoOptions {
    pub fn new(step_size: f64, iters: usize) -> Self {
        AlgoOptions {
            step_size,
            iters,
            record_every: 0,
        }
    }

    pub fn recording(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }
}

/// One recorded probe of the global state (identical on every rank,
/// derived from an allgather of the iterates).
#[derive(Debug, Clone)]
pub struct Record {
    pub iter: usize,
    /// This rank's distance to the reference optimum.
    pub dist_to_opt: f64,
    /// max_i ||x_i - x*||.
    pub max_dist_to_opt: f64,
    /// ||mean(x) - x*|| (the averaged iterate's bias).
    pub mean_dist_to_opt: f64,
    /// max_i ||x_i - mean(x)||.
    pub consensus_residual: f64,
    /// Algorithm-specific scalar (push-sum gradient tracking stores
    /// sum_i v_i here); zero otherwise.
    pub extra: f64,
    /// Backend clock when the record was taken (virtual on sim).
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub final_x: Tensor,
    pub records: Vec<Record>,
}

impl Trajectory {
    pub fn final_record(&self) -> Option<&Record> {
        self.records.last()
    }
}

fn check_divergence(x: &Tensor, iter: usize) -> Result<()> {
    let norm = x.norm2();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Divergence(format!(
            "iterate norm {norm:.3e} at iteration {iter}; try a smaller step size"
        )));
    }
    Ok(())
}

/// Gathers all ranks' iterates and computes consensus statistics; every
/// rank returns the same record.
fn probe(
    comm: &Communicator,
    x: &Tensor,
    x_star: &[f64],
    iter: usize,
    extra: f64,
) -> Result<Record> {
    let gathered = comm.allgather(x, "__probe")?;
    let n = comm.size();
    let d = x.len();
    let data = gathered.data();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for k in 0..d {
            mean[k] += data[r * d + k];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mean_dist_to_opt = mean
        .iter()
        .zip(x_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut consensus_residual: f64 = 0.0;
    let mut max_dist: f64 = 0.0;
    for r in 0..n {
        let row = &data[r * d..(r + 1) * d];
        let dev = row
            .iter()
            .zip(mean.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        consensus_residual = consensus_residual.max(dev);
        let dist = row
            .iter()
            .zip(x_star.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        max_dist = max_dist.max(dist);
    }
    let dist_to_opt = x
        .data()
        .iter()
        .zip(x_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(Record {
        iter,
        dist_to_opt,
        max_dist_to_opt: max_dist,
        mean_dist_to_opt,
        consensus_residual,
        extra,
        wall_secs: comm.fabric().now(),
    })
}

fn should_record(opts: &AlgoOptions, iter: usize) -> bool {
    opts.record_every != 0 && iter % opts.record_every == 0
}
