//! Generic adapt-then-combine / adapt-while-combine optimizer steps with
//! per-layer communication overlap.
//!
//! ATC combines the already-adapted iterate: each layer's communication
//! launches as soon as that layer's gradient is ready (reverse layer
//! order, the backpropagation schedule). AWC launches every layer's
//! communication of the previous iterate up front, before any gradient
//! work, and subtracts the gradients afterwards. Both wait only at the
//! end of the step, so overlap changes timing, never results.

use crate::algorithms::problem::LayeredGradientOracle;
use crate::collective::{CommHandle, Communicator};
use crate::error::Result;
use crate::graph::WeightScheme;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommunicationType {
    NeighborAllreduce,
    Allreduce,
    Hierarchical,
}

fn launch(
    comm: &Communicator,
    tensor: &Tensor,
    name: &str,
    scheme: &WeightScheme,
    comm_type: CommunicationType,
) -> Result<CommHandle> {
    match comm_type {
        CommunicationType::NeighborAllreduce => {
            if scheme.is_static() {
                comm.neighbor_allreduce_nonblocking(tensor, name)
            } else {
                comm.neighbor_allreduce_with_scheme_nonblocking(tensor, name, scheme)
            }
        }
        CommunicationType::Allreduce => comm.allreduce_nonblocking(tensor, name),
        CommunicationType::Hierarchical => {
            comm.hierarchical_neighbor_allreduce_nonblocking(tensor, name, None)
        }
    }
}

fn comp_delay(comm: &Communicator, oracle: &dyn LayeredGradientOracle) -> Result<()> {
    let d = oracle.comp_delay_secs();
    if d > 0.0 {
        comm.fabric().sleep(d)?;
    }
    Ok(())
}

/// One ATC step: `x' = combine(x - gamma * g(x))`, layer by layer.
/// `step` uniquifies operation names across iterations.
#[allow(clippy::too_many_arguments)]
pub fn atc_step(
    comm: &Communicator,
    params: &[Tensor],
    oracle: &dyn LayeredGradientOracle,
    gamma: f64,
    scheme: &WeightScheme,
    comm_type: CommunicationType,
    step: u64,
) -> Result<Vec<Tensor>> {
    let layers = oracle.num_layers();
    debug_assert_eq!(params.len(), layers);
    let mut handles: Vec<Option<CommHandle>> = (0..layers).map(|_| None).collect();
    // Gradients arrive in reverse layer order; each layer's combine
    // launches as soon as its gradient exists.
    for layer in (0..layers).rev() {
        comp_delay(comm, oracle)?;
        let grad = oracle.gradient(layer, params, step);
        let mut adapted = params[layer].clone();
        adapted.add_scaled(-gamma, &grad);
        let name = format!("atc.l{layer}");
        handles[layer] = Some(launch(comm, &adapted, &name, scheme, comm_type)?);
    }
    let mut out = Vec::with_capacity(layers);
    for handle in handles.into_iter() {
        out.push(comm.wait(handle.expect("handle per layer"))?);
    }
    Ok(out)
}

/// One AWC step: `x' = combine(x) - gamma * g(x)`. All combines launch
/// before gradient computation starts, overlapping fully with it.
#[allow(clippy::too_many_arguments)]
pub fn awc_step(
    comm: &Communicator,
    params: &[Tensor],
    oracle: &dyn LayeredGradientOracle,
    gamma: f64,
    scheme: &WeightScheme,
    comm_type: CommunicationType,
    step: u64,
) -> Result<Vec<Tensor>> {
    let layers = oracle.num_layers();
    debug_assert_eq!(params.len(), layers);
    let mut handles = Vec::with_capacity(layers);
    for (layer, tensor) in params.iter().enumerate() {
        let name = format!("awc.l{layer}");
        handles.push(launch(comm, tensor, &name, scheme, comm_type)?);
    }
    // Gradient work proceeds while the combines are in flight.
    let mut grads: Vec<Option<Tensor>> = (0..layers).map(|_| None).collect();
    for layer in (0..layers).rev() {
        comp_delay(comm, oracle)?;
        grads[layer] = Some(oracle.gradient(layer, params, step));
    }
    let mut out = Vec::with_capacity(layers);
    for (handle, grad) in handles.into_iter().zip(grads.into_iter()) {
        let mut combined = comm.wait(handle)?;
        combined.add_scaled(-gamma, &grad.expect("gradient per layer"));
        out.push(combined);
    }
    Ok(out)
}
