//! Fish-school simulation: decentralized SGD estimation of a predator's
//! position over a distance-based time-varying topology with
//! Metropolis-Hastings weights, plus simplified escape/encircle motion.
//!
//! Each fish observes a noisy distance and azimuth to the predator,
//! takes one stochastic gradient step on
//! `f_i(w) = 0.5 * (d_i - u_i^T (x_i - w))^2`, and pull-averages the
//! estimate with whoever is currently within the interaction radius.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::collective::Communicator;
use crate::error::Result;
use crate::graph::WeightScheme;
use crate::tensor::Tensor;
use crate::topology::metropolis_hastings_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMode {
    /// Fish hold position (pure estimation).
    Stationary,
    /// Accelerate away from the estimated predator.
    Escape,
    /// Orbit the estimated predator at the current radius.
    Encircle,
}

#[derive(Debug, Clone)]
pub struct FishConfig {
    pub gamma: f64,
    pub iters: usize,
    /// Two fish are neighbors when within this distance.
    pub neighbor_radius: f64,
    /// Additive noise scale on distance and azimuth observations.
    pub observation_noise: f64,
    pub motion: MotionMode,
    pub time_step: f64,
    pub max_speed: f64,
    pub seed: u64,
    /// Record positions/estimates every this many iterations (0: final).
    pub record_every: usize,
}

impl Default for FishConfig {
    fn default() -> Self {
        FishConfig {
            gamma: 0.3,
            iters: 200,
            neighbor_radius: 3.0,
            observation_noise: 0.0,
            motion: MotionMode::Stationary,
            time_step: 0.05,
            max_speed: 1.5,
            seed: 0,
            record_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FishRecord {
    pub iter: usize,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub estimate: [f64; 2],
    pub estimate_error: f64,
    pub neighbor_count: usize,
}

/// Initial school placement on a deterministic ring of radius ~2 around
/// the origin, with per-fish jitter.
fn initial_position(rank: usize, n: usize, seed: u64) -> [f64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(rank as u64));
    let angle = 2.0 * std::f64::consts::PI * rank as f64 / n as f64;
    [
        2.0 * angle.cos() + 0.2 * rng.gen::<f64>(),
        2.0 * angle.sin() + 0.2 * rng.gen::<f64>(),
    ]
}

/// One observation: noisy distance and azimuth from the predator to the
/// fish, as the unit direction `u = [cos theta, sin theta]`.
fn observe(
    position: &[f64; 2],
    predator: &[f64; 2],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, [f64; 2]) {
    let dx = position[0] - predator[0];
    let dy = position[1] - predator[1];
    let true_dist = (dx * dx + dy * dy).sqrt();
    let true_theta = dy.atan2(dx);
    let d = true_dist + noise * (rng.gen::<f64>() - 0.5) * 2.0;
    let theta = true_theta + noise * (rng.gen::<f64>() - 0.5) * 2.0;
    (d, [theta.cos(), theta.sin()])
}

pub fn fish_school(
    comm: &Communicator,
    cfg: &FishConfig,
    predator: [f64; 2],
) -> Result<Vec<FishRecord>> {
    let rank = comm.rank();
    let n = comm.size();
    let mut position = initial_position(rank, n, cfg.seed);
    let mut velocity = [0.0f64, 0.0];
    let mut estimate = [0.0f64, 0.0];
    let mut records = Vec::new();

    for iter in 0..cfg.iters {
        // Neighbor discovery from everyone's current position.
        let gathered = comm.allgather(&Tensor::vector(position.to_vec()), "fish.pos")?;
        let pos = gathered.data();
        let dist2 = |a: usize, b: usize| -> f64 {
            let dx = pos[a * 2] - pos[b * 2];
            let dy = pos[a * 2 + 1] - pos[b * 2 + 1];
            dx * dx + dy * dy
        };
        let radius2 = cfg.neighbor_radius * cfg.neighbor_radius;
        let mut degrees: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..n {
            let deg = (0..n).filter(|&j| j != i && dist2(i, j) <= radius2).count();
            degrees.insert(i, deg);
        }
        let nb_ranks: Vec<usize> = (0..n)
            .filter(|&j| j != rank && dist2(rank, j) <= radius2)
            .collect();

        // Metropolis-Hastings pull weights for this round's neighborhood.
        let scheme = metropolis_hastings_weights(&nb_ranks, &degrees, degrees[&rank])?;

        // Noisy observation and one SGD step on the local loss.
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (rank as u64) << 32 ^ iter as u64,
        );
        let (d, u) = observe(&position, &predator, cfg.observation_noise, &mut rng);
        let residual = d - (u[0] * (position[0] - estimate[0]) + u[1] * (position[1] - estimate[1]));
        estimate[0] -= cfg.gamma * residual * u[0];
        estimate[1] -= cfg.gamma * residual * u[1];

        // Pull-style neighbor communication of the estimate.
        let averaged = match &scheme {
            WeightScheme::Pull { src_weights, .. } if src_weights.is_empty() => {
                // Disconnected this round: keep the local estimate.
                Tensor::vector(estimate.to_vec())
            }
            _ => comm.neighbor_allreduce_with_scheme(
                &Tensor::vector(estimate.to_vec()),
                "fish.w",
                &scheme,
            )?,
        };
        estimate = [averaged.data()[0], averaged.data()[1]];

        // Simplified motion response to the estimated predator.
        match cfg.motion {
            MotionMode::Stationary => {}
            MotionMode::Escape => {
                let dx = position[0] - estimate[0];
                let dy = position[1] - estimate[1];
                let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
                velocity[0] += 0.5 * dx / norm;
                velocity[1] += 0.5 * dy / norm;
            }
            MotionMode::Encircle => {
                let dx = position[0] - estimate[0];
                let dy = position[1] - estimate[1];
                let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
                // Tangential orbit with a weak radial spring toward the
                // current ring radius 2.
                let tangent = [-dy / norm, dx / norm];
                let radial = (2.0 - norm) * 0.3;
                velocity[0] = cfg.max_speed * tangent[0] + radial * dx / norm;
                velocity[1] = cfg.max_speed * tangent[1] + radial * dy / norm;
            }
        }
        let speed = (velocity[0] * velocity[0] + velocity[1] * velocity[1]).sqrt();
        if speed > cfg.max_speed {
            velocity[0] *= cfg.max_speed / speed;
            velocity[1] *= cfg.max_speed / speed;
        }
        position[0] += velocity[0] * cfg.time_step;
        position[1] += velocity[1] * cfg.time_step;

        let should = cfg.record_every != 0 && iter % cfg.record_every == 0;
        if should || iter + 1 == cfg.iters {
            let err = ((estimate[0] - predator[0]).powi(2)
                + (estimate[1] - predator[1]).powi(2))
            .sqrt();
            records.push(FishRecord {
                iter,
                position,
                velocity,
                estimate,
                estimate_error: err,
                neighbor_count: nb_ranks.len(),
            });
        }
    }
    Ok(records)
}
