//! Named window buffers for asynchronous remote-memory-style exchange.
//!
//! Each rank owns, per window, its local tensor plus one receive buffer
//! per in-neighbor under the topology at creation time. Remote writes are
//! applied by the owner's communication thread (message-passing
//! realization of one-sided access), so atomicity is enforceable without
//! shared memory. Every in-neighbor writes only its own slot; writers
//! never interfere with each other.
//!
//! Each window also carries one distributed mutex owned by this rank,
//! guarding all of its buffers; acquire requests are granted FIFO.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies one pending mutex acquisition: (requesting rank, request id).
pub type MutexTicket = (usize, u32);

#[derive(Debug)]
pub struct WindowState {
    pub local: Tensor,
    pub buffers: BTreeMap<usize, Tensor>,
    pub in_neighbors: Vec<usize>,
    pub out_neighbors: Vec<usize>,
    pub zero_init: bool,
    holder: Option<MutexTicket>,
    queue: VecDeque<MutexTicket>,
}

#[derive(Debug, Default)]
pub struct WindowTable {
    windows: BTreeMap<String, WindowState>,
}

impl WindowTable {
    pub fn new() -> WindowTable {
        WindowTable::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.windows.contains_key(name)
    }

    fn get(&self, name: &str) -> Result<&WindowState> {
        self.windows.get(name).ok_or_else(|| Error::Window {
            name: name.to_string(),
            detail: "unknown window".into(),
        })
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut WindowState> {
        self.windows.get_mut(name).ok_or_else(|| Error::Window {
            name: name.to_string(),
            detail: "unknown window".into(),
        })
    }

    /// Allocates a window: one buffer per in-neighbor, initialized to the
    /// local tensor's value, or zeros with `zero_init`.
    pub fn create(
        &mut self,
        name: &str,
        tensor: Tensor,
        zero_init: bool,
        in_neighbors: Vec<usize>,
        out_neighbors: Vec<usize>,
    ) -> Result<()> {
        if self.windows.contains_key(name) {
            return Err(Error::Window {
                name: name.to_string(),
                detail: "name already in use".into(),
            });
        }
        let buffers = in_neighbors
            .iter()
            .map(|&j| {
                let t = if zero_init {
                    Tensor::zeros_like(&tensor)
                } else {
                    tensor.clone()
                };
                (j, t)
            })
            .collect();
        self.windows.insert(
            name.to_string(),
            WindowState {
                local: tensor,
                buffers,
                in_neighbors,
                out_neighbors,
                zero_init,
                holder: None,
                queue: VecDeque::new(),
            },
        );
        Ok(())
    }

    pub fn free(&mut self, name: &str) -> Result<()> {
        self.windows.remove(name).map(|_| ()).ok_or_else(|| Error::Window {
            name: name.to_string(),
            detail: "unknown window".into(),
        })
    }

    pub fn out_neighbors(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.out_neighbors.clone())
    }

    pub fn in_neighbors(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.in_neighbors.clone())
    }

    pub fn local_shape(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.local.shape().to_vec())
    }

    pub fn local_tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.local.clone())
    }

    /// Replaces the local tensor (sender-side `self_weight` scaling of
    /// put/accumulate lands here).
    pub fn set_local(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let w = self.get_mut(name)?;
        if !w.local.same_shape(&tensor) {
            return Err(Error::Window {
                name: name.to_string(),
                detail: "local tensor shape change".into(),
            });
        }
        w.local = tensor;
        Ok(())
    }

    /// Applies a remote put (overwrite) into the sender's slot.
    pub fn apply_put(&mut self, name: &str, src: usize, value: Tensor) -> Result<()> {
        let w = self.get_mut(name)?;
        match w.buffers.get_mut(&src) {
            Some(buf) if buf.same_shape(&value) => {
                *buf = value;
                Ok(())
            }
            Some(_) => Err(Error::Window {
                name: name.to_string(),
                detail: format!("put from {src} with mismatched shape"),
            }),
            None => Err(Error::Window {
                name: name.to_string(),
                detail: format!("put from {src}, not an in-neighbor"),
            }),
        }
    }

    /// Applies a remote accumulate (add) into the sender's slot.
    pub fn apply_accumulate(&mut self, name: &str, src: usize, value: Tensor) -> Result<()> {
        let w = self.get_mut(name)?;
        match w.buffers.get_mut(&src) {
            Some(buf) if buf.same_shape(&value) => {
                buf.add(&value);
                Ok(())
            }
            Some(_) => Err(Error::Window {
                name: name.to_string(),
                detail: format!("accumulate from {src} with mismatched shape"),
            }),
            None => Err(Error::Window {
                name: name.to_string(),
                detail: format!("accumulate from {src}, not an in-neighbor"),
            }),
        }
    }

    /// Stores a fetched neighbor tensor (scaled by the receiver) into the
    /// source's slot.
    pub fn apply_get_reply(&mut self, name: &str, src: usize, value: Tensor) -> Result<()> {
        self.apply_put(name, src, value)
    }

    /// Weighted average of the local tensor and the buffers:
    /// `self_weight * local + sum_j src_weights[j] * buffer[j]`.
    /// Defaults are uniform `1 / (|N(i)| + 1)`. Buffers never written by
    /// their neighbor still hold the creation-time snapshot (or zeros
    /// under `zero_init`) and participate like any other.
    pub fn update(
        &self,
        name: &str,
        self_weight: Option<f64>,
        src_weights: Option<&BTreeMap<usize, f64>>,
    ) -> Result<Tensor> {
        let w = self.get(name)?;
        let uniform = 1.0 / (w.in_neighbors.len() as f64 + 1.0);
        let sw = self_weight.unwrap_or(uniform);
        let mut out = w.local.scaled(sw);
        match src_weights {
            Some(map) => {
                for (&j, &r) in map {
                    let buf = w.buffers.get(&j).ok_or_else(|| Error::Window {
                        name: name.to_string(),
                        detail: format!("src weight for {j}, not an in-neighbor"),
                    })?;
                    out.add_scaled(r, buf);
                }
            }
            None => {
                for buf in w.buffers.values() {
                    out.add_scaled(uniform, buf);
                }
            }
        }
        Ok(out)
    }

    /// Sum-and-reset: `result = local + sum_j buffer[j]`, all buffers
    /// zeroed, local replaced by the result. Unit weights, not averaging
    /// — push-sum mass moves, it is never rescaled. The caller runs this
    /// under the window's own mutex.
    pub fn update_then_collect(&mut self, name: &str) -> Result<Tensor> {
        let w = self.get_mut(name)?;
        let mut result = w.local.clone();
        for buf in w.buffers.values_mut() {
            result.add(buf);
            buf.fill(0.0);
        }
        w.local = result.clone();
        Ok(result)
    }

    /// Local mass probe: local tensor plus all buffers, element-wise.
    pub fn mass(&self, name: &str) -> Result<Tensor> {
        let w = self.get(name)?;
        let mut total = w.local.clone();
        for buf in w.buffers.values() {
            total.add(buf);
        }
        Ok(total)
    }

    pub fn snapshot(&self, name: &str) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let w = self.get(name)?;
        Ok((w.local.clone(), w.buffers.clone()))
    }

    /// FIFO mutex acquire. Returns true when granted immediately; false
    /// when queued behind the current holder.
    pub fn mutex_request(&mut self, name: &str, ticket: MutexTicket) -> Result<bool> {
        let w = self.get_mut(name)?;
        if w.holder.is_none() {
            w.holder = Some(ticket);
            Ok(true)
        } else {
            w.queue.push_back(ticket);
            Ok(false)
        }
    }

    /// Releases the mutex held by `rank`; returns the next granted ticket
    /// if anyone was queued. Releasing without holding is an error.
    pub fn mutex_release(&mut self, name: &str, rank: usize) -> Result<Option<MutexTicket>> {
        let w = self.get_mut(name)?;
        match w.holder {
            Some((holder, _)) if holder == rank => {
                w.holder = w.queue.pop_front();
                Ok(w.holder)
            }
            _ => Err(Error::Mutex {
                name: name.to_string(),
                detail: format!("rank {rank} released without holding"),
            }),
        }
    }

    pub fn mutex_holder(&self, name: &str) -> Result<Option<MutexTicket>> {
        Ok(self.get(name)?.holder)
    }
}
