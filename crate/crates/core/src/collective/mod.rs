//! Synchronous collectives and the window primitives' application-facing
//! surface.
//!
//! Each rank runs one application thread (yours) plus one communication
//! progress thread spawned by [`Communicator::init`]. Application calls
//! enqueue requests on a shared queue and block on completion slots; the
//! progress thread negotiates readiness and topology validity through
//! rank 0, fuses small requests, executes the data exchanges, applies
//! remote window traffic, and serves the distributed mutex.

mod engine;
pub mod wire;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::graph::{Topology, WeightScheme};
use crate::tensor::Tensor;
use crate::topology::full_graph;
use crate::transport::{Fabric, ENV_FUSION_BYTES, ENV_LOCAL_SIZE, ENV_TOPO_CHECK};
use engine::Engine;
pub use wire::CollKind;

pub const DEFAULT_FUSION_BYTES: usize = 2 * 1024 * 1024;

/// Runtime knobs, normally read from the environment the launcher set up.
#[derive(Debug, Clone)]
pub struct CommConfig {
    /// Fusion buffer budget in bytes (`DEFOG_FUSION_BYTES`). Neighbor
    /// collectives are latency-cheap, so smaller values than the
    /// allreduce-style default can pay off; it is exposed, not fixed.
    pub fusion_bytes: usize,
    /// Dynamic-topology validation during negotiation (`DEFOG_TOPO_CHECK`,
    /// default on). Turning it off removes the cross-rank set comparison;
    /// mismatched schemes then stall instead of erroring.
    pub topo_check: bool,
    /// Ranks per machine for hierarchical collectives
    /// (`DEFOG_LOCAL_SIZE`). Unset means a single machine.
    pub local_size: Option<usize>,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            fusion_bytes: DEFAULT_FUSION_BYTES,
            topo_check: true,
            local_size: None,
        }
    }
}

impl CommConfig {
    pub fn from_env() -> CommConfig {
        let mut cfg = CommConfig::default();
        if let Ok(v) = std::env::var(ENV_FUSION_BYTES) {
            if let Ok(bytes) = v.parse::<usize>() {
                cfg.fusion_bytes = bytes;
            }
        }
        if let Ok(v) = std::env::var(ENV_TOPO_CHECK) {
            cfg.topo_check = v.trim() != "0";
        }
        if let Ok(v) = std::env::var(ENV_LOCAL_SIZE) {
            if let Ok(l) = v.parse::<usize>() {
                cfg.local_size = Some(l);
            }
        }
        cfg
    }
}

/// Opaque ticket for an in-flight nonblocking collective. `wait` may be
/// called exactly once; the handle is consumed by it.
#[derive(Debug)]
pub struct CommHandle {
    id: u64,
    op_name: String,
}

impl CommHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn op_name(&self) -> &str {
        &self.op_name
    }
}

/// Result payload of a completed request.
#[derive(Debug, Clone)]
pub enum OpOutput {
    Tensor(Tensor),
    Bool(bool),
    Snapshot {
        local: Tensor,
        buffers: BTreeMap<usize, Tensor>,
    },
    Unit,
}

pub(crate) struct WinTransferReq {
    pub name: String,
    pub tensor: Tensor,
    pub self_weight: Option<f64>,
    pub dst_weights: BTreeMap<usize, f64>,
    pub require_mutex: bool,
    pub accumulate: bool,
    pub handle: u64,
}

pub(crate) enum Request {
    Collective {
        kind: CollKind,
        name: String,
        tensor: Option<Tensor>,
        scheme: WeightScheme,
        machine_scheme: Option<WeightScheme>,
        zero_init: bool,
        handle: u64,
    },
    WinTransfer(WinTransferReq),
    WinGet {
        name: String,
        src_weights: BTreeMap<usize, f64>,
        handle: u64,
    },
    WinUpdate {
        name: String,
        self_weight: Option<f64>,
        src_weights: Option<BTreeMap<usize, f64>>,
        handle: u64,
    },
    WinCollect {
        name: String,
        handle: u64,
    },
    WinSnapshot {
        name: String,
        handle: u64,
    },
    MutexAcquire {
        name: String,
        target: usize,
        handle: u64,
    },
    MutexRelease {
        name: String,
        target: usize,
        handle: u64,
    },
    Shutdown,
}

struct TopoState {
    topology: Topology,
    machine: Option<Topology>,
}

/// State shared between the application thread and the progress thread.
pub(crate) struct NodeState {
    pub rank: usize,
    pub size: usize,
    pub config: CommConfig,
    topo: Mutex<TopoState>,
    requests: Mutex<VecDeque<Request>>,
    completions: Mutex<HashMap<u64, Option<Result<OpOutput>>>>,
    next_handle: AtomicU64,
    poisoned: Mutex<Option<Error>>,
    progress_done: std::sync::atomic::AtomicBool,
}

fn trivial_topology() -> Topology {
    Topology::new(1, Default::default(), vec![1.0]).expect("single node")
}

impl NodeState {
    fn new(rank: usize, size: usize, config: CommConfig) -> NodeState {
        let topology = if size == 1 {
            trivial_topology()
        } else {
            full_graph(size).expect("size >= 2")
        };
        NodeState {
            rank,
            size,
            config,
            topo: Mutex::new(TopoState {
                topology,
                machine: None,
            }),
            requests: Mutex::new(VecDeque::new()),
            completions: Mutex::new(HashMap::new()),
            next_handle: AtomicU64::new(1),
            poisoned: Mutex::new(None),
            progress_done: std::sync::atomic::AtomicBool::new(false),
        }
    }

    pub(crate) fn topology(&self) -> Topology {
        self.topo.lock().unwrap().topology.clone()
    }

    pub(crate) fn machine_topology_or_trivial(&self, machines: usize) -> Result<Topology> {
        let t = self.topo.lock().unwrap();
        match &t.machine {
            Some(m) => Ok(m.clone()),
            None if machines == 1 => Ok(trivial_topology()),
            None => Err(Error::Config(
                "machine topology not set (set_machine_topology)".into(),
            )),
        }
    }

    pub(crate) fn complete(&self, handle: u64, out: Result<OpOutput>) {
        self.completions.lock().unwrap().insert(handle, Some(out));
    }

    pub(crate) fn poison(&self, err: Error) {
        let mut p = self.poisoned.lock().unwrap();
        if p.is_none() {
            *p = Some(err);
        }
    }

    fn poisoned(&self) -> Option<Error> {
        self.poisoned.lock().unwrap().clone()
    }

    pub(crate) fn has_request(&self) -> bool {
        !self.requests.lock().unwrap().is_empty()
    }

    pub(crate) fn pop_request(&self) -> Option<Request> {
        self.requests.lock().unwrap().pop_front()
    }
}

/// Per-rank handle to the collective runtime.
pub struct Communicator {
    fabric: Arc<dyn Fabric>,
    state: Arc<NodeState>,
    progress: Option<std::thread::JoinHandle<()>>,
}

impl Communicator {
    /// Spawns the progress thread and passes an initial barrier so every
    /// rank's runtime is up before this returns.
    pub fn init(fabric: Arc<dyn Fabric>) -> Result<Communicator> {
        Communicator::init_with_config(fabric, CommConfig::from_env())
    }

    pub fn init_with_config(fabric: Arc<dyn Fabric>, config: CommConfig) -> Result<Communicator> {
        let state = Arc::new(NodeState::new(fabric.rank(), fabric.size(), config));
        let engine_state = Arc::clone(&state);
        let engine_fabric = Arc::clone(&fabric);
        let label = format!("rank{}.progress", fabric.rank());
        let progress = fabric.spawn_actor(
            label,
            Box::new(move || progress_main(engine_fabric, engine_state)),
        );
        let comm = Communicator {
            fabric,
            state,
            progress: Some(progress),
        };
        comm.barrier()?;
        Ok(comm)
    }

    pub fn rank(&self) -> usize {
        self.state.rank
    }

    pub fn size(&self) -> usize {
        self.state.size
    }

    pub fn fabric(&self) -> &Arc<dyn Fabric> {
        &self.fabric
    }

    pub fn config(&self) -> &CommConfig {
        &self.state.config
    }

    /// Replaces the global topology on this rank. Returns false (with a
    /// diagnostic in the log) when the topology size does not match.
    pub fn set_topology(&self, topology: Topology) -> bool {
        if topology.size() != self.state.size {
            log::warn!(
                "set_topology rejected: topology has {} nodes, fabric has {}",
                topology.size(),
                self.state.size
            );
            return false;
        }
        self.state.topo.lock().unwrap().topology = topology;
        true
    }

    /// Replaces the machine-level topology used by hierarchical
    /// collectives. Its size must equal the number of machines.
    pub fn set_machine_topology(&self, topology: Topology) -> bool {
        let local_size = self.state.config.local_size.unwrap_or(self.state.size);
        if local_size == 0
            || self.state.size % local_size != 0
            || topology.size() != self.state.size / local_size
        {
            log::warn!(
                "set_machine_topology rejected: {} machines expected",
                if local_size == 0 { 0 } else { self.state.size / local_size.max(1) }
            );
            return false;
        }
        self.state.topo.lock().unwrap().machine = Some(topology);
        true
    }

    pub fn topology(&self) -> Topology {
        self.state.topology()
    }

    /// This rank's current partial-averaging weights under the global
    /// topology: (self weight, per-in-neighbor source weights).
    pub fn self_weights(&self) -> (f64, BTreeMap<usize, f64>) {
        let topo = self.state.topology();
        let row = topo.row(self.state.rank);
        let mut src = BTreeMap::new();
        for (j, &w) in row.iter().enumerate() {
            if j != self.state.rank && w != 0.0 {
                src.insert(j, w);
            }
        }
        (row[self.state.rank], src)
    }

    pub fn in_neighbor_ranks(&self) -> Vec<usize> {
        self.state
            .topology()
            .in_neighbors(self.state.rank)
            .unwrap_or_default()
    }

    pub fn out_neighbor_ranks(&self) -> Vec<usize> {
        self.state
            .topology()
            .out_neighbors(self.state.rank)
            .unwrap_or_default()
    }

    fn submit(&self, build: impl FnOnce(u64) -> Request, op_name: &str) -> Result<CommHandle> {
        if let Some(e) = self.state.poisoned() {
            return Err(e);
        }
        let id = self.state.next_handle.fetch_add(1, Ordering::SeqCst);
        {
            let mut c = self.state.completions.lock().unwrap();
            c.insert(id, None);
        }
        self.state.requests.lock().unwrap().push_back(build(id));
        self.fabric.notify();
        Ok(CommHandle {
            id,
            op_name: op_name.to_string(),
        })
    }

    /// Blocks until the handle's operation finishes and returns its
    /// output. Consumes the handle; waiting twice is a usage error.
    pub fn wait_output(&self, handle: CommHandle) -> Result<OpOutput> {
        let id = handle.id;
        {
            let c = self.state.completions.lock().unwrap();
            if !c.contains_key(&id) {
                return Err(Error::HandleConsumed(id));
            }
        }
        let state = Arc::clone(&self.state);
        self.fabric.wait_until("wait(handle)", &mut || {
            if state.poisoned().is_some() {
                return true;
            }
            state
                .completions
                .lock()
                .unwrap()
                .get(&id)
                .map(|slot| slot.is_some())
                .unwrap_or(true)
        })?;
        let slot = self.state.completions.lock().unwrap().remove(&id);
        match slot {
            Some(Some(out)) => out,
            Some(None) | None => Err(self
                .state
                .poisoned()
                .unwrap_or(Error::HandleConsumed(id))),
        }
    }

    /// `wait` for tensor-valued collectives.
    pub fn wait(&self, handle: CommHandle) -> Result<Tensor> {
        match self.wait_output(handle)? {
            OpOutput::Tensor(t) => Ok(t),
            other => Err(Error::Wire(format!(
                "operation completed without a tensor: {other:?}"
            ))),
        }
    }

    fn wait_bool(&self, handle: CommHandle) -> Result<bool> {
        match self.wait_output(handle)? {
            OpOutput::Bool(b) => Ok(b),
            other => Err(Error::Wire(format!(
                "operation completed without a flag: {other:?}"
            ))),
        }
    }

    // ------------------------------------------------------------------
    // Collectives.
    // ------------------------------------------------------------------

    /// Global average: every rank returns `(1/n) * sum_i tensor_i`.
    pub fn allreduce(&self, tensor: &Tensor, name: &str) -> Result<Tensor> {
        let h = self.allreduce_nonblocking(tensor, name)?;
        self.wait(h)
    }

    pub fn allreduce_nonblocking(&self, tensor: &Tensor, name: &str) -> Result<CommHandle> {
        let t = tensor.clone();
        let name_owned = name.to_string();
        self.submit(
            move |handle| Request::Collective {
                kind: CollKind::Allreduce,
                name: name_owned,
                tensor: Some(t),
                scheme: WeightScheme::Static,
                machine_scheme: None,
                zero_init: false,
                handle,
            },
            name,
        )
    }

    /// Partial averaging under the global topology (receiver-side W-row
    /// scaling).
    pub fn neighbor_allreduce(&self, tensor: &Tensor, name: &str) -> Result<Tensor> {
        let h = self.neighbor_allreduce_nonblocking(tensor, name)?;
        self.wait(h)
    }

    pub fn neighbor_allreduce_nonblocking(
        &self,
        tensor: &Tensor,
        name: &str,
    ) -> Result<CommHandle> {
        self.submit_nar(tensor, name, WeightScheme::Static)
    }

    /// Partial averaging with an explicit per-round weight scheme
    /// (dynamic topologies; push, pull, or push-pull configuration).
    pub fn neighbor_allreduce_with_scheme(
        &self,
        tensor: &Tensor,
        name: &str,
        scheme: &WeightScheme,
    ) -> Result<Tensor> {
        let h = self.neighbor_allreduce_with_scheme_nonblocking(tensor, name, scheme)?;
        self.wait(h)
    }

    pub fn neighbor_allreduce_with_scheme_nonblocking(
        &self,
        tensor: &Tensor,
        name: &str,
        scheme: &WeightScheme,
    ) -> Result<CommHandle> {
        self.submit_nar(tensor, name, scheme.clone())
    }

    fn submit_nar(&self, tensor: &Tensor, name: &str, scheme: WeightScheme) -> Result<CommHandle> {
        let t = tensor.clone();
        let name_owned = name.to_string();
        self.submit(
            move |handle| Request::Collective {
                kind: CollKind::NeighborAllreduce,
                name: name_owned,
                tensor: Some(t),
                scheme,
                machine_scheme: None,
                zero_init: false,
                handle,
            },
            name,
        )
    }

    /// Gathers equal-shaped tensors from all ranks, stacked in rank order
    /// along a new leading axis.
    pub fn allgather(&self, tensor: &Tensor, name: &str) -> Result<Tensor> {
        let t = tensor.clone();
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::Collective {
                kind: CollKind::Allgather,
                name: name_owned,
                tensor: Some(t),
                scheme: WeightScheme::Static,
                machine_scheme: None,
                zero_init: false,
                handle,
            },
            name,
        )?;
        self.wait(h)
    }

    /// Three-stage machine-level partial averaging: intra-machine uniform
    /// average, machine-level neighbor allreduce by each machine's local
    /// rank 0, intra-machine broadcast of the result.
    pub fn hierarchical_neighbor_allreduce(
        &self,
        tensor: &Tensor,
        name: &str,
        machine_scheme: Option<&WeightScheme>,
    ) -> Result<Tensor> {
        let h = self.hierarchical_neighbor_allreduce_nonblocking(tensor, name, machine_scheme)?;
        self.wait(h)
    }

    pub fn hierarchical_neighbor_allreduce_nonblocking(
        &self,
        tensor: &Tensor,
        name: &str,
        machine_scheme: Option<&WeightScheme>,
    ) -> Result<CommHandle> {
        let t = tensor.clone();
        let name_owned = name.to_string();
        let ms = machine_scheme.cloned();
        self.submit(
            move |handle| Request::Collective {
                kind: CollKind::Hierarchical,
                name: name_owned,
                tensor: Some(t),
                scheme: WeightScheme::Static,
                machine_scheme: ms,
                zero_init: false,
                handle,
            },
            name,
        )
    }

    /// No rank returns until every rank has entered.
    pub fn barrier(&self) -> Result<()> {
        let h = self.submit(
            |handle| Request::Collective {
                kind: CollKind::Barrier,
                name: "__barrier".into(),
                tensor: None,
                scheme: WeightScheme::Static,
                machine_scheme: None,
                zero_init: false,
                handle,
            },
            "__barrier",
        )?;
        match self.wait_output(h)? {
            OpOutput::Unit => Ok(()),
            other => Err(Error::Wire(format!("barrier returned {other:?}"))),
        }
    }

    // ------------------------------------------------------------------
    // Windows.
    // ------------------------------------------------------------------

    /// Collectively creates a named window: per-in-neighbor buffers under
    /// the current global topology, initialized to the tensor's value or
    /// zeros with `zero_init`.
    pub fn win_create(&self, tensor: &Tensor, name: &str, zero_init: bool) -> Result<bool> {
        tensor.check_finite(name)?;
        let t = tensor.clone();
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::Collective {
                kind: CollKind::WinCreate,
                name: name_owned,
                tensor: Some(t),
                scheme: WeightScheme::Static,
                machine_scheme: None,
                zero_init,
                handle,
            },
            name,
        )?;
        self.wait_bool(h)
    }

    /// Collectively releases a window and invalidates its name.
    pub fn win_free(&self, name: &str) -> Result<bool> {
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::Collective {
                kind: CollKind::WinFree,
                name: name_owned,
                tensor: None,
                scheme: WeightScheme::Static,
                machine_scheme: None,
                zero_init: false,
                handle,
            },
            name,
        )?;
        self.wait_bool(h)
    }

    /// Overwrites `dst_weights[j] * tensor` into this rank's slot of each
    /// destination's window buffer. Returns once the sends are issued; no
    /// synchronization with the remote application thread. A provided
    /// `self_weight` rescales the local window tensor in the same
    /// operation. Defaults: all out-neighbors with weight 1.
    pub fn neighbor_win_put(
        &self,
        tensor: &Tensor,
        name: &str,
        self_weight: Option<f64>,
        dst_weights: Option<&BTreeMap<usize, f64>>,
        require_mutex: bool,
    ) -> Result<bool> {
        self.win_transfer(tensor, name, self_weight, dst_weights, require_mutex, false)
    }

    /// As put, but adds into the destination buffers instead of
    /// overwriting.
    pub fn neighbor_win_accumulate(
        &self,
        tensor: &Tensor,
        name: &str,
        self_weight: Option<f64>,
        dst_weights: Option<&BTreeMap<usize, f64>>,
        require_mutex: bool,
    ) -> Result<bool> {
        self.win_transfer(tensor, name, self_weight, dst_weights, require_mutex, true)
    }

    fn win_transfer(
        &self,
        tensor: &Tensor,
        name: &str,
        self_weight: Option<f64>,
        dst_weights: Option<&BTreeMap<usize, f64>>,
        require_mutex: bool,
        accumulate: bool,
    ) -> Result<bool> {
        let dst_weights = match dst_weights {
            Some(m) => m.clone(),
            None => {
                // Default: push unscaled to every out-neighbor.
                self.window_out_neighbors(name)?
                    .into_iter()
                    .map(|r| (r, 1.0))
                    .collect()
            }
        };
        let t = tensor.clone();
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| {
                Request::WinTransfer(WinTransferReq {
                    name: name_owned,
                    tensor: t,
                    self_weight,
                    dst_weights,
                    require_mutex,
                    accumulate,
                    handle,
                })
            },
            name,
        )?;
        self.wait_bool(h)
    }

    /// Pull-style counterpart of put: fetches each listed in-neighbor's
    /// current local tensor into this rank's buffer for it, scaled by the
    /// source weight. Returns once all replies are applied. Defaults:
    /// all in-neighbors with weight 1.
    pub fn neighbor_win_get(
        &self,
        name: &str,
        src_weights: Option<&BTreeMap<usize, f64>>,
    ) -> Result<bool> {
        let src_weights = match src_weights {
            Some(m) => m.clone(),
            None => self
                .window_in_neighbors(name)?
                .into_iter()
                .map(|r| (r, 1.0))
                .collect(),
        };
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::WinGet {
                name: name_owned,
                src_weights,
                handle,
            },
            name,
        )?;
        self.wait_bool(h)
    }

    /// Makes all delivered put/accumulate traffic visible, then returns
    /// `self_weight * local + sum_j src_weights[j] * buffer[j]`
    /// (defaults: uniform `1/(|N(i)|+1)`).
    pub fn win_update(
        &self,
        name: &str,
        self_weight: Option<f64>,
        src_weights: Option<&BTreeMap<usize, f64>>,
    ) -> Result<Tensor> {
        let name_owned = name.to_string();
        let sw = src_weights.cloned();
        let h = self.submit(
            move |handle| Request::WinUpdate {
                name: name_owned,
                self_weight,
                src_weights: sw,
                handle,
            },
            name,
        )?;
        self.wait(h)
    }

    /// Atomic sum-and-reset under the window's distributed mutex:
    /// returns `local + sum_j buffer[j]`, zeroes all buffers, and stores
    /// the result as the new local tensor (unit weights, mass-preserving).
    pub fn win_update_then_collect(&self, name: &str) -> Result<Tensor> {
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::WinCollect {
                name: name_owned,
                handle,
            },
            name,
        )?;
        self.wait(h)
    }

    /// FIFO-granted exclusive access to `target_rank`'s buffers for this
    /// window.
    pub fn mutex_acquire(&self, name: &str, target_rank: usize) -> Result<bool> {
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::MutexAcquire {
                name: name_owned,
                target: target_rank,
                handle,
            },
            name,
        )?;
        self.wait_bool(h)
    }

    pub fn mutex_release(&self, name: &str, target_rank: usize) -> Result<bool> {
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::MutexRelease {
                name: name_owned,
                target: target_rank,
                handle,
            },
            name,
        )?;
        self.wait_bool(h)
    }

    /// Test and instrumentation probe: a consistent copy of the window's
    /// local tensor and buffers.
    pub fn window_snapshot(&self, name: &str) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let name_owned = name.to_string();
        let h = self.submit(
            move |handle| Request::WinSnapshot {
                name: name_owned,
                handle,
            },
            name,
        )?;
        match self.wait_output(h)? {
            OpOutput::Snapshot { local, buffers } => Ok((local, buffers)),
            other => Err(Error::Wire(format!("snapshot returned {other:?}"))),
        }
    }

    // Defaults derive from the current global topology; the progress
    // thread still validates against the window's creation-time sets.
    fn window_out_neighbors(&self, _name: &str) -> Result<Vec<usize>> {
        Ok(self.out_neighbor_ranks())
    }

    fn window_in_neighbors(&self, _name: &str) -> Result<Vec<usize>> {
        Ok(self.in_neighbor_ranks())
    }

    /// Asks the progress thread to stop and joins it. Pending operations
    /// complete with a shutdown error.
    pub fn shutdown(&mut self) {
        if let Some(handle) = self.progress.take() {
            self.state
                .requests
                .lock()
                .unwrap()
                .push_back(Request::Shutdown);
            self.fabric.notify();
            // Joining a runtime thread directly would stall the
            // simulator's cooperative scheduler; wait for the progress
            // loop to report completion first.
            let state = Arc::clone(&self.state);
            self.fabric
                .wait_until("shutdown join", &mut || {
                    state.progress_done.load(Ordering::SeqCst)
                })
                .ok();
            handle.join().ok();
        }
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn progress_main(fabric: Arc<dyn Fabric>, state: Arc<NodeState>) {
    progress_loop(Arc::clone(&fabric), Arc::clone(&state));
    state.progress_done.store(true, Ordering::SeqCst);
    fabric.notify();
}

fn progress_loop(fabric: Arc<dyn Fabric>, state: Arc<NodeState>) {
    let mut engine = Engine::new(Arc::clone(&fabric), Arc::clone(&state));
    let is_coordinator = fabric.rank() == 0;
    loop {
        // Apply everything already delivered.
        loop {
            match fabric.try_recv_match(&mut |_| true) {
                Ok(Some(env)) => {
                    if let Err(e) = engine.handle_env(env) {
                        engine.fail_all(e);
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    engine.fail_all(e);
                    return;
                }
            }
        }
        // With the mailbox drained, the coordinator closes the fusion
        // cycle and emits plans for everything that became ready.
        if is_coordinator {
            if let Err(e) = engine.flush_ready() {
                engine.fail_all(e);
                return;
            }
        }
        // One application request per cycle, messages first.
        match state.pop_request() {
            Some(Request::Shutdown) => {
                engine.fail_all(Error::Shutdown("communicator closed".into()));
                return;
            }
            Some(req) => {
                if let Err(e) = engine.handle_request(req) {
                    engine.fail_all(e);
                    return;
                }
                continue;
            }
            None => {}
        }
        let state2 = Arc::clone(&state);
        let fabric2 = Arc::clone(&fabric);
        if let Err(e) = fabric.wait_until("progress idle", &mut || {
            fabric2.has_incoming() || state2.has_request()
        }) {
            engine.fail_all(e);
            return;
        }
    }
}
