//! Progress-thread engine: converts application requests into
//! negotiation traffic, coordinates readiness/validation/fusion on rank
//! 0, executes planned exchanges, applies window traffic, and serves the
//! per-window distributed mutex.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::collective::wire::{
    CollKind, ErrorMsg, NegotiateMsg, PlanMsg, SUBMSG_ERROR, SUBMSG_PLAN, SUBMSG_REQUEST,
};
use crate::collective::{NodeState, OpOutput, Request, WinTransferReq};
use crate::error::{Error, Result};
use crate::graph::WeightScheme;
use crate::tensor::Tensor;
use crate::transport::{Envelope, Fabric, MsgKind, Payload};
use crate::window::WindowTable;

const GRANT_OK: u8 = 1;
const GRANT_ERR: u8 = 2;
const REQ: u8 = 0;

/// An op submitted locally, waiting for its plan.
struct PendingOp {
    name: String,
    tensor: Option<Tensor>,
    scheme: WeightScheme,
    /// Receiver-side row of the global W, snapshotted at submit time for
    /// static schemes (index by src rank; self weight at own rank).
    w_row: Option<Vec<f64>>,
    machine_w_row: Option<Vec<f64>>,
    machine_scheme: Option<WeightScheme>,
    zero_init: bool,
    handle: u64,
}

/// Coordinator-side bookkeeping for one (kind, name, gen) group.
struct NegoGroup {
    entries: Vec<Option<NegotiateMsg>>,
    submitted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Single,
    HierIntra,
    HierMachine,
    HierBcast,
}

struct BatchExec {
    batch_id: u64,
    kind: CollKind,
    members: Vec<PendingOp>,
    shapes: Vec<Vec<usize>>,
    fused: Tensor,
    recv: Vec<usize>,
    received: BTreeMap<usize, Tensor>,
    phase: Phase,
    // Hierarchical state.
    machine_send: Vec<usize>,
    machine_recv: Vec<usize>,
    local_avg: Option<Tensor>,
    machine_received: BTreeMap<usize, Tensor>,
    bcast: Option<Tensor>,
}

enum WinOp {
    Transfer {
        handle: u64,
        name: String,
        sends: Vec<(usize, Tensor)>,
        next: usize,
        require_mutex: bool,
        accumulate: bool,
        awaiting: Option<u32>,
    },
    Get {
        handle: u64,
        name: String,
        outstanding: BTreeMap<u32, (usize, f64)>,
    },
    Collect {
        handle: u64,
        name: String,
        awaiting: u32,
    },
    AcquireUser {
        handle: u64,
        awaiting: u32,
    },
    ReleaseUser {
        handle: u64,
        awaiting: u32,
    },
}

pub(crate) struct Engine {
    fabric: Arc<dyn Fabric>,
    state: Arc<NodeState>,
    rank: usize,
    size: usize,
    gen_counters: BTreeMap<(u8, String), u32>,
    pending: BTreeMap<(u8, String, u32), PendingOp>,
    // Coordinator state (rank 0).
    nego: BTreeMap<(u8, String, u32), NegoGroup>,
    ready: Vec<(u8, String, u32)>,
    next_batch_id: u64,
    // Execution.
    execs: BTreeMap<u64, BatchExec>,
    // Windows and their mutex service.
    windows: WindowTable,
    win_ops: Vec<WinOp>,
    next_req_id: u32,
}

fn batch_name(batch_id: u64, suffix: &str) -> String {
    if suffix.is_empty() {
        format!("__b{batch_id}")
    } else {
        format!("__b{batch_id}.{suffix}")
    }
}

/// Destinations ordered by (dst - me) mod n to spread simultaneous
/// senders across receivers.
fn congestion_order(me: usize, n: usize, dsts: &[usize]) -> Vec<usize> {
    let mut out = dsts.to_vec();
    out.sort_by_key(|&d| (d + n - me) % n);
    out
}

impl Engine {
    pub(crate) fn new(fabric: Arc<dyn Fabric>, state: Arc<NodeState>) -> Engine {
        let rank = fabric.rank();
        let size = fabric.size();
        Engine {
            fabric,
            state,
            rank,
            size,
            gen_counters: BTreeMap::new(),
            pending: BTreeMap::new(),
            nego: BTreeMap::new(),
            ready: Vec::new(),
            next_batch_id: 0,
            execs: BTreeMap::new(),
            windows: WindowTable::new(),
            win_ops: Vec::new(),
            next_req_id: 0,
        }
    }

    fn complete(&self, handle: u64, out: Result<OpOutput>) {
        self.state.complete(handle, out);
        self.fabric.notify();
    }

    /// Fails every in-flight operation; called when the fabric dies or
    /// the communicator shuts down.
    pub(crate) fn fail_all(&mut self, err: Error) {
        self.state.poison(err.clone());
        let pending = std::mem::take(&mut self.pending);
        for (_, op) in pending {
            self.complete(op.handle, Err(err.clone()));
        }
        let execs = std::mem::take(&mut self.execs);
        for (_, exec) in execs {
            for op in exec.members {
                self.complete(op.handle, Err(err.clone()));
            }
        }
        let ops = std::mem::take(&mut self.win_ops);
        for op in ops {
            let handle = match op {
                WinOp::Transfer { handle, .. }
                | WinOp::Get { handle, .. }
                | WinOp::Collect { handle, .. }
                | WinOp::AcquireUser { handle, .. }
                | WinOp::ReleaseUser { handle, .. } => handle,
            };
            self.complete(handle, Err(err.clone()));
        }
        self.fabric.notify();
    }

    // ------------------------------------------------------------------
    // Request intake (application side of the shared queue).
    // ------------------------------------------------------------------

    pub(crate) fn handle_request(&mut self, req: Request) -> Result<()> {
        match req {
            Request::Collective {
                kind,
                name,
                tensor,
                scheme,
                machine_scheme,
                zero_init,
                handle,
            } => self.submit_collective(kind, name, tensor, scheme, machine_scheme, zero_init, handle),
            Request::WinTransfer(t) => self.submit_transfer(t),
            Request::WinGet {
                name,
                src_weights,
                handle,
            } => self.submit_get(name, src_weights, handle),
            Request::WinUpdate {
                name,
                self_weight,
                src_weights,
                handle,
            } => {
                let out = self
                    .windows
                    .update(&name, self_weight, src_weights.as_ref())
                    .map(OpOutput::Tensor);
                self.complete(handle, out);
                Ok(())
            }
            Request::WinCollect { name, handle } => self.submit_collect(name, handle),
            Request::WinSnapshot { name, handle } => {
                let out = self
                    .windows
                    .snapshot(&name)
                    .map(|(local, buffers)| OpOutput::Snapshot { local, buffers });
                self.complete(handle, out);
                Ok(())
            }
            Request::MutexAcquire {
                name,
                target,
                handle,
            } => self.submit_mutex_acquire(name, target, handle),
            Request::MutexRelease {
                name,
                target,
                handle,
            } => self.submit_mutex_release(name, target, handle),
            Request::Shutdown => unreachable!("shutdown handled by the progress loop"),
        }
    }

    fn next_gen(&mut self, kind: CollKind, name: &str) -> u32 {
        let c = self
            .gen_counters
            .entry((kind as u8, name.to_string()))
            .or_insert(0);
        let g = *c;
        *c += 1;
        g
    }

    fn submit_collective(
        &mut self,
        kind: CollKind,
        name: String,
        tensor: Option<Tensor>,
        scheme: WeightScheme,
        machine_scheme: Option<WeightScheme>,
        zero_init: bool,
        handle: u64,
    ) -> Result<()> {
        if let Err(e) = self.validate_submit(kind, &name, &tensor, &scheme, &machine_scheme) {
            self.complete(handle, Err(e));
            return Ok(());
        }
        let gen = self.next_gen(kind, &name);
        let topo_check = self.state.config.topo_check;
        let (declared_send, declared_recv, w_row) = match (kind, &scheme) {
            (CollKind::NeighborAllreduce, WeightScheme::Static)
            | (CollKind::Allreduce, _)
            | (CollKind::Allgather, _) => {
                if kind == CollKind::NeighborAllreduce {
                    let topo = self.state.topology();
                    let ns = topo.neighbor_sets(self.rank)?;
                    (
                        ns.out_neighbors,
                        ns.in_neighbors,
                        Some(topo.row(self.rank).to_vec()),
                    )
                } else {
                    (Vec::new(), Vec::new(), None)
                }
            }
            (CollKind::NeighborAllreduce, s) => {
                let send = s.dst_weights().map(|m| m.keys().copied().collect()).unwrap_or_default();
                let recv = s.src_weights().map(|m| m.keys().copied().collect()).unwrap_or_default();
                (send, recv, None)
            }
            _ => (Vec::new(), Vec::new(), None),
        };
        let (local_size, m_scheme, machine_send, machine_recv, machine_w_row) =
            if kind == CollKind::Hierarchical {
                let local_size = self.state.config.local_size.unwrap_or(self.size);
                let m = self.size / local_size;
                let my_machine = self.rank / local_size;
                let scheme = machine_scheme.clone().unwrap_or(WeightScheme::Static);
                match &scheme {
                    WeightScheme::Static => {
                        let topo = self.state.machine_topology_or_trivial(m)?;
                        let ns = topo.neighbor_sets(my_machine)?;
                        (
                            local_size as u32,
                            Some(scheme),
                            ns.out_neighbors,
                            ns.in_neighbors,
                            Some(topo.row(my_machine).to_vec()),
                        )
                    }
                    s => {
                        let send =
                            s.dst_weights().map(|m| m.keys().copied().collect()).unwrap_or_default();
                        let recv =
                            s.src_weights().map(|m| m.keys().copied().collect()).unwrap_or_default();
                        (local_size as u32, Some(scheme.clone()), send, recv, None)
                    }
                }
            } else {
                (0, None, Vec::new(), Vec::new(), None)
            };
        let msg = NegotiateMsg {
            kind,
            gen,
            shape: tensor.as_ref().map(|t| t.shape().to_vec()).unwrap_or_default(),
            scheme: scheme.clone(),
            declared_send,
            declared_recv,
            topo_check,
            payload_bytes: tensor.as_ref().map(|t| t.byte_len() as u64).unwrap_or(0),
            local_size,
            machine_scheme: m_scheme.clone(),
            machine_send,
            machine_recv,
        };
        self.pending.insert(
            (kind as u8, name.clone(), gen),
            PendingOp {
                name: name.clone(),
                tensor,
                scheme,
                w_row,
                machine_w_row,
                machine_scheme: m_scheme,
                zero_init,
                handle,
            },
        );
        self.fabric.send(Envelope::new(
            MsgKind::Negotiate,
            name,
            self.rank,
            0,
            gen,
            Payload::Bytes(msg.encode()),
        ))?;
        Ok(())
    }

    fn validate_submit(
        &self,
        kind: CollKind,
        name: &str,
        tensor: &Option<Tensor>,
        scheme: &WeightScheme,
        machine_scheme: &Option<WeightScheme>,
    ) -> Result<()> {
        if let Some(t) = tensor {
            t.check_finite(name)?;
        }
        match kind {
            CollKind::NeighborAllreduce => {
                scheme.validate(self.rank, self.size, false)?;
            }
            CollKind::Hierarchical => {
                let local_size = self.state.config.local_size.unwrap_or(self.size);
                if local_size == 0 || self.size % local_size != 0 {
                    return Err(Error::Config(format!(
                        "hierarchical op is ill-defined: {} ranks cannot split into machines of {}",
                        self.size, local_size
                    )));
                }
                let m = self.size / local_size;
                if let Some(s) = machine_scheme {
                    s.validate(self.rank / local_size, m, false)?;
                } else {
                    // Static machine weights need a machine topology.
                    self.state.machine_topology_or_trivial(m)?;
                }
            }
            CollKind::WinCreate => {
                if self.windows.contains(name) {
                    return Err(Error::Window {
                        name: name.to_string(),
                        detail: "name already in use".into(),
                    });
                }
            }
            CollKind::WinFree => {
                if !self.windows.contains(name) {
                    return Err(Error::Window {
                        name: name.to_string(),
                        detail: "unknown window".into(),
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Window request intake.
    // ------------------------------------------------------------------

    fn next_req_id(&mut self) -> u32 {
        let id = self.next_req_id;
        self.next_req_id += 1;
        id
    }

    fn submit_transfer(&mut self, t: WinTransferReq) -> Result<()> {
        let WinTransferReq {
            name,
            tensor,
            self_weight,
            dst_weights,
            require_mutex,
            accumulate,
            handle,
        } = t;
        let check = (|| -> Result<Vec<(usize, Tensor)>> {
            tensor.check_finite(&name)?;
            let out = self.windows.out_neighbors(&name)?;
            let shape = self.windows.local_shape(&name)?;
            if shape != tensor.shape() {
                return Err(Error::Window {
                    name: name.clone(),
                    detail: "tensor shape does not match the window".into(),
                });
            }
            for &d in dst_weights.keys() {
                if !out.contains(&d) {
                    return Err(Error::Window {
                        name: name.clone(),
                        detail: format!(
                            "dst {d} outside the out-neighbors {out:?} fixed at window creation"
                        ),
                    });
                }
            }
            let order = congestion_order(
                self.rank,
                self.size,
                &dst_weights.keys().copied().collect::<Vec<_>>(),
            );
            Ok(order
                .into_iter()
                .map(|d| (d, tensor.scaled(dst_weights[&d])))
                .collect())
        })();
        let sends = match check {
            Ok(s) => s,
            Err(e) => {
                self.complete(handle, Err(e));
                return Ok(());
            }
        };
        if let Some(sw) = self_weight {
            self.windows.set_local(&name, tensor.scaled(sw))?;
        }
        if sends.is_empty() {
            self.complete(handle, Ok(OpOutput::Bool(true)));
            return Ok(());
        }
        self.win_ops.push(WinOp::Transfer {
            handle,
            name,
            sends,
            next: 0,
            require_mutex,
            accumulate,
            awaiting: None,
        });
        self.pump_win_ops()
    }

    fn submit_get(
        &mut self,
        name: String,
        src_weights: BTreeMap<usize, f64>,
        handle: u64,
    ) -> Result<()> {
        let check = (|| -> Result<()> {
            let in_nbrs = self.windows.in_neighbors(&name)?;
            for &s in src_weights.keys() {
                if !in_nbrs.contains(&s) {
                    return Err(Error::Window {
                        name: name.clone(),
                        detail: format!(
                            "src {s} outside the in-neighbors {in_nbrs:?} fixed at window creation"
                        ),
                    });
                }
            }
            Ok(())
        })();
        if let Err(e) = check {
            self.complete(handle, Err(e));
            return Ok(());
        }
        if src_weights.is_empty() {
            self.complete(handle, Ok(OpOutput::Bool(true)));
            return Ok(());
        }
        let mut outstanding = BTreeMap::new();
        for (&src, &r) in &src_weights {
            let req = self.next_req_id();
            outstanding.insert(req, (src, r));
            self.fabric.send(Envelope::new(
                MsgKind::WindowGetRequest,
                name.clone(),
                self.rank,
                src,
                req,
                Payload::empty(),
            ))?;
        }
        self.win_ops.push(WinOp::Get {
            handle,
            name,
            outstanding,
        });
        Ok(())
    }

    fn submit_collect(&mut self, name: String, handle: u64) -> Result<()> {
        if !self.windows.contains(&name) {
            self.complete(
                handle,
                Err(Error::Window {
                    name,
                    detail: "unknown window".into(),
                }),
            );
            return Ok(());
        }
        let req = self.next_req_id();
        if self.windows.mutex_request(&name, (self.rank, req))? {
            let result = self.windows.update_then_collect(&name)?;
            self.release_own_mutex(&name)?;
            self.complete(handle, Ok(OpOutput::Tensor(result)));
        } else {
            self.win_ops.push(WinOp::Collect {
                handle,
                name,
                awaiting: req,
            });
        }
        Ok(())
    }

    fn submit_mutex_acquire(&mut self, name: String, target: usize, handle: u64) -> Result<()> {
        let req = self.next_req_id();
        if target == self.rank {
            if !self.windows.contains(&name) {
                self.complete(
                    handle,
                    Err(Error::Window {
                        name,
                        detail: "unknown window".into(),
                    }),
                );
                return Ok(());
            }
            if self.windows.mutex_request(&name, (self.rank, req))? {
                self.complete(handle, Ok(OpOutput::Bool(true)));
            } else {
                self.win_ops.push(WinOp::AcquireUser {
                    handle,
                    awaiting: req,
                });
            }
            return Ok(());
        }
        self.fabric.send(Envelope::new(
            MsgKind::MutexAcquire,
            name,
            self.rank,
            target,
            req,
            Payload::Bytes(vec![REQ]),
        ))?;
        self.win_ops.push(WinOp::AcquireUser {
            handle,
            awaiting: req,
        });
        Ok(())
    }

    fn submit_mutex_release(&mut self, name: String, target: usize, handle: u64) -> Result<()> {
        if target == self.rank {
            let out = self.release_local_mutex_for(&name, self.rank);
            self.complete(handle, out.map(|_| OpOutput::Bool(true)));
            return Ok(());
        }
        let req = self.next_req_id();
        self.fabric.send(Envelope::new(
            MsgKind::MutexRelease,
            name,
            self.rank,
            target,
            req,
            Payload::Bytes(vec![REQ]),
        ))?;
        self.win_ops.push(WinOp::ReleaseUser {
            handle,
            awaiting: req,
        });
        Ok(())
    }

    /// Releases this rank's own-window mutex held by `holder_rank`,
    /// granting the next queued ticket if any.
    fn release_local_mutex_for(&mut self, name: &str, holder_rank: usize) -> Result<()> {
        let next = self.windows.mutex_release(name, holder_rank)?;
        if let Some((rank, req)) = next {
            self.send_grant(name, rank, req, GRANT_OK, "")?;
        }
        Ok(())
    }

    fn release_own_mutex(&mut self, name: &str) -> Result<()> {
        self.release_local_mutex_for(name, self.rank)
    }

    fn send_grant(&self, name: &str, to: usize, req: u32, tag: u8, detail: &str) -> Result<()> {
        let mut payload = vec![tag];
        payload.extend_from_slice(detail.as_bytes());
        self.fabric.send(Envelope::new(
            MsgKind::MutexAcquire,
            name.to_string(),
            self.rank,
            to,
            req,
            Payload::Bytes(payload),
        ))
    }

    /// Advances transfer state machines that are not waiting on a grant.
    fn pump_win_ops(&mut self) -> Result<()> {
        let mut idx = 0;
        while idx < self.win_ops.len() {
            let mut finished: Option<(u64, Result<OpOutput>)> = None;
            if let WinOp::Transfer {
                handle,
                name,
                sends,
                next,
                require_mutex,
                accumulate,
                awaiting,
            } = &mut self.win_ops[idx]
            {
                while awaiting.is_none() && *next < sends.len() {
                    let (dst, payload) = sends[*next].clone();
                    if *require_mutex {
                        let req = self.next_req_id;
                        self.next_req_id += 1;
                        self.fabric.send(Envelope::new(
                            MsgKind::MutexAcquire,
                            name.clone(),
                            self.rank,
                            dst,
                            req,
                            Payload::Bytes(vec![REQ]),
                        ))?;
                        *awaiting = Some(req);
                    } else {
                        let kind = if *accumulate {
                            MsgKind::WindowAccumulate
                        } else {
                            MsgKind::WindowPut
                        };
                        let req = self.next_req_id;
                        self.next_req_id += 1;
                        self.fabric.send(Envelope::new(
                            kind,
                            name.clone(),
                            self.rank,
                            dst,
                            req,
                            Payload::Tensor(payload),
                        ))?;
                        *next += 1;
                    }
                }
                if awaiting.is_none() && *next == sends.len() {
                    finished = Some((*handle, Ok(OpOutput::Bool(true))));
                }
            }
            if let Some((handle, out)) = finished {
                self.win_ops.remove(idx);
                self.complete(handle, out);
            } else {
                idx += 1;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Fabric message dispatch.
    // ------------------------------------------------------------------

    pub(crate) fn handle_env(&mut self, env: Envelope) -> Result<()> {
        match env.kind {
            MsgKind::Negotiate => {
                let bytes = env.payload.as_bytes()?;
                match bytes.first().copied() {
                    Some(SUBMSG_REQUEST) => {
                        let msg = NegotiateMsg::decode(bytes)?;
                        self.coordinator_record(env.src, env.op_name, msg)
                    }
                    Some(SUBMSG_PLAN) => {
                        let plan = PlanMsg::decode(bytes)?;
                        self.start_batch(plan)
                    }
                    Some(SUBMSG_ERROR) => {
                        let msg = ErrorMsg::decode(bytes)?;
                        for (name, gen) in msg.members {
                            if let Some(op) =
                                self.pending.remove(&(msg.kind as u8, name.clone(), gen))
                            {
                                self.complete(
                                    op.handle,
                                    Err(Error::Negotiation {
                                        name,
                                        detail: msg.detail.clone(),
                                    }),
                                );
                            }
                        }
                        Ok(())
                    }
                    other => Err(Error::Wire(format!("bad negotiate submsg {other:?}"))),
                }
            }
            MsgKind::Data => self.handle_batch_data(env),
            MsgKind::WindowPut => {
                let src = env.src;
                let t = env.payload.into_tensor()?;
                self.windows.apply_put(&env.op_name, src, t)
            }
            MsgKind::WindowAccumulate => {
                let src = env.src;
                let t = env.payload.into_tensor()?;
                self.windows.apply_accumulate(&env.op_name, src, t)
            }
            MsgKind::WindowGetRequest => {
                let reply = match self.windows.local_tensor(&env.op_name) {
                    Ok(t) => Payload::Tensor(t),
                    Err(e) => return Err(e),
                };
                self.fabric.send(Envelope::new(
                    MsgKind::WindowGetReply,
                    env.op_name,
                    self.rank,
                    env.src,
                    env.round_tag,
                    reply,
                ))
            }
            MsgKind::WindowGetReply => {
                let req = env.round_tag;
                let mut result: Option<(usize, Result<OpOutput>)> = None;
                for (i, op) in self.win_ops.iter_mut().enumerate() {
                    if let WinOp::Get {
                        handle,
                        name,
                        outstanding,
                    } = op
                    {
                        if let Some((src, r)) = outstanding.remove(&req) {
                            let scaled = env.payload.as_tensor()?.scaled(r);
                            self.windows.apply_get_reply(name, src, scaled)?;
                            if outstanding.is_empty() {
                                result = Some((i, Ok(OpOutput::Bool(true))));
                                let _ = handle;
                            }
                            break;
                        }
                    }
                }
                if let Some((i, out)) = result {
                    if let WinOp::Get { handle, .. } = self.win_ops.remove(i) {
                        self.complete(handle, out);
                    }
                }
                Ok(())
            }
            MsgKind::MutexAcquire => {
                let bytes = env.payload.as_bytes()?;
                match bytes.first().copied() {
                    Some(REQ) => {
                        // I own this window's mutex.
                        if !self.windows.contains(&env.op_name) {
                            return self.send_grant(
                                &env.op_name,
                                env.src,
                                env.round_tag,
                                GRANT_ERR,
                                "unknown window",
                            );
                        }
                        if self
                            .windows
                            .mutex_request(&env.op_name, (env.src, env.round_tag))?
                        {
                            self.send_grant(&env.op_name, env.src, env.round_tag, GRANT_OK, "")?;
                        }
                        Ok(())
                    }
                    Some(tag) => self.handle_grant(env.op_name.clone(), env.round_tag, tag, &bytes[1..]),
                    None => Err(Error::Wire("empty mutex payload".into())),
                }
            }
            MsgKind::MutexRelease => {
                let bytes = env.payload.as_bytes()?;
                match bytes.first().copied() {
                    Some(REQ) => {
                        let (tag, detail) =
                            match self.release_local_mutex_for(&env.op_name.clone(), env.src) {
                                Ok(()) => (GRANT_OK, String::new()),
                                Err(e) => (GRANT_ERR, e.to_string()),
                            };
                        let mut payload = vec![tag];
                        payload.extend_from_slice(detail.as_bytes());
                        self.fabric.send(Envelope::new(
                            MsgKind::MutexRelease,
                            env.op_name,
                            self.rank,
                            env.src,
                            env.round_tag,
                            Payload::Bytes(payload),
                        ))
                    }
                    Some(tag) => self.handle_release_ack(env.op_name, env.round_tag, tag, &bytes[1..]),
                    None => Err(Error::Wire("empty mutex payload".into())),
                }
            }
            MsgKind::Barrier | MsgKind::Shutdown => {
                log::warn!("dropping stray {:?} envelope `{}`", env.kind, env.op_name);
                Ok(())
            }
        }
    }

    fn handle_grant(&mut self, name: String, req: u32, tag: u8, detail: &[u8]) -> Result<()> {
        let err = || Error::Mutex {
            name: name.clone(),
            detail: String::from_utf8_lossy(detail).to_string(),
        };
        for i in 0..self.win_ops.len() {
            match &mut self.win_ops[i] {
                WinOp::Transfer {
                    name: op_name,
                    sends,
                    next,
                    accumulate,
                    awaiting,
                    handle,
                    ..
                } if *awaiting == Some(req) => {
                    if tag != GRANT_OK {
                        let handle = *handle;
                        self.win_ops.remove(i);
                        self.complete(handle, Err(err()));
                        return Ok(());
                    }
                    // Granted: write the payload, then release. FIFO per
                    // pair guarantees the owner applies the write before
                    // granting anyone else.
                    let (dst, payload) = sends[*next].clone();
                    let kind = if *accumulate {
                        MsgKind::WindowAccumulate
                    } else {
                        MsgKind::WindowPut
                    };
                    let op_name = op_name.clone();
                    *next += 1;
                    *awaiting = None;
                    let seq = self.next_req_id;
                    self.next_req_id += 1;
                    self.fabric.send(Envelope::new(
                        kind,
                        op_name.clone(),
                        self.rank,
                        dst,
                        seq,
                        Payload::Tensor(payload),
                    ))?;
                    self.fabric.send(Envelope::new(
                        MsgKind::MutexRelease,
                        op_name,
                        self.rank,
                        dst,
                        req,
                        Payload::Bytes(vec![REQ]),
                    ))?;
                    // The ack for this internal release is consumed below.
                    return self.pump_win_ops();
                }
                WinOp::Collect {
                    handle,
                    name: op_name,
                    awaiting,
                } if *awaiting == req => {
                    let handle = *handle;
                    let op_name = op_name.clone();
                    self.win_ops.remove(i);
                    if tag != GRANT_OK {
                        self.complete(handle, Err(err()));
                        return Ok(());
                    }
                    let result = self.windows.update_then_collect(&op_name)?;
                    self.release_own_mutex(&op_name)?;
                    self.complete(handle, Ok(OpOutput::Tensor(result)));
                    return Ok(());
                }
                WinOp::AcquireUser { handle, awaiting } if *awaiting == req => {
                    let handle = *handle;
                    self.win_ops.remove(i);
                    let out = if tag == GRANT_OK {
                        Ok(OpOutput::Bool(true))
                    } else {
                        Err(err())
                    };
                    self.complete(handle, out);
                    return Ok(());
                }
                _ => {}
            }
        }
        // Grant for an internal transfer release ack or a stale op.
        Ok(())
    }

    fn handle_release_ack(&mut self, name: String, req: u32, tag: u8, detail: &[u8]) -> Result<()> {
        for i in 0..self.win_ops.len() {
            if let WinOp::ReleaseUser { handle, awaiting } = &self.win_ops[i] {
                if *awaiting == req {
                    let handle = *handle;
                    self.win_ops.remove(i);
                    let out = if tag == GRANT_OK {
                        Ok(OpOutput::Bool(true))
                    } else {
                        Err(Error::Mutex {
                            name,
                            detail: String::from_utf8_lossy(detail).to_string(),
                        })
                    };
                    self.complete(handle, out);
                    return Ok(());
                }
            }
        }
        // Acks for transfer-internal releases need no action.
        Ok(())
    }

    // ------------------------------------------------------------------
    // Coordinator (rank 0): readiness, validation, fusion, plans.
    // ------------------------------------------------------------------

    fn coordinator_record(&mut self, src: usize, name: String, msg: NegotiateMsg) -> Result<()> {
        debug_assert_eq!(self.rank, 0, "negotiate request reached a non-coordinator");
        let key = (msg.kind as u8, name, msg.gen);
        let size = self.size;
        let group = self.nego.entry(key.clone()).or_insert_with(|| NegoGroup {
            entries: (0..size).map(|_| None).collect(),
            submitted: 0,
        });
        if group.entries[src].is_none() {
            group.submitted += 1;
        }
        group.entries[src] = Some(msg);
        if group.submitted == size {
            self.ready.push(key);
        }
        Ok(())
    }

    /// Emits plans for every ready group, fusing compatible ones that
    /// arrived in the same negotiation cycle. Called when the incoming
    /// mailbox has been drained.
    pub(crate) fn flush_ready(&mut self) -> Result<()> {
        if self.ready.is_empty() {
            return Ok(());
        }
        let mut ready = std::mem::take(&mut self.ready);
        ready.sort();
        let mut used = vec![false; ready.len()];
        for i in 0..ready.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            let mut batch = vec![ready[i].clone()];
            let head = self.nego.get(&ready[i]).expect("ready group exists");
            let head_entries: Vec<NegotiateMsg> = head
                .entries
                .iter()
                .map(|e| e.clone().expect("complete group"))
                .collect();
            let mut total_bytes: u64 = head_entries[0].payload_bytes;
            if fusable_kind(head_entries[0].kind) {
                for j in i + 1..ready.len() {
                    if used[j] {
                        continue;
                    }
                    let cand = self.nego.get(&ready[j]).expect("ready group exists");
                    let cand_bytes = cand.entries[0].as_ref().unwrap().payload_bytes;
                    if total_bytes + cand_bytes > self.state.config.fusion_bytes as u64 {
                        continue;
                    }
                    if compatible(&head_entries, &cand.entries) {
                        used[j] = true;
                        batch.push(ready[j].clone());
                        total_bytes += cand_bytes;
                    }
                }
            }
            self.emit_plan(batch)?;
        }
        Ok(())
    }

    fn emit_plan(&mut self, batch: Vec<(u8, String, u32)>) -> Result<()> {
        let batch_id = self.next_batch_id;
        self.next_batch_id += 1;
        let kind = CollKind::from_u8(batch[0].0)?;
        let members: Vec<(String, u32)> =
            batch.iter().map(|(_, n, g)| (n.clone(), *g)).collect();
        let mut groups = Vec::new();
        for key in &batch {
            groups.push(self.nego.remove(key).expect("ready group exists"));
        }
        let head: Vec<NegotiateMsg> = groups[0]
            .entries
            .iter()
            .map(|e| e.clone().expect("complete group"))
            .collect();

        match plan_sets(kind, &head, self.size) {
            Ok(per_rank) => {
                for (rank, sets) in per_rank.into_iter().enumerate() {
                    let plan = PlanMsg {
                        batch_id,
                        kind,
                        members: members.clone(),
                        send: sets.send,
                        recv: sets.recv,
                        machine_send: sets.machine_send,
                        machine_recv: sets.machine_recv,
                    };
                    self.fabric.send(Envelope::new(
                        MsgKind::Negotiate,
                        batch_name(batch_id, ""),
                        self.rank,
                        rank,
                        batch_id as u32,
                        Payload::Bytes(plan.encode()),
                    ))?;
                }
            }
            Err(detail) => {
                let msg = ErrorMsg {
                    kind,
                    members: members.clone(),
                    detail: detail.to_string(),
                };
                for rank in 0..self.size {
                    self.fabric.send(Envelope::new(
                        MsgKind::Negotiate,
                        batch_name(batch_id, "err"),
                        self.rank,
                        rank,
                        batch_id as u32,
                        Payload::Bytes(msg.encode()),
                    ))?;
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Batch execution.
    // ------------------------------------------------------------------

    fn start_batch(&mut self, plan: PlanMsg) -> Result<()> {
        let mut members = Vec::with_capacity(plan.members.len());
        for (name, gen) in &plan.members {
            let op = self
                .pending
                .remove(&(plan.kind as u8, name.clone(), *gen))
                .ok_or_else(|| Error::Wire(format!("plan for unknown op `{name}`#{gen}")))?;
            members.push(op);
        }
        match plan.kind {
            CollKind::Barrier => {
                for op in members {
                    self.complete(op.handle, Ok(OpOutput::Unit));
                }
                return Ok(());
            }
            CollKind::WinCreate => {
                for op in members {
                    let topo = self.state.topology();
                    let ns = topo.neighbor_sets(self.rank)?;
                    let out = self
                        .windows
                        .create(
                            &op.name,
                            op.tensor.expect("win_create carries a tensor"),
                            op.zero_init,
                            ns.in_neighbors,
                            ns.out_neighbors,
                        )
                        .map(|_| OpOutput::Bool(true));
                    self.complete(op.handle, out);
                }
                return Ok(());
            }
            CollKind::WinFree => {
                for op in members {
                    let out = self.windows.free(&op.name).map(|_| OpOutput::Bool(true));
                    self.complete(op.handle, out);
                }
                return Ok(());
            }
            _ => {}
        }

        let tensors: Vec<&Tensor> = members
            .iter()
            .map(|m| m.tensor.as_ref().expect("data op carries a tensor"))
            .collect();
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        let fused = Tensor::concat(&tensors.iter().map(|t| (*t).clone()).collect::<Vec<_>>());

        let (phase, send_now, recv_wait) = match plan.kind {
            CollKind::Hierarchical => {
                let local_size = self.state.config.local_size.unwrap_or(self.size);
                let base = (self.rank / local_size) * local_size;
                let group: Vec<usize> =
                    (base..base + local_size).filter(|&r| r != self.rank).collect();
                (Phase::HierIntra, group.clone(), group)
            }
            _ => (Phase::Single, plan.send.clone(), plan.recv.clone()),
        };

        let exec = BatchExec {
            batch_id: plan.batch_id,
            kind: plan.kind,
            members,
            shapes,
            fused,
            recv: recv_wait,
            received: BTreeMap::new(),
            phase,
            machine_send: plan.machine_send,
            machine_recv: plan.machine_recv,
            local_avg: None,
            machine_received: BTreeMap::new(),
            bcast: None,
        };
        let scale_of = |exec: &BatchExec, dst: usize| -> f64 {
            if exec.phase != Phase::Single {
                return 1.0;
            }
            match &exec.members[0].scheme {
                WeightScheme::Push { dst_weights, .. }
                | WeightScheme::PushPull { dst_weights, .. }
                    if exec.kind == CollKind::NeighborAllreduce =>
                {
                    dst_weights.get(&dst).copied().unwrap_or(1.0)
                }
                _ => 1.0,
            }
        };
        let suffix = if exec.phase == Phase::HierIntra { "h1" } else { "" };
        for dst in congestion_order(self.rank, self.size, &send_now) {
            let payload = {
                let s = scale_of(&exec, dst);
                if s == 1.0 {
                    exec.fused.clone()
                } else {
                    exec.fused.scaled(s)
                }
            };
            self.fabric.send(Envelope::new(
                MsgKind::Data,
                batch_name(exec.batch_id, suffix),
                self.rank,
                dst,
                exec.batch_id as u32,
                Payload::Tensor(payload),
            ))?;
        }
        self.execs.insert(exec.batch_id, exec);
        self.try_finish_batch(plan.batch_id)
    }

    fn handle_batch_data(&mut self, env: Envelope) -> Result<()> {
        let batch_id = env.round_tag as u64;
        let Some(exec) = self.execs.get_mut(&batch_id) else {
            return Err(Error::Wire(format!(
                "data for unknown batch `{}` from rank {}",
                env.op_name, env.src
            )));
        };
        let tensor = env.payload.into_tensor()?;
        let local_size = self.state.config.local_size.unwrap_or(self.size);
        // Route by the stage encoded in the name, not the local phase:
        // a fast peer's later-stage message may overtake a slower peer's
        // earlier-stage one.
        let stage = env.op_name.split('.').nth(1).unwrap_or("");
        match stage {
            "" | "h1" => {
                exec.received.insert(env.src, tensor);
            }
            "h2" => {
                exec.machine_received.insert(env.src / local_size, tensor);
            }
            "h3" => {
                // Leader's broadcast result.
                exec.bcast = Some(tensor);
            }
            other => {
                return Err(Error::Wire(format!(
                    "unknown batch stage `{other}` in `{}`",
                    env.op_name
                )))
            }
        }
        self.try_finish_batch(batch_id)
    }

    fn try_finish_batch(&mut self, batch_id: u64) -> Result<()> {
        loop {
            let Some(exec) = self.execs.get(&batch_id) else {
                return Ok(());
            };
            match exec.phase {
                Phase::Single => {
                    if exec.received.len() < exec.recv.len() {
                        return Ok(());
                    }
                    let exec = self.execs.remove(&batch_id).unwrap();
                    return self.finalize_flat(exec);
                }
                Phase::HierIntra => {
                    if exec.received.len() < exec.recv.len() {
                        return Ok(());
                    }
                    self.advance_hier_intra(batch_id)?;
                }
                Phase::HierMachine => {
                    if exec.machine_received.len() < exec.machine_recv.len() {
                        return Ok(());
                    }
                    self.advance_hier_machine(batch_id)?;
                }
                Phase::HierBcast => {
                    if exec.bcast.is_none() {
                        return Ok(());
                    }
                    let exec = self.execs.remove(&batch_id).unwrap();
                    let result = exec.bcast.clone().unwrap();
                    return self.complete_members(exec, result);
                }
            }
        }
    }

    /// Stage 1 done: fold the intra-machine average, then either run the
    /// machine-level exchange (leaders) or wait for the broadcast.
    fn advance_hier_intra(&mut self, batch_id: u64) -> Result<()> {
        let local_size = self.state.config.local_size.unwrap_or(self.size);
        let exec = self.execs.get_mut(&batch_id).unwrap();
        let base = (self.rank / local_size) * local_size;
        let mut acc: Option<Tensor> = None;
        for r in base..base + local_size {
            let contribution = if r == self.rank {
                &exec.fused
            } else {
                exec.received.get(&r).expect("intra contribution present")
            };
            match &mut acc {
                None => acc = Some(contribution.clone()),
                Some(a) => a.add(contribution),
            }
        }
        let mut avg = acc.expect("non-empty machine group");
        avg.scale(1.0 / local_size as f64);
        exec.local_avg = Some(avg.clone());
        let is_leader = self.rank % local_size == 0;
        if is_leader {
            exec.phase = Phase::HierMachine;
            let dsts: Vec<usize> = exec.machine_send.iter().map(|&m| m * local_size).collect();
            let scheme = exec.members[0]
                .machine_scheme
                .clone()
                .unwrap_or(WeightScheme::Static);
            let sends: Vec<(usize, Tensor)> = congestion_order(self.rank, self.size, &dsts)
                .into_iter()
                .map(|dst| {
                    let m = dst / local_size;
                    let s = match &scheme {
                        WeightScheme::Push { dst_weights, .. }
                        | WeightScheme::PushPull { dst_weights, .. } => {
                            dst_weights.get(&m).copied().unwrap_or(1.0)
                        }
                        _ => 1.0,
                    };
                    (dst, if s == 1.0 { avg.clone() } else { avg.scaled(s) })
                })
                .collect();
            for (dst, payload) in sends {
                self.fabric.send(Envelope::new(
                    MsgKind::Data,
                    batch_name(batch_id, "h2"),
                    self.rank,
                    dst,
                    batch_id as u32,
                    Payload::Tensor(payload),
                ))?;
            }
        } else {
            // Wait for the leader's stage-3 broadcast.
            exec.phase = Phase::HierBcast;
        }
        Ok(())
    }

    /// Stage 2 done (leaders only): combine machine contributions and
    /// broadcast the result inside the machine.
    fn advance_hier_machine(&mut self, batch_id: u64) -> Result<()> {
        let local_size = self.state.config.local_size.unwrap_or(self.size);
        let exec = self.execs.get_mut(&batch_id).unwrap();
        let my_machine = self.rank / local_size;
        let avg = exec.local_avg.clone().expect("stage-1 average present");
        let scheme = exec.members[0]
            .machine_scheme
            .clone()
            .unwrap_or(WeightScheme::Static);
        let combined = match &scheme {
            WeightScheme::Static => {
                let row = exec.members[0]
                    .machine_w_row
                    .as_ref()
                    .expect("static machine scheme snapshots its row");
                let mut out = avg.scaled(row[my_machine]);
                for (&m, t) in &exec.machine_received {
                    out.add_scaled(row[m], t);
                }
                out
            }
            s => {
                let mut out = avg.scaled(s.self_weight());
                for (&m, t) in &exec.machine_received {
                    let r = s
                        .src_weights()
                        .and_then(|map| map.get(&m).copied())
                        .unwrap_or(1.0);
                    out.add_scaled(r, t);
                }
                out
            }
        };
        exec.bcast = Some(combined.clone());
        exec.phase = Phase::HierBcast;
        let base = my_machine * local_size;
        for dst in base..base + local_size {
            if dst == self.rank {
                continue;
            }
            self.fabric.send(Envelope::new(
                MsgKind::Data,
                batch_name(batch_id, "h3"),
                self.rank,
                dst,
                batch_id as u32,
                Payload::Tensor(combined.clone()),
            ))?;
        }
        Ok(())
    }

    fn finalize_flat(&mut self, exec: BatchExec) -> Result<()> {
        let result = match exec.kind {
            CollKind::Allreduce => {
                let mut acc: Option<Tensor> = None;
                for r in 0..self.size {
                    let contribution = if r == self.rank {
                        &exec.fused
                    } else {
                        exec.received.get(&r).expect("allreduce contribution")
                    };
                    match &mut acc {
                        None => acc = Some(contribution.clone()),
                        Some(a) => a.add(contribution),
                    }
                }
                let mut out = acc.expect("size >= 1");
                out.scale(1.0 / self.size as f64);
                out
            }
            CollKind::Allgather => {
                let mut parts = Vec::with_capacity(self.size);
                for r in 0..self.size {
                    let contribution = if r == self.rank {
                        exec.fused.clone()
                    } else {
                        exec.received.get(&r).expect("allgather contribution").clone()
                    };
                    parts.push(contribution);
                }
                return self.complete_gather(exec, parts);
            }
            CollKind::NeighborAllreduce => {
                let op = &exec.members[0];
                match &op.scheme {
                    WeightScheme::Static => {
                        let row = op.w_row.as_ref().expect("static scheme snapshots its row");
                        let mut out = exec.fused.scaled(row[self.rank]);
                        for (&src, t) in &exec.received {
                            out.add_scaled(row[src], t);
                        }
                        out
                    }
                    s => {
                        let mut out = exec.fused.scaled(s.self_weight());
                        for (&src, t) in &exec.received {
                            let r = s
                                .src_weights()
                                .and_then(|map| map.get(&src).copied())
                                .unwrap_or(1.0);
                            out.add_scaled(r, t);
                        }
                        out
                    }
                }
            }
            other => {
                return Err(Error::Wire(format!(
                    "kind {other:?} does not finalize as a flat exchange"
                )))
            }
        };
        self.complete_members(exec, result)
    }

    /// Defuse: slice the combined buffer back into member results.
    fn complete_members(&mut self, exec: BatchExec, result: Tensor) -> Result<()> {
        let parts = result.split(&exec.shapes)?;
        for (op, part) in exec.members.into_iter().zip(parts) {
            self.complete(op.handle, Ok(OpOutput::Tensor(part)));
        }
        Ok(())
    }

    /// Allgather defuse: member results concatenate per-rank slices.
    fn complete_gather(&mut self, exec: BatchExec, per_rank: Vec<Tensor>) -> Result<()> {
        let sliced: Vec<Vec<Tensor>> = per_rank
            .iter()
            .map(|t| t.split(&exec.shapes))
            .collect::<Result<_>>()?;
        for (m, op) in exec.members.into_iter().enumerate() {
            let shape = &exec.shapes[m];
            let volume: usize = shape.iter().product();
            let mut data = Vec::with_capacity(volume * self.size);
            for rank_slices in &sliced {
                data.extend_from_slice(rank_slices[m].data());
            }
            let mut out_shape = vec![self.size];
            out_shape.extend_from_slice(shape);
            let gathered = Tensor::new(data, out_shape)?;
            self.complete(op.handle, Ok(OpOutput::Tensor(gathered)));
        }
        Ok(())
    }
}

fn fusable_kind(kind: CollKind) -> bool {
    matches!(
        kind,
        CollKind::Allreduce | CollKind::Allgather | CollKind::NeighborAllreduce
    )
}

/// Two complete groups fuse when every rank submitted identical schemes
/// and declared identical peer sets (dynamic requests with differing
/// schemes fall back to unfused execution).
fn compatible(head: &[NegotiateMsg], cand: &[Option<NegotiateMsg>]) -> bool {
    for (h, c) in head.iter().zip(cand.iter()) {
        let c = c.as_ref().expect("complete group");
        if h.kind != c.kind
            || h.scheme != c.scheme
            || h.declared_send != c.declared_send
            || h.declared_recv != c.declared_recv
            || h.topo_check != c.topo_check
        {
            return false;
        }
    }
    true
}

struct RankSets {
    send: Vec<usize>,
    recv: Vec<usize>,
    machine_send: Vec<usize>,
    machine_recv: Vec<usize>,
}

/// Validates a complete group and computes per-rank send/recv sets.
/// Returns a diagnostic string on rejection (shape mismatch, scheme
/// config mismatch, unmatched topology declarations).
fn plan_sets(kind: CollKind, entries: &[NegotiateMsg], n: usize) -> std::result::Result<Vec<RankSets>, String> {
    // Shape consistency for payload-bearing ops.
    if matches!(
        kind,
        CollKind::Allreduce | CollKind::Allgather | CollKind::NeighborAllreduce | CollKind::Hierarchical | CollKind::WinCreate
    ) {
        for i in 1..n {
            if entries[i].shape != entries[0].shape {
                return Err(format!(
                    "shape mismatch: rank 0 has {:?}, rank {} has {:?}",
                    entries[0].shape, i, entries[i].shape
                ));
            }
        }
    }
    let empty = || RankSets {
        send: Vec::new(),
        recv: Vec::new(),
        machine_send: Vec::new(),
        machine_recv: Vec::new(),
    };
    match kind {
        CollKind::Barrier | CollKind::WinCreate | CollKind::WinFree => {
            Ok((0..n).map(|_| empty()).collect())
        }
        CollKind::Allreduce | CollKind::Allgather => Ok((0..n)
            .map(|r| {
                let others: Vec<usize> = (0..n).filter(|&x| x != r).collect();
                RankSets {
                    send: others.clone(),
                    recv: others,
                    machine_send: Vec::new(),
                    machine_recv: Vec::new(),
                }
            })
            .collect()),
        CollKind::NeighborAllreduce => {
            let (send, recv) = peer_sets(
                entries,
                n,
                |e| (&e.scheme, &e.declared_send, &e.declared_recv),
                entries.iter().any(|e| e.topo_check),
            )?;
            Ok((0..n)
                .map(|r| RankSets {
                    send: send[r].clone(),
                    recv: recv[r].clone(),
                    machine_send: Vec::new(),
                    machine_recv: Vec::new(),
                })
                .collect())
        }
        CollKind::Hierarchical => {
            let local_size = entries[0].local_size;
            for (i, e) in entries.iter().enumerate() {
                if e.local_size != local_size {
                    return Err(format!(
                        "heterogeneous machine sizes: rank 0 reports {local_size}, rank {i} reports {}",
                        e.local_size
                    ));
                }
            }
            if local_size == 0 || n % local_size as usize != 0 {
                return Err(format!(
                    "{n} ranks cannot split into machines of {local_size}"
                ));
            }
            let l = local_size as usize;
            let m = n / l;
            // Machine-level consistency from the leaders' declarations.
            let leader_entries: Vec<NegotiateMsg> =
                (0..m).map(|q| entries[q * l].clone()).collect();
            for q in 0..m {
                for i in q * l..(q + 1) * l {
                    if entries[i].machine_send != leader_entries[q].machine_send
                        || entries[i].machine_recv != leader_entries[q].machine_recv
                    {
                        return Err(format!(
                            "machine {q}: rank {i} declares different machine peers than its leader"
                        ));
                    }
                }
            }
            let (m_send, m_recv) = peer_sets(
                &leader_entries,
                m,
                |e| {
                    (
                        e.machine_scheme.as_ref().unwrap_or(&WeightScheme::Static),
                        &e.machine_send,
                        &e.machine_recv,
                    )
                },
                entries.iter().any(|e| e.topo_check),
            )
            .map_err(|d| format!("machine topology: {d}"))?;
            Ok((0..n)
                .map(|r| {
                    let q = r / l;
                    RankSets {
                        send: Vec::new(),
                        recv: Vec::new(),
                        machine_send: m_send[q].clone(),
                        machine_recv: m_recv[q].clone(),
                    }
                })
                .collect())
        }
    }
}

/// Computes consistent per-rank send/recv sets for a neighbor exchange
/// from the declared local views, inferring whichever side the scheme
/// configuration leaves unspecified and cross-validating when the
/// topology check is enabled.
fn peer_sets<'a, F>(
    entries: &'a [NegotiateMsg],
    n: usize,
    extract: F,
    check: bool,
) -> std::result::Result<(Vec<Vec<usize>>, Vec<Vec<usize>>), String>
where
    F: Fn(&'a NegotiateMsg) -> (&'a WeightScheme, &'a Vec<usize>, &'a Vec<usize>),
{
    let config = crate::collective::wire::scheme_config_tag(extract(&entries[0]).0);
    for (i, e) in entries.iter().enumerate() {
        let tag = crate::collective::wire::scheme_config_tag(extract(e).0);
        if tag != config {
            return Err(format!(
                "weight scheme configuration mismatch: rank 0 uses config {config}, rank {i} uses {tag}"
            ));
        }
    }
    let declared_send: Vec<&Vec<usize>> = entries.iter().map(|e| extract(e).1).collect();
    let declared_recv: Vec<&Vec<usize>> = entries.iter().map(|e| extract(e).2).collect();
    let schemes: Vec<&WeightScheme> = entries.iter().map(|e| extract(e).0).collect();

    let sends_known = schemes[0].is_static()
        || schemes[0].dst_weights().is_some();
    let recvs_known = schemes[0].is_static()
        || schemes[0].src_weights().is_some();

    let mut send: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut recv: Vec<Vec<usize>> = vec![Vec::new(); n];
    match (sends_known, recvs_known) {
        (true, true) => {
            // Static or push-pull: both sides declared; validate matching.
            if check {
                for j in 0..n {
                    for &i in declared_send[j] {
                        if i >= n {
                            return Err(format!("rank {j} sends to out-of-range rank {i}"));
                        }
                        if !declared_recv[i].contains(&j) {
                            return Err(format!(
                                "rank {j} sends to rank {i}, but rank {i} does not list {j} as a source"
                            ));
                        }
                    }
                }
                for i in 0..n {
                    for &j in declared_recv[i] {
                        if j >= n {
                            return Err(format!("rank {i} expects out-of-range rank {j}"));
                        }
                        if !declared_send[j].contains(&i) {
                            return Err(format!(
                                "rank {i} expects from rank {j}, but rank {j} does not list {i} as a destination"
                            ));
                        }
                    }
                }
            }
            for r in 0..n {
                send[r] = declared_send[r].clone();
                recv[r] = declared_recv[r].clone();
            }
        }
        (true, false) => {
            // Push-only: infer receivers from senders.
            for j in 0..n {
                for &i in declared_send[j] {
                    if i >= n {
                        return Err(format!("rank {j} sends to out-of-range rank {i}"));
                    }
                    recv[i].push(j);
                }
                send[j] = declared_send[j].clone();
            }
            for r in recv.iter_mut() {
                r.sort_unstable();
            }
        }
        (false, true) => {
            // Pull-only: infer senders from receivers.
            for i in 0..n {
                for &j in declared_recv[i] {
                    if j >= n {
                        return Err(format!("rank {i} pulls from out-of-range rank {j}"));
                    }
                    send[j].push(i);
                }
                recv[i] = declared_recv[i].clone();
            }
            for s in send.iter_mut() {
                s.sort_unstable();
            }
        }
        (false, false) => {
            return Err("scheme declares neither senders nor receivers".into());
        }
    }
    Ok((send, recv))
}
