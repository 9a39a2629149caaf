//! Point-to-point message fabric under all collectives and window
//! operations.
//!
//! Two interchangeable backends implement [`Fabric`]: a deterministic
//! in-process simulator ([`sim`]) driven by a virtual clock, and a TCP
//! backend ([`tcp`]) for multi-process runs on real sockets. Delivery is
//! reliable and FIFO per (src, dst) pair; there are no silent drops — a
//! dead peer fails the run.

pub mod sim;
pub mod tcp;

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Message kinds carried by the fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    Data = 0,
    Negotiate = 1,
    WindowPut = 2,
    WindowGetRequest = 3,
    WindowGetReply = 4,
    WindowAccumulate = 5,
    MutexAcquire = 6,
    MutexRelease = 7,
    Barrier = 8,
    Shutdown = 9,
}

impl MsgKind {
    pub fn from_u8(v: u8) -> Result<MsgKind> {
        Ok(match v {
            0 => MsgKind::Data,
            1 => MsgKind::Negotiate,
            2 => MsgKind::WindowPut,
            3 => MsgKind::WindowGetRequest,
            4 => MsgKind::WindowGetReply,
            5 => MsgKind::WindowAccumulate,
            6 => MsgKind::MutexAcquire,
            7 => MsgKind::MutexRelease,
            8 => MsgKind::Barrier,
            9 => MsgKind::Shutdown,
            other => return Err(Error::Wire(format!("unknown msg kind {other}"))),
        })
    }

    /// Tensor-bearing kinds occupy link bandwidth; the rest are scalar
    /// coordination traffic.
    pub fn is_data(self) -> bool {
        matches!(
            self,
            MsgKind::Data | MsgKind::WindowPut | MsgKind::WindowAccumulate | MsgKind::WindowGetReply
        )
    }
}

/// Message payload: either a tensor (dtype f64 on the wire) or opaque
/// bytes for coordination messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Bytes(Vec<u8>),
    Tensor(Tensor),
}

impl Payload {
    pub fn empty() -> Payload {
        Payload::Bytes(Vec::new())
    }

    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Bytes(b) => b.len(),
            Payload::Tensor(t) => t.byte_len(),
        }
    }

    pub fn as_tensor(&self) -> Result<&Tensor> {
        match self {
            Payload::Tensor(t) => Ok(t),
            Payload::Bytes(_) => Err(Error::Wire("expected tensor payload".into())),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match self {
            Payload::Bytes(b) => Ok(b),
            Payload::Tensor(_) => Err(Error::Wire("expected byte payload".into())),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Payload::Tensor(t) => Ok(t),
            Payload::Bytes(_) => Err(Error::Wire("expected tensor payload".into())),
        }
    }
}

/// One fabric message. `(op_name, src, dst, round_tag, kind)` uniquely
/// identifies a message within a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub kind: MsgKind,
    pub op_name: String,
    pub src: usize,
    pub dst: usize,
    pub round_tag: u32,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(
        kind: MsgKind,
        op_name: impl Into<String>,
        src: usize,
        dst: usize,
        round_tag: u32,
        payload: Payload,
    ) -> Envelope {
        Envelope {
            kind,
            op_name: op_name.into(),
            src,
            dst,
            round_tag,
            payload,
        }
    }
}

const DTYPE_BYTES: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Encodes an envelope as a length-prefixed frame:
/// u32 body length, u8 kind, u32 round_tag, u32 src, u32 dst,
/// u16 name length + UTF-8 name, u8 dtype, u8 ndim + u32 dims,
/// then the raw little-endian payload.
pub fn encode_frame(env: &Envelope) -> Result<Vec<u8>> {
    let name = env.op_name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::Wire("op name too long".into()));
    }
    let mut body = Vec::with_capacity(32 + name.len() + env.payload.byte_len());
    body.push(env.kind as u8);
    body.extend_from_slice(&env.round_tag.to_le_bytes());
    body.extend_from_slice(&(env.src as u32).to_le_bytes());
    body.extend_from_slice(&(env.dst as u32).to_le_bytes());
    body.extend_from_slice(&(name.len() as u16).to_le_bytes());
    body.extend_from_slice(name);
    match &env.payload {
        Payload::Bytes(bytes) => {
            body.push(DTYPE_BYTES);
            body.push(0); // ndim
            body.extend_from_slice(bytes);
        }
        Payload::Tensor(t) => {
            if t.shape().len() > u8::MAX as usize {
                return Err(Error::Wire("tensor rank too large".into()));
            }
            body.push(DTYPE_F64);
            body.push(t.shape().len() as u8);
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            body.extend_from_slice(&t.to_le_bytes());
        }
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Wire("frame truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a frame body (the bytes following the u32 length prefix).
pub fn decode_frame(body: &[u8]) -> Result<Envelope> {
    let mut c = Cursor { buf: body, pos: 0 };
    let kind = MsgKind::from_u8(c.u8()?)?;
    let round_tag = c.u32()?;
    let src = c.u32()? as usize;
    let dst = c.u32()? as usize;
    let name_len = c.u16()? as usize;
    let name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| Error::Wire("op name not UTF-8".into()))?
        .to_string();
    let dtype = c.u8()?;
    let ndim = c.u8()? as usize;
    let payload = match dtype {
        DTYPE_BYTES => {
            if ndim != 0 {
                return Err(Error::Wire("byte payload with nonzero ndim".into()));
            }
            Payload::Bytes(body[c.pos..].to_vec())
        }
        DTYPE_F64 => {
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32()? as usize);
            }
            Payload::Tensor(Tensor::from_le_bytes(&body[c.pos..], shape)?)
        }
        other => return Err(Error::Wire(format!("unknown dtype {other}"))),
    };
    Ok(Envelope {
        kind,
        op_name: name,
        src,
        dst,
        round_tag,
        payload,
    })
}

/// Which backend a fabric runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Sim,
    Tcp,
}

/// Instrumented traffic counters for one rank (sent side).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub data_msgs: u64,
    pub data_bytes: u64,
    pub ctrl_msgs: u64,
    pub ctrl_bytes: u64,
}

impl Counters {
    pub fn delta(&self, earlier: &Counters) -> Counters {
        Counters {
            data_msgs: self.data_msgs - earlier.data_msgs,
            data_bytes: self.data_bytes - earlier.data_bytes,
            ctrl_msgs: self.ctrl_msgs - earlier.ctrl_msgs,
            ctrl_bytes: self.ctrl_bytes - earlier.ctrl_bytes,
        }
    }
}

/// Backend-independent view of the point-to-point fabric for one rank.
///
/// `send` enqueues without waiting for the receiver's application thread;
/// buffering is unbounded. All blocking inside the runtime goes through
/// `wait_until` so the simulator can schedule actors deterministically;
/// the closure must not call back into the fabric except `try_recv_match`.
pub trait Fabric: Send + Sync {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn backend(&self) -> BackendKind;

    fn send(&self, env: Envelope) -> Result<()>;

    /// Removes and returns the first buffered envelope matching `pred`.
    fn try_recv_match(&self, pred: &mut dyn FnMut(&Envelope) -> bool) -> Result<Option<Envelope>>;

    /// True when the rank's mailbox holds at least one envelope.
    fn has_incoming(&self) -> bool;

    /// Blocks the calling actor until `cond` returns true. `label` names
    /// the wait in deadlock diagnostics.
    fn wait_until(&self, label: &'static str, cond: &mut dyn FnMut() -> bool) -> Result<()>;

    /// Wakes waiters so their conditions are re-evaluated (no-op on the
    /// simulator, whose scheduler re-polls on its own).
    fn notify(&self);

    /// Seconds on the backend clock: virtual for sim, monotonic for tcp.
    fn now(&self) -> f64;

    fn sleep(&self, seconds: f64) -> Result<()>;

    /// Spawns a runtime thread registered with the backend scheduler.
    fn spawn_actor(
        &self,
        label: String,
        f: Box<dyn FnOnce() + Send>,
    ) -> std::thread::JoinHandle<()>;

    /// Blocks until no message is in flight anywhere and every other
    /// actor is idle (sim). The tcp backend approximates with a short
    /// real-time pause.
    fn await_quiescence(&self) -> Result<()>;

    fn counters(&self) -> Counters;

    fn shutdown(&self);
    fn is_shutdown(&self) -> bool;
}

/// Blocking receive of the first envelope matching `pred`.
pub fn recv_match(
    fabric: &dyn Fabric,
    label: &'static str,
    mut pred: impl FnMut(&Envelope) -> bool,
) -> Result<Envelope> {
    let slot: RefCell<Option<Result<Envelope>>> = RefCell::new(None);
    fabric.wait_until(label, &mut || {
        if slot.borrow().is_some() {
            return true;
        }
        match fabric.try_recv_match(&mut pred) {
            Ok(Some(env)) => {
                *slot.borrow_mut() = Some(Ok(env));
                true
            }
            Ok(None) => false,
            Err(e) => {
                *slot.borrow_mut() = Some(Err(e));
                true
            }
        }
    })?;
    slot.into_inner()
        .expect("wait_until returned with condition satisfied")
}

/// Rendezvous barrier over raw envelopes: everyone reports to rank 0,
/// which releases the group. Safe only while no progress thread is
/// consuming the mailbox (startup and transport-level tests); the
/// collective layer routes barriers through negotiation instead.
pub fn raw_barrier(fabric: &dyn Fabric, tag: u32) -> Result<()> {
    let n = fabric.size();
    if n == 1 {
        return Ok(());
    }
    let me = fabric.rank();
    if me == 0 {
        for _ in 1..n {
            recv_match(fabric, "raw_barrier gather", |e| {
                e.kind == MsgKind::Barrier && e.round_tag == tag && e.op_name == "enter"
            })?;
        }
        for peer in 1..n {
            fabric.send(Envelope::new(
                MsgKind::Barrier,
                "release",
                me,
                peer,
                tag,
                Payload::empty(),
            ))?;
        }
    } else {
        fabric.send(Envelope::new(
            MsgKind::Barrier,
            "enter",
            me,
            0,
            tag,
            Payload::empty(),
        ))?;
        recv_match(fabric, "raw_barrier release", |e| {
            e.kind == MsgKind::Barrier && e.round_tag == tag && e.op_name == "release"
        })?;
    }
    Ok(())
}

/// Environment variables injected by the `dfrun` launcher.
pub const ENV_RANK: &str = "DEFOG_RANK";
pub const ENV_SIZE: &str = "DEFOG_SIZE";
pub const ENV_PEERS: &str = "DEFOG_PEERS";
pub const ENV_BACKEND: &str = "DEFOG_BACKEND";
pub const ENV_LOCAL_SIZE: &str = "DEFOG_LOCAL_SIZE";
pub const ENV_FUSION_BYTES: &str = "DEFOG_FUSION_BYTES";
pub const ENV_TOPO_CHECK: &str = "DEFOG_TOPO_CHECK";
