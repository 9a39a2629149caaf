//! Byte encodings for negotiation traffic (requests to rank 0 and the
//! plans it broadcasts back). These ride in `Payload::Bytes` of
//! `Negotiate` envelopes; tensor data never flows through here.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::WeightScheme;

pub const SUBMSG_REQUEST: u8 = 0;
pub const SUBMSG_PLAN: u8 = 1;
pub const SUBMSG_ERROR: u8 = 2;

/// Collective kinds routed through negotiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum CollKind {
    Allreduce = 0,
    NeighborAllreduce = 1,
    Allgather = 2,
    Hierarchical = 3,
    Barrier = 4,
    WinCreate = 5,
    WinFree = 6,
}

impl CollKind {
    pub fn from_u8(v: u8) -> Result<CollKind> {
        Ok(match v {
            0 => CollKind::Allreduce,
            1 => CollKind::NeighborAllreduce,
            2 => CollKind::Allgather,
            3 => CollKind::Hierarchical,
            4 => CollKind::Barrier,
            5 => CollKind::WinCreate,
            6 => CollKind::WinFree,
            other => return Err(Error::Wire(format!("unknown collective kind {other}"))),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            CollKind::Allreduce => "allreduce",
            CollKind::NeighborAllreduce => "neighbor_allreduce",
            CollKind::Allgather => "allgather",
            CollKind::Hierarchical => "hierarchical_neighbor_allreduce",
            CollKind::Barrier => "barrier",
            CollKind::WinCreate => "win_create",
            CollKind::WinFree => "win_free",
        }
    }
}

const CONFIG_STATIC: u8 = 0;
const CONFIG_PUSH: u8 = 1;
const CONFIG_PULL: u8 = 2;
const CONFIG_PUSH_PULL: u8 = 3;

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(tag: u8) -> Writer {
        Writer { buf: vec![tag] }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn ranks(&mut self, ranks: &[usize]) {
        self.u32(ranks.len() as u32);
        for &r in ranks {
            self.u32(r as u32);
        }
    }

    pub fn weight_map(&mut self, map: &BTreeMap<usize, f64>) {
        self.u32(map.len() as u32);
        for (&r, &w) in map {
            self.u32(r as u32);
            self.f64(w);
        }
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Wire("negotiation message truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool> {
        Ok(self.u8()? != 0)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        Ok(std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Wire("bad UTF-8".into()))?
            .to_string())
    }

    pub fn ranks(&mut self) -> Result<Vec<usize>> {
        let len = self.u32()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.u32()? as usize);
        }
        Ok(out)
    }

    pub fn weight_map(&mut self) -> Result<BTreeMap<usize, f64>> {
        let len = self.u32()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..len {
            let r = self.u32()? as usize;
            out.insert(r, self.f64()?);
        }
        Ok(out)
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u8()? as usize;
        let mut out = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            out.push(self.u32()? as usize);
        }
        Ok(out)
    }
}

pub fn write_scheme(w: &mut Writer, scheme: &WeightScheme) {
    match scheme {
        WeightScheme::Static => {
            w.u8(CONFIG_STATIC);
        }
        WeightScheme::Push {
            self_weight,
            dst_weights,
        } => {
            w.u8(CONFIG_PUSH);
            w.f64(*self_weight);
            w.weight_map(dst_weights);
        }
        WeightScheme::Pull {
            self_weight,
            src_weights,
        } => {
            w.u8(CONFIG_PULL);
            w.f64(*self_weight);
            w.weight_map(src_weights);
        }
        WeightScheme::PushPull {
            self_weight,
            src_weights,
            dst_weights,
        } => {
            w.u8(CONFIG_PUSH_PULL);
            w.f64(*self_weight);
            w.weight_map(src_weights);
            w.weight_map(dst_weights);
        }
    }
}

pub fn read_scheme(r: &mut Reader) -> Result<WeightScheme> {
    Ok(match r.u8()? {
        CONFIG_STATIC => WeightScheme::Static,
        CONFIG_PUSH => {
            let self_weight = r.f64()?;
            WeightScheme::Push {
                self_weight,
                dst_weights: r.weight_map()?,
            }
        }
        CONFIG_PULL => {
            let self_weight = r.f64()?;
            WeightScheme::Pull {
                self_weight,
                src_weights: r.weight_map()?,
            }
        }
        CONFIG_PUSH_PULL => {
            let self_weight = r.f64()?;
            WeightScheme::PushPull {
                self_weight,
                src_weights: r.weight_map()?,
                dst_weights: r.weight_map()?,
            }
        }
        other => return Err(Error::Wire(format!("unknown scheme config {other}"))),
    })
}

/// Scheme config discriminant, used for cross-rank consistency checks.
pub fn scheme_config_tag(scheme: &WeightScheme) -> u8 {
    match scheme {
        WeightScheme::Static => CONFIG_STATIC,
        WeightScheme::Push { .. } => CONFIG_PUSH,
        WeightScheme::Pull { .. } => CONFIG_PULL,
        WeightScheme::PushPull { .. } => CONFIG_PUSH_PULL,
    }
}

/// One rank's negotiation request for a named op.
#[derive(Debug, Clone, PartialEq)]
pub struct NegotiateMsg {
    pub kind: CollKind,
    pub gen: u32,
    pub shape: Vec<usize>,
    pub scheme: WeightScheme,
    /// Ranks this rank will send payloads to / expects payloads from.
    /// Meaning depends on the scheme configuration; empty when unknown
    /// (the coordinator infers the missing side).
    pub declared_send: Vec<usize>,
    pub declared_recv: Vec<usize>,
    pub topo_check: bool,
    pub payload_bytes: u64,
    /// Hierarchical extras (0 / empty otherwise).
    pub local_size: u32,
    pub machine_scheme: Option<WeightScheme>,
    pub machine_send: Vec<usize>,
    pub machine_recv: Vec<usize>,
}

impl NegotiateMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(SUBMSG_REQUEST);
        w.u8(self.kind as u8);
        w.u32(self.gen);
        w.shape(&self.shape);
        write_scheme(&mut w, &self.scheme);
        w.ranks(&self.declared_send);
        w.ranks(&self.declared_recv);
        w.bool(self.topo_check);
        w.u64(self.payload_bytes);
        w.u32(self.local_size);
        match &self.machine_scheme {
            Some(s) => {
                w.bool(true);
                write_scheme(&mut w, s);
            }
            None => w.bool(false),
        }
        w.ranks(&self.machine_send);
        w.ranks(&self.machine_recv);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<NegotiateMsg> {
        let mut r = Reader::new(buf);
        let tag = r.u8()?;
        if tag != SUBMSG_REQUEST {
            return Err(Error::Wire(format!("expected request submsg, got {tag}")));
        }
        Ok(NegotiateMsg {
            kind: CollKind::from_u8(r.u8()?)?,
            gen: r.u32()?,
            shape: r.shape()?,
            scheme: read_scheme(&mut r)?,
            declared_send: r.ranks()?,
            declared_recv: r.ranks()?,
            topo_check: r.bool()?,
            payload_bytes: r.u64()?,
            local_size: r.u32()?,
            machine_scheme: if r.bool()? {
                Some(read_scheme(&mut r)?)
            } else {
                None
            },
            machine_send: r.ranks()?,
            machine_recv: r.ranks()?,
        })
    }
}

/// Execution plan for one fused batch, broadcast by the coordinator to a
/// single rank (send/recv sets are receiver-specific).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanMsg {
    pub batch_id: u64,
    pub kind: CollKind,
    /// (name, gen) of each member, in fused buffer order.
    pub members: Vec<(String, u32)>,
    pub send: Vec<usize>,
    pub recv: Vec<usize>,
    /// Hierarchical extras: machine-level peer sets for the local leader.
    pub machine_send: Vec<usize>,
    pub machine_recv: Vec<usize>,
}

impl PlanMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(SUBMSG_PLAN);
        w.u64(self.batch_id);
        w.u8(self.kind as u8);
        w.u32(self.members.len() as u32);
        for (name, gen) in &self.members {
            w.str(name);
            w.u32(*gen);
        }
        w.ranks(&self.send);
        w.ranks(&self.recv);
        w.ranks(&self.machine_send);
        w.ranks(&self.machine_recv);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<PlanMsg> {
        let mut r = Reader::new(buf);
        let tag = r.u8()?;
        if tag != SUBMSG_PLAN {
            return Err(Error::Wire(format!("expected plan submsg, got {tag}")));
        }
        let batch_id = r.u64()?;
        let kind = CollKind::from_u8(r.u8()?)?;
        let n = r.u32()? as usize;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            members.push((name, r.u32()?));
        }
        Ok(PlanMsg {
            batch_id,
            kind,
            members,
            send: r.ranks()?,
            recv: r.ranks()?,
            machine_send: r.ranks()?,
            machine_recv: r.ranks()?,
        })
    }
}

/// Negotiation rejection: every member handle fails with the diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMsg {
    pub kind: CollKind,
    pub members: Vec<(String, u32)>,
    pub detail: String,
}

impl ErrorMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(SUBMSG_ERROR);
        w.u8(self.kind as u8);
        w.u32(self.members.len() as u32);
        for (name, gen) in &self.members {
            w.str(name);
            w.u32(*gen);
        }
        w.str(&self.detail);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<ErrorMsg> {
        let mut r = Reader::new(buf);
        let tag = r.u8()?;
        if tag != SUBMSG_ERROR {
            return Err(Error::Wire(format!("expected error submsg, got {tag}")));
        }
        let kind = CollKind::from_u8(r.u8()?)?;
        let n = r.u32()? as usize;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            members.push((name, r.u32()?));
        }
        Ok(ErrorMsg {
            kind,
            members,
            detail: r.str()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negotiate_roundtrip() {
        let mut src = BTreeMap::new();
        src.insert(3usize, 0.25);
        let msg = NegotiateMsg {
            kind: CollKind::NeighborAllreduce,
            gen: 7,
            shape: vec![2, 5],
            scheme: WeightScheme::pull(0.75, src),
            declared_send: vec![1, 2],
            declared_recv: vec![3],
            topo_check: true,
            payload_bytes: 80,
            local_size: 0,
            machine_scheme: None,
            machine_send: vec![],
            machine_recv: vec![],
        };
        assert_eq!(NegotiateMsg::decode(&msg.encode()).unwrap(), msg);
    }

    #[test]
    fn plan_and_error_roundtrip() {
        let plan = PlanMsg {
            batch_id: 99,
            kind: CollKind::Allreduce,
            members: vec![("a".into(), 0), ("b".into(), 3)],
            send: vec![1, 2, 3],
            recv: vec![1, 2, 3],
            machine_send: vec![],
            machine_recv: vec![],
        };
        assert_eq!(PlanMsg::decode(&plan.encode()).unwrap(), plan);

        let err = ErrorMsg {
            kind: CollKind::NeighborAllreduce,
            members: vec![("x".into(), 1)],
            detail: "rank 0 sends to 1 but rank 1 does not expect it".into(),
        };
        assert_eq!(ErrorMsg::decode(&err.encode()).unwrap(), err);
    }
}
