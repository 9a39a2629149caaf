//! Multi-process TCP fabric.
//!
//! Each rank is one OS process (normally launched by `dfrun`), listening
//! on its own address and fully meshed with every peer: rank `i` dials
//! every rank below it and accepts from every rank above it. Frames use
//! the length-prefixed wire format from the parent module. A dead peer
//! fails the run; there is no reconnection.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::transport::{
    decode_frame, encode_frame, raw_barrier, BackendKind, Counters, Envelope, Fabric, ENV_PEERS,
    ENV_RANK, ENV_SIZE,
};

#[derive(Debug, Clone)]
pub struct TcpConfig {
    pub rank: usize,
    pub size: usize,
    /// Listen address of every rank, indexed by rank (`host:port`).
    pub peers: Vec<String>,
    pub connect_timeout: Duration,
}

impl TcpConfig {
    /// Reads the launcher-injected environment (`DEFOG_RANK`,
    /// `DEFOG_SIZE`, `DEFOG_PEERS`).
    pub fn from_env() -> Result<TcpConfig> {
        let rank: usize = std::env::var(ENV_RANK)
            .map_err(|_| Error::Config(format!("{ENV_RANK} not set")))?
            .parse()
            .map_err(|_| Error::Config(format!("{ENV_RANK} not an integer")))?;
        let size: usize = std::env::var(ENV_SIZE)
            .map_err(|_| Error::Config(format!("{ENV_SIZE} not set")))?
            .parse()
            .map_err(|_| Error::Config(format!("{ENV_SIZE} not an integer")))?;
        let peers: Vec<String> = std::env::var(ENV_PEERS)
            .map_err(|_| Error::Config(format!("{ENV_PEERS} not set")))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if peers.len() != size {
            return Err(Error::Config(format!(
                "{ENV_PEERS} lists {} peers, expected {}",
                peers.len(),
                size
            )));
        }
        if rank >= size {
            return Err(Error::Config(format!("rank {rank} >= size {size}")));
        }
        Ok(TcpConfig {
            rank,
            size,
            peers,
            connect_timeout: Duration::from_secs(15),
        })
    }

    /// Localhost peer list for `size` ranks starting at `base_port`.
    pub fn local_peers(size: usize, base_port: u16) -> Vec<String> {
        (0..size)
            .map(|r| format!("127.0.0.1:{}", base_port + r as u16))
            .collect()
    }
}

struct Shared {
    mailbox: Mutex<VecDeque<Envelope>>,
    wakeups: Mutex<u64>,
    cv: Condvar,
    failed: Mutex<Option<Error>>,
    counters: Mutex<Counters>,
    shutdown: AtomicBool,
}

impl Shared {
    fn fail(&self, err: Error) {
        let mut f = self.failed.lock().unwrap();
        if f.is_none() {
            *f = Some(err);
        }
        drop(f);
        let mut w = self.wakeups.lock().unwrap();
        *w += 1;
        drop(w);
        self.cv.notify_all();
    }
}

/// TCP-backed [`Fabric`] for a single rank.
pub struct TcpFabric {
    rank: usize,
    size: usize,
    shared: Arc<Shared>,
    writers: Vec<Option<Mutex<TcpStream>>>,
    start: Instant,
    readers: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl TcpFabric {
    /// Establishes all-to-all connectivity and passes a startup barrier.
    pub fn connect(cfg: TcpConfig) -> Result<Arc<TcpFabric>> {
        let listener = TcpListener::bind(&cfg.peers[cfg.rank]).map_err(|e| Error::Startup {
            rank: cfg.rank,
            detail: format!("cannot bind {}: {e}", cfg.peers[cfg.rank]),
        })?;
        Self::connect_with_listener(cfg, listener)
    }

    /// As [`TcpFabric::connect`] but with a pre-bound listener, so tests
    /// can pick free ports before sharing the peer list.
    pub fn connect_with_listener(cfg: TcpConfig, listener: TcpListener) -> Result<Arc<TcpFabric>> {
        let me = cfg.rank;
        let n = cfg.size;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Io(e.to_string()))?;

        let deadline = Instant::now() + cfg.connect_timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

        // Dial lower ranks.
        for peer in 0..me {
            let addr = cfg.peers[peer].clone();
            let stream = loop {
                match TcpStream::connect(&addr) {
                    Ok(s) => break s,
                    Err(e) => {
                        if Instant::now() > deadline {
                            return Err(Error::Startup {
                                rank: peer,
                                detail: format!("connect to {addr} timed out: {e}"),
                            });
                        }
                        std::thread::sleep(Duration::from_millis(25));
                    }
                }
            };
            stream.set_nodelay(true).ok();
            let mut s = stream;
            s.write_all(&(me as u32).to_le_bytes())
                .map_err(|e| Error::Io(e.to_string()))?;
            streams[peer] = Some(s);
        }

        // Accept higher ranks.
        let mut expected = n.saturating_sub(me + 1);
        while expected > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nodelay(true).ok();
                    s.set_nonblocking(false).ok();
                    let mut buf = [0u8; 4];
                    s.read_exact(&mut buf)
                        .map_err(|e| Error::Io(format!("handshake read: {e}")))?;
                    let peer = u32::from_le_bytes(buf) as usize;
                    if peer >= n || peer <= me || streams[peer].is_some() {
                        return Err(Error::Startup {
                            rank: peer,
                            detail: "invalid handshake rank".into(),
                        });
                    }
                    streams[peer] = Some(s);
                    expected -= 1;
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        let missing: Vec<usize> =
                            (me + 1..n).filter(|&p| streams[p].is_none()).collect();
                        return Err(Error::Startup {
                            rank: *missing.first().unwrap_or(&me),
                            detail: format!("ranks {missing:?} never connected"),
                        });
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(Error::Io(format!("accept: {e}"))),
            }
        }

        let shared = Arc::new(Shared {
            mailbox: Mutex::new(VecDeque::new()),
            wakeups: Mutex::new(0),
            cv: Condvar::new(),
            failed: Mutex::new(None),
            counters: Mutex::new(Counters::default()),
            shutdown: AtomicBool::new(false),
        });

        let mut writers: Vec<Option<Mutex<TcpStream>>> = (0..n).map(|_| None).collect();
        let mut readers = Vec::new();
        for (peer, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else { continue };
            stream.set_nonblocking(false).ok();
            let read_half = stream.try_clone().map_err(|e| Error::Io(e.to_string()))?;
            writers[peer] = Some(Mutex::new(stream));
            let shared2 = Arc::clone(&shared);
            readers.push(std::thread::spawn(move || {
                reader_loop(read_half, peer, shared2);
            }));
        }

        let fabric = Arc::new(TcpFabric {
            rank: me,
            size: n,
            shared,
            writers,
            start: Instant::now(),
            readers: Mutex::new(readers),
        });
        raw_barrier(fabric.as_ref(), 0)?;
        Ok(fabric)
    }

    /// Connects using launcher-injected environment variables.
    pub fn connect_from_env() -> Result<Arc<TcpFabric>> {
        TcpFabric::connect(TcpConfig::from_env()?)
    }

    fn check_failed(&self) -> Result<()> {
        if let Some(e) = self.shared.failed.lock().unwrap().clone() {
            return Err(e);
        }
        Ok(())
    }
}

fn reader_loop(mut stream: TcpStream, peer: usize, shared: Arc<Shared>) {
    loop {
        let mut len_buf = [0u8; 4];
        if let Err(e) = stream.read_exact(&mut len_buf) {
            if !shared.shutdown.load(Ordering::SeqCst) {
                shared.fail(Error::Io(format!("peer {peer} connection lost: {e}")));
            }
            return;
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut body = vec![0u8; len];
        if let Err(e) = stream.read_exact(&mut body) {
            if !shared.shutdown.load(Ordering::SeqCst) {
                shared.fail(Error::Io(format!("peer {peer} frame truncated: {e}")));
            }
            return;
        }
        match decode_frame(&body) {
            Ok(env) => {
                shared.mailbox.lock().unwrap().push_back(env);
                let mut w = shared.wakeups.lock().unwrap();
                *w += 1;
                drop(w);
                shared.cv.notify_all();
            }
            Err(e) => {
                shared.fail(e);
                return;
            }
        }
    }
}

impl Fabric for TcpFabric {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Tcp
    }

    fn send(&self, env: Envelope) -> Result<()> {
        self.check_failed()?;
        if env.dst >= self.size {
            return Err(Error::RankOutOfRange {
                rank: env.dst,
                size: self.size,
            });
        }
        {
            let mut c = self.shared.counters.lock().unwrap();
            let bytes = env.payload.byte_len() as u64;
            if env.kind.is_data() {
                c.data_msgs += 1;
                c.data_bytes += bytes;
            } else {
                c.ctrl_msgs += 1;
                c.ctrl_bytes += bytes;
            }
        }
        if env.dst == self.rank {
            self.shared.mailbox.lock().unwrap().push_back(env);
            self.notify();
            return Ok(());
        }
        let frame = encode_frame(&env)?;
        let writer = self.writers[env.dst]
            .as_ref()
            .expect("mesh is fully connected");
        let mut stream = writer.lock().unwrap();
        stream
            .write_all(&frame)
            .map_err(|e| Error::Io(format!("send to {}: {e}", env.dst)))?;
        Ok(())
    }

    fn try_recv_match(
        &self,
        pred: &mut dyn FnMut(&Envelope) -> bool,
    ) -> Result<Option<Envelope>> {
        let mut mb = self.shared.mailbox.lock().unwrap();
        if let Some(pos) = mb.iter().position(|e| pred(e)) {
            return Ok(mb.remove(pos));
        }
        Ok(None)
    }

    fn has_incoming(&self) -> bool {
        !self.shared.mailbox.lock().unwrap().is_empty()
    }

    fn wait_until(&self, label: &'static str, cond: &mut dyn FnMut() -> bool) -> Result<()> {
        loop {
            self.check_failed()?;
            if self.shared.shutdown.load(Ordering::SeqCst) {
                return Err(Error::Shutdown(label.to_string()));
            }
            if cond() {
                return Ok(());
            }
            let guard = self.shared.wakeups.lock().unwrap();
            if cond() {
                return Ok(());
            }
            let (_g, _t) = self
                .shared
                .cv
                .wait_timeout(guard, Duration::from_millis(20))
                .unwrap();
        }
    }

    fn notify(&self) {
        let mut w = self.shared.wakeups.lock().unwrap();
        *w += 1;
        drop(w);
        self.shared.cv.notify_all();
    }

    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn sleep(&self, seconds: f64) -> Result<()> {
        std::thread::sleep(Duration::from_secs_f64(seconds.max(0.0)));
        self.check_failed()
    }

    fn spawn_actor(
        &self,
        label: String,
        f: Box<dyn FnOnce() + Send>,
    ) -> std::thread::JoinHandle<()> {
        std::thread::Builder::new()
            .name(label)
            .spawn(f)
            .expect("spawn runtime thread")
    }

    fn await_quiescence(&self) -> Result<()> {
        // Best effort on real networks: give in-flight traffic a moment.
        std::thread::sleep(Duration::from_millis(25));
        self.check_failed()
    }

    fn counters(&self) -> Counters {
        *self.shared.counters.lock().unwrap()
    }

    fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for w in self.writers.iter().flatten() {
            if let Ok(s) = w.lock() {
                s.shutdown(std::net::Shutdown::Both).ok();
            }
        }
        self.notify();
        let mut readers = self.readers.lock().unwrap();
        for h in readers.drain(..) {
            h.join().ok();
        }
    }

    fn is_shutdown(&self) -> bool {
        self.shared.shutdown.load(Ordering::SeqCst)
            || self.shared.failed.lock().unwrap().is_some()
    }
}
