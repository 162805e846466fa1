//! Two carriers for the same frames. The in-process one runs the aggregator
//! on a thread fed by std channels; the TCP one runs it on a tokio runtime
//! with one reader and one writer task per connection. Either way a single
//! task owns the [`AggregatorCore`], so message handling is serialized.

use std::io::Write;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::mpsc as tmpsc;

use super::aggregator::{AggregatorCore, ConnId, Outgoing};
use super::frame::{decode_frame, read_frame, FrameError, MAX_PAYLOAD};
use super::message::{encode_message, Body, Message};
use super::NetError;

pub const DEFAULT_PORT: u16 = 7431;

/// `FEDGM_BIND` if set, else `configured`, else `127.0.0.1:7431`.
pub fn bind_address(configured: Option<&str>) -> Result<SocketAddr, NetError> {
    let text = std::env::var("FEDGM_BIND")
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| configured.map(str::to_string))
        .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}"));
    text.to_socket_addrs()?
        .next()
        .ok_or_else(|| NetError::Protocol(format!("cannot resolve bind address {text:?}")))
}

/// A silo's bidirectional message pipe. `send` takes a complete frame,
/// `recv` yields the next payload.
pub trait Link: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError>;
    fn recv(&mut self) -> Result<Vec<u8>, NetError>;
}

enum Event {
    Open(ConnId, Sink),
    Frame(ConnId, Vec<u8>),
    Close(ConnId),
    Shutdown,
}

enum Sink {
    Std(mpsc::Sender<Vec<u8>>),
    Tokio(tmpsc::UnboundedSender<Vec<u8>>),
}

impl Sink {
    fn deliver(&self, frame: Vec<u8>) {
        // A closed peer is not an aggregator error; the frame is dropped.
        let _ = match self {
            Sink::Std(tx) => tx.send(frame).map_err(|_| ()),
            Sink::Tokio(tx) => tx.send(frame).map_err(|_| ()),
        };
    }
}

/// Owns the core for the lifetime of a session. Shutdown is deferred until
/// every connection has closed, so frames already sent are never dropped.
struct Driver {
    core: AggregatorCore,
    sinks: std::collections::BTreeMap<ConnId, Sink>,
    stopping: bool,
}

impl Driver {
    fn new(core: AggregatorCore) -> Self {
        Self {
            core,
            sinks: Default::default(),
            stopping: false,
        }
    }

    /// Returns true once the driver should exit.
    fn step(&mut self, ev: Event) -> bool {
        match ev {
            Event::Open(conn, sink) => {
                self.core.connected(conn);
                self.sinks.insert(conn, sink);
            }
            Event::Frame(conn, payload) => {
                let out = self.core.handle(conn, &payload);
                self.dispatch(out);
            }
            Event::Close(conn) => {
                self.sinks.remove(&conn);
                let out = self.core.disconnected(conn);
                self.dispatch(out);
            }
            Event::Shutdown => self.stopping = true,
        }
        self.stopping && self.sinks.is_empty()
    }

    fn dispatch(&mut self, out: Vec<Outgoing>) {
        for o in out {
            if let Some(sink) = self.sinks.get(&o.conn) {
                sink.deliver(o.frame);
            }
        }
    }
}

enum Control {
    Std(mpsc::Sender<Event>),
    Tokio(tmpsc::UnboundedSender<Event>),
}

/// A running aggregator. [`AggregatorHandle::finish`] waits for every
/// connection to close and hands back the core for inspection.
pub struct AggregatorHandle {
    control: Control,
    join: JoinHandle<AggregatorCore>,
    addr: Option<SocketAddr>,
}

impl AggregatorHandle {
    pub fn spawn_inproc(core: AggregatorCore) -> (Self, InProcConnector) {
        let (tx, rx) = mpsc::channel::<Event>();
        let join = std::thread::spawn(move || {
            let mut driver = Driver::new(core);
            while let Ok(ev) = rx.recv() {
                // In-process links deliver whole frames; unwrap them here so
                // the framing code is exercised on both transports.
                let ev = match ev {
                    Event::Frame(conn, frame) => match decode_frame(&frame) {
                        Ok((payload, _)) => Event::Frame(conn, payload.to_vec()),
                        Err(e) => {
                            if let Some(sink) = driver.sinks.get(&conn) {
                                sink.deliver(frame_error(&driver.core, &e));
                            }
                            continue;
                        }
                    },
                    other => other,
                };
                if driver.step(ev) {
                    break;
                }
            }
            driver.core
        });
        let connector = InProcConnector {
            tx: tx.clone(),
            next: Arc::new(AtomicU64::new(1)),
        };
        (
            Self {
                control: Control::Std(tx),
                join,
                addr: None,
            },
            connector,
        )
    }

    /// Binds synchronously so the caller learns the address (or the bind
    /// error) before any silo connects. Port 0 picks a free port.
    pub fn spawn_tcp(core: AggregatorCore, bind: SocketAddr) -> Result<Self, NetError> {
        let listener = std::net::TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, mut rx) = tmpsc::unbounded_channel::<Event>();
        let accept_tx = tx.clone();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_io()
            .build()?;
        let join = std::thread::spawn(move || {
            let core = runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers with tokio");
                tokio::spawn(accept_loop(listener, accept_tx));
                let mut driver = Driver::new(core);
                while let Some(ev) = rx.recv().await {
                    if driver.step(ev) {
                        break;
                    }
                }
                driver.core
            });
            runtime.shutdown_background();
            core
        });
        Ok(Self {
            control: Control::Tokio(tx),
            join,
            addr: Some(addr),
        })
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn finish(self) -> AggregatorCore {
        match &self.control {
            Control::Std(tx) => {
                let _ = tx.send(Event::Shutdown);
            }
            Control::Tokio(tx) => {
                let _ = tx.send(Event::Shutdown);
            }
        }
        self.join.join().expect("aggregator thread panicked")
    }
}

fn frame_error(core: &AggregatorCore, e: &FrameError) -> Vec<u8> {
    let msg = Message::new(
        &core.config().session_id,
        None,
        Body::Error {
            code: "malformed".into(),
            message: e.to_string(),
        },
    );
    encode_message(&msg).expect("error message fits in a frame")
}

async fn accept_loop(listener: tokio::net::TcpListener, events: tmpsc::UnboundedSender<Event>) {
    let mut next: ConnId = 1;
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            continue;
        };
        let _ = stream.set_nodelay(true);
        let conn = next;
        next += 1;
        let (mut reader, mut writer) = stream.into_split();
        let (out_tx, mut out_rx) = tmpsc::unbounded_channel::<Vec<u8>>();
        if events.send(Event::Open(conn, Sink::Tokio(out_tx.clone()))).is_err() {
            return;
        }
        tokio::spawn(async move {
            while let Some(frame) = out_rx.recv().await {
                if writer.write_all(&frame).await.is_err() {
                    break;
                }
            }
        });
        let events = events.clone();
        tokio::spawn(async move {
            loop {
                let mut header = [0u8; 4];
                if reader.read_exact(&mut header).await.is_err() {
                    break;
                }
                let len = u32::from_be_bytes(header) as usize;
                if len > MAX_PAYLOAD {
                    // The stream cannot be resynchronized past an oversize frame.
                    let msg = Message::new(
                        "",
                        None,
                        Body::Error {
                            code: "oversize".into(),
                            message: FrameError::Oversize(len).to_string(),
                        },
                    );
                    let _ = out_tx.send(encode_message(&msg).expect("small frame"));
                    break;
                }
                let mut payload = vec![0u8; len];
                if reader.read_exact(&mut payload).await.is_err() {
                    break;
                }
                if events.send(Event::Frame(conn, payload)).is_err() {
                    return;
                }
            }
            let _ = events.send(Event::Close(conn));
        });
    }
}

/// Hands out in-process links to a running aggregator.
#[derive(Clone)]
pub struct InProcConnector {
    tx: mpsc::Sender<Event>,
    next: Arc<AtomicU64>,
}

impl InProcConnector {
    pub fn connect(&self) -> InProcLink {
        let id = self.next.fetch_add(1, Ordering::SeqCst);
        let (out_tx, out_rx) = mpsc::channel();
        let _ = self.tx.send(Event::Open(id, Sink::Std(out_tx)));
        InProcLink {
            id,
            tx: self.tx.clone(),
            rx: out_rx,
        }
    }
}

pub struct InProcLink {
    id: ConnId,
    tx: mpsc::Sender<Event>,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl Link for InProcLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError> {
        self.tx
            .send(Event::Frame(self.id, frame.to_vec()))
            .map_err(|_| NetError::Closed)
    }

    fn recv(&mut self) -> Result<Vec<u8>, NetError> {
        let frame = self.rx.recv().map_err(|_| NetError::Closed)?;
        let (payload, _) = decode_frame(&frame)?;
        Ok(payload.to_vec())
    }
}

impl Drop for InProcLink {
    fn drop(&mut self) {
        let _ = self.tx.send(Event::Close(self.id));
    }
}

/// Blocking TCP link used by silos.
pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn connect(addr: SocketAddr) -> Result<Self, NetError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(3600)))?;
        Ok(Self { stream })
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>, NetError> {
        read_frame(&mut self.stream)?.ok_or(NetError::Closed)
    }
}

impl<L: Link + ?Sized> Link for Box<L> {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>, NetError> {
        (**self).recv()
    }
}
