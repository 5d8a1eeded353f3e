//! The wire protocol: length-prefixed canonical-JSON frames carrying
//! request/reply/event messages, correlated by id over full-duplex
//! connections.
//!
//! Two interchangeable transports implement the same semantics: real TCP and
//! an in-process loopback used by the integration suites so a multi-node
//! domain runs deterministically in one test process. Services are written
//! against [`Network`] and cannot tell the difference.
//!
//! Frame layout: 4-byte big-endian unsigned length N, then N bytes of
//! canonical JSON. Frames never interleave within a connection; a connection
//! carries any number of in-flight requests.

use crate::canonical;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;
use thiserror::Error;

/// Frames above this size are rejected on both ends.
pub const MAX_FRAME_SIZE: usize = 64 * 1024 * 1024;

/// Default client-side call timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Request,
    Reply,
    Event,
}

/// A remote failure: stable machine-readable code plus human detail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code}: {detail}")]
pub struct WireError {
    pub code: String,
    pub detail: String,
}

impl WireError {
    pub fn new(code: impl Into<String>, detail: impl Into<String>) -> Self {
        WireError {
            code: code.into(),
            detail: detail.into(),
        }
    }
}

/// One protocol message. Requests and events carry `op` and `args`; replies
/// carry `ok` plus either `args` (the result value) or `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub op: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub args: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Message {
    pub fn request(id: impl Into<String>, op: impl Into<String>, args: Value) -> Self {
        Message {
            id: id.into(),
            kind: MessageKind::Request,
            op: op.into(),
            args,
            ok: None,
            error: None,
        }
    }

    pub fn event(id: impl Into<String>, op: impl Into<String>, args: Value) -> Self {
        Message {
            id: id.into(),
            kind: MessageKind::Event,
            op: op.into(),
            args,
            ok: None,
            error: None,
        }
    }

    pub fn reply_ok(id: impl Into<String>, value: Value) -> Self {
        Message {
            id: id.into(),
            kind: MessageKind::Reply,
            op: String::new(),
            args: value,
            ok: Some(true),
            error: None,
        }
    }

    pub fn reply_err(id: impl Into<String>, error: WireError) -> Self {
        Message {
            id: id.into(),
            kind: MessageKind::Reply,
            op: String::new(),
            args: Value::Null,
            ok: Some(false),
            error: Some(error),
        }
    }
}

#[derive(Debug, Error)]
pub enum RpcError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_SIZE} byte cap")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    MalformedJson(String),
    #[error("stream truncated mid-frame")]
    Truncated,
    #[error("call timed out")]
    Timeout,
    #[error("connection closed")]
    ConnectionClosed,
    #[error("cannot connect to {0}")]
    Connect(String),
    #[error("remote error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RpcError {
    pub fn remote(err: WireError) -> Self {
        RpcError::Remote {
            code: err.code,
            detail: err.detail,
        }
    }

    /// The remote error code, when this failure came from the peer.
    pub fn remote_code(&self) -> Option<&str> {
        match self {
            RpcError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}

/// Encode one message as a length-prefixed frame.
pub fn frame_encode(msg: &Message) -> Result<Vec<u8>, RpcError> {
    let body = canonical::to_bytes(msg).map_err(|e| RpcError::MalformedJson(e.to_string()))?;
    if body.len() > MAX_FRAME_SIZE {
        return Err(RpcError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decode one frame from a stream positioned at a frame boundary.
pub fn frame_decode(stream: &mut impl Read) -> Result<Message, RpcError> {
    let mut len_buf = [0u8; 4];
    read_exact_or_truncated(stream, &mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_SIZE {
        return Err(RpcError::FrameTooLarge(len));
    }
    if len == 0 {
        return Err(RpcError::MalformedJson("empty frame body".into()));
    }
    let mut body = vec![0u8; len];
    read_exact_or_truncated(stream, &mut body)?;
    canonical::from_slice(&body).map_err(|e| RpcError::MalformedJson(e.to_string()))
}

fn read_exact_or_truncated(stream: &mut impl Read, buf: &mut [u8]) -> Result<(), RpcError> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return Err(RpcError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(RpcError::Io(e)),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

type RequestHandler = dyn Fn(Value) -> Result<Value, WireError> + Send + Sync;
type EventHandler = dyn Fn(Value) + Send + Sync;

/// Documentation attached to a registered op, rendered into the protocol
/// reference.
#[derive(Debug, Clone)]
pub struct OpDoc {
    pub args: &'static str,
    pub reply: &'static str,
    pub summary: &'static str,
}

pub struct OpEntry {
    pub op: String,
    pub doc: OpDoc,
    pub one_way: bool,
}

/// Routes incoming requests and events to registered handlers by op name.
/// Op names are namespaced by module (`domain.`, `node.`, `assembly.`).
#[derive(Default)]
pub struct Dispatcher {
    handlers: BTreeMap<String, (Arc<RequestHandler>, OpDoc)>,
    event_handlers: BTreeMap<String, (Arc<EventHandler>, OpDoc)>,
}

impl Dispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, op: &str, doc: OpDoc, handler: F)
    where
        F: Fn(Value) -> Result<Value, WireError> + Send + Sync + 'static,
    {
        assert!(op.contains('.'), "op {op:?} must be module-namespaced");
        let prev = self
            .handlers
            .insert(op.to_string(), (Arc::new(handler), doc));
        assert!(prev.is_none(), "op {op:?} registered twice");
    }

    pub fn register_event<F>(&mut self, op: &str, doc: OpDoc, handler: F)
    where
        F: Fn(Value) + Send + Sync + 'static,
    {
        assert!(op.contains('.'), "op {op:?} must be module-namespaced");
        let prev = self
            .event_handlers
            .insert(op.to_string(), (Arc::new(handler), doc));
        assert!(prev.is_none(), "op {op:?} registered twice");
    }

    pub fn dispatch_request(&self, op: &str, args: Value) -> Result<Value, WireError> {
        let (handler, _) = self
            .handlers
            .get(op)
            .ok_or_else(|| WireError::new("unknown_op", format!("no handler for {op:?}")))?;
        let handler = Arc::clone(handler);
        catch_unwind(AssertUnwindSafe(move || handler(args)))
            .unwrap_or_else(|_| Err(WireError::new("internal_error", format!("{op} panicked"))))
    }

    pub fn dispatch_event(&self, op: &str, args: Value) {
        if let Some((handler, _)) = self.event_handlers.get(op) {
            let handler = Arc::clone(handler);
            let _ = catch_unwind(AssertUnwindSafe(move || handler(args)));
        }
    }

    /// Registered ops in sorted order, for the generated protocol reference.
    pub fn op_table(&self) -> Vec<OpEntry> {
        let mut out: Vec<OpEntry> = self
            .handlers
            .iter()
            .map(|(op, (_, doc))| OpEntry {
                op: op.clone(),
                doc: doc.clone(),
                one_way: false,
            })
            .chain(self.event_handlers.iter().map(|(op, (_, doc))| OpEntry {
                op: op.clone(),
                doc: doc.clone(),
                one_way: true,
            }))
            .collect();
        out.sort_by(|a, b| a.op.cmp(&b.op));
        out
    }
}

/// Render the op table of one or more dispatchers as a markdown section.
pub fn render_op_reference(sections: &[(&str, &Dispatcher)]) -> String {
    let mut out = String::new();
    for (title, dispatcher) in sections {
        out.push_str(&format!("### {title}\n\n"));
        out.push_str("| op | kind | args | reply | summary |\n");
        out.push_str("|---|---|---|---|---|\n");
        for entry in dispatcher.op_table() {
            out.push_str(&format!(
                "| `{}` | {} | {} | {} | {} |\n",
                entry.op,
                if entry.one_way { "event" } else { "request" },
                entry.doc.args,
                if entry.one_way { "—" } else { entry.doc.reply },
                entry.doc.summary,
            ));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

trait FrameSink: Send + Sync {
    fn send(&self, msg: Message) -> Result<(), RpcError>;
}

struct ClientInner {
    sink: Box<dyn FrameSink>,
    pending: Mutex<HashMap<String, mpsc::SyncSender<Result<Value, RpcError>>>>,
    /// Ids whose single allowed reply has been consumed. A second reply for
    /// any of these is a protocol violation.
    completed: Mutex<HashSet<String>>,
    /// Ids abandoned by a timeout; their one reply may still arrive late.
    abandoned: Mutex<HashSet<String>>,
    violations: AtomicUsize,
    next_id: AtomicU64,
    closed: AtomicBool,
}

/// Client end of a connection. Cheap to clone; all clones share the
/// underlying connection and id space. Any number of calls may be in flight
/// concurrently; replies are correlated by message id.
#[derive(Clone)]
pub struct Client {
    inner: Arc<ClientInner>,
}

impl Client {
    fn new(sink: Box<dyn FrameSink>) -> Self {
        Client {
            inner: Arc::new(ClientInner {
                sink,
                pending: Mutex::new(HashMap::new()),
                completed: Mutex::new(HashSet::new()),
                abandoned: Mutex::new(HashSet::new()),
                violations: AtomicUsize::new(0),
                next_id: AtomicU64::new(1),
                closed: AtomicBool::new(false),
            }),
        }
    }

    fn fresh_id(&self) -> String {
        format!("r{}", self.inner.next_id.fetch_add(1, Ordering::Relaxed))
    }

    /// Invoke `op` and wait for the correlated reply. A timeout abandons the
    /// request without corrupting the connection.
    pub fn call_with_timeout(
        &self,
        op: &str,
        args: Value,
        timeout: Duration,
    ) -> Result<Value, RpcError> {
        if self.inner.closed.load(Ordering::Acquire) {
            return Err(RpcError::ConnectionClosed);
        }
        let id = self.fresh_id();
        let (tx, rx) = mpsc::sync_channel(1);
        self.inner.pending.lock().unwrap().insert(id.clone(), tx);
        let msg = Message::request(id.clone(), op, args);
        if let Err(e) = self.inner.sink.send(msg) {
            self.inner.pending.lock().unwrap().remove(&id);
            return Err(e);
        }
        match rx.recv_timeout(timeout) {
            Ok(result) => result,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.inner.pending.lock().unwrap().remove(&id);
                // The reply may still arrive once; it is late, not duplicate.
                self.inner.abandoned.lock().unwrap().insert(id);
                Err(RpcError::Timeout)
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(RpcError::ConnectionClosed),
        }
    }

    pub fn call(&self, op: &str, args: Value) -> Result<Value, RpcError> {
        self.call_with_timeout(op, args, DEFAULT_TIMEOUT)
    }

    /// Fire-and-forget event message.
    pub fn notify(&self, op: &str, args: Value) -> Result<(), RpcError> {
        if self.inner.closed.load(Ordering::Acquire) {
            return Err(RpcError::ConnectionClosed);
        }
        let msg = Message::event(self.fresh_id(), op, args);
        self.inner.sink.send(msg)
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::Acquire)
    }

    /// Count of protocol violations observed (duplicate replies). Asserted
    /// zero by the test suites.
    pub fn protocol_violations(&self) -> usize {
        self.inner.violations.load(Ordering::Relaxed)
    }

    fn on_incoming(&self, msg: Message) {
        if msg.kind != MessageKind::Reply {
            return;
        }
        let sender = self.inner.pending.lock().unwrap().remove(&msg.id);
        match sender {
            Some(tx) => {
                self.inner.completed.lock().unwrap().insert(msg.id.clone());
                let result = if msg.ok == Some(true) {
                    Ok(msg.args)
                } else {
                    Err(RpcError::remote(msg.error.unwrap_or_else(|| {
                        WireError::new("malformed_reply", "failed reply without error")
                    })))
                };
                let _ = tx.send(result);
            }
            None => {
                if self.inner.abandoned.lock().unwrap().remove(&msg.id) {
                    // Late first reply to a timed-out call.
                    self.inner.completed.lock().unwrap().insert(msg.id);
                } else {
                    // Duplicate reply, or a reply to an id never requested.
                    self.inner.violations.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    fn on_closed(&self) {
        self.inner.closed.store(true, Ordering::Release);
        let pending: Vec<_> = self.inner.pending.lock().unwrap().drain().collect();
        for (_, tx) in pending {
            let _ = tx.send(Err(RpcError::ConnectionClosed));
        }
    }
}

// ---------------------------------------------------------------------------
// Server plumbing shared by both transports
// ---------------------------------------------------------------------------

/// Reply path handed to per-request worker threads.
trait ReplySink: Send + Sync {
    fn send(&self, msg: Message);
}

fn handle_incoming(msg: Message, dispatcher: &Arc<Dispatcher>, replies: &Arc<dyn ReplySink>) {
    match msg.kind {
        MessageKind::Request => {
            let dispatcher = Arc::clone(dispatcher);
            let replies = Arc::clone(replies);
            // Requests run on their own thread so a handler that calls back
            // into other nodes cannot stall the connection. Events below are
            // handled inline to keep per-connection FIFO delivery.
            thread::spawn(move || {
                let reply = match dispatcher.dispatch_request(&msg.op, msg.args) {
                    Ok(value) => Message::reply_ok(msg.id, value),
                    Err(err) => Message::reply_err(msg.id, err),
                };
                replies.send(reply);
            });
        }
        MessageKind::Event => dispatcher.dispatch_event(&msg.op, msg.args),
        MessageKind::Reply => {}
    }
}

/// Handle on a running service. Shutting it down (or dropping it) stops the
/// accept loop; established connections wind down as their peers disconnect.
#[derive(Debug)]
pub struct ServerHandle {
    addr: String,
    shutdown: Arc<AtomicBool>,
}

impl ServerHandle {
    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Address resolution plus connection establishment, the seam that makes
/// loopback and TCP interchangeable underneath the services.
pub trait Network: Send + Sync {
    fn connect(&self, addr: &str) -> Result<Client, RpcError>;
    fn listen(&self, addr: &str, dispatcher: Arc<Dispatcher>) -> Result<ServerHandle, RpcError>;
}

// ---------------------------------------------------------------------------
// Loopback transport
// ---------------------------------------------------------------------------

struct ChannelSink {
    tx: Mutex<mpsc::Sender<Message>>,
}

impl FrameSink for ChannelSink {
    fn send(&self, msg: Message) -> Result<(), RpcError> {
        self.tx
            .lock()
            .unwrap()
            .send(msg)
            .map_err(|_| RpcError::ConnectionClosed)
    }
}

struct ChannelReplySink {
    tx: Mutex<mpsc::Sender<Message>>,
}

impl ReplySink for ChannelReplySink {
    fn send(&self, msg: Message) {
        let _ = self.tx.lock().unwrap().send(msg);
    }
}

/// Server end of an in-process connection, waiting for a dispatcher.
pub struct LoopbackServerEnd {
    incoming: mpsc::Receiver<Message>,
    replies: mpsc::Sender<Message>,
}

impl LoopbackServerEnd {
    /// Start serving this connection with the given dispatcher. Returns once
    /// attached; the drain loop runs on its own thread until the client end
    /// is dropped or `shutdown` is set.
    pub fn attach(self, dispatcher: Arc<Dispatcher>, shutdown: Arc<AtomicBool>) {
        let replies: Arc<dyn ReplySink> = Arc::new(ChannelReplySink {
            tx: Mutex::new(self.replies),
        });
        let incoming = self.incoming;
        thread::spawn(move || {
            while let Ok(msg) = incoming.recv() {
                if shutdown.load(Ordering::Acquire) {
                    break;
                }
                handle_incoming(msg, &dispatcher, &replies);
            }
        });
    }
}

/// Create one in-process connection: a client plus the matching server end.
/// Delivery is FIFO per direction and carries the same message semantics as
/// TCP.
pub fn loopback_pair() -> (Client, LoopbackServerEnd) {
    let (client_tx, server_rx) = mpsc::channel::<Message>();
    let (server_tx, client_rx) = mpsc::channel::<Message>();
    let client = Client::new(Box::new(ChannelSink {
        tx: Mutex::new(client_tx),
    }));
    let reader = client.clone();
    thread::spawn(move || {
        while let Ok(msg) = client_rx.recv() {
            reader.on_incoming(msg);
        }
        reader.on_closed();
    });
    (
        client,
        LoopbackServerEnd {
            incoming: server_rx,
            replies: server_tx,
        },
    )
}

struct LoopbackListener {
    dispatcher: Arc<Dispatcher>,
    shutdown: Arc<AtomicBool>,
}

/// An in-process network: listeners are registered under plain string
/// addresses and connections are channel pairs.
#[derive(Default)]
pub struct LoopbackNetwork {
    listeners: Mutex<HashMap<String, LoopbackListener>>,
}

impl LoopbackNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }
}

impl Network for LoopbackNetwork {
    fn connect(&self, addr: &str) -> Result<Client, RpcError> {
        let listeners = self.listeners.lock().unwrap();
        let listener = listeners
            .get(addr)
            .filter(|l| !l.shutdown.load(Ordering::Acquire))
            .ok_or_else(|| RpcError::Connect(addr.to_string()))?;
        let (client, server_end) = loopback_pair();
        server_end.attach(
            Arc::clone(&listener.dispatcher),
            Arc::clone(&listener.shutdown),
        );
        Ok(client)
    }

    fn listen(&self, addr: &str, dispatcher: Arc<Dispatcher>) -> Result<ServerHandle, RpcError> {
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut listeners = self.listeners.lock().unwrap();
        if let Some(existing) = listeners.get(addr) {
            if !existing.shutdown.load(Ordering::Acquire) {
                return Err(RpcError::Connect(format!("{addr} already bound")));
            }
        }
        listeners.insert(
            addr.to_string(),
            LoopbackListener {
                dispatcher,
                shutdown: Arc::clone(&shutdown),
            },
        );
        Ok(ServerHandle {
            addr: addr.to_string(),
            shutdown,
        })
    }
}

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

struct TcpSink {
    stream: Mutex<TcpStream>,
}

impl FrameSink for TcpSink {
    fn send(&self, msg: Message) -> Result<(), RpcError> {
        let bytes = frame_encode(&msg)?;
        let mut stream = self.stream.lock().unwrap();
        stream.write_all(&bytes)?;
        Ok(())
    }
}

struct TcpReplySink {
    stream: Mutex<TcpStream>,
}

impl ReplySink for TcpReplySink {
    fn send(&self, msg: Message) {
        if let Ok(bytes) = frame_encode(&msg) {
            let mut stream = self.stream.lock().unwrap();
            let _ = stream.write_all(&bytes);
        }
    }
}

/// Real sockets on `host:port` addresses.
#[derive(Default)]
pub struct TcpNetwork;

impl TcpNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(TcpNetwork)
    }
}

impl Network for TcpNetwork {
    fn connect(&self, addr: &str) -> Result<Client, RpcError> {
        let stream =
            TcpStream::connect(addr).map_err(|e| RpcError::Connect(format!("{addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let mut read_half = stream
            .try_clone()
            .map_err(|e| RpcError::Connect(format!("{addr}: {e}")))?;
        let client = Client::new(Box::new(TcpSink {
            stream: Mutex::new(stream),
        }));
        let reader = client.clone();
        thread::spawn(move || {
            loop {
                match frame_decode(&mut read_half) {
                    Ok(msg) => reader.on_incoming(msg),
                    Err(_) => break,
                }
            }
            reader.on_closed();
        });
        Ok(client)
    }

    fn listen(&self, addr: &str, dispatcher: Arc<Dispatcher>) -> Result<ServerHandle, RpcError> {
        let listener =
            TcpListener::bind(addr).map_err(|e| RpcError::Connect(format!("{addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| RpcError::Connect(format!("{addr}: {e}")))?
            .to_string();
        listener.set_nonblocking(true).ok();
        let shutdown = Arc::new(AtomicBool::new(false));
        let accept_shutdown = Arc::clone(&shutdown);
        thread::spawn(move || loop {
            if accept_shutdown.load(Ordering::Acquire) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nodelay(true).ok();
                    spawn_tcp_connection(stream, Arc::clone(&dispatcher), Arc::clone(&accept_shutdown));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
        });
        Ok(ServerHandle {
            addr: local,
            shutdown,
        })
    }
}

fn spawn_tcp_connection(stream: TcpStream, dispatcher: Arc<Dispatcher>, shutdown: Arc<AtomicBool>) {
    let write_half = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut read_half = stream;
    // Polling read timeout so the reader notices shutdown.
    read_half
        .set_read_timeout(Some(Duration::from_millis(50)))
        .ok();
    let replies: Arc<dyn ReplySink> = Arc::new(TcpReplySink {
        stream: Mutex::new(write_half),
    });
    thread::spawn(move || loop {
        if shutdown.load(Ordering::Acquire) {
            break;
        }
        match frame_decode(&mut read_half) {
            Ok(msg) => handle_incoming(msg, &dispatcher, &replies),
            Err(RpcError::Io(e))
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => break,
        }
    });
}
