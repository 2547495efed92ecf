use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use super::bodies::ErrorBody;
use super::frame::{decode_payload, encode_message, Message, MessageKind, WireError, MAX_FRAME_BYTES};

/// Per-principal byte counters. Every frame adds its payload length plus
/// the 4-byte prefix.
#[derive(Debug, Default)]
pub struct ByteCounters {
    sent: AtomicU64,
    received: AtomicU64,
    heartbeat_sent: AtomicU64,
    heartbeat_received: AtomicU64,
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
}

impl ByteCounters {
    pub fn new() -> Arc<Self> {
        Arc::default()
    }

    pub fn bytes_sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    pub fn bytes_received(&self) -> u64 {
        self.received.load(Ordering::SeqCst)
    }

    /// Heartbeat share of the totals; heartbeat counts depend on wall time.
    pub fn heartbeat_bytes(&self) -> (u64, u64) {
        (self.heartbeat_sent.load(Ordering::SeqCst), self.heartbeat_received.load(Ordering::SeqCst))
    }

    pub fn frames(&self) -> (u64, u64) {
        (self.frames_sent.load(Ordering::SeqCst), self.frames_received.load(Ordering::SeqCst))
    }

    fn record(&self, outgoing: bool, len: u64, heartbeat: bool) {
        let (bytes, hb, frames) = if outgoing {
            (&self.sent, &self.heartbeat_sent, &self.frames_sent)
        } else {
            (&self.received, &self.heartbeat_received, &self.frames_received)
        };
        bytes.fetch_add(len, Ordering::SeqCst);
        frames.fetch_add(1, Ordering::SeqCst);
        if heartbeat {
            hb.fetch_add(len, Ordering::SeqCst);
        }
    }
}

/// Observes every frame crossing a channel, in either direction. A
/// capturing tap keeps the raw bytes; a scanning tap only counts frames
/// containing each needle, for runs too large to keep in memory.
#[derive(Debug, Clone)]
pub struct TrafficTap(Arc<Mutex<TapState>>);

impl Default for TrafficTap {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Default)]
struct TapState {
    capture: Option<Vec<u8>>,
    needles: Vec<Vec<u8>>,
    hits: Vec<u64>,
    len: u64,
}

impl TrafficTap {
    pub fn new() -> Self {
        TrafficTap(Arc::new(Mutex::new(TapState { capture: Some(Vec::new()), ..Default::default() })))
    }

    pub fn scanning(needles: Vec<Vec<u8>>) -> Self {
        let hits = vec![0; needles.len()];
        TrafficTap(Arc::new(Mutex::new(TapState { capture: None, needles, hits, len: 0 })))
    }

    fn append(&self, frame: &[u8]) {
        let mut st = self.0.lock().unwrap();
        st.len += frame.len() as u64;
        if let Some(c) = st.capture.as_mut() {
            c.extend_from_slice(frame);
        }
        let found: Vec<bool> = st.needles.iter().map(|n| memchr::memmem::find(frame, n).is_some()).collect();
        for (h, f) in st.hits.iter_mut().zip(found) {
            *h += f as u64;
        }
    }

    /// Captured bytes; empty for a scanning tap.
    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().capture.clone().unwrap_or_default()
    }

    /// Bytes observed, captured or not.
    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Searches the capture. Always false for a scanning tap.
    pub fn contains(&self, needle: &[u8]) -> bool {
        let st = self.0.lock().unwrap();
        match &st.capture {
            Some(c) => !needle.is_empty() && memchr::memmem::find(c, needle).is_some(),
            None => false,
        }
    }

    /// Frames seen containing each needle of a scanning tap.
    pub fn hits(&self) -> Vec<u64> {
        self.0.lock().unwrap().hits.clone()
    }
}

#[derive(Debug, Clone)]
pub struct NetOptions {
    /// Connect timeout, and the longest silence tolerated while a request
    /// is pending.
    pub timeout: Duration,
    pub counters: Vec<Arc<ByteCounters>>,
    pub taps: Vec<TrafficTap>,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions { timeout: Duration::from_secs(10), counters: Vec::new(), taps: Vec::new() }
    }
}

impl NetOptions {
    pub fn with_counters(mut self, c: Arc<ByteCounters>) -> Self {
        self.counters.push(c);
        self
    }

    pub fn with_tap(mut self, t: TrafficTap) -> Self {
        self.taps.push(t);
        self
    }
}

#[derive(Debug, Clone)]
struct Accounting {
    own: Arc<ByteCounters>,
    counters: Vec<Arc<ByteCounters>>,
    taps: Vec<TrafficTap>,
}

impl Accounting {
    fn new(opts: &NetOptions) -> Self {
        Accounting { own: ByteCounters::new(), counters: opts.counters.clone(), taps: opts.taps.clone() }
    }

    fn frame(&self, outgoing: bool, frame: &[u8], kind: MessageKind) {
        let hb = kind == MessageKind::Heartbeat;
        self.own.record(outgoing, frame.len() as u64, hb);
        for c in &self.counters {
            c.record(outgoing, frame.len() as u64, hb);
        }
        for t in &self.taps {
            t.append(frame);
        }
    }
}

/// Reading half of a framed connection.
pub struct FrameSource {
    inner: BufReader<OwnedReadHalf>,
    acct: Accounting,
}

impl FrameSource {
    /// Next message, or `Ok(None)` on a clean close between frames.
    pub async fn next(&mut self) -> Result<Option<Message>, WireError> {
        let mut prefix = [0u8; 4];
        match self.inner.read_exact(&mut prefix).await {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) if is_reset(&e) => return Ok(None),
            Err(e) => return Err(WireError::Io(e.to_string())),
        }
        let len = u32::from_be_bytes(prefix) as usize;
        if len > MAX_FRAME_BYTES {
            return Err(WireError::Frame(format!("declared length {len} exceeds the 16 MiB limit")));
        }
        let mut frame = vec![0u8; 4 + len];
        frame[..4].copy_from_slice(&prefix);
        self.inner.read_exact(&mut frame[4..]).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => WireError::Frame("connection closed mid-frame".into()),
            _ => WireError::Io(e.to_string()),
        })?;
        let m = decode_payload(&frame[4..])?;
        self.acct.frame(false, &frame, m.kind);
        Ok(Some(m))
    }

    pub fn counters(&self) -> Arc<ByteCounters> {
        self.acct.own.clone()
    }
}

fn is_reset(e: &std::io::Error) -> bool {
    matches!(e.kind(), std::io::ErrorKind::ConnectionReset | std::io::ErrorKind::ConnectionAborted)
}

/// Writing half of a framed connection.
pub struct FrameSink {
    inner: OwnedWriteHalf,
    acct: Accounting,
}

impl FrameSink {
    pub async fn send(&mut self, m: &Message) -> Result<(), WireError> {
        let frame = encode_message(m)?;
        self.inner.write_all(&frame).await.map_err(|e| {
            if is_reset(&e) || e.kind() == std::io::ErrorKind::BrokenPipe {
                WireError::ChannelClosed
            } else {
                WireError::Io(e.to_string())
            }
        })?;
        self.acct.frame(true, &frame, m.kind);
        Ok(())
    }

    pub async fn reply(&mut self, kind: MessageKind, seq: u64, body: impl Serialize) -> Result<(), WireError> {
        self.send(&Message::new(kind, seq, body)).await
    }

    pub async fn reply_error(&mut self, seq: u64, err: ErrorBody) -> Result<(), WireError> {
        self.send(&Message::new(MessageKind::Error, seq, err)).await
    }

    pub async fn shutdown(&mut self) {
        let _ = self.inner.shutdown().await;
    }
}

/// Writer shared between a request handler and its heartbeat task.
pub type SharedSink = Arc<tokio::sync::Mutex<FrameSink>>;

pub fn split_stream(stream: TcpStream, opts: &NetOptions) -> (FrameSource, FrameSink) {
    let _ = stream.set_nodelay(true);
    let acct = Accounting::new(opts);
    let (r, w) = stream.into_split();
    (FrameSource { inner: BufReader::new(r), acct: acct.clone() }, FrameSink { inner: w, acct })
}

/// Client end of an ordered, reliable duplex channel.
pub struct Channel {
    source: FrameSource,
    sink: FrameSink,
    next_seq: u64,
    timeout: Duration,
    peer: SocketAddr,
}

pub async fn open_channel(addr: &str, opts: &NetOptions) -> Result<Channel, WireError> {
    let stream = tokio::time::timeout(opts.timeout, TcpStream::connect(addr))
        .await
        .map_err(|_| WireError::Timeout)?
        .map_err(|e| WireError::Connect(format!("{addr}: {e}")))?;
    let peer = stream.peer_addr().map_err(|e| WireError::Connect(e.to_string()))?;
    let (source, sink) = split_stream(stream, opts);
    Ok(Channel { source, sink, next_seq: 1, timeout: opts.timeout, peer })
}

impl Channel {
    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Counters for this channel alone.
    pub fn counters(&self) -> Arc<ByteCounters> {
        self.source.counters()
    }

    /// Sends a message that expects no reply. Returns its seq.
    pub async fn send(&mut self, kind: MessageKind, body: impl Serialize) -> Result<u64, WireError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.sink.send(&Message::new(kind, seq, body)).await?;
        Ok(seq)
    }

    /// Sends a request and waits for its terminal reply, handing every
    /// interleaved heartbeat to `on_heartbeat`. An ERROR reply becomes
    /// [`WireError::Remote`].
    pub async fn request<F>(&mut self, kind: MessageKind, body: impl Serialize, mut on_heartbeat: F) -> Result<Message, WireError>
    where
        F: FnMut(&Message),
    {
        let seq = self.send(kind, body).await?;
        loop {
            let next = tokio::time::timeout(self.timeout, self.source.next()).await.map_err(|_| WireError::Timeout)?;
            let m = match next? {
                Some(m) => m,
                None => return Err(WireError::ChannelClosed),
            };
            if m.seq != seq {
                continue;
            }
            match m.kind {
                MessageKind::Heartbeat => on_heartbeat(&m),
                MessageKind::Error => {
                    let e: ErrorBody = m.parse_body()?;
                    return Err(WireError::Remote { code: e.code, message: e.message, step: e.step });
                }
                k if k.is_terminal() => return Ok(m),
                k => return Err(WireError::UnexpectedReply(k)),
            }
        }
    }

    /// Request without heartbeat handling.
    pub async fn call(&mut self, kind: MessageKind, body: impl Serialize) -> Result<Message, WireError> {
        self.request(kind, body, |_| {}).await
    }

    pub async fn close(mut self) {
        self.sink.shutdown().await;
        // Drain until the peer closes so both ends account for every frame.
        while let Ok(Ok(Some(_))) = tokio::time::timeout(self.timeout, self.source.next()).await {}
    }
}
