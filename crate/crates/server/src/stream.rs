//! Frame streaming over TCP: length-prefixed wire frames, broadcast to every
//! connected client.
//!
//! Each client gets its own bounded queue. A client that falls behind loses
//! the oldest queued frames (monitoring favors freshness) and the loss is
//! counted. Clients may connect or drop at any time; a disconnect is logged
//! and never stops the stream.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use aam_core::replay::schedule_offsets;
use aam_core::wire::{decode_frame, encode_frame, PhasorFrame, WireError, MAX_FRAME_LEN};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("speed must be positive, got {0}")]
    InvalidSpeed(f64),
    #[error("message of {0} bytes exceeds the frame size limit")]
    Oversized(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Playback multiplier; infinity sends as fast as possible.
    pub speed: f64,
    /// Hold the first frame until this many clients are connected.
    pub wait_for_clients: usize,
    /// Per-client queue length, in frames.
    pub capacity: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            speed: 1.0,
            wait_for_clients: 0,
            capacity: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    /// Frames offered to the broadcast.
    pub sent: u64,
    /// Clients that connected during the run.
    pub clients: u64,
    /// Frames dropped from slow client queues, summed over clients.
    pub dropped: u64,
}

/// One length-prefixed message.
pub fn frame_message(frame: &PhasorFrame) -> Result<Vec<u8>, WireError> {
    let payload = encode_frame(frame)?;
    let mut msg = Vec::with_capacity(payload.len() + 4);
    msg.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    msg.extend_from_slice(&payload);
    Ok(msg)
}

pub struct StreamServer {
    listener: TcpListener,
}

impl StreamServer {
    pub async fn bind<A: ToSocketAddrs + std::fmt::Display>(addr: A) -> Result<Self, StreamError> {
        let shown = addr.to_string();
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| StreamError::BindFailure { addr: shown, source })?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Streams `frames` on their timestamps, scaled by `1/speed`, to every
    /// client. Returns once all clients have been sent the last frame.
    pub async fn serve(self, frames: &[PhasorFrame], opts: ServeOptions) -> Result<ServeStats, StreamError> {
        if opts.speed.is_nan() || opts.speed <= 0.0 {
            return Err(StreamError::InvalidSpeed(opts.speed));
        }
        let messages = frames
            .iter()
            .map(|f| frame_message(f).map(Arc::<[u8]>::from))
            .collect::<Result<Vec<_>, _>>()?;
        let offsets = schedule_offsets(frames, opts.speed);

        let (tx, _) = broadcast::channel::<Arc<[u8]>>(opts.capacity.max(1));
        let (count_tx, mut count_rx) = watch::channel(0usize);
        let dropped = Arc::new(AtomicU64::new(0));
        let writers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();

        let accept = {
            let tx = tx.clone();
            let dropped = dropped.clone();
            let writers = writers.clone();
            let listener = self.listener;
            tokio::spawn(async move {
                loop {
                    let (sock, peer) = match listener.accept().await {
                        Ok(c) => c,
                        Err(e) => {
                            tracing::warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    // subscribe before counting so a waiting sender never
                    // races past a fresh client
                    let rx = tx.subscribe();
                    tracing::info!("stream client {peer} connected");
                    let handle = tokio::spawn(write_client(sock, peer, rx, dropped.clone()));
                    writers.lock().unwrap().push(handle);
                    count_tx.send_modify(|c| *c += 1);
                }
            })
        };

        if opts.wait_for_clients > 0 {
            let _ = count_rx.wait_for(|&c| c >= opts.wait_for_clients).await;
        }
        let start = Instant::now();
        let mut sent = 0;
        for (msg, off) in messages.into_iter().zip(offsets) {
            if off > Duration::ZERO {
                tokio::time::sleep_until(start + off).await;
            }
            // nobody listening is fine: the stream is live
            let _ = tx.send(msg);
            sent += 1;
        }
        drop(tx);
        accept.abort();
        let _ = accept.await;
        let clients = *count_rx.borrow() as u64;
        let handles = std::mem::take(&mut *writers.lock().unwrap());
        for h in handles {
            let _ = h.await;
        }
        Ok(ServeStats {
            sent,
            clients,
            dropped: dropped.load(Ordering::Relaxed),
        })
    }
}

async fn write_client(
    mut sock: TcpStream,
    peer: SocketAddr,
    mut rx: broadcast::Receiver<Arc<[u8]>>,
    dropped: Arc<AtomicU64>,
) {
    let _ = sock.set_nodelay(true);
    loop {
        match rx.recv().await {
            Ok(msg) => {
                if let Err(e) = sock.write_all(&msg).await {
                    tracing::info!("stream client {peer} disconnected: {e}");
                    return;
                }
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                tracing::warn!("stream client {peer} lagging, dropped {n} frames");
                dropped.fetch_add(n, Ordering::Relaxed);
            }
            Err(broadcast::error::RecvError::Closed) => break,
        }
    }
    let _ = sock.shutdown().await;
}

/// Convenience wrapper: bind, then [`StreamServer::serve`].
pub async fn serve_stream(
    frames: &[PhasorFrame],
    endpoint: &str,
    opts: ServeOptions,
) -> Result<ServeStats, StreamError> {
    StreamServer::bind(endpoint).await?.serve(frames, opts).await
}

/// Reads frames from a stream server. Messages that fail to decode are
/// skipped and counted.
pub struct FrameReceiver {
    inner: BufReader<TcpStream>,
    pub rejected: u64,
    pub last_error: Option<WireError>,
}

impl FrameReceiver {
    pub async fn connect<A: ToSocketAddrs>(addr: A) -> std::io::Result<Self> {
        let sock = TcpStream::connect(addr).await?;
        let _ = sock.set_nodelay(true);
        Ok(Self::new(sock))
    }

    pub fn new(sock: TcpStream) -> Self {
        Self {
            inner: BufReader::new(sock),
            rejected: 0,
            last_error: None,
        }
    }

    /// Next good frame, or `None` when the server closes the stream.
    pub async fn next_frame(&mut self) -> Result<Option<PhasorFrame>, StreamError> {
        loop {
            let mut len = [0u8; 4];
            match self.inner.read_exact(&mut len).await {
                Ok(_) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
                Err(e) => return Err(e.into()),
            }
            let len = u32::from_le_bytes(len) as usize;
            if len > MAX_FRAME_LEN {
                // the length itself is garbage, so framing is lost
                return Err(StreamError::Oversized(len));
            }
            let mut buf = vec![0u8; len];
            self.inner.read_exact(&mut buf).await?;
            match decode_frame(&buf) {
                Ok(f) => return Ok(Some(f)),
                Err(e) => {
                    tracing::debug!("rejected frame: {e}");
                    self.rejected += 1;
                    self.last_error = Some(e);
                }
            }
        }
    }
}

/// Accepts `host:port`, `:port` or a bare port.
pub fn parse_endpoint(s: &str) -> String {
    if let Some(port) = s.strip_prefix(':') {
        format!("0.0.0.0:{port}")
    } else if s.parse::<u16>().is_ok() {
        format!("0.0.0.0:{s}")
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aam_core::wire::{ChannelSample, Quality};

    fn frames(n: u64) -> Vec<PhasorFrame> {
        (0..n)
            .map(|k| PhasorFrame {
                stream_id: 3,
                timestamp_us: k * 33_333,
                channels: vec![ChannelSample {
                    angle: k as f64 * 0.25 - 7.0,
                    quality: Quality::Good,
                }],
            })
            .collect()
    }

    #[tokio::test]
    async fn loopback_roundtrip() {
        let server = StreamServer::bind("127.0.0.1:0").await.unwrap();
        let addr = server.local_addr();
        let sent = frames(200);
        let opts = ServeOptions {
            speed: f64::INFINITY,
            wait_for_clients: 1,
            capacity: 256,
        };
        let data = sent.clone();
        let task = tokio::spawn(async move { server.serve(&data, opts).await });
        let mut rx = FrameReceiver::connect(addr).await.unwrap();
        let mut got = Vec::new();
        while let Some(f) = rx.next_frame().await.unwrap() {
            got.push(f);
        }
        let stats = task.await.unwrap().unwrap();
        assert_eq!(got, sent);
        assert_eq!(stats.sent, 200);
        assert_eq!(stats.clients, 1);
        assert_eq!(rx.rejected, 0);
    }

    #[tokio::test]
    async fn corrupted_messages_are_counted() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let good = frames(3);
        let send = good.clone();
        tokio::spawn(async move {
            let (mut sock, _) = listener.accept().await.unwrap();
            for (i, f) in send.iter().enumerate() {
                let mut msg = frame_message(f).unwrap();
                if i == 1 {
                    let last = msg.len() - 1;
                    msg[last] ^= 0x40;
                }
                sock.write_all(&msg).await.unwrap();
            }
        });
        let mut rx = FrameReceiver::connect(addr).await.unwrap();
        let mut got = Vec::new();
        while let Some(f) = rx.next_frame().await.unwrap() {
            got.push(f);
        }
        assert_eq!(got, vec![good[0].clone(), good[2].clone()]);
        assert_eq!(rx.rejected, 1);
        assert_eq!(rx.last_error, Some(WireError::CrcMismatch));
    }

    #[tokio::test]
    async fn clients_see_identical_sequences() {
        let server = StreamServer::bind("127.0.0.1:0").await.unwrap();
        let addr = server.local_addr();
        let data = frames(500);
        let opts = ServeOptions {
            speed: f64::INFINITY,
            wait_for_clients: 2,
            capacity: 1024,
        };
        let task = tokio::spawn(async move { server.serve(&data, opts).await });
        let read = |addr| async move {
            let mut rx = FrameReceiver::connect(addr).await.unwrap();
            let mut got = Vec::new();
            while let Some(f) = rx.next_frame().await.unwrap() {
                got.push(f);
            }
            got
        };
        let (a, b) = tokio::join!(read(addr), read(addr));
        let stats = task.await.unwrap().unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a, b);
        assert_eq!(stats.clients, 2);
    }

    #[tokio::test]
    async fn disconnecting_client_is_not_fatal() {
        let server = StreamServer::bind("127.0.0.1:0").await.unwrap();
        let addr = server.local_addr();
        let data = frames(30);
        let opts = ServeOptions {
            speed: 100.0,
            wait_for_clients: 2,
            capacity: 64,
        };
        let task = tokio::spawn(async move { server.serve(&data, opts).await });
        let quitter = TcpStream::connect(addr).await.unwrap();
        let mut rx = FrameReceiver::connect(addr).await.unwrap();
        drop(quitter);
        let mut n = 0;
        while rx.next_frame().await.unwrap().is_some() {
            n += 1;
        }
        assert_eq!(n, 30);
        assert_eq!(task.await.unwrap().unwrap().sent, 30);
    }

    #[tokio::test]
    async fn bind_failure_is_reported() {
        let held = StreamServer::bind("127.0.0.1:0").await.unwrap();
        let addr = held.local_addr().to_string();
        assert!(matches!(
            StreamServer::bind(addr.as_str()).await,
            Err(StreamError::BindFailure { .. })
        ));
    }

    #[test]
    fn endpoints() {
        assert_eq!(parse_endpoint(":7733"), "0.0.0.0:7733");
        assert_eq!(parse_endpoint("7733"), "0.0.0.0:7733");
        assert_eq!(parse_endpoint("127.0.0.1:1"), "127.0.0.1:1");
    }
}
