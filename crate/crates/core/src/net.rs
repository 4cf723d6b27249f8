//! Framed stop-and-wait transfer over TCP, a token-bucket throttle for
//! reproducible bandwidth, and the loopback latency benchmark.
//!
//! ```text
//! frame: "AEF1" kind:u8 length:u32 (big-endian) payload[length]
//! ```
//!
//! Every data frame is answered by an ack frame whose 8-byte payload is the
//! big-endian sequence number of the acknowledged frame. Both ends count data
//! frames per connection starting at 0, so the sender can verify the echo
//! without a tag field in the data frame itself.

use std::fmt;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::codec::{self, LatentMode};
use crate::data::tensor_to_rgb8;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"AEF1";
pub const FRAME_HEADER_LEN: usize = 9;
pub const MAX_PAYLOAD: usize = 256 << 20;
pub const ACK_PAYLOAD_LEN: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const BURST_BYTES: usize = 64 << 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Raw = 1,
    Latent = 2,
    Ack = 3,
}

impl FrameKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(FrameKind::Raw),
            2 => Some(FrameKind::Latent),
            3 => Some(FrameKind::Ack),
            _ => None,
        }
    }
}

fn read_err(e: io::Error, timeout: Option<Duration>, what: &str) -> Error {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::Timeout(timeout.unwrap_or_default()),
        ErrorKind::UnexpectedEof => Error::Framing(format!("connection closed inside {what}")),
        _ => Error::Transfer(format!("reading {what}: {e}")),
    }
}

/// Writes one frame. Oversize payloads are refused before anything is sent.
pub fn write_frame<W: Write>(w: &mut W, kind: FrameKind, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "payload of {} bytes exceeds the {MAX_PAYLOAD}-byte cap",
            payload.len()
        )));
    }
    let mut header = [0u8; FRAME_HEADER_LEN];
    header[..4].copy_from_slice(FRAME_MAGIC);
    header[4] = kind as u8;
    header[5..].copy_from_slice(&(payload.len() as u32).to_be_bytes());
    let io = |e: io::Error| Error::Transfer(format!("writing frame: {e}"));
    w.write_all(&header).map_err(io)?;
    w.write_all(payload).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub fn read_frame<R: Read>(r: &mut R, timeout: Option<Duration>) -> Result<Option<(FrameKind, Vec<u8>)>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Framing(format!("connection closed after {got} header bytes"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(read_err(e, timeout, "frame header")),
        }
    }
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Framing(format!("bad frame magic {:?}", &header[..4])));
    }
    let kind = FrameKind::from_byte(header[4])
        .ok_or_else(|| Error::Protocol(format!("unknown frame kind {}", header[4])))?;
    let len = u32::from_be_bytes(header[5..].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("declared payload {len} exceeds the {MAX_PAYLOAD}-byte cap")));
    }
    let mut payload = vec![0u8; len];
    let mut got = 0;
    while got < len {
        match r.read(&mut payload[got..]) {
            Ok(0) => {
                return Err(Error::Framing(format!(
                    "length field says {len} bytes, connection closed after {got}"
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(read_err(e, timeout, "frame payload")),
        }
    }
    Ok(Some((kind, payload)))
}

/// Token bucket that starts empty, so a transfer is paced from its first byte.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_sec: f64) -> Self {
        TokenBucket {
            rate: rate_bytes_per_sec,
            burst: BURST_BYTES as f64,
            tokens: 0.0,
            last: Instant::now(),
        }
    }

    pub fn is_unlimited(&self) -> bool {
        self.rate.is_infinite()
    }

    pub fn reset(&mut self) {
        self.tokens = 0.0;
        self.last = Instant::now();
    }

    /// Blocks until `n ≤ burst` bytes may be sent.
    pub fn acquire(&mut self, n: usize) {
        if self.is_unlimited() {
            return;
        }
        let n = n as f64;
        loop {
            let now = Instant::now();
            self.tokens = (self.tokens + self.rate * (now - self.last).as_secs_f64()).min(self.burst);
            self.last = now;
            if self.tokens >= n {
                self.tokens -= n;
                return;
            }
            thread::sleep(Duration::from_secs_f64((n - self.tokens) / self.rate));
        }
    }
}

/// Writer paced by a [`TokenBucket`]; writes go out in chunks of at most the burst size.
pub struct ThrottledWriter<W> {
    inner: W,
    bucket: TokenBucket,
}

impl<W: Write> ThrottledWriter<W> {
    pub fn new(inner: W, bucket: TokenBucket) -> Self {
        ThrottledWriter { inner, bucket }
    }

    pub fn bucket_mut(&mut self) -> &mut TokenBucket {
        &mut self.bucket
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    /// The unpaced writer underneath.
    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for ThrottledWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.bucket.is_unlimited() {
            return self.inner.write(buf);
        }
        let n = buf.len().min(BURST_BYTES);
        self.bucket.acquire(n);
        self.inner.write_all(&buf[..n])?;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Wraps a writer in a token-bucket link; an infinite rate is a passthrough.
pub fn throttled_link<W: Write>(inner: W, rate_bytes_per_sec: f64) -> Result<ThrottledWriter<W>> {
    if rate_bytes_per_sec.is_nan() || rate_bytes_per_sec <= 0.0 {
        return Err(Error::Config(format!("link rate must be positive, got {rate_bytes_per_sec}")));
    }
    Ok(ThrottledWriter::new(inner, TokenBucket::new(rate_bytes_per_sec)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferTiming {
    pub payload_bytes: usize,
    pub send_start: Instant,
    pub ack_received: Instant,
    /// Receiver time between finishing the payload read and writing the ack.
    pub ack_processing: Duration,
}

impl TransferTiming {
    pub fn round_trip(&self) -> Duration {
        self.ack_received - self.send_start
    }

    pub fn one_way_latency(&self) -> Duration {
        self.round_trip().saturating_sub(self.ack_processing) / 2
    }

    pub const CSV_HEADER: &'static str = "payload_bytes,rtt_s,ack_processing_s,one_way_latency_s";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.payload_bytes,
            self.round_trip().as_secs_f64(),
            self.ack_processing.as_secs_f64(),
            self.one_way_latency().as_secs_f64()
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinkOptions {
    pub timeout: Duration,
    /// Bytes per second for outgoing data; `f64::INFINITY` disables pacing.
    pub rate_bytes_per_sec: f64,
}

impl Default for LinkOptions {
    fn default() -> Self {
        LinkOptions {
            timeout: DEFAULT_TIMEOUT,
            rate_bytes_per_sec: f64::INFINITY,
        }
    }
}

/// One end of a framed connection.
pub struct Connection {
    reader: TcpStream,
    writer: ThrottledWriter<TcpStream>,
    timeout: Duration,
    sent: u64,
    received: u64,
    last_ack_processing: Duration,
}

impl Connection {
    pub fn new(stream: TcpStream, opts: LinkOptions) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(opts.timeout))?;
        let writer = throttled_link(stream.try_clone()?, opts.rate_bytes_per_sec)?;
        Ok(Connection {
            reader: stream,
            writer,
            timeout: opts.timeout,
            sent: 0,
            received: 0,
            last_ack_processing: Duration::ZERO,
        })
    }

    pub fn connect(addr: impl ToSocketAddrs, opts: LinkOptions) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transfer(format!("connect: {e}")))?;
        Connection::new(stream, opts)
    }

    /// Sends one data frame and blocks until the matching ack arrives.
    pub fn send_payload(&mut self, kind: FrameKind, bytes: &[u8]) -> Result<TransferTiming> {
        if kind == FrameKind::Ack {
            return Err(Error::Protocol("acks are sent by the receiver only".into()));
        }
        self.writer.bucket_mut().reset();
        let send_start = Instant::now();
        write_frame(&mut self.writer, kind, bytes)?;
        let ack = read_frame(&mut self.reader, Some(self.timeout))?
            .ok_or_else(|| Error::Transfer("peer closed before acknowledging".into()))?;
        let ack_received = Instant::now();
        match ack {
            (FrameKind::Ack, p) if p.len() == ACK_PAYLOAD_LEN => {
                let tag = u64::from_be_bytes(p.try_into().unwrap());
                if tag != self.sent {
                    return Err(Error::Protocol(format!("ack for frame {tag}, expected {}", self.sent)));
                }
            }
            (FrameKind::Ack, p) => return Err(Error::Protocol(format!("ack payload of {} bytes", p.len()))),
            (k, _) => return Err(Error::Protocol(format!("expected ack, got {k:?}"))),
        }
        self.sent += 1;
        Ok(TransferTiming {
            payload_bytes: bytes.len(),
            send_start,
            ack_received,
            ack_processing: Duration::ZERO,
        })
    }

    /// Receives one data frame and acknowledges it. `Ok(None)` on clean close.
    /// Protocol and framing errors shut the connection down.
    pub fn recv_payload(&mut self) -> Result<Option<(FrameKind, Vec<u8>)>> {
        let frame = match read_frame(&mut self.reader, Some(self.timeout)) {
            Ok(Some((FrameKind::Ack, _))) => Err(Error::Protocol("unexpected ack frame".into())),
            other => other,
        };
        let (kind, payload) = match frame {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(None),
            Err(e) => {
                if matches!(e, Error::Protocol(_) | Error::Framing(_)) {
                    let _ = self.reader.shutdown(Shutdown::Both);
                }
                return Err(e);
            }
        };
        let read_done = Instant::now();
        // Acks bypass the throttle: pacing models the data direction only.
        write_frame(self.writer.get_mut(), FrameKind::Ack, &self.received.to_be_bytes())?;
        self.last_ack_processing = read_done.elapsed();
        self.received += 1;
        Ok(Some((kind, payload)))
    }

    /// Time between the last payload read and its ack write.
    pub fn last_ack_processing(&self) -> Duration {
        self.last_ack_processing
    }

    /// Gives back the underlying socket, e.g. to write hand-made frames.
    pub fn into_stream(self) -> TcpStream {
        self.reader
    }

    pub fn shutdown(&self) {
        let _ = self.reader.shutdown(Shutdown::Both);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchMode {
    Raw,
    LatentF32,
    LatentU8,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Raw, BenchMode::LatentF32, BenchMode::LatentU8];

    pub fn frame_kind(self) -> FrameKind {
        match self {
            BenchMode::Raw => FrameKind::Raw,
            _ => FrameKind::Latent,
        }
    }

    pub fn latent_mode(self) -> Option<LatentMode> {
        match self {
            BenchMode::Raw => None,
            BenchMode::LatentF32 => Some(LatentMode::Float32),
            BenchMode::LatentU8 => Some(LatentMode::Uint8),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Raw => "raw",
            BenchMode::LatentF32 => "latent-f32",
            BenchMode::LatentU8 => "latent-u8",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(BenchMode::Raw),
            "latent-f32" => Ok(BenchMode::LatentF32),
            "latent-u8" => Ok(BenchMode::LatentU8),
            _ => Err(Error::Config(format!("unknown mode `{s}` (raw, latent-f32, latent-u8)"))),
        }
    }
}

/// Wire payload for one image: RGB8 pixels for raw, an `AEL1` file otherwise.
pub fn payload_for(image: &Tensor, params: Option<&ModelParams>, mode: BenchMode) -> Result<Vec<u8>> {
    match mode.latent_mode() {
        None => Ok(tensor_to_rgb8(image)?.2),
        Some(lm) => {
            let params = params.ok_or_else(|| Error::Config(format!("mode {mode} needs model weights")))?;
            let (c, h, w) = match image.shape() {
                &[c, h, w] => (c, h, w),
                s => return Err(Error::dim(format!("expected a C×H×W image, got {s:?}"))),
            };
            let x = image.clone().reshape(vec![1, c, h, w])?;
            codec::serialize_latent(&model::encode(&x, params)?, lm)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub image: usize,
    pub mode: BenchMode,
    pub payload_bytes: usize,
    pub one_way_latency_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rate_bytes_per_sec: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "image,mode,payload_bytes,one_way_latency_s";

    pub fn latencies(&self, mode: BenchMode) -> Vec<f64> {
        self.rows.iter().filter(|r| r.mode == mode).map(|r| r.one_way_latency_s).collect()
    }

    pub fn mean_latency(&self, mode: BenchMode) -> Option<f64> {
        let l = self.latencies(mode);
        (!l.is_empty()).then(|| l.iter().sum::<f64>() / l.len() as f64)
    }

    pub fn mean_payload_bytes(&self, mode: BenchMode) -> Option<f64> {
        let b: Vec<_> = self.rows.iter().filter(|r| r.mode == mode).map(|r| r.payload_bytes as f64).collect();
        (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64)
    }

    /// Mean over images of `(1 − t_mode/t_raw)·100`.
    pub fn mean_reduction_percent(&self, mode: BenchMode) -> Option<f64> {
        let raw = self.latencies(BenchMode::Raw);
        let other = self.latencies(mode);
        if raw.is_empty() || raw.len() != other.len() {
            return None;
        }
        let sum: f64 = raw.iter().zip(&other).map(|(r, o)| (1.0 - o / r) * 100.0).sum();
        Some(sum / raw.len() as f64)
    }

    /// Reduction predicted from payload bytes alone, frame headers included.
    pub fn byte_ratio_prediction_percent(&self, mode: BenchMode) -> Option<f64> {
        let raw = self.mean_payload_bytes(BenchMode::Raw)? + FRAME_HEADER_LEN as f64;
        let other = self.mean_payload_bytes(mode)? + FRAME_HEADER_LEN as f64;
        Some((1.0 - other / raw) * 100.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out += &format!("{},{},{},{:.6}\n", r.image, r.mode, r.payload_bytes, r.one_way_latency_s);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("link rate: {} bytes/s\n", self.rate_bytes_per_sec);
        for mode in BenchMode::ALL {
            let Some(mean) = self.mean_latency(mode) else { continue };
            out += &format!(
                "{mode}: mean payload {:.0} B, mean one-way latency {:.3} ms",
                self.mean_payload_bytes(mode).unwrap_or(0.0),
                mean * 1e3
            );
            if mode != BenchMode::Raw {
                if let (Some(red), Some(pred)) =
                    (self.mean_reduction_percent(mode), self.byte_ratio_prediction_percent(mode))
                {
                    out += &format!(", reduction vs raw {red:.1}% (byte-ratio prediction {pred:.1}%)");
                }
            }
            out += "\n";
        }
        out += "reference: 87.5% mean reduction reported for the original two-host experiment\n";
        out
    }
}

/// Sends every image in every mode over a throttled loopback connection and
/// records one-way latency. Payloads are prepared before timing starts.
pub fn latency_bench(
    images: &[Tensor],
    params: Option<&ModelParams>,
    modes: &[BenchMode],
    rate_bytes_per_sec: f64,
) -> Result<BenchReport> {
    let mut report = BenchReport {
        rate_bytes_per_sec,
        rows: Vec::new(),
    };
    if images.is_empty() || modes.is_empty() {
        return Ok(report);
    }
    let mut jobs = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for &mode in modes {
            jobs.push((i, mode, payload_for(img, params, mode)?));
        }
    }

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let receiver = thread::spawn(move || -> Result<()> {
        let (stream, _) = listener.accept()?;
        let mut conn = Connection::new(stream, LinkOptions::default())?;
        while conn.recv_payload()?.is_some() {
            if tx.send(conn.last_ack_processing()).is_err() {
                break;
            }
        }
        Ok(())
    });

    let opts = LinkOptions {
        rate_bytes_per_sec,
        ..LinkOptions::default()
    };
    let result = (|| -> Result<()> {
        let mut conn = Connection::connect(addr, opts)?;
        for (image, mode, payload) in &jobs {
            let mut timing = conn.send_payload(mode.frame_kind(), payload)?;
            timing.ack_processing = rx
                .recv_timeout(opts.timeout)
                .map_err(|_| Error::Transfer("receiver stopped reporting".into()))?;
            log::debug!("{image} {mode}: {}", timing.to_csv_row());
            report.rows.push(BenchRow {
                image: *image,
                mode: *mode,
                payload_bytes: payload.len(),
                one_way_latency_s: timing.one_way_latency().as_secs_f64(),
            });
        }
        conn.shutdown();
        Ok(())
    })();
    let joined = receiver
        .join()
        .map_err(|_| Error::Internal("receiver thread panicked".into()))?;
    result?;
    joined?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frame_roundtrip_in_memory() {
        for len in [0usize, 1, 16384, 196608] {
            let payload: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
            let mut buf = Vec::new();
            write_frame(&mut buf, FrameKind::Latent, &payload).unwrap();
            assert_eq!(buf.len(), FRAME_HEADER_LEN + len);
            assert_eq!(&buf[5..9], &(len as u32).to_be_bytes());
            let (kind, back) = read_frame(&mut Cursor::new(buf), None).unwrap().unwrap();
            assert_eq!(kind, FrameKind::Latent);
            assert_eq!(back, payload);
        }
    }

    #[test]
    fn frame_errors() {
        let mut buf = Vec::new();
        write_frame(&mut buf, FrameKind::Raw, &[1, 2, 3, 4]).unwrap();

        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_frame(&mut Cursor::new(short), None), Err(Error::Framing(_))));

        let mut kind = buf.clone();
        kind[4] = 7;
        assert!(matches!(read_frame(&mut Cursor::new(kind), None), Err(Error::Protocol(_))));

        let mut magic = buf.clone();
        magic[0] = b'B';
        assert!(matches!(read_frame(&mut Cursor::new(magic), None), Err(Error::Framing(_))));

        let mut huge = buf.clone();
        huge[5..9].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(matches!(read_frame(&mut Cursor::new(huge), None), Err(Error::Protocol(_))));

        assert!(read_frame(&mut Cursor::new(Vec::new()), None).unwrap().is_none());
    }

    #[test]
    fn unlimited_link_is_passthrough() {
        let mut w = throttled_link(Vec::new(), f64::INFINITY).unwrap();
        let data = vec![9u8; 300_000];
        let t = Instant::now();
        w.write_all(&data).unwrap();
        assert!(t.elapsed() < Duration::from_millis(50));
        assert_eq!(w.into_inner(), data);
        assert!(throttled_link(Vec::new(), 0.0).is_err());
    }

    #[test]
    fn throttle_paces_writes() {
        let rate = 4.0 * 1024.0 * 1024.0;
        let mut w = throttled_link(io::sink(), rate).unwrap();
        let t = Instant::now();
        w.write_all(&vec![0u8; 1 << 20]).unwrap();
        let secs = t.elapsed().as_secs_f64();
        assert!((secs - 0.25).abs() < 0.25 * 0.2, "{secs}");
    }

    #[test]
    fn timing_never_negative() {
        let now = Instant::now();
        let t = TransferTiming {
            payload_bytes: 1,
            send_start: now,
            ack_received: now + Duration::from_millis(2),
            ack_processing: Duration::from_millis(5),
        };
        assert_eq!(t.one_way_latency(), Duration::ZERO);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in BenchMode::ALL {
            assert_eq!(m.to_string().parse::<BenchMode>().unwrap(), m);
        }
        assert!("jpeg".parse::<BenchMode>().is_err());
    }

    #[test]
    fn empty_bench_is_empty_report() {
        let r = latency_bench(&[], None, &BenchMode::ALL, 1e6).unwrap();
        assert!(r.rows.is_empty());
        assert!(r.mean_reduction_percent(BenchMode::LatentU8).is_none());
    }
}
