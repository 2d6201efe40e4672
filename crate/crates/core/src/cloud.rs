//! Mock cloud policy service, its latency model, and the client that talks
//! to it over either an in-process or a TCP transport.
//!
//! The service is deterministic: actions and logits are drawn from streams
//! keyed by `(seed, step, row)`. The only input that changes the response
//! beyond the step is the observation payload. The service compares the
//! payload against the clean frame it can regenerate for that step and
//! flattens the logits in proportion to the fraction of corrupted bytes.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chunk::{ActionChunk, ChunkSource};
use crate::error::{RapidError, Result};
use crate::protocol::{
    decode_request, decode_response, encode_request, encode_response,
    InferenceRequest, InferenceResponse, ResponseBody, VERSION,
};
use crate::rng::{self, tag};

/// Tolerance on the probability mass accepted by [`shannon_entropy`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Entropy in bits, with `0 log 0 = 0`.
pub fn shannon_entropy(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(RapidError::Distribution("empty distribution".into()));
    }
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(RapidError::Distribution(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(RapidError::Distribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(-probabilities
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn logits_entropy(logits: &[f64]) -> Result<f64> {
    shannon_entropy(&softmax(logits))
}

/// A simulated camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlob {
    pub step: u64,
    pub payload: Vec<u8>,
    pub noise_level: f64,
}

impl ObservationBlob {
    /// The clean frame for `step` of scene `seed`.
    pub fn clean_payload(seed: u64, step: u64, size: usize) -> Vec<u8> {
        let mut out = vec![0u8; size];
        rng::stream(&[seed, tag::OBSERVATION, step]).fill_bytes(&mut out);
        out
    }

    /// Captures the frame for `step`, corrupting each byte independently
    /// with probability `noise_level`.
    pub fn capture(seed: u64, step: u64, size: usize, noise_level: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_level) {
            return Err(RapidError::Config(format!(
                "noise level must lie in [0, 1], got {noise_level}"
            )));
        }
        let mut payload = Self::clean_payload(seed, step, size);
        if noise_level > 0.0 {
            let mut r = rng::stream(&[seed, tag::OBS_NOISE, step]);
            for b in payload.iter_mut() {
                if r.random_bool(noise_level) {
                    // xor with a non-zero byte so the byte always changes
                    *b ^= r.random_range(1..=255u8);
                }
            }
        }
        Ok(ObservationBlob {
            step,
            payload,
            noise_level,
        })
    }
}

/// Service parameters of the mock policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudModelConfig {
    pub seed: u64,
    pub n_joints: usize,
    /// Chunk horizon k.
    pub horizon: usize,
    /// Bins of the per-step action distribution.
    pub bins: usize,
    /// Observation size in bytes.
    pub observation_bytes: usize,
    /// Logit scale for a clean observation.
    pub sharpness: f64,
    /// Half-width of the per-row multiplicative jitter on the logit scale.
    pub sharpness_jitter: f64,
}

impl Default for CloudModelConfig {
    fn default() -> Self {
        CloudModelConfig {
            seed: 0,
            n_joints: 7,
            horizon: 8,
            bins: 256,
            observation_bytes: 4096,
            sharpness: 2.4,
            sharpness_jitter: 0.3,
        }
    }
}

impl CloudModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 || self.horizon == 0 || self.bins < 2 {
            return Err(RapidError::Config(
                "cloud model needs n_joints >= 1, horizon >= 1, bins >= 2".into(),
            ));
        }
        if !(self.sharpness > 0.0) || !(0.0..1.0).contains(&self.sharpness_jitter) {
            return Err(RapidError::Config("invalid logit sharpness settings".into()));
        }
        Ok(())
    }
}

/// Deterministic stand-in for the cloud policy.
#[derive(Debug, Clone)]
pub struct MockCloud {
    cfg: CloudModelConfig,
}

impl MockCloud {
    pub fn new(cfg: CloudModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MockCloud { cfg })
    }

    pub fn config(&self) -> &CloudModelConfig {
        &self.cfg
    }

    /// Fraction of payload bytes that differ from the clean frame.
    pub fn estimate_noise(&self, step: u64, payload: &[u8]) -> f64 {
        if payload.is_empty() {
            return 0.0;
        }
        let clean = ObservationBlob::clean_payload(self.cfg.seed, step, payload.len());
        let differing = clean.iter().zip(payload).filter(|(a, b)| a != b).count();
        differing as f64 / payload.len() as f64
    }

    /// Logits of every row for `step` given an estimated noise level.
    pub fn logits_for(&self, step: u64, noise: f64) -> Vec<Vec<f64>> {
        let c = &self.cfg;
        (0..c.horizon as u64)
            .map(|row| {
                let mut r = rng::stream(&[c.seed, tag::LOGITS, step, row]);
                let u: f64 = r.random_range(-1.0..=1.0);
                let scale =
                    c.sharpness * (1.0 - noise.clamp(0.0, 1.0)) * (1.0 + c.sharpness_jitter * u);
                (0..c.bins)
                    .map(|_| scale * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    pub fn actions_for(&self, step: u64) -> Vec<Vec<f64>> {
        let c = &self.cfg;
        let mut r = rng::stream(&[c.seed, tag::ACTIONS, step]);
        let base: Vec<f64> = (0..c.n_joints).map(|_| r.random_range(-0.05..0.05)).collect();
        (0..c.horizon)
            .map(|i| {
                base.iter()
                    .map(|b| b * (1.0 + 0.1 * i as f64) + r.random_range(-1e-3..1e-3))
                    .collect()
            })
            .collect()
    }

    pub fn serve(&self, req: &InferenceRequest) -> InferenceResponse {
        if req.version != VERSION {
            return InferenceResponse {
                version: VERSION,
                seq: req.seq,
                body: ResponseBody::VersionRejected(format!(
                    "unsupported version {}, expected {VERSION}",
                    req.version
                )),
            };
        }
        if req.observation.len() != self.cfg.observation_bytes {
            return InferenceResponse {
                version: VERSION,
                seq: req.seq,
                body: ResponseBody::ProtocolError(format!(
                    "observation has {} bytes, expected {}",
                    req.observation.len(),
                    self.cfg.observation_bytes
                )),
            };
        }
        let noise = self.estimate_noise(req.step, &req.observation);
        let actions = self.actions_for(req.step);
        let logits = self.logits_for(req.step, noise);
        InferenceResponse {
            version: VERSION,
            seq: req.seq,
            body: ResponseBody::Chunk {
                horizon: self.cfg.horizon as u32,
                n_joints: self.cfg.n_joints as u32,
                bins: self.cfg.bins as u32,
                actions: actions.into_iter().flatten().collect(),
                logits: logits.into_iter().flatten().collect(),
            },
        }
    }

    /// Serves one encoded frame. Undecodable input yields a protocol error
    /// frame with sequence number 0.
    pub fn serve_bytes(&self, frame: &[u8]) -> Vec<u8> {
        match decode_request(frame) {
            Ok((req, used)) if used == frame.len() => encode_response(&self.serve(&req)),
            Ok((req, _)) => encode_response(&error_response(
                req.seq,
                "trailing bytes after request frame".into(),
            )),
            Err(e) => encode_response(&error_response(0, e.to_string())),
        }
    }
}

fn error_response(seq: u64, msg: String) -> InferenceResponse {
    InferenceResponse {
        version: VERSION,
        seq,
        body: ResponseBody::ProtocolError(msg),
    }
}

/// `base + U(-jitter, +jitter) + payload_bits / bandwidth`, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub base_ms: f64,
    pub jitter_ms: f64,
    /// Link rate in Mbit/s; `None` means unlimited.
    pub bandwidth_mbps: Option<f64>,
    pub seed: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            base_ms: 0.0,
            jitter_ms: 0.0,
            bandwidth_mbps: None,
            seed: 0,
        }
    }
}

impl LatencyModel {
    pub fn fixed(base_ms: f64) -> Self {
        LatencyModel {
            base_ms,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_ms >= 0.0 && self.base_ms.is_finite())
            || !(self.jitter_ms >= 0.0 && self.jitter_ms.is_finite())
        {
            return Err(RapidError::Config("latency base/jitter must be >= 0".into()));
        }
        if let Some(bw) = self.bandwidth_mbps {
            if !(bw > 0.0) {
                return Err(RapidError::Config("bandwidth must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn transfer_ms(&self, payload_bytes: usize) -> f64 {
        match self.bandwidth_mbps {
            Some(bw) => payload_bytes as f64 * 8.0 / (bw * 1e6) * 1e3,
            None => 0.0,
        }
    }

    /// Latency of call number `call_index`, never negative.
    pub fn sample(&self, call_index: u64, payload_bytes: usize) -> f64 {
        let jitter = if self.jitter_ms > 0.0 {
            rng::stream(&[self.seed, tag::LATENCY, call_index])
                .random_range(-self.jitter_ms..=self.jitter_ms)
        } else {
            0.0
        };
        (self.base_ms + jitter + self.transfer_ms(payload_bytes)).max(0.0)
    }
}

/// Moves one encoded request to the service and returns the encoded reply.
pub trait Transport {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>>;
}

pub struct InProcessTransport {
    cloud: MockCloud,
}

impl InProcessTransport {
    pub fn new(cloud: MockCloud) -> Self {
        InProcessTransport { cloud }
    }
}

impl Transport for InProcessTransport {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        Ok(self.cloud.serve_bytes(frame))
    }
}

pub struct TcpTransport {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl TcpTransport {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            stream,
            buf: Vec::new(),
        })
    }

    /// Writes raw bytes without waiting for a reply.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    /// Reads until one full response frame is buffered.
    pub fn read_response(&mut self) -> Result<Vec<u8>> {
        let mut tmp = [0u8; 64 * 1024];
        loop {
            match decode_response(&self.buf) {
                Ok((_, used)) => {
                    let frame = self.buf[..used].to_vec();
                    self.buf.drain(..used);
                    return Ok(frame);
                }
                Err(e) if e.is_incomplete() => {}
                Err(e) => {
                    self.buf.clear();
                    return Err(e.into());
                }
            }
            match self.stream.read(&mut tmp) {
                Ok(0) => {
                    return Err(RapidError::Socket(std::io::Error::new(
                        ErrorKind::UnexpectedEof,
                        "server closed connection",
                    )))
                }
                Ok(n) => self.buf.extend_from_slice(&tmp[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(RapidError::Timeout { attempts: 1 })
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Transport for TcpTransport {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        self.send_raw(frame)?;
        self.read_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencySource {
    /// Charge latency from the model, independent of the transport.
    Simulated(LatencyModel),
    /// Charge the measured round-trip time.
    WallClock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkReply {
    pub chunk: ActionChunk,
    /// Charged latency of the successful attempt (ms).
    pub latency_ms: f64,
    pub attempts: u32,
}

/// Blocking chunk client with at most one request outstanding.
pub struct CloudClient<T: Transport> {
    transport: T,
    latency: LatencySource,
    timeout_ms: f64,
    next_seq: u64,
    calls: u64,
    timeouts: u64,
}

pub const DEFAULT_TIMEOUT_MS: f64 = 2000.0;

impl<T: Transport> CloudClient<T> {
    pub fn new(transport: T, latency: LatencySource) -> Self {
        CloudClient {
            transport,
            latency,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            next_seq: 1,
            calls: 0,
            timeouts: 0,
        }
    }

    pub fn with_timeout_ms(mut self, timeout_ms: f64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    /// Sequence number the next request will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn timeouts(&self) -> u64 {
        self.timeouts
    }

    /// Requests a fresh chunk for `obs`. A timed-out attempt is retried
    /// once; a second timeout is reported as [`RapidError::Timeout`].
    pub fn request_chunk(&mut self, obs: &ObservationBlob) -> Result<ChunkReply> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let req = InferenceRequest::new(seq, obs.step, obs.payload.clone());
        let frame = encode_request(&req);
        for attempt in 1..=2u32 {
            let call = self.calls;
            self.calls += 1;
            let started = Instant::now();
            let reply = match self.transport.roundtrip(&frame) {
                Ok(r) => r,
                Err(RapidError::Timeout { .. }) => {
                    self.timeouts += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let latency_ms = match self.latency {
                LatencySource::Simulated(m) => m.sample(call, obs.payload.len()),
                LatencySource::WallClock => started.elapsed().as_secs_f64() * 1e3,
            };
            if latency_ms > self.timeout_ms {
                self.timeouts += 1;
                continue;
            }
            let (resp, _) = decode_response(&reply)?;
            if resp.seq != seq {
                return Err(RapidError::Sequencing {
                    expected: seq,
                    got: resp.seq,
                });
            }
            let chunk = chunk_from_response(resp, obs.step, ChunkSource::Cloud)?;
            return Ok(ChunkReply {
                chunk,
                latency_ms,
                attempts: attempt,
            });
        }
        Err(RapidError::Timeout { attempts: 2 })
    }
}

/// Unpacks a chunk response into rows. Error frames become
/// [`RapidError::Rejected`].
pub fn chunk_from_response(
    resp: InferenceResponse,
    origin_step: u64,
    source: ChunkSource,
) -> Result<ActionChunk> {
    let chunk = match resp.body {
        ResponseBody::Chunk {
            horizon,
            n_joints,
            bins,
            actions,
            logits,
        } => ActionChunk {
            seq: resp.seq,
            origin_step,
            actions: actions
                .chunks(n_joints.max(1) as usize)
                .take(horizon as usize)
                .map(<[f64]>::to_vec)
                .collect(),
            logits: if bins == 0 {
                Vec::new()
            } else {
                logits.chunks(bins as usize).map(<[f64]>::to_vec).collect()
            },
            source,
        },
        ResponseBody::ProtocolError(m) | ResponseBody::VersionRejected(m) => {
            return Err(RapidError::Rejected(m))
        }
    };
    chunk.validate()?;
    Ok(chunk)
}

/// Settings for the blocking socket server.
#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    /// A partial frame idle for this long is answered with a protocol error
    /// and discarded.
    pub idle_timeout: Duration,
    /// Stop after this many connections (`None` = serve forever).
    pub max_connections: Option<usize>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            idle_timeout: Duration::from_millis(250),
            max_connections: None,
        }
    }
}

/// Serves connections one at a time until `max_connections` is reached.
pub fn serve_tcp(listener: &TcpListener, cloud: &MockCloud, opts: ServerOptions) -> Result<()> {
    let mut served = 0usize;
    for conn in listener.incoming() {
        let stream = conn?;
        // Per-connection failures end that connection only.
        let _ = serve_connection(stream, cloud, opts);
        served += 1;
        if opts.max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

fn serve_connection(mut stream: TcpStream, cloud: &MockCloud, opts: ServerOptions) -> Result<()> {
    stream.set_read_timeout(Some(opts.idle_timeout))?;
    stream.set_nodelay(true)?;
    let mut buf: Vec<u8> = Vec::new();
    let mut tmp = vec![0u8; 64 * 1024];
    loop {
        // Drain every complete frame already buffered.
        loop {
            if buf.is_empty() {
                break;
            }
            match decode_request(&buf) {
                Ok((req, used)) => {
                    buf.drain(..used);
                    stream.write_all(&encode_response(&cloud.serve(&req)))?;
                }
                Err(e) if e.is_incomplete() => break,
                Err(e) => {
                    buf.clear();
                    stream.write_all(&encode_response(&error_response(0, e.to_string())))?;
                }
            }
        }
        match stream.read(&mut tmp) {
            Ok(0) => return Ok(()),
            Ok(n) => buf.extend_from_slice(&tmp[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if !buf.is_empty() {
                    let msg = match decode_request(&buf) {
                        Err(e) => e.to_string(),
                        Ok(_) => "stalled frame".into(),
                    };
                    buf.clear();
                    stream.write_all(&encode_response(&error_response(
                        0,
                        format!("truncated frame discarded: {msg}"),
                    )))?;
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
}
