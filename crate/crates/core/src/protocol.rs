//! Little-endian binary framing for chunk inference requests and responses.
//!
//! Request:
//!
//! ```text
//! u32 magic = 0x52415044 | u16 version | u64 seq | u64 step | u32 len | len bytes
//! ```
//!
//! Response:
//!
//! ```text
//! u32 magic | u16 version | u16 status | u64 seq | body
//!   status 0: u32 k | u32 n | u32 b | k*n f64 actions | k*b f64 logits
//!   status 1 (protocol error), 2 (version rejected): u32 len | len bytes UTF-8
//! ```
//!
//! Both frames are self-delimiting, so a stream reader can decode them with
//! [`decode_request`] / [`decode_response`] and get [`FrameError::Incomplete`]
//! until enough bytes have arrived.

use thiserror::Error;

pub const MAGIC: u32 = 0x5241_5044;
pub const VERSION: u16 = 1;
pub const REQUEST_HEADER_LEN: usize = 26;
pub const RESPONSE_HEADER_LEN: usize = 16;

pub const MAX_PAYLOAD: usize = 64 << 20;
pub const MAX_HORIZON: u32 = 4096;
pub const MAX_JOINTS: u32 = 64;
pub const MAX_BINS: u32 = 65_536;
pub const MAX_MESSAGE: usize = 64 << 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("incomplete frame: need {needed} bytes, have {have}")]
    Incomplete { needed: usize, have: usize },
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("declared length {0} exceeds limit")]
    TooLarge(u64),
    #[error("unknown response status {0}")]
    UnknownStatus(u16),
    #[error("non-finite value in response body")]
    NonFinite,
    #[error("error message is not valid UTF-8")]
    Utf8,
}

impl FrameError {
    pub fn is_incomplete(&self) -> bool {
        matches!(self, FrameError::Incomplete { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceRequest {
    pub version: u16,
    pub seq: u64,
    pub step: u64,
    pub observation: Vec<u8>,
}

impl InferenceRequest {
    pub fn new(seq: u64, step: u64, observation: Vec<u8>) -> Self {
        InferenceRequest {
            version: VERSION,
            seq,
            step,
            observation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Status {
    Chunk = 0,
    ProtocolError = 1,
    VersionRejected = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseBody {
    Chunk {
        horizon: u32,
        n_joints: u32,
        bins: u32,
        /// Row-major `horizon x n_joints`.
        actions: Vec<f64>,
        /// Row-major `horizon x bins`.
        logits: Vec<f64>,
    },
    ProtocolError(String),
    VersionRejected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub version: u16,
    pub seq: u64,
    pub body: ResponseBody,
}

impl InferenceResponse {
    pub fn status(&self) -> Status {
        match self.body {
            ResponseBody::Chunk { .. } => Status::Chunk,
            ResponseBody::ProtocolError(_) => Status::ProtocolError,
            ResponseBody::VersionRejected(_) => Status::VersionRejected,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<(), FrameError> {
        if self.buf.len() < self.pos + n {
            Err(FrameError::Incomplete {
                needed: self.pos + n,
                have: self.buf.len(),
            })
        } else {
            Ok(())
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        self.need(n)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, FrameError> {
        let raw = self.take(count * 8)?;
        raw.chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FrameError::NonFinite)
                }
            })
            .collect()
    }

    fn magic(&mut self) -> Result<(), FrameError> {
        let m = self.u32()?;
        if m != MAGIC {
            return Err(FrameError::BadMagic(m));
        }
        Ok(())
    }
}

pub fn encode_request(req: &InferenceRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(REQUEST_HEADER_LEN + req.observation.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&req.version.to_le_bytes());
    out.extend_from_slice(&req.seq.to_le_bytes());
    out.extend_from_slice(&req.step.to_le_bytes());
    out.extend_from_slice(&(req.observation.len() as u32).to_le_bytes());
    out.extend_from_slice(&req.observation);
    out
}

/// Decodes one request from the front of `buf`, returning it with the
/// number of bytes consumed. The version is reported, not checked.
pub fn decode_request(buf: &[u8]) -> Result<(InferenceRequest, usize), FrameError> {
    let mut r = Reader { buf, pos: 0 };
    r.magic()?;
    let version = r.u16()?;
    let seq = r.u64()?;
    let step = r.u64()?;
    let len = r.u32()? as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(len as u64));
    }
    let observation = r.take(len)?.to_vec();
    Ok((
        InferenceRequest {
            version,
            seq,
            step,
            observation,
        },
        r.pos,
    ))
}

pub fn encode_response(resp: &InferenceResponse) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&resp.version.to_le_bytes());
    out.extend_from_slice(&(resp.status() as u16).to_le_bytes());
    out.extend_from_slice(&resp.seq.to_le_bytes());
    match &resp.body {
        ResponseBody::Chunk {
            horizon,
            n_joints,
            bins,
            actions,
            logits,
        } => {
            out.extend_from_slice(&horizon.to_le_bytes());
            out.extend_from_slice(&n_joints.to_le_bytes());
            out.extend_from_slice(&bins.to_le_bytes());
            for v in actions.iter().chain(logits) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        ResponseBody::ProtocolError(msg) | ResponseBody::VersionRejected(msg) => {
            out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
            out.extend_from_slice(msg.as_bytes());
        }
    }
    out
}

pub fn decode_response(buf: &[u8]) -> Result<(InferenceResponse, usize), FrameError> {
    let mut r = Reader { buf, pos: 0 };
    r.magic()?;
    let version = r.u16()?;
    let status = r.u16()?;
    let seq = r.u64()?;
    let body = match status {
        0 => {
            let horizon = r.u32()?;
            let n_joints = r.u32()?;
            let bins = r.u32()?;
            if horizon > MAX_HORIZON {
                return Err(FrameError::TooLarge(horizon as u64));
            }
            if n_joints > MAX_JOINTS {
                return Err(FrameError::TooLarge(n_joints as u64));
            }
            if bins > MAX_BINS {
                return Err(FrameError::TooLarge(bins as u64));
            }
            let actions = r.f64s((horizon * n_joints) as usize)?;
            let logits = r.f64s(horizon as usize * bins as usize)?;
            ResponseBody::Chunk {
                horizon,
                n_joints,
                bins,
                actions,
                logits,
            }
        }
        1 | 2 => {
            let len = r.u32()? as usize;
            if len > MAX_MESSAGE {
                return Err(FrameError::TooLarge(len as u64));
            }
            let msg = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FrameError::Utf8)?
                .to_owned();
            if status == 1 {
                ResponseBody::ProtocolError(msg)
            } else {
                ResponseBody::VersionRejected(msg)
            }
        }
        other => return Err(FrameError::UnknownStatus(other)),
    };
    Ok((InferenceResponse { version, seq, body }, r.pos))
}
