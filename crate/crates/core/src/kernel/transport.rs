//! Wire protocol and transports.
//!
//! Every message is a frame: a big-endian `u32` length followed by that many
//! bytes of JSON. Frames longer than [`MAX_FRAME`] are refused. The
//! in-process transport still encodes every request to bytes, so both
//! transports exercise the same decoding path on the kernel thread.

use super::policy::AutonomyLevel;
use super::service::{HealthRecord, KernelConfig, KernelState};
use super::{ActionDescriptor, AuthToken, OperatorApproval, OperatorCredential, PublicKey};
use crate::canonical::Digest;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use thiserror::Error;

/// Largest accepted frame payload.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    PublicKey,
    Authorize {
        descriptor: ActionDescriptor,
        #[serde(default)]
        gauntlet_approval: Option<String>,
        #[serde(default)]
        operator_approval: Option<OperatorApproval>,
    },
    /// Proposal-purpose token for gauntlet stage 3.
    AuthorizeProposal { descriptor: ActionDescriptor },
    /// Countersign a gauntlet report; returns a single-use approval id.
    SignApproval {
        token: AuthToken,
        descriptor: ActionDescriptor,
        report_digest: Digest,
    },
    Verify {
        token: AuthToken,
        descriptor: ActionDescriptor,
    },
    EmergencyStop {
        reason: String,
        #[serde(default)]
        snapshot_digest: Option<Digest>,
    },
    ClearEmergency {
        #[serde(default)]
        credential: Option<OperatorCredential>,
    },
    Health,
    /// Advance the kernel's logical clock.
    Tick { now: u64 },
    Alert { module_id: String, detail: String },
    SetAutonomy {
        level: AutonomyLevel,
        descriptor: ActionDescriptor,
        token: AuthToken,
        #[serde(default)]
        operator_approval: Option<OperatorApproval>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    PublicKey { key: PublicKey },
    Token { token: AuthToken, notify: bool },
    Denied { reason: String },
    Approval { approval_id: String },
    Verified { valid: bool, reason: String },
    Emergency { engaged: bool, epoch: u64 },
    Health(HealthRecord),
    Ack,
    Error { message: String },
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel unreachable: {0}")]
    Unreachable(String),
    #[error("kernel i/o: {0}")]
    Io(String),
    #[error("bad frame: {0}")]
    Frame(String),
}

impl From<io::Error> for KernelError {
    fn from(e: io::Error) -> Self {
        KernelError::Io(e.to_string())
    }
}

/// Anything that can carry frames to a kernel.
pub trait KernelClient: Send + Sync {
    /// Send one raw payload and return the raw response payload.
    fn call_raw(&self, payload: &[u8]) -> Result<Vec<u8>, KernelError>;

    fn call(&self, req: &Request) -> Result<Response, KernelError> {
        let bytes = serde_json::to_vec(req).map_err(|e| KernelError::Frame(e.to_string()))?;
        let reply = self.call_raw(&bytes)?;
        serde_json::from_slice(&reply).map_err(|e| KernelError::Frame(e.to_string()))
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too long"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Read one frame. Oversized frames are drained and reported as
/// `Ok(Err(len))` so the connection stays usable.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Result<Vec<u8>, usize>> {
    let mut header = [0u8; 4];
    r.read_exact(&mut header)?;
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Ok(Err(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Ok(buf))
}

fn error_payload(message: String) -> Vec<u8> {
    serde_json::to_vec(&Response::Error { message }).expect("response encodes")
}

fn process(state: &mut KernelState, payload: &[u8]) -> Vec<u8> {
    if payload.len() > MAX_FRAME {
        return error_payload(format!("frame of {} bytes exceeds {MAX_FRAME}", payload.len()));
    }
    let resp = match serde_json::from_slice::<Request>(payload) {
        Ok(req) => state.handle(req),
        Err(e) => Response::Error {
            message: format!("malformed frame: {e}"),
        },
    };
    serde_json::to_vec(&resp).expect("response encodes")
}

type Job = (Vec<u8>, mpsc::Sender<Vec<u8>>);

/// Handle to a kernel thread. Cloning shares the same queue.
#[derive(Clone)]
pub struct KernelHandle {
    tx: mpsc::Sender<Job>,
}

impl KernelHandle {
    /// Start a kernel thread. The signing key is created on that thread.
    pub fn spawn(config: KernelConfig) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        thread::Builder::new()
            .name("nanoworld-kernel".into())
            .spawn(move || {
                let mut state = KernelState::new(config);
                while let Ok((payload, reply)) = rx.recv() {
                    let out = process(&mut state, &payload);
                    let _ = reply.send(out);
                }
            })
            .expect("spawn kernel thread");
        Self { tx }
    }
}

impl KernelClient for KernelHandle {
    fn call_raw(&self, payload: &[u8]) -> Result<Vec<u8>, KernelError> {
        let (rtx, rrx) = mpsc::channel();
        self.tx
            .send((payload.to_vec(), rtx))
            .map_err(|_| KernelError::Unreachable("kernel thread stopped".into()))?;
        rrx.recv()
            .map_err(|_| KernelError::Unreachable("kernel thread stopped".into()))
    }
}

/// Serve a kernel over TCP until the listener fails. Each connection gets a
/// thread that forwards frames into the kernel's single queue.
pub fn serve(listener: TcpListener, kernel: KernelHandle) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let k = kernel.clone();
        thread::spawn(move || {
            let _ = serve_connection(stream, k);
        });
    }
    Ok(())
}

fn serve_connection(mut stream: TcpStream, kernel: KernelHandle) -> Result<(), KernelError> {
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let reply = match frame {
            Ok(payload) => kernel.call_raw(&payload)?,
            Err(len) => error_payload(format!("frame of {len} bytes exceeds {MAX_FRAME}")),
        };
        write_frame(&mut stream, &reply)?;
    }
}

/// Client for a kernel served over TCP.
pub struct TcpKernel {
    stream: Mutex<TcpStream>,
}

impl TcpKernel {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, KernelError> {
        let stream = TcpStream::connect(addr).map_err(|e| KernelError::Unreachable(e.to_string()))?;
        stream.set_nodelay(true).ok();
        Ok(Self {
            stream: Mutex::new(stream),
        })
    }
}

impl KernelClient for TcpKernel {
    fn call_raw(&self, payload: &[u8]) -> Result<Vec<u8>, KernelError> {
        let mut s = self.stream.lock().map_err(|_| KernelError::Io("poisoned".into()))?;
        write_frame(&mut *s, payload)?;
        match read_frame(&mut *s)? {
            Ok(bytes) => Ok(bytes),
            Err(len) => Err(KernelError::Frame(format!("response of {len} bytes"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{signing_key_from, ActionClass, Operator};
    use crate::lineage::Seed;

    fn config() -> KernelConfig {
        KernelConfig::from_seed(Seed(3)).with_operator(Operator::from_seed(Seed(4)).public())
    }

    #[test]
    fn frames_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 5]);
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), Ok(b"hello".to_vec()));
    }

    #[test]
    fn garbage_and_oversize_are_errors() {
        let k = KernelHandle::spawn(config());
        let r: Response = serde_json::from_slice(&k.call_raw(b"\xff\x00garbage").unwrap()).unwrap();
        assert!(matches!(r, Response::Error { .. }));
        let big = vec![b' '; MAX_FRAME + 1];
        let r: Response = serde_json::from_slice(&k.call_raw(&big).unwrap()).unwrap();
        assert!(matches!(r, Response::Error { .. }));
        assert!(matches!(k.call(&Request::Health).unwrap(), Response::Health(_)));
    }

    #[test]
    fn tcp_transport() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let k = KernelHandle::spawn(config());
        thread::spawn(move || serve(listener, k));
        let client = TcpKernel::connect(addr).unwrap();
        let d = ActionDescriptor::new(
            ActionClass::GraphMutation,
            "g/x",
            &1,
            "t",
            AutonomyLevel::A5,
        );
        let Response::Token { token, .. } = client
            .call(&Request::Authorize {
                descriptor: d.clone(),
                gauntlet_approval: None,
                operator_approval: None,
            })
            .unwrap()
        else {
            panic!()
        };
        let v = client.call(&Request::Verify { token, descriptor: d }).unwrap();
        assert!(matches!(v, Response::Verified { valid: true, .. }));
        let big = vec![b' '; MAX_FRAME + 10];
        let r: Response = serde_json::from_slice(&client.call_raw(&big).unwrap()).unwrap();
        assert!(matches!(r, Response::Error { .. }));
        assert!(matches!(client.call(&Request::Health).unwrap(), Response::Health(_)));
    }

    #[test]
    fn unreachable_tcp() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        assert!(matches!(TcpKernel::connect(addr), Err(KernelError::Unreachable(_))));
    }

    #[test]
    fn private_key_never_on_the_wire() {
        let secret = hex::encode(signing_key_from(Seed(3).child("kernel/signing")).to_bytes());
        let k = KernelHandle::spawn(config());
        let d = ActionDescriptor::new(ActionClass::Untrain, "m", &0, "t", AutonomyLevel::A5);
        let reqs = [
            Request::PublicKey,
            Request::Health,
            Request::Authorize {
                descriptor: d.clone(),
                gauntlet_approval: None,
                operator_approval: None,
            },
            Request::AuthorizeProposal { descriptor: d },
            Request::EmergencyStop {
                reason: "x".into(),
                snapshot_digest: None,
            },
        ];
        for r in &reqs {
            let bytes = serde_json::to_vec(r).unwrap();
            let out = String::from_utf8(k.call_raw(&bytes).unwrap()).unwrap();
            assert!(!out.contains(&secret));
        }
    }
}
