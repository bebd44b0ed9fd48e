//! Client for the extraction sidecar.
//!
//! The wire format is newline-delimited JSON over a local stream socket
//! (TCP `host:port` or `unix:/path`). A request looks like
//!
//! ```json
//! {"id": 7, "cmd": "extract", "model": "gpt2", "text": "...", "include": ["hidden", "lm_head"]}
//! ```
//!
//! and the reply is `{"id": 7, "status": "ok", "path": "/shared/x.lmd"}` or
//! `{"id": 7, "status": "error", "message": "..."}`. Tensors are handed over
//! as a container file on shared storage, never inline. `{"cmd": "models"}`
//! lists the models the sidecar can load (`"models": [...]` in the reply).
//!
//! One connection is shared and guarded by a mutex, so concurrent callers
//! never interleave messages on the socket.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::sync::Mutex;

use crate::error::{Result, ServiceError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Tensor groups an analysis needs from the sidecar.
pub const INCLUDE_ALL: [&str; 4] = ["hidden", "lm_head", "final_norm", "context_scores"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Unix(PathBuf),
}

impl std::str::FromStr for Endpoint {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("unix:") {
            return Ok(Endpoint::Unix(path.into()));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.is_empty() || !addr.contains(':') {
            return Err(ServiceError::Request(format!(
                "extractor address {s:?} is neither host:port nor unix:/path"
            )));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => f.write_str(a),
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
        }
    }
}

#[derive(Debug, Serialize)]
struct ExtractRequest<'a> {
    id: u64,
    cmd: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    include: Option<&'a [&'a str]>,
}

#[derive(Debug, Deserialize)]
struct Reply {
    id: Value,
    status: String,
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    message: Option<String>,
    #[serde(default)]
    models: Option<Value>,
}

type Reader = BufReader<Box<dyn AsyncRead + Unpin + Send>>;
type Writer = Box<dyn AsyncWrite + Unpin + Send>;

struct Connection {
    reader: Reader,
    writer: Writer,
}

pub struct SidecarClient {
    endpoint: Endpoint,
    timeout: Duration,
    next_id: AtomicU64,
    conn: Mutex<Option<Connection>>,
}

impl SidecarClient {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> Self {
        Self {
            endpoint,
            timeout,
            next_id: AtomicU64::new(1),
            conn: Mutex::new(None),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    async fn connect(&self) -> Result<Connection> {
        let unavailable = |e: std::io::Error| ServiceError::Unavailable(format!("{}: {e}", self.endpoint));
        let (r, w): (Box<dyn AsyncRead + Unpin + Send>, Writer) = match &self.endpoint {
            Endpoint::Tcp(addr) => {
                let s = tokio::net::TcpStream::connect(addr).await.map_err(unavailable)?;
                let (r, w) = s.into_split();
                (Box::new(r), Box::new(w))
            }
            #[cfg(unix)]
            Endpoint::Unix(path) => {
                let s = tokio::net::UnixStream::connect(path).await.map_err(unavailable)?;
                let (r, w) = s.into_split();
                (Box::new(r), Box::new(w))
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => {
                return Err(ServiceError::Unavailable("unix sockets are not supported here".into()))
            }
        };
        Ok(Connection {
            reader: BufReader::new(r),
            writer: w,
        })
    }

    async fn exchange(conn: &mut Connection, line: &[u8]) -> Result<Option<String>> {
        let io = |e: std::io::Error| ServiceError::Unavailable(format!("sidecar i/o: {e}"));
        conn.writer.write_all(line).await.map_err(io)?;
        conn.writer.flush().await.map_err(io)?;
        let mut reply = String::new();
        let n = conn.reader.read_line(&mut reply).await.map_err(io)?;
        Ok((n > 0).then_some(reply))
    }

    /// Sends one request and waits for its reply.
    async fn call(&self, cmd: &'static str, model: Option<&str>, text: Option<&str>, include: Option<&[&str]>) -> Result<Reply> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut line = serde_json::to_vec(&ExtractRequest {
            id,
            cmd,
            model,
            text,
            include,
        })
        .expect("request serializes");
        line.push(b'\n');

        let mut guard = self.conn.lock().await;
        let result = tokio::time::timeout(self.timeout, async {
            if guard.is_none() {
                *guard = Some(self.connect().await?);
            }
            Self::exchange(guard.as_mut().expect("connected above"), &line).await
        })
        .await;

        let raw = match result {
            Err(_) => {
                // a late reply would desynchronize the stream
                *guard = None;
                return Err(ServiceError::Extraction("timeout".into()));
            }
            Ok(Err(e)) => {
                *guard = None;
                return Err(e);
            }
            Ok(Ok(None)) => {
                *guard = None;
                return Err(ServiceError::Unavailable("sidecar closed the connection".into()));
            }
            Ok(Ok(Some(raw))) => raw,
        };

        let reply: Reply = match serde_json::from_str(raw.trim_end()) {
            Ok(r) => r,
            Err(e) => {
                *guard = None;
                return Err(ServiceError::Protocol(format!("unparseable reply: {e}")));
            }
        };
        if reply.id != id {
            *guard = None;
            return Err(ServiceError::Protocol(format!(
                "reply id {} does not match request id {id}",
                reply.id
            )));
        }
        drop(guard);

        if reply.status != "ok" {
            return Err(ServiceError::Extraction(
                reply.message.unwrap_or_else(|| format!("status {:?}", reply.status)),
            ));
        }
        Ok(reply)
    }

    /// Asks the sidecar to run `model` on `text`; returns the container path.
    pub async fn extract(&self, model: &str, text: &str, include: &[&str]) -> Result<PathBuf> {
        let reply = self.call("extract", Some(model), Some(text), Some(include)).await?;
        reply
            .path
            .map(PathBuf::from)
            .ok_or_else(|| ServiceError::Protocol("extract reply has no path".into()))
    }

    pub async fn models(&self) -> Result<Value> {
        let reply = self.call("models", None, None, None).await?;
        reply
            .models
            .ok_or_else(|| ServiceError::Protocol("models reply has no models field".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!("127.0.0.1:9000".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:9000".into()));
        assert_eq!("tcp://localhost:1".parse::<Endpoint>().unwrap(), Endpoint::Tcp("localhost:1".into()));
        assert_eq!("unix:/tmp/s.sock".parse::<Endpoint>().unwrap(), Endpoint::Unix("/tmp/s.sock".into()));
        assert!("nowhere".parse::<Endpoint>().is_err());
    }
}
