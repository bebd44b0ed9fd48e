#![allow(dead_code)]

pub mod toy;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn toy_path() -> PathBuf {
    data_dir().join("toy.lmd")
}

/// How the stub answers one request: `None` means never reply.
pub type Behavior = Arc<dyn Fn(&Value) -> Option<Value> + Send + Sync>;

pub struct Stub {
    pub addr: String,
    /// Set when a request arrived while an earlier one was unanswered.
    pub interleaved: Arc<AtomicBool>,
}

/// A sidecar that serves `extract` by pointing at a prebuilt dump.
pub fn echo_behavior(path: PathBuf) -> Behavior {
    Arc::new(move |req| {
        Some(match req["cmd"].as_str() {
            Some("extract") => json!({"id": req["id"], "status": "ok", "path": path}),
            Some("models") => json!({"id": req["id"], "status": "ok", "models": ["toy-residual"]}),
            _ => json!({"id": req["id"], "status": "error", "message": "unknown cmd"}),
        })
    })
}

pub async fn spawn_stub(behavior: Behavior, delay: Duration) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let interleaved = Arc::new(AtomicBool::new(false));
    let flag = interleaved.clone();
    tokio::spawn(async move {
        loop {
            let Ok((sock, _)) = listener.accept().await else { return };
            let behavior = behavior.clone();
            let flag = flag.clone();
            tokio::spawn(async move {
                let (r, mut w) = sock.into_split();
                let mut r = BufReader::new(r);
                loop {
                    let mut line = String::new();
                    if r.read_line(&mut line).await.unwrap_or(0) == 0 {
                        return;
                    }
                    tokio::time::sleep(delay).await;
                    let pending = tokio::time::timeout(Duration::from_millis(1), r.fill_buf()).await;
                    if matches!(pending, Ok(Ok(buf)) if !buf.is_empty()) {
                        flag.store(true, Ordering::SeqCst);
                    }
                    let req: Value = serde_json::from_str(&line).unwrap();
                    match behavior(&req) {
                        Some(reply) => {
                            let mut out = serde_json::to_vec(&reply).unwrap();
                            out.push(b'\n');
                            if w.write_all(&out).await.is_err() {
                                return;
                            }
                        }
                        None => tokio::time::sleep(Duration::from_secs(3600)).await,
                    }
                }
            });
        }
    });
    Stub { addr, interleaved }
}
