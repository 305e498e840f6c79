//! HTTP/1.1 server exposing a source artifact through the wire protocol:
//!
//! ```text
//! POST /predict  {"instances": [[f64, ...], ...]}  -> 200 {"probabilities": [[f64, ...], ...]}
//! GET  /meta                                       -> 200 {"classes": K, "input_dim": D, "schema_version": 1}
//! errors                                           -> 4xx/5xx {"error": "<message>"}
//! ```

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{predict_in_process, SourceModelArtifact, WIRE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ProbVector};

const WORKERS: usize = 4;

#[derive(Serialize, Deserialize)]
pub(super) struct PredictRequest {
    pub instances: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub(super) struct PredictResponse {
    pub probabilities: Vec<ProbVector>,
}

#[derive(Serialize, Deserialize)]
pub(super) struct MetaResponse {
    pub classes: usize,
    pub input_dim: usize,
    pub schema_version: u32,
}

#[derive(Serialize, Deserialize)]
pub(super) struct ErrorBody {
    pub error: String,
}

/// A running server; dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    stopping: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Number of requests handled so far, of any kind.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            self.stop();
        }
    }
}

/// Binds `bind` (e.g. `127.0.0.1:0`) and serves `artifact` from a small
/// worker pool. The artifact is read-only and shared without locking.
pub fn serve(artifact: SourceModelArtifact, bind: &str) -> Result<ServerHandle> {
    let server = Server::http(bind).map_err(|e| Error::Startup(format!("cannot bind {bind}: {e}")))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Startup("server is not listening on an IP socket".into()))?;
    let server = Arc::new(server);
    let artifact = Arc::new(artifact);
    let stopping = Arc::new(AtomicBool::new(false));
    let requests = Arc::new(AtomicUsize::new(0));

    let workers = (0..WORKERS)
        .map(|_| {
            let server = Arc::clone(&server);
            let artifact = Arc::clone(&artifact);
            let stopping = Arc::clone(&stopping);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                while !stopping.load(Ordering::SeqCst) {
                    match server.recv() {
                        Ok(req) => {
                            requests.fetch_add(1, Ordering::SeqCst);
                            handle(&artifact, req);
                        }
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            break;
                        }
                    }
                }
            })
        })
        .collect();
    log::info!("serving source predictor on http://{addr}");
    Ok(ServerHandle { addr, server, stopping, requests, workers })
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    Response::from_string(body).with_status_code(status).with_header(header)
}

fn error_response(status: u16, message: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    let body = serde_json::to_string(&ErrorBody { error: message.to_string() }).expect("string body");
    json_response(status, body)
}

fn handle(artifact: &SourceModelArtifact, mut req: Request) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    let response = match (req.method(), path.as_str()) {
        (Method::Get, "/meta") => {
            let meta = MetaResponse {
                classes: artifact.num_classes(),
                input_dim: artifact.input_dim(),
                schema_version: WIRE_SCHEMA_VERSION,
            };
            json_response(200, serde_json::to_string(&meta).expect("integers serialize"))
        }
        (Method::Post, "/predict") => {
            let mut body = String::new();
            match req.as_reader().read_to_string(&mut body) {
                Ok(_) => predict_response(artifact, &body),
                Err(e) => error_response(400, &format!("unreadable body: {e}")),
            }
        }
        (_, "/meta") | (_, "/predict") => error_response(405, "method not allowed"),
        _ => error_response(404, "not found"),
    };
    if let Err(e) = req.respond(response) {
        log::warn!("failed to send response: {e}");
    }
}

fn predict_response(artifact: &SourceModelArtifact, body: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    let parsed: PredictRequest = match serde_json::from_str(body) {
        Ok(p) => p,
        Err(e) => return error_response(400, &format!("malformed request: {e}")),
    };
    if parsed.instances.iter().any(|row| row.len() != artifact.input_dim()) {
        return error_response(400, "dimension mismatch");
    }
    let batch = if parsed.instances.is_empty() {
        Matrix::zeros(0, artifact.input_dim())
    } else {
        match Matrix::from_rows(&parsed.instances) {
            Ok(m) => m,
            Err(e) => return error_response(400, &e.to_string()),
        }
    };
    match predict_in_process(artifact, &batch) {
        Ok(probabilities) => match crate::json::to_string(&PredictResponse { probabilities }) {
            Ok(text) => json_response(200, text),
            Err(e) => error_response(500, &e.to_string()),
        },
        Err(e) => error_response(500, &e.to_string()),
    }
}
