use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response};

use super::index::RetrievalIndex;
use crate::error::{Error, Result};
use crate::training::TaskLabels;

const WORKERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedNeighbor {
    pub tumor_id: String,
    pub image_id: String,
    pub distance: f64,
    pub labels: TaskLabels,
    pub linear_size_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborsResponse {
    pub query: String,
    pub k: usize,
    pub truncated: bool,
    pub neighbors: Vec<ServedNeighbor>,
}

/// Neighbors of a stored tumor, excluding tumors from its own image.
/// Errors carry the HTTP status to answer with.
pub fn neighbors_of(
    index: &RetrievalIndex,
    tumor_id: &str,
    k: usize,
) -> std::result::Result<NeighborsResponse, (u16, String)> {
    let table = index.table();
    let row = table
        .position(tumor_id)
        .ok_or_else(|| (404, format!("unknown tumor_id `{tumor_id}`")))?;
    let image = &table.rows[row].image_id;
    let r = index
        .query(table.vector(row), k, Some(image))
        .map_err(|e| (422, e.to_string()))?;
    Ok(NeighborsResponse {
        query: tumor_id.to_string(),
        k,
        truncated: r.truncated,
        neighbors: r
            .neighbors
            .into_iter()
            .map(|n| {
                let meta = &table.rows[n.row];
                ServedNeighbor {
                    tumor_id: n.tumor_id,
                    image_id: meta.image_id.clone(),
                    distance: n.distance,
                    labels: meta.labels.clone(),
                    linear_size_mm: meta.linear_size_mm,
                }
            })
            .collect(),
    })
}

/// A running read-only query endpoint.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the server stops.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Serve `GET /neighbors?tumor_id=<id>&k=<K>` and `GET /healthz`.
pub fn serve(index: RetrievalIndex, addr: &str) -> Result<Server> {
    let http = tiny_http::Server::http(addr)
        .map_err(|e| Error::Server(format!("cannot bind {addr}: {e}")))?;
    let bound = http
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Server("not an IP listener".into()))?;
    let http = Arc::new(http);
    let index = Arc::new(index);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..WORKERS)
        .map(|_| {
            let (http, index, stop) = (http.clone(), index.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match http.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(req)) => handle(&index, req),
                        Ok(None) => {}
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            break;
                        }
                    }
                }
            })
        })
        .collect();
    log::info!("serving {} rows on http://{bound}", index.len());
    Ok(Server {
        addr: bound,
        stop,
        workers,
    })
}

fn json_response(status: u16, body: &serde_json::Value) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_data(body.to_string().into_bytes())
        .with_status_code(status)
        .with_header(header)
}

fn error_body(message: &str) -> serde_json::Value {
    serde_json::json!({ "error": message })
}

fn route(index: &RetrievalIndex, method: &Method, url: &str) -> (u16, serde_json::Value) {
    if *method != Method::Get {
        return (405, error_body("only GET is supported"));
    }
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    match path {
        "/healthz" => (
            200,
            serde_json::json!({
                "status": "ok",
                "fingerprint": index.table().fingerprint,
                "rows": index.len(),
            }),
        ),
        "/neighbors" => {
            let mut tumor_id = None;
            let mut k = None;
            for (key, value) in form_urlencoded::parse(query.as_bytes()) {
                match key.as_ref() {
                    "tumor_id" => tumor_id = Some(value.into_owned()),
                    "k" => k = Some(value.into_owned()),
                    _ => {}
                }
            }
            let Some(tumor_id) = tumor_id else {
                return (400, error_body("missing tumor_id"));
            };
            let k = match k.as_deref().map(str::parse::<usize>) {
                None => 5,
                Some(Ok(k)) if k >= 1 => k,
                _ => return (400, error_body("k must be a positive integer")),
            };
            match neighbors_of(index, &tumor_id, k) {
                Ok(r) => (200, serde_json::to_value(r).expect("serializable")),
                Err((status, msg)) => (status, error_body(&msg)),
            }
        }
        _ => (404, error_body("no such endpoint")),
    }
}

fn handle(index: &RetrievalIndex, req: Request) {
    let (status, body) = route(index, req.method(), req.url());
    if let Err(e) = req.respond(json_response(status, &body)) {
        log::warn!("failed to send response: {e}");
    }
}
