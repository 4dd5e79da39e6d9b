//! Metered black-box access to a frozen teacher.
//!
//! Callers see logits for (prompt, tokens) pairs and nothing else. The same
//! [`BlackBox`] handle works in-process or over a TCP socket.

mod client;
mod service;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use client::SocketClient;
pub use service::{serve, ServerHandle, TeacherService};
pub use wire::{InferenceResponse, QueryItem, ServiceStatus};

use crate::error::Result;

enum Transport {
    Local(Arc<TeacherService>),
    Socket(SocketClient),
}

/// Client-side handle. Counts the calls made through this handle in addition
/// to the authoritative server-side counter.
pub struct BlackBox {
    transport: Transport,
    calls: AtomicU64,
}

impl BlackBox {
    pub fn local(service: Arc<TeacherService>) -> Self {
        Self { transport: Transport::Local(service), calls: AtomicU64::new(0) }
    }

    pub fn connect(endpoint: &str) -> Result<Self> {
        Ok(Self { transport: Transport::Socket(SocketClient::connect(endpoint)?), calls: AtomicU64::new(0) })
    }

    /// One metered call; returns one logit vector per item.
    pub fn query(&self, items: Vec<QueryItem>) -> Result<Vec<Vec<f64>>> {
        let resp = match &self.transport {
            Transport::Local(s) => s.process(&wire::InferenceRequest { request_id: 0, items })?,
            Transport::Socket(c) => c.query(items)?,
        };
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(resp.logits)
    }

    pub fn query_one(&self, prompt: &[f64], token_ids: &[u32]) -> Result<Vec<f64>> {
        let mut out = self.query(vec![QueryItem { prompt: prompt.to_vec(), token_ids: token_ids.to_vec() }])?;
        Ok(out.pop().unwrap_or_default())
    }

    pub fn status(&self) -> Result<ServiceStatus> {
        match &self.transport {
            Transport::Local(s) => Ok(s.status()),
            Transport::Socket(c) => c.status(),
        }
    }

    /// Successful calls made through this handle.
    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
