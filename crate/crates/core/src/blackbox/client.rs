use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{read_frame, write_frame, ErrorCode, InferenceRequest, InferenceResponse, Message, ServiceStatus};
use crate::error::{Error, Result};

/// Blocking client for the socket service. Connections are pooled so that
/// concurrent callers each get their own stream.
pub struct SocketClient {
    addr: SocketAddr,
    pool: Mutex<Vec<TcpStream>>,
    next_id: AtomicU64,
    timeout: Duration,
}

impl SocketClient {
    pub fn connect(endpoint: &str) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Service(format!("cannot resolve {endpoint}: {e}")))?
            .next()
            .ok_or_else(|| Error::Service(format!("no address for {endpoint}")))?;
        let client =
            Self { addr, pool: Mutex::new(Vec::new()), next_id: AtomicU64::new(1), timeout: Duration::from_secs(60) };
        let stream = client.open()?;
        client.pool.lock().unwrap().push(stream);
        Ok(client)
    }

    pub fn endpoint(&self) -> SocketAddr {
        self.addr
    }

    fn open(&self) -> Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, Duration::from_secs(5))
            .map_err(|e| Error::Service(format!("cannot connect to {}: {e}", self.addr)))?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(self.timeout))?;
        Ok(s)
    }

    fn roundtrip(&self, msg: &Message) -> Result<Message> {
        let pooled = self.pool.lock().unwrap().pop();
        let mut stream = match pooled {
            Some(s) => s,
            None => self.open()?,
        };
        write_frame(&mut stream, msg).map_err(|e| Error::Service(format!("send failed: {e}")))?;
        let body = read_frame(&mut stream)
            .map_err(|e| Error::Service(format!("receive failed: {e}")))?
            .ok_or_else(|| Error::Service("service closed the connection".into()))?;
        let reply = Message::decode(&body)?;
        self.pool.lock().unwrap().push(stream);
        if reply.request_id() != msg.request_id() {
            return Err(Error::Protocol(format!(
                "reply id {} does not match request id {}",
                reply.request_id(),
                msg.request_id()
            )));
        }
        Ok(reply)
    }

    pub fn query(&self, items: Vec<super::QueryItem>) -> Result<InferenceResponse> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        match self.roundtrip(&Message::Query(InferenceRequest { request_id, items }))? {
            Message::QueryOk(r) => Ok(r),
            Message::Error { code, calls_used, budget, message, .. } => Err(remote_error(code, calls_used, budget, message)),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn status(&self) -> Result<ServiceStatus> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        match self.roundtrip(&Message::Status { request_id })? {
            Message::StatusOk { status, .. } => Ok(status),
            Message::Error { code, calls_used, budget, message, .. } => Err(remote_error(code, calls_used, budget, message)),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

fn remote_error(code: ErrorCode, used: u64, budget: u64, message: String) -> Error {
    match code {
        ErrorCode::Budget => Error::Budget { used, budget, requested: 1 },
        ErrorCode::Protocol => Error::Protocol(message),
        ErrorCode::Service => Error::Service(message),
    }
}
