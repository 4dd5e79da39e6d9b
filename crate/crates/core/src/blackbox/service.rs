use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::wire::{read_frame, write_frame, ErrorCode, InferenceRequest, InferenceResponse, Message, ServiceStatus};
use crate::error::{Error, Result};
use crate::models::{ModelInput, ModelParams};

/// Frozen teacher behind a metered, forward-only interface.
///
/// The parameters are private and never handed out; the call counter is the
/// only mutable state.
pub struct TeacherService {
    teacher: ModelParams,
    budget: u64,
    calls_used: AtomicU64,
    checksum: String,
}

impl TeacherService {
    /// `checksum` is the SHA-256 of the teacher's serialized checkpoint.
    pub fn new(mut teacher: ModelParams, budget: u64) -> Self {
        teacher.set_trainable(false);
        let checksum = teacher.to_checkpoint().checksum();
        Self { teacher, budget, calls_used: AtomicU64::new(0), checksum }
    }

    pub fn status(&self) -> ServiceStatus {
        ServiceStatus {
            calls_used: self.calls_used.load(Ordering::SeqCst),
            budget: self.budget,
            checksum: self.checksum.clone(),
        }
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    fn validate(&self, req: &InferenceRequest) -> Result<()> {
        if req.items.is_empty() {
            return Err(Error::Protocol("query carries no items".into()));
        }
        for (i, item) in req.items.iter().enumerate() {
            self.teacher
                .validate_input(&ModelInput { prompt: item.prompt.clone(), token_ids: item.token_ids.clone() })
                .map_err(|e| Error::Protocol(format!("item {i}: {e}")))?;
            if item.prompt.iter().any(|v| !v.is_finite()) {
                return Err(Error::Protocol(format!("item {i}: prompt contains non-finite values")));
            }
        }
        Ok(())
    }

    /// Reserves one call, failing without side effects when the budget is spent.
    fn reserve(&self) -> Result<u64> {
        self.calls_used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| (used < self.budget).then_some(used + 1))
            .map(|prev| prev + 1)
            .map_err(|used| Error::Budget { used, budget: self.budget, requested: 1 })
    }

    /// Validates, meters and evaluates one request.
    pub fn process(&self, req: &InferenceRequest) -> Result<InferenceResponse> {
        self.validate(req)?;
        let used = self.reserve()?;
        let logits = req
            .items
            .iter()
            .map(|item| {
                self.teacher.forward(&ModelInput { prompt: item.prompt.clone(), token_ids: item.token_ids.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Service("teacher produced non-finite logits".into()));
        }
        Ok(InferenceResponse { request_id: req.request_id, calls_remaining: self.budget - used, logits })
    }

    fn answer(&self, msg: Message) -> Message {
        let request_id = msg.request_id();
        let result = match msg {
            Message::Query(req) => self.process(&req).map(Message::QueryOk),
            Message::Status { request_id } => Ok(Message::StatusOk { request_id, status: self.status() }),
            other => Err(Error::Protocol(format!("unexpected client message {other:?}"))),
        };
        result.unwrap_or_else(|e| self.error_message(request_id, &e))
    }

    fn error_message(&self, request_id: u64, e: &Error) -> Message {
        let code = match e {
            Error::Budget { .. } => ErrorCode::Budget,
            Error::Protocol(_) => ErrorCode::Protocol,
            _ => ErrorCode::Service,
        };
        Message::Error {
            request_id,
            code,
            calls_used: self.calls_used.load(Ordering::SeqCst),
            budget: self.budget,
            message: e.to_string(),
        }
    }

    fn handle_connection(&self, mut stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        while let Some(body) = read_frame(&mut stream)? {
            let reply = match Message::decode(&body) {
                Ok(msg) => self.answer(msg),
                Err(e) => self.error_message(0, &e),
            };
            write_frame(&mut stream, &reply)?;
        }
        Ok(())
    }
}

/// A running socket server. Dropping it stops accepting new connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    service: Arc<TeacherService>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> &Arc<TeacherService> {
        &self.service
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

/// Binds `bind` (e.g. `127.0.0.1:0`) and answers queries on one thread per connection.
pub fn serve(service: Arc<TeacherService>, bind: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind).map_err(|e| Error::Service(format!("cannot bind {bind}: {e}")))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let (stop, service) = (stop.clone(), service.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let service = service.clone();
                std::thread::spawn(move || {
                    if let Err(e) = service.handle_connection(stream) {
                        log::debug!("connection closed: {e}");
                    }
                });
            }
        })
    };
    log::info!("teacher service listening on {addr}");
    Ok(ServerHandle { addr, stop, accept: Some(accept), service })
}
