//! Live telemetry over WebSocket: snapshots out, driver commands in.
//!
//! Clients connect to `ws://host:port/`; adding `?role=driver` asks for the
//! single driver seat, anything else joins as a viewer. The simulation loop
//! owns all state and talks to connection threads through two queues.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;
use tungstenite::handshake::server::{Request, Response};
use tungstenite::{Message, WebSocket};

use super::engine::{RunOutput, SimError, Simulation};
use super::telemetry::{InboundFrame, OutboundFrame};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot listen on port {port}: {source}")]
    Bind { port: u16, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Driver,
    Viewer,
}

/// Messages from connection threads to the simulation loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Command { frame: InboundFrame, received_t: f64 },
    DriverAttached,
    DriverDetached,
}

#[derive(Default)]
struct Hub {
    subscribers: Mutex<Vec<(u64, Sender<Arc<str>>)>>,
    driver: Mutex<Option<u64>>,
    sim_time: AtomicU64,
    stop: AtomicBool,
    next_id: AtomicU64,
}

impl Hub {
    fn now(&self) -> f64 {
        f64::from_bits(self.sim_time.load(Ordering::Acquire))
    }

    fn broadcast(&self, frame: &Arc<str>) {
        let mut subs = self.subscribers.lock().expect("subscriber list");
        subs.retain(|(_, tx)| tx.send(frame.clone()).is_ok());
    }
}

/// Accepts WebSocket clients on a background thread.
pub struct TelemetryServer {
    addr: SocketAddr,
    hub: Arc<Hub>,
    inbound: Receiver<Inbound>,
    acceptor: Option<JoinHandle<()>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl TelemetryServer {
    /// Listens on `127.0.0.1:port`; port 0 picks a free port.
    pub fn bind(port: u16) -> Result<Self, ServeError> {
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|source| ServeError::Bind { port, source })?;
        let addr = listener.local_addr().map_err(|source| ServeError::Bind { port, source })?;
        let hub = Arc::new(Hub::default());
        let (tx, rx) = mpsc::channel();
        let workers = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let hub = hub.clone();
            let workers = workers.clone();
            thread::spawn(move || accept_loop(listener, hub, tx, workers))
        };
        Ok(Self {
            addr,
            hub,
            inbound: rx,
            acceptor: Some(acceptor),
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Tells connection threads what the current simulation time is.
    pub fn set_time(&self, t: f64) {
        self.hub.sim_time.store(t.to_bits(), Ordering::Release);
    }

    pub fn drain(&self) -> Vec<Inbound> {
        self.inbound.try_iter().collect()
    }

    pub fn broadcast(&self, frame: &OutboundFrame) {
        self.hub.broadcast(&Arc::from(frame.to_json()));
    }

    pub fn clients(&self) -> usize {
        self.hub.subscribers.lock().expect("subscriber list").len()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.hub.stop.store(true, Ordering::Release);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let workers: Vec<_> = self.workers.lock().expect("worker list").drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
    }
}

impl Drop for TelemetryServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop();
        }
    }
}

fn accept_loop(listener: TcpListener, hub: Arc<Hub>, tx: Sender<Inbound>, workers: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    for stream in listener.incoming() {
        if hub.stop.load(Ordering::Acquire) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let hub = hub.clone();
        let tx = tx.clone();
        let handle = thread::spawn(move || serve_connection(stream, hub, tx));
        workers.lock().expect("worker list").push(handle);
    }
}

fn role_of(query: Option<&str>) -> Role {
    let driver = query
        .unwrap_or("")
        .split('&')
        .any(|kv| kv.eq_ignore_ascii_case("role=driver"));
    if driver {
        Role::Driver
    } else {
        Role::Viewer
    }
}

fn send(ws: &mut WebSocket<TcpStream>, frame: &OutboundFrame) -> bool {
    ws.send(Message::text(frame.to_json())).is_ok()
}

#[allow(clippy::result_large_err)]
fn serve_connection(stream: TcpStream, hub: Arc<Hub>, tx: Sender<Inbound>) {
    let mut role = Role::Viewer;
    let callback = |req: &Request, resp: Response| {
        role = role_of(req.uri().query());
        Ok(resp)
    };
    let Ok(mut ws) = tungstenite::accept_hdr(stream, callback) else {
        return;
    };
    let id = hub.next_id.fetch_add(1, Ordering::Relaxed);

    if role == Role::Driver {
        let mut seat = hub.driver.lock().expect("driver seat");
        if seat.is_some() {
            drop(seat);
            let refusal = OutboundFrame::Refusal {
                t: hub.now(),
                requested: None,
                reason: "driver_session_taken".into(),
            };
            send(&mut ws, &refusal);
            let _ = ws.close(None);
            let _ = ws.flush();
            return;
        }
        *seat = Some(id);
        let _ = tx.send(Inbound::DriverAttached);
    }

    let (out_tx, out_rx) = mpsc::channel::<Arc<str>>();
    hub.subscribers.lock().expect("subscriber list").push((id, out_tx));
    let _ = ws.get_ref().set_read_timeout(Some(POLL));

    loop {
        if hub.stop.load(Ordering::Acquire) {
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
        let mut alive = true;
        for frame in out_rx.try_iter() {
            if ws.send(Message::text(frame.to_string())).is_err() {
                alive = false;
                break;
            }
        }
        if !alive {
            break;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = match (InboundFrame::parse(text.as_str()), role) {
                    (Ok(frame), Role::Driver) => {
                        let _ = tx.send(Inbound::Command { frame, received_t: hub.now() });
                        None
                    }
                    (Ok(_), Role::Viewer) => Some("viewer sessions cannot send commands".to_string()),
                    (Err(e), _) => Some(format!("malformed frame: {e}")),
                };
                if let Some(message) = reply {
                    if !send(&mut ws, &OutboundFrame::Error { message }) {
                        break;
                    }
                }
            }
            Ok(Message::Binary(_)) => {
                let message = "binary frames are not supported".to_string();
                if !send(&mut ws, &OutboundFrame::Error { message }) {
                    break;
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }

    hub.subscribers.lock().expect("subscriber list").retain(|(sid, _)| *sid != id);
    if role == Role::Driver {
        let mut seat = hub.driver.lock().expect("driver seat");
        if *seat == Some(id) {
            *seat = None;
            let _ = tx.send(Inbound::DriverDetached);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second; zero or less runs unpaced.
    pub realtime_factor: f64,
    /// Snapshot frames per wall-clock second.
    pub snapshot_rate: f64,
}

/// Runs `sim` to completion while serving telemetry on `server`.
pub fn run_interactive(mut sim: Simulation, server: &TelemetryServer, opts: ServeOptions) -> Result<RunOutput, ServeError> {
    let start = Instant::now();
    let period = Duration::from_secs_f64(1.0 / opts.snapshot_rate.max(0.1));
    let mut next_snapshot = start;
    let mut paused_wall = Duration::ZERO;
    let mut pause_began: Option<Instant> = None;
    let dt = sim.dt();
    server.set_time(sim.t());

    while !sim.is_done() {
        for msg in server.drain() {
            match msg {
                Inbound::DriverAttached => sim.attach_driver(),
                Inbound::DriverDetached => sim.detach_driver(),
                Inbound::Command { frame, received_t } => sim.apply_command(&frame, received_t),
            }
        }
        match (sim.paused(), pause_began) {
            (true, None) => pause_began = Some(Instant::now()),
            (false, Some(since)) => {
                paused_wall += since.elapsed();
                pause_began = None;
            }
            _ => {}
        }
        if !sim.paused() {
            sim.step()?;
            server.set_time(sim.t());
        }
        for frame in sim.take_outbox() {
            server.broadcast(&frame);
        }
        let now = Instant::now();
        if now >= next_snapshot {
            server.broadcast(&OutboundFrame::Snapshot(Box::new(sim.snapshot())));
            next_snapshot = now + period;
        }
        if sim.paused() {
            thread::sleep(POLL);
        } else if opts.realtime_factor > 0.0 {
            let due = start + paused_wall + Duration::from_secs_f64(sim.t() / opts.realtime_factor);
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        } else if sim.t() % (100.0 * dt) < 0.5 * dt {
            thread::yield_now();
        }
    }
    server.broadcast(&OutboundFrame::Snapshot(Box::new(sim.snapshot())));
    Ok(sim.finish())
}
