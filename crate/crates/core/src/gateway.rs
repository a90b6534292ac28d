//! WebSocket bridge for browser clients. Each binary WebSocket message carries
//! exactly one protocol frame, byte-identical to the TCP encoding.

use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{Receiver, Sender, TryRecvError};
use std::time::Duration;

use tungstenite::{Message as WsMessage, WebSocket};

use crate::error::{Error, Result};
use crate::wire::{decode, Frame};

const POLL: Duration = Duration::from_millis(5);

/// Counts kept while a client is attached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BridgeStats {
    pub sent: u64,
    pub received: u64,
    pub rejected: u64,
    /// The bridge ended because the server side went away.
    pub closed_by_server: bool,
}

fn ws_err(e: tungstenite::Error) -> Error {
    match e {
        tungstenite::Error::Io(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

/// Accept one browser client and bridge until it disconnects or `outgoing`
/// is closed. Encoded frames from `outgoing` go out as binary messages;
/// decoded frames from the client go to `incoming`. Messages that are not a
/// single valid frame are dropped and counted.
pub fn serve_one(listener: &TcpListener, outgoing: &Receiver<Vec<u8>>, incoming: &Sender<Frame>) -> Result<BridgeStats> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Format(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    bridge(&mut ws, outgoing, incoming)
}

/// Serve browser clients one after another until `outgoing` is closed.
/// Frames produced while no client is attached are dropped.
pub fn run(listener: TcpListener, outgoing: Receiver<Vec<u8>>, incoming: Sender<Frame>) -> Result<BridgeStats> {
    listener.set_nonblocking(true)?;
    let mut total = BridgeStats::default();
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                let Ok(mut ws) = tungstenite::accept(stream) else {
                    continue;
                };
                ws.get_ref().set_read_timeout(Some(POLL))?;
                let stats = match bridge(&mut ws, &outgoing, &incoming) {
                    Ok(s) => s,
                    Err(Error::Io(_)) => BridgeStats::default(),
                    Err(e) => return Err(e),
                };
                total.sent += stats.sent;
                total.received += stats.received;
                total.rejected += stats.rejected;
                if stats.closed_by_server {
                    return Ok(total);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => loop {
                match outgoing.try_recv() {
                    Ok(_) => {}
                    Err(TryRecvError::Empty) => {
                        std::thread::sleep(POLL);
                        break;
                    }
                    Err(TryRecvError::Disconnected) => return Ok(total),
                }
            },
            Err(e) => return Err(e.into()),
        }
    }
}

fn bridge(ws: &mut WebSocket<TcpStream>, outgoing: &Receiver<Vec<u8>>, incoming: &Sender<Frame>) -> Result<BridgeStats> {
    let mut stats = BridgeStats::default();
    loop {
        loop {
            match outgoing.try_recv() {
                Ok(bytes) => {
                    ws.send(WsMessage::Binary(bytes.into())).map_err(ws_err)?;
                    stats.sent += 1;
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    stats.closed_by_server = true;
                    return Ok(stats);
                }
            }
        }
        match ws.read() {
            Ok(WsMessage::Binary(data)) => match decode(&data) {
                Ok((frame, used)) if used == data.len() => {
                    stats.received += 1;
                    if incoming.send(frame).is_err() {
                        stats.closed_by_server = true;
                        return Ok(stats);
                    }
                }
                Ok(_) | Err(_) => stats.rejected += 1,
            },
            Ok(WsMessage::Close(_)) => return Ok(stats),
            Ok(_) => {}
            Err(e) if would_block(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(stats),
            Err(e) => return Err(ws_err(e)),
        }
    }
}

/// Minimal blocking client, used by tests and the CLI smoke path.
pub struct Client {
    ws: WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub fn connect(url: &str) -> Result<Self> {
        let (ws, _) = tungstenite::connect(url).map_err(ws_err)?;
        Ok(Self { ws })
    }

    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.ws.send(WsMessage::Binary(bytes.into())).map_err(ws_err)
    }

    /// Next binary payload, `None` once the server closes.
    pub fn recv_raw(&mut self) -> Result<Option<Vec<u8>>> {
        loop {
            match self.ws.read() {
                Ok(WsMessage::Binary(b)) => return Ok(Some(b.to_vec())),
                Ok(WsMessage::Close(_)) => return Ok(None),
                Ok(_) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
                Err(e) => return Err(ws_err(e)),
            }
        }
    }

    pub fn close(mut self) -> Result<()> {
        let _ = self.ws.close(None);
        loop {
            match self.ws.read() {
                Ok(_) => {}
                Err(_) => return Ok(()),
            }
        }
    }
}
